use super::{Tensor, LOG_GUARD};

/// Index of a node on the tape.
pub type NodeId = usize;

/// One recorded operation. Shape checks happen at record time; an invalid
/// composition is a bug in the caller, so they are plain assertions.
#[derive(Clone, Debug)]
pub(crate) enum Op {
    Leaf,
    /// Row lookup into an embedding table by token index.
    Embed { indices: Vec<u32> },
    /// Keeps the listed rows of a 2-D tensor, in the given order.
    GatherRows { rows: Vec<usize> },
    Row { index: usize },
    Col { index: usize },
    MatMul,
    MatVec,
    /// 1-D convolution over rows; kernel laid out as [channels, width * cols].
    Conv1d { width: usize },
    /// Broadcast-add a vector to every row.
    AddRow,
    /// Scale row i by the i-th entry of a vector.
    ScaleRows,
    /// Column-wise max over rows; winning row per column recorded forward.
    MaxOverTime { argmax: Vec<usize> },
    Relu,
    Sigmoid,
    Tanh,
    Abs,
    /// Softmax over the last dimension, guarded by max subtraction.
    Softmax,
    /// ln(max(x, LOG_GUARD)) elementwise.
    LogGuard,
    Concat,
    StackRows,
    Flatten,
    Transpose,
    Add,
    Sub,
    Mul,
    Neg,
    MulConst(f64),
    AddConst,
    /// Divide every entry of the first input by the second (scalar) input.
    DivScalar,
    SumAll,
    MeanAll,
    /// Mean over rows of a 2-D tensor.
    MeanRows,
    /// Single entry of a vector as a scalar.
    Pick { index: usize },
    /// Cosine similarity of two vectors (0 when either norm vanishes).
    Cosine,
}

#[derive(Clone, Debug)]
pub(crate) struct Node {
    pub(crate) op: Op,
    pub(crate) inputs: Vec<NodeId>,
    pub(crate) value: Tensor,
    pub(crate) requires_grad: bool,
}

/// Append-only record of operations. Non-leaf nodes always follow their
/// inputs, so one reverse sweep visits each node exactly once.
#[derive(Debug, Default)]
pub struct Tape {
    pub(crate) nodes: Vec<Node>,
    pub(crate) params: Vec<NodeId>,
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Value computed at `id`.
    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id].value
    }

    /// Node ids of all registered parameters, in registration order.
    pub fn param_ids(&self) -> &[NodeId] {
        &self.params
    }

    fn push(&mut self, op: Op, inputs: Vec<NodeId>, value: Tensor) -> NodeId {
        let requires_grad = value.requires_grad()
            || inputs.iter().any(|&i| self.nodes[i].requires_grad);
        let id = self.nodes.len();
        self.nodes.push(Node { op, inputs, value, requires_grad });
        id
    }

    /// Registers a trainable parameter leaf.
    pub fn param(&mut self, tensor: Tensor) -> NodeId {
        let id = self.push(Op::Leaf, vec![], tensor.with_grad());
        self.params.push(id);
        id
    }

    /// Registers a non-trainable leaf (inputs, masks, reference vectors).
    pub fn constant(&mut self, tensor: Tensor) -> NodeId {
        self.push(Op::Leaf, vec![], tensor)
    }

    pub fn scalar(&mut self, v: f64) -> NodeId {
        self.constant(Tensor::scalar(v))
    }

    // ---- structure ops ------------------------------------------------

    pub fn embed(&mut self, table: NodeId, indices: &[u32]) -> NodeId {
        let t = self.value(table);
        assert_eq!(t.shape().len(), 2, "embed wants a 2-D table");
        let (v, e) = (t.rows(), t.cols());
        let mut out = Vec::with_capacity(indices.len() * e);
        for &ix in indices {
            let ix = ix as usize;
            assert!(ix < v, "token index {} out of vocabulary {}", ix, v);
            out.extend_from_slice(&t.values()[ix * e..(ix + 1) * e]);
        }
        let value = Tensor::new(vec![indices.len(), e], out).unwrap();
        self.push(Op::Embed { indices: indices.to_vec() }, vec![table], value)
    }

    pub fn gather_rows(&mut self, x: NodeId, rows: &[usize]) -> NodeId {
        let t = self.value(x);
        assert_eq!(t.shape().len(), 2, "gather_rows wants a 2-D input");
        let (r, c) = (t.rows(), t.cols());
        let mut out = Vec::with_capacity(rows.len() * c);
        for &row in rows {
            assert!(row < r, "row {} out of bounds {}", row, r);
            out.extend_from_slice(&t.values()[row * c..(row + 1) * c]);
        }
        let value = Tensor::new(vec![rows.len(), c], out).unwrap();
        self.push(Op::GatherRows { rows: rows.to_vec() }, vec![x], value)
    }

    pub fn row(&mut self, x: NodeId, index: usize) -> NodeId {
        let t = self.value(x);
        assert_eq!(t.shape().len(), 2);
        assert!(index < t.rows());
        let c = t.cols();
        let value = Tensor::vector(t.values()[index * c..(index + 1) * c].to_vec());
        self.push(Op::Row { index }, vec![x], value)
    }

    pub fn col(&mut self, x: NodeId, index: usize) -> NodeId {
        let t = self.value(x);
        assert_eq!(t.shape().len(), 2);
        assert!(index < t.cols());
        let (r, c) = (t.rows(), t.cols());
        let out: Vec<f64> = (0..r).map(|i| t.values()[i * c + index]).collect();
        self.push(Op::Col { index }, vec![x], Tensor::vector(out))
    }

    pub fn concat(&mut self, parts: &[NodeId]) -> NodeId {
        assert!(!parts.is_empty());
        let mut out = Vec::new();
        for &p in parts {
            let t = self.value(p);
            assert_eq!(t.shape().len(), 1, "concat wants vectors");
            out.extend_from_slice(t.values());
        }
        self.push(Op::Concat, parts.to_vec(), Tensor::vector(out))
    }

    pub fn stack_rows(&mut self, rows: &[NodeId]) -> NodeId {
        assert!(!rows.is_empty());
        let c = self.value(rows[0]).len();
        let mut out = Vec::with_capacity(rows.len() * c);
        for &r in rows {
            let t = self.value(r);
            assert_eq!(t.shape().len(), 1);
            assert_eq!(t.len(), c, "stack_rows wants equal-length vectors");
            out.extend_from_slice(t.values());
        }
        let value = Tensor::new(vec![rows.len(), c], out).unwrap();
        self.push(Op::StackRows, rows.to_vec(), value)
    }

    pub fn flatten(&mut self, x: NodeId) -> NodeId {
        let t = self.value(x);
        assert_eq!(t.shape().len(), 2);
        let value = Tensor::vector(t.values().to_vec());
        self.push(Op::Flatten, vec![x], value)
    }

    pub fn transpose(&mut self, x: NodeId) -> NodeId {
        let t = self.value(x);
        assert_eq!(t.shape().len(), 2);
        let (r, c) = (t.rows(), t.cols());
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = t.values()[i * c + j];
            }
        }
        let value = Tensor::new(vec![c, r], out).unwrap();
        self.push(Op::Transpose, vec![x], value)
    }

    // ---- linear algebra ------------------------------------------------

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (ta, tb) = (self.value(a), self.value(b));
        assert_eq!(ta.shape().len(), 2);
        assert_eq!(tb.shape().len(), 2);
        assert_eq!(ta.cols(), tb.rows(), "matmul inner dims differ");
        let (m, k, n) = (ta.rows(), ta.cols(), tb.cols());
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for p in 0..k {
                let av = ta.values()[i * k + p];
                if av == 0.0 {
                    continue;
                }
                for j in 0..n {
                    out[i * n + j] += av * tb.values()[p * n + j];
                }
            }
        }
        let value = Tensor::new(vec![m, n], out).unwrap();
        self.push(Op::MatMul, vec![a, b], value)
    }

    pub fn matvec(&mut self, m: NodeId, v: NodeId) -> NodeId {
        let (tm, tv) = (self.value(m), self.value(v));
        assert_eq!(tm.shape().len(), 2);
        assert_eq!(tv.shape().len(), 1);
        assert_eq!(tm.cols(), tv.len(), "matvec dims differ");
        let (r, c) = (tm.rows(), tm.cols());
        let out: Vec<f64> = (0..r)
            .map(|i| {
                (0..c).map(|j| tm.values()[i * c + j] * tv.values()[j]).sum()
            })
            .collect();
        self.push(Op::MatVec, vec![m, v], Tensor::vector(out))
    }

    /// 1-D convolution over the rows of `x` (`[len, cols]`) with a kernel
    /// stored as `[channels, width * cols]`. Output is
    /// `[len - width + 1, channels]`.
    pub fn conv1d(&mut self, x: NodeId, kernel: NodeId, width: usize) -> NodeId {
        let (tx, tk) = (self.value(x), self.value(kernel));
        assert_eq!(tx.shape().len(), 2);
        assert_eq!(tk.shape().len(), 2);
        let (len, cols) = (tx.rows(), tx.cols());
        assert!(width >= 1 && width <= len, "kernel width {} vs length {}", width, len);
        assert_eq!(tk.cols(), width * cols, "kernel layout mismatch");
        let channels = tk.rows();
        let windows = len - width + 1;
        let mut out = vec![0.0; windows * channels];
        for p in 0..windows {
            let patch = &tx.values()[p * cols..(p + width) * cols];
            for o in 0..channels {
                let k = &tk.values()[o * width * cols..(o + 1) * width * cols];
                out[p * channels + o] =
                    patch.iter().zip(k.iter()).map(|(a, b)| a * b).sum();
            }
        }
        let value = Tensor::new(vec![windows, channels], out).unwrap();
        self.push(Op::Conv1d { width }, vec![x, kernel], value)
    }

    pub fn add_row(&mut self, x: NodeId, bias: NodeId) -> NodeId {
        let (tx, tb) = (self.value(x), self.value(bias));
        assert_eq!(tx.shape().len(), 2);
        assert_eq!(tb.shape().len(), 1);
        assert_eq!(tx.cols(), tb.len());
        let (r, c) = (tx.rows(), tx.cols());
        let mut out = tx.values().to_vec();
        for i in 0..r {
            for j in 0..c {
                out[i * c + j] += tb.values()[j];
            }
        }
        let value = Tensor::new(vec![r, c], out).unwrap();
        self.push(Op::AddRow, vec![x, bias], value)
    }

    pub fn scale_rows(&mut self, x: NodeId, scale: NodeId) -> NodeId {
        let (tx, ts) = (self.value(x), self.value(scale));
        assert_eq!(tx.shape().len(), 2);
        assert_eq!(ts.shape().len(), 1);
        assert_eq!(tx.rows(), ts.len());
        let (r, c) = (tx.rows(), tx.cols());
        let mut out = tx.values().to_vec();
        for i in 0..r {
            let s = ts.values()[i];
            for j in 0..c {
                out[i * c + j] *= s;
            }
        }
        let value = Tensor::new(vec![r, c], out).unwrap();
        self.push(Op::ScaleRows, vec![x, scale], value)
    }

    /// Column-wise max over all rows. Ties go to the first (lowest) row, so
    /// the backward routing is deterministic.
    pub fn max_over_time(&mut self, x: NodeId) -> NodeId {
        let t = self.value(x);
        assert_eq!(t.shape().len(), 2);
        assert!(t.rows() >= 1);
        let (r, c) = (t.rows(), t.cols());
        let mut best = vec![0usize; c];
        let mut out = t.values()[0..c].to_vec();
        for i in 1..r {
            for j in 0..c {
                let v = t.values()[i * c + j];
                if v > out[j] {
                    out[j] = v;
                    best[j] = i;
                }
            }
        }
        self.push(Op::MaxOverTime { argmax: best }, vec![x], Tensor::vector(out))
    }

    // ---- elementwise ---------------------------------------------------

    fn unary(&mut self, op: Op, x: NodeId, f: impl Fn(f64) -> f64) -> NodeId {
        let t = self.value(x);
        let out: Vec<f64> = t.values().iter().map(|&v| f(v)).collect();
        let value = Tensor::new(t.shape().to_vec(), out).unwrap();
        self.push(op, vec![x], value)
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        // Written to propagate NaN (f64::max would swallow it).
        self.unary(Op::Relu, x, |v| if v < 0.0 { 0.0 } else { v })
    }

    pub fn sigmoid(&mut self, x: NodeId) -> NodeId {
        self.unary(Op::Sigmoid, x, |v| 1.0 / (1.0 + (-v).exp()))
    }

    pub fn tanh(&mut self, x: NodeId) -> NodeId {
        self.unary(Op::Tanh, x, f64::tanh)
    }

    pub fn abs(&mut self, x: NodeId) -> NodeId {
        self.unary(Op::Abs, x, f64::abs)
    }

    pub fn neg(&mut self, x: NodeId) -> NodeId {
        self.unary(Op::Neg, x, |v| -v)
    }

    /// ln(max(x, 1e-12)); keeps degenerate probabilities finite while
    /// still propagating NaN from a diverged upstream.
    pub fn log_guard(&mut self, x: NodeId) -> NodeId {
        self.unary(Op::LogGuard, x, |v| if v < LOG_GUARD { LOG_GUARD } else { v }.ln())
    }

    pub fn mul_const(&mut self, x: NodeId, c: f64) -> NodeId {
        self.unary(Op::MulConst(c), x, |v| v * c)
    }

    pub fn add_const(&mut self, x: NodeId, c: f64) -> NodeId {
        self.unary(Op::AddConst, x, |v| v + c)
    }

    fn binary_same_shape(&mut self, op: Op, a: NodeId, b: NodeId, f: impl Fn(f64, f64) -> f64) -> NodeId {
        let (ta, tb) = (self.value(a), self.value(b));
        assert_eq!(ta.shape(), tb.shape(), "elementwise op on mismatched shapes");
        let out: Vec<f64> = ta
            .values()
            .iter()
            .zip(tb.values().iter())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let value = Tensor::new(ta.shape().to_vec(), out).unwrap();
        self.push(op, vec![a, b], value)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.binary_same_shape(Op::Add, a, b, |x, y| x + y)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.binary_same_shape(Op::Sub, a, b, |x, y| x - y)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.binary_same_shape(Op::Mul, a, b, |x, y| x * y)
    }

    pub fn div_scalar(&mut self, x: NodeId, s: NodeId) -> NodeId {
        assert!(self.value(s).is_scalar(), "div_scalar divisor must be scalar");
        let d = self.value(s).item();
        let t = self.value(x);
        let out: Vec<f64> = t.values().iter().map(|&v| v / d).collect();
        let value = Tensor::new(t.shape().to_vec(), out).unwrap();
        self.push(Op::DivScalar, vec![x, s], value)
    }

    // ---- softmax / reductions -------------------------------------------

    /// Softmax over the last dimension (each row of a 2-D tensor, or the
    /// whole vector). Uses max subtraction so large logits stay finite.
    pub fn softmax(&mut self, x: NodeId) -> NodeId {
        let t = self.value(x);
        let (rows, cols) = match t.shape().len() {
            1 => (1, t.len()),
            2 => (t.rows(), t.cols()),
            d => panic!("softmax on {}-D tensor", d),
        };
        assert!(cols >= 1);
        let mut out = vec![0.0; rows * cols];
        for i in 0..rows {
            let row = &t.values()[i * cols..(i + 1) * cols];
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut denom = 0.0;
            for j in 0..cols {
                let e = (row[j] - m).exp();
                out[i * cols + j] = e;
                denom += e;
            }
            for j in 0..cols {
                out[i * cols + j] /= denom;
            }
        }
        let value = Tensor::new(t.shape().to_vec(), out).unwrap();
        self.push(Op::Softmax, vec![x], value)
    }

    pub fn sum(&mut self, x: NodeId) -> NodeId {
        let s: f64 = self.value(x).values().iter().sum();
        self.push(Op::SumAll, vec![x], Tensor::scalar(s))
    }

    pub fn mean(&mut self, x: NodeId) -> NodeId {
        let t = self.value(x);
        assert!(!t.is_empty());
        let s: f64 = t.values().iter().sum::<f64>() / t.len() as f64;
        self.push(Op::MeanAll, vec![x], Tensor::scalar(s))
    }

    pub fn mean_rows(&mut self, x: NodeId) -> NodeId {
        let t = self.value(x);
        assert_eq!(t.shape().len(), 2);
        assert!(t.rows() >= 1);
        let (r, c) = (t.rows(), t.cols());
        let mut out = vec![0.0; c];
        for i in 0..r {
            for j in 0..c {
                out[j] += t.values()[i * c + j];
            }
        }
        for v in out.iter_mut() {
            *v /= r as f64;
        }
        self.push(Op::MeanRows, vec![x], Tensor::vector(out))
    }

    /// L1 norm: sum of absolute values, as a scalar node.
    pub fn l1(&mut self, x: NodeId) -> NodeId {
        let a = self.abs(x);
        self.sum(a)
    }

    pub fn pick(&mut self, x: NodeId, index: usize) -> NodeId {
        let t = self.value(x);
        assert_eq!(t.shape().len(), 1);
        assert!(index < t.len());
        let v = t.values()[index];
        self.push(Op::Pick { index }, vec![x], Tensor::scalar(v))
    }

    /// Cosine similarity of two vectors. Defined as 0 (with zero gradient)
    /// when either norm vanishes.
    pub fn cosine(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (ta, tb) = (self.value(a), self.value(b));
        assert_eq!(ta.shape().len(), 1);
        assert_eq!(ta.shape(), tb.shape(), "cosine on mismatched lengths");
        let dot: f64 = ta.values().iter().zip(tb.values()).map(|(x, y)| x * y).sum();
        let na = ta.values().iter().map(|v| v * v).sum::<f64>().sqrt();
        let nb = tb.values().iter().map(|v| v * v).sum::<f64>().sqrt();
        let c = if na == 0.0 || nb == 0.0 { 0.0 } else { dot / (na * nb) };
        self.push(Op::Cosine, vec![a, b], Tensor::scalar(c))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn softmax_symmetry() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::vector(vec![0.0, 0.0]));
        let s = tape.softmax(x);
        assert_eq!(tape.value(s).values(), &[0.5, 0.5]);
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut tape = Tape::new();
        let x = tape
            .constant(Tensor::matrix(2, 3, vec![1.0, 2.0, 3.0, -50.0, 0.0, 120.0]).unwrap());
        let s = tape.softmax(x);
        let v = tape.value(s).values();
        for row in 0..2 {
            let sum: f64 = v[row * 3..(row + 1) * 3].iter().sum();
            assert!((sum - 1.0).abs() < 1e-12, "row {} sums to {}", row, sum);
            assert!(v[row * 3..(row + 1) * 3].iter().all(|p| p.is_finite()));
        }
    }

    #[test]
    fn cosine_self_similarity() {
        let mut tape = Tape::new();
        let v = tape.constant(Tensor::vector(vec![0.3, -1.2, 4.0]));
        let c = tape.cosine(v, v);
        assert!((tape.value(c).item() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn cosine_zero_norm_defined() {
        let mut tape = Tape::new();
        let z = tape.constant(Tensor::vector(vec![0.0, 0.0]));
        let v = tape.constant(Tensor::vector(vec![1.0, 2.0]));
        let c = tape.cosine(z, v);
        assert_eq!(tape.value(c).item(), 0.0);
    }

    #[test]
    fn l1_direct_value() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::vector(vec![0.2, -0.3]));
        let n = tape.l1(x);
        assert!((tape.value(n).item() - 0.5).abs() < 1e-15);
    }

    #[test]
    fn embed_gathers_rows() {
        let mut tape = Tape::new();
        let table = tape.param(Tensor::matrix(3, 2, vec![0.0, 1.0, 2.0, 3.0, 4.0, 5.0]).unwrap());
        let e = tape.embed(table, &[2, 0, 2]);
        assert_eq!(tape.value(e).values(), &[4.0, 5.0, 0.0, 1.0, 4.0, 5.0]);
    }

    #[test]
    fn max_over_time_first_tie_wins() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::matrix(3, 1, vec![2.0, 2.0, 1.0]).unwrap());
        let m = tape.max_over_time(x);
        assert_eq!(tape.value(m).values(), &[2.0]);
        match &tape.nodes[m].op {
            Op::MaxOverTime { argmax } => assert_eq!(argmax, &vec![0]),
            _ => unreachable!(),
        }
    }

    #[test]
    fn log_guard_handles_zero() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::vector(vec![0.0, 1.0]));
        let l = tape.log_guard(x);
        assert!(tape.value(l).values()[0].is_finite());
        assert_eq!(tape.value(l).values()[1], 0.0);
    }
}
