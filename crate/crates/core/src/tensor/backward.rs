use std::collections::BTreeMap;

use super::tape::{Node, NodeId, Op, Tape};
use super::{Tensor, LOG_GUARD};
use crate::{Error, Result};

/// Gradients of a scalar root with respect to every registered parameter.
/// Parameters the root does not depend on get zero tensors.
#[derive(Debug, Clone)]
pub struct Gradients {
    by_param: BTreeMap<NodeId, Tensor>,
}

impl Gradients {
    pub fn get(&self, param: NodeId) -> Option<&Tensor> {
        self.by_param.get(&param)
    }

    pub fn iter(&self) -> impl Iterator<Item = (NodeId, &Tensor)> {
        self.by_param.iter().map(|(&k, v)| (k, v))
    }

    pub fn len(&self) -> usize {
        self.by_param.len()
    }

    pub fn is_empty(&self) -> bool {
        self.by_param.is_empty()
    }
}

impl Tape {
    /// Reverse sweep from a scalar `root`. The tape itself is not mutated,
    /// so repeating the call yields identical gradients.
    pub fn backward(&self, root: NodeId) -> Result<Gradients> {
        if root >= self.nodes.len() {
            return Err(Error::Contract(format!("backward root {} not on tape", root)));
        }
        if !self.nodes[root].value.is_scalar() {
            return Err(Error::Contract(format!(
                "backward root must be scalar, got shape {:?}",
                self.nodes[root].value.shape()
            )));
        }

        let mut grads: Vec<Option<Vec<f64>>> = vec![None; root + 1];
        grads[root] = Some(vec![1.0]);

        for i in (0..=root).rev() {
            let g = match grads[i].take() {
                Some(g) => g,
                None => continue,
            };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            if node.op_is_leaf() {
                // Leaves keep their gradient for collection below.
                grads[i] = Some(g);
                continue;
            }
            self.propagate(node, &g, &mut grads);
        }

        let mut by_param = BTreeMap::new();
        for &p in &self.params {
            let shape = self.nodes[p].value.shape().to_vec();
            let tensor = match grads.get(p).and_then(|g| g.clone()) {
                Some(values) => Tensor::new(shape, values).unwrap(),
                None => Tensor::zeros(&shape),
            };
            by_param.insert(p, tensor);
        }
        Ok(Gradients { by_param })
    }

    fn propagate(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let ins = &node.inputs;
        let val = |id: NodeId| self.nodes[id].value.values();
        let needs = |id: NodeId| self.nodes[id].requires_grad;

        match &node.op {
            Op::Leaf => {}

            Op::Embed { indices } => {
                let table = ins[0];
                if needs(table) {
                    let e = self.nodes[table].value.cols();
                    let buf = buf_for(grads, table, self.nodes[table].value.len());
                    for (row, &ix) in indices.iter().enumerate() {
                        let dst = ix as usize * e;
                        for j in 0..e {
                            buf[dst + j] += g[row * e + j];
                        }
                    }
                }
            }

            Op::GatherRows { rows } => {
                let x = ins[0];
                if needs(x) {
                    let c = self.nodes[x].value.cols();
                    let buf = buf_for(grads, x, self.nodes[x].value.len());
                    for (out_row, &src_row) in rows.iter().enumerate() {
                        for j in 0..c {
                            buf[src_row * c + j] += g[out_row * c + j];
                        }
                    }
                }
            }

            Op::Row { index } => {
                let x = ins[0];
                if needs(x) {
                    let c = self.nodes[x].value.cols();
                    let buf = buf_for(grads, x, self.nodes[x].value.len());
                    for j in 0..c {
                        buf[index * c + j] += g[j];
                    }
                }
            }

            Op::Col { index } => {
                let x = ins[0];
                if needs(x) {
                    let c = self.nodes[x].value.cols();
                    let buf = buf_for(grads, x, self.nodes[x].value.len());
                    for (i, gi) in g.iter().enumerate() {
                        buf[i * c + index] += gi;
                    }
                }
            }

            Op::MatMul => {
                let (a, b) = (ins[0], ins[1]);
                let (m, k) = (self.nodes[a].value.rows(), self.nodes[a].value.cols());
                let n = self.nodes[b].value.cols();
                if needs(a) {
                    let bv = val(b);
                    let buf = buf_for(grads, a, m * k);
                    for i in 0..m {
                        for p in 0..k {
                            let mut acc = 0.0;
                            for j in 0..n {
                                acc += g[i * n + j] * bv[p * n + j];
                            }
                            buf[i * k + p] += acc;
                        }
                    }
                }
                if needs(b) {
                    let av = val(a);
                    let buf = buf_for(grads, b, k * n);
                    for p in 0..k {
                        for i in 0..m {
                            let apv = av[i * k + p];
                            if apv == 0.0 {
                                continue;
                            }
                            for j in 0..n {
                                buf[p * n + j] += apv * g[i * n + j];
                            }
                        }
                    }
                }
            }

            Op::MatVec => {
                let (m, v) = (ins[0], ins[1]);
                let (r, c) = (self.nodes[m].value.rows(), self.nodes[m].value.cols());
                if needs(m) {
                    let vv = val(v);
                    let buf = buf_for(grads, m, r * c);
                    for i in 0..r {
                        for j in 0..c {
                            buf[i * c + j] += g[i] * vv[j];
                        }
                    }
                }
                if needs(v) {
                    let mv = val(m);
                    let buf = buf_for(grads, v, c);
                    for i in 0..r {
                        for j in 0..c {
                            buf[j] += mv[i * c + j] * g[i];
                        }
                    }
                }
            }

            Op::Conv1d { width } => {
                let (x, k) = (ins[0], ins[1]);
                let cols = self.nodes[x].value.cols();
                let channels = self.nodes[k].value.rows();
                let windows = node.value.rows();
                let patch_len = width * cols;
                if needs(x) {
                    let kv = val(k);
                    let buf = buf_for(grads, x, self.nodes[x].value.len());
                    for p in 0..windows {
                        for o in 0..channels {
                            let go = g[p * channels + o];
                            if go == 0.0 {
                                continue;
                            }
                            let kr = &kv[o * patch_len..(o + 1) * patch_len];
                            for t in 0..patch_len {
                                buf[p * cols + t] += go * kr[t];
                            }
                        }
                    }
                }
                if needs(k) {
                    let xv = val(x);
                    let buf = buf_for(grads, k, self.nodes[k].value.len());
                    for p in 0..windows {
                        let patch = &xv[p * cols..p * cols + patch_len];
                        for o in 0..channels {
                            let go = g[p * channels + o];
                            if go == 0.0 {
                                continue;
                            }
                            for t in 0..patch_len {
                                buf[o * patch_len + t] += go * patch[t];
                            }
                        }
                    }
                }
            }

            Op::AddRow => {
                let (x, b) = (ins[0], ins[1]);
                let c = self.nodes[x].value.cols();
                if needs(x) {
                    add_into(buf_for(grads, x, g.len()), g);
                }
                if needs(b) {
                    let buf = buf_for(grads, b, c);
                    for (i, gi) in g.iter().enumerate() {
                        buf[i % c] += gi;
                    }
                }
            }

            Op::ScaleRows => {
                let (x, s) = (ins[0], ins[1]);
                let c = self.nodes[x].value.cols();
                if needs(x) {
                    let sv = val(s);
                    let buf = buf_for(grads, x, g.len());
                    for (i, gi) in g.iter().enumerate() {
                        buf[i] += gi * sv[i / c];
                    }
                }
                if needs(s) {
                    let xv = val(x);
                    let buf = buf_for(grads, s, self.nodes[s].value.len());
                    for (i, gi) in g.iter().enumerate() {
                        buf[i / c] += gi * xv[i];
                    }
                }
            }

            Op::MaxOverTime { argmax } => {
                let x = ins[0];
                if needs(x) {
                    let c = self.nodes[x].value.cols();
                    let buf = buf_for(grads, x, self.nodes[x].value.len());
                    for (j, &row) in argmax.iter().enumerate() {
                        buf[row * c + j] += g[j];
                    }
                }
            }

            Op::Relu => {
                let x = ins[0];
                if needs(x) {
                    let xv = val(x);
                    let buf = buf_for(grads, x, g.len());
                    for (i, gi) in g.iter().enumerate() {
                        if xv[i] > 0.0 {
                            buf[i] += gi;
                        }
                    }
                }
            }

            Op::Sigmoid => {
                let x = ins[0];
                if needs(x) {
                    let y = node.value.values();
                    let buf = buf_for(grads, x, g.len());
                    for (i, gi) in g.iter().enumerate() {
                        buf[i] += gi * y[i] * (1.0 - y[i]);
                    }
                }
            }

            Op::Tanh => {
                let x = ins[0];
                if needs(x) {
                    let y = node.value.values();
                    let buf = buf_for(grads, x, g.len());
                    for (i, gi) in g.iter().enumerate() {
                        buf[i] += gi * (1.0 - y[i] * y[i]);
                    }
                }
            }

            Op::Abs => {
                let x = ins[0];
                if needs(x) {
                    let xv = val(x);
                    let buf = buf_for(grads, x, g.len());
                    for (i, gi) in g.iter().enumerate() {
                        // Subgradient at 0 taken as 0.
                        buf[i] += gi * if xv[i] > 0.0 { 1.0 } else if xv[i] < 0.0 { -1.0 } else { 0.0 };
                    }
                }
            }

            Op::Softmax => {
                let x = ins[0];
                if needs(x) {
                    let y = node.value.values();
                    let cols = match node.value.shape().len() {
                        1 => node.value.len(),
                        _ => node.value.cols(),
                    };
                    let rows = y.len() / cols;
                    let buf = buf_for(grads, x, g.len());
                    for r in 0..rows {
                        let off = r * cols;
                        let dot: f64 =
                            (0..cols).map(|j| g[off + j] * y[off + j]).sum();
                        for j in 0..cols {
                            buf[off + j] += y[off + j] * (g[off + j] - dot);
                        }
                    }
                }
            }

            Op::LogGuard => {
                let x = ins[0];
                if needs(x) {
                    let xv = val(x);
                    let buf = buf_for(grads, x, g.len());
                    for (i, gi) in g.iter().enumerate() {
                        if xv[i] >= LOG_GUARD {
                            buf[i] += gi / xv[i];
                        }
                    }
                }
            }

            Op::Concat => {
                let mut offset = 0;
                for &input in ins {
                    let n = self.nodes[input].value.len();
                    if needs(input) {
                        add_into(buf_for(grads, input, n), &g[offset..offset + n]);
                    }
                    offset += n;
                }
            }

            Op::StackRows => {
                let c = node.value.cols();
                for (row, &input) in ins.iter().enumerate() {
                    if needs(input) {
                        add_into(buf_for(grads, input, c), &g[row * c..(row + 1) * c]);
                    }
                }
            }

            Op::Flatten => {
                let x = ins[0];
                if needs(x) {
                    add_into(buf_for(grads, x, g.len()), g);
                }
            }

            Op::Transpose => {
                let x = ins[0];
                if needs(x) {
                    let (r, c) = (self.nodes[x].value.rows(), self.nodes[x].value.cols());
                    let buf = buf_for(grads, x, r * c);
                    for i in 0..r {
                        for j in 0..c {
                            buf[i * c + j] += g[j * r + i];
                        }
                    }
                }
            }

            Op::Add => {
                for &input in ins {
                    if needs(input) {
                        add_into(buf_for(grads, input, g.len()), g);
                    }
                }
            }

            Op::Sub => {
                let (a, b) = (ins[0], ins[1]);
                if needs(a) {
                    add_into(buf_for(grads, a, g.len()), g);
                }
                if needs(b) {
                    let buf = buf_for(grads, b, g.len());
                    for (i, gi) in g.iter().enumerate() {
                        buf[i] -= gi;
                    }
                }
            }

            Op::Mul => {
                let (a, b) = (ins[0], ins[1]);
                if needs(a) {
                    let bv = val(b);
                    let buf = buf_for(grads, a, g.len());
                    for (i, gi) in g.iter().enumerate() {
                        buf[i] += gi * bv[i];
                    }
                }
                if needs(b) {
                    let av = val(a);
                    let buf = buf_for(grads, b, g.len());
                    for (i, gi) in g.iter().enumerate() {
                        buf[i] += gi * av[i];
                    }
                }
            }

            Op::Neg => {
                let x = ins[0];
                if needs(x) {
                    let buf = buf_for(grads, x, g.len());
                    for (i, gi) in g.iter().enumerate() {
                        buf[i] -= gi;
                    }
                }
            }

            Op::MulConst(c) => {
                let x = ins[0];
                if needs(x) {
                    let buf = buf_for(grads, x, g.len());
                    for (i, gi) in g.iter().enumerate() {
                        buf[i] += gi * c;
                    }
                }
            }

            Op::AddConst => {
                let x = ins[0];
                if needs(x) {
                    add_into(buf_for(grads, x, g.len()), g);
                }
            }

            Op::DivScalar => {
                let (x, s) = (ins[0], ins[1]);
                let sv = val(s)[0];
                if needs(x) {
                    let buf = buf_for(grads, x, g.len());
                    for (i, gi) in g.iter().enumerate() {
                        buf[i] += gi / sv;
                    }
                }
                if needs(s) {
                    let xv = val(x);
                    let mut acc = 0.0;
                    for (i, gi) in g.iter().enumerate() {
                        acc += gi * xv[i];
                    }
                    buf_for(grads, s, 1)[0] -= acc / (sv * sv);
                }
            }

            Op::SumAll => {
                let x = ins[0];
                if needs(x) {
                    let n = self.nodes[x].value.len();
                    let buf = buf_for(grads, x, n);
                    for v in buf.iter_mut() {
                        *v += g[0];
                    }
                }
            }

            Op::MeanAll => {
                let x = ins[0];
                if needs(x) {
                    let n = self.nodes[x].value.len();
                    let share = g[0] / n as f64;
                    let buf = buf_for(grads, x, n);
                    for v in buf.iter_mut() {
                        *v += share;
                    }
                }
            }

            Op::MeanRows => {
                let x = ins[0];
                if needs(x) {
                    let (r, c) = (self.nodes[x].value.rows(), self.nodes[x].value.cols());
                    let buf = buf_for(grads, x, r * c);
                    for i in 0..r {
                        for j in 0..c {
                            buf[i * c + j] += g[j] / r as f64;
                        }
                    }
                }
            }

            Op::Pick { index } => {
                let x = ins[0];
                if needs(x) {
                    buf_for(grads, x, self.nodes[x].value.len())[*index] += g[0];
                }
            }

            Op::Cosine => {
                let (a, b) = (ins[0], ins[1]);
                let av = val(a);
                let bv = val(b);
                let na = av.iter().map(|v| v * v).sum::<f64>().sqrt();
                let nb = bv.iter().map(|v| v * v).sum::<f64>().sqrt();
                if na == 0.0 || nb == 0.0 {
                    return;
                }
                let dot: f64 = av.iter().zip(bv).map(|(x, y)| x * y).sum();
                let c = dot / (na * nb);
                if needs(a) {
                    let buf = buf_for(grads, a, av.len());
                    for i in 0..av.len() {
                        buf[i] += g[0] * (bv[i] / (na * nb) - c * av[i] / (na * na));
                    }
                }
                if needs(b) {
                    let buf = buf_for(grads, b, bv.len());
                    for i in 0..bv.len() {
                        buf[i] += g[0] * (av[i] / (na * nb) - c * bv[i] / (nb * nb));
                    }
                }
            }
        }
    }
}

impl Node {
    fn op_is_leaf(&self) -> bool {
        matches!(self.op, Op::Leaf)
    }
}

fn buf_for<'a>(grads: &'a mut [Option<Vec<f64>>], id: NodeId, len: usize) -> &'a mut Vec<f64> {
    grads[id].get_or_insert_with(|| vec![0.0; len])
}

fn add_into(buf: &mut [f64], g: &[f64]) {
    for (b, gi) in buf.iter_mut().zip(g) {
        *b += gi;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_of_parameter_gives_ones() {
        let mut tape = Tape::new();
        let p = tape.param(Tensor::vector(vec![1.0, -2.0, 3.0]));
        let s = tape.sum(p);
        let grads = tape.backward(s).unwrap();
        assert_eq!(grads.get(p).unwrap().values(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn detached_root_gives_zero_gradients() {
        let mut tape = Tape::new();
        let p = tape.param(Tensor::vector(vec![1.0, 2.0]));
        let c = tape.scalar(5.0);
        let root = tape.mul_const(c, 2.0);
        let grads = tape.backward(root).unwrap();
        assert_eq!(grads.get(p).unwrap().values(), &[0.0, 0.0]);
    }

    #[test]
    fn non_scalar_root_rejected() {
        let mut tape = Tape::new();
        let p = tape.param(Tensor::vector(vec![1.0, 2.0]));
        assert!(tape.backward(p).is_err());
    }

    #[test]
    fn backward_twice_identical() {
        let mut tape = Tape::new();
        let p = tape.param(Tensor::vector(vec![0.5, -1.5, 2.5]));
        let a = tape.abs(p);
        let sm = tape.softmax(a);
        let l = tape.l1(sm);
        let g1 = tape.backward(l).unwrap();
        let g2 = tape.backward(l).unwrap();
        assert_eq!(g1.get(p).unwrap().values(), g2.get(p).unwrap().values());
    }

    #[test]
    fn fan_out_accumulates() {
        let mut tape = Tape::new();
        let p = tape.param(Tensor::vector(vec![3.0]));
        let doubled = tape.add(p, p);
        let s = tape.sum(doubled);
        let grads = tape.backward(s).unwrap();
        assert_eq!(grads.get(p).unwrap().values(), &[2.0]);
    }
}
