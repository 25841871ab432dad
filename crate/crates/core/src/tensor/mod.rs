//! Minimal dense-array engine with reverse-mode automatic differentiation.
//!
//! Computation is recorded on a [`Tape`]: every operation appends a node
//! holding its forward value, so a single reverse sweep over the record
//! yields gradients for all registered parameters. Values are `f64`
//! throughout; gradient accumulation follows append order, which makes
//! seeded runs bit-reproducible.

mod adam;
mod backward;
mod tape;

pub use adam::AdamState;
pub use backward::Gradients;
pub use tape::{NodeId, Tape};

/// Bumped whenever the set of tape operations or their semantics change.
/// Checkpoints record it so stale files fail loudly instead of silently.
pub const OP_CATALOG_VERSION: u32 = 1;

/// Guard applied inside `Tape::log_guard`: `ln(max(x, LOG_GUARD))`.
pub const LOG_GUARD: f64 = 1e-12;

/// A dense array: a shape and a flat row-major value buffer.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    values: Vec<f64>,
    requires_grad: bool,
}

impl Tensor {
    /// Builds a tensor, checking that the value count matches the shape.
    pub fn new(shape: Vec<usize>, values: Vec<f64>) -> crate::Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != values.len() {
            return Err(crate::Error::Contract(format!(
                "tensor shape {:?} wants {} values, got {}",
                shape,
                expected,
                values.len()
            )));
        }
        Ok(Tensor { shape, values, requires_grad: false })
    }

    pub fn scalar(v: f64) -> Self {
        Tensor { shape: vec![], values: vec![v], requires_grad: false }
    }

    pub fn vector(values: Vec<f64>) -> Self {
        Tensor { shape: vec![values.len()], values, requires_grad: false }
    }

    pub fn matrix(rows: usize, cols: usize, values: Vec<f64>) -> crate::Result<Self> {
        Tensor::new(vec![rows, cols], values)
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n: usize = shape.iter().product();
        Tensor { shape: shape.to_vec(), values: vec![0.0; n], requires_grad: false }
    }

    /// Marks the tensor as a trainable parameter.
    pub fn with_grad(mut self) -> Self {
        self.requires_grad = true;
        self
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn is_scalar(&self) -> bool {
        self.shape.is_empty()
    }

    /// The single value of a scalar tensor.
    pub fn item(&self) -> f64 {
        debug_assert!(self.is_scalar(), "item() on non-scalar tensor");
        self.values[0]
    }

    /// Rows of a 2-D tensor.
    pub fn rows(&self) -> usize {
        debug_assert_eq!(self.shape.len(), 2);
        self.shape[0]
    }

    /// Columns of a 2-D tensor.
    pub fn cols(&self) -> usize {
        debug_assert_eq!(self.shape.len(), 2);
        self.shape[1]
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shape_value_count_checked() {
        assert!(Tensor::new(vec![2, 3], vec![0.0; 6]).is_ok());
        assert!(Tensor::new(vec![2, 3], vec![0.0; 5]).is_err());
    }

    #[test]
    fn scalar_has_empty_shape() {
        let s = Tensor::scalar(4.0);
        assert!(s.is_scalar());
        assert_eq!(s.len(), 1);
        assert_eq!(s.item(), 4.0);
    }
}
