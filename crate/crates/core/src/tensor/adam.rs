use super::Tensor;
use crate::{Error, Result};

/// Adaptive-moment optimizer state with bias correction. Moment tensors are
/// kept in the same order as the parameter list they were created from.
#[derive(Debug, Clone)]
pub struct AdamState {
    step_count: u64,
    eta: f64,
    beta1: f64,
    beta2: f64,
    epsilon: f64,
    first_moment: Vec<Tensor>,
    second_moment: Vec<Tensor>,
}

impl AdamState {
    /// Fresh state for the given parameters, with the usual moment decay
    /// rates (0.9, 0.999) and epsilon 1e-8.
    pub fn new<'a>(params: impl Iterator<Item = &'a Tensor>, eta: f64) -> Self {
        let shapes: Vec<Tensor> = params.map(|p| Tensor::zeros(p.shape())).collect();
        AdamState {
            step_count: 0,
            eta,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            second_moment: shapes.clone(),
            first_moment: shapes,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step_count
    }

    pub fn eta(&self) -> f64 {
        self.eta
    }

    /// Applies one bias-corrected update in place. Parameters and gradients
    /// must arrive in the order the state was built from.
    pub fn step<'a, I>(&mut self, params_and_grads: I) -> Result<()>
    where
        I: IntoIterator<Item = (&'a mut Tensor, &'a Tensor)>,
    {
        self.step_count += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step_count as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step_count as i32);

        let mut count = 0;
        for (i, (param, grad)) in params_and_grads.into_iter().enumerate() {
            if i >= self.first_moment.len() {
                return Err(Error::Contract(format!(
                    "adam_step got more than {} parameters",
                    self.first_moment.len()
                )));
            }
            if param.shape() != grad.shape() || param.shape() != self.first_moment[i].shape() {
                return Err(Error::Contract(format!(
                    "adam_step shape mismatch at parameter {}: param {:?}, grad {:?}, moment {:?}",
                    i,
                    param.shape(),
                    grad.shape(),
                    self.first_moment[i].shape()
                )));
            }
            let m = self.first_moment[i].values_mut();
            let v = self.second_moment[i].values_mut();
            let p = param.values_mut();
            let g = grad.values();
            for j in 0..p.len() {
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * g[j];
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * g[j] * g[j];
                let m_hat = m[j] / bc1;
                let v_hat = v[j] / bc2;
                p[j] -= self.eta * m_hat / (v_hat.sqrt() + self.epsilon);
            }
            count += 1;
        }
        if count != self.first_moment.len() {
            return Err(Error::Contract(format!(
                "adam_step got {} parameters, state has {}",
                count,
                self.first_moment.len()
            )));
        }
        Ok(())
    }
}
