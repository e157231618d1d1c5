use super::TrainConfig;
use crate::error::{Error, Result};
use crate::numerics::Matrix;
use crate::recurrent::{Gradients, Parameters};

/// First and second moment accumulators, one per parameter tensor in
/// [`Parameters::names`] order.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<Matrix>,
    pub v: Vec<Matrix>,
    pub step: u64,
}

impl AdamState {
    pub fn new(params: &Parameters) -> Self {
        let zeros: Vec<Matrix> = params
            .tensors()
            .iter()
            .map(|t| Matrix::zeros(t.rows(), t.cols()))
            .collect();
        Self {
            m: zeros.clone(),
            v: zeros,
            step: 0,
        }
    }

    pub(crate) fn check(&self, params: &Parameters) -> Result<()> {
        let tensors = params.tensors();
        if self.m.len() != tensors.len() || self.v.len() != tensors.len() {
            return Err(Error::shape(format!(
                "optimizer state has {}/{} tensors, parameters have {}",
                self.m.len(),
                self.v.len(),
                tensors.len()
            )));
        }
        for ((t, m), v) in tensors.iter().zip(&self.m).zip(&self.v) {
            if m.shape() != t.shape() || v.shape() != t.shape() {
                return Err(Error::shape(format!(
                    "optimizer moment {:?} does not match parameter {:?}",
                    m.shape(),
                    t.shape()
                )));
            }
        }
        Ok(())
    }
}

/// One bias-corrected Adam update. A non-finite gradient leaves both the
/// parameters and the state untouched.
pub fn adam_step(
    params: &mut Parameters,
    grads: &Gradients,
    state: &mut AdamState,
    cfg: &TrainConfig,
) -> Result<()> {
    state.check(params)?;
    state.check(grads)?;
    if !grads.is_finite() {
        return Err(Error::Numeric("non-finite gradient; update refused".into()));
    }
    state.step += 1;
    let t = state.step as f64;
    let bc1 = 1.0 - cfg.beta1.powf(t);
    let bc2 = 1.0 - cfg.beta2.powf(t);
    let (b1, b2, lr, eps) = (cfg.beta1, cfg.beta2, cfg.learning_rate, cfg.epsilon);
    for (((p, g), m), v) in params
        .tensors_mut()
        .into_iter()
        .zip(grads.tensors())
        .zip(&mut state.m)
        .zip(&mut state.v)
    {
        for (((p, &g), m), v) in p
            .data_mut()
            .iter_mut()
            .zip(g.data())
            .zip(m.data_mut())
            .zip(v.data_mut())
        {
            *m = b1 * *m + (1.0 - b1) * g;
            *v = b2 * *v + (1.0 - b2) * g * g;
            let m_hat = *m / bc1;
            let v_hat = *v / bc2;
            *p -= lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}
