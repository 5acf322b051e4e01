use crate::autograd::Tensor;
use crate::error::{Error, Result};
use crate::model::ModelParameters;

use super::TrainConfig;

/// First/second moment estimates and step count.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    pub step: u64,
}

impl AdamState {
    pub fn new(params: &ModelParameters) -> Self {
        let zeros: Vec<Tensor> = params
            .tensors()
            .iter()
            .map(|t| Tensor::zeros(t.raw_dim()))
            .collect();
        AdamState {
            m: zeros.clone(),
            v: zeros,
            step: 0,
        }
    }
}

/// One bias-corrected Adam update. `grads[i] == None` means a zero
/// gradient for tensor `i`. Parameters are rounded to `f32` afterwards.
pub fn adam_step(
    params: &mut ModelParameters,
    grads: &[Option<Tensor>],
    state: &mut AdamState,
    config: &TrainConfig,
) -> Result<()> {
    if grads.len() != params.tensors().len() || state.m.len() != grads.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} gradients for {} parameter tensors",
            grads.len(),
            params.tensors().len()
        )));
    }
    for ((name, p), g) in params.names().iter().zip(params.tensors()).zip(grads) {
        if let Some(g) = g {
            if g.dim() != p.dim() {
                return Err(Error::ShapeMismatch(format!("gradient for `{name}`")));
            }
            if g.iter().any(|x| !x.is_finite()) {
                return Err(Error::NonFiniteGradient(name.clone()));
            }
        }
    }

    state.step += 1;
    let (b1, b2) = (config.adam_beta1, config.adam_beta2);
    let t = state.step as i32;
    let c1 = 1.0 - b1.powi(t);
    let c2 = 1.0 - b2.powi(t);
    let lr = config.learning_rate;
    let eps = config.adam_eps;
    for (i, p) in params.tensors_mut().iter_mut().enumerate() {
        let (m, v) = (&mut state.m[i], &mut state.v[i]);
        match &grads[i] {
            Some(g) => {
                ndarray::Zip::from(&mut *m)
                    .and(&mut *v)
                    .and(g)
                    .for_each(|m, v, &g| {
                        *m = b1 * *m + (1.0 - b1) * g;
                        *v = b2 * *v + (1.0 - b2) * g * g;
                    });
            }
            None => {
                m.mapv_inplace(|x| b1 * x);
                v.mapv_inplace(|x| b2 * x);
            }
        }
        ndarray::Zip::from(p)
            .and(&*m)
            .and(&*v)
            .for_each(|w, &m, &v| {
                let update = lr * (m / c1) / ((v / c2).sqrt() + eps);
                *w = (*w - update) as f32 as f64;
            });
    }
    Ok(())
}
