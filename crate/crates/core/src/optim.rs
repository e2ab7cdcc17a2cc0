//! SGD with Nesterov momentum and coupled L2 regularization.

use crate::error::{Error, Result};
use crate::model::ModelParams;
use crate::tensor::{Real, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct OptimState<T: Real = f32> {
    pub velocity: Vec<Tensor<T>>,
    pub learning_rate: f64,
    pub momentum: f64,
    pub l2_coeff: f64,
}

impl<T: Real> OptimState<T> {
    /// Zero velocity shaped like `shapes`.
    pub fn new(shapes: &[&[usize]], learning_rate: f64, momentum: f64, l2_coeff: f64) -> Result<Self> {
        if learning_rate.is_nan()
            || learning_rate < 0.0
            || !(0.0..1.0).contains(&momentum)
            || l2_coeff.is_nan()
            || l2_coeff < 0.0
        {
            return Err(Error::Spec(format!(
                "optimizer needs lr >= 0, momentum in [0,1), l2 >= 0 (got {learning_rate}, {momentum}, {l2_coeff})"
            )));
        }
        Ok(OptimState {
            velocity: shapes.iter().map(|s| Tensor::zeros(s)).collect(),
            learning_rate,
            momentum,
            l2_coeff,
        })
    }

    pub fn reset(&mut self) {
        for v in &mut self.velocity {
            v.values_mut().iter_mut().for_each(|x| *x = T::zero());
        }
    }
}

/// One in-place update of `params`. With `g' = g + l2·w` the recurrence is
///
/// ```text
/// v ← momentum·v + g'
/// w ← w − lr·(g' + momentum·v)
/// ```
///
/// Scalar trace for momentum 0.9, lr 0.1, g = 1, w₀ = 0:
/// step 1 gives v = 1, w = −0.19; step 2 gives v = 1.9, w = −0.19 − 0.1·2.71 = −0.461.
pub fn sgd_step<T: Real>(params: &mut ModelParams<T>, grads: &[Tensor<T>], state: &mut OptimState<T>) -> Result<()> {
    if grads.len() != params.len() || state.velocity.len() != params.len() {
        return Err(Error::Contract(format!(
            "sgd_step: {} params, {} grads, {} velocity buffers",
            params.len(),
            grads.len(),
            state.velocity.len()
        )));
    }
    let lr = T::of_f64(state.learning_rate);
    let mu = T::of_f64(state.momentum);
    let l2 = T::of_f64(state.l2_coeff);
    for (i, ((w, g), v)) in params.tensors_mut().zip(grads).zip(&mut state.velocity).enumerate() {
        if w.shape() != g.shape() || w.shape() != v.shape() {
            return Err(Error::Contract(format!(
                "sgd_step: parameter {i} has shape {:?}, gradient {:?}, velocity {:?}",
                w.shape(),
                g.shape(),
                v.shape()
            )));
        }
        for ((w, &g), v) in w.values_mut().iter_mut().zip(g.values()).zip(v.values_mut()) {
            let g = g + l2 * *w;
            *v = mu * *v + g;
            *w -= lr * (g + mu * *v);
        }
    }
    Ok(())
}
