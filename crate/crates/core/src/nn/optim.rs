use indexmap::IndexMap;

use super::model::{Gradients, Model};
use super::tensor::{Scalar, Tensor};
use super::NnError;

/// Momentum SGD state.
#[derive(Debug, Clone)]
pub struct OptimState<T> {
    pub learning_rate: f64,
    pub momentum: f64,
    pub velocity: IndexMap<String, Tensor<T>>,
    pub iteration: u64,
}

impl<T: Scalar> OptimState<T> {
    pub fn new(model: &Model<T>, learning_rate: f64, momentum: f64) -> Self {
        let velocity = model
            .graph()
            .params
            .iter()
            .filter(|p| p.role.trainable())
            .map(|p| (p.name.clone(), Tensor::zeros(&p.shape)))
            .collect();
        Self {
            learning_rate,
            momentum,
            velocity,
            iteration: 0,
        }
    }
}

/// Hook run around every optimizer step, used to keep pruned connections
/// at zero.
pub trait MaskHook<T: Scalar> {
    fn mask_gradients(&self, grads: &mut Gradients<T>);
    fn apply(&self, model: &mut Model<T>, optim: &mut OptimState<T>) -> Result<(), NnError>;
}

/// `v ← μ·v − lr·g; w ← w + v` for every tensor present in `grads`.
pub fn sgd_momentum_step<T: Scalar>(
    model: &mut Model<T>,
    grads: &mut Gradients<T>,
    state: &mut OptimState<T>,
    hook: Option<&dyn MaskHook<T>>,
) -> Result<(), NnError> {
    if let Some(h) = hook {
        h.mask_gradients(grads);
    }
    let lr = T::of_f64(state.learning_rate);
    let mu = T::of_f64(state.momentum);
    for (name, g) in &grads.params {
        let v = state
            .velocity
            .get_mut(name)
            .ok_or_else(|| NnError::UnknownParam(name.clone()))?;
        let w = model
            .param_mut(name)
            .ok_or_else(|| NnError::UnknownParam(name.clone()))?;
        if g.shape() != w.shape() {
            return Err(NnError::ShapeMismatch(format!("gradient for {name}")));
        }
        for ((wi, vi), gi) in w.data_mut().iter_mut().zip(v.data_mut()).zip(g.data()) {
            *vi = mu * *vi - lr * *gi;
            *wi += *vi;
        }
    }
    state.iteration += 1;
    if let Some(h) = hook {
        h.apply(model, state)?;
    }
    Ok(())
}

/// Step decay: `base_lr · factor^⌊iteration / step⌋`.
pub fn lr_schedule(iteration: u64, base_lr: f64, step: u64, factor: f64) -> f64 {
    assert!(step > 0, "lr step must be positive");
    base_lr * factor.powi((iteration / step) as i32)
}
