//! Mini-batch training loop shared by dense training, pruning and
//! codebook fine-tuning.

use serde::{Deserialize, Serialize};

use crate::nn::{
    lr_schedule, sgd_momentum_step, softmax_cross_entropy, BatchSource, Gradients, MaskHook, Model, NnError,
    OptimState, Scalar,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub base_lr: f64,
    pub momentum: f64,
    pub lr_step: u64,
    pub lr_factor: f64,
    pub iterations: u64,
    /// Evaluate every this many iterations (0 disables).
    pub eval_every: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        // 300k iterations with a decay every 70k, scaled to 6k / 1.4k.
        Self {
            batch_size: 128,
            base_lr: 0.1,
            momentum: 0.9,
            lr_step: 1400,
            lr_factor: 0.1,
            iterations: 6000,
            eval_every: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), String> {
        if self.batch_size == 0 {
            return Err("batch_size must be positive".into());
        }
        if !(self.base_lr >= 0.0 && self.base_lr.is_finite()) {
            return Err(format!("base_lr {} must be finite and non-negative", self.base_lr));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(format!("momentum {} outside [0, 1)", self.momentum));
        }
        if self.lr_step == 0 {
            return Err("lr_step must be positive".into());
        }
        Ok(())
    }

    pub fn lr_at(&self, iteration: u64) -> f64 {
        lr_schedule(iteration, self.base_lr, self.lr_step, self.lr_factor)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub iter: u64,
    pub loss: f64,
    pub lr: f64,
}

/// One forward/backward/update at `iteration` (0-based). `post_grad` may
/// edit the gradients before the optimizer sees them.
pub fn train_step<T: Scalar>(
    model: &mut Model<T>,
    optim: &mut OptimState<T>,
    source: &mut dyn BatchSource<T>,
    config: &TrainConfig,
    iteration: u64,
    hook: Option<&dyn MaskHook<T>>,
    post_grad: Option<&mut dyn FnMut(&mut Gradients<T>)>,
) -> Result<StepRecord, NnError> {
    let batch = source.batch(iteration);
    let logits = model.forward_train(&batch.inputs)?;
    let out = softmax_cross_entropy(&logits, &batch.labels)?;
    if !out.loss.is_finite() {
        model.clear_state();
        return Err(NnError::NonFinite { iteration });
    }
    let mut grads = model.backward(&out.grad)?;
    if let Some(f) = post_grad {
        f(&mut grads);
    }
    optim.learning_rate = config.lr_at(iteration);
    sgd_momentum_step(model, &mut grads, optim, hook)?;
    Ok(StepRecord {
        iter: iteration,
        loss: out.loss,
        lr: optim.learning_rate,
    })
}

/// Runs iterations `optim.iteration .. config.iterations`, so a restored
/// optimizer state resumes where it stopped.
pub fn train<T: Scalar>(
    model: &mut Model<T>,
    optim: &mut OptimState<T>,
    source: &mut dyn BatchSource<T>,
    config: &TrainConfig,
    hook: Option<&dyn MaskHook<T>>,
    mut on_step: impl FnMut(&Model<T>, &StepRecord),
) -> Result<(), NnError> {
    while optim.iteration < config.iterations {
        let rec = train_step(model, optim, source, config, optim.iteration, hook, None)?;
        on_step(model, &rec);
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{Batch, GraphBuilder, Tensor};

    fn setup() -> (Model<f64>, impl FnMut(u64) -> Batch<f64>) {
        let mut b = GraphBuilder::new(2, 1, 1);
        let out = b.linear(0, 2, "fc").unwrap();
        let m = Model::init(b.finish(out), 0);
        let src = |it: u64| {
            let s = if it % 2 == 0 { 1.0 } else { -1.0 };
            Batch {
                inputs: Tensor::from_vec(&[2, 2, 1, 1], vec![s, 0.5, -s, -0.5]),
                labels: vec![0, 1],
            }
        };
        (m, src)
    }

    #[test]
    fn loss_decreases_on_separable_data() {
        let (mut m, mut src) = setup();
        let cfg = TrainConfig {
            iterations: 50,
            base_lr: 0.1,
            ..Default::default()
        };
        let mut opt = OptimState::new(&m, cfg.base_lr, cfg.momentum);
        let mut losses = vec![];
        train(&mut m, &mut opt, &mut src, &cfg, None, |_, r| losses.push(r.loss)).unwrap();
        assert_eq!(losses.len(), 50);
        assert!(losses[49] < losses[0] * 0.5);
    }

    #[test]
    fn resume_matches_uninterrupted() {
        let cfg = TrainConfig {
            iterations: 20,
            ..Default::default()
        };
        let (mut a, mut src) = setup();
        let mut oa = OptimState::new(&a, 0.1, 0.9);
        train(&mut a, &mut oa, &mut src, &cfg, None, |_, _| {}).unwrap();

        let (mut b, mut src) = setup();
        let mut ob = OptimState::new(&b, 0.1, 0.9);
        let half = TrainConfig { iterations: 8, ..cfg.clone() };
        train(&mut b, &mut ob, &mut src, &half, None, |_, _| {}).unwrap();
        train(&mut b, &mut ob, &mut src, &cfg, None, |_, _| {}).unwrap();
        assert_eq!(a.params(), b.params());
    }

    #[test]
    fn divergence_is_reported() {
        let (mut m, _) = setup();
        let mut src = |_: u64| Batch {
            inputs: Tensor::from_vec(&[1, 2, 1, 1], vec![f64::NAN, 1.0]),
            labels: vec![0],
        };
        let cfg = TrainConfig {
            iterations: 5,
            ..Default::default()
        };
        let mut opt = OptimState::new(&m, 0.1, 0.9);
        let err = train(&mut m, &mut opt, &mut src, &cfg, None, |_, _| {}).unwrap_err();
        assert_eq!(err, NnError::NonFinite { iteration: 0 });
        assert_eq!(opt.iteration, 0);
    }
}
