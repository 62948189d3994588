//! Incremental magnitude pruning.
//!
//! Every `interval` training steps a prune event raises each layer's pruned
//! count along a ramp until the target ratio is reached. The threshold at
//! that point is frozen; later events keep claiming survivors whose
//! magnitude drifts below it. Pruned connections never come back: their
//! gradients, weights and momentum are zeroed around every optimizer step.
//!
//! Also provides the mean/deviation fixed-threshold rule as a baseline.

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::nn::{BatchSource, Gradients, MaskHook, Model, NnError, OptimState, Scalar, Tensor};
use crate::train::{train_step, TrainConfig};

#[derive(Debug, Error, PartialEq)]
pub enum PruneError {
    #[error("layer `{layer}`: count {count} exceeds layer size {size}")]
    CountExceedsLayer { layer: String, count: usize, size: usize },
    #[error("layer `{layer}`: count {count} is below the {pruned} already pruned")]
    CountBelowPruned { layer: String, count: usize, pruned: usize },
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("invalid prune config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Nn(#[from] NnError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Ramp {
    Linear,
    Cubic,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PruneConfig {
    /// Fraction of each layer's weights to prune.
    pub target_ratio: f64,
    /// Per-layer overrides of `target_ratio`, keyed by weight name.
    pub layer_ratios: IndexMap<String, f64>,
    /// Training steps between prune events.
    pub interval: u64,
    /// Steps over which the count ramps up to the target.
    pub ramp_iters: u64,
    /// Total pruning-with-retraining steps, ramp included.
    pub total_prune_iters: u64,
    pub ramp: Ramp,
    /// Survivors dropping below the frozen threshold are pruned at later
    /// events. When false the threshold is only recorded.
    pub freeze_prunes_survivors: bool,
    pub eta: f64,
    pub beta: f64,
    pub lambda: f64,
}

impl Default for PruneConfig {
    fn default() -> Self {
        Self {
            target_ratio: 0.9,
            layer_ratios: IndexMap::new(),
            interval: 10,
            ramp_iters: 1000,
            total_prune_iters: 2000,
            ramp: Ramp::Linear,
            freeze_prunes_survivors: true,
            eta: 1.0,
            beta: 1.0,
            lambda: 0.0,
        }
    }
}

impl PruneConfig {
    pub fn validate(&self) -> Result<(), PruneError> {
        let bad = |m: String| Err(PruneError::InvalidConfig(m));
        for (name, r) in std::iter::once(("target_ratio", &self.target_ratio))
            .chain(self.layer_ratios.iter().map(|(k, v)| (k.as_str(), v)))
        {
            if !(0.0..1.0).contains(r) {
                return bad(format!("{name}: ratio {r} outside [0, 1)"));
            }
        }
        if self.interval == 0 {
            return bad("interval must be at least 1".into());
        }
        if self.ramp_iters < self.interval {
            return bad(format!(
                "ramp_iters {} shorter than one interval {}",
                self.ramp_iters, self.interval
            ));
        }
        if self.total_prune_iters < self.ramp_iters {
            return bad("total_prune_iters shorter than ramp_iters".into());
        }
        Ok(())
    }

    pub fn ratio_for(&self, layer: &str) -> f64 {
        self.layer_ratios.get(layer).copied().unwrap_or(self.target_ratio)
    }

    /// Number of ramp events; the last one reaches the target.
    pub fn ramp_events(&self) -> u64 {
        self.ramp_iters / self.interval
    }
}

/// `(η/N)·Σ|w| + β·σ(w) + λ`, with σ the population standard deviation.
pub fn fixed_threshold<T: Scalar>(weights: &[T], eta: f64, beta: f64, lambda: f64) -> f64 {
    let n = weights.len() as f64;
    let mean_abs = weights.iter().map(|w| w.as_f64().abs()).sum::<f64>() / n;
    let mean = weights.iter().map(|w| w.as_f64()).sum::<f64>() / n;
    let var = weights.iter().map(|w| (w.as_f64() - mean).powi(2)).sum::<f64>() / n;
    eta * mean_abs + beta * var.sqrt() + lambda
}

/// Pruned count after `event_index` of `total_events` ramp events.
pub fn schedule_count(layer_size: usize, target_ratio: f64, event_index: u64, total_events: u64, ramp: Ramp) -> usize {
    let target = layer_size as f64 * target_ratio;
    if total_events == 0 || event_index >= total_events {
        return target.round() as usize;
    }
    let t = event_index as f64 / total_events as f64;
    let frac = match ramp {
        Ramp::Linear => t,
        Ramp::Cubic => 1.0 - (1.0 - t).powi(3),
    };
    (target * frac).round() as usize
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Ramping,
    Frozen,
    Done,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerMask {
    /// `true` marks a surviving connection.
    pub keep: Vec<bool>,
    /// Largest magnitude pruned so far.
    pub threshold: Option<f64>,
    pub frozen_threshold: Option<f64>,
}

impl LayerMask {
    pub fn full(len: usize) -> Self {
        Self {
            keep: vec![true; len],
            threshold: None,
            frozen_threshold: None,
        }
    }

    pub fn len(&self) -> usize {
        self.keep.len()
    }

    pub fn is_empty(&self) -> bool {
        self.keep.is_empty()
    }

    pub fn pruned(&self) -> usize {
        self.keep.iter().filter(|k| !**k).count()
    }

    pub fn survivors(&self) -> usize {
        self.len() - self.pruned()
    }

    pub fn density(&self) -> f64 {
        self.survivors() as f64 / self.len().max(1) as f64
    }

    fn record(&mut self, t: f64) {
        self.threshold = Some(self.threshold.map_or(t, |old| old.max(t)));
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PruneState {
    pub layers: IndexMap<String, LayerMask>,
    pub events: u64,
    pub phase: Phase,
}

impl PruneState {
    /// All-survivor masks for every prunable tensor of `model`.
    pub fn new<T: Scalar>(model: &Model<T>) -> Self {
        let layers = model
            .prunable_names()
            .into_iter()
            .map(|n| {
                let len = model.param(&n).unwrap().len();
                (n, LayerMask::full(len))
            })
            .collect();
        Self {
            layers,
            events: 0,
            phase: Phase::Ramping,
        }
    }

    pub fn total_weights(&self) -> usize {
        self.layers.values().map(LayerMask::len).sum()
    }

    pub fn total_survivors(&self) -> usize {
        self.layers.values().map(LayerMask::survivors).sum()
    }

    pub fn density(&self) -> f64 {
        self.total_survivors() as f64 / self.total_weights().max(1) as f64
    }

    /// Masks derived from zero entries of a pruned model's weights.
    pub fn from_zeros<T: Scalar>(model: &Model<T>) -> Self {
        let mut s = Self::new(model);
        for (name, m) in s.layers.iter_mut() {
            let w = model.param(name).unwrap().data();
            m.keep = w.iter().map(|v| *v != T::zero()).collect();
        }
        s.phase = Phase::Done;
        s
    }

    fn check<T: Scalar>(&self, model: &Model<T>) -> Result<(), NnError> {
        for (name, m) in &self.layers {
            let w = model.param(name).ok_or_else(|| NnError::UnknownParam(name.clone()))?;
            if w.len() != m.len() {
                return Err(NnError::ShapeMismatch(format!(
                    "mask for {name} has {} entries, weight has {}",
                    m.len(),
                    w.len()
                )));
            }
        }
        Ok(())
    }
}

/// Masks the smallest-magnitude survivors until `count` connections are
/// pruned, breaking ties by ascending index. Returns the largest magnitude
/// pruned by this call.
pub fn prune_event<T: Scalar>(
    name: &str,
    weights: &mut [T],
    mask: &mut LayerMask,
    count: usize,
) -> Result<Option<f64>, PruneError> {
    if weights.len() != mask.len() {
        return Err(PruneError::ShapeMismatch(format!(
            "{name}: {} weights vs {} mask entries",
            weights.len(),
            mask.len()
        )));
    }
    if count > weights.len() {
        return Err(PruneError::CountExceedsLayer {
            layer: name.to_string(),
            count,
            size: weights.len(),
        });
    }
    let pruned = mask.pruned();
    if count < pruned {
        return Err(PruneError::CountBelowPruned {
            layer: name.to_string(),
            count,
            pruned,
        });
    }
    if count == pruned {
        return Ok(None);
    }
    let mut order: Vec<usize> = (0..weights.len()).filter(|&i| mask.keep[i]).collect();
    order.sort_by(|&a, &b| {
        weights[a]
            .abs()
            .partial_cmp(&weights[b].abs())
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    let mut largest = 0.0f64;
    for &i in &order[..count - pruned] {
        largest = largest.max(weights[i].abs().as_f64());
        mask.keep[i] = false;
        weights[i] = T::zero();
    }
    mask.record(largest);
    Ok(Some(largest))
}

/// Frozen-phase event: survivors with `|w| < frozen_threshold` are pruned.
/// Returns how many were claimed.
pub fn freeze_and_continue<T: Scalar>(weights: &mut [T], mask: &mut LayerMask) -> usize {
    let Some(t) = mask.frozen_threshold else { return 0 };
    let mut claimed = 0;
    for (w, k) in weights.iter_mut().zip(mask.keep.iter_mut()) {
        if *k && w.abs().as_f64() < t {
            *k = false;
            *w = T::zero();
            claimed += 1;
        }
    }
    claimed
}

/// Baseline rule: prune every survivor with `|w| < t`.
pub fn prune_below<T: Scalar>(weights: &mut [T], mask: &mut LayerMask, t: f64) -> usize {
    let mut claimed = 0;
    for (w, k) in weights.iter_mut().zip(mask.keep.iter_mut()) {
        if *k && w.abs().as_f64() < t {
            *k = false;
            *w = T::zero();
            claimed += 1;
        }
    }
    if claimed > 0 {
        mask.record(t);
    }
    claimed
}

/// One-shot fixed-threshold pruning of every prunable layer.
pub fn fixed_threshold_prune<T: Scalar>(model: &mut Model<T>, eta: f64, beta: f64, lambda: f64) -> PruneState {
    let mut state = PruneState::new(model);
    for (name, mask) in state.layers.iter_mut() {
        let w = model.param_mut(name).unwrap().data_mut();
        let t = fixed_threshold(w, eta, beta, lambda);
        prune_below(w, mask, t);
    }
    state.phase = Phase::Done;
    state
}

impl<T: Scalar> MaskHook<T> for PruneState {
    fn mask_gradients(&self, grads: &mut Gradients<T>) {
        for (name, m) in &self.layers {
            if let Some(g) = grads.params.get_mut(name) {
                zero_masked(g, m);
            }
        }
    }

    fn apply(&self, model: &mut Model<T>, optim: &mut OptimState<T>) -> Result<(), NnError> {
        apply_mask_hook(model, Some(optim), self)
    }
}

fn zero_masked<T: Scalar>(t: &mut Tensor<T>, m: &LayerMask) {
    for (v, k) in t.data_mut().iter_mut().zip(&m.keep) {
        if !*k {
            *v = T::zero();
        }
    }
}

/// Zeros masked weights and, when given, their optimizer velocities.
pub fn apply_mask_hook<T: Scalar>(
    model: &mut Model<T>,
    optim: Option<&mut OptimState<T>>,
    state: &PruneState,
) -> Result<(), NnError> {
    state.check(model)?;
    for (name, m) in &state.layers {
        zero_masked(model.param_mut(name).unwrap(), m);
    }
    if let Some(o) = optim {
        for (name, m) in &state.layers {
            if let Some(v) = o.velocity.get_mut(name) {
                zero_masked(v, m);
            }
        }
    }
    Ok(())
}

/// One line of the prune log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PruneRecord {
    pub iter: u64,
    pub layer: String,
    pub pruned_count: usize,
    pub threshold: Option<f64>,
    pub density: f64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub accuracy: Option<f64>,
}

/// Fires the event due after training step `iter` (1-based), if any.
pub fn prune_step<T: Scalar>(
    model: &mut Model<T>,
    state: &mut PruneState,
    config: &PruneConfig,
    iter: u64,
) -> Result<Vec<PruneRecord>, PruneError> {
    if state.phase == Phase::Done || !iter.is_multiple_of(config.interval) {
        return Ok(vec![]);
    }
    let k = iter / config.interval;
    let total = config.ramp_events();
    let mut log = Vec::new();
    state.events += 1;
    for (name, mask) in state.layers.iter_mut() {
        let w = model.param_mut(name).unwrap().data_mut();
        if k <= total {
            let count = schedule_count(mask.len(), config.ratio_for(name), k, total, config.ramp);
            prune_event(name, w, mask, count)?;
            if k == total {
                mask.frozen_threshold = mask.threshold;
            }
        } else if config.freeze_prunes_survivors {
            freeze_and_continue(w, mask);
        }
        log.push(PruneRecord {
            iter,
            layer: name.clone(),
            pruned_count: mask.pruned(),
            threshold: mask.threshold,
            density: mask.density(),
            accuracy: None,
        });
    }
    if k >= total {
        state.phase = Phase::Frozen;
    }
    if iter >= config.total_prune_iters {
        state.phase = Phase::Done;
    }
    Ok(log)
}

/// Retrains `model` for `config.total_prune_iters` steps with the mask
/// hook, firing prune events every `config.interval` steps. `evaluate`, when
/// given, is called with the event count after each event; a returned
/// accuracy is attached to that event's records.
pub fn run_dropweight<T: Scalar>(
    model: &mut Model<T>,
    source: &mut dyn BatchSource<T>,
    config: &PruneConfig,
    train_config: &TrainConfig,
    mut evaluate: Option<&mut dyn FnMut(&Model<T>, u64) -> Option<f64>>,
) -> Result<(PruneState, Vec<PruneRecord>), PruneError> {
    config.validate()?;
    let mut state = PruneState::new(model);
    let mut optim = OptimState::new(model, train_config.base_lr, train_config.momentum);
    let mut log = Vec::new();
    let steps = TrainConfig {
        iterations: config.total_prune_iters,
        ..train_config.clone()
    };
    for it in 0..config.total_prune_iters {
        train_step(model, &mut optim, source, &steps, it, Some(&state), None)?;
        let mut recs = prune_step(model, &mut state, config, it + 1)?;
        if !recs.is_empty() {
            apply_mask_hook(model, Some(&mut optim), &state)?;
            if let Some(f) = evaluate.as_mut() {
                let acc = f(model, state.events);
                recs.iter_mut().for_each(|r| r.accuracy = acc);
            }
        }
        log.extend(recs);
    }
    state.phase = Phase::Done;
    Ok((state, log))
}

pub fn log_to_jsonl(log: &[PruneRecord]) -> String {
    log.iter()
        .map(|r| serde_json::to_string(r).expect("prune record serializes") + "\n")
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{Batch, GraphBuilder};
    use proptest::prelude::*;

    fn mask_of(n: usize) -> LayerMask {
        LayerMask::full(n)
    }

    #[test]
    fn threshold_examples() {
        assert_eq!(fixed_threshold(&[1.0f64, -1.0, 1.0, -1.0], 1.0, 1.0, 0.0), 2.0);
        assert_eq!(fixed_threshold(&[0.0f64; 5], 1.0, 1.0, 0.5), 0.5);
        assert_eq!(fixed_threshold(&[3.0f64, -7.0, 0.1], 0.0, 0.0, 0.25), 0.25);
    }

    #[test]
    fn schedule_examples() {
        assert_eq!(schedule_count(1000, 0.9, 0, 10, Ramp::Linear), 0);
        assert_eq!(schedule_count(1000, 0.9, 10, 10, Ramp::Linear), 900);
        assert_eq!(schedule_count(1000, 0.9, 5, 10, Ramp::Linear), 450);
        assert_eq!(schedule_count(1000, 0.9, 10, 10, Ramp::Cubic), 900);
        assert_eq!(schedule_count(1000, 0.9, 0, 10, Ramp::Cubic), 0);
        // 900·(1 − 0.5³) = 787.5
        assert_eq!(schedule_count(1000, 0.9, 5, 10, Ramp::Cubic), 788);
    }

    #[test]
    fn prune_event_examples() {
        let mut w = [0.1f64, -0.5, 0.3, -0.2];
        let mut m = mask_of(4);
        let t = prune_event("l", &mut w, &mut m, 2).unwrap();
        assert_eq!(m.keep, [false, true, true, false]);
        assert_eq!(w, [0.0, -0.5, 0.3, 0.0]);
        assert_eq!(t, Some(0.2));
        assert_eq!(prune_event("l", &mut w, &mut m, 2).unwrap(), None);
        assert_eq!(m.keep, [false, true, true, false]);

        let mut w = [0.2f64, -0.2, 0.3];
        let mut m = mask_of(3);
        prune_event("l", &mut w, &mut m, 1).unwrap();
        assert_eq!(m.keep, [false, true, true]);

        assert!(matches!(
            prune_event("l", &mut w, &mut m, 4),
            Err(PruneError::CountExceedsLayer { .. })
        ));
        assert!(matches!(
            prune_event("l", &mut w, &mut m, 0),
            Err(PruneError::CountBelowPruned { .. })
        ));
    }

    #[test]
    fn freeze_claims_drifting_survivor() {
        let mut w = [0.1f64, 0.5, 0.6, 0.7];
        let mut m = mask_of(4);
        prune_event("l", &mut w, &mut m, 1).unwrap();
        m.frozen_threshold = m.threshold;
        assert_eq!(freeze_and_continue(&mut w, &mut m), 0);
        w[2] = 0.05;
        assert_eq!(freeze_and_continue(&mut w, &mut m), 1);
        assert_eq!(m.keep, [false, true, false, true]);
        assert_eq!(w[2], 0.0);
    }

    fn toy() -> (Model<f64>, impl FnMut(u64) -> Batch<f64>) {
        let mut b = GraphBuilder::new(2, 4, 4);
        let c = b.conv(0, 4, 3, 1, "conv").unwrap();
        let g = b.gap(c, "gap").unwrap();
        let f = b.linear(g, 3, "fc").unwrap();
        let m = Model::init(b.finish(f), 9);
        let src = |it: u64| {
            let data = (0..4 * 32).map(|i| ((i as u64 * 7 + it * 13) % 11) as f64 / 11.0 - 0.5).collect();
            Batch {
                inputs: Tensor::from_vec(&[4, 2, 4, 4], data),
                labels: vec![0, 1, 2, (it % 3) as usize],
            }
        };
        (m, src)
    }

    #[test]
    fn hook_keeps_pruned_positions_zero() {
        let (mut m, mut src) = toy();
        let mut state = PruneState::new(&m);
        for (name, mask) in state.layers.iter_mut() {
            let w = m.param_mut(name).unwrap().data_mut();
            let n = w.len() / 2;
            prune_event(name, w, mask, n).unwrap();
        }
        let cfg = TrainConfig {
            iterations: 100,
            base_lr: 0.05,
            ..Default::default()
        };
        let mut opt = OptimState::new(&m, cfg.base_lr, cfg.momentum);
        crate::train::train(&mut m, &mut opt, &mut src, &cfg, Some(&state), |_, _| {}).unwrap();
        for (name, mask) in &state.layers {
            let w = m.param(name).unwrap().data();
            let v = opt.velocity[name].data();
            for i in 0..w.len() {
                if !mask.keep[i] {
                    assert_eq!((w[i], v[i]), (0.0, 0.0));
                }
            }
        }
    }

    #[test]
    fn masked_gradients_do_not_leak() {
        // A survivor's update must not depend on masked gradient entries.
        let (m0, _) = toy();
        let mut state = PruneState::new(&m0);
        state.layers["fc.weight"].keep[0] = false;
        let run = |poison: f64| {
            let mut m = m0.clone();
            let mut opt = OptimState::new(&m, 0.1, 0.9);
            let mut grads = Gradients {
                params: m0.graph().params.iter().filter(|p| p.role.trainable())
                    .map(|p| (p.name.clone(), Tensor::filled(&p.shape, 0.5))).collect(),
                input: Tensor::zeros(&[1]),
            };
            grads.params["fc.weight"].data_mut()[0] = poison;
            crate::nn::sgd_momentum_step(&mut m, &mut grads, &mut opt, Some(&state)).unwrap();
            m
        };
        let (a, b) = (run(0.5), run(1e9));
        assert_eq!(a.params(), b.params());
        assert_eq!(a.param("fc.weight").unwrap().data()[0], 0.0);
    }

    #[test]
    fn full_mask_is_identity() {
        let (mut m, _) = toy();
        let before = m.params().clone();
        let state = PruneState::new(&m);
        apply_mask_hook(&mut m, None, &state).unwrap();
        assert_eq!(m.params(), &before);
    }

    #[test]
    fn zero_target_equals_plain_training() {
        let cfg = PruneConfig {
            target_ratio: 0.0,
            interval: 5,
            ramp_iters: 20,
            total_prune_iters: 40,
            ..Default::default()
        };
        let tc = TrainConfig {
            base_lr: 0.05,
            ..Default::default()
        };
        let (mut a, mut src) = toy();
        run_dropweight(&mut a, &mut src, &cfg, &tc, None).unwrap();
        let (mut b, mut src) = toy();
        let mut opt = OptimState::new(&b, tc.base_lr, tc.momentum);
        let plain = TrainConfig { iterations: 40, ..tc };
        crate::train::train(&mut b, &mut opt, &mut src, &plain, None, |_, _| {}).unwrap();
        assert_eq!(a.params(), b.params());
    }

    #[test]
    fn run_reaches_target_density() {
        let cfg = PruneConfig {
            target_ratio: 0.9,
            interval: 5,
            ramp_iters: 50,
            total_prune_iters: 50,
            ..Default::default()
        };
        let (mut m, mut src) = toy();
        let (state, log) = run_dropweight(
            &mut m,
            &mut src,
            &cfg,
            &TrainConfig { base_lr: 0.05, ..Default::default() },
            None,
        )
        .unwrap();
        for (name, mask) in &state.layers {
            assert_eq!(mask.pruned(), (mask.len() as f64 * 0.9).round() as usize, "{name}");
            let nz = m.param(name).unwrap().data().iter().filter(|v| **v != 0.0).count();
            assert_eq!(nz, mask.survivors());
            assert_eq!(mask.frozen_threshold, log.iter().rev().find(|r| &r.layer == name).unwrap().threshold);
        }
        assert_eq!(log.len(), 10 * state.layers.len());
        assert_eq!(state.phase, Phase::Done);
    }

    #[test]
    fn config_validation() {
        assert!(PruneConfig::default().validate().is_ok());
        assert!(PruneConfig { target_ratio: 1.0, ..Default::default() }.validate().is_err());
        assert!(PruneConfig { interval: 0, ..Default::default() }.validate().is_err());
        assert!(PruneConfig { total_prune_iters: 10, ..Default::default() }.validate().is_err());
        let j = serde_json::to_string(&PruneConfig::default()).unwrap();
        assert_eq!(serde_json::from_str::<PruneConfig>(&j).unwrap(), PruneConfig::default());
        assert!(serde_json::from_str::<PruneConfig>(r#"{"ratio": 0.5}"#).is_err());
    }

    proptest! {
        #[test]
        fn schedule_is_monotone(size in 1usize..5000, ratio in 0.0f64..0.99, total in 1u64..50, cubic: bool) {
            let ramp = if cubic { Ramp::Cubic } else { Ramp::Linear };
            let counts: Vec<usize> = (0..=total).map(|k| schedule_count(size, ratio, k, total, ramp)).collect();
            prop_assert!(counts.windows(2).all(|p| p[0] <= p[1]));
            prop_assert_eq!(counts[0], 0);
            prop_assert_eq!(*counts.last().unwrap(), (size as f64 * ratio).round() as usize);
            prop_assert!(*counts.last().unwrap() <= size);
        }

        #[test]
        fn threshold_rule_matches_brute_force(w in prop::collection::vec(-2.0f64..2.0, 1..300), t in 0.0f64..2.0) {
            let mut pruned = w.clone();
            let mut m = LayerMask::full(w.len());
            let thr = fixed_threshold(&pruned, 0.0, 0.0, t);
            prop_assert_eq!(thr, t);
            prune_below(&mut pruned, &mut m, thr);
            for i in 0..w.len() {
                let expect = if w[i].abs() < t { 0.0 } else { w[i] };
                prop_assert_eq!(pruned[i], expect);
                prop_assert_eq!(m.keep[i], w[i].abs() >= t);
            }
        }

        #[test]
        fn event_prunes_smallest(w in prop::collection::vec(-1.0f64..1.0, 1..200), frac in 0.0f64..1.0) {
            let count = (w.len() as f64 * frac) as usize;
            let mut pruned = w.clone();
            let mut m = LayerMask::full(w.len());
            prune_event("l", &mut pruned, &mut m, count).unwrap();
            prop_assert_eq!(m.pruned(), count);
            let mut idx: Vec<usize> = (0..w.len()).collect();
            idx.sort_by(|&a, &b| w[a].abs().partial_cmp(&w[b].abs()).unwrap().then(a.cmp(&b)));
            for (rank, &i) in idx.iter().enumerate() {
                prop_assert_eq!(m.keep[i], rank >= count);
            }
        }
    }
}
