//! Per-layer k-means weight sharing over surviving connections.
//!
//! Centroids start evenly spaced over `[min, max]` and are refined by
//! Lloyd iterations. Fine-tuning moves each centroid by the summed
//! gradient of the weights assigned to it; assignments and masks stay
//! fixed.

use indexmap::IndexMap;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dropweight::{LayerMask, PruneState};
use crate::nn::{BatchSource, Model, NnError, OptimState, ParamRole, Tensor};
use crate::train::{train_step, TrainConfig};

pub const MAX_LLOYD_ITERS: usize = 100;

#[derive(Debug, Error, PartialEq)]
pub enum QuantError {
    #[error("empty codebook")]
    EmptyCodebook,
    #[error("bits {0} outside 1..=8")]
    InvalidBits(u8),
    #[error("layer `{0}` has no surviving weights")]
    NoSurvivors(String),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error(transparent)]
    Nn(#[from] NnError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Codebook {
    pub bits: u8,
    /// Ascending, no duplicates, at most `2^bits` entries.
    pub centroids: Vec<f32>,
}

impl Codebook {
    /// Nearest centroid, lower index on ties.
    pub fn nearest(&self, v: f32) -> usize {
        let c = &self.centroids;
        let hi = c.partition_point(|&x| x < v);
        if hi == 0 {
            return 0;
        }
        if hi == c.len() {
            return c.len() - 1;
        }
        let (dl, dh) = (v as f64 - c[hi - 1] as f64, c[hi] as f64 - v as f64);
        if dh < dl {
            hi
        } else {
            hi - 1
        }
    }
}

fn distinct_sorted(values: &[f32]) -> Vec<f32> {
    let mut v = values.to_vec();
    v.sort_by(f32::total_cmp);
    v.dedup();
    v
}

fn assign_all(values: &[f32], centroids: &[f32]) -> Vec<usize> {
    let cb = Codebook {
        bits: 8,
        centroids: centroids.to_vec(),
    };
    values.iter().map(|&v| cb.nearest(v)).collect()
}

/// `Σ (w − ĉ(w))²` with nearest-centroid assignment.
pub fn quantization_error(values: &[f32], centroids: &[f32]) -> f64 {
    let idx = assign_all(values, centroids);
    values
        .iter()
        .zip(idx)
        .map(|(&v, i)| (v as f64 - centroids[i] as f64).powi(2))
        .sum()
}

/// One assignment plus mean update; empty clusters keep their centroid.
/// Centroids must be ascending; the result is sorted and deduplicated.
pub fn lloyd_step(values: &[f32], centroids: &[f32]) -> Vec<f32> {
    let idx = assign_all(values, centroids);
    let mut sum = vec![0.0f64; centroids.len()];
    let mut count = vec![0usize; centroids.len()];
    for (&v, &i) in values.iter().zip(&idx) {
        sum[i] += v as f64;
        count[i] += 1;
    }
    let next: Vec<f32> = centroids
        .iter()
        .enumerate()
        .map(|(j, &c)| if count[j] > 0 { (sum[j] / count[j] as f64) as f32 } else { c })
        .collect();
    distinct_sorted(&next)
}

/// Lloyd's algorithm from evenly spaced centroids. When a layer has at most
/// `2^bits` distinct survivors they become the centroids exactly. Clusters
/// left empty after the first assignment are re-seeded at survivors drawn
/// with `seed`.
pub fn kmeans_codebook(survivors: &[f32], bits: u8, seed: u64) -> Result<Codebook, QuantError> {
    if !(1..=8).contains(&bits) {
        return Err(QuantError::InvalidBits(bits));
    }
    if survivors.is_empty() {
        return Err(QuantError::EmptyCodebook);
    }
    let k = 1usize << bits;
    let distinct = distinct_sorted(survivors);
    if distinct.len() <= k {
        return Ok(Codebook {
            bits,
            centroids: distinct,
        });
    }
    let (lo, hi) = (distinct[0] as f64, distinct[distinct.len() - 1] as f64);
    let mut c: Vec<f32> = (0..k)
        .map(|j| (lo + (hi - lo) * j as f64 / (k - 1) as f64) as f32)
        .collect();
    c = distinct_sorted(&c);

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let idx = assign_all(survivors, &c);
    let mut used = vec![false; c.len()];
    idx.iter().for_each(|&i| used[i] = true);
    for (j, u) in used.iter().enumerate() {
        if !u {
            c[j] = survivors[rng.gen_range(0..survivors.len())];
        }
    }
    c = distinct_sorted(&c);

    let mut assign = assign_all(survivors, &c);
    for _ in 0..MAX_LLOYD_ITERS {
        let next = lloyd_step(survivors, &c);
        let next_assign = assign_all(survivors, &next);
        let stable = next == c || next_assign == assign;
        c = next;
        assign = next_assign;
        if stable {
            break;
        }
    }
    Ok(Codebook { bits, centroids: c })
}

/// Codebook indices of one layer's survivors, in flat index order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuantizedLayer {
    pub name: String,
    pub shape: Vec<usize>,
    pub codebook: Codebook,
    pub keep: Vec<bool>,
    pub indices: Vec<u8>,
}

impl QuantizedLayer {
    pub fn len(&self) -> usize {
        self.keep.len()
    }

    pub fn is_empty(&self) -> bool {
        self.keep.is_empty()
    }

    pub fn survivors(&self) -> usize {
        self.indices.len()
    }

    /// Centroid values at survivor positions, zeros elsewhere.
    pub fn dequantize(&self) -> Vec<f32> {
        let mut out = vec![0.0f32; self.keep.len()];
        let mut it = self.indices.iter();
        for (o, &k) in out.iter_mut().zip(&self.keep) {
            if k {
                *o = self.codebook.centroids[*it.next().unwrap() as usize];
            }
        }
        out
    }

    /// Re-sorts centroids after an update and merges any that coincide,
    /// remapping indices so dequantized values are unchanged. Returns the
    /// old-to-new index map.
    pub fn normalize_codebook(&mut self) -> Vec<u8> {
        let c = &self.codebook.centroids;
        let merged = distinct_sorted(c);
        let remap: Vec<u8> = c
            .iter()
            .map(|v| merged.binary_search_by(|m| m.total_cmp(v)).unwrap() as u8)
            .collect();
        self.indices.iter_mut().for_each(|i| *i = remap[*i as usize]);
        self.codebook.centroids = merged;
        remap
    }
}

/// Maps each survivor of `weights` to its nearest centroid.
pub fn assign_and_dequantize(
    name: &str,
    shape: &[usize],
    weights: &[f32],
    mask: &LayerMask,
    codebook: &Codebook,
) -> Result<(QuantizedLayer, Vec<f32>), QuantError> {
    if codebook.centroids.is_empty() {
        return Err(QuantError::EmptyCodebook);
    }
    if weights.len() != mask.len() {
        return Err(QuantError::ShapeMismatch(format!(
            "{name}: {} weights vs {} mask entries",
            weights.len(),
            mask.len()
        )));
    }
    let indices = weights
        .iter()
        .zip(&mask.keep)
        .filter(|(_, k)| **k)
        .map(|(&w, _)| codebook.nearest(w) as u8)
        .collect();
    let q = QuantizedLayer {
        name: name.to_string(),
        shape: shape.to_vec(),
        codebook: codebook.clone(),
        keep: mask.keep.clone(),
        indices,
    };
    let deq = q.dequantize();
    Ok((q, deq))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct QuantConfig {
    pub conv_bits: u8,
    pub fc_bits: u8,
    pub finetune_steps: u64,
    pub finetune_lr: f64,
    pub seed: u64,
}

impl Default for QuantConfig {
    fn default() -> Self {
        Self {
            conv_bits: 6,
            fc_bits: 4,
            finetune_steps: 200,
            finetune_lr: 0.001,
            seed: 0,
        }
    }
}

impl QuantConfig {
    pub fn validate(&self) -> Result<(), QuantError> {
        for b in [self.conv_bits, self.fc_bits] {
            if !(1..=8).contains(&b) {
                return Err(QuantError::InvalidBits(b));
            }
        }
        Ok(())
    }
}

/// Builds a codebook for every masked layer and writes dequantized weights
/// into `model`.
pub fn quantize_model(
    model: &mut Model<f32>,
    state: &PruneState,
    config: &QuantConfig,
) -> Result<Vec<QuantizedLayer>, QuantError> {
    config.validate()?;
    let mut out = Vec::new();
    for (li, (name, mask)) in state.layers.iter().enumerate() {
        let bits = match model.role(name) {
            Some(ParamRole::ConvWeight) => config.conv_bits,
            _ => config.fc_bits,
        };
        let t = model.param(name).ok_or_else(|| NnError::UnknownParam(name.clone()))?;
        let survivors: Vec<f32> = t.data().iter().zip(&mask.keep).filter(|(_, k)| **k).map(|(w, _)| *w).collect();
        if survivors.is_empty() {
            return Err(QuantError::NoSurvivors(name.clone()));
        }
        let cb = kmeans_codebook(&survivors, bits, config.seed.wrapping_add(li as u64))?;
        let shape = t.shape().to_vec();
        let (q, deq) = assign_and_dequantize(name, &shape, t.data(), mask, &cb)?;
        model.set_param(name, Tensor::from_vec(&shape, deq))?;
        out.push(q);
    }
    Ok(out)
}

/// Per-centroid sums of the weight gradient over assigned survivors.
pub fn centroid_gradients(layer: &QuantizedLayer, grad: &[f32]) -> Vec<f64> {
    let mut g = vec![0.0f64; layer.codebook.centroids.len()];
    let mut it = layer.indices.iter();
    for (gv, &k) in grad.iter().zip(&layer.keep) {
        if k {
            g[*it.next().unwrap() as usize] += *gv as f64;
        }
    }
    g
}

/// `v ← μ·v − lr·g; c ← c + v` per centroid.
pub fn update_centroids(layer: &mut QuantizedLayer, velocity: &mut [f64], grads: &[f64], lr: f64, momentum: f64) {
    for ((c, v), g) in layer.codebook.centroids.iter_mut().zip(velocity.iter_mut()).zip(grads) {
        *v = momentum * *v - lr * g;
        *c = (*c as f64 + *v) as f32;
    }
}

/// Fine-tunes codebooks for `steps` iterations. Unquantized trainables
/// (biases, batch-norm affine terms, PReLU slopes) are trained alongside
/// with plain momentum SGD.
pub fn finetune_centroids(
    model: &mut Model<f32>,
    layers: &mut [QuantizedLayer],
    source: &mut dyn BatchSource<f32>,
    train_config: &TrainConfig,
    steps: u64,
) -> Result<Vec<f64>, QuantError> {
    let cfg = TrainConfig {
        iterations: steps,
        ..train_config.clone()
    };
    let mut optim = OptimState::new(model, cfg.base_lr, cfg.momentum);
    let mut velocity: Vec<Vec<f64>> = layers.iter().map(|l| vec![0.0; l.codebook.centroids.len()]).collect();
    let mut losses = Vec::new();
    for it in 0..steps {
        let mut captured: IndexMap<String, Vec<f32>> = IndexMap::new();
        let mut grab = |g: &mut crate::nn::Gradients<f32>| {
            for l in layers.iter() {
                if let Some(t) = g.params.swap_remove(&l.name) {
                    captured.insert(l.name.clone(), t.into_data());
                }
            }
        };
        let rec = train_step(model, &mut optim, source, &cfg, it, None, Some(&mut grab))?;
        losses.push(rec.loss);
        for (l, v) in layers.iter_mut().zip(velocity.iter_mut()) {
            let g = centroid_gradients(l, &captured[&l.name]);
            update_centroids(l, v, &g, rec.lr, cfg.momentum);
        }
        for (l, v) in layers.iter_mut().zip(velocity.iter_mut()) {
            let remap = l.normalize_codebook();
            let mut moved = vec![0.0; l.codebook.centroids.len()];
            for (old, &new) in remap.iter().enumerate() {
                moved[new as usize] = v[old];
            }
            *v = moved;
            model.set_param(&l.name, Tensor::from_vec(&l.shape, l.dequantize()))?;
        }
    }
    Ok(losses)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{Batch, GraphBuilder};
    use proptest::prelude::*;

    #[test]
    fn exact_clusters() {
        let cb = kmeans_codebook(&[-1.0, -1.0, 1.0, 1.0], 1, 0).unwrap();
        assert_eq!(cb.centroids, [-1.0, 1.0]);
        let cb = kmeans_codebook(&[0.37; 9], 3, 0).unwrap();
        assert_eq!(cb.centroids, [0.37]);
        assert!(kmeans_codebook(&[], 3, 0).is_err());
        assert!(kmeans_codebook(&[1.0], 9, 0).is_err());
    }

    #[test]
    fn lloyd_converges_on_two_groups() {
        let v: Vec<f32> = (0..50).map(|i| -2.0 + i as f32 * 1e-3).chain((0..50).map(|i| 3.0 + i as f32 * 1e-3)).collect();
        let cb = kmeans_codebook(&v, 1, 0).unwrap();
        assert!((cb.centroids[0] + 1.9755).abs() < 1e-4 && (cb.centroids[1] - 3.0245).abs() < 1e-4, "{:?}", cb.centroids);
    }

    #[test]
    fn nearest_ties_go_low() {
        let cb = Codebook {
            bits: 2,
            centroids: vec![-1.0, 0.0, 1.0, 4.0],
        };
        assert_eq!(cb.nearest(0.0), 1);
        assert_eq!(cb.nearest(0.5), 1);
        assert_eq!(cb.nearest(2.5), 2);
        assert_eq!(cb.nearest(-7.0), 0);
        assert_eq!(cb.nearest(9.0), 3);
        assert_eq!(cb.nearest(0.51), 2);
    }

    #[test]
    fn dequantize_respects_mask() {
        let mut mask = LayerMask::full(5);
        mask.keep[1] = false;
        mask.keep[3] = false;
        let cb = Codebook {
            bits: 1,
            centroids: vec![-0.5, 0.5],
        };
        let (q, deq) = assign_and_dequantize("w", &[5], &[0.4, 9.0, -0.2, 9.0, 0.6], &mask, &cb).unwrap();
        assert_eq!(q.indices, [1, 0, 1]);
        assert_eq!(deq, [0.5, 0.0, -0.5, 0.0, 0.5]);
        let empty = Codebook { bits: 1, centroids: vec![] };
        assert_eq!(
            assign_and_dequantize("w", &[5], &[0.0; 5], &mask, &empty).unwrap_err(),
            QuantError::EmptyCodebook
        );
    }

    #[test]
    fn shared_gradient_hand_computation() {
        // One centroid, m = 4 survivors, uniform gradient g = 0.5, lr 0.1:
        // the centroid drops by 0.1 · 4 · 0.5 = 0.2.
        let mut q = QuantizedLayer {
            name: "w".into(),
            shape: vec![6],
            codebook: Codebook { bits: 1, centroids: vec![1.0] },
            keep: vec![true, false, true, true, false, true],
            indices: vec![0; 4],
        };
        let g = centroid_gradients(&q, &[0.5; 6]);
        assert_eq!(g, [2.0]);
        let mut v = vec![0.0];
        update_centroids(&mut q, &mut v, &g, 0.1, 0.0);
        assert!((q.codebook.centroids[0] - 0.8).abs() < 1e-7);
        let mut v = vec![0.0];
        update_centroids(&mut q, &mut v, &[0.0], 0.1, 0.0);
        assert!((q.codebook.centroids[0] - 0.8).abs() < 1e-7);
    }

    #[test]
    fn normalize_merges_and_remaps() {
        let mut q = QuantizedLayer {
            name: "w".into(),
            shape: vec![3],
            codebook: Codebook { bits: 2, centroids: vec![0.3, 0.1, 0.3] },
            keep: vec![true; 3],
            indices: vec![0, 1, 2],
        };
        let before = q.dequantize();
        assert_eq!(q.normalize_codebook(), [1, 0, 1]);
        assert_eq!(q.codebook.centroids, [0.1, 0.3]);
        assert_eq!(q.dequantize(), before);
    }

    fn toy() -> (Model<f32>, impl FnMut(u64) -> Batch<f32>) {
        let mut b = GraphBuilder::new(2, 4, 4);
        let c = b.conv_bn_prelu(0, 6, 3, 1, "conv").unwrap();
        let g = b.gap(c, "gap").unwrap();
        let f = b.linear(g, 3, "fc").unwrap();
        let m = Model::init(b.finish(f), 4);
        let src = |_: u64| {
            let data = (0..6 * 32).map(|i| ((i * 7) % 11) as f32 / 11.0 - 0.5).collect();
            Batch {
                inputs: Tensor::from_vec(&[6, 2, 4, 4], data),
                labels: vec![0, 1, 2, 0, 1, 2],
            }
        };
        (m, src)
    }

    #[test]
    fn saturated_codebook_is_lossless() {
        let (mut m, mut src) = toy();
        let x = src(0).inputs;
        let before = m.forward_eval(&x).unwrap();
        let state = PruneState::new(&m);
        let cfg = QuantConfig { conv_bits: 8, fc_bits: 8, ..Default::default() };
        let layers = quantize_model(&mut m, &state, &cfg).unwrap();
        assert!(layers.iter().all(|l| l.codebook.centroids.len() == l.survivors()));
        assert_eq!(m.forward_eval(&x).unwrap().data(), before.data());
    }

    #[test]
    fn lookup_forward_matches_dequantized() {
        let (mut m, mut src) = toy();
        let x = src(0).inputs;
        let state = PruneState::new(&m);
        let layers = quantize_model(&mut m, &state, &QuantConfig { conv_bits: 2, fc_bits: 2, ..Default::default() }).unwrap();
        let mut lookup = m.clone();
        for l in &layers {
            let mut k = 0;
            let w: Vec<f32> = l
                .keep
                .iter()
                .map(|&keep| {
                    if keep {
                        k += 1;
                        l.codebook.centroids[l.indices[k - 1] as usize]
                    } else {
                        0.0
                    }
                })
                .collect();
            lookup.set_param(&l.name, Tensor::from_vec(&l.shape, w)).unwrap();
        }
        assert_eq!(m.forward_eval(&x).unwrap().data(), lookup.forward_eval(&x).unwrap().data());
    }

    #[test]
    fn finetune_keeps_masks_and_first_step_descends() {
        let (mut m, mut src) = toy();
        let mut state = PruneState::new(&m);
        for (name, mask) in state.layers.iter_mut() {
            let w = m.param_mut(name).unwrap().data_mut();
            let n = w.len() / 2;
            crate::dropweight::prune_event(name, w, mask, n).unwrap();
        }
        let mut layers = quantize_model(&mut m, &state, &QuantConfig { conv_bits: 3, fc_bits: 2, ..Default::default() }).unwrap();
        let assign: Vec<Vec<u8>> = layers.iter().map(|l| l.indices.clone()).collect();
        let batch = src(0);
        let loss_of = |m: &mut Model<f32>| {
            let y = m.forward_train(&batch.inputs).unwrap();
            m.clear_state();
            crate::nn::softmax_cross_entropy(&y, &batch.labels).unwrap().loss
        };
        let mut probe = m.clone();
        let l0 = loss_of(&mut probe);
        let tc = TrainConfig { base_lr: 1e-3, momentum: 0.0, ..Default::default() };
        finetune_centroids(&mut m, &mut layers, &mut src, &tc, 1).unwrap();
        let mut probe = m.clone();
        let l1 = loss_of(&mut probe);
        assert!(l1 <= l0, "{l1} > {l0}");
        for (l, a) in layers.iter().zip(&assign) {
            assert_eq!(l.keep, state.layers[&l.name].keep);
            assert_eq!(l.indices.len(), a.len());
            let w = m.param(&l.name).unwrap().data();
            assert!(w.iter().zip(&l.keep).all(|(v, k)| *k || *v == 0.0));
        }
    }

    proptest! {
        #[test]
        fn saturation_has_zero_error(v in prop::collection::vec(-3.0f32..3.0, 1..200)) {
            let cb = kmeans_codebook(&v, 8, 1).unwrap();
            prop_assert_eq!(quantization_error(&v, &cb.centroids), 0.0);
        }

        #[test]
        fn lloyd_never_increases_error(v in prop::collection::vec(-3.0f32..3.0, 20..300), bits in 1u8..4) {
            let cb = kmeans_codebook(&v, bits, 2).unwrap();
            prop_assert!(cb.centroids.windows(2).all(|p| p[0] < p[1]));
            prop_assert!(cb.centroids.len() <= 1 << bits);
            let e0 = quantization_error(&v, &cb.centroids);
            let e1 = quantization_error(&v, &lloyd_step(&v, &cb.centroids));
            prop_assert!(e1 <= e0 * (1.0 + 1e-6) + 1e-9, "{} > {}", e1, e0);
        }
    }
}
