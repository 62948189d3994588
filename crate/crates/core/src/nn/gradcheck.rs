//! Central finite-difference checks of [`Model::backward`].
//!
//! The probe loss is `L = Σ r ⊙ y` for a fixed random `r`, so the output
//! gradient fed to backward is `r` itself.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::graph::GraphBuilder;
use super::loss::softmax_cross_entropy;
use super::model::Model;
use super::tensor::Tensor;
use super::NnError;

#[derive(Debug, Clone)]
pub struct TensorCheck {
    pub name: String,
    pub rel_error: f64,
}

#[derive(Debug, Clone)]
pub struct GradReport {
    pub tensors: Vec<TensorCheck>,
}

impl GradReport {
    pub fn max_rel_error(&self) -> f64 {
        self.tensors.iter().map(|t| t.rel_error).fold(0.0, f64::max)
    }
}

/// `‖a − b‖ / max(‖a‖, ‖b‖)`, or the absolute difference when both norms are
/// below `1e-10`.
pub fn rel_error(a: &[f64], b: &[f64]) -> f64 {
    let diff = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let scale = norm(a).max(norm(b));
    if scale < 1e-10 {
        diff
    } else {
        diff / scale
    }
}

fn norm(a: &[f64]) -> f64 {
    a.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn probe_loss(model: &mut Model<f64>, input: &Tensor<f64>, r: &[f64]) -> Result<f64, NnError> {
    let y = model.forward_train(input)?;
    Ok(y.data().iter().zip(r).map(|(a, b)| a * b).sum())
}

/// Compares analytic gradients of every trainable tensor and of the input
/// with central differences of step `eps`. Batch-norm layers run with batch
/// statistics throughout.
pub fn check_model(model: &Model<f64>, input: &Tensor<f64>, eps: f64, seed: u64) -> Result<GradReport, NnError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut m = model.clone();
    let out = m.forward_train(input)?;
    let r: Vec<f64> = (0..out.len()).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let grads = m.backward(&Tensor::from_vec(out.shape(), r.clone()))?;

    let mut tensors = Vec::new();
    for (name, analytic) in &grads.params {
        let mut numeric = vec![0.0; analytic.len()];
        for (i, slot) in numeric.iter_mut().enumerate() {
            let orig = m.param(name).unwrap().data()[i];
            m.param_mut(name).unwrap().data_mut()[i] = orig + eps;
            let up = probe_loss(&mut m, input, &r)?;
            m.param_mut(name).unwrap().data_mut()[i] = orig - eps;
            let down = probe_loss(&mut m, input, &r)?;
            m.param_mut(name).unwrap().data_mut()[i] = orig;
            *slot = (up - down) / (2.0 * eps);
        }
        tensors.push(TensorCheck {
            name: name.clone(),
            rel_error: rel_error(analytic.data(), &numeric),
        });
    }

    let mut x = input.clone();
    let mut numeric = vec![0.0; x.len()];
    for (i, slot) in numeric.iter_mut().enumerate() {
        let orig = x.data()[i];
        x.data_mut()[i] = orig + eps;
        let up = probe_loss(&mut m, &x, &r)?;
        x.data_mut()[i] = orig - eps;
        let down = probe_loss(&mut m, &x, &r)?;
        x.data_mut()[i] = orig;
        *slot = (up - down) / (2.0 * eps);
    }
    tensors.push(TensorCheck {
        name: "input".into(),
        rel_error: rel_error(grads.input.data(), &numeric),
    });
    Ok(GradReport { tensors })
}

/// Finite-difference check of the softmax cross-entropy logit gradient.
pub fn check_softmax_ce(logits: &Tensor<f64>, labels: &[usize], eps: f64) -> Result<f64, NnError> {
    let analytic = softmax_cross_entropy(logits, labels)?.grad;
    let mut x = logits.clone();
    let mut numeric = vec![0.0; x.len()];
    for (i, slot) in numeric.iter_mut().enumerate() {
        let orig = x.data()[i];
        x.data_mut()[i] = orig + eps;
        let up = softmax_cross_entropy(&x, labels)?.loss;
        x.data_mut()[i] = orig - eps;
        let down = softmax_cross_entropy(&x, labels)?.loss;
        x.data_mut()[i] = orig;
        *slot = (up - down) / (2.0 * eps);
    }
    Ok(rel_error(analytic.data(), &numeric))
}

/// Distinct values spaced at least `gap` apart, each at least `gap / 2`
/// away from zero, in shuffled order. Keeps max-pool and PReLU kinks out of
/// reach of the finite-difference step.
pub fn well_spaced(len: usize, gap: f64, seed: u64) -> Vec<f64> {
    use rand::seq::SliceRandom;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let shift = (len / 2) as f64;
    let mut v: Vec<f64> = (0..len).map(|i| (i as f64 + 0.5 - shift) * gap).collect();
    v.shuffle(&mut rng);
    v
}

/// Layer kinds covered by [`random_case`].
pub const LAYER_KINDS: [&str; 11] = [
    "conv3x3",
    "conv3x3s2",
    "conv1x1",
    "maxpool3x3s2",
    "maxpool3x3s1",
    "batchnorm",
    "prelu",
    "gap",
    "fc",
    "add",
    "concat",
];

/// A small random model isolating one layer kind, with a matching input.
pub fn random_case(kind: &str, seed: u64) -> (Model<f64>, Tensor<f64>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = rng.gen_range(1..=3);
    let c = rng.gen_range(1..=3);
    let h = rng.gen_range(2..=6);
    let w = rng.gen_range(2..=6);
    let mut b = GraphBuilder::new(c, h, w);
    let x = b.input();
    let out = match kind {
        "conv3x3" => b.conv(x, rng.gen_range(1..=3), 3, 1, "conv"),
        "conv3x3s2" => b.conv(x, rng.gen_range(1..=3), 3, 2, "conv"),
        "conv1x1" => b.conv(x, rng.gen_range(1..=3), 1, 1, "conv"),
        "maxpool3x3s2" => b.maxpool(x, 2, "pool"),
        "maxpool3x3s1" => b.maxpool(x, 1, "pool"),
        "batchnorm" => b.batchnorm(x, "bn"),
        "prelu" => b.prelu(x, "act"),
        "gap" => b.gap(x, "gap"),
        "fc" => b.linear(x, rng.gen_range(1..=4), "fc"),
        "add" => {
            let y = b.conv(x, c, 3, 1, "branch").unwrap();
            b.add(x, y, "sum")
        }
        "concat" => {
            let y = b.conv(x, rng.gen_range(1..=2), 1, 1, "a").unwrap();
            let z = b.conv(x, rng.gen_range(1..=2), 3, 1, "b").unwrap();
            b.concat(&[y, x, z], "cat")
        }
        other => panic!("unknown layer kind {other}"),
    }
    .expect("case graph builds");
    let mut model = Model::<f64>::init(b.finish(out), seed ^ 0x5eed);
    let names: Vec<String> = model.params().keys().cloned().collect();
    for name in names {
        let t = model.param_mut(&name).unwrap();
        for v in t.data_mut() {
            *v = rng.gen_range(-1.0..1.0);
        }
        if name.ends_with(".gamma") {
            t.data_mut().iter_mut().for_each(|v| *v += 1.5);
        }
        if name.ends_with(".running_var") {
            t.data_mut().iter_mut().for_each(|v| *v = v.abs() + 0.5);
        }
    }
    let len = n * c * h * w;
    let data = if kind.starts_with("maxpool") || kind == "prelu" {
        well_spaced(len, 0.05, seed)
    } else {
        (0..len).map(|_| rng.gen_range(-1.0..1.0)).collect()
    };
    (model, Tensor::from_vec(&[n, c, h, w], data))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn well_spaced_avoids_zero() {
        for len in 1..20 {
            let v = well_spaced(len, 0.1, len as u64);
            assert!(v.iter().all(|x| x.abs() >= 0.05 - 1e-12));
            let mut s = v.clone();
            s.sort_by(f64::total_cmp);
            assert!(s.windows(2).all(|p| p[1] - p[0] >= 0.1 - 1e-12));
        }
    }

    #[test]
    fn every_kind_has_a_case() {
        for kind in LAYER_KINDS {
            let (m, x) = random_case(kind, 3);
            assert!(m.forward_eval(&x).unwrap().all_finite(), "{kind}");
        }
    }
}
