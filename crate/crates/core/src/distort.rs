//! Character distortion for training-sample synthesis.
//!
//! All affine maps use the row-vector convention `[x', y'] = [x, y] · M`.
//! A random distortion draws one parameter per enabled transform uniformly
//! from `(-alpha, alpha)` and applies, in this order: scale, shear along x,
//! shear along y, rotation, local warp. The result is re-normalized.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ink::{normalize, Point, Trajectory};

const LOCAL_TERMS: usize = 3;
const MAX_RETRIES: usize = 10;

#[derive(Debug, Error, PartialEq)]
pub enum DistortError {
    #[error("degenerate scale factors ({0}, {1}); both must be positive")]
    DegenerateScale(f64, f64),
    #[error("invalid distortion config: {0}")]
    InvalidConfig(&'static str),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DistortionConfig {
    pub alpha: f64,
    pub enable_scale: bool,
    pub enable_shear_x: bool,
    pub enable_shear_y: bool,
    pub enable_rotation: bool,
    pub enable_local: bool,
    pub local_amplitude: f64,
    pub seed: u64,
}

impl Default for DistortionConfig {
    fn default() -> Self {
        Self {
            alpha: 0.2,
            enable_scale: true,
            enable_shear_x: true,
            enable_shear_y: true,
            enable_rotation: true,
            enable_local: true,
            local_amplitude: 0.05,
            seed: 0,
        }
    }
}

impl DistortionConfig {
    pub fn validate(&self) -> Result<(), DistortError> {
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            return Err(DistortError::InvalidConfig("alpha must be finite and >= 0"));
        }
        if !(self.local_amplitude >= 0.0 && self.local_amplitude.is_finite()) {
            return Err(DistortError::InvalidConfig(
                "local_amplitude must be finite and >= 0",
            ));
        }
        Ok(())
    }
}

/// Parameters of one random distortion draw. Disabled transforms carry 0.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct DistortionParams {
    pub scale_x: f64,
    pub scale_y: f64,
    pub shear_x: f64,
    pub shear_y: f64,
    pub rotation: f64,
    pub local_seed: Option<u64>,
}

pub fn scale_transform(traj: &Trajectory, ax: f64, ay: f64) -> Result<Trajectory, DistortError> {
    let (fx, fy) = (1.0 + ax, 1.0 + ay);
    if !(fx > 0.0 && fy > 0.0) {
        return Err(DistortError::DegenerateScale(fx, fy));
    }
    Ok(traj.map_points(|p| Point::new(p.x * fx, p.y * fy)))
}

pub fn shear_x_transform(traj: &Trajectory, a: f64) -> Trajectory {
    traj.map_points(|p| Point::new(p.x, a * p.x + p.y))
}

pub fn shear_y_transform(traj: &Trajectory, a: f64) -> Trajectory {
    traj.map_points(|p| Point::new(p.x + a * p.y, p.y))
}

pub fn rotate_transform(traj: &Trajectory, a: f64) -> Trajectory {
    let (sin, cos) = a.sin_cos();
    traj.map_points(|p| Point::new(p.x * cos + p.y * sin, -p.x * sin + p.y * cos))
}

/// Monotone 1-D warp `w(t) = t + Σ c_k sin(kπ(t+1)/2)` with the end points
/// of `[-1, 1]` fixed and `w'(t) >= 0.5` everywhere.
#[derive(Debug, Clone, PartialEq)]
pub struct Warp {
    coeffs: [f64; LOCAL_TERMS],
}

impl Warp {
    pub fn random(amplitude: f64, rng: &mut impl Rng) -> Self {
        let mut coeffs = [0.0; LOCAL_TERMS];
        for (k, c) in coeffs.iter_mut().enumerate() {
            *c = amplitude * rng.gen_range(-1.0..1.0) / (k + 1) as f64;
        }
        // |w' - 1| <= Σ |c_k| kπ/2
        let slope_bound: f64 = coeffs
            .iter()
            .enumerate()
            .map(|(k, c)| c.abs() * (k + 1) as f64 * std::f64::consts::FRAC_PI_2)
            .sum();
        if slope_bound > 0.5 {
            let shrink = 0.5 / slope_bound;
            coeffs.iter_mut().for_each(|c| *c *= shrink);
        }
        Self { coeffs }
    }

    pub fn apply(&self, t: f64) -> f64 {
        t + self
            .coeffs
            .iter()
            .enumerate()
            .map(|(k, c)| c * ((k + 1) as f64 * std::f64::consts::FRAC_PI_2 * (t + 1.0)).sin())
            .sum::<f64>()
    }

    pub fn derivative(&self, t: f64) -> f64 {
        1.0 + self
            .coeffs
            .iter()
            .enumerate()
            .map(|(k, c)| {
                let w = (k + 1) as f64 * std::f64::consts::FRAC_PI_2;
                c * w * (w * (t + 1.0)).cos()
            })
            .sum::<f64>()
    }
}

pub fn local_deform(traj: &Trajectory, amplitude: f64, seed: u64) -> Trajectory {
    if amplitude == 0.0 {
        return traj.clone();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let wx = Warp::random(amplitude, &mut rng);
    let wy = Warp::random(amplitude, &mut rng);
    traj.map_points(|p| Point::new(wx.apply(p.x), wy.apply(p.y)))
}

fn symmetric_draw(rng: &mut impl Rng, alpha: f64) -> f64 {
    if alpha == 0.0 {
        return 0.0;
    }
    loop {
        let v = rng.gen_range(-alpha..alpha);
        if v > -alpha {
            return v;
        }
    }
}

pub fn draw_params(config: &DistortionConfig, rng: &mut impl Rng) -> DistortionParams {
    let a = config.alpha;
    let mut p = DistortionParams::default();
    if config.enable_scale {
        p.scale_x = symmetric_draw(rng, a);
        p.scale_y = symmetric_draw(rng, a);
    }
    if config.enable_shear_x {
        p.shear_x = symmetric_draw(rng, a);
    }
    if config.enable_shear_y {
        p.shear_y = symmetric_draw(rng, a);
    }
    if config.enable_rotation {
        p.rotation = symmetric_draw(rng, a);
    }
    if config.enable_local && config.local_amplitude > 0.0 {
        p.local_seed = Some(rng.gen());
    }
    p
}

pub fn apply_params(
    traj: &Trajectory,
    params: &DistortionParams,
    local_amplitude: f64,
) -> Result<Trajectory, DistortError> {
    let t = scale_transform(traj, params.scale_x, params.scale_y)?;
    let t = shear_x_transform(&t, params.shear_x);
    let t = shear_y_transform(&t, params.shear_y);
    let t = rotate_transform(&t, params.rotation);
    let t = match params.local_seed {
        Some(seed) => local_deform(&t, local_amplitude, seed),
        None => t,
    };
    Ok(normalize(&t))
}

/// Random distortion using `config.seed`.
pub fn sample_distortion(traj: &Trajectory, config: &DistortionConfig) -> Trajectory {
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    sample_distortion_with(traj, config, &mut rng)
}

/// Random distortion drawing from `rng`. A degenerate scale draw is retried
/// up to ten times before falling back to the (re-normalized) input.
pub fn sample_distortion_with(
    traj: &Trajectory,
    config: &DistortionConfig,
    rng: &mut impl Rng,
) -> Trajectory {
    for _ in 0..MAX_RETRIES {
        let params = draw_params(config, rng);
        if let Ok(t) = apply_params(traj, &params, config.local_amplitude) {
            return t;
        }
    }
    normalize(traj)
}
