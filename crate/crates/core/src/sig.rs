//! Level-2 truncated path signatures of planar polylines and their
//! rasterization into 7-channel feature maps.
//!
//! Channel layout of a [`FeatureStack`]:
//! 0 ink intensity, 1–2 level-1 terms `(S¹, S²)`, 3–6 level-2 terms
//! `(S¹¹, S¹², S²¹, S²²)` of the trailing-window signature ending at each
//! pen point.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ink::{resample, Point, Trajectory};

pub const CHANNELS: usize = 7;
pub const FMAP_MAGIC: &[u8; 4] = b"FMAP";
pub const FMAP_VERSION: u16 = 1;

#[derive(Debug, Error, PartialEq)]
pub enum SigError {
    #[error("signature range {start}..={end} out of range for {len} points")]
    IndexOutOfRange { start: usize, end: usize, len: usize },
    #[error("invalid raster config: {0}")]
    InvalidConfig(&'static str),
    #[error("malformed feature map: {0}")]
    MalformedFeatureMap(String),
}

/// Truncated signature `(1, S^i, S^{ij})` of a 2-D path.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Signature2 {
    pub level0: f64,
    pub level1: [f64; 2],
    pub level2: [[f64; 2]; 2],
}

impl Default for Signature2 {
    fn default() -> Self {
        Self::identity()
    }
}

impl Signature2 {
    pub const fn identity() -> Self {
        Self {
            level0: 1.0,
            level1: [0.0; 2],
            level2: [[0.0; 2]; 2],
        }
    }

    /// Signed (Lévy) area: `(S¹² - S²¹) / 2`.
    pub fn levy_area(&self) -> f64 {
        0.5 * (self.level2[0][1] - self.level2[1][0])
    }

    /// Features in channel order 1..=6.
    pub fn features(&self) -> [f64; 6] {
        [
            self.level1[0],
            self.level1[1],
            self.level2[0][0],
            self.level2[0][1],
            self.level2[1][0],
            self.level2[1][1],
        ]
    }
}

pub fn segment_signature(p: Point, q: Point) -> Signature2 {
    let d = [q.x - p.x, q.y - p.y];
    let mut level2 = [[0.0; 2]; 2];
    for i in 0..2 {
        for j in 0..2 {
            level2[i][j] = 0.5 * d[i] * d[j];
        }
    }
    Signature2 {
        level0: 1.0,
        level1: d,
        level2,
    }
}

/// Chen's identity truncated at level 2: signature of `a` followed by `b`.
pub fn chen_concat(a: &Signature2, b: &Signature2) -> Signature2 {
    let mut level2 = [[0.0; 2]; 2];
    for i in 0..2 {
        for j in 0..2 {
            level2[i][j] = a.level2[i][j] + b.level2[i][j] + a.level1[i] * b.level1[j];
        }
    }
    Signature2 {
        level0: 1.0,
        level1: [a.level1[0] + b.level1[0], a.level1[1] + b.level1[1]],
        level2,
    }
}

/// Signature of the polyline through `points[start..=end]`.
pub fn path_signature(points: &[Point], start: usize, end: usize) -> Result<Signature2, SigError> {
    if start > end || end >= points.len() {
        return Err(SigError::IndexOutOfRange {
            start,
            end,
            len: points.len(),
        });
    }
    Ok(points[start..=end]
        .windows(2)
        .fold(Signature2::identity(), |acc, w| {
            chen_concat(&acc, &segment_signature(w[0], w[1]))
        }))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RasterConfig {
    pub image_size: usize,
    pub window_steps: usize,
    pub line_thickness: f64,
    /// Arc-length resampling spacing in normalized units applied before
    /// drawing; `None` draws the raw points.
    pub resample_spacing: Option<f64>,
}

impl Default for RasterConfig {
    fn default() -> Self {
        Self {
            image_size: 64,
            window_steps: 4,
            line_thickness: 1.5,
            resample_spacing: Some(0.1),
        }
    }
}

impl RasterConfig {
    pub fn validate(&self) -> Result<(), SigError> {
        if self.image_size < 8 || self.image_size > u16::MAX as usize {
            return Err(SigError::InvalidConfig("image_size must be in [8, 65535]"));
        }
        if self.window_steps == 0 {
            return Err(SigError::InvalidConfig("window_steps must be >= 1"));
        }
        if !(self.line_thickness > 0.0 && self.line_thickness.is_finite()) {
            return Err(SigError::InvalidConfig("line_thickness must be positive"));
        }
        if let Some(s) = self.resample_spacing {
            if !(s > 0.0 && s.is_finite()) {
                return Err(SigError::InvalidConfig("resample_spacing must be positive"));
            }
        }
        if 2.0 * self.margin() >= (self.image_size - 1) as f64 {
            return Err(SigError::InvalidConfig("line_thickness too large for image"));
        }
        Ok(())
    }

    pub fn margin(&self) -> f64 {
        self.line_thickness
    }

    /// Pixels per normalized unit.
    pub fn pixel_scale(&self) -> f64 {
        0.5 * ((self.image_size - 1) as f64 - 2.0 * self.margin())
    }

    /// Maps normalized `[-1, 1]` coordinates to pixel-center coordinates
    /// `(column, row)`.
    pub fn to_pixel(&self, p: Point) -> (f64, f64) {
        let s = self.pixel_scale();
        let m = self.margin();
        (m + (p.x + 1.0) * s, m + (p.y + 1.0) * s)
    }
}

/// Channel-major `C × H × W` feature maps.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureStack {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub data: Vec<f32>,
}

impl FeatureStack {
    pub fn zeros(height: usize, width: usize, channels: usize) -> Self {
        Self {
            height,
            width,
            channels,
            data: vec![0.0; height * width * channels],
        }
    }

    pub fn get(&self, c: usize, row: usize, col: usize) -> f32 {
        self.data[(c * self.height + row) * self.width + col]
    }

    fn set(&mut self, c: usize, row: usize, col: usize, v: f32) {
        let idx = (c * self.height + row) * self.width + col;
        self.data[idx] = v;
    }

    pub fn channel(&self, c: usize) -> &[f32] {
        let n = self.height * self.width;
        &self.data[c * n..(c + 1) * n]
    }

    pub fn to_fmap_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(12 + 4 * self.data.len());
        out.extend_from_slice(FMAP_MAGIC);
        out.extend_from_slice(&FMAP_VERSION.to_le_bytes());
        for d in [self.height, self.width, self.channels] {
            out.extend_from_slice(&(d as u16).to_le_bytes());
        }
        for v in &self.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_fmap_bytes(bytes: &[u8]) -> Result<Self, SigError> {
        if bytes.len() < 12 || &bytes[..4] != FMAP_MAGIC {
            return Err(SigError::MalformedFeatureMap("bad magic or short header".into()));
        }
        let u16_at = |i: usize| u16::from_le_bytes([bytes[i], bytes[i + 1]]) as usize;
        let version = u16_at(4);
        if version != FMAP_VERSION as usize {
            return Err(SigError::MalformedFeatureMap(format!("unsupported version {version}")));
        }
        let (h, w, c) = (u16_at(6), u16_at(8), u16_at(10));
        let n = h * w * c;
        if bytes.len() != 12 + 4 * n {
            return Err(SigError::MalformedFeatureMap(format!(
                "expected {} data bytes, found {}",
                4 * n,
                bytes.len() - 12
            )));
        }
        let data = bytes[12..]
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
            .collect();
        Ok(Self {
            height: h,
            width: w,
            channels: c,
            data,
        })
    }
}

fn point_segment_distance(p: (f64, f64), a: (f64, f64), b: (f64, f64)) -> f64 {
    let (dx, dy) = (b.0 - a.0, b.1 - a.1);
    let len2 = dx * dx + dy * dy;
    let t = if len2 > 0.0 {
        (((p.0 - a.0) * dx + (p.1 - a.1) * dy) / len2).clamp(0.0, 1.0)
    } else {
        0.0
    };
    let (cx, cy) = (a.0 + t * dx, a.1 + t * dy);
    (p.0 - cx).hypot(p.1 - cy)
}

/// Renders a normalized trajectory. Self-intersections keep the signature
/// values of the segment drawn last.
pub fn rasterize(traj: &Trajectory, config: &RasterConfig) -> FeatureStack {
    let traj = match config.resample_spacing {
        Some(spacing) => resample(traj, spacing),
        None => traj.clone(),
    };
    let size = config.image_size;
    let mut out = FeatureStack::zeros(size, size, CHANNELS);
    let half = 0.5 * config.line_thickness;
    let reach = half + 0.5;
    for stroke in &traj.strokes {
        let pix: Vec<(f64, f64)> = stroke.iter().map(|&p| config.to_pixel(p)).collect();
        let mut drew = false;
        for k in 1..stroke.len() {
            let (a, b) = (pix[k - 1], pix[k]);
            if (b.0 - a.0).hypot(b.1 - a.1) < 1e-9 {
                continue;
            }
            drew = true;
            let lo = k.saturating_sub(config.window_steps);
            let sig = path_signature(stroke, lo, k).expect("window within stroke");
            let feats = sig.features();
            let c0 = ((a.0.min(b.0) - reach).floor().max(0.0)) as usize;
            let c1 = ((a.0.max(b.0) + reach).ceil().min((size - 1) as f64)) as usize;
            let r0 = ((a.1.min(b.1) - reach).floor().max(0.0)) as usize;
            let r1 = ((a.1.max(b.1) + reach).ceil().min((size - 1) as f64)) as usize;
            for row in r0..=r1 {
                for col in c0..=c1 {
                    let d = point_segment_distance((col as f64, row as f64), a, b);
                    let cov = (reach - d).clamp(0.0, 1.0);
                    if cov <= 0.0 {
                        continue;
                    }
                    if (cov as f32) > out.get(0, row, col) {
                        out.set(0, row, col, cov as f32);
                    }
                    for (ch, v) in feats.iter().enumerate() {
                        out.set(ch + 1, row, col, *v as f32);
                    }
                }
            }
        }
        if !drew {
            // nearest-pixel fallback for point-like strokes
            let (x, y) = pix[0];
            let col = x.round().clamp(0.0, (size - 1) as f64) as usize;
            let row = y.round().clamp(0.0, (size - 1) as f64) as usize;
            out.set(0, row, col, 1.0);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn p(x: f64, y: f64) -> Point {
        Point::new(x, y)
    }

    fn close(a: &Signature2, b: &Signature2, tol: f64) -> bool {
        a.level1.iter().zip(&b.level1).all(|(x, y)| (x - y).abs() <= tol)
            && (0..2).all(|i| (0..2).all(|j| (a.level2[i][j] - b.level2[i][j]).abs() <= tol))
    }

    #[test]
    fn degenerate_segment() {
        let s = segment_signature(p(1.0, 2.0), p(1.0, 2.0));
        assert_eq!(s, Signature2::identity());
    }

    #[test]
    fn segment_closed_form() {
        let s = segment_signature(p(0.0, 0.0), p(3.0, 4.0));
        assert_eq!(s.level1, [3.0, 4.0]);
        assert_eq!(s.level2, [[4.5, 6.0], [6.0, 8.0]]);
    }

    #[test]
    fn chen_hand_product() {
        let a = segment_signature(p(0.0, 0.0), p(1.0, 0.0));
        let b = segment_signature(p(1.0, 0.0), p(1.0, 1.0));
        let ab = chen_concat(&a, &b);
        assert_eq!(ab.level1, [1.0, 1.0]);
        assert_eq!(ab.level2, [[0.5, 1.0], [0.0, 0.5]]);
        assert_eq!(ab.levy_area(), 0.5);
        assert_eq!(chen_concat(&ab, &Signature2::identity()), ab);
        assert_eq!(chen_concat(&Signature2::identity(), &ab), ab);
    }

    #[test]
    fn square_area() {
        let pts = [p(0.0, 0.0), p(1.0, 0.0), p(1.0, 1.0), p(0.0, 1.0), p(0.0, 0.0)];
        let s = path_signature(&pts, 0, 4).unwrap();
        assert_eq!(s.level1, [0.0, 0.0]);
        assert_eq!(s.level2[0][1] - s.level2[1][0], 2.0);
        assert_eq!(s.levy_area(), 1.0);
    }

    #[test]
    fn index_checks() {
        let pts = [p(0.0, 0.0), p(1.0, 0.0)];
        assert_eq!(path_signature(&pts, 1, 1).unwrap(), Signature2::identity());
        assert!(matches!(path_signature(&pts, 0, 2), Err(SigError::IndexOutOfRange { .. })));
        assert!(matches!(path_signature(&pts, 1, 0), Err(SigError::IndexOutOfRange { .. })));
    }

    fn arb_sig() -> impl Strategy<Value = Signature2> {
        prop::collection::vec((-3.0f64..3.0, -3.0f64..3.0), 2..6).prop_map(|v| {
            let pts: Vec<Point> = v.into_iter().map(|(x, y)| p(x, y)).collect();
            path_signature(&pts, 0, pts.len() - 1).unwrap()
        })
    }

    proptest! {
        #[test]
        fn chen_associative(a in arb_sig(), b in arb_sig(), c in arb_sig()) {
            let l = chen_concat(&chen_concat(&a, &b), &c);
            let r = chen_concat(&a, &chen_concat(&b, &c));
            prop_assert!(close(&l, &r, 1e-12));
        }

        #[test]
        fn shuffle_identity(s in arb_sig()) {
            for i in 0..2 {
                for j in 0..2 {
                    let lhs = s.level2[i][j] + s.level2[j][i];
                    let rhs = s.level1[i] * s.level1[j];
                    prop_assert!((lhs - rhs).abs() <= 1e-12 * (1.0 + rhs.abs()));
                }
            }
        }

        #[test]
        fn displacement_is_endpoint_difference(v in prop::collection::vec((-3.0f64..3.0, -3.0f64..3.0), 1..20)) {
            let pts: Vec<Point> = v.into_iter().map(|(x, y)| p(x, y)).collect();
            let s = path_signature(&pts, 0, pts.len() - 1).unwrap();
            let last = pts[pts.len() - 1];
            prop_assert!((s.level1[0] - (last.x - pts[0].x)).abs() < 1e-12);
            prop_assert!((s.level1[1] - (last.y - pts[0].y)).abs() < 1e-12);
        }
    }

    fn straight(x0: f64, x1: f64, y: f64) -> Trajectory {
        Trajectory::new(
            vec![(0..=10).map(|i| p(x0 + (x1 - x0) * i as f64 / 10.0, y)).collect()],
            None,
        )
        .unwrap()
    }

    fn raw_config() -> RasterConfig {
        RasterConfig {
            image_size: 32,
            resample_spacing: None,
            ..RasterConfig::default()
        }
    }

    #[test]
    fn single_point_lights_one_pixel() {
        let t = Trajectory::new(vec![vec![p(0.0, 0.0)]], None).unwrap();
        let fs = rasterize(&t, &raw_config());
        assert_eq!(fs.channel(0).iter().filter(|v| **v > 0.0).count(), 1);
        assert!(fs.data[fs.height * fs.width..].iter().all(|v| *v == 0.0));
    }

    #[test]
    fn left_to_right_stroke_signs() {
        let fs = rasterize(&straight(-0.8, 0.8, 0.0), &raw_config());
        let n = fs.height * fs.width;
        let lit: Vec<usize> = (0..n).filter(|&i| fs.channel(0)[i] > 0.0).collect();
        assert!(!lit.is_empty());
        for &i in &lit {
            assert!(fs.channel(1)[i] > 0.0);
            assert_eq!(fs.channel(2)[i], 0.0);
        }
        for i in 0..n {
            if fs.channel(0)[i] == 0.0 {
                assert!((1..CHANNELS).all(|c| fs.channel(c)[i] == 0.0));
            }
        }
        assert!(fs.channel(0).iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn deterministic_render() {
        let t = straight(-0.5, 0.7, 0.2);
        let cfg = RasterConfig::default();
        assert_eq!(rasterize(&t, &cfg).data, rasterize(&t, &cfg).data);
    }

    #[test]
    fn translation_by_one_pixel() {
        let cfg = raw_config();
        let dx = 1.0 / cfg.pixel_scale();
        let a = rasterize(&straight(-0.6, 0.2, 0.25), &cfg);
        let b = rasterize(&straight(-0.6 + dx, 0.2 + dx, 0.25), &cfg);
        for c in 0..CHANNELS {
            for row in 0..a.height {
                for col in 0..a.width - 1 {
                    let (va, vb) = (a.get(c, row, col), b.get(c, row, col + 1));
                    assert!((va - vb).abs() < 1e-5, "c{c} r{row} c{col}: {va} vs {vb}");
                }
            }
        }
    }

    #[test]
    fn fmap_roundtrip_and_errors() {
        let fs = rasterize(&straight(-0.5, 0.7, 0.2), &raw_config());
        let bytes = fs.to_fmap_bytes();
        assert_eq!(bytes.len(), 12 + 4 * 7 * 32 * 32);
        assert_eq!(FeatureStack::from_fmap_bytes(&bytes).unwrap(), fs);
        assert!(FeatureStack::from_fmap_bytes(&bytes[..100]).is_err());
        assert!(FeatureStack::from_fmap_bytes(b"NOPE00000000").is_err());
    }

    #[test]
    fn config_validation() {
        assert!(RasterConfig::default().validate().is_ok());
        assert!(RasterConfig { image_size: 4, ..RasterConfig::default() }.validate().is_err());
        assert!(RasterConfig { window_steps: 0, ..RasterConfig::default() }.validate().is_err());
    }
}
