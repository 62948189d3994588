//! Pen trajectories: data model, the `ink-json` / `ink-bin` file formats,
//! bounding-box normalization and a synthetic glyph generator.
//!
//! `ink-json` is UTF-8 with one object per line:
//! `{"label": 3, "strokes": [[[x, y], ...], ...]}`.
//!
//! `ink-bin` is little-endian: magic `INKB`, `u16` version (1), `u32` record
//! count, then per record a `u32` label and `u16` stroke count, and per
//! stroke a `u32` point count followed by `f32` x,y pairs.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const INK_BIN_MAGIC: &[u8; 4] = b"INKB";
pub const INK_BIN_VERSION: u16 = 1;

#[derive(Debug, Error, PartialEq)]
pub enum InkError {
    #[error("malformed record at byte {offset}: {reason}")]
    MalformedRecord { offset: usize, reason: String },
    #[error("empty stroke in record at byte {offset}")]
    EmptyStroke { offset: usize },
    #[error("label {label} out of range for {class_count} classes (record at byte {offset})")]
    LabelOutOfRange {
        offset: usize,
        label: u32,
        class_count: u32,
    },
    #[error("unknown ink format `{0}` (expected ink-json or ink-bin)")]
    UnknownFormat(String),
    #[error("invalid trajectory: {0}")]
    InvalidTrajectory(&'static str),
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Point {
    pub x: f64,
    pub y: f64,
}

impl Point {
    pub const fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }

    pub fn is_finite(&self) -> bool {
        self.x.is_finite() && self.y.is_finite()
    }

    pub fn distance(&self, other: &Point) -> f64 {
        (self.x - other.x).hypot(self.y - other.y)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub strokes: Vec<Vec<Point>>,
    pub label: Option<u32>,
}

impl Trajectory {
    /// Validates the stroke invariants (at least one stroke, no empty
    /// strokes, finite coordinates).
    pub fn new(strokes: Vec<Vec<Point>>, label: Option<u32>) -> Result<Self, InkError> {
        let traj = Self { strokes, label };
        traj.validate()?;
        Ok(traj)
    }

    pub fn validate(&self) -> Result<(), InkError> {
        if self.strokes.is_empty() {
            return Err(InkError::InvalidTrajectory("no strokes"));
        }
        if self.strokes.iter().any(|s| s.is_empty()) {
            return Err(InkError::InvalidTrajectory("empty stroke"));
        }
        if !self.points().all(|p| p.is_finite()) {
            return Err(InkError::InvalidTrajectory("non-finite coordinate"));
        }
        Ok(())
    }

    pub fn points(&self) -> impl Iterator<Item = &Point> {
        self.strokes.iter().flatten()
    }

    pub fn point_count(&self) -> usize {
        self.strokes.iter().map(Vec::len).sum()
    }

    /// Applies `f` to every point, keeping stroke structure and label.
    pub fn map_points(&self, mut f: impl FnMut(Point) -> Point) -> Trajectory {
        Trajectory {
            strokes: self
                .strokes
                .iter()
                .map(|s| s.iter().map(|&p| f(p)).collect())
                .collect(),
            label: self.label,
        }
    }

    /// `(min_x, max_x, min_y, max_y)`.
    pub fn bounding_box(&self) -> (f64, f64, f64, f64) {
        self.points().fold(
            (
                f64::INFINITY,
                f64::NEG_INFINITY,
                f64::INFINITY,
                f64::NEG_INFINITY,
            ),
            |(x0, x1, y0, y1), p| (x0.min(p.x), x1.max(p.x), y0.min(p.y), y1.max(p.y)),
        )
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub items: Vec<Trajectory>,
    pub class_count: u32,
}

impl Dataset {
    pub fn new(items: Vec<Trajectory>, class_count: u32) -> Result<Self, InkError> {
        if class_count == 0 {
            return Err(InkError::InvalidTrajectory("class_count must be positive"));
        }
        for t in &items {
            t.validate()?;
            match t.label {
                None => return Err(InkError::InvalidTrajectory("dataset item without label")),
                Some(label) if label >= class_count => {
                    return Err(InkError::LabelOutOfRange {
                        offset: 0,
                        label,
                        class_count,
                    })
                }
                Some(_) => {}
            }
        }
        Ok(Self { items, class_count })
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn labels(&self) -> Vec<usize> {
        self.items
            .iter()
            .map(|t| t.label.expect("dataset items are labeled") as usize)
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum InkFormat {
    #[serde(rename = "ink-json")]
    Json,
    #[serde(rename = "ink-bin")]
    Bin,
}

impl FromStr for InkFormat {
    type Err = InkError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "ink-json" => Ok(InkFormat::Json),
            "ink-bin" => Ok(InkFormat::Bin),
            other => Err(InkError::UnknownFormat(other.to_string())),
        }
    }
}

impl fmt::Display for InkFormat {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            InkFormat::Json => "ink-json",
            InkFormat::Bin => "ink-bin",
        })
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct JsonRecord {
    label: i64,
    strokes: Vec<Vec<[f64; 2]>>,
}

/// Parses a whole trajectory file. When `class_count` is `None` it is
/// inferred as `max(label) + 1` (1 for an empty file).
pub fn parse_trajectory_file(
    bytes: &[u8],
    format: InkFormat,
    class_count: Option<u32>,
) -> Result<Dataset, InkError> {
    let records = match format {
        InkFormat::Json => parse_json(bytes)?,
        InkFormat::Bin => parse_bin(bytes)?,
    };
    let inferred = records
        .iter()
        .map(|(_, t)| t.label.unwrap_or(0) + 1)
        .max()
        .unwrap_or(1);
    let class_count = class_count.unwrap_or(inferred);
    for (offset, t) in &records {
        let label = t.label.unwrap_or(0);
        if label >= class_count {
            return Err(InkError::LabelOutOfRange {
                offset: *offset,
                label,
                class_count,
            });
        }
    }
    let items = records.into_iter().map(|(_, t)| t).collect();
    Dataset::new(items, class_count)
}

fn parse_json(bytes: &[u8]) -> Result<Vec<(usize, Trajectory)>, InkError> {
    let text = std::str::from_utf8(bytes).map_err(|e| InkError::MalformedRecord {
        offset: e.valid_up_to(),
        reason: "invalid UTF-8".into(),
    })?;
    let mut out = Vec::new();
    let mut offset = 0;
    for line in text.split_inclusive('\n') {
        let start = offset;
        offset += line.len();
        let body = line.trim();
        if body.is_empty() {
            continue;
        }
        let rec: JsonRecord =
            serde_json::from_str(body).map_err(|e| InkError::MalformedRecord {
                offset: start,
                reason: e.to_string(),
            })?;
        if rec.label < 0 || rec.label > u32::MAX as i64 {
            return Err(InkError::MalformedRecord {
                offset: start,
                reason: format!("label {} is not a u32", rec.label),
            });
        }
        if rec.strokes.is_empty() || rec.strokes.iter().any(Vec::is_empty) {
            return Err(InkError::EmptyStroke { offset: start });
        }
        let strokes: Vec<Vec<Point>> = rec
            .strokes
            .iter()
            .map(|s| s.iter().map(|&[x, y]| Point::new(x, y)).collect())
            .collect();
        if !strokes.iter().flatten().all(Point::is_finite) {
            return Err(InkError::MalformedRecord {
                offset: start,
                reason: "non-finite coordinate".into(),
            });
        }
        out.push((
            start,
            Trajectory {
                strokes,
                label: Some(rec.label as u32),
            },
        ));
    }
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8], InkError> {
        if self.bytes.len() - self.pos < n {
            return Err(InkError::MalformedRecord {
                offset: self.pos,
                reason: format!("truncated while reading {what}"),
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u16(&mut self, what: &str) -> Result<u16, InkError> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().unwrap()))
    }

    fn u32(&mut self, what: &str) -> Result<u32, InkError> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn f32(&mut self, what: &str) -> Result<f32, InkError> {
        Ok(f32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }
}

fn parse_bin(bytes: &[u8]) -> Result<Vec<(usize, Trajectory)>, InkError> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4, "magic")? != INK_BIN_MAGIC {
        return Err(InkError::MalformedRecord {
            offset: 0,
            reason: "bad magic (expected INKB)".into(),
        });
    }
    let version = r.u16("version")?;
    if version != INK_BIN_VERSION {
        return Err(InkError::MalformedRecord {
            offset: 4,
            reason: format!("unsupported version {version}"),
        });
    }
    let count = r.u32("record count")?;
    let mut out = Vec::with_capacity(count.min(1 << 20) as usize);
    for _ in 0..count {
        let start = r.pos;
        let label = r.u32("label")?;
        let stroke_count = r.u16("stroke count")?;
        if stroke_count == 0 {
            return Err(InkError::EmptyStroke { offset: start });
        }
        let mut strokes = Vec::with_capacity(stroke_count as usize);
        for _ in 0..stroke_count {
            let n = r.u32("point count")?;
            if n == 0 {
                return Err(InkError::EmptyStroke { offset: start });
            }
            let mut stroke = Vec::with_capacity(n.min(1 << 20) as usize);
            for _ in 0..n {
                let at = r.pos;
                let x = r.f32("x")?;
                let y = r.f32("y")?;
                if !x.is_finite() || !y.is_finite() {
                    return Err(InkError::MalformedRecord {
                        offset: at,
                        reason: "non-finite coordinate".into(),
                    });
                }
                stroke.push(Point::new(x as f64, y as f64));
            }
            strokes.push(stroke);
        }
        out.push((
            start,
            Trajectory {
                strokes,
                label: Some(label),
            },
        ));
    }
    if r.pos != bytes.len() {
        return Err(InkError::MalformedRecord {
            offset: r.pos,
            reason: "trailing bytes after last record".into(),
        });
    }
    Ok(out)
}

/// Serializes a dataset. `ink-bin` stores coordinates as `f32`, so it
/// roundtrips exactly only for `f32`-representable coordinates (the toy
/// generator guarantees this).
pub fn serialize_trajectory_file(dataset: &Dataset, format: InkFormat) -> Vec<u8> {
    match format {
        InkFormat::Json => {
            let mut out = Vec::new();
            for t in &dataset.items {
                let rec = JsonRecord {
                    label: t.label.unwrap_or(0) as i64,
                    strokes: t
                        .strokes
                        .iter()
                        .map(|s| s.iter().map(|p| [p.x, p.y]).collect())
                        .collect(),
                };
                serde_json::to_writer(&mut out, &rec).expect("in-memory write");
                out.push(b'\n');
            }
            out
        }
        InkFormat::Bin => {
            let mut out = Vec::new();
            out.extend_from_slice(INK_BIN_MAGIC);
            out.extend_from_slice(&INK_BIN_VERSION.to_le_bytes());
            out.extend_from_slice(&(dataset.items.len() as u32).to_le_bytes());
            for t in &dataset.items {
                out.extend_from_slice(&t.label.unwrap_or(0).to_le_bytes());
                out.extend_from_slice(&(t.strokes.len() as u16).to_le_bytes());
                for s in &t.strokes {
                    out.extend_from_slice(&(s.len() as u32).to_le_bytes());
                    for p in s {
                        out.extend_from_slice(&(p.x as f32).to_le_bytes());
                        out.extend_from_slice(&(p.y as f32).to_le_bytes());
                    }
                }
            }
            out
        }
    }
}

/// Maps the trajectory into `[-1, 1]²` keeping its aspect ratio: the longer
/// bounding-box side spans the full interval and the box center goes to the
/// origin. A trajectory whose points all coincide maps to the origin.
pub fn normalize(traj: &Trajectory) -> Trajectory {
    let (x0, x1, y0, y1) = traj.bounding_box();
    let extent = (x1 - x0).max(y1 - y0);
    if !(extent > 0.0) {
        return traj.map_points(|_| Point::new(0.0, 0.0));
    }
    let cx = 0.5 * (x0 + x1);
    let cy = 0.5 * (y0 + y1);
    let scale = 2.0 / extent;
    traj.map_points(|p| Point::new((p.x - cx) * scale, (p.y - cy) * scale))
}

/// Uniform arc-length resampling of every stroke at `spacing`, keeping the
/// first and last point of each stroke. Zero-length strokes collapse to
/// their first point.
pub fn resample(traj: &Trajectory, spacing: f64) -> Trajectory {
    assert!(spacing > 0.0, "resample spacing must be positive");
    let strokes = traj
        .strokes
        .iter()
        .map(|stroke| resample_stroke(stroke, spacing))
        .collect();
    Trajectory {
        strokes,
        label: traj.label,
    }
}

fn resample_stroke(stroke: &[Point], spacing: f64) -> Vec<Point> {
    let length: f64 = stroke.windows(2).map(|w| w[0].distance(&w[1])).sum();
    if length == 0.0 {
        return vec![stroke[0]];
    }
    let steps = (length / spacing).ceil().max(1.0) as usize;
    let step = length / steps as f64;
    let mut out = Vec::with_capacity(steps + 1);
    out.push(stroke[0]);
    let mut seg = 0;
    let mut seg_start = 0.0;
    for k in 1..steps {
        let target = k as f64 * step;
        while seg + 1 < stroke.len() - 1
            && seg_start + stroke[seg].distance(&stroke[seg + 1]) < target
        {
            seg_start += stroke[seg].distance(&stroke[seg + 1]);
            seg += 1;
        }
        let (a, b) = (stroke[seg], stroke[seg + 1]);
        let len = a.distance(&b);
        let t = if len > 0.0 {
            ((target - seg_start) / len).clamp(0.0, 1.0)
        } else {
            0.0
        };
        out.push(Point::new(a.x + t * (b.x - a.x), a.y + t * (b.y - a.y)));
    }
    out.push(*stroke.last().unwrap());
    out
}

#[derive(Debug, Clone)]
enum Primitive {
    Polyline(Vec<Point>),
    Arc {
        center: Point,
        radius: f64,
        start: f64,
        sweep: f64,
    },
}

fn class_template(class: u32) -> Vec<Primitive> {
    let mut rng = ChaCha8Rng::seed_from_u64(0x9e37_79b9_7f4a_7c15 ^ class as u64);
    let strokes = 1 + (class % 3) as usize;
    (0..strokes)
        .map(|_| {
            if rng.gen_bool(0.6) {
                let n = rng.gen_range(3..=5);
                Primitive::Polyline(
                    (0..n)
                        .map(|_| Point::new(rng.gen_range(-0.9..0.9), rng.gen_range(-0.9..0.9)))
                        .collect(),
                )
            } else {
                let sign = if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
                Primitive::Arc {
                    center: Point::new(rng.gen_range(-0.4..0.4), rng.gen_range(-0.4..0.4)),
                    radius: rng.gen_range(0.3..0.8),
                    start: rng.gen_range(0.0..std::f64::consts::TAU),
                    sweep: sign * rng.gen_range(0.5..1.75) * std::f64::consts::PI,
                }
            }
        })
        .collect()
}

fn render_primitive(p: &Primitive, rng: &mut ChaCha8Rng, jitter: &Normal<f64>) -> Vec<Point> {
    match p {
        Primitive::Polyline(ctrl) => {
            let ctrl: Vec<Point> = ctrl
                .iter()
                .map(|c| Point::new(c.x + jitter.sample(rng), c.y + jitter.sample(rng)))
                .collect();
            let mut pts = vec![ctrl[0]];
            for w in ctrl.windows(2) {
                for k in 1..=8 {
                    let t = k as f64 / 8.0;
                    pts.push(Point::new(
                        w[0].x + t * (w[1].x - w[0].x),
                        w[0].y + t * (w[1].y - w[0].y),
                    ));
                }
            }
            pts
        }
        Primitive::Arc {
            center,
            radius,
            start,
            sweep,
        } => {
            let c = Point::new(center.x + jitter.sample(rng), center.y + jitter.sample(rng));
            let r = radius * (1.0 + 0.5 * jitter.sample(rng));
            let s = start + jitter.sample(rng);
            (0..=16)
                .map(|k| {
                    let a = s + sweep * k as f64 / 16.0;
                    Point::new(c.x + r * a.cos(), c.y + r * a.sin())
                })
                .collect()
        }
    }
}

/// Synthetic labeled glyph set. Class templates depend only on the class id,
/// so datasets drawn with different seeds share classes; `seed` drives the
/// per-sample jitter. Coordinates are rounded to `f32` precision so `ink-bin`
/// files roundtrip exactly.
pub fn gen_toy_dataset(class_count: u32, per_class: usize, seed: u64) -> Dataset {
    assert!(class_count >= 2, "toy dataset needs at least two classes");
    let templates: Vec<Vec<Primitive>> = (0..class_count).map(class_template).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ctrl_jitter = Normal::new(0.0, 0.05).unwrap();
    let point_noise = Normal::new(0.0, 0.008).unwrap();
    let mut items = Vec::with_capacity(class_count as usize * per_class);
    for (class, template) in templates.iter().enumerate() {
        for _ in 0..per_class {
            let sx = 1.0 + rng.gen_range(-0.1..0.1);
            let sy = 1.0 + rng.gen_range(-0.1..0.1);
            let rot: f64 = rng.gen_range(-0.12..0.12);
            let (tx, ty) = (rng.gen_range(-0.1..0.1), rng.gen_range(-0.1..0.1));
            let (sin, cos) = rot.sin_cos();
            let strokes = template
                .iter()
                .map(|prim| {
                    render_primitive(prim, &mut rng, &ctrl_jitter)
                        .into_iter()
                        .map(|p| {
                            let x = p.x * sx + point_noise.sample(&mut rng);
                            let y = p.y * sy + point_noise.sample(&mut rng);
                            let (x, y) = (x * cos - y * sin + tx, x * sin + y * cos + ty);
                            // ink units, f32-exact
                            Point::new((500.0 + 400.0 * x) as f32 as f64, (500.0 + 400.0 * y) as f32 as f64)
                        })
                        .collect()
                })
                .collect();
            items.push(Trajectory {
                strokes,
                label: Some(class as u32),
            });
        }
    }
    Dataset { items, class_count }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn traj(points: &[(f64, f64)]) -> Trajectory {
        Trajectory::new(
            vec![points.iter().map(|&(x, y)| Point::new(x, y)).collect()],
            Some(0),
        )
        .unwrap()
    }

    #[test]
    fn minimal_json_record() {
        let d = parse_trajectory_file(
            b"{\"label\": 0, \"strokes\": [[[0, 0], [1, 2]]]}\n",
            InkFormat::Json,
            None,
        )
        .unwrap();
        assert_eq!(d.len(), 1);
        assert_eq!(d.items[0].strokes[0][1], Point::new(1.0, 2.0));
    }

    #[test]
    fn empty_stroke_rejected() {
        let err = parse_trajectory_file(
            b"{\"label\": 0, \"strokes\": [[[0,0]]]}\n{\"label\": 1, \"strokes\": []}\n",
            InkFormat::Json,
            None,
        )
        .unwrap_err();
        assert_eq!(err, InkError::EmptyStroke { offset: 35 });
        let err = parse_trajectory_file(
            b"{\"label\": 0, \"strokes\": [[]]}",
            InkFormat::Json,
            None,
        )
        .unwrap_err();
        assert_eq!(err, InkError::EmptyStroke { offset: 0 });
    }

    #[test]
    fn malformed_json_reports_offset() {
        let err = parse_trajectory_file(
            b"{\"label\": 0, \"strokes\": [[[0,0]]]}\n{\"label\": 0, \"strokes\": [[[0]]]}\n",
            InkFormat::Json,
            None,
        )
        .unwrap_err();
        assert!(matches!(err, InkError::MalformedRecord { offset: 35, .. }), "{err:?}");
    }

    #[test]
    fn label_out_of_range() {
        let err = parse_trajectory_file(
            b"{\"label\": 5, \"strokes\": [[[0,0]]]}\n",
            InkFormat::Json,
            Some(3),
        )
        .unwrap_err();
        assert!(matches!(err, InkError::LabelOutOfRange { label: 5, .. }));
    }

    #[test]
    fn truncated_bin() {
        let d = gen_toy_dataset(2, 1, 3);
        let bytes = serialize_trajectory_file(&d, InkFormat::Bin);
        let err = parse_trajectory_file(&bytes[..bytes.len() - 3], InkFormat::Bin, None).unwrap_err();
        assert!(matches!(err, InkError::MalformedRecord { .. }));
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(parse_trajectory_file(&bad, InkFormat::Bin, None).is_err());
    }

    #[test]
    fn empty_dataset_file() {
        let d = Dataset::new(vec![], 4).unwrap();
        let bytes = serialize_trajectory_file(&d, InkFormat::Bin);
        assert_eq!(bytes.len(), 10);
        assert_eq!(parse_trajectory_file(&bytes, InkFormat::Bin, Some(4)).unwrap(), d);
        assert_eq!(serialize_trajectory_file(&d, InkFormat::Json), b"");
    }

    #[test]
    fn normalize_corners() {
        let n = normalize(&traj(&[(0.0, 0.0), (10.0, 10.0)]));
        assert_eq!(n.strokes[0], vec![Point::new(-1.0, -1.0), Point::new(1.0, 1.0)]);
    }

    #[test]
    fn normalize_preserves_aspect() {
        let n = normalize(&traj(&[(0.0, 0.0), (20.0, 10.0)]));
        assert_eq!(n.strokes[0], vec![Point::new(-1.0, -0.5), Point::new(1.0, 0.5)]);
    }

    #[test]
    fn normalize_degenerate() {
        let n = normalize(&traj(&[(3.0, 4.0), (3.0, 4.0), (3.0, 4.0)]));
        assert!(n.points().all(|p| *p == Point::new(0.0, 0.0)));
    }

    #[test]
    fn toy_dataset_cardinality_and_determinism() {
        let a = gen_toy_dataset(10, 5, 1);
        assert_eq!(a.len(), 50);
        assert_eq!(a, gen_toy_dataset(10, 5, 1));
        assert_ne!(a, gen_toy_dataset(10, 5, 2));
        assert!(a.labels().iter().all(|&l| l < 10));
    }

    #[test]
    fn resample_spacing() {
        let t = traj(&[(0.0, 0.0), (1.0, 0.0), (1.0, 1.0)]);
        let r = resample(&t, 0.25);
        assert_eq!(r.strokes[0].len(), 9);
        for w in r.strokes[0].windows(2) {
            assert!((w[0].distance(&w[1]) - 0.25).abs() < 1e-12);
        }
        assert_eq!(*r.strokes[0].last().unwrap(), Point::new(1.0, 1.0));
    }
}
