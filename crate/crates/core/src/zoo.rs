//! Network builders: a streamlined VGG-style stack, an 18-layer residual
//! net with halved channels, and a reduced inception net, each with either
//! a 1024-unit fully connected head or a global-average-pooling head.
//!
//! Channel counts are the reference plan times the family fraction times
//! `width_multiplier`, rounded to the nearest even number (minimum 2).
//!
//! Inception branch plan at fraction 0.25, before the width multiplier
//! (`mp` is a 3×3 max pool, `s2` a stride-2 layer, `|` separates branches):
//!
//! | block       | branches                                                            | out |
//! |-------------|---------------------------------------------------------------------|-----|
//! | stem        | 16C3; mp s2 \| 24C3 s2; 16C1-24C3 \| 16C1-16C3-24C3; 48C3 s2 \| mp s2 | 96  |
//! | reduction-A | mp s2 \| 96C3 s2 \| 48C1-56C3-64C3 s2                                | 256 |
//! | inception-A | mp-24C1 \| 24C1 \| 16C1-24C3 \| 16C1-24C3-24C3                       | 96  |
//! | inception-B | mp-32C1 \| 96C1 \| 48C1-56C3-64C3 \| 48C1-48C3-56C3-64C3             | 256 |
//! | inception-C | mp-64C1 \| 64C1 \| 96C1-(64C3, 64C3) \| 96C1-112C3-128C3-(64C3, 64C3) | 384 |
//!
//! Asymmetric 1×n / n×1 pairs of the reference become single 3×3 convs and
//! its average-pool branches use a stride-1 max pool.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::nn::graph::{conv_out, pool_out};
use crate::nn::{Graph, GraphBuilder, NnError, NodeId};
use crate::sig::CHANNELS;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Family {
    Streamlined,
    Residual,
    Inception,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Head {
    #[serde(rename = "fc1024")]
    Fc1024,
    #[serde(rename = "gap")]
    Gap,
}

impl FromStr for Family {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "streamlined" => Ok(Family::Streamlined),
            "residual" => Ok(Family::Residual),
            "inception" => Ok(Family::Inception),
            _ => Err(format!("unknown family `{s}`")),
        }
    }
}

impl fmt::Display for Family {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Family::Streamlined => "streamlined",
            Family::Residual => "residual",
            Family::Inception => "inception",
        })
    }
}

impl fmt::Display for Head {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Head::Fc1024 => "fc1024",
            Head::Gap => "gap",
        })
    }
}

pub const FC_HIDDEN: usize = 1024;

/// Ordered conv widths of the streamlined net at width 1.0.
pub const STREAMLINED_PLAN: [usize; 7] = [128, 160, 160, 256, 256, 384, 384];
/// A pool follows these conv positions (0-based).
const STREAMLINED_POOL_AFTER: [usize; 4] = [0, 2, 4, 6];
/// 18-layer reference stage widths, halved by the residual family.
pub const RESIDUAL_REFERENCE: [usize; 4] = [64, 128, 256, 512];
pub const RESIDUAL_FRACTION: f64 = 0.5;
pub const INCEPTION_FRACTION: f64 = 0.25;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ArchSpec {
    pub family: Family,
    pub head: Head,
    pub width_multiplier: f64,
    pub class_count: usize,
    pub image_size: usize,
}

impl Default for ArchSpec {
    fn default() -> Self {
        Self {
            family: Family::Streamlined,
            head: Head::Gap,
            width_multiplier: 0.25,
            class_count: 10,
            image_size: 64,
        }
    }
}

impl ArchSpec {
    pub fn validate(&self) -> Result<(), NnError> {
        if !(self.width_multiplier > 0.0 && self.width_multiplier <= 1.0) {
            return Err(NnError::ShapeMismatch(format!(
                "width_multiplier {} outside (0, 1]",
                self.width_multiplier
            )));
        }
        if self.class_count == 0 || self.image_size == 0 {
            return Err(NnError::ShapeMismatch("class_count and image_size must be positive".into()));
        }
        Ok(())
    }

    /// A reference channel count scaled by `fraction · width_multiplier`.
    pub fn channels(&self, reference: usize, fraction: f64) -> usize {
        scale_channels(reference, fraction * self.width_multiplier)
    }
}

/// Nearest even number to `reference · factor`, at least 2.
pub fn scale_channels(reference: usize, factor: f64) -> usize {
    let half = (reference as f64 * factor / 2.0).round() as usize;
    (2 * half).max(2)
}

pub fn build(spec: &ArchSpec) -> Result<Graph, NnError> {
    match spec.family {
        Family::Streamlined => build_streamlined(spec),
        Family::Residual => build_residual(spec),
        Family::Inception => build_inception(spec),
    }
}

fn head(mut b: GraphBuilder, x: NodeId, spec: &ArchSpec) -> Result<Graph, NnError> {
    let features = match spec.head {
        Head::Gap => b.gap(x, "gap")?,
        Head::Fc1024 => {
            let fc = b.linear(x, FC_HIDDEN, "fc1")?;
            let bn = b.batchnorm(fc, "fc1_bn")?;
            b.prelu(bn, "fc1_prelu")?
        }
    };
    let out = b.linear(features, spec.class_count, "classifier")?;
    Ok(b.finish(out))
}

fn pool_chain(size: usize, pools: usize) -> Option<usize> {
    (0..pools).try_fold(size, |s, _| pool_out(s, 2))
}

pub fn build_streamlined(spec: &ArchSpec) -> Result<Graph, NnError> {
    spec.validate()?;
    if pool_chain(spec.image_size, 4).is_none() {
        return Err(NnError::ShapeMismatch(format!(
            "image_size {} too small for 4 pooling stages",
            spec.image_size
        )));
    }
    let mut b = GraphBuilder::new(CHANNELS, spec.image_size, spec.image_size);
    let mut x = b.input();
    for (i, &c) in STREAMLINED_PLAN.iter().enumerate() {
        x = b.conv_bn_prelu(x, spec.channels(c, 1.0), 3, 1, &format!("conv{}", i + 1))?;
        let p = STREAMLINED_POOL_AFTER.iter().position(|&a| a == i);
        match p {
            // The global-pooling head replaces the last pool.
            Some(3) if spec.head == Head::Gap => {}
            Some(k) => x = b.maxpool(x, 2, &format!("pool{}", k + 1))?,
            None => {}
        }
    }
    head(b, x, spec)
}

/// Two 3×3 conv-BN layers with a PReLU between them, added to the
/// shortcut. A stride-2 block projects its shortcut with a stride-2 3×3
/// conv-BN. Returns the sum (before the post-add activation).
pub fn residual_block(
    b: &mut GraphBuilder,
    x: NodeId,
    channels: usize,
    stride: usize,
    name: &str,
) -> Result<NodeId, NnError> {
    let a = b.conv_bn_prelu(x, channels, 3, stride, &format!("{name}_a"))?;
    let c = b.conv(a, channels, 3, 1, &format!("{name}_b"))?;
    let c = b.batchnorm(c, &format!("{name}_b_bn"))?;
    let shortcut = if stride != 1 || b.channels(x) != channels {
        let p = b.conv(x, channels, 3, stride, &format!("{name}_proj"))?;
        b.batchnorm(p, &format!("{name}_proj_bn"))?
    } else {
        x
    };
    b.add(c, shortcut, &format!("{name}_sum"))
}

pub fn residual_channels(spec: &ArchSpec) -> [usize; 4] {
    RESIDUAL_REFERENCE.map(|c| spec.channels(c, RESIDUAL_FRACTION))
}

/// Stem conv and pool, four stages of two blocks; stages 2–4 open with a
/// stride-2 block.
pub fn build_residual(spec: &ArchSpec) -> Result<Graph, NnError> {
    spec.validate()?;
    if spec.image_size < 8 {
        return Err(NnError::ShapeMismatch(format!(
            "image_size {} too small for the residual net",
            spec.image_size
        )));
    }
    let ch = residual_channels(spec);
    let mut b = GraphBuilder::new(CHANNELS, spec.image_size, spec.image_size);
    let stem = b.conv_bn_prelu(b.input(), ch[0], 3, 1, "stem")?;
    let mut x = b.maxpool(stem, 2, "stem_pool")?;
    for (stage, &c) in ch.iter().enumerate() {
        for block in 0..2 {
            let stride = if stage > 0 && block == 0 { 2 } else { 1 };
            let name = format!("res{}_{}", stage + 1, block + 1);
            let sum = residual_block(&mut b, x, c, stride, &name)?;
            x = b.prelu(sum, &format!("{name}_prelu"))?;
        }
    }
    head(b, x, spec)
}

struct Inc<'a> {
    b: &'a mut GraphBuilder,
    spec: &'a ArchSpec,
}

impl Inc<'_> {
    fn conv(&mut self, x: NodeId, reference: usize, kernel: usize, stride: usize, name: &str) -> Result<NodeId, NnError> {
        let c = self.spec.channels(reference, 1.0);
        self.b.conv_bn_prelu(x, c, kernel, stride, name)
    }

    /// A chain of `(reference_channels, kernel, stride)` convs.
    fn chain(&mut self, x: NodeId, layers: &[(usize, usize, usize)], name: &str) -> Result<NodeId, NnError> {
        let mut y = x;
        for (i, &(c, k, s)) in layers.iter().enumerate() {
            y = self.conv(y, c, k, s, &format!("{name}_{i}"))?;
        }
        Ok(y)
    }

    fn pool_branch(&mut self, x: NodeId, reference: usize, name: &str) -> Result<NodeId, NnError> {
        let p = self.b.maxpool(x, 1, &format!("{name}_pool"))?;
        self.conv(p, reference, 1, 1, &format!("{name}_proj"))
    }
}

/// Reference channels at fraction 0.25; see the module table.
mod inc {
    pub const STEM_CONV: usize = 16;
    pub const STEM_SPLIT: usize = 24;
    pub const STEM_B1: [usize; 2] = [16, 24];
    pub const STEM_B2: [usize; 3] = [16, 16, 24];
    pub const STEM_REDUCE: usize = 48;
    pub const RA_CONV: usize = 96;
    pub const RA_CHAIN: [usize; 3] = [48, 56, 64];
    pub const A_POOL: usize = 24;
    pub const A_1X1: usize = 24;
    pub const A_B3: [usize; 2] = [16, 24];
    pub const A_B4: [usize; 3] = [16, 24, 24];
    pub const B_POOL: usize = 32;
    pub const B_1X1: usize = 96;
    pub const B_B3: [usize; 3] = [48, 56, 64];
    pub const B_B4: [usize; 4] = [48, 48, 56, 64];
    pub const C_POOL: usize = 64;
    pub const C_1X1: usize = 64;
    pub const C_B3: usize = 96;
    pub const C_B4: [usize; 3] = [96, 112, 128];
    pub const C_SPLIT: usize = 64;
}

/// Reference plans are stated at fraction 0.25 already, so the builders
/// scale them by the width multiplier only.
pub fn build_inception(spec: &ArchSpec) -> Result<Graph, NnError> {
    spec.validate()?;
    if pool_chain(spec.image_size, 3).is_none() {
        return Err(NnError::ShapeMismatch(format!(
            "image_size {} too small for the inception net",
            spec.image_size
        )));
    }
    let mut b = GraphBuilder::new(CHANNELS, spec.image_size, spec.image_size);
    let mut n = Inc { b: &mut b, spec };
    let x = n.b.input();

    // Stem.
    let s = n.conv(x, inc::STEM_CONV, 3, 1, "stem_conv")?;
    let p = n.b.maxpool(s, 2, "stem_pool1")?;
    let c = n.conv(s, inc::STEM_SPLIT, 3, 2, "stem_split")?;
    let s = n.b.concat(&[p, c], "stem_cat1")?;
    let b1 = n.chain(s, &[(inc::STEM_B1[0], 1, 1), (inc::STEM_B1[1], 3, 1)], "stem_b1")?;
    let b2 = n.chain(
        s,
        &[(inc::STEM_B2[0], 1, 1), (inc::STEM_B2[1], 3, 1), (inc::STEM_B2[2], 3, 1)],
        "stem_b2",
    )?;
    let s = n.b.concat(&[b1, b2], "stem_cat2")?;
    let c = n.conv(s, inc::STEM_REDUCE, 3, 2, "stem_reduce")?;
    let p = n.b.maxpool(s, 2, "stem_pool2")?;
    let s = n.b.concat(&[c, p], "stem_cat3")?;

    // Reduction-A.
    let p = n.b.maxpool(s, 2, "ra_pool")?;
    let c = n.conv(s, inc::RA_CONV, 3, 2, "ra_conv")?;
    let ch = n.chain(
        s,
        &[(inc::RA_CHAIN[0], 1, 1), (inc::RA_CHAIN[1], 3, 1), (inc::RA_CHAIN[2], 3, 2)],
        "ra_chain",
    )?;
    let s = n.b.concat(&[p, c, ch], "ra_cat")?;

    // Inception-A.
    let b1 = n.pool_branch(s, inc::A_POOL, "ia_b1")?;
    let b2 = n.conv(s, inc::A_1X1, 1, 1, "ia_b2")?;
    let b3 = n.chain(s, &[(inc::A_B3[0], 1, 1), (inc::A_B3[1], 3, 1)], "ia_b3")?;
    let b4 = n.chain(s, &[(inc::A_B4[0], 1, 1), (inc::A_B4[1], 3, 1), (inc::A_B4[2], 3, 1)], "ia_b4")?;
    let s = n.b.concat(&[b1, b2, b3, b4], "ia_cat")?;

    // Inception-B.
    let b1 = n.pool_branch(s, inc::B_POOL, "ib_b1")?;
    let b2 = n.conv(s, inc::B_1X1, 1, 1, "ib_b2")?;
    let b3 = n.chain(s, &[(inc::B_B3[0], 1, 1), (inc::B_B3[1], 3, 1), (inc::B_B3[2], 3, 1)], "ib_b3")?;
    let b4 = n.chain(
        s,
        &[(inc::B_B4[0], 1, 1), (inc::B_B4[1], 3, 1), (inc::B_B4[2], 3, 1), (inc::B_B4[3], 3, 1)],
        "ib_b4",
    )?;
    let s = n.b.concat(&[b1, b2, b3, b4], "ib_cat")?;

    // Inception-C.
    let b1 = n.pool_branch(s, inc::C_POOL, "ic_b1")?;
    let b2 = n.conv(s, inc::C_1X1, 1, 1, "ic_b2")?;
    let t3 = n.conv(s, inc::C_B3, 1, 1, "ic_b3")?;
    let b3a = n.conv(t3, inc::C_SPLIT, 3, 1, "ic_b3_a")?;
    let b3b = n.conv(t3, inc::C_SPLIT, 3, 1, "ic_b3_b")?;
    let t4 = n.chain(s, &[(inc::C_B4[0], 1, 1), (inc::C_B4[1], 3, 1), (inc::C_B4[2], 3, 1)], "ic_b4")?;
    let b4a = n.conv(t4, inc::C_SPLIT, 3, 1, "ic_b4_a")?;
    let b4b = n.conv(t4, inc::C_SPLIT, 3, 1, "ic_b4_b")?;
    let s = n.b.concat(&[b1, b2, b3a, b3b, b4a, b4b], "ic_cat")?;

    head(b, s, spec)
}

/// Trainable parameter count from closed-form layer arithmetic, without
/// building a graph.
pub fn param_count(spec: &ArchSpec) -> usize {
    // conv + BN (γ, β) + PReLU slope.
    fn cbp(cin: usize, cout: usize, k: usize) -> usize {
        cin * cout * k * k + 3 * cout
    }
    fn head_count(spec: &ArchSpec, channels: usize, spatial: usize) -> usize {
        let k = spec.class_count;
        match spec.head {
            Head::Gap => channels * k + k,
            Head::Fc1024 => {
                let f = channels * spatial * spatial;
                f * FC_HIDDEN + FC_HIDDEN + 3 * FC_HIDDEN + FC_HIDDEN * k + k
            }
        }
    }
    let ch = |r: usize, frac: f64| spec.channels(r, frac);
    match spec.family {
        Family::Streamlined => {
            let plan: Vec<usize> = STREAMLINED_PLAN.iter().map(|&c| ch(c, 1.0)).collect();
            let mut total = 0;
            let mut cin = CHANNELS;
            for &c in &plan {
                total += cbp(cin, c, 3);
                cin = c;
            }
            let pools = if spec.head == Head::Gap { 3 } else { 4 };
            let spatial = pool_chain(spec.image_size, pools).unwrap_or(0);
            total + head_count(spec, cin, spatial)
        }
        Family::Residual => {
            let plan = residual_channels(spec);
            let mut total = cbp(CHANNELS, plan[0], 3);
            let mut cin = plan[0];
            let mut spatial = pool_out(spec.image_size, 2).unwrap_or(0);
            for (stage, &c) in plan.iter().enumerate() {
                for block in 0..2 {
                    let stride = if stage > 0 && block == 0 { 2 } else { 1 };
                    // conv-BN-PReLU, conv-BN, post-add PReLU.
                    total += cbp(cin, c, 3) + 9 * c * c + 2 * c + c;
                    if stride != 1 || cin != c {
                        total += 9 * cin * c + 2 * c;
                    }
                    spatial = conv_out(spatial, 3, stride);
                    cin = c;
                }
            }
            total + head_count(spec, cin, spatial)
        }
        Family::Inception => {
            let c = |r: usize| ch(r, 1.0);
            let chain = |cin: usize, layers: &[(usize, usize)]| -> (usize, usize) {
                layers.iter().fold((0, cin), |(acc, ci), &(r, k)| (acc + cbp(ci, c(r), k), c(r)))
            };
            let mut total = 0;
            let stem = c(inc::STEM_CONV);
            total += cbp(CHANNELS, stem, 3) + cbp(stem, c(inc::STEM_SPLIT), 3);
            let cat1 = stem + c(inc::STEM_SPLIT);
            let (p1, o1) = chain(cat1, &[(inc::STEM_B1[0], 1), (inc::STEM_B1[1], 3)]);
            let (p2, o2) = chain(cat1, &[(inc::STEM_B2[0], 1), (inc::STEM_B2[1], 3), (inc::STEM_B2[2], 3)]);
            total += p1 + p2;
            let cat2 = o1 + o2;
            total += cbp(cat2, c(inc::STEM_REDUCE), 3);
            let cat3 = c(inc::STEM_REDUCE) + cat2;

            let (pc, oc) = chain(cat3, &[(inc::RA_CHAIN[0], 1), (inc::RA_CHAIN[1], 3), (inc::RA_CHAIN[2], 3)]);
            total += cbp(cat3, c(inc::RA_CONV), 3) + pc;
            let ra = cat3 + c(inc::RA_CONV) + oc;

            let (a3, o3) = chain(ra, &[(inc::A_B3[0], 1), (inc::A_B3[1], 3)]);
            let (a4, o4) = chain(ra, &[(inc::A_B4[0], 1), (inc::A_B4[1], 3), (inc::A_B4[2], 3)]);
            total += cbp(ra, c(inc::A_POOL), 1) + cbp(ra, c(inc::A_1X1), 1) + a3 + a4;
            let ia = c(inc::A_POOL) + c(inc::A_1X1) + o3 + o4;

            let (b3, o3) = chain(ia, &[(inc::B_B3[0], 1), (inc::B_B3[1], 3), (inc::B_B3[2], 3)]);
            let (b4, o4) = chain(
                ia,
                &[(inc::B_B4[0], 1), (inc::B_B4[1], 3), (inc::B_B4[2], 3), (inc::B_B4[3], 3)],
            );
            total += cbp(ia, c(inc::B_POOL), 1) + cbp(ia, c(inc::B_1X1), 1) + b3 + b4;
            let ib = c(inc::B_POOL) + c(inc::B_1X1) + o3 + o4;

            let split = c(inc::C_SPLIT);
            let (c4, o4) = chain(ib, &[(inc::C_B4[0], 1), (inc::C_B4[1], 3), (inc::C_B4[2], 3)]);
            total += cbp(ib, c(inc::C_POOL), 1) + cbp(ib, c(inc::C_1X1), 1);
            total += cbp(ib, c(inc::C_B3), 1) + 2 * cbp(c(inc::C_B3), split, 3);
            total += c4 + 2 * cbp(o4, split, 3);
            let ic = c(inc::C_POOL) + c(inc::C_1X1) + 4 * split;

            let spatial = pool_chain(spec.image_size, 3).unwrap_or(0);
            total + head_count(spec, ic, spatial)
        }
    }
}

/// Float32 bytes of the trainable parameters.
pub fn dense_bytes(spec: &ArchSpec) -> usize {
    4 * param_count(spec)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{Model, Op, Tensor};

    fn spec(family: Family, head: Head, width: f64) -> ArchSpec {
        ArchSpec {
            family,
            head,
            width_multiplier: width,
            class_count: 10,
            image_size: 32,
        }
    }

    #[test]
    fn channel_rounding() {
        assert_eq!(scale_channels(128, 0.25), 32);
        assert_eq!(scale_channels(160, 0.25), 40);
        assert_eq!(scale_channels(384, 0.25), 96);
        assert_eq!(scale_channels(24, 0.25), 6);
        assert_eq!(scale_channels(16, 0.25), 4);
        assert_eq!(scale_channels(5, 0.1), 2);
        assert_eq!(scale_channels(64, RESIDUAL_FRACTION), 32);
    }

    #[test]
    fn streamlined_full_width_plan() {
        let s = ArchSpec {
            width_multiplier: 1.0,
            head: Head::Fc1024,
            class_count: 3755,
            image_size: 64,
            ..Default::default()
        };
        let g = build_streamlined(&s).unwrap();
        let convs: Vec<usize> = g
            .nodes
            .iter()
            .filter_map(|n| match n.op {
                Op::Conv { out_channels, .. } => Some(out_channels),
                _ => None,
            })
            .collect();
        assert_eq!(convs, STREAMLINED_PLAN);
        let kinds: Vec<&str> = g
            .nodes
            .iter()
            .map(|n| n.op.kind())
            .filter(|k| *k == "conv3x3" || *k == "maxpool3x3s2" || *k == "fc")
            .collect();
        assert_eq!(
            kinds,
            [
                "conv3x3", "maxpool3x3s2", "conv3x3", "conv3x3", "maxpool3x3s2", "conv3x3", "conv3x3",
                "maxpool3x3s2", "conv3x3", "conv3x3", "maxpool3x3s2", "fc", "fc"
            ]
        );
        // Hand count of the first two layers: 7·128·9 weights plus BN and
        // PReLU, then 128·160·9 plus BN and PReLU.
        let first_two: usize = g
            .params
            .iter()
            .filter(|p| p.name.starts_with("conv1") || p.name.starts_with("conv2"))
            .filter(|p| p.role.trainable())
            .map(|p| p.len())
            .sum();
        assert_eq!(first_two, 8064 + 384 + 184_320 + 480);
        assert_eq!(g.trainable_count(), param_count(&s));
        assert_eq!(g.output_shape(), &[3755]);
    }

    #[test]
    fn graph_counts_match_formula() {
        for family in [Family::Streamlined, Family::Residual, Family::Inception] {
            for head in [Head::Gap, Head::Fc1024] {
                for width in [0.25, 0.5, 1.0] {
                    for size in [32, 64] {
                        let s = ArchSpec {
                            image_size: size,
                            ..spec(family, head, width)
                        };
                        let g = build(&s).unwrap();
                        assert_eq!(g.trainable_count(), param_count(&s), "{family} {head} {width} {size}");
                    }
                }
            }
        }
    }

    #[test]
    fn gap_head_is_smaller() {
        for family in [Family::Streamlined, Family::Residual, Family::Inception] {
            for width in [0.25, 0.5, 1.0] {
                assert!(param_count(&spec(family, Head::Gap, width)) < param_count(&spec(family, Head::Fc1024, width)));
            }
        }
    }

    #[test]
    fn too_small_inputs_rejected() {
        let s = ArchSpec {
            image_size: 8,
            ..Default::default()
        };
        assert!(build_streamlined(&s).is_err());
        assert!(build_streamlined(&ArchSpec { image_size: 16, ..s.clone() }).is_ok());
        assert!(build(&ArchSpec { width_multiplier: 0.0, ..s }).is_err());
    }

    #[test]
    fn zero_weight_block_passes_shortcut() {
        let mut b = GraphBuilder::new(4, 6, 6);
        let out = residual_block(&mut b, 0, 4, 1, "blk").unwrap();
        let mut m = Model::<f64>::init(b.finish(out), 1);
        for name in ["blk_a.weight", "blk_b.weight"] {
            let shape = m.param(name).unwrap().shape().to_vec();
            m.set_param(name, Tensor::zeros(&shape)).unwrap();
        }
        let x = Tensor::from_vec(&[2, 4, 6, 6], (0..288).map(|i| (i as f64 * 0.71).cos()).collect());
        assert_eq!(m.forward_eval(&x).unwrap().data(), x.data());
        assert_eq!(m.forward_train(&x).unwrap().data(), x.data());
    }

    #[test]
    fn halved_channels_quarter_conv_params() {
        let conv_weights = |w: f64| {
            let g = build_residual(&spec(Family::Residual, Head::Gap, w)).unwrap();
            g.params
                .iter()
                .filter(|p| p.name.starts_with("res") && p.name.ends_with(".weight"))
                .map(|p| p.len())
                .sum::<usize>() as f64
        };
        let ratio = conv_weights(0.5) / conv_weights(1.0);
        assert!((ratio - 0.25).abs() < 1e-9, "{ratio}");
    }

    #[test]
    fn inception_concat_widths() {
        let s = spec(Family::Inception, Head::Gap, 1.0);
        let g = build_inception(&s).unwrap();
        let width = |name: &str| g.nodes.iter().find(|n| n.name == name).unwrap().shape[0];
        assert_eq!(width("stem_cat3"), 96);
        assert_eq!(width("ra_cat"), 256);
        assert_eq!(width("ia_cat"), 96);
        assert_eq!(width("ib_cat"), 256);
        assert_eq!(width("ic_cat"), 384);
        assert_eq!(g.output_shape(), &[10]);
    }

    #[test]
    fn every_family_runs_forward() {
        let x = Tensor::from_vec(&[2, 7, 32, 32], (0..2 * 7 * 1024).map(|i| ((i % 13) as f32) / 13.0).collect());
        for family in [Family::Streamlined, Family::Residual, Family::Inception] {
            for head in [Head::Gap, Head::Fc1024] {
                let mut m = Model::<f32>::init(build(&spec(family, head, 0.25)).unwrap(), 3);
                let y = m.forward_train(&x).unwrap();
                assert_eq!(y.shape(), &[2, 10]);
                let g = m.backward(&Tensor::filled(&[2, 10], 0.1)).unwrap();
                assert!(y.all_finite() && g.params.values().all(|t| t.all_finite()), "{family} {head}");
            }
        }
    }

    #[test]
    fn spec_json_roundtrip() {
        let s = spec(Family::Inception, Head::Fc1024, 0.5);
        let j = serde_json::to_string(&s).unwrap();
        assert!(j.contains("\"fc1024\"") && j.contains("\"inception\""));
        assert_eq!(serde_json::from_str::<ArchSpec>(&j).unwrap(), s);
        assert!(serde_json::from_str::<ArchSpec>(r#"{"depth": 3}"#).is_err());
    }
}
