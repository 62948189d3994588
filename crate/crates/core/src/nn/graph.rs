//! Static layer graphs with shape inference.

use std::collections::HashSet;

use super::NnError;

pub type NodeId = usize;

/// Max-pool window edge.
pub const POOL_WINDOW: usize = 3;

#[derive(Debug, Clone, PartialEq)]
pub enum Op {
    Input,
    /// Square `kernel` (1 or 3), zero padding `kernel / 2`.
    Conv {
        weight: String,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
    },
    /// 3×3 window. Stride 2 uses ceil-mode sizing with no padding, stride 1
    /// pads by one so the spatial size is kept; out-of-range taps are -∞.
    MaxPool { stride: usize },
    BatchNorm {
        channels: usize,
        gamma: String,
        beta: String,
        running_mean: String,
        running_var: String,
    },
    PRelu { channels: usize, slope: String },
    GlobalAvgPool,
    /// Flattens its input.
    Linear {
        in_features: usize,
        out_features: usize,
        weight: String,
        bias: String,
    },
    Add,
    /// Channel-axis concatenation.
    Concat,
}

impl Op {
    pub fn kind(&self) -> &'static str {
        match self {
            Op::Input => "input",
            Op::Conv { kernel: 1, .. } => "conv1x1",
            Op::Conv { .. } => "conv3x3",
            Op::MaxPool { stride: 1 } => "maxpool3x3s1",
            Op::MaxPool { .. } => "maxpool3x3s2",
            Op::BatchNorm { .. } => "batchnorm",
            Op::PRelu { .. } => "prelu",
            Op::GlobalAvgPool => "gap",
            Op::Linear { .. } => "fc",
            Op::Add => "add",
            Op::Concat => "concat",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Node {
    pub name: String,
    pub op: Op,
    pub inputs: Vec<NodeId>,
    /// Per-sample output shape: `[C, H, W]` or `[F]`.
    pub shape: Vec<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamRole {
    ConvWeight,
    LinearWeight,
    LinearBias,
    BnGamma,
    BnBeta,
    BnRunningMean,
    BnRunningVar,
    PreluSlope,
}

impl ParamRole {
    pub fn trainable(self) -> bool {
        !matches!(self, ParamRole::BnRunningMean | ParamRole::BnRunningVar)
    }

    /// Conv and FC weight matrices; everything else stays dense.
    pub fn prunable(self) -> bool {
        matches!(self, ParamRole::ConvWeight | ParamRole::LinearWeight)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub role: ParamRole,
    pub fan_in: usize,
}

impl ParamSpec {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Topologically ordered DAG: every node's inputs precede it.
#[derive(Debug, Clone, PartialEq)]
pub struct Graph {
    pub nodes: Vec<Node>,
    pub params: Vec<ParamSpec>,
    pub output: NodeId,
}

impl Graph {
    pub fn input_shape(&self) -> &[usize] {
        &self.nodes[0].shape
    }

    pub fn output_shape(&self) -> &[usize] {
        &self.nodes[self.output].shape
    }

    pub fn param(&self, name: &str) -> Option<&ParamSpec> {
        self.params.iter().find(|p| p.name == name)
    }

    /// Number of trainable scalars (running statistics excluded).
    pub fn trainable_count(&self) -> usize {
        self.params
            .iter()
            .filter(|p| p.role.trainable())
            .map(ParamSpec::len)
            .sum()
    }

    pub fn buffer_count(&self) -> usize {
        self.params
            .iter()
            .filter(|p| !p.role.trainable())
            .map(ParamSpec::len)
            .sum()
    }

    /// Canonical text form of the topology; stable across runs.
    pub fn describe(&self) -> String {
        let mut s = String::new();
        for n in &self.nodes {
            s.push_str(&format!("{}:{}:{:?}:{:?};", n.name, n.op.kind(), n.inputs, n.shape));
        }
        s
    }

    /// FNV-1a 64 hash of [`Graph::describe`].
    pub fn fingerprint(&self) -> u64 {
        self.describe().bytes().fold(0xcbf2_9ce4_8422_2325, |h, b| {
            (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01b3)
        })
    }
}

pub fn conv_out(size: usize, kernel: usize, stride: usize) -> usize {
    let pad = kernel / 2;
    (size + 2 * pad - kernel) / stride + 1
}

/// Max-pool output size, or `None` when the input is too small.
///
/// | in | 2 | 3 | 4 | 5 | 7 | 8 | 16 | 32 | 64 |
/// |----|---|---|---|---|---|---|----|----|----|
/// | s2 | 1 | 1 | 2 | 2 | 3 | 4 | 8  | 16 | 32 |
pub fn pool_out(size: usize, stride: usize) -> Option<usize> {
    let pad = pool_pad(stride) as i64;
    let numer = size as i64 + 2 * pad - POOL_WINDOW as i64;
    let s = stride as i64;
    let mut out = numer.div_euclid(s) + i64::from(numer.rem_euclid(s) != 0) + 1;
    if (out - 1) * s >= size as i64 + pad {
        out -= 1;
    }
    (out >= 1 && size >= 2).then_some(out as usize)
}

pub fn pool_pad(stride: usize) -> usize {
    usize::from(stride == 1)
}

pub struct GraphBuilder {
    nodes: Vec<Node>,
    params: Vec<ParamSpec>,
    names: HashSet<String>,
}

impl GraphBuilder {
    pub fn new(channels: usize, height: usize, width: usize) -> Self {
        let mut names = HashSet::new();
        names.insert("input".to_string());
        Self {
            nodes: vec![Node {
                name: "input".into(),
                op: Op::Input,
                inputs: vec![],
                shape: vec![channels, height, width],
            }],
            params: vec![],
            names,
        }
    }

    pub fn input(&self) -> NodeId {
        0
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        &self.nodes[id].shape
    }

    pub fn channels(&self, id: NodeId) -> usize {
        self.nodes[id].shape[0]
    }

    fn push(&mut self, name: &str, op: Op, inputs: Vec<NodeId>, shape: Vec<usize>) -> Result<NodeId, NnError> {
        if !self.names.insert(name.to_string()) {
            return Err(NnError::DuplicateName(name.to_string()));
        }
        self.nodes.push(Node {
            name: name.to_string(),
            op,
            inputs,
            shape,
        });
        Ok(self.nodes.len() - 1)
    }

    fn param(&mut self, name: String, shape: Vec<usize>, role: ParamRole, fan_in: usize) -> String {
        self.params.push(ParamSpec {
            name: name.clone(),
            shape,
            role,
            fan_in,
        });
        name
    }

    fn spatial(&self, x: NodeId, what: &str) -> Result<(usize, usize, usize), NnError> {
        match self.nodes[x].shape[..] {
            [c, h, w] => Ok((c, h, w)),
            ref s => Err(NnError::ShapeMismatch(format!(
                "{what} needs a [C, H, W] input, got {s:?}"
            ))),
        }
    }

    pub fn conv(&mut self, x: NodeId, out_channels: usize, kernel: usize, stride: usize, name: &str) -> Result<NodeId, NnError> {
        let (c, h, w) = self.spatial(x, name)?;
        if !(kernel == 1 || kernel == 3) || !(stride == 1 || stride == 2) || out_channels == 0 {
            return Err(NnError::ShapeMismatch(format!(
                "{name}: unsupported conv kernel {kernel} stride {stride} out {out_channels}"
            )));
        }
        let weight = self.param(
            format!("{name}.weight"),
            vec![out_channels, c, kernel, kernel],
            ParamRole::ConvWeight,
            c * kernel * kernel,
        );
        let shape = vec![out_channels, conv_out(h, kernel, stride), conv_out(w, kernel, stride)];
        self.push(
            name,
            Op::Conv {
                weight,
                in_channels: c,
                out_channels,
                kernel,
                stride,
            },
            vec![x],
            shape,
        )
    }

    pub fn maxpool(&mut self, x: NodeId, stride: usize, name: &str) -> Result<NodeId, NnError> {
        let (c, h, w) = self.spatial(x, name)?;
        let too_small = || NnError::ShapeMismatch(format!("{name}: {h}x{w} input too small to pool"));
        let ho = pool_out(h, stride).ok_or_else(too_small)?;
        let wo = pool_out(w, stride).ok_or_else(too_small)?;
        self.push(name, Op::MaxPool { stride }, vec![x], vec![c, ho, wo])
    }

    pub fn batchnorm(&mut self, x: NodeId, name: &str) -> Result<NodeId, NnError> {
        let c = self.channels(x);
        let gamma = self.param(format!("{name}.gamma"), vec![c], ParamRole::BnGamma, 0);
        let beta = self.param(format!("{name}.beta"), vec![c], ParamRole::BnBeta, 0);
        let running_mean = self.param(format!("{name}.running_mean"), vec![c], ParamRole::BnRunningMean, 0);
        let running_var = self.param(format!("{name}.running_var"), vec![c], ParamRole::BnRunningVar, 0);
        let shape = self.nodes[x].shape.clone();
        self.push(
            name,
            Op::BatchNorm {
                channels: c,
                gamma,
                beta,
                running_mean,
                running_var,
            },
            vec![x],
            shape,
        )
    }

    pub fn prelu(&mut self, x: NodeId, name: &str) -> Result<NodeId, NnError> {
        let c = self.channels(x);
        let slope = self.param(format!("{name}.slope"), vec![c], ParamRole::PreluSlope, 0);
        let shape = self.nodes[x].shape.clone();
        self.push(name, Op::PRelu { channels: c, slope }, vec![x], shape)
    }

    pub fn gap(&mut self, x: NodeId, name: &str) -> Result<NodeId, NnError> {
        let (c, _, _) = self.spatial(x, name)?;
        self.push(name, Op::GlobalAvgPool, vec![x], vec![c])
    }

    pub fn linear(&mut self, x: NodeId, out_features: usize, name: &str) -> Result<NodeId, NnError> {
        let in_features: usize = self.nodes[x].shape.iter().product();
        let weight = self.param(
            format!("{name}.weight"),
            vec![out_features, in_features],
            ParamRole::LinearWeight,
            in_features,
        );
        let bias = self.param(format!("{name}.bias"), vec![out_features], ParamRole::LinearBias, 0);
        self.push(
            name,
            Op::Linear {
                in_features,
                out_features,
                weight,
                bias,
            },
            vec![x],
            vec![out_features],
        )
    }

    pub fn add(&mut self, a: NodeId, b: NodeId, name: &str) -> Result<NodeId, NnError> {
        if self.nodes[a].shape != self.nodes[b].shape {
            return Err(NnError::ShapeMismatch(format!(
                "{name}: cannot add {:?} and {:?}",
                self.nodes[a].shape, self.nodes[b].shape
            )));
        }
        let shape = self.nodes[a].shape.clone();
        self.push(name, Op::Add, vec![a, b], shape)
    }

    pub fn concat(&mut self, parts: &[NodeId], name: &str) -> Result<NodeId, NnError> {
        let first = self.spatial(*parts.first().ok_or_else(|| {
            NnError::ShapeMismatch(format!("{name}: concat of nothing"))
        })?, name)?;
        let mut channels = 0;
        for &p in parts {
            let (c, h, w) = self.spatial(p, name)?;
            if (h, w) != (first.1, first.2) {
                return Err(NnError::ShapeMismatch(format!(
                    "{name}: branch spatial {h}x{w} differs from {}x{}",
                    first.1, first.2
                )));
            }
            channels += c;
        }
        self.push(name, Op::Concat, parts.to_vec(), vec![channels, first.1, first.2])
    }

    /// Conv followed by batch normalization and PReLU.
    pub fn conv_bn_prelu(&mut self, x: NodeId, out_channels: usize, kernel: usize, stride: usize, name: &str) -> Result<NodeId, NnError> {
        let c = self.conv(x, out_channels, kernel, stride, name)?;
        let b = self.batchnorm(c, &format!("{name}_bn"))?;
        self.prelu(b, &format!("{name}_prelu"))
    }

    pub fn finish(self, output: NodeId) -> Graph {
        Graph {
            nodes: self.nodes,
            params: self.params,
            output,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pool_size_table() {
        let expect = [(2, 1), (3, 1), (4, 2), (5, 2), (7, 3), (8, 4), (16, 8), (32, 16), (64, 32), (63, 31)];
        for (i, o) in expect {
            assert_eq!(pool_out(i, 2), Some(o), "input {i}");
        }
        assert_eq!(pool_out(1, 2), None);
        for i in 2..20 {
            assert_eq!(pool_out(i, 1), Some(i));
        }
    }

    #[test]
    fn conv_sizes() {
        assert_eq!(conv_out(64, 3, 1), 64);
        assert_eq!(conv_out(64, 3, 2), 32);
        assert_eq!(conv_out(7, 3, 2), 4);
        assert_eq!(conv_out(9, 1, 1), 9);
    }

    #[test]
    fn duplicate_names_rejected() {
        let mut b = GraphBuilder::new(1, 8, 8);
        let x = b.conv(0, 2, 3, 1, "c").unwrap();
        assert!(matches!(b.conv(x, 2, 3, 1, "c"), Err(NnError::DuplicateName(_))));
    }

    #[test]
    fn concat_and_add_shapes() {
        let mut b = GraphBuilder::new(3, 8, 8);
        let a = b.conv(0, 8, 3, 1, "a").unwrap();
        let c = b.conv(0, 8, 1, 1, "c").unwrap();
        let d = b.conv(0, 16, 3, 1, "d").unwrap();
        let cat = b.concat(&[a, c, d], "cat").unwrap();
        assert_eq!(b.shape(cat), &[32, 8, 8]);
        assert!(b.add(a, d, "bad").is_err());
        let s = b.conv(0, 8, 3, 2, "s").unwrap();
        assert!(b.concat(&[a, s], "bad2").is_err());
    }
}
