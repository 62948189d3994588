use indexmap::IndexMap;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::graph::{pool_pad, Graph, NodeId, Op, ParamRole};
use super::kernels::{self, ConvGeom, PoolGeom};
use super::tensor::{Scalar, Tensor};
use super::NnError;

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.9;
pub const PRELU_INIT: f64 = 0.25;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Debug, Clone)]
enum NodeCache<T> {
    None,
    Argmax(Vec<u32>),
    Bn { xhat: Vec<T>, inv_std: Vec<T> },
}

#[derive(Debug, Clone)]
struct ForwardState<T> {
    acts: Vec<Tensor<T>>,
    caches: Vec<NodeCache<T>>,
}

/// Gradients for every trainable tensor, in graph order, plus the input.
#[derive(Debug, Clone)]
pub struct Gradients<T> {
    pub params: IndexMap<String, Tensor<T>>,
    pub input: Tensor<T>,
}

/// A graph with its weights, batch-norm statistics and PReLU slopes.
#[derive(Debug, Clone)]
pub struct Model<T> {
    graph: Graph,
    params: IndexMap<String, Tensor<T>>,
    state: Option<ForwardState<T>>,
}

fn spatial_of(shape: &[usize]) -> usize {
    shape[1..].iter().product::<usize>().max(1)
}

impl<T: Scalar> Model<T> {
    /// Kaiming-normal conv/FC weights, zero biases, unit BN scale, zero
    /// shift, and PReLU slopes of 0.25.
    pub fn init(graph: Graph, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = IndexMap::new();
        for spec in &graph.params {
            let t = match spec.role {
                ParamRole::ConvWeight | ParamRole::LinearWeight => {
                    let std = (2.0 / spec.fan_in as f64).sqrt();
                    let normal = Normal::new(0.0, std).unwrap();
                    let data = (0..spec.len())
                        .map(|_| T::of_f64(normal.sample(&mut rng) as f32 as f64))
                        .collect();
                    Tensor::from_vec(&spec.shape, data)
                }
                ParamRole::LinearBias | ParamRole::BnBeta | ParamRole::BnRunningMean => {
                    Tensor::zeros(&spec.shape)
                }
                ParamRole::BnGamma | ParamRole::BnRunningVar => Tensor::filled(&spec.shape, T::one()),
                ParamRole::PreluSlope => Tensor::filled(&spec.shape, T::of_f64(PRELU_INIT)),
            };
            params.insert(spec.name.clone(), t);
        }
        Self {
            graph,
            params,
            state: None,
        }
    }

    /// Builds a model from explicit tensors; every graph parameter must be
    /// present with its declared shape.
    pub fn from_params(graph: Graph, mut tensors: IndexMap<String, Tensor<T>>) -> Result<Self, NnError> {
        let mut params = IndexMap::new();
        for spec in &graph.params {
            let t = tensors
                .swap_remove(&spec.name)
                .ok_or_else(|| NnError::UnknownParam(spec.name.clone()))?;
            if t.shape() != spec.shape.as_slice() {
                return Err(NnError::ShapeMismatch(format!(
                    "{}: expected {:?}, got {:?}",
                    spec.name,
                    spec.shape,
                    t.shape()
                )));
            }
            params.insert(spec.name.clone(), t);
        }
        Ok(Self {
            graph,
            params,
            state: None,
        })
    }

    pub fn graph(&self) -> &Graph {
        &self.graph
    }

    pub fn params(&self) -> &IndexMap<String, Tensor<T>> {
        &self.params
    }

    pub fn param(&self, name: &str) -> Option<&Tensor<T>> {
        self.params.get(name)
    }

    pub fn param_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.params.get_mut(name)
    }

    pub fn set_param(&mut self, name: &str, value: Tensor<T>) -> Result<(), NnError> {
        let slot = self
            .params
            .get_mut(name)
            .ok_or_else(|| NnError::UnknownParam(name.to_string()))?;
        if slot.shape() != value.shape() {
            return Err(NnError::ShapeMismatch(format!(
                "{name}: expected {:?}, got {:?}",
                slot.shape(),
                value.shape()
            )));
        }
        *slot = value;
        Ok(())
    }

    pub fn role(&self, name: &str) -> Option<ParamRole> {
        self.graph.param(name).map(|p| p.role)
    }

    /// Names of conv and FC weight matrices.
    pub fn prunable_names(&self) -> Vec<String> {
        self.graph
            .params
            .iter()
            .filter(|p| p.role.prunable())
            .map(|p| p.name.clone())
            .collect()
    }

    pub fn cast<U: Scalar>(&self) -> Model<U> {
        Model {
            graph: self.graph.clone(),
            params: self
                .params
                .iter()
                .map(|(k, v)| (k.clone(), v.cast()))
                .collect(),
            state: None,
        }
    }

    pub fn clear_state(&mut self) {
        self.state = None;
    }

    fn p(&self, name: &str) -> &[T] {
        self.params[name].data()
    }

    /// Dispatches to [`Model::forward_train`] or [`Model::forward_eval`].
    pub fn forward(&mut self, input: &Tensor<T>, mode: Mode) -> Result<Tensor<T>, NnError> {
        match mode {
            Mode::Train => self.forward_train(input),
            Mode::Eval => {
                self.state = None;
                self.forward_eval(input)
            }
        }
    }

    /// Inference with running batch-norm statistics; the model is not
    /// modified.
    pub fn forward_eval(&self, input: &Tensor<T>) -> Result<Tensor<T>, NnError> {
        let (mut acts, _, _) = self.run(input, false)?;
        Ok(acts.swap_remove(self.graph.output))
    }

    /// Forward pass with batch statistics. Updates running statistics and
    /// keeps the activations needed by [`Model::backward`].
    pub fn forward_train(&mut self, input: &Tensor<T>) -> Result<Tensor<T>, NnError> {
        let (acts, caches, stats) = self.run(input, true)?;
        let batch = input.batch() as f64;
        let momentum = T::of_f64(BN_MOMENTUM);
        for (node, kernels::BnStats { mean, var }) in stats {
            let Op::BatchNorm {
                running_mean,
                running_var,
                ..
            } = &self.graph.nodes[node].op
            else {
                unreachable!()
            };
            let count = batch * spatial_of(&self.graph.nodes[node].shape) as f64;
            let unbias = T::of_f64(if count > 1.0 { count / (count - 1.0) } else { 1.0 });
            let (rm, rv) = (running_mean.clone(), running_var.clone());
            for (r, m) in self.params.get_mut(&rm).unwrap().data_mut().iter_mut().zip(&mean) {
                *r = momentum * *r + (T::one() - momentum) * *m;
            }
            for (r, v) in self.params.get_mut(&rv).unwrap().data_mut().iter_mut().zip(&var) {
                *r = momentum * *r + (T::one() - momentum) * *v * unbias;
            }
        }
        let out = acts[self.graph.output].clone();
        self.state = Some(ForwardState { acts, caches });
        Ok(out)
    }

    #[allow(clippy::type_complexity)]
    fn run(
        &self,
        input: &Tensor<T>,
        train: bool,
    ) -> Result<(Vec<Tensor<T>>, Vec<NodeCache<T>>, Vec<(NodeId, kernels::BnStats<T>)>), NnError> {
        let expected = self.graph.input_shape();
        if input.shape().len() != expected.len() + 1 || &input.shape()[1..] != expected || input.batch() == 0 {
            return Err(NnError::ShapeMismatch(format!(
                "input {:?} does not match [N, {:?}]",
                input.shape(),
                expected
            )));
        }
        let n = input.batch();
        let eps = T::of_f64(BN_EPS);
        let mut acts: Vec<Tensor<T>> = Vec::with_capacity(self.graph.nodes.len());
        let mut caches = Vec::with_capacity(self.graph.nodes.len());
        let mut stats = Vec::new();
        for (id, node) in self.graph.nodes.iter().enumerate() {
            let mut shape = vec![n];
            shape.extend_from_slice(&node.shape);
            let x = node.inputs.first().map(|&i| &acts[i]);
            let mut cache = NodeCache::None;
            let data = match &node.op {
                Op::Input => input.data().to_vec(),
                Op::Conv {
                    weight,
                    in_channels,
                    out_channels,
                    kernel,
                    stride,
                } => {
                    let x = x.unwrap();
                    let g = conv_geom(x.shape(), *in_channels, *out_channels, *kernel, *stride, &node.shape);
                    kernels::conv_forward(x.data(), n, self.p(weight), &g)
                }
                Op::MaxPool { stride } => {
                    let x = x.unwrap();
                    let g = pool_geom(x.shape(), *stride, &node.shape);
                    let (y, arg) = kernels::maxpool_forward(x.data(), n, &g);
                    cache = NodeCache::Argmax(arg);
                    y
                }
                Op::BatchNorm {
                    channels,
                    gamma,
                    beta,
                    running_mean,
                    running_var,
                } => {
                    let x = x.unwrap();
                    let spatial = spatial_of(&node.shape);
                    if train {
                        let (y, xhat, inv_std, st) =
                            kernels::batchnorm_train(x.data(), n, *channels, spatial, self.p(gamma), self.p(beta), eps);
                        cache = NodeCache::Bn { xhat, inv_std };
                        stats.push((id, st));
                        y
                    } else {
                        kernels::batchnorm_eval(
                            x.data(),
                            n,
                            *channels,
                            spatial,
                            self.p(gamma),
                            self.p(beta),
                            self.p(running_mean),
                            self.p(running_var),
                            eps,
                        )
                    }
                }
                Op::PRelu { channels, slope } => {
                    kernels::prelu_forward(x.unwrap().data(), *channels, spatial_of(&node.shape), self.p(slope))
                }
                Op::GlobalAvgPool => {
                    let x = x.unwrap();
                    kernels::gap_forward(x.data(), n * node.shape[0], spatial_of(&x.shape()[1..]))
                }
                Op::Linear {
                    in_features,
                    out_features,
                    weight,
                    bias,
                } => kernels::linear_forward(
                    x.unwrap().data(),
                    n,
                    *in_features,
                    *out_features,
                    self.p(weight),
                    self.p(bias),
                ),
                Op::Add => {
                    let (a, b) = (&acts[node.inputs[0]], &acts[node.inputs[1]]);
                    a.data().iter().zip(b.data()).map(|(x, y)| *x + *y).collect()
                }
                Op::Concat => {
                    let mut out = Vec::with_capacity(shape.iter().product());
                    for s in 0..n {
                        for &i in &node.inputs {
                            let part = &acts[i];
                            let len = part.sample_len();
                            out.extend_from_slice(&part.data()[s * len..(s + 1) * len]);
                        }
                    }
                    out
                }
            };
            acts.push(Tensor::from_vec(&shape, data));
            caches.push(cache);
        }
        Ok((acts, caches, stats))
    }

    /// Backpropagates `grad_output` (gradient of the loss with respect to
    /// the model output) through the last training-mode forward pass.
    pub fn backward(&mut self, grad_output: &Tensor<T>) -> Result<Gradients<T>, NnError> {
        let ForwardState { acts, caches } = self.state.take().ok_or(NnError::NoForwardState)?;
        let out = self.graph.output;
        if grad_output.shape() != acts[out].shape() {
            return Err(NnError::ShapeMismatch(format!(
                "output gradient {:?} does not match output {:?}",
                grad_output.shape(),
                acts[out].shape()
            )));
        }
        let n = grad_output.batch();
        let mut pgrads: IndexMap<String, Tensor<T>> = self
            .graph
            .params
            .iter()
            .filter(|p| p.role.trainable())
            .map(|p| (p.name.clone(), Tensor::zeros(&p.shape)))
            .collect();
        let mut grads: Vec<Option<Vec<T>>> = vec![None; self.graph.nodes.len()];
        grads[out] = Some(grad_output.data().to_vec());

        fn accumulate<T: Scalar>(slot: &mut Option<Vec<T>>, g: Vec<T>) {
            match slot {
                Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += *b),
                None => *slot = Some(g),
            }
        }
        fn add_into<T: Scalar>(dst: &mut Tensor<T>, src: &[T]) {
            dst.data_mut().iter_mut().zip(src).for_each(|(a, b)| *a += *b);
        }

        for id in (1..self.graph.nodes.len()).rev() {
            let Some(dy) = grads[id].take() else { continue };
            let node = &self.graph.nodes[id];
            let xin = node.inputs.first().map(|&i| &acts[i]);
            match &node.op {
                Op::Input => unreachable!(),
                Op::Conv {
                    weight,
                    in_channels,
                    out_channels,
                    kernel,
                    stride,
                } => {
                    let x = xin.unwrap();
                    let g = conv_geom(x.shape(), *in_channels, *out_channels, *kernel, *stride, &node.shape);
                    let (dx, dw) = kernels::conv_backward(x.data(), n, self.p(weight), &dy, &g);
                    add_into(pgrads.get_mut(weight).unwrap(), &dw);
                    accumulate(&mut grads[node.inputs[0]], dx);
                }
                Op::MaxPool { stride } => {
                    let x = xin.unwrap();
                    let g = pool_geom(x.shape(), *stride, &node.shape);
                    let NodeCache::Argmax(arg) = &caches[id] else { unreachable!() };
                    accumulate(&mut grads[node.inputs[0]], kernels::maxpool_backward(&dy, arg, n, &g));
                }
                Op::BatchNorm {
                    channels, gamma, beta, ..
                } => {
                    let NodeCache::Bn { xhat, inv_std } = &caches[id] else { unreachable!() };
                    let (dx, dg, db) = kernels::batchnorm_backward(
                        &dy,
                        xhat,
                        inv_std,
                        self.p(gamma),
                        n,
                        *channels,
                        spatial_of(&node.shape),
                    );
                    add_into(pgrads.get_mut(gamma).unwrap(), &dg);
                    add_into(pgrads.get_mut(beta).unwrap(), &db);
                    accumulate(&mut grads[node.inputs[0]], dx);
                }
                Op::PRelu { channels, slope } => {
                    let (dx, ds) = kernels::prelu_backward(
                        xin.unwrap().data(),
                        &dy,
                        *channels,
                        spatial_of(&node.shape),
                        self.p(slope),
                    );
                    add_into(pgrads.get_mut(slope).unwrap(), &ds);
                    accumulate(&mut grads[node.inputs[0]], dx);
                }
                Op::GlobalAvgPool => {
                    let x = xin.unwrap();
                    accumulate(&mut grads[node.inputs[0]], kernels::gap_backward(&dy, spatial_of(&x.shape()[1..])));
                }
                Op::Linear {
                    in_features,
                    out_features,
                    weight,
                    bias,
                } => {
                    let (dx, dw, db) = kernels::linear_backward(
                        xin.unwrap().data(),
                        &dy,
                        n,
                        *in_features,
                        *out_features,
                        self.p(weight),
                    );
                    add_into(pgrads.get_mut(weight).unwrap(), &dw);
                    add_into(pgrads.get_mut(bias).unwrap(), &db);
                    accumulate(&mut grads[node.inputs[0]], dx);
                }
                Op::Add => {
                    accumulate(&mut grads[node.inputs[1]], dy.clone());
                    accumulate(&mut grads[node.inputs[0]], dy);
                }
                Op::Concat => {
                    let mut offset = 0;
                    let total = node.shape.iter().product::<usize>();
                    for &i in &node.inputs {
                        let len = acts[i].sample_len();
                        let mut part = Vec::with_capacity(n * len);
                        for s in 0..n {
                            part.extend_from_slice(&dy[s * total + offset..s * total + offset + len]);
                        }
                        accumulate(&mut grads[i], part);
                        offset += len;
                    }
                }
            }
        }
        let input = Tensor::from_vec(
            acts[0].shape(),
            grads[0].take().unwrap_or_else(|| vec![T::zero(); acts[0].len()]),
        );
        Ok(Gradients { params: pgrads, input })
    }
}

fn conv_geom(in_shape: &[usize], cin: usize, cout: usize, kernel: usize, stride: usize, out: &[usize]) -> ConvGeom {
    ConvGeom {
        in_channels: cin,
        out_channels: cout,
        kernel,
        stride,
        height: in_shape[2],
        width: in_shape[3],
        out_height: out[1],
        out_width: out[2],
    }
}

fn pool_geom(in_shape: &[usize], stride: usize, out: &[usize]) -> PoolGeom {
    PoolGeom {
        channels: in_shape[1],
        stride,
        pad: pool_pad(stride),
        height: in_shape[2],
        width: in_shape[3],
        out_height: out[1],
        out_width: out[2],
    }
}
