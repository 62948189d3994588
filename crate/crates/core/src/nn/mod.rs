//! A small deterministic CNN engine: static layer graphs, reverse-mode
//! gradients, softmax cross-entropy and momentum SGD.

pub mod checkpoint;
pub mod gradcheck;
pub mod graph;
pub mod kernels;
pub mod loss;
pub mod model;
pub mod optim;
pub mod tensor;

use thiserror::Error;

pub use graph::{Graph, GraphBuilder, NodeId, Op, ParamRole, ParamSpec};
pub use loss::{argmax, softmax, softmax_cross_entropy, LossOutput};
pub use model::{Gradients, Mode, Model};
pub use optim::{lr_schedule, sgd_momentum_step, MaskHook, OptimState};
pub use tensor::{Scalar, Tensor};

#[derive(Debug, Error, PartialEq)]
pub enum NnError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("backward called without a preceding training-mode forward pass")]
    NoForwardState,
    #[error("cannot evaluate on an empty dataset")]
    EmptyDataset,
    #[error("duplicate node name `{0}`")]
    DuplicateName(String),
    #[error("unknown parameter `{0}`")]
    UnknownParam(String),
    #[error("non-finite loss at iteration {iteration}")]
    NonFinite { iteration: u64 },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
}

/// A labeled mini-batch.
#[derive(Debug, Clone)]
pub struct Batch<T> {
    pub inputs: Tensor<T>,
    pub labels: Vec<usize>,
}

/// Deterministic supplier of training batches indexed by iteration.
pub trait BatchSource<T> {
    fn batch(&mut self, iteration: u64) -> Batch<T>;
}

impl<T, F: FnMut(u64) -> Batch<T>> BatchSource<T> for F {
    fn batch(&mut self, iteration: u64) -> Batch<T> {
        self(iteration)
    }
}

/// Eval-mode logits for all rows of `inputs`, computed in chunks.
pub fn predict<T: Scalar>(model: &Model<T>, inputs: &Tensor<T>, batch_size: usize) -> Result<Tensor<T>, NnError> {
    let n = inputs.batch();
    let k: usize = model.graph().output_shape().iter().product();
    let mut out = Vec::with_capacity(n * k);
    let mut start = 0;
    while start < n {
        let end = (start + batch_size.max(1)).min(n);
        out.extend_from_slice(model.forward_eval(&inputs.slice_batch(start, end))?.data());
        start = end;
    }
    Ok(Tensor::from_vec(&[n, k], out))
}

/// Top-1 accuracy in eval mode.
pub fn evaluate<T: Scalar>(
    model: &Model<T>,
    inputs: &Tensor<T>,
    labels: &[usize],
    batch_size: usize,
) -> Result<f64, NnError> {
    if labels.is_empty() || inputs.batch() == 0 {
        return Err(NnError::EmptyDataset);
    }
    if labels.len() != inputs.batch() {
        return Err(NnError::ShapeMismatch(format!(
            "{} inputs vs {} labels",
            inputs.batch(),
            labels.len()
        )));
    }
    let logits = predict(model, inputs, batch_size)?;
    Ok(accuracy_from_logits(&logits, labels))
}

pub fn accuracy_from_logits<T: Scalar>(logits: &Tensor<T>, labels: &[usize]) -> f64 {
    let k = logits.sample_len();
    let correct = logits
        .data()
        .chunks(k)
        .zip(labels)
        .filter(|(row, &l)| argmax(row) == l)
        .count();
    correct as f64 / labels.len() as f64
}
