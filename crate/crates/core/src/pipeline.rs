//! Staged training and compression pipeline driven by one JSON config.
//!
//! Every stage reads and writes files in `work_dir`:
//!
//! | file | stage | format |
//! |---|---|---|
//! | `train.inkb`, `test.inkb` | gen-data | ink-bin |
//! | `render/{train,test}/NNNNN.fmap` | render | FMAP |
//! | `dense.dnse`, `train_state.dnse`, `train_state.json`, `train_log.jsonl` | train | DNSE, JSON |
//! | `pruned.dnse`, `prune_log.jsonl` | prune | DNSE, JSONL |
//! | `quantized.dnse`, `codebooks.json`, `quant_log.jsonl` | quantize | DNSE, JSON |
//! | `model.dwpk` | pack | DWPK |
//!
//! `train_state.dnse` holds the momentum buffers under the parameter names;
//! `train_state.json` the iteration count. Both let `train` resume.

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};

use indexmap::IndexMap;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::json;
use thiserror::Error;

use crate::distort::{sample_distortion_with, DistortionConfig};
use crate::dropweight::{log_to_jsonl, run_dropweight, PruneConfig, PruneError, PruneState};
use crate::ink::{normalize, parse_trajectory_file, serialize_trajectory_file, gen_toy_dataset, Dataset, InkFormat, Trajectory, INK_BIN_MAGIC};
use crate::nn::checkpoint::{load_model, read_tensors, write_tensors, DENSE_MAGIC};
use crate::nn::{predict, accuracy_from_logits, Batch, Graph, Model, NnError, OptimState, Tensor};
use crate::pack::{pack, size_report, unpack, PackError, SizeReport, PACK_MAGIC};
use crate::quant::{assign_and_dequantize, finetune_centroids, quantize_model, Codebook, QuantConfig, QuantError};
use crate::sig::{rasterize, FeatureStack, RasterConfig, CHANNELS};
use crate::train::{train, TrainConfig};
use crate::zoo::{self, ArchSpec};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("config error: {0}")]
    Config(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("numerical failure: {0}")]
    Numerical(String),
}

impl PipelineError {
    pub fn exit_code(&self) -> i32 {
        match self {
            PipelineError::Config(_) => 2,
            PipelineError::Data(_) => 3,
            PipelineError::Numerical(_) => 4,
        }
    }
}

impl From<NnError> for PipelineError {
    fn from(e: NnError) -> Self {
        match e {
            NnError::NonFinite { iteration } => {
                PipelineError::Numerical(format!("loss became non-finite at iteration {iteration}"))
            }
            e => PipelineError::Data(e.to_string()),
        }
    }
}

impl From<PruneError> for PipelineError {
    fn from(e: PruneError) -> Self {
        match e {
            PruneError::Nn(e) => e.into(),
            PruneError::InvalidConfig(m) => PipelineError::Config(m),
            e => PipelineError::Data(e.to_string()),
        }
    }
}

impl From<QuantError> for PipelineError {
    fn from(e: QuantError) -> Self {
        match e {
            QuantError::Nn(e) => e.into(),
            QuantError::InvalidBits(_) => PipelineError::Config(e.to_string()),
            e => PipelineError::Data(e.to_string()),
        }
    }
}

impl From<PackError> for PipelineError {
    fn from(e: PackError) -> Self {
        PipelineError::Data(e.to_string())
    }
}

type Result<T> = std::result::Result<T, PipelineError>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub class_count: u32,
    pub train_per_class: usize,
    pub test_per_class: usize,
    /// Existing ink files (either format); when both are set `gen-data`
    /// is not used.
    pub train_path: Option<PathBuf>,
    pub test_path: Option<PathBuf>,
    /// Fresh random distortion of every training sample each epoch.
    pub augment: bool,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            class_count: 10,
            train_per_class: 200,
            test_per_class: 50,
            train_path: None,
            test_path: None,
            augment: true,
        }
    }
}

fn default_retrain() -> TrainConfig {
    TrainConfig {
        base_lr: 0.01,
        lr_step: 1000,
        ..TrainConfig::default()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PipelineConfig {
    pub seed: u64,
    pub work_dir: PathBuf,
    pub data: DataConfig,
    pub raster: RasterConfig,
    pub distortion: DistortionConfig,
    pub arch: ArchSpec,
    pub train: TrainConfig,
    /// Optimizer settings while pruning; its `iterations` is unused, the
    /// prune schedule sets the length.
    #[serde(default = "default_retrain")]
    pub retrain: TrainConfig,
    pub prune: PruneConfig,
    pub quant: QuantConfig,
    pub eval_batch: usize,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            work_dir: PathBuf::from("run"),
            data: DataConfig::default(),
            raster: RasterConfig::default(),
            distortion: DistortionConfig::default(),
            arch: ArchSpec::default(),
            train: TrainConfig::default(),
            retrain: default_retrain(),
            prune: PruneConfig::default(),
            quant: QuantConfig::default(),
            eval_batch: 100,
        }
    }
}

impl PipelineConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| PipelineError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| PipelineError::Config(format!("{}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let cfg = |m: String| PipelineError::Config(m);
        let d = &self.data;
        if d.class_count < 2 {
            return Err(cfg("data.class_count must be at least 2".into()));
        }
        if d.train_path.is_some() != d.test_path.is_some() {
            return Err(cfg("data.train_path and data.test_path must be set together".into()));
        }
        if d.train_path.is_none() && (d.train_per_class == 0 || d.test_per_class == 0) {
            return Err(cfg("data.train_per_class and data.test_per_class must be positive".into()));
        }
        self.raster.validate().map_err(|e| cfg(format!("raster: {e}")))?;
        self.distortion.validate().map_err(|e| cfg(format!("distortion: {e}")))?;
        self.arch.validate().map_err(|e| cfg(format!("arch: {e}")))?;
        if self.arch.image_size != self.raster.image_size {
            return Err(cfg(format!(
                "arch.image_size {} differs from raster.image_size {}",
                self.arch.image_size, self.raster.image_size
            )));
        }
        if self.arch.class_count != d.class_count as usize {
            return Err(cfg(format!(
                "arch.class_count {} differs from data.class_count {}",
                self.arch.class_count, d.class_count
            )));
        }
        self.train.validate().map_err(|e| cfg(format!("train: {e}")))?;
        self.retrain.validate().map_err(|e| cfg(format!("retrain: {e}")))?;
        self.prune.validate().map_err(|e| cfg(format!("prune: {e}")))?;
        self.quant.validate().map_err(|e| cfg(format!("quant: {e}")))?;
        if self.eval_batch == 0 {
            return Err(cfg("eval_batch must be positive".into()));
        }
        let graph = self.graph()?;
        let prunable: Vec<&str> = graph
            .params
            .iter()
            .filter(|p| p.role.prunable())
            .map(|p| p.name.as_str())
            .collect();
        if let Some(k) = self.prune.layer_ratios.keys().find(|k| !prunable.contains(&k.as_str())) {
            return Err(cfg(format!("prune.layer_ratios names unknown layer `{k}`")));
        }
        Ok(())
    }

    pub fn graph(&self) -> Result<Graph> {
        zoo::build(&self.arch).map_err(|e| PipelineError::Config(format!("arch: {e}")))
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.work_dir.join(name)
    }

    fn train_ink(&self) -> PathBuf {
        self.data.train_path.clone().unwrap_or_else(|| self.path("train.inkb"))
    }

    fn test_ink(&self) -> PathBuf {
        self.data.test_path.clone().unwrap_or_else(|| self.path("test.inkb"))
    }
}

/// Independent seed for a named random stream.
pub fn derive_seed(seed: u64, tag: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in tag.bytes() {
        h = (h ^ b as u64).wrapping_mul(0x0100_0000_01b3);
    }
    let mut z = seed ^ h;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

fn read(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| PipelineError::Data(format!("{}: {e}", path.display())))
}

fn write(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| PipelineError::Data(format!("{}: {e}", dir.display())))?;
    }
    fs::write(path, bytes).map_err(|e| PipelineError::Data(format!("{}: {e}", path.display())))
}

fn read_ink(path: &Path, class_count: u32) -> Result<Dataset> {
    let bytes = read(path)?;
    let format = if bytes.starts_with(INK_BIN_MAGIC) { InkFormat::Bin } else { InkFormat::Json };
    let ds = parse_trajectory_file(&bytes, format, Some(class_count))
        .map_err(|e| PipelineError::Data(format!("{}: {e}", path.display())))?;
    if ds.is_empty() {
        return Err(PipelineError::Data(format!("{}: no samples", path.display())));
    }
    Ok(ds)
}

fn stack_tensor(stacks: &[FeatureStack], size: usize) -> Tensor<f32> {
    let data = stacks.iter().flat_map(|s| s.data.iter().copied()).collect();
    Tensor::from_vec(&[stacks.len(), CHANNELS, size, size], data)
}

/// Training batches indexed by iteration: a seeded shuffle per epoch and,
/// when augmenting, a fresh distortion per sample per epoch.
pub struct EpochSampler<'a> {
    items: Vec<Trajectory>,
    labels: Vec<usize>,
    batch_size: usize,
    seed: u64,
    raster: &'a RasterConfig,
    distortion: Option<&'a DistortionConfig>,
    perms: HashMap<u64, Vec<usize>>,
}

impl<'a> EpochSampler<'a> {
    pub fn new(dataset: &Dataset, cfg: &'a PipelineConfig, batch_size: usize, stream: &str) -> Self {
        Self {
            items: dataset.items.iter().map(normalize).collect(),
            labels: dataset.labels(),
            batch_size,
            seed: derive_seed(cfg.seed, stream),
            raster: &cfg.raster,
            distortion: cfg.data.augment.then_some(&cfg.distortion),
            perms: HashMap::new(),
        }
    }

    fn perm(&mut self, epoch: u64) -> &[usize] {
        if !self.perms.contains_key(&epoch) {
            self.perms.retain(|&e, _| e + 1 >= epoch);
            let mut p: Vec<usize> = (0..self.items.len()).collect();
            p.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(self.seed, &format!("epoch{epoch}"))));
            self.perms.insert(epoch, p);
        }
        &self.perms[&epoch]
    }

    pub fn batch(&mut self, iteration: u64) -> Batch<f32> {
        let n = self.items.len() as u64;
        let picks: Vec<(u64, usize)> = (0..self.batch_size as u64)
            .map(|j| {
                let p = iteration * self.batch_size as u64 + j;
                let epoch = p / n;
                (epoch, self.perm(epoch)[(p % n) as usize])
            })
            .collect();
        let distort_seed = derive_seed(self.seed, "distort");
        let stacks: Vec<FeatureStack> = picks
            .par_iter()
            .map(|&(epoch, i)| match self.distortion {
                Some(d) => {
                    let s = derive_seed(distort_seed ^ d.seed, &format!("{epoch}/{i}"));
                    let t = sample_distortion_with(&self.items[i], d, &mut ChaCha8Rng::seed_from_u64(s));
                    rasterize(&t, self.raster)
                }
                None => rasterize(&self.items[i], self.raster),
            })
            .collect();
        Batch {
            inputs: stack_tensor(&stacks, self.raster.image_size),
            labels: picks.iter().map(|&(_, i)| self.labels[i]).collect(),
        }
    }
}

/// Normalized, undistorted feature maps.
pub fn render_dataset(dataset: &Dataset, raster: &RasterConfig) -> Vec<FeatureStack> {
    dataset.items.par_iter().map(|t| rasterize(&normalize(t), raster)).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GenSummary {
    pub train_samples: usize,
    pub test_samples: usize,
}

pub fn cmd_gen_data(cfg: &PipelineConfig) -> Result<GenSummary> {
    if cfg.data.train_path.is_some() {
        return Err(PipelineError::Config("data paths are set; nothing to generate".into()));
    }
    let d = &cfg.data;
    let train = gen_toy_dataset(d.class_count, d.train_per_class, derive_seed(cfg.seed, "gen-train"));
    let test = gen_toy_dataset(d.class_count, d.test_per_class, derive_seed(cfg.seed, "gen-test"));
    write(&cfg.train_ink(), &serialize_trajectory_file(&train, InkFormat::Bin))?;
    write(&cfg.test_ink(), &serialize_trajectory_file(&test, InkFormat::Bin))?;
    Ok(GenSummary {
        train_samples: train.len(),
        test_samples: test.len(),
    })
}

fn fmap_dir(cfg: &PipelineConfig, split: &str) -> PathBuf {
    cfg.path("render").join(split)
}

pub fn cmd_render(cfg: &PipelineConfig) -> Result<GenSummary> {
    let mut counts = [0; 2];
    for (k, (split, path)) in [("train", cfg.train_ink()), ("test", cfg.test_ink())].into_iter().enumerate() {
        let ds = read_ink(&path, cfg.data.class_count)?;
        let dir = fmap_dir(cfg, split);
        if dir.exists() {
            fs::remove_dir_all(&dir).map_err(|e| PipelineError::Data(format!("{}: {e}", dir.display())))?;
        }
        for (i, s) in render_dataset(&ds, &cfg.raster).iter().enumerate() {
            write(&dir.join(format!("{i:05}.fmap")), &s.to_fmap_bytes())?;
        }
        counts[k] = ds.len();
    }
    Ok(GenSummary {
        train_samples: counts[0],
        test_samples: counts[1],
    })
}

/// Rendered test features and labels.
pub fn load_test_set(cfg: &PipelineConfig) -> Result<(Tensor<f32>, Vec<usize>)> {
    let labels = read_ink(&cfg.test_ink(), cfg.data.class_count)?.labels();
    let dir = fmap_dir(cfg, "test");
    let mut stacks = Vec::with_capacity(labels.len());
    for i in 0..labels.len() {
        let path = dir.join(format!("{i:05}.fmap"));
        let s = FeatureStack::from_fmap_bytes(&read(&path)?)
            .map_err(|e| PipelineError::Data(format!("{}: {e}", path.display())))?;
        let size = cfg.raster.image_size;
        if (s.channels, s.height, s.width) != (CHANNELS, size, size) {
            return Err(PipelineError::Data(format!("{}: feature map shape differs from config", path.display())));
        }
        stacks.push(s);
    }
    Ok((stack_tensor(&stacks, cfg.raster.image_size), labels))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalSummary {
    pub accuracy: f64,
    pub correct: usize,
    pub total: usize,
    /// FNV-1a hash of the logits' bit patterns.
    pub logits_hash: String,
}

pub fn evaluate_model(model: &Model<f32>, inputs: &Tensor<f32>, labels: &[usize], batch: usize) -> Result<EvalSummary> {
    let logits = predict(model, inputs, batch)?;
    if !logits.all_finite() {
        return Err(PipelineError::Numerical("non-finite logits".into()));
    }
    let accuracy = accuracy_from_logits(&logits, labels);
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for v in logits.data() {
        for b in v.to_bits().to_le_bytes() {
            h = (h ^ b as u64).wrapping_mul(0x0100_0000_01b3);
        }
    }
    Ok(EvalSummary {
        accuracy,
        correct: (accuracy * labels.len() as f64).round() as usize,
        total: labels.len(),
        logits_hash: format!("{h:016x}"),
    })
}

/// Loads a DNSE or DWPK model built for the configured architecture.
pub fn load_model_file(cfg: &PipelineConfig, path: &Path) -> Result<Model<f32>> {
    let bytes = read(path)?;
    let graph = cfg.graph()?;
    let ctx = |e: String| PipelineError::Data(format!("{}: {e}", path.display()));
    if bytes.starts_with(PACK_MAGIC) {
        unpack(&bytes)
            .and_then(|u| u.into_model(graph))
            .map_err(|e| ctx(e.to_string()))
    } else if bytes.starts_with(DENSE_MAGIC) {
        let tensors = read_tensors(&bytes).map_err(|e| ctx(e.to_string()))?;
        Ok(load_model::<f32>(graph, tensors).map_err(|e| ctx(e.to_string()))?.0)
    } else {
        Err(ctx("unrecognized model file".into()))
    }
}

fn jsonl(lines: &[serde_json::Value]) -> String {
    lines.iter().map(|v| v.to_string() + "\n").collect()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrainSummary {
    pub iterations: u64,
    pub final_loss: Option<f64>,
    pub test_accuracy: f64,
}

/// Dense training. With `resume`, continues from the saved model and
/// optimizer state up to `train.iterations`.
pub fn cmd_train(cfg: &PipelineConfig, resume: bool) -> Result<TrainSummary> {
    let graph = cfg.graph()?;
    let train_set = read_ink(&cfg.train_ink(), cfg.data.class_count)?;
    let (test_x, test_y) = load_test_set(cfg)?;
    let (mut model, mut optim, mut log) = if resume {
        let tensors = read_tensors(&read(&cfg.path("dense.dnse"))?)?;
        let (model, _) = load_model::<f32>(graph, tensors)?;
        let velocity = read_tensors(&read(&cfg.path("train_state.dnse"))?)?;
        let meta: serde_json::Value = serde_json::from_slice(&read(&cfg.path("train_state.json"))?)
            .map_err(|e| PipelineError::Data(format!("train_state.json: {e}")))?;
        let iteration = meta["iteration"]
            .as_u64()
            .ok_or_else(|| PipelineError::Data("train_state.json: missing iteration".into()))?;
        let mut optim = OptimState::new(&model, cfg.train.base_lr, cfg.train.momentum);
        for (name, v) in optim.velocity.iter_mut() {
            let t = velocity
                .get(name)
                .ok_or_else(|| PipelineError::Data(format!("train_state.dnse: missing {name}")))?;
            if t.shape() != v.shape() {
                return Err(PipelineError::Data(format!("train_state.dnse: shape of {name}")));
            }
            *v = t.clone();
        }
        optim.iteration = iteration;
        let text = String::from_utf8_lossy(&read(&cfg.path("train_log.jsonl"))?).into_owned();
        let log: Vec<serde_json::Value> = text
            .lines()
            .filter_map(|l| serde_json::from_str::<serde_json::Value>(l).ok())
            .filter(|v| v["kind"] != "final" && v["iter"].as_u64().is_some_and(|i| i <= iteration))
            .collect();
        (model, optim, log)
    } else {
        let model = Model::init(graph, derive_seed(cfg.seed, "init"));
        let optim = OptimState::new(&model, cfg.train.base_lr, cfg.train.momentum);
        (model, optim, Vec::new())
    };

    let mut sampler = EpochSampler::new(&train_set, cfg, cfg.train.batch_size, "train");
    let mut source = |it: u64| sampler.batch(it);
    let mut last_loss = None;
    let mut eval_error = None;
    let result = train(&mut model, &mut optim, &mut source, &cfg.train, None, |m, rec| {
        let done = rec.iter + 1;
        last_loss = Some(rec.loss);
        log.push(json!({"kind": "step", "iter": done, "loss": rec.loss, "lr": rec.lr}));
        if done % 100 == 0 {
            log::info!("train iter {done} loss {:.4} lr {}", rec.loss, rec.lr);
        }
        if cfg.train.eval_every > 0 && done % cfg.train.eval_every == 0 {
            match evaluate_model(m, &test_x, &test_y, cfg.eval_batch) {
                Ok(e) => {
                    log::info!("train iter {done} test accuracy {:.4}", e.accuracy);
                    log.push(json!({"kind": "eval", "iter": done, "test_accuracy": e.accuracy}))
                }
                Err(e) => eval_error = Some(e),
            }
        }
    });
    if let Err(e) = result {
        write(&cfg.path("train_log.jsonl"), jsonl(&log).as_bytes())?;
        return Err(e.into());
    }
    if let Some(e) = eval_error {
        return Err(e);
    }
    let eval = evaluate_model(&model, &test_x, &test_y, cfg.eval_batch)?;
    log.push(json!({"kind": "final", "iter": optim.iteration, "test_accuracy": eval.accuracy}));
    write(&cfg.path("dense.dnse"), &model.to_checkpoint())?;
    let velocity: IndexMap<String, Tensor<f32>> = optim.velocity.clone();
    write(&cfg.path("train_state.dnse"), &write_tensors(&velocity))?;
    write(
        &cfg.path("train_state.json"),
        json!({"iteration": optim.iteration}).to_string().as_bytes(),
    )?;
    write(&cfg.path("train_log.jsonl"), jsonl(&log).as_bytes())?;
    Ok(TrainSummary {
        iterations: optim.iteration,
        final_loss: last_loss,
        test_accuracy: eval.accuracy,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StageSummary {
    pub density: f64,
    pub test_accuracy: f64,
}

/// DropWeight pruning with retraining, starting from the dense checkpoint.
pub fn cmd_prune(cfg: &PipelineConfig) -> Result<StageSummary> {
    let mut model = load_model_file(cfg, &cfg.path("dense.dnse"))?;
    let train_set = read_ink(&cfg.train_ink(), cfg.data.class_count)?;
    let (test_x, test_y) = load_test_set(cfg)?;
    let mut sampler = EpochSampler::new(&train_set, cfg, cfg.retrain.batch_size, "prune");
    let mut source = |it: u64| sampler.batch(it);
    let every = (cfg.prune.ramp_events() / 10).max(1);
    let mut eval = |m: &Model<f32>, events: u64| {
        let acc = events.is_multiple_of(every)
            .then(|| evaluate_model(m, &test_x, &test_y, cfg.eval_batch).ok().map(|e| e.accuracy))
            .flatten();
        if let Some(a) = acc {
            log::info!("prune event {events} test accuracy {a:.4}");
        }
        acc
    };
    let (state, log) = run_dropweight(&mut model, &mut source, &cfg.prune, &cfg.retrain, Some(&mut eval))?;
    let acc = evaluate_model(&model, &test_x, &test_y, cfg.eval_batch)?.accuracy;
    write(&cfg.path("pruned.dnse"), &model.to_checkpoint())?;
    write(&cfg.path("prune_log.jsonl"), log_to_jsonl(&log).as_bytes())?;
    Ok(StageSummary {
        density: state.density(),
        test_accuracy: acc,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct CodebookEntry {
    name: String,
    bits: u8,
    centroids: Vec<f32>,
}

/// Codebook quantization of the pruned layers plus centroid fine-tuning.
pub fn cmd_quantize(cfg: &PipelineConfig) -> Result<StageSummary> {
    let mut model = load_model_file(cfg, &cfg.path("pruned.dnse"))?;
    let train_set = read_ink(&cfg.train_ink(), cfg.data.class_count)?;
    let (test_x, test_y) = load_test_set(cfg)?;
    let state = PruneState::from_zeros(&model);
    let mut layers = quantize_model(&mut model, &state, &cfg.quant)?;
    let ft = TrainConfig {
        base_lr: cfg.quant.finetune_lr,
        lr_factor: 1.0,
        ..cfg.retrain.clone()
    };
    let mut sampler = EpochSampler::new(&train_set, cfg, ft.batch_size, "quant");
    let mut source = |it: u64| sampler.batch(it);
    let losses = finetune_centroids(&mut model, &mut layers, &mut source, &ft, cfg.quant.finetune_steps)?;
    let acc = evaluate_model(&model, &test_x, &test_y, cfg.eval_batch)?.accuracy;
    let books: Vec<CodebookEntry> = layers
        .iter()
        .map(|l| CodebookEntry {
            name: l.name.clone(),
            bits: l.codebook.bits,
            centroids: l.codebook.centroids.clone(),
        })
        .collect();
    let log: Vec<serde_json::Value> = losses
        .iter()
        .enumerate()
        .map(|(i, l)| json!({"iter": i + 1, "loss": l}))
        .collect();
    write(&cfg.path("quantized.dnse"), &model.to_checkpoint())?;
    write(
        &cfg.path("codebooks.json"),
        serde_json::to_string(&books).expect("codebooks serialize").as_bytes(),
    )?;
    write(&cfg.path("quant_log.jsonl"), jsonl(&log).as_bytes())?;
    Ok(StageSummary {
        density: PruneState::from_zeros(&model).density(),
        test_accuracy: acc,
    })
}

/// Packs the quantized checkpoint. Masks are the zero pattern of the
/// weights; every survivor must equal one of its layer's centroids.
pub fn cmd_pack(cfg: &PipelineConfig) -> Result<SizeReport> {
    let model = load_model_file(cfg, &cfg.path("quantized.dnse"))?;
    let books: Vec<CodebookEntry> = serde_json::from_slice(&read(&cfg.path("codebooks.json"))?)
        .map_err(|e| PipelineError::Data(format!("codebooks.json: {e}")))?;
    let state = PruneState::from_zeros(&model);
    let mut layers = Vec::new();
    for b in books {
        let (t, mask) = match (model.param(&b.name), state.layers.get(&b.name)) {
            (Some(t), Some(m)) => (t, m),
            _ => return Err(PipelineError::Data(format!("codebooks.json: unknown layer {}", b.name))),
        };
        let cb = Codebook {
            bits: b.bits,
            centroids: b.centroids,
        };
        let (q, _) = assign_and_dequantize(&b.name, t.shape(), t.data(), mask, &cb)?;
        layers.push(q);
    }
    let bytes = pack(&model, &state, &layers)?;
    write(&cfg.path("model.dwpk"), &bytes)?;
    Ok(size_report(&bytes)?)
}

pub fn cmd_eval(cfg: &PipelineConfig, model_path: Option<&Path>) -> Result<EvalSummary> {
    let path = model_path.map(Path::to_path_buf).unwrap_or_else(|| cfg.path("model.dwpk"));
    let model = load_model_file(cfg, &path)?;
    let (x, y) = load_test_set(cfg)?;
    evaluate_model(&model, &x, &y, cfg.eval_batch)
}

pub fn cmd_size_report(cfg: &PipelineConfig, model_path: Option<&Path>) -> Result<SizeReport> {
    let path = model_path.map(Path::to_path_buf).unwrap_or_else(|| cfg.path("model.dwpk"));
    let bytes = read(&path)?;
    if bytes.starts_with(DENSE_MAGIC) {
        let model = load_model_file(cfg, &path)?;
        return Ok(crate::pack::dense_size_report(&model));
    }
    Ok(size_report(&bytes)?)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunSummary {
    pub dense_accuracy: f64,
    pub pruned_accuracy: f64,
    pub quantized_accuracy: f64,
    pub packed_accuracy: f64,
    pub density: f64,
    pub packed_bytes: usize,
    pub dense_checkpoint_bytes: usize,
}

/// Every stage in order.
pub fn cmd_run(cfg: &PipelineConfig) -> Result<RunSummary> {
    if cfg.data.train_path.is_none() {
        cmd_gen_data(cfg)?;
    }
    cmd_render(cfg)?;
    let dense = cmd_train(cfg, false)?;
    let pruned = cmd_prune(cfg)?;
    let quant = cmd_quantize(cfg)?;
    let report = cmd_pack(cfg)?;
    let packed = cmd_eval(cfg, None)?;
    let dense_bytes = fs::metadata(cfg.path("dense.dnse"))
        .map_err(|e| PipelineError::Data(e.to_string()))?
        .len() as usize;
    Ok(RunSummary {
        dense_accuracy: dense.test_accuracy,
        pruned_accuracy: pruned.test_accuracy,
        quantized_accuracy: quant.test_accuracy,
        packed_accuracy: packed.accuracy,
        density: quant.density,
        packed_bytes: report.total_bytes,
        dense_checkpoint_bytes: dense_bytes,
    })
}
