//! Deterministic training runs, checkpoints and epoch logs.
//!
//! Every random draw of a run comes from a substream keyed by
//! `(seed, purpose, epoch, batch)`: initialization uses `(seed, Init, 0, 0)`,
//! epoch `e` (1-based) shuffles with `(seed, Shuffle, e, 0)`, and batch `b` of that
//! epoch draws latent noise from `(seed, Latent, e, b)` and dropout masks from
//! `(seed, Dropout, e, b)`. The RNG position of a run is therefore fully described
//! by the number of completed epochs, which is what makes resuming exact.

use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::autodiff::{adam_step, AdamConfig, AdamState, Tensor};
use crate::coupling::Coupling;
use crate::error::{Error, Result};
use crate::mnist::{Dataset, BatchPlan, LoadOptions, Split, PIXELS};
use crate::model::{BatchNoise, LossConfig, ModelDims, Objective, VaeParams, LOG_SIGMA_MAX, LOG_SIGMA_MIN, OUTPUT_CLAMP};
use crate::sampling::{Purpose, Rng};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"CVAECKPT";
pub const CHECKPOINT_VERSION: u32 = 1;
pub const LOG_HEADER: &str = "epoch,total,recon,kl,seconds";

/// Everything that determines a run. Paths do not affect the trajectory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub kappa_d: f64,
    pub kappa_l: f64,
    pub z_dim: usize,
    pub hidden: usize,
    pub hidden_layers: usize,
    pub epochs: u32,
    pub batch_size: usize,
    pub lr: f64,
    pub dropout: f64,
    pub seed: u64,
    pub train_limit: Option<usize>,
    pub binarize: bool,
    pub data_dir: PathBuf,
    pub out_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            kappa_d: 0.0,
            kappa_l: 0.0,
            z_dim: 2,
            hidden: 500,
            hidden_layers: 2,
            epochs: 500,
            batch_size: 5000,
            lr: 1e-3,
            dropout: 0.1,
            seed: 0,
            train_limit: None,
            binarize: false,
            data_dir: PathBuf::from("data/mnist-desk"),
            out_dir: PathBuf::from("runs"),
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        Coupling::new(self.kappa_d)?;
        Coupling::new(self.kappa_l)?;
        self.dims().validate()?;
        if self.batch_size == 0 {
            return Err(Error::Argument("batch_size must be >= 1".into()));
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(Error::Argument(format!("lr must be > 0, got {}", self.lr)));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Argument(format!("dropout must be in [0, 1), got {}", self.dropout)));
        }
        if self.train_limit == Some(0) {
            return Err(Error::Argument("train_limit must be >= 1".into()));
        }
        Ok(())
    }

    pub fn dims(&self) -> ModelDims {
        ModelDims {
            input: PIXELS,
            hidden: self.hidden,
            hidden_layers: self.hidden_layers,
            z_dim: self.z_dim,
        }
    }

    pub fn loss_config(&self) -> Result<LossConfig> {
        Ok(LossConfig {
            kappa_l: Coupling::new(self.kappa_l)?,
            kappa_d: self.kappa_d,
            dropout: self.dropout,
        })
    }

    pub fn adam_config(&self) -> AdamConfig {
        AdamConfig::with_lr(self.lr)
    }

    /// File stem shared by the checkpoint, log and metrics of this run.
    pub fn run_name(&self) -> String {
        format!("kd{}_kl{}_z{}_s{}", self.kappa_d, self.kappa_l, self.z_dim, self.seed)
    }

    pub fn checkpoint_path(&self) -> PathBuf {
        self.out_dir.join(format!("{}.ckpt", self.run_name()))
    }

    pub fn log_path(&self) -> PathBuf {
        self.out_dir.join(format!("{}.train.csv", self.run_name()))
    }

    pub fn load_options(&self) -> LoadOptions {
        LoadOptions {
            limit: self.train_limit,
            binarize: self.binarize,
        }
    }

    /// Load the training split this configuration asks for.
    pub fn load_training_data(&self) -> Result<Dataset> {
        crate::mnist::load_split(&self.data_dir, Split::Train, &self.load_options())
    }

    /// Fields that must not change between a checkpoint and its continuation.
    fn frozen(&self) -> RunConfig {
        RunConfig {
            epochs: 0,
            data_dir: PathBuf::new(),
            out_dir: PathBuf::new(),
            ..self.clone()
        }
    }
}

/// The `(κ_D, κ_L) ∈ {0, 0.15}²` grid around `base`.
pub fn default_grid(base: &RunConfig) -> Vec<RunConfig> {
    grid(base, &[0.0, 0.15], &[0.0, 0.15])
}

pub fn grid(base: &RunConfig, kappa_ds: &[f64], kappa_ls: &[f64]) -> Vec<RunConfig> {
    let mut out = Vec::new();
    for &kappa_d in kappa_ds {
        for &kappa_l in kappa_ls {
            out.push(RunConfig {
                kappa_d,
                kappa_l,
                ..base.clone()
            });
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochRecord {
    pub epoch: u32,
    pub total: f64,
    pub recon: f64,
    pub kl: f64,
    pub seconds: f64,
}

/// Append-only per-epoch log.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainLog {
    pub records: Vec<EpochRecord>,
}

impl TrainLog {
    pub fn to_csv(&self) -> String {
        let mut s = format!("{LOG_HEADER}\n");
        for r in &self.records {
            s.push_str(&record_line(r));
        }
        s
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        if lines.next() != Some(LOG_HEADER) {
            return Err(Error::Argument(format!("train log must start with `{LOG_HEADER}`")));
        }
        let mut records = Vec::new();
        for (i, line) in lines.enumerate().filter(|(_, l)| !l.trim().is_empty()) {
            let fields: Vec<&str> = line.split(',').collect();
            let bad = || Error::Argument(format!("train log line {}: `{line}`", i + 2));
            if fields.len() != 5 {
                return Err(bad());
            }
            let num = |j: usize| fields[j].parse::<f64>().map_err(|_| bad());
            records.push(EpochRecord {
                epoch: fields[0].parse().map_err(|_| bad())?,
                total: num(1)?,
                recon: num(2)?,
                kl: num(3)?,
                seconds: num(4)?,
            });
        }
        Ok(TrainLog { records })
    }

    /// Write the whole log, or only append the records after those already in
    /// the file when `append` is set.
    pub fn write(&self, path: &Path, append: bool) -> Result<()> {
        if append && path.is_file() {
            let existing = TrainLog::from_csv(&fs::read_to_string(path)?)?;
            let last = existing.records.last().map_or(0, |r| r.epoch);
            let mut f = fs::OpenOptions::new().append(true).open(path)?;
            for r in self.records.iter().filter(|r| r.epoch > last) {
                f.write_all(record_line(r).as_bytes())?;
            }
            return Ok(());
        }
        fs::write(path, self.to_csv())?;
        Ok(())
    }
}

fn record_line(r: &EpochRecord) -> String {
    format!("{},{},{},{},{:.3}\n", r.epoch, r.total, r.recon, r.kl, r.seconds)
}

/// Complete state of a run after `epoch` completed epochs.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: RunConfig,
    pub epoch: u32,
    /// Number of training images the run was started on.
    pub train_examples: usize,
    pub params: VaeParams,
    pub adam: AdamState,
}

#[derive(Debug, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    /// Byte offset from the start of the data section.
    offset: u64,
}

#[derive(Debug, Serialize, Deserialize)]
struct RngCursor {
    algorithm: String,
    seed: u64,
    next_epoch: u32,
    layout: String,
}

#[derive(Debug, Serialize, Deserialize)]
struct RunNotes {
    activations: String,
    log_sigma_clamp: [f64; 2],
    output_clamp: f64,
    latent_noise: String,
    eval_default: String,
}

#[derive(Debug, Serialize, Deserialize)]
struct Meta {
    format_version: u32,
    config: RunConfig,
    epoch: u32,
    train_examples: usize,
    adam: AdamConfig,
    adam_step: u64,
    rng: RngCursor,
    notes: RunNotes,
    tensors: Vec<TensorEntry>,
}

impl Checkpoint {
    /// Fresh state: initialized weights and zero Adam moments.
    pub fn initial(config: &RunConfig, train_examples: usize) -> Result<Self> {
        config.validate()?;
        let mut rng = Rng::new(config.seed, Purpose::Init);
        let params = VaeParams::init(config.dims(), &mut rng)?;
        let adam = AdamState::new(config.adam_config(), params.named().iter().map(|(_, t)| t));
        Ok(Checkpoint {
            config: config.clone(),
            epoch: 0,
            train_examples,
            params,
            adam,
        })
    }

    /// Layout: `CVAECKPT`, `u32` format version, `u64` metadata length, UTF-8 JSON
    /// metadata, then little-endian `f64` blocks at the offsets in the manifest.
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut tensors = Vec::new();
        let mut blocks: Vec<&Tensor> = Vec::new();
        let mut offset = 0u64;
        let named = self.params.named();
        let sections = [("", None), ("adam.m.", Some(&self.adam.m)), ("adam.v.", Some(&self.adam.v))];
        for (prefix, moments) in sections {
            for (i, (name, t)) in named.iter().enumerate() {
                let t = match moments {
                    Some(m) => &m[i],
                    None => t,
                };
                tensors.push(TensorEntry {
                    name: format!("{prefix}{name}"),
                    shape: t.shape().to_vec(),
                    offset,
                });
                offset += 8 * t.len() as u64;
                blocks.push(t);
            }
        }
        let meta = Meta {
            format_version: CHECKPOINT_VERSION,
            config: self.config.clone(),
            epoch: self.epoch,
            train_examples: self.train_examples,
            adam: self.adam.config,
            adam_step: self.adam.step,
            rng: RngCursor {
                algorithm: "chacha12, key = splitmix64(seed ^ purpose tag), stream = epoch << 32 | batch".into(),
                seed: self.config.seed,
                next_epoch: self.epoch + 1,
                layout: "init (0,0); shuffle (e,0); latent (e,b); dropout (e,b)".into(),
            },
            notes: RunNotes {
                activations: "relu hidden, sigmoid output, inverted dropout after hidden layers".into(),
                log_sigma_clamp: [LOG_SIGMA_MIN, LOG_SIGMA_MAX],
                output_clamp: OUTPUT_CLAMP,
                latent_noise: "student-t with nu = 1/kappa_d, shared radial factor, not variance-standardized".into(),
                eval_default: "deterministic (z = mu)".into(),
            },
            tensors,
        };
        let json = serde_json::to_vec_pretty(&meta)?;
        let mut out = Vec::with_capacity(20 + json.len() + offset as usize);
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for t in blocks {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| Error::Checkpoint(m.to_string());
        if bytes.len() < 20 || &bytes[..8] != CHECKPOINT_MAGIC {
            return Err(bad("not a checkpoint (magic mismatch)"));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
        if version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!("unsupported checkpoint version {version}")));
        }
        let meta_len = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
        let data_start = 20usize
            .checked_add(meta_len)
            .filter(|&e| e <= bytes.len())
            .ok_or_else(|| bad("metadata length exceeds file"))?;
        let meta: Meta = serde_json::from_slice(&bytes[20..data_start])?;
        if meta.format_version != version {
            return Err(bad("header and metadata versions differ"));
        }
        let data = &bytes[data_start..];
        let read = |entry: &TensorEntry| -> Result<Tensor> {
            let n: usize = entry.shape.iter().product();
            let start = entry.offset as usize;
            let block = start
                .checked_add(8 * n)
                .and_then(|end| data.get(start..end))
                .ok_or_else(|| Error::Checkpoint(format!("tensor {} runs past end of file", entry.name)))?;
            let values = block
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            Tensor::from_vec(&entry.shape, values)
        };
        let dims = meta.config.dims();
        let count = VaeParams::zeros(dims)?.named().len();
        if meta.tensors.len() != 3 * count {
            return Err(Error::Checkpoint(format!(
                "expected {} tensors in manifest, found {}",
                3 * count,
                meta.tensors.len()
            )));
        }
        let mut named = Vec::with_capacity(count);
        for e in &meta.tensors[..count] {
            named.push((e.name.clone(), read(e)?));
        }
        let params = VaeParams::from_named(dims, named)?;
        let moments = |prefix: &str, entries: &[TensorEntry]| -> Result<Vec<Tensor>> {
            entries
                .iter()
                .zip(params.named())
                .map(|(e, (name, _))| {
                    if e.name != format!("{prefix}{name}") {
                        return Err(Error::Checkpoint(format!("unexpected tensor {} in manifest", e.name)));
                    }
                    read(e)
                })
                .collect()
        };
        let m = moments("adam.m.", &meta.tensors[count..2 * count])?;
        let v = moments("adam.v.", &meta.tensors[2 * count..])?;
        let total: u64 = meta.tensors.iter().map(|e| 8 * e.shape.iter().product::<usize>() as u64).sum();
        if total != data.len() as u64 {
            return Err(Error::Checkpoint(format!(
                "data section holds {} bytes, manifest describes {total}",
                data.len()
            )));
        }
        Ok(Checkpoint {
            config: meta.config,
            epoch: meta.epoch,
            train_examples: meta.train_examples,
            params,
            adam: AdamState {
                config: meta.adam,
                step: meta.adam_step,
                m,
                v,
            },
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir)?;
        }
        fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}

/// Progress events emitted while training.
#[derive(Debug, Clone, Copy)]
pub enum Progress {
    Batch { epoch: u32, batch: u32, total: f64 },
    Epoch(EpochRecord),
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub log: TrainLog,
}

/// The first `train_limit` images of `data`, or all of them.
fn training_view(config: &RunConfig, data: &Dataset) -> Result<Dataset> {
    if data.is_empty() {
        return Err(Error::Argument("training set is empty".into()));
    }
    if data.images.cols() != PIXELS {
        return Err(Error::DimensionMismatch(format!(
            "training images have {} pixels, expected {PIXELS}",
            data.images.cols()
        )));
    }
    Ok(match config.train_limit {
        Some(l) if l < data.len() => data.select(&(0..l).collect::<Vec<_>>()),
        _ => data.clone(),
    })
}

pub fn train(config: &RunConfig, data: &Dataset) -> Result<TrainOutcome> {
    train_with(config, data, &mut |_| {})
}

/// [`train`] with a progress callback.
pub fn train_with(config: &RunConfig, data: &Dataset, observer: &mut dyn FnMut(Progress)) -> Result<TrainOutcome> {
    config.validate()?;
    let data = training_view(config, data)?;
    let mut checkpoint = Checkpoint::initial(config, data.len())?;
    let log = run_epochs(&mut checkpoint, &data, config.epochs, observer)?;
    Ok(TrainOutcome { checkpoint, log })
}

pub fn resume(checkpoint: Checkpoint, data: &Dataset, additional_epochs: u32) -> Result<TrainOutcome> {
    let config = checkpoint.config.clone();
    resume_with(checkpoint, &config, data, additional_epochs, &mut |_| {})
}

/// Continue `checkpoint` for `additional_epochs`. `requested` must agree with the
/// stored configuration on everything except epoch count and paths.
pub fn resume_with(
    mut checkpoint: Checkpoint,
    requested: &RunConfig,
    data: &Dataset,
    additional_epochs: u32,
    observer: &mut dyn FnMut(Progress),
) -> Result<TrainOutcome> {
    if requested.frozen() != checkpoint.config.frozen() {
        return Err(Error::ConfigMismatch(describe_diff(&checkpoint.config, requested)));
    }
    let data = training_view(&checkpoint.config, data)?;
    if data.len() != checkpoint.train_examples {
        return Err(Error::ConfigMismatch(format!(
            "checkpoint was trained on {} images, dataset provides {}",
            checkpoint.train_examples,
            data.len()
        )));
    }
    let log = run_epochs(&mut checkpoint, &data, additional_epochs, observer)?;
    checkpoint.config.epochs = checkpoint.epoch;
    Ok(TrainOutcome { checkpoint, log })
}

fn describe_diff(stored: &RunConfig, requested: &RunConfig) -> String {
    let a = serde_json::to_value(stored.frozen()).unwrap_or_default();
    let b = serde_json::to_value(requested.frozen()).unwrap_or_default();
    let mut msg = String::from("run configuration is immutable; changed:");
    if let (Some(a), Some(b)) = (a.as_object(), b.as_object()) {
        for (k, va) in a {
            if b.get(k) != Some(va) {
                let _ = write!(msg, " {k} ({va} -> {})", b.get(k).cloned().unwrap_or_default());
            }
        }
    }
    msg
}

fn run_epochs(
    checkpoint: &mut Checkpoint,
    data: &Dataset,
    epochs: u32,
    observer: &mut dyn FnMut(Progress),
) -> Result<TrainLog> {
    let config = checkpoint.config.clone();
    let dims = config.dims();
    let loss_config = config.loss_config()?;
    let masked = config.dropout > 0.0;
    let mut objective = Objective::new(dims, &loss_config, masked)?;
    let mut log = TrainLog::default();
    let first = checkpoint.epoch + 1;
    for epoch in first..first + epochs {
        let started = Instant::now();
        let plan = BatchPlan::new(data.len(), config.batch_size, config.seed, epoch)?;
        let (mut total, mut recon, mut kl) = (0.0, 0.0, 0.0);
        for (b, indices) in plan.batches().enumerate() {
            let batch = b as u32;
            let diverged = |cause: Error| Error::Diverged {
                epoch: epoch as usize,
                batch: batch as usize,
                cause: Box::new(cause),
            };
            let x = data.images.select_rows(indices);
            let mut latent = Rng::substream(config.seed, Purpose::Latent, epoch, batch);
            let mut dropout = Rng::substream(config.seed, Purpose::Dropout, epoch, batch);
            let rate = if masked { config.dropout } else { 0.0 };
            let noise = BatchNoise::draw(&dims, indices.len(), config.kappa_d, rate, &mut latent, &mut dropout)?;
            let losses = match objective.evaluate(&checkpoint.params, &x, &noise) {
                Err(e @ Error::NonFinite { .. }) => return Err(diverged(e)),
                other => other?,
            };
            if !losses.total.is_finite() {
                return Err(diverged(Error::NonFinite { node: "loss".into() }));
            }
            let grads = match objective.gradients() {
                Err(e @ Error::NonFinite { .. }) => return Err(diverged(e)),
                other => other?,
            };
            let aligned = checkpoint.params.align(&grads)?;
            if let Some(((name, _), _)) = checkpoint.params.named().iter().zip(&aligned).find(|(_, g)| !g.is_finite()) {
                return Err(diverged(Error::NonFinite {
                    node: format!("gradient of {name}"),
                }));
            }
            let mut refs: Vec<&mut Tensor> = checkpoint.params.tensors_mut().collect();
            adam_step(&mut refs, &aligned, &mut checkpoint.adam)?;
            let w = indices.len() as f64;
            total += losses.total * w;
            recon += losses.reconstruction * w;
            kl += losses.kl * w;
            observer(Progress::Batch {
                epoch,
                batch,
                total: losses.total,
            });
        }
        let n = data.len() as f64;
        let record = EpochRecord {
            epoch,
            total: total / n,
            recon: recon / n,
            kl: kl / n,
            seconds: started.elapsed().as_secs_f64(),
        };
        checkpoint.epoch = epoch;
        log.records.push(record);
        observer(Progress::Epoch(record));
    }
    Ok(log)
}

/// Result of one configuration in a sweep; failures do not stop the others.
#[derive(Debug)]
pub struct SweepEntry {
    pub config: RunConfig,
    pub outcome: Result<TrainOutcome>,
}

/// Train every configuration, using up to `jobs` threads. Each run owns its own
/// parameters and random streams, so results do not depend on `jobs`.
pub fn sweep(configs: &[RunConfig], data: &Dataset, jobs: usize) -> Result<Vec<SweepEntry>> {
    if configs.is_empty() {
        return Err(Error::Argument("sweep needs at least one configuration".into()));
    }
    let jobs = jobs.clamp(1, configs.len());
    let mut results: Vec<Option<Result<TrainOutcome>>> = (0..configs.len()).map(|_| None).collect();
    for (chunk_configs, chunk_results) in configs.chunks(jobs).zip(results.chunks_mut(jobs)) {
        std::thread::scope(|s| {
            let handles: Vec<_> = chunk_configs
                .iter()
                .map(|c| s.spawn(move || train(c, data)))
                .collect();
            for (slot, h) in chunk_results.iter_mut().zip(handles) {
                *slot = Some(h.join().unwrap_or_else(|_| Err(Error::Argument("training thread panicked".into()))));
            }
        });
    }
    Ok(configs
        .iter()
        .cloned()
        .zip(results)
        .map(|(config, outcome)| SweepEntry {
            config,
            outcome: outcome.expect("every slot filled"),
        })
        .collect())
}
