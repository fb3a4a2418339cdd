//! Training loop for the dual-encoder model and the single-encoder baseline.
//!
//! Every random draw at step `s` comes from a stream derived from
//! `(seed, s)`, so a run resumed from a step-`k` checkpoint replays exactly
//! the batches, shuffles and noise of an uninterrupted run.

mod adam;
mod batching;

use std::fs::OpenOptions;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use candle_core::DType;
use serde::{Deserialize, Serialize};

pub use adam::{Adam, AdamConfig, StepStats};
pub use batching::{bucket_groups, sample_batch, validation_chunks};

use crate::data::MelSpectrogram;
use crate::model::{
    load_checkpoint, save_checkpoint, standard_normal, Batch, DualVae, ModelConfig, ModelKind, Noise, ParamStore,
    VanillaVae,
};
use crate::objective::{loss_parts, CapacitySchedule, Loss, LossParts, LossWeights, Objective};
use crate::seed::{self, stream};
use crate::{Error, Result};

pub const CONFIG_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum ScalePreset {
    Paper,
    Desk,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Precision {
    F32,
    F64,
}

impl Precision {
    pub fn dtype(self) -> DType {
        match self {
            Precision::F32 => DType::F32,
            Precision::F64 => DType::F64,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainingConfig {
    pub schema_version: u32,
    pub preset: ScalePreset,
    pub model: ModelConfig,
    pub batch_size: usize,
    pub total_steps: u64,
    pub optimizer: AdamConfig,
    pub objective: Objective,
    pub seed: u64,
    /// Validation and checkpoint interval in steps.
    pub checkpoint_every: u64,
    /// Songs whose lengths round up to the same multiple share a padded sub-batch.
    pub bucket_frames: usize,
    /// Upper bound on validation songs scored per evaluation; `0` means all.
    pub validation_limit: usize,
    pub precision: Precision,
}

impl TrainingConfig {
    pub fn paper() -> Self {
        Self {
            schema_version: CONFIG_SCHEMA_VERSION,
            preset: ScalePreset::Paper,
            model: ModelConfig::paper(),
            batch_size: 64,
            total_steps: 200_000,
            optimizer: AdamConfig::default(),
            objective: Objective::default(),
            seed: 0,
            checkpoint_every: 5_000,
            bucket_frames: 32,
            validation_limit: 0,
            precision: Precision::F32,
        }
    }

    /// Single-CPU preset: narrow model, short run, ramp over the first half.
    /// KL weights are lowered; at the full weights the local posterior collapses
    /// to a song-independent shift within a run this short.
    pub fn desk() -> Self {
        let steps = 800;
        let ramp = steps / 2;
        Self {
            preset: ScalePreset::Desk,
            model: ModelConfig::desk(),
            batch_size: 16,
            total_steps: steps,
            optimizer: AdamConfig { learning_rate: 1e-3, ..AdamConfig::default() },
            objective: Objective {
                weights: LossWeights { gamma_global: 10.0, gamma_local: 0.1 },
                global_capacity: CapacitySchedule { c_max: 0.4, ramp_steps: ramp },
                // same per-unit capacity as 100 nats over 128 units
                local_capacity: CapacitySchedule { c_max: 12.5, ramp_steps: ramp },
            },
            checkpoint_every: 400,
            validation_limit: 64,
            ..Self::paper()
        }
    }

    pub fn preset(p: ScalePreset) -> Self {
        match p {
            ScalePreset::Paper => Self::paper(),
            ScalePreset::Desk => Self::desk(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.schema_version != CONFIG_SCHEMA_VERSION {
            return Err(Error::validation(format!(
                "unsupported training config schema {} (expected {CONFIG_SCHEMA_VERSION})",
                self.schema_version
            )));
        }
        self.model.validate()?;
        self.optimizer.validate()?;
        self.objective.weights.validate()?;
        if self.batch_size == 0 || self.checkpoint_every == 0 || self.bucket_frames == 0 {
            return Err(Error::validation("batch_size, checkpoint_every and bucket_frames must be positive"));
        }
        for c in [self.objective.global_capacity, self.objective.local_capacity] {
            if !(c.c_max >= 0.0 && c.c_max.is_finite()) {
                return Err(Error::validation(format!("invalid capacity {c:?}")));
            }
        }
        Ok(())
    }
}

/// One metrics-log line.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: u64,
    pub recon_nll: f64,
    pub kl_global: f64,
    pub kl_local: f64,
    pub c_g_active: f64,
    pub c_l_active: f64,
    pub total: f64,
}

impl StepRecord {
    fn new(step: u64, loss: &Loss) -> Self {
        let t = &loss.terms;
        Self {
            step,
            recon_nll: t.recon_nll,
            kl_global: t.kl_global,
            kl_local: t.kl_local,
            c_g_active: t.c_g_active,
            c_l_active: t.c_l_active,
            total: t.total,
        }
    }
}

/// Eval-mode loss over the validation songs after `step` updates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValidationRecord {
    pub step: u64,
    pub total: f64,
    pub recon_nll: f64,
    pub kl_global: f64,
    pub kl_local: f64,
}

/// A model the loop can optimize.
pub trait TrainModel {
    fn kind(&self) -> ModelKind;
    fn model_config(&self) -> ModelConfig;
    fn store(&self) -> &ParamStore;
    /// Loss ingredients for one padded group.
    fn group_parts(
        &self,
        songs: &[&MelSpectrogram],
        shuffle_seeds: &[u64],
        noise_seed: u64,
        train: bool,
    ) -> Result<LossParts>;
    fn combine(&self, objective: &Objective, parts: &LossParts, step: u64) -> Result<Loss>;
}

impl TrainModel for DualVae {
    fn kind(&self) -> ModelKind {
        ModelKind::Dual
    }

    fn model_config(&self) -> ModelConfig {
        self.config
    }

    fn store(&self) -> &ParamStore {
        &self.store
    }

    fn group_parts(&self, songs: &[&MelSpectrogram], shuffle_seeds: &[u64], noise_seed: u64, train: bool) -> Result<LossParts> {
        let batch = Batch::shuffled(songs, self.config.segment_len, shuffle_seeds, self.dtype())?;
        let noise = Noise::draw(&self.config, songs.len(), batch.mask.t_max(), self.dtype(), noise_seed)?;
        let out = self.forward(&batch, &noise, train)?;
        loss_parts(&batch.x, &batch.mask, Some(&out.q_global), &out.q_local, &out.recon)
    }

    fn combine(&self, objective: &Objective, parts: &LossParts, step: u64) -> Result<Loss> {
        objective.total(parts, step)
    }
}

impl TrainModel for VanillaVae {
    fn kind(&self) -> ModelKind {
        ModelKind::Baseline
    }

    fn model_config(&self) -> ModelConfig {
        self.config
    }

    fn store(&self) -> &ParamStore {
        &self.store
    }

    fn group_parts(&self, songs: &[&MelSpectrogram], _: &[u64], noise_seed: u64, train: bool) -> Result<LossParts> {
        let batch = Batch::unshuffled(songs, self.dtype())?;
        let eps = standard_normal(&[songs.len(), self.config.local_dim], self.dtype(), noise_seed)?;
        let out = self.forward(&batch, &eps, train)?;
        loss_parts(&batch.x, &batch.mask, None, &out.q, &out.recon)
    }

    fn combine(&self, objective: &Objective, parts: &LossParts, step: u64) -> Result<Loss> {
        objective.total_single(parts, step)
    }
}

/// Final state of a run plus everything it logged in this process.
#[derive(Debug)]
pub struct TrainRun<M> {
    pub model: M,
    pub optimizer: Adam,
    pub step: u64,
    pub best_validation: Option<f64>,
    pub metrics: Vec<StepRecord>,
    pub validation: Vec<ValidationRecord>,
}

/// Output file names inside a run directory.
pub mod files {
    pub const METRICS: &str = "metrics.jsonl";
    pub const VALIDATION: &str = "validation.jsonl";
    pub const LAST: &str = "last.ckpt";
    pub const BEST: &str = "best.ckpt";
    pub const ABORT: &str = "abort.json";
}

/// Loss over one sampled batch: groups are scored separately and their sums combined.
pub fn batch_loss<M: TrainModel>(
    model: &M,
    cfg: &TrainingConfig,
    songs: &[&MelSpectrogram],
    step: u64,
) -> Result<Loss> {
    let picks = sample_batch(songs.len(), cfg.batch_size, seed::derive(cfg.seed, &[stream::BATCH, step]));
    let mut total: Option<LossParts> = None;
    for group in bucket_groups(&picks, songs, cfg.bucket_frames) {
        let members: Vec<&MelSpectrogram> = group.positions.iter().map(|&p| songs[picks[p]]).collect();
        let shuffle: Vec<u64> =
            group.positions.iter().map(|&p| seed::derive(cfg.seed, &[stream::SHUFFLE, step, p as u64])).collect();
        let noise = seed::derive(cfg.seed, &[stream::NOISE, step, group.bucket as u64]);
        let parts = model.group_parts(&members, &shuffle, noise, true)?;
        total = Some(match total {
            None => parts,
            Some(acc) => acc.add(&parts)?,
        });
    }
    let parts = total.ok_or_else(|| Error::validation("empty training split"))?;
    model.combine(&cfg.objective, &parts, step)
}

/// Eval-mode loss on (up to `validation_limit`) validation songs with fixed noise.
pub fn validation_loss<M: TrainModel>(
    model: &M,
    cfg: &TrainingConfig,
    songs: &[&MelSpectrogram],
    step: u64,
) -> Result<Option<ValidationRecord>> {
    let limit = if cfg.validation_limit == 0 { songs.len() } else { cfg.validation_limit.min(songs.len()) };
    let songs = &songs[..limit];
    let mut total: Option<LossParts> = None;
    for (c, chunk) in validation_chunks(songs, cfg.bucket_frames, cfg.batch_size).into_iter().enumerate() {
        let members: Vec<&MelSpectrogram> = chunk.iter().map(|&i| songs[i]).collect();
        let shuffle: Vec<u64> =
            chunk.iter().map(|&i| seed::derive(cfg.seed, &[stream::VALIDATION, 0, i as u64])).collect();
        let noise = seed::derive(cfg.seed, &[stream::VALIDATION, 1, c as u64]);
        let parts = model.group_parts(&members, &shuffle, noise, false)?;
        let parts = LossParts {
            recon_sum: parts.recon_sum.detach(),
            kl_global_sum: parts.kl_global_sum.detach(),
            kl_local_sum: parts.kl_local_sum.detach(),
            kl_local_unit_sum: parts.kl_local_unit_sum.detach(),
            songs: parts.songs,
        };
        total = Some(match total {
            None => parts,
            Some(acc) => acc.add(&parts)?,
        });
    }
    let Some(parts) = total else { return Ok(None) };
    let loss = model.combine(&cfg.objective, &parts, step)?;
    Ok(Some(ValidationRecord {
        step,
        total: loss.terms.total,
        recon_nll: loss.terms.recon_nll,
        kl_global: loss.terms.kl_global,
        kl_local: loss.terms.kl_local,
    }))
}

#[derive(Debug, Serialize, Deserialize)]
struct CheckpointMeta {
    config: TrainingConfig,
    optimizer_t: u64,
    best_validation: Option<f64>,
    /// Per-step streams are derived from `(seed, step)`; nothing else to store.
    rng: RngState,
}

#[derive(Debug, Serialize, Deserialize)]
struct RngState {
    seed: u64,
    next_step: u64,
}

fn write_checkpoint<M: TrainModel>(path: &Path, run: &TrainRun<M>, cfg: &TrainingConfig) -> Result<()> {
    let meta = CheckpointMeta {
        config: cfg.clone(),
        optimizer_t: run.optimizer.t,
        best_validation: run.best_validation,
        rng: RngState { seed: cfg.seed, next_step: run.step },
    };
    let mut tensors = run.model.store().named_tensors();
    tensors.extend(run.optimizer.named_state());
    save_checkpoint(path, run.model.kind(), run.model.model_config(), run.step, serde_json::to_value(meta)?, &tensors)
}

/// Restores parameters, buffers and optimizer state into `run` from `path`.
fn resume_into<M: TrainModel>(run: &mut TrainRun<M>, path: &Path, cfg: &TrainingConfig) -> Result<()> {
    let ck = load_checkpoint(path)?;
    if ck.header.kind != run.model.kind() {
        return Err(Error::validation(format!(
            "checkpoint holds a {:?} model, expected {:?}",
            ck.header.kind,
            run.model.kind()
        )));
    }
    if ck.header.model != run.model.model_config() {
        return Err(Error::validation("checkpoint/architecture mismatch"));
    }
    let meta: CheckpointMeta = serde_json::from_value(ck.header.meta.clone())
        .map_err(|e| Error::format(format!("checkpoint metadata: {e}")))?;
    if meta.config.seed != cfg.seed {
        return Err(Error::validation(format!("checkpoint seed {} differs from config seed {}", meta.config.seed, cfg.seed)));
    }
    ck.restore(run.model.store())?;
    let dtype = run.model.store().dtype();
    run.optimizer.load_state(meta.optimizer_t, |n| ck.tensor(n, dtype))?;
    run.step = ck.header.step;
    run.best_validation = meta.best_validation;
    Ok(())
}

/// Keeps only metrics lines with `step < keep_below`.
fn truncate_log(path: &Path, keep_below: u64) -> Result<()> {
    if !path.exists() {
        return Ok(());
    }
    let text = std::fs::read_to_string(path)?;
    let mut kept = String::new();
    for line in text.lines().filter(|l| !l.trim().is_empty()) {
        let v: serde_json::Value = serde_json::from_str(line)?;
        if v.get("step").and_then(|s| s.as_u64()).is_some_and(|s| s < keep_below) {
            kept.push_str(line);
            kept.push('\n');
        }
    }
    crate::io_util::write_atomic(path, kept.as_bytes())
}

struct Logs {
    metrics: Option<BufWriter<std::fs::File>>,
    validation: Option<BufWriter<std::fs::File>>,
}

impl Logs {
    fn open(dir: Option<&Path>) -> Result<Self> {
        let open = |name: &str| -> Result<Option<BufWriter<std::fs::File>>> {
            match dir {
                Some(d) => Ok(Some(BufWriter::new(OpenOptions::new().create(true).append(true).open(d.join(name))?))),
                None => Ok(None),
            }
        };
        Ok(Self { metrics: open(files::METRICS)?, validation: open(files::VALIDATION)? })
    }

    fn line<T: Serialize>(w: &mut Option<BufWriter<std::fs::File>>, rec: &T) -> Result<()> {
        if let Some(w) = w {
            serde_json::to_writer(&mut *w, rec)?;
            w.write_all(b"\n")?;
        }
        Ok(())
    }

    fn flush(&mut self) -> Result<()> {
        for w in [&mut self.metrics, &mut self.validation].into_iter().flatten() {
            w.flush()?;
        }
        Ok(())
    }
}

/// Options outside the config: where to write, and what to resume from.
#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    pub out_dir: Option<PathBuf>,
    pub resume: Option<PathBuf>,
    /// Stop after this many steps in total (still checkpointing), for resume tests.
    pub stop_at: Option<u64>,
}

/// Runs the loop on any [`TrainModel`].
pub fn train_model<M: TrainModel>(
    model: M,
    cfg: &TrainingConfig,
    train: &[&MelSpectrogram],
    val: &[&MelSpectrogram],
    opts: &RunOptions,
) -> Result<TrainRun<M>> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::validation("training split is empty"));
    }
    let optimizer = Adam::new(model.store(), cfg.optimizer)?;
    let mut run =
        TrainRun { model, optimizer, step: 0, best_validation: None, metrics: Vec::new(), validation: Vec::new() };
    let dir = opts.out_dir.as_deref();
    if let Some(d) = dir {
        std::fs::create_dir_all(d)?;
    }
    match &opts.resume {
        Some(path) => {
            resume_into(&mut run, path, cfg)?;
            if let Some(d) = dir {
                truncate_log(&d.join(files::METRICS), run.step)?;
                truncate_log(&d.join(files::VALIDATION), run.step + 1)?;
            }
        }
        None => {
            if let Some(d) = dir {
                for f in [files::METRICS, files::VALIDATION] {
                    crate::io_util::write_atomic(&d.join(f), b"")?;
                }
            }
        }
    }
    let mut logs = Logs::open(dir)?;
    let end = opts.stop_at.map_or(cfg.total_steps, |s| s.min(cfg.total_steps));
    while run.step < end {
        let step = run.step;
        let loss = match batch_loss(&run.model, cfg, train, step) {
            Ok(l) => l,
            Err(e) => {
                if let (Error::Numeric(msg), Some(d)) = (&e, dir) {
                    let diag = serde_json::json!({ "step": step, "error": msg });
                    crate::io_util::write_atomic(&d.join(files::ABORT), diag.to_string().as_bytes())?;
                }
                logs.flush()?;
                return Err(e);
            }
        };
        let record = StepRecord::new(step, &loss);
        Logs::line(&mut logs.metrics, &record)?;
        run.metrics.push(record);
        let grads = loss.total.backward()?;
        run.optimizer.step(&grads)?;
        run.step += 1;
        let boundary = run.step % cfg.checkpoint_every == 0 || run.step == cfg.total_steps;
        if boundary {
            if let Some(v) = validation_loss(&run.model, cfg, val, run.step)? {
                log::info!("step {} validation total {:.4}", run.step, v.total);
                let better = run.best_validation.is_none_or(|b| v.total < b);
                if better {
                    run.best_validation = Some(v.total);
                }
                Logs::line(&mut logs.validation, &v)?;
                run.validation.push(v);
                if better {
                    if let Some(d) = dir {
                        write_checkpoint(&d.join(files::BEST), &run, cfg)?;
                    }
                }
            }
            logs.flush()?;
            if let Some(d) = dir {
                write_checkpoint(&d.join(files::LAST), &run, cfg)?;
            }
        }
    }
    if let Some(d) = dir {
        if run.step == end && !run.step.is_multiple_of(cfg.checkpoint_every) {
            write_checkpoint(&d.join(files::LAST), &run, cfg)?;
        }
    }
    logs.flush()?;
    Ok(run)
}

/// Trains the dual-encoder model.
pub fn train(
    cfg: &TrainingConfig,
    train: &[&MelSpectrogram],
    val: &[&MelSpectrogram],
    opts: &RunOptions,
) -> Result<TrainRun<DualVae>> {
    let model = DualVae::new(cfg.model, cfg.precision.dtype(), cfg.seed)?;
    train_model(model, cfg, train, val, opts)
}

/// Trains the single-encoder baseline; its one latent uses the local weight and capacity.
pub fn train_vanilla_baseline(
    cfg: &TrainingConfig,
    train: &[&MelSpectrogram],
    val: &[&MelSpectrogram],
    opts: &RunOptions,
) -> Result<TrainRun<VanillaVae>> {
    let model = VanillaVae::new(cfg.model, cfg.precision.dtype(), cfg.seed)?;
    train_model(model, cfg, train, val, opts)
}

/// Loads a dual model from a checkpoint written by [`train`].
pub fn load_dual(path: &Path) -> Result<DualVae> {
    let ck = load_checkpoint(path)?;
    if ck.header.kind != ModelKind::Dual {
        return Err(Error::validation(format!("{} does not hold a dual-encoder model", path.display())));
    }
    let dtype = if ck.header.dtype == "f64" { DType::F64 } else { DType::F32 };
    let model = DualVae::new(ck.header.model, dtype, 0)?;
    ck.restore(&model.store)?;
    Ok(model)
}

/// Loads a baseline model from a checkpoint written by [`train_vanilla_baseline`].
pub fn load_baseline(path: &Path) -> Result<VanillaVae> {
    let ck = load_checkpoint(path)?;
    if ck.header.kind != ModelKind::Baseline {
        return Err(Error::validation(format!("{} does not hold a baseline model", path.display())));
    }
    let dtype = if ck.header.dtype == "f64" { DType::F64 } else { DType::F32 };
    let model = VanillaVae::new(ck.header.model, dtype, 0)?;
    ck.restore(&model.store)?;
    Ok(model)
}

/// Reads a metrics log.
pub fn read_metrics(path: &Path) -> Result<Vec<StepRecord>> {
    std::fs::read_to_string(path)?
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| Ok(serde_json::from_str(l)?))
        .collect()
}

#[cfg(test)]
mod tests;
