//! The `songdisc` command-line front end.
//!
//! Every command that writes artifacts also writes a `manifest.json` (or
//! `<file>.manifest.json` for single-file outputs) with the resolved config,
//! seeds, input hashes and artifact paths.

mod config;
mod manifest;

use std::ffi::OsString;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::Value;

use crate::analysis::{
    compress_embeddings, extract_baseline_embeddings, extract_embeddings, read_embeddings, reconstruct_probe,
    unit_informativeness, write_embeddings, write_probe_grid, write_report, write_unit_plots, ProbeMode,
    SelectionMethod, UnitInformativeness,
};
use crate::data::{
    desk_corpus_spec, filter_by_length, generate_synthetic_corpus, load_and_resample, load_spectrograms, mel_transform,
    save_spectrograms, split_by_individual, DatasetSplit, MelSpectrogram, SplitFractions, SyntheticSongSpec,
};
use crate::eval::{
    emit_projection_plot, nmi_with_noise, reduce_and_cluster, search_cluster_params, ClusterParams, ClusterReport,
    NoisePolicy, ParamGrid, ReferenceBackend,
};
use crate::model::ModelKind;
use crate::pipeline::{run_pipeline, PipelineConfig};
use crate::train::{self, RunOptions, ScalePreset, TrainingConfig};
use crate::{Error, Result};

pub use config::{load_config, merge_json};
pub use manifest::RunManifest;

#[derive(Debug, Parser)]
#[command(name = "songdisc", version, about = "Whole-song bird vocalization embeddings")]
pub struct Cli {
    /// Master seed; overrides the config file.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Scale preset used as the base config.
    #[arg(long, global = true, value_enum)]
    pub preset: Option<ScalePreset>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// WAV files under DIR/<individual>/<song_type>/ to a spectrogram container.
    Preprocess(PreprocessArgs),
    /// Generate the synthetic structured-song corpus.
    Synth(SynthArgs),
    /// Train the dual-encoder model.
    Train(TrainArgs),
    /// Train the single-encoder baseline.
    TrainBaseline(TrainArgs),
    /// Write posterior-mean embeddings as JSON lines.
    Embed(EmbedArgs),
    /// Per-unit KL report, unit selection and plots.
    AnalyzeUnits(AnalyzeArgs),
    /// Reconstruction probes written as a spectrogram grid.
    Probe(ProbeArgs),
    /// Reduce and cluster embeddings with fixed parameters.
    Cluster(ClusterArgs),
    /// Search clustering parameters and report NMI.
    Eval(EvalArgs),
    /// 2-D projection scatter of embeddings.
    Plot(PlotArgs),
    /// Synth, train both models, embed, analyze and evaluate.
    Pipeline(PipelineArgs),
}

#[derive(Debug, Args)]
pub struct PreprocessArgs {
    /// Root directory laid out as `<individual>/<song_type>/*.wav`.
    #[arg(long)]
    pub input: PathBuf,
    /// Output path.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    /// JSON list of song-type specs; defaults to the eight-type desk corpus.
    #[arg(long)]
    pub spec: Option<PathBuf>,
    #[arg(long, default_value_t = 50)]
    pub instances: usize,
    #[arg(long, default_value_t = 0.05)]
    pub noise: f32,
    /// Output path.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Training config (JSON); merged over the preset.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Spectrogram container.
    #[arg(long)]
    pub data: PathBuf,
    /// Output path.
    #[arg(long)]
    pub out: PathBuf,
    /// Checkpoint to resume from.
    #[arg(long)]
    pub resume: Option<PathBuf>,
    /// Overrides the number of training steps.
    #[arg(long)]
    pub steps: Option<u64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub learning_rate: Option<f64>,
}

#[derive(Debug, Args)]
pub struct EmbedArgs {
    /// Model checkpoint (`last.ckpt` or `best.ckpt`).
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Spectrogram container.
    #[arg(long)]
    pub data: PathBuf,
    /// Output path.
    #[arg(long)]
    pub out: PathBuf,
    /// Segment-shuffle the local-encoder input before encoding.
    #[arg(long)]
    pub shuffled: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum MethodArg {
    LargestGap,
    Threshold,
}

#[derive(Debug, Args)]
pub struct AnalyzeArgs {
    /// Model checkpoint (`last.ckpt` or `best.ckpt`).
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Spectrogram container.
    #[arg(long)]
    pub data: PathBuf,
    /// Report path; the two unit plots are written next to it.
    /// Output path.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, value_enum, default_value = "largest-gap")]
    pub method: MethodArg,
    #[arg(long, default_value_t = 1.0)]
    pub tau: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ModeArg {
    Full,
    ZeroLocal,
    Traverse,
}

#[derive(Debug, Args)]
pub struct ProbeArgs {
    /// Model checkpoint (`last.ckpt` or `best.ckpt`).
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Spectrogram container.
    #[arg(long)]
    pub data: PathBuf,
    /// Song id; defaults to the first song.
    #[arg(long)]
    pub song: Option<String>,
    #[arg(long, value_enum)]
    pub mode: ModeArg,
    #[arg(long)]
    pub unit: Option<usize>,
    /// Informativeness report whose selection the unit is checked against.
    #[arg(long)]
    pub units: Option<PathBuf>,
    /// Output path.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct ClusterArgs {
    #[arg(long)]
    pub embeddings: PathBuf,
    /// Cluster params (JSON); merged over the defaults.
    #[arg(long)]
    pub params: Option<PathBuf>,
    /// Restrict vectors to the units selected in this report.
    #[arg(long)]
    pub units: Option<PathBuf>,
    /// Output path.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub reduce_dim: Option<usize>,
    #[arg(long)]
    pub min_cluster_size: Option<usize>,
    #[arg(long)]
    pub min_samples: Option<usize>,
    #[arg(long)]
    pub epsilon: Option<f64>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Embeddings the parameter search runs on.
    #[arg(long)]
    pub embeddings: PathBuf,
    /// JSON lines `{song_id, label}`; defaults to each record's song type.
    #[arg(long)]
    pub labels: Option<PathBuf>,
    /// Parameter grid (JSON); merged over the default grid.
    #[arg(long)]
    pub grid: Option<PathBuf>,
    /// Separate embeddings to score with the best parameters.
    #[arg(long)]
    pub report: Option<PathBuf>,
    #[arg(long)]
    pub units: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "exclude")]
    pub noise: NoisePolicy,
    /// Output path.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct PlotArgs {
    #[arg(long)]
    pub embeddings: PathBuf,
    /// Output path.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct PipelineArgs {
    /// Pipeline config (JSON); merged over the preset.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Output path.
    #[arg(long)]
    pub out: PathBuf,
    /// Overrides the number of training steps.
    #[arg(long)]
    pub steps: Option<u64>,
}

/// Parses `argv`, runs the command and returns the process exit code:
/// 0 on success, 1 on usage or validation errors, 2 otherwise.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
        }
    };
    match dispatch(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_validation() {
                1
            } else {
                2
            }
        }
    }
}

fn preset(cli: &Cli) -> ScalePreset {
    cli.preset.unwrap_or(ScalePreset::Desk)
}

fn load_data(path: &Path) -> Result<Vec<MelSpectrogram>> {
    if !path.exists() {
        return Err(Error::Input(format!("{} does not exist", path.display())));
    }
    load_spectrograms(path)
}

fn read_json(path: &Path) -> Result<Value> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::Input(format!("{}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| Error::validation(format!("{}: {e}", path.display())))
}

fn read_units(path: &Path) -> Result<Vec<usize>> {
    let r: UnitInformativeness = serde_json::from_value(read_json(path)?)
        .map_err(|e| Error::validation(format!("{}: {e}", path.display())))?;
    Ok(r.selected_units)
}

/// Manifest path for an artifact: inside it for directories, beside it for files.
fn manifest_path(out: &Path, is_dir: bool) -> PathBuf {
    if is_dir {
        out.join("manifest.json")
    } else {
        let mut name = out.file_name().map(|n| n.to_os_string()).unwrap_or_default();
        name.push(".manifest.json");
        out.with_file_name(name)
    }
}

fn dispatch(cli: &Cli) -> Result<()> {
    let start = Instant::now();
    let mut m = RunManifest::new(command_name(&cli.command));
    let (out, is_dir) = match &cli.command {
        Command::Preprocess(a) => (preprocess(a, &mut m)?, false),
        Command::Synth(a) => (synth(cli, a, &mut m)?, false),
        Command::Train(a) => (train_cmd(cli, a, ModelKind::Dual, &mut m)?, true),
        Command::TrainBaseline(a) => (train_cmd(cli, a, ModelKind::Baseline, &mut m)?, true),
        Command::Embed(a) => (embed(a, &mut m)?, false),
        Command::AnalyzeUnits(a) => (analyze(a, &mut m)?, false),
        Command::Probe(a) => (probe(a, &mut m)?, false),
        Command::Cluster(a) => (cluster(cli, a, &mut m)?, false),
        Command::Eval(a) => (eval_cmd(cli, a, &mut m)?, false),
        Command::Plot(a) => (plot(cli, a, &mut m)?, false),
        Command::Pipeline(a) => (pipeline(cli, a, &mut m)?, true),
    };
    m.wall_time_s = start.elapsed().as_secs_f64();
    m.write(&manifest_path(&out, is_dir))
}

fn command_name(c: &Command) -> &'static str {
    match c {
        Command::Preprocess(_) => "preprocess",
        Command::Synth(_) => "synth",
        Command::Train(_) => "train",
        Command::TrainBaseline(_) => "train-baseline",
        Command::Embed(_) => "embed",
        Command::AnalyzeUnits(_) => "analyze-units",
        Command::Probe(_) => "probe",
        Command::Cluster(_) => "cluster",
        Command::Eval(_) => "eval",
        Command::Plot(_) => "plot",
        Command::Pipeline(_) => "pipeline",
    }
}

fn preprocess(a: &PreprocessArgs, m: &mut RunManifest) -> Result<PathBuf> {
    let mut files = Vec::new();
    let dirs = |p: &Path| -> Result<Vec<PathBuf>> {
        let mut v: Vec<PathBuf> = std::fs::read_dir(p)
            .map_err(|e| Error::Input(format!("{}: {e}", p.display())))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .collect();
        v.sort();
        Ok(v)
    };
    for ind in dirs(&a.input)?.into_iter().filter(|p| p.is_dir()) {
        for ty in dirs(&ind)?.into_iter().filter(|p| p.is_dir()) {
            for f in dirs(&ty)? {
                if f.extension().is_some_and(|e| e.eq_ignore_ascii_case("wav")) {
                    files.push((ind.clone(), ty.clone(), f));
                }
            }
        }
    }
    if files.is_empty() {
        return Err(Error::validation(format!("no WAV files under {}/<individual>/<song_type>/", a.input.display())));
    }
    let name = |p: &Path| p.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    let mut specs = Vec::new();
    for (ind, ty, f) in &files {
        let clip = load_and_resample(f)?;
        let mut s = mel_transform(&clip)?;
        s.id = format!("{}/{}/{}", name(ind), name(ty), name(f));
        s.individual_id = name(ind);
        s.song_type = name(ty);
        specs.push(s);
        m.add_input(f)?;
    }
    let total = specs.len();
    let kept = filter_by_length(specs);
    log::info!("kept {} of {total} spectrograms within the length range", kept.len());
    save_spectrograms(&a.out, &kept)?;
    m.config = serde_json::json!({ "input": a.input, "kept": kept.len(), "total": total });
    m.add_artifact(&a.out);
    Ok(a.out.clone())
}

fn synth(cli: &Cli, a: &SynthArgs, m: &mut RunManifest) -> Result<PathBuf> {
    let seed = cli.seed.unwrap_or(0);
    let specs: Vec<SyntheticSongSpec> = match &a.spec {
        Some(p) => {
            m.add_input(p)?;
            serde_json::from_value(read_json(p)?).map_err(|e| Error::validation(format!("{}: {e}", p.display())))?
        }
        None => desk_corpus_spec(a.instances, a.noise),
    };
    let corpus = generate_synthetic_corpus(&specs, seed)?;
    save_spectrograms(&a.out, &corpus)?;
    m.seeds.insert("synth".into(), seed);
    m.config = serde_json::to_value(&specs)?;
    m.add_artifact(&a.out);
    Ok(a.out.clone())
}

/// Preset, then config file, then flags.
fn training_config(cli: &Cli, a: &TrainArgs) -> Result<TrainingConfig> {
    let mut cfg: TrainingConfig = load_config(&TrainingConfig::preset(preset(cli)), a.config.as_deref())?;
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(s) = a.steps {
        cfg.total_steps = s;
    }
    if let Some(b) = a.batch_size {
        cfg.batch_size = b;
    }
    if let Some(lr) = a.learning_rate {
        cfg.optimizer.learning_rate = lr;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn train_cmd(cli: &Cli, a: &TrainArgs, kind: ModelKind, m: &mut RunManifest) -> Result<PathBuf> {
    let cfg = training_config(cli, a)?;
    let corpus = load_data(&a.data)?;
    m.add_input(&a.data)?;
    let split = split_by_individual(&corpus, SplitFractions::default(), cfg.seed)?;
    std::fs::create_dir_all(&a.out)?;
    write_report(&a.out.join("split.json"), &split)?;
    write_report(&a.out.join("config.json"), &cfg)?;
    let tr = DatasetSplit::select(&corpus, &split.train);
    let va = DatasetSplit::select(&corpus, &split.val);
    let opts = RunOptions { out_dir: Some(a.out.clone()), resume: a.resume.clone(), stop_at: None };
    if let Some(r) = &a.resume {
        m.add_input(r)?;
    }
    match kind {
        ModelKind::Dual => {
            let run = train::train(&cfg, &tr, &va, &opts)?;
            m.config = serde_json::json!({ "training": cfg, "param_counts": run.model.param_counts() });
        }
        ModelKind::Baseline => {
            let run = train::train_vanilla_baseline(&cfg, &tr, &va, &opts)?;
            let (enc, dec) = run.model.param_counts();
            m.config = serde_json::json!({ "training": cfg, "param_counts": { "encoder": enc, "decoder": dec } });
        }
    }
    m.seeds.insert("training".into(), cfg.seed);
    for f in [train::files::METRICS, train::files::VALIDATION, train::files::LAST, train::files::BEST, "split.json", "config.json"] {
        if a.out.join(f).exists() {
            m.add_artifact(&a.out.join(f));
        }
    }
    Ok(a.out.clone())
}

fn embed(a: &EmbedArgs, m: &mut RunManifest) -> Result<PathBuf> {
    let corpus = load_data(&a.data)?;
    let refs: Vec<&MelSpectrogram> = corpus.iter().collect();
    m.add_input(&a.data)?;
    m.add_input(&a.checkpoint)?;
    let kind = crate::model::load_checkpoint(&a.checkpoint)?.header.kind;
    let records = match kind {
        ModelKind::Dual => {
            let model = train::load_dual(&a.checkpoint)?;
            extract_embeddings(&model, &refs, a.shuffled.then_some(0))?
        }
        ModelKind::Baseline => extract_baseline_embeddings(&train::load_baseline(&a.checkpoint)?, &refs)?,
    };
    write_embeddings(&a.out, &records)?;
    m.config = serde_json::json!({ "shuffled": a.shuffled, "records": records.len() });
    m.add_artifact(&a.out);
    Ok(a.out.clone())
}

fn analyze(a: &AnalyzeArgs, m: &mut RunManifest) -> Result<PathBuf> {
    let corpus = load_data(&a.data)?;
    let refs: Vec<&MelSpectrogram> = corpus.iter().collect();
    m.add_input(&a.data)?;
    m.add_input(&a.checkpoint)?;
    let model = train::load_dual(&a.checkpoint)?;
    let method = match a.method {
        MethodArg::LargestGap => SelectionMethod::LargestGap,
        MethodArg::Threshold => SelectionMethod::Threshold { tau: a.tau },
    };
    let report = unit_informativeness(&model, &refs, method)?;
    write_report(&a.out, &report)?;
    let (scatter, bars) = write_unit_plots(&report, a.out.parent().unwrap_or(Path::new(".")))?;
    m.config = serde_json::to_value(method)?;
    for p in [&a.out, &scatter, &bars] {
        m.add_artifact(p);
    }
    Ok(a.out.clone())
}

fn probe(a: &ProbeArgs, m: &mut RunManifest) -> Result<PathBuf> {
    let corpus = load_data(&a.data)?;
    m.add_input(&a.data)?;
    m.add_input(&a.checkpoint)?;
    let model = train::load_dual(&a.checkpoint)?;
    let song = match &a.song {
        Some(id) => corpus.iter().find(|s| &s.id == id).ok_or_else(|| Error::validation(format!("no song '{id}'")))?,
        None => corpus.first().ok_or_else(|| Error::validation("empty corpus"))?,
    };
    let selected = match &a.units {
        Some(p) => {
            m.add_input(p)?;
            read_units(p)?
        }
        None => Vec::new(),
    };
    let mode = match a.mode {
        ModeArg::Full => ProbeMode::Full,
        ModeArg::ZeroLocal => ProbeMode::ZeroLocal,
        ModeArg::Traverse => {
            let unit = a.unit.ok_or_else(|| Error::validation("--mode traverse needs --unit"))?;
            if a.units.is_none() {
                log::warn!("no --units report given; unit {unit} is not checked against a selection");
            }
            ProbeMode::Traverse { unit }
        }
    };
    let mut images = reconstruct_probe(&model, song, mode, if a.units.is_some() { &selected } else { &[] })?;
    let original = crate::analysis::ProbeImage {
        label: "input".into(),
        n_mels: song.n_mels,
        n_frames: song.n_frames,
        values: song.values.clone(),
    };
    images.insert(0, original);
    write_probe_grid(&images, &a.out)?;
    m.config = serde_json::json!({ "song": song.id, "mode": mode });
    m.add_artifact(&a.out);
    Ok(a.out.clone())
}

fn load_records(path: &Path, units: Option<&Path>, m: &mut RunManifest) -> Result<Vec<crate::analysis::EmbeddingRecord>> {
    m.add_input(path)?;
    let recs = read_embeddings(path)?;
    match units {
        Some(u) => {
            m.add_input(u)?;
            compress_embeddings(&recs, &read_units(u)?)
        }
        None => Ok(recs),
    }
}

fn cluster(cli: &Cli, a: &ClusterArgs, m: &mut RunManifest) -> Result<PathBuf> {
    let recs = load_records(&a.embeddings, a.units.as_deref(), m)?;
    let mut p: ClusterParams = load_config(&ClusterParams::default(), a.params.as_deref())?;
    if let Some(s) = cli.seed {
        p.seed = s;
    }
    p.reduce_dim = a.reduce_dim.unwrap_or(p.reduce_dim);
    p.min_cluster_size = a.min_cluster_size.unwrap_or(p.min_cluster_size);
    p.min_samples = a.min_samples.unwrap_or(p.min_samples);
    p.cluster_selection_epsilon = a.epsilon.unwrap_or(p.cluster_selection_epsilon);
    let vectors: Vec<Vec<f64>> = recs.iter().map(|r| r.vector.clone()).collect();
    let r = reduce_and_cluster(&vectors, &p, &ReferenceBackend::default())?;
    let labels: Vec<&str> = recs.iter().map(|r| r.song_type.as_str()).collect();
    let nmi = labels.iter().any(|l| !l.is_empty()).then(|| nmi_with_noise(&labels, &r.assignments, NoisePolicy::Exclude)).transpose()?;
    let assignments: Vec<Value> = recs
        .iter()
        .zip(&r.assignments)
        .map(|(rec, c)| serde_json::json!({ "song_id": rec.song_id, "cluster": c }))
        .collect();
    let mut out = serde_json::to_value(ClusterReport::new(&r, nmi))?;
    out["assignments"] = Value::Array(assignments);
    write_report(&a.out, &out)?;
    m.seeds.insert("reducer".into(), p.seed);
    m.config = serde_json::to_value(&p)?;
    m.add_artifact(&a.out);
    Ok(a.out.clone())
}

fn labels_for(recs: &[crate::analysis::EmbeddingRecord], path: Option<&Path>) -> Result<Vec<String>> {
    let Some(p) = path else {
        return Ok(recs.iter().map(|r| r.song_type.clone()).collect());
    };
    #[derive(serde::Deserialize)]
    #[serde(deny_unknown_fields)]
    struct Row {
        song_id: String,
        label: String,
    }
    let text = std::fs::read_to_string(p).map_err(|e| Error::Input(format!("{}: {e}", p.display())))?;
    let mut map = std::collections::BTreeMap::new();
    for (i, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let r: Row = serde_json::from_str(line).map_err(|e| Error::validation(format!("{} line {}: {e}", p.display(), i + 1)))?;
        map.insert(r.song_id, r.label);
    }
    recs.iter()
        .map(|r| map.get(&r.song_id).cloned().ok_or_else(|| Error::validation(format!("no label for '{}'", r.song_id))))
        .collect()
}

fn eval_cmd(cli: &Cli, a: &EvalArgs, m: &mut RunManifest) -> Result<PathBuf> {
    let search = load_records(&a.embeddings, a.units.as_deref(), m)?;
    if let Some(l) = &a.labels {
        m.add_input(l)?;
    }
    let search_labels = labels_for(&search, a.labels.as_deref())?;
    let mut grid: ParamGrid = load_config(&ParamGrid::default(), a.grid.as_deref())?;
    if let Some(s) = cli.seed {
        grid.seed = s;
    }
    let backend = ReferenceBackend::default();
    let v: Vec<Vec<f64>> = search.iter().map(|r| r.vector.clone()).collect();
    let found = search_cluster_params(&v, &search_labels, &grid, &backend, a.noise)?;
    let reported = match &a.report {
        Some(p) => {
            let rep = load_records(p, a.units.as_deref(), m)?;
            let labels = labels_for(&rep, a.labels.as_deref())?;
            let v: Vec<Vec<f64>> = rep.iter().map(|r| r.vector.clone()).collect();
            let r = reduce_and_cluster(&v, &found.best.params, &backend)?;
            let nmi = nmi_with_noise(&labels, &r.assignments, a.noise)?;
            ClusterReport::new(&r, Some(nmi))
        }
        None => ClusterReport {
            params: found.best.params.clone(),
            n_clusters: found.best.n_clusters,
            noise_fraction: found.best.noise_fraction,
            nmi: Some(found.best.nmi),
        },
    };
    let mut out = serde_json::to_value(&reported)?;
    out["search"] = serde_json::to_value(&found)?;
    write_report(&a.out, &out)?;
    m.seeds.insert("reducer".into(), grid.seed);
    m.config = serde_json::json!({ "grid": grid, "noise": a.noise });
    m.add_artifact(&a.out);
    Ok(a.out.clone())
}

fn plot(cli: &Cli, a: &PlotArgs, m: &mut RunManifest) -> Result<PathBuf> {
    let recs = load_records(&a.embeddings, None, m)?;
    let v: Vec<Vec<f64>> = recs.iter().map(|r| r.vector.clone()).collect();
    let l: Vec<String> = recs.iter().map(|r| r.song_type.clone()).collect();
    let seed = cli.seed.unwrap_or(0);
    emit_projection_plot(&v, &l, &a.out, seed)?;
    m.seeds.insert("projection".into(), seed);
    m.add_artifact(&a.out);
    Ok(a.out.clone())
}

fn pipeline(cli: &Cli, a: &PipelineArgs, m: &mut RunManifest) -> Result<PathBuf> {
    let base = PipelineConfig { training: TrainingConfig::preset(preset(cli)), ..PipelineConfig::desk(0) };
    let mut cfg: PipelineConfig = load_config(&base, a.config.as_deref())?;
    if let Some(p) = &a.config {
        m.add_input(p)?;
    }
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(s) = a.steps {
        cfg.training.total_steps = s;
    }
    let cfg = cfg.seeded();
    std::fs::create_dir_all(&a.out)?;
    write_report(&a.out.join("config.json"), &cfg)?;
    let report = run_pipeline(&cfg, &a.out, &ReferenceBackend::default())?;
    println!("{}", serde_json::to_string_pretty(&report)?);
    m.seeds.insert("pipeline".into(), cfg.seed);
    m.config = serde_json::to_value(&cfg)?;
    m.collect_artifacts(&a.out)?;
    Ok(a.out.clone())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn no_arguments_is_usage_error() {
        assert_eq!(run(["songdisc"]), 1);
        assert_eq!(run(["songdisc", "frobnicate"]), 1);
        assert_eq!(run(["songdisc", "--help"]), 0);
    }

    #[test]
    fn manifest_paths() {
        assert_eq!(manifest_path(Path::new("a/b.jsonl"), false), PathBuf::from("a/b.jsonl.manifest.json"));
        assert_eq!(manifest_path(Path::new("run"), true), PathBuf::from("run/manifest.json"));
    }
}
