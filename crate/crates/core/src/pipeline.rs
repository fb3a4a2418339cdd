//! The desk-scale end-to-end experiment: synthesize a corpus, train the
//! dual-encoder model and the baseline, embed held-out individuals, rank
//! units, and score clusterings against song-type labels.
//!
//! Held-out songs (validation and test individuals) are halved within each
//! song type: clustering parameters are searched on the first half and the
//! reported NMI comes from the second.

use std::collections::BTreeMap;
use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::analysis::{
    compress_embeddings, extract_baseline_embeddings, extract_embeddings, jaccard, reconstruct_probe,
    unit_informativeness, write_embeddings, write_probe_grid, write_report, EmbeddingRecord, ProbeMode,
    SelectionMethod, UnitInformativeness, TRAVERSAL,
};
use crate::data::{
    desk_corpus_spec, generate_synthetic_corpus, save_spectrograms, split_by_individual, DatasetSplit,
    MelSpectrogram, SplitFractions,
};
use crate::eval::{
    emit_projection_plot, nmi_with_noise, reduce_and_cluster, search_cluster_params, ClusterBackend, ClusterReport,
    GridScore, NoisePolicy, ParamGrid,
};
use crate::model::ParamCounts;
use crate::train::{self, RunOptions, TrainingConfig, CONFIG_SCHEMA_VERSION};
use crate::{Error, Result};

/// Synthetic corpus settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorpusConfig {
    pub instances_per_type: usize,
    pub noise_level: f32,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self { instances_per_type: 50, noise_level: 0.05 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    pub schema_version: u32,
    /// Overrides the seeds of the corpus, split, training and reducer.
    pub seed: u64,
    pub corpus: CorpusConfig,
    pub split: SplitFractions,
    pub training: TrainingConfig,
    pub grid: ParamGrid,
    pub noise_policy: NoisePolicy,
    pub selection: SelectionMethod,
    /// Held-out songs used for the traversal probes.
    pub probe_songs: usize,
    /// Feed the local encoder segment-shuffled input at extraction time.
    pub extract_shuffled: bool,
}

impl PipelineConfig {
    pub fn desk(seed: u64) -> Self {
        Self {
            schema_version: CONFIG_SCHEMA_VERSION,
            seed,
            corpus: CorpusConfig::default(),
            split: SplitFractions::default(),
            training: TrainingConfig::desk(),
            grid: ParamGrid::default(),
            noise_policy: NoisePolicy::Exclude,
            selection: SelectionMethod::LargestGap,
            probe_songs: 20,
            extract_shuffled: false,
        }
    }

    /// Copy with every component seed set from `self.seed`.
    pub fn seeded(&self) -> Self {
        let mut c = self.clone();
        c.training.seed = self.seed;
        c.grid.seed = self.seed;
        c
    }
}

/// Search-half optimum and the report-half score of one embedding set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredEmbedding {
    pub search: GridScore,
    pub report: ClusterReport,
}

impl ScoredEmbedding {
    pub fn nmi(&self) -> f64 {
        self.report.nmi.unwrap_or(0.0)
    }
}

/// Mean Frobenius change of the reconstruction when one unit is traversed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraversalEffect {
    pub top_unit: usize,
    pub bottom_unit: usize,
    pub top_change: f64,
    pub bottom_change: f64,
    pub songs: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineReport {
    pub seed: u64,
    pub train_songs: usize,
    pub search_songs: usize,
    pub report_songs: usize,
    pub held_out_types: Vec<String>,
    pub dual: ScoredEmbedding,
    pub compressed: Option<ScoredEmbedding>,
    pub baseline: ScoredEmbedding,
    pub selected_units: Vec<usize>,
    /// Jaccard index of selections made on the two halves of the search set.
    pub selection_stability: f64,
    pub traversal: Option<TraversalEffect>,
    pub dual_params: ParamCounts,
    pub baseline_params: (usize, usize),
}

/// Output names inside a pipeline directory.
pub mod files {
    pub const CORPUS: &str = "corpus.sdc";
    pub const SPLIT: &str = "split.json";
    pub const DUAL_DIR: &str = "dual";
    pub const BASELINE_DIR: &str = "baseline";
    pub const EMBEDDINGS: &str = "embeddings.jsonl";
    pub const BASELINE_EMBEDDINGS: &str = "embeddings_baseline.jsonl";
    pub const UNITS: &str = "units.json";
    pub const RESULTS: &str = "results.json";
    pub const PROJECTION: &str = "projection.png";
    pub const BASELINE_PROJECTION: &str = "projection_baseline.png";
    pub const PROBE: &str = "probe.png";
}

/// Splits held-out indices into (search, report) halves, alternating within
/// each song type in corpus order.
pub fn halve_by_type(specs: &[MelSpectrogram], held_out: &[usize]) -> (Vec<usize>, Vec<usize>) {
    let mut seen: BTreeMap<&str, usize> = BTreeMap::new();
    let (mut a, mut b) = (Vec::new(), Vec::new());
    for &i in held_out {
        let k = seen.entry(specs[i].song_type.as_str()).or_default();
        if (*k).is_multiple_of(2) {
            a.push(i);
        } else {
            b.push(i);
        }
        *k += 1;
    }
    (a, b)
}

fn vectors(r: &[EmbeddingRecord]) -> Vec<Vec<f64>> {
    r.iter().map(|e| e.vector.clone()).collect()
}

fn labels(r: &[EmbeddingRecord]) -> Vec<String> {
    r.iter().map(|e| e.song_type.clone()).collect()
}

/// Searches parameters on `search` and scores them on `report`.
pub fn score_embeddings(
    search: &[EmbeddingRecord],
    report: &[EmbeddingRecord],
    grid: &ParamGrid,
    backend: &dyn ClusterBackend,
    noise: NoisePolicy,
) -> Result<ScoredEmbedding> {
    let found = search_cluster_params(&vectors(search), &labels(search), grid, backend, noise)?;
    let r = reduce_and_cluster(&vectors(report), &found.best.params, backend)?;
    let nmi = nmi_with_noise(&labels(report), &r.assignments, noise)?;
    Ok(ScoredEmbedding { search: found.best, report: ClusterReport::new(&r, Some(nmi)) })
}

/// Mean over songs and traversal values of the Frobenius distance between
/// the traversed and the full reconstruction.
pub fn traversal_change(model: &crate::model::DualVae, songs: &[&MelSpectrogram], unit: usize) -> Result<f64> {
    let mut total = 0.0;
    for s in songs {
        let full = reconstruct_probe(model, s, ProbeMode::Full, &[unit])?.remove(0);
        let trav = reconstruct_probe(model, s, ProbeMode::Traverse { unit }, &[unit])?;
        total += trav.iter().map(|t| t.distance(&full)).sum::<f64>() / TRAVERSAL.len() as f64;
    }
    Ok(total / songs.len().max(1) as f64)
}

fn top_and_bottom(report: &UnitInformativeness) -> (usize, usize) {
    let kl = &report.mean_kl;
    let mut order: Vec<usize> = (0..kl.len()).collect();
    order.sort_by(|&a, &b| kl[b].total_cmp(&kl[a]).then(a.cmp(&b)));
    (order[0], *order.last().unwrap_or(&0))
}

/// Runs the full experiment, writing every artifact under `out`.
pub fn run_pipeline(config: &PipelineConfig, out: &Path, backend: &dyn ClusterBackend) -> Result<PipelineReport> {
    let cfg = config.seeded();
    if cfg.schema_version != CONFIG_SCHEMA_VERSION {
        return Err(Error::validation(format!("unsupported pipeline config schema {}", cfg.schema_version)));
    }
    cfg.training.validate()?;
    std::fs::create_dir_all(out)?;
    let clock = Instant::now();

    let specs = desk_corpus_spec(cfg.corpus.instances_per_type, cfg.corpus.noise_level);
    let corpus = generate_synthetic_corpus(&specs, cfg.seed)?;
    save_spectrograms(&out.join(files::CORPUS), &corpus)?;
    let split = split_by_individual(&corpus, cfg.split, cfg.seed)?;
    write_report(&out.join(files::SPLIT), &split)?;
    let train_set = DatasetSplit::select(&corpus, &split.train);
    let val_set = DatasetSplit::select(&corpus, &split.val);

    let dual_dir = out.join(files::DUAL_DIR);
    let run = train::train(&cfg.training, &train_set, &val_set, &RunOptions { out_dir: Some(dual_dir), ..Default::default() })?;
    log::info!("dual model trained in {:.0}s", clock.elapsed().as_secs_f64());
    let base_dir = out.join(files::BASELINE_DIR);
    let base = train::train_vanilla_baseline(
        &cfg.training,
        &train_set,
        &val_set,
        &RunOptions { out_dir: Some(base_dir), ..Default::default() },
    )?;
    log::info!("baseline trained at {:.0}s", clock.elapsed().as_secs_f64());

    let held = split.held_out();
    let (search_idx, report_idx) = halve_by_type(&corpus, &held);
    let all: Vec<&MelSpectrogram> = corpus.iter().collect();
    let shuffle = cfg.extract_shuffled.then_some(cfg.seed);
    let emb = extract_embeddings(&run.model, &all, shuffle)?;
    write_embeddings(&out.join(files::EMBEDDINGS), &emb)?;
    let base_emb = extract_baseline_embeddings(&base.model, &all)?;
    write_embeddings(&out.join(files::BASELINE_EMBEDDINGS), &base_emb)?;
    let pick = |r: &[EmbeddingRecord], idx: &[usize]| idx.iter().map(|&i| r[i].clone()).collect::<Vec<_>>();

    let search_songs = DatasetSplit::select(&corpus, &search_idx);
    let units = unit_informativeness(&run.model, &search_songs, cfg.selection)?;
    write_report(&out.join(files::UNITS), &units)?;
    let (h1, h2): (Vec<&MelSpectrogram>, Vec<&MelSpectrogram>) = {
        let (a, b) = halve_by_type(&corpus, &search_idx);
        (DatasetSplit::select(&corpus, &a), DatasetSplit::select(&corpus, &b))
    };
    let stability = jaccard(
        &unit_informativeness(&run.model, &h1, cfg.selection)?.selected_units,
        &unit_informativeness(&run.model, &h2, cfg.selection)?.selected_units,
    );

    let noise = cfg.noise_policy;
    let dual = score_embeddings(&pick(&emb, &search_idx), &pick(&emb, &report_idx), &cfg.grid, backend, noise)?;
    let compressed = if units.selected_units.is_empty() {
        None
    } else {
        let c = compress_embeddings(&emb, &units.selected_units)?;
        Some(score_embeddings(&pick(&c, &search_idx), &pick(&c, &report_idx), &cfg.grid, backend, noise)?)
    };
    let baseline =
        score_embeddings(&pick(&base_emb, &search_idx), &pick(&base_emb, &report_idx), &cfg.grid, backend, noise)?;
    log::info!(
        "NMI dual {:.3} compressed {:?} baseline {:.3}",
        dual.nmi(),
        compressed.as_ref().map(|c| c.nmi()),
        baseline.nmi()
    );

    let held_records = pick(&emb, &held);
    emit_projection_plot(&vectors(&held_records), &labels(&held_records), &out.join(files::PROJECTION), cfg.seed)?;
    let held_base = pick(&base_emb, &held);
    emit_projection_plot(&vectors(&held_base), &labels(&held_base), &out.join(files::BASELINE_PROJECTION), cfg.seed)?;

    let probe_set: Vec<&MelSpectrogram> = held.iter().take(cfg.probe_songs).map(|&i| &corpus[i]).collect();
    let traversal = if probe_set.is_empty() || units.mean_kl.len() < 2 {
        None
    } else {
        let (top, bottom) = top_and_bottom(&units);
        let grid = reconstruct_probe(&run.model, probe_set[0], ProbeMode::Traverse { unit: top }, &units.selected_units)?;
        write_probe_grid(&grid, &out.join(files::PROBE))?;
        Some(TraversalEffect {
            top_unit: top,
            bottom_unit: bottom,
            top_change: traversal_change(&run.model, &probe_set, top)?,
            bottom_change: traversal_change(&run.model, &probe_set, bottom)?,
            songs: probe_set.len(),
        })
    };

    let mut held_out_types: Vec<String> = held.iter().map(|&i| corpus[i].song_type.clone()).collect();
    held_out_types.dedup();
    let report = PipelineReport {
        seed: cfg.seed,
        train_songs: split.train.len(),
        search_songs: search_idx.len(),
        report_songs: report_idx.len(),
        held_out_types,
        dual,
        compressed,
        baseline,
        selected_units: units.selected_units.clone(),
        selection_stability: stability,
        traversal,
        dual_params: run.model.param_counts(),
        baseline_params: base.model.param_counts(),
    };
    write_report(&out.join(files::RESULTS), &report)?;
    log::info!("pipeline finished in {:.0}s", clock.elapsed().as_secs_f64());
    Ok(report)
}
