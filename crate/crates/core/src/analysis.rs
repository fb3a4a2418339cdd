//! Embedding extraction, per-unit KL informativeness, compression and
//! reconstruction probes on a trained dual-encoder model.

use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use candle_core::{DType, Device, Tensor};
use image::{GrayImage, Luma, Rgb, RgbImage};
use serde::{Deserialize, Serialize};

use crate::data::MelSpectrogram;
use crate::model::{Batch, DualVae, VanillaVae};
use crate::objective::gaussian_kl_per_unit;
use crate::seed;
use crate::{Error, Result};

/// KL (nats) below which every unit counts as uninformative.
pub const NEGLIGIBLE_KL: f64 = 1e-4;
/// Smallest descending KL ratio accepted as a gap.
pub const MIN_GAP_RATIO: f64 = 2.0;
/// Threshold used when no gap is found.
pub const FALLBACK_THRESHOLD: f64 = 1.0;
/// Traversal offsets in prior standard deviations.
pub const TRAVERSAL: [f64; 5] = [-3.0, -1.5, 0.0, 1.5, 3.0];

/// One song's embedding: the local posterior mean.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingRecord {
    pub song_id: String,
    pub individual_id: String,
    pub song_type: String,
    pub vector: Vec<f64>,
}

fn check_bands(specs: &[&MelSpectrogram], n_mels: usize) -> Result<()> {
    if let Some(s) = specs.iter().find(|s| s.n_mels != n_mels) {
        return Err(Error::validation(format!(
            "spectrogram '{}' has {} bands but the model expects {n_mels}",
            s.id, s.n_mels
        )));
    }
    Ok(())
}

fn record(s: &MelSpectrogram, vector: Vec<f64>) -> Result<EmbeddingRecord> {
    if vector.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric(format!("non-finite embedding for '{}'", s.id)));
    }
    Ok(EmbeddingRecord {
        song_id: s.id.clone(),
        individual_id: s.individual_id.clone(),
        song_type: s.song_type.clone(),
        vector,
    })
}

fn row(t: &Tensor) -> Result<Vec<f64>> {
    Ok(t.to_dtype(DType::F64)?.flatten_all()?.to_vec1::<f64>()?)
}

/// Local posterior of one song, optionally segment-shuffled first.
fn local_posterior(model: &DualVae, s: &MelSpectrogram, shuffle: Option<u64>) -> Result<crate::model::DiagonalGaussian> {
    let batch = match shuffle {
        Some(sd) => Batch::shuffled(&[s], model.config.segment_len, &[sd], model.dtype())?,
        None => Batch::unshuffled(&[s], model.dtype())?,
    };
    model.encode_local(&batch)
}

/// Posterior-mean local embeddings, one song at a time so each vector depends
/// only on the model and its own spectrogram. With `shuffle_seed` the local
/// encoder sees a segment-shuffled copy, as during training.
pub fn extract_embeddings(model: &DualVae, specs: &[&MelSpectrogram], shuffle_seed: Option<u64>) -> Result<Vec<EmbeddingRecord>> {
    check_bands(specs, model.config.n_mels)?;
    specs
        .iter()
        .enumerate()
        .map(|(i, s)| {
            let sd = shuffle_seed.map(|sd| seed::derive(sd, &[i as u64]));
            record(s, row(&local_posterior(model, s, sd)?.mean)?)
        })
        .collect()
}

/// Posterior-mean embeddings of the single-encoder baseline.
pub fn extract_baseline_embeddings(model: &VanillaVae, specs: &[&MelSpectrogram]) -> Result<Vec<EmbeddingRecord>> {
    check_bands(specs, model.config.n_mels)?;
    specs
        .iter()
        .map(|s| {
            let batch = Batch::unshuffled(&[*s], model.dtype())?;
            record(s, row(&model.encode(&batch, false)?.mean)?)
        })
        .collect()
}

pub fn write_embeddings(path: &Path, records: &[EmbeddingRecord]) -> Result<()> {
    let mut buf = Vec::new();
    for r in records {
        serde_json::to_writer(&mut buf, r)?;
        buf.push(b'\n');
    }
    crate::io_util::write_atomic(path, &buf)
}

pub fn read_embeddings(path: &Path) -> Result<Vec<EmbeddingRecord>> {
    let f = std::fs::File::open(path).map_err(|e| Error::Input(format!("{}: {e}", path.display())))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let r: EmbeddingRecord = serde_json::from_str(&line)
            .map_err(|e| Error::format(format!("{} line {}: {e}", path.display(), i + 1)))?;
        out.push(r);
    }
    Ok(out)
}

/// How informative units are picked from their mean KL.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "method")]
pub enum SelectionMethod {
    /// Cut the descending KL list at its largest consecutive ratio.
    #[default]
    LargestGap,
    /// Keep units whose mean KL exceeds `tau` nats.
    Threshold { tau: f64 },
}

/// Dataset-averaged statistics of each local unit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UnitInformativeness {
    pub mean_kl: Vec<f64>,
    pub mean_mu: Vec<f64>,
    pub mean_variance: Vec<f64>,
    pub selected_units: Vec<usize>,
    pub method: SelectionMethod,
    pub songs: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub warning: Option<String>,
}

/// Indices picked by [`select_informative_units`] plus any warning raised.
#[derive(Debug, Clone, PartialEq)]
pub struct Selection {
    pub units: Vec<usize>,
    pub warning: Option<String>,
}

fn threshold(kl: &[f64], tau: f64) -> Vec<usize> {
    (0..kl.len()).filter(|&i| kl[i] > tau).collect()
}

/// Selects informative units; the result is sorted ascending.
pub fn select_informative_units(mean_kl: &[f64], method: SelectionMethod) -> Selection {
    if mean_kl.iter().all(|&k| k < NEGLIGIBLE_KL) {
        let warning = "every unit has negligible KL; nothing selected".to_string();
        log::warn!("{warning}");
        return Selection { units: Vec::new(), warning: Some(warning) };
    }
    match method {
        SelectionMethod::Threshold { tau } => Selection { units: threshold(mean_kl, tau), warning: None },
        SelectionMethod::LargestGap => {
            let mut order: Vec<usize> = (0..mean_kl.len()).collect();
            order.sort_by(|&a, &b| mean_kl[b].total_cmp(&mean_kl[a]).then(a.cmp(&b)));
            let floor = f64::MIN_POSITIVE;
            let (mut best, mut cut) = (0.0, 0);
            for i in 0..order.len().saturating_sub(1) {
                let r = mean_kl[order[i]].max(floor) / mean_kl[order[i + 1]].max(floor);
                if r > best {
                    best = r;
                    cut = i + 1;
                }
            }
            if best <= MIN_GAP_RATIO {
                let warning = format!(
                    "no KL gap above ratio {MIN_GAP_RATIO} (largest {best:.3}); using threshold {FALLBACK_THRESHOLD} nats"
                );
                log::warn!("{warning}");
                return Selection { units: threshold(mean_kl, FALLBACK_THRESHOLD), warning: Some(warning) };
            }
            let mut units = order[..cut].to_vec();
            units.sort();
            Selection { units, warning: None }
        }
    }
}

/// Per-song per-unit KL of the unshuffled local posterior.
pub fn per_song_unit_kl(model: &DualVae, specs: &[&MelSpectrogram]) -> Result<Vec<Vec<f64>>> {
    check_bands(specs, model.config.n_mels)?;
    specs
        .iter()
        .map(|s| Ok(gaussian_kl_per_unit(&local_posterior(model, s, None)?)?.remove(0)))
        .collect()
}

/// Averages per-unit KL, posterior mean and posterior variance over `specs`
/// and applies `method`.
pub fn unit_informativeness(model: &DualVae, specs: &[&MelSpectrogram], method: SelectionMethod) -> Result<UnitInformativeness> {
    if specs.is_empty() {
        return Err(Error::validation("informativeness needs at least one spectrogram"));
    }
    check_bands(specs, model.config.n_mels)?;
    let d = model.config.local_dim;
    let (mut kl, mut mu, mut var) = (vec![0.0; d], vec![0.0; d], vec![0.0; d]);
    for s in specs {
        let q = local_posterior(model, s, None)?;
        let k = gaussian_kl_per_unit(&q)?.remove(0);
        let m = row(&q.mean)?;
        let v = row(&q.log_var.exp()?)?;
        for u in 0..d {
            kl[u] += k[u];
            mu[u] += m[u];
            var[u] += v[u];
        }
    }
    let n = specs.len() as f64;
    for xs in [&mut kl, &mut mu, &mut var] {
        xs.iter_mut().for_each(|x| *x /= n);
    }
    let sel = select_informative_units(&kl, method);
    Ok(UnitInformativeness {
        mean_kl: kl,
        mean_mu: mu,
        mean_variance: var,
        selected_units: sel.units,
        method,
        songs: specs.len(),
        warning: sel.warning,
    })
}

/// Restricts every vector to `units`, keeping their order.
pub fn compress_embeddings(records: &[EmbeddingRecord], units: &[usize]) -> Result<Vec<EmbeddingRecord>> {
    if units.is_empty() {
        return Err(Error::validation("cannot compress to an empty unit selection"));
    }
    records
        .iter()
        .map(|r| {
            if let Some(&u) = units.iter().find(|&&u| u >= r.vector.len()) {
                return Err(Error::validation(format!("unit {u} out of range for {}-dim embedding", r.vector.len())));
            }
            Ok(EmbeddingRecord { vector: units.iter().map(|&u| r.vector[u]).collect(), ..r.clone() })
        })
        .collect()
}

/// Jaccard index of two unit selections; 1 when both are empty.
pub fn jaccard(a: &[usize], b: &[usize]) -> f64 {
    let sa: std::collections::BTreeSet<_> = a.iter().collect();
    let sb: std::collections::BTreeSet<_> = b.iter().collect();
    let union = sa.union(&sb).count();
    if union == 0 {
        return 1.0;
    }
    sa.intersection(&sb).count() as f64 / union as f64
}

/// Reconstruction manipulation applied by [`reconstruct_probe`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "mode")]
pub enum ProbeMode {
    /// Decode both posterior means.
    Full,
    /// Decode with every local unit set to zero.
    ZeroLocal,
    /// Sweep one local unit over [`TRAVERSAL`] with the others at their means.
    Traverse { unit: usize },
}

/// One decoded spectrogram `[n_mels × T]`, row-major like [`MelSpectrogram`].
#[derive(Debug, Clone, PartialEq)]
pub struct ProbeImage {
    pub label: String,
    pub n_mels: usize,
    pub n_frames: usize,
    pub values: Vec<f32>,
}

impl ProbeImage {
    /// Frobenius distance to another image of the same shape.
    pub fn distance(&self, other: &ProbeImage) -> f64 {
        self.values.iter().zip(&other.values).map(|(a, b)| ((a - b) as f64).powi(2)).sum::<f64>().sqrt()
    }
}

/// Decodes `spec` under `mode` with posterior means, in evaluation mode.
/// A traversed unit outside `selected` only logs a warning.
pub fn reconstruct_probe(model: &DualVae, spec: &MelSpectrogram, mode: ProbeMode, selected: &[usize]) -> Result<Vec<ProbeImage>> {
    check_bands(&[spec], model.config.n_mels)?;
    let batch = Batch::unshuffled(&[spec], model.dtype())?;
    let z_g = model.encode_global(&batch, false)?.mean;
    let z_l = model.encode_local(&batch)?.mean;
    let d = model.config.local_dim;
    let decode = |label: String, zl: &Tensor| -> Result<ProbeImage> {
        let out = model.decode(&z_g, zl, &batch.mask, false)?;
        let values = out.to_dtype(DType::F32)?.flatten_all()?.to_vec1::<f32>()?;
        Ok(ProbeImage { label, n_mels: spec.n_mels, n_frames: spec.n_frames, values })
    };
    match mode {
        ProbeMode::Full => Ok(vec![decode("full".into(), &z_l)?]),
        ProbeMode::ZeroLocal => Ok(vec![decode("zero_local".into(), &z_l.zeros_like()?)?]),
        ProbeMode::Traverse { unit } => {
            if unit >= d {
                return Err(Error::validation(format!("unit {unit} out of range for {d} local units")));
            }
            if !selected.contains(&unit) {
                log::warn!("unit {unit} is not among the selected informative units");
            }
            let base = row(&z_l)?;
            TRAVERSAL
                .iter()
                .map(|&v| {
                    let mut z = base.clone();
                    z[unit] = v;
                    let zl = Tensor::from_vec(z, (1, d), &Device::Cpu)?.to_dtype(model.dtype())?;
                    decode(format!("unit{unit}_{v:+}"), &zl)
                })
                .collect()
        }
    }
}

/// Stacks images vertically (low bands at the bottom of each panel) and writes
/// a greyscale PNG scaled to the joint value range.
pub fn write_probe_grid(images: &[ProbeImage], path: &Path) -> Result<()> {
    let first = images.first().ok_or_else(|| Error::validation("no probe images to write"))?;
    let (h, w) = (first.n_mels, first.n_frames);
    if images.iter().any(|i| i.n_mels != h || i.n_frames != w) {
        return Err(Error::validation("probe images differ in shape"));
    }
    let lo = images.iter().flat_map(|i| &i.values).cloned().fold(f32::INFINITY, f32::min);
    let hi = images.iter().flat_map(|i| &i.values).cloned().fold(f32::NEG_INFINITY, f32::max);
    let span = (hi - lo).max(1e-12);
    let gap = 2u32;
    let total_h = images.len() as u32 * (h as u32 + gap) - gap;
    let mut img = GrayImage::from_pixel(w as u32, total_h, Luma([255]));
    for (k, im) in images.iter().enumerate() {
        let top = k as u32 * (h as u32 + gap);
        for band in 0..h {
            for t in 0..w {
                let v = (im.values[band * w + t] - lo) / span;
                let y = top + (h - 1 - band) as u32;
                img.put_pixel(t as u32, y, Luma([(v.clamp(0.0, 1.0) * 255.0).round() as u8]));
            }
        }
    }
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    img.save(path).map_err(|e| Error::Io(std::io::Error::other(e.to_string())))
}

/// File names written by [`write_unit_plots`].
pub const UNIT_SCATTER_PNG: &str = "unit_scatter.png";
pub const UNIT_KL_PNG: &str = "unit_kl.png";

const SELECTED: Rgb<u8> = Rgb([200, 40, 40]);
const OTHER: Rgb<u8> = Rgb([90, 90, 90]);

/// Per-unit mean-vs-variance scatter and KL bar chart, selected units in red.
pub fn write_unit_plots(report: &UnitInformativeness, dir: &Path) -> Result<(PathBuf, PathBuf)> {
    let n = report.mean_kl.len();
    if n == 0 {
        return Err(Error::validation("report has no units"));
    }
    std::fs::create_dir_all(dir)?;
    let colour = |u: usize| if report.selected_units.contains(&u) { SELECTED } else { OTHER };
    let save = |img: RgbImage, name: &str| -> Result<PathBuf> {
        let p = dir.join(name);
        img.save(&p).map_err(|e| Error::Io(std::io::Error::other(e.to_string())))?;
        Ok(p)
    };

    let (size, pad) = (320u32, 16u32);
    let span = |v: &[f64]| {
        let lo = v.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        (lo, (hi - lo).max(1e-12))
    };
    let (mx, sx) = span(&report.mean_mu);
    let (vx, sv) = span(&report.mean_variance);
    let mut scatter = RgbImage::from_pixel(size, size, Rgb([255, 255, 255]));
    let inner = (size - 2 * pad) as f64;
    for u in 0..n {
        let x = pad as f64 + (report.mean_mu[u] - mx) / sx * inner;
        let y = pad as f64 + (1.0 - (report.mean_variance[u] - vx) / sv) * inner;
        for dy in -2i64..=2 {
            for dx in -2i64..=2 {
                let (px, py) = (x.round() as i64 + dx, y.round() as i64 + dy);
                if px >= 0 && py >= 0 && (px as u32) < size && (py as u32) < size {
                    scatter.put_pixel(px as u32, py as u32, colour(u));
                }
            }
        }
    }

    let (bar_w, height) = (12u32, 200u32);
    let max_kl = report.mean_kl.iter().cloned().fold(0.0, f64::max).max(1e-12);
    let mut bars = RgbImage::from_pixel(n as u32 * (bar_w + 2) + 2, height, Rgb([255, 255, 255]));
    for u in 0..n {
        let h = ((report.mean_kl[u].max(0.0) / max_kl) * (height - 4) as f64).round() as u32;
        for x in 0..bar_w {
            for y in 0..h {
                bars.put_pixel(2 + u as u32 * (bar_w + 2) + x, height - 1 - y, colour(u));
            }
        }
    }
    Ok((save(scatter, UNIT_SCATTER_PNG)?, save(bars, UNIT_KL_PNG)?))
}

/// Writes `report` as pretty JSON.
pub fn write_report<T: Serialize>(path: &Path, report: &T) -> Result<()> {
    let mut buf = serde_json::to_vec_pretty(report)?;
    buf.write_all(b"\n")?;
    crate::io_util::write_atomic(path, &buf)
}
