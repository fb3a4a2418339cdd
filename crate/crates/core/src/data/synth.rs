//! Synthetic structured-song corpus.
//!
//! A song is a sequence of notes laid out left to right with fixed gaps.
//! Notes come in two kinds, `A` and `B`, drawn from the same template shape
//! at two frequency positions; the song's syntax pattern is cycled until the
//! instance's note count is reached. A song type is the triple
//! `(template, base frequency, syntax)`; the note count is drawn per
//! instance, so one type appears at many lengths.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{MelSpectrogram, MAX_FRAMES, MIN_FRAMES, N_MELS};
use crate::seed;
use crate::{Error, Result};

const LEAD_FRAMES: usize = 8;
const B_OFFSET_BINS: usize = 14;
const OVERTONE_OFFSET_BINS: usize = 22;
const OVERTONE_GAIN: f32 = 0.4;
const BACKGROUND: f32 = 0.1;
const PEAK: f32 = 0.8;

/// Time-frequency shape of a note.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoteTemplate {
    /// Stationary Gaussian blob.
    Blob,
    /// Rising frequency sweep.
    UpSweep,
    /// Falling frequency sweep.
    DownSweep,
    /// Rise then fall.
    Chevron,
}

impl NoteTemplate {
    /// Note duration in frames.
    pub fn length(self) -> usize {
        match self {
            NoteTemplate::Blob => 10,
            NoteTemplate::UpSweep | NoteTemplate::DownSweep => 14,
            NoteTemplate::Chevron => 18,
        }
    }

    /// Half-width in bins of the frequency excursion.
    fn excursion(self) -> f32 {
        match self {
            NoteTemplate::Blob => 0.0,
            _ => 6.0,
        }
    }

    /// Centre-frequency offset (bins) at relative time `u ∈ [0, 1]`.
    fn track(self, u: f32) -> f32 {
        let e = self.excursion();
        match self {
            NoteTemplate::Blob => 0.0,
            NoteTemplate::UpSweep => e * (2.0 * u - 1.0),
            NoteTemplate::DownSweep => e * (1.0 - 2.0 * u),
            NoteTemplate::Chevron => e * (1.0 - 2.0 * (2.0 * u - 1.0).abs()),
        }
    }

    /// Highest bin offset above the base reached by a fundamental.
    fn top_extent(self) -> usize {
        B_OFFSET_BINS + self.excursion() as usize + 3
    }
}

/// Inclusive range of notes per instance.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoteRange {
    pub min: usize,
    pub max: usize,
}

/// One song type of the synthetic corpus.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSongSpec {
    pub song_type: String,
    pub individual_id: String,
    pub note_template_id: NoteTemplate,
    pub notes_per_song: NoteRange,
    /// Silent frames between consecutive notes.
    pub note_gap: usize,
    pub base_frequency_bin: usize,
    /// Standard deviation of additive Gaussian noise, relative to the [0, 1] range.
    pub noise_level: f32,
    /// Syllable over `{A, B}`, cycled to fill the song.
    pub syntax_pattern: String,
    pub instances: usize,
}

impl SyntheticSongSpec {
    /// Frames of a song with `notes` notes.
    pub fn frames_for(&self, notes: usize) -> usize {
        let l = self.note_template_id.length();
        2 * LEAD_FRAMES + notes * l + notes.saturating_sub(1) * self.note_gap
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::validation(format!("song type '{}': {m}", self.song_type)));
        if self.syntax_pattern.is_empty() || !self.syntax_pattern.chars().all(|c| c == 'A' || c == 'B') {
            return fail(format!("syntax pattern '{}' must be a non-empty string over {{A, B}}", self.syntax_pattern));
        }
        let r = self.notes_per_song;
        if r.min == 0 || r.min > r.max {
            return fail(format!("invalid note range {}..={}", r.min, r.max));
        }
        let (lo, hi) = (self.frames_for(r.min), self.frames_for(r.max));
        if lo < MIN_FRAMES || hi > MAX_FRAMES {
            return fail(format!("lengths {lo}..={hi} frames fall outside [{MIN_FRAMES}, {MAX_FRAMES}]"));
        }
        let ex = self.note_template_id.excursion() as usize + 3;
        if self.base_frequency_bin < ex || self.base_frequency_bin + self.note_template_id.top_extent() >= N_MELS {
            return fail(format!("base bin {} leaves the band", self.base_frequency_bin));
        }
        if !(self.noise_level >= 0.0 && self.noise_level.is_finite()) {
            return fail(format!("noise level {} must be >= 0", self.noise_level));
        }
        if self.instances == 0 {
            return fail("zero instances".into());
        }
        Ok(())
    }

    /// Renders one noiseless instance with `notes` notes.
    pub fn render(&self, notes: usize) -> Vec<f32> {
        let t_total = self.frames_for(notes);
        let mut v = vec![0f32; N_MELS * t_total];
        let tmpl = self.note_template_id;
        let len = tmpl.length();
        let syntax: Vec<char> = self.syntax_pattern.chars().collect();
        let sigma_f = 1.2f32;
        for n in 0..notes {
            let start = LEAD_FRAMES + n * (len + self.note_gap);
            let base = self.base_frequency_bin as f32
                + if syntax[n % syntax.len()] == 'B' { B_OFFSET_BINS as f32 } else { 0.0 };
            for k in 0..len {
                let u = if len > 1 { k as f32 / (len - 1) as f32 } else { 0.5 };
                let env = (std::f32::consts::PI * (k as f32 + 0.5) / len as f32).sin();
                let centre = base + tmpl.track(u);
                for (gain, c) in [(1.0, centre), (OVERTONE_GAIN, centre + OVERTONE_OFFSET_BINS as f32)] {
                    for band in 0..N_MELS {
                        let d = (band as f32 - c) / sigma_f;
                        let a = gain * env * (-0.5 * d * d).exp();
                        let cell = &mut v[band * t_total + start + k];
                        *cell = cell.max(a);
                    }
                }
            }
        }
        v.iter_mut().for_each(|x| *x = BACKGROUND + PEAK * *x);
        v
    }
}

/// Generates every instance of every song type.
///
/// Instance `k` of type `j` draws its note count and noise from a stream
/// derived from `(seed, j, k)`, so output is independent of iteration order.
pub fn generate_synthetic_corpus(specs: &[SyntheticSongSpec], seed: u64) -> Result<Vec<MelSpectrogram>> {
    for s in specs {
        s.validate()?;
    }
    let mut out = Vec::with_capacity(specs.iter().map(|s| s.instances).sum());
    for (j, spec) in specs.iter().enumerate() {
        for k in 0..spec.instances {
            let mut rng = seed::rng(seed, &[seed::stream::SYNTH, j as u64, k as u64]);
            let notes = rng.random_range(spec.notes_per_song.min..=spec.notes_per_song.max);
            let mut values = spec.render(notes);
            if spec.noise_level > 0.0 {
                let noise = Normal::new(0.0f32, spec.noise_level).expect("validated noise level");
                for x in values.iter_mut() {
                    *x = (*x + noise.sample(&mut rng)).clamp(0.0, 1.0);
                }
            }
            let t = spec.frames_for(notes);
            out.push(MelSpectrogram::new(
                format!("{}-{k:03}", spec.song_type),
                spec.individual_id.clone(),
                spec.song_type.clone(),
                N_MELS,
                t,
                values,
            )?);
        }
    }
    Ok(out)
}

/// The eight-type corpus used by the desk-scale pipeline.
///
/// Pairs of types share a template and base frequency and differ only in
/// syntax, so the discriminative signal is the A/B note inventory while song
/// length varies roughly twofold within every type.
pub fn desk_corpus_spec(instances: usize, noise_level: f32) -> Vec<SyntheticSongSpec> {
    let rows: [(NoteTemplate, usize, &str, NoteRange, usize); 8] = [
        (NoteTemplate::Blob, 12, "AB", NoteRange { min: 6, max: 14 }, 6),
        (NoteTemplate::Blob, 12, "ABB", NoteRange { min: 6, max: 14 }, 6),
        (NoteTemplate::UpSweep, 18, "AB", NoteRange { min: 6, max: 12 }, 4),
        (NoteTemplate::UpSweep, 18, "AAB", NoteRange { min: 6, max: 12 }, 4),
        (NoteTemplate::DownSweep, 14, "ABAB", NoteRange { min: 6, max: 12 }, 4),
        (NoteTemplate::DownSweep, 14, "BAB", NoteRange { min: 6, max: 12 }, 4),
        (NoteTemplate::Chevron, 22, "AB", NoteRange { min: 5, max: 10 }, 4),
        (NoteTemplate::Chevron, 22, "BBA", NoteRange { min: 5, max: 10 }, 4),
    ];
    rows.iter()
        .enumerate()
        .map(|(i, &(tmpl, base, syntax, range, gap))| SyntheticSongSpec {
            song_type: format!("type{i}"),
            individual_id: format!("bird{i}"),
            note_template_id: tmpl,
            notes_per_song: range,
            note_gap: gap,
            base_frequency_bin: base,
            noise_level,
            syntax_pattern: syntax.to_string(),
            instances,
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::{BTreeMap, BTreeSet};

    #[test]
    fn desk_corpus_has_400_songs_with_varied_lengths() {
        let specs = desk_corpus_spec(50, 0.05);
        let corpus = generate_synthetic_corpus(&specs, 3).unwrap();
        assert_eq!(corpus.len(), 400);
        let mut lengths: BTreeMap<&str, BTreeSet<usize>> = BTreeMap::new();
        for s in &corpus {
            assert!(s.in_length_range());
            assert!(s.values.iter().all(|v| (0.0..=1.0).contains(v)));
            lengths.entry(&s.song_type).or_default().insert(s.n_frames);
        }
        assert_eq!(lengths.len(), 8);
        assert!(lengths.values().all(|ts| ts.len() >= 2));
    }

    #[test]
    fn labels_match_generating_spec() {
        let specs = desk_corpus_spec(4, 0.05);
        let corpus = generate_synthetic_corpus(&specs, 1).unwrap();
        for (i, s) in corpus.iter().enumerate() {
            let spec = &specs[i / 4];
            assert_eq!(s.song_type, spec.song_type);
            assert_eq!(s.individual_id, spec.individual_id);
            assert!(s.id.starts_with(&spec.song_type));
        }
    }

    #[test]
    fn noiseless_instances_with_equal_note_count_are_identical() {
        let mut spec = desk_corpus_spec(40, 0.0).remove(0);
        spec.notes_per_song = NoteRange { min: 6, max: 7 };
        let corpus = generate_synthetic_corpus(&[spec], 11).unwrap();
        let by_len: Vec<&MelSpectrogram> = corpus.iter().filter(|s| s.n_frames == corpus[0].n_frames).collect();
        assert!(by_len.len() >= 2);
        assert_eq!(by_len[0].values, by_len[1].values);
    }

    #[test]
    fn abab_and_bab_share_notes_but_differ() {
        let specs = desk_corpus_spec(1, 0.0);
        let (abab, bab) = (&specs[4], &specs[5]);
        assert_eq!(abab.note_template_id, bab.note_template_id);
        assert_eq!(abab.base_frequency_bin, bab.base_frequency_bin);
        let a = abab.render(6);
        let b = bab.render(6);
        assert_eq!(a.len(), b.len());
        assert_ne!(a, b);
        // both contain an A note at the base bin and a B note above it
        let t = abab.frames_for(6);
        let energy = |v: &[f32], band: usize| (0..t).map(|i| v[band * t + i]).sum::<f32>();
        for v in [&a, &b] {
            assert!(energy(v, abab.base_frequency_bin) > energy(v, 2) + 1.0);
            assert!(energy(v, abab.base_frequency_bin + B_OFFSET_BINS) > energy(v, 2) + 1.0);
        }
    }

    #[test]
    fn same_type_different_note_count_changes_length() {
        let s = &desk_corpus_spec(1, 0.0)[0];
        assert_ne!(s.frames_for(6), s.frames_for(7));
    }

    #[test]
    fn out_of_range_length_is_rejected() {
        let mut s = desk_corpus_spec(1, 0.0).remove(0);
        s.notes_per_song = NoteRange { min: 2, max: 3 };
        assert!(generate_synthetic_corpus(&[s.clone()], 0).unwrap_err().is_validation());
        s.notes_per_song = NoteRange { min: 20, max: 40 };
        assert!(generate_synthetic_corpus(&[s], 0).unwrap_err().is_validation());
    }

    #[test]
    fn bad_syntax_is_rejected() {
        let mut s = desk_corpus_spec(1, 0.0).remove(0);
        s.syntax_pattern = "ABC".into();
        assert!(s.validate().unwrap_err().is_validation());
    }
}
