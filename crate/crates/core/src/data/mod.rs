//! Spectrogram ingestion, corpus handling and the synthetic song generator.

pub mod audio;
pub mod container;
pub mod corpus;
pub mod mel;
pub mod synth;

pub use audio::{load_and_resample, AudioClip, TARGET_SAMPLE_RATE};
pub use container::{load_spectrograms, save_spectrograms};
pub use corpus::{filter_by_length, split_by_individual, DatasetSplit, SplitFractions};
pub use mel::{mel_transform, normalize_min_max, FrameParams};
pub use synth::{desk_corpus_spec, generate_synthetic_corpus, NoteRange, NoteTemplate, SyntheticSongSpec};

use crate::{Error, Result};

/// Number of Mel bands of every spectrogram the model consumes.
pub const N_MELS: usize = 80;
/// Shortest spectrogram, in frames, kept for training and evaluation.
pub const MIN_FRAMES: usize = 100;
/// Longest spectrogram, in frames, kept for training and evaluation.
pub const MAX_FRAMES: usize = 400;

/// A normalized log-Mel spectrogram of one song segment.
///
/// `values` is row-major `[n_mels × n_frames]`: element `(band, frame)` lives at
/// `band * n_frames + frame`.
#[derive(Debug, Clone, PartialEq)]
pub struct MelSpectrogram {
    pub id: String,
    pub individual_id: String,
    pub song_type: String,
    pub n_mels: usize,
    pub n_frames: usize,
    pub values: Vec<f32>,
}

impl MelSpectrogram {
    pub fn new(
        id: impl Into<String>,
        individual_id: impl Into<String>,
        song_type: impl Into<String>,
        n_mels: usize,
        n_frames: usize,
        values: Vec<f32>,
    ) -> Result<Self> {
        if values.len() != n_mels * n_frames {
            return Err(Error::validation(format!(
                "spectrogram values have {} elements, expected {n_mels} x {n_frames}",
                values.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::validation("spectrogram contains non-finite values"));
        }
        Ok(Self {
            id: id.into(),
            individual_id: individual_id.into(),
            song_type: song_type.into(),
            n_mels,
            n_frames,
            values,
        })
    }

    #[inline]
    pub fn at(&self, band: usize, frame: usize) -> f32 {
        self.values[band * self.n_frames + frame]
    }

    /// Column `frame` as a vector over bands.
    pub fn column(&self, frame: usize) -> Vec<f32> {
        (0..self.n_mels).map(|b| self.at(b, frame)).collect()
    }

    /// Whether the spectrogram satisfies the length window used for training.
    pub fn in_length_range(&self) -> bool {
        (MIN_FRAMES..=MAX_FRAMES).contains(&self.n_frames)
    }
}
