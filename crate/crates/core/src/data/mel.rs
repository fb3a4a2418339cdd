//! Log-Mel spectrogram front end.

use std::sync::Arc;

use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};

use super::{AudioClip, MelSpectrogram, N_MELS};
use crate::{Error, Result};

const LOG_FLOOR: f64 = 1e-10;

/// STFT and filterbank settings.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FrameParams {
    pub window: usize,
    pub hop: usize,
    pub n_mels: usize,
    pub f_min: f64,
    pub f_max: f64,
    pub sample_rate: u32,
}

impl Default for FrameParams {
    fn default() -> Self {
        Self {
            window: 1024,
            hop: 256,
            n_mels: N_MELS,
            f_min: 1500.0,
            f_max: 10_000.0,
            sample_rate: super::TARGET_SAMPLE_RATE,
        }
    }
}

impl FrameParams {
    /// Frames produced from `n` samples: windows fully inside the clip, no padding.
    pub fn n_frames(&self, n_samples: usize) -> usize {
        if n_samples < self.window {
            0
        } else {
            (n_samples - self.window) / self.hop + 1
        }
    }
}

fn hz_to_mel(f: f64) -> f64 {
    2595.0 * (1.0 + f / 700.0).log10()
}

fn mel_to_hz(m: f64) -> f64 {
    700.0 * (10f64.powf(m / 2595.0) - 1.0)
}

/// Triangular filters on the HTK Mel scale, `[n_mels][n_fft/2 + 1]`.
pub fn mel_filterbank(params: &FrameParams) -> Vec<Vec<f64>> {
    let n_bins = params.window / 2 + 1;
    let mel_lo = hz_to_mel(params.f_min);
    let mel_hi = hz_to_mel(params.f_max);
    let edges: Vec<f64> = (0..params.n_mels + 2)
        .map(|i| mel_to_hz(mel_lo + (mel_hi - mel_lo) * i as f64 / (params.n_mels + 1) as f64))
        .collect();
    let bin_hz = params.sample_rate as f64 / params.window as f64;
    (0..params.n_mels)
        .map(|m| {
            let (lo, mid, hi) = (edges[m], edges[m + 1], edges[m + 2]);
            (0..n_bins)
                .map(|k| {
                    let f = k as f64 * bin_hz;
                    if f <= lo || f >= hi {
                        0.0
                    } else if f <= mid {
                        (f - lo) / (mid - lo)
                    } else {
                        (hi - f) / (hi - mid)
                    }
                })
                .collect()
        })
        .collect()
}

/// Min-max normalization to `[0, 1]`. A constant matrix maps to all zeros.
pub fn normalize_min_max(values: &mut [f32]) {
    let (lo, hi) = values
        .iter()
        .fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    if !(hi > lo) {
        values.iter_mut().for_each(|v| *v = 0.0);
        return;
    }
    let range = hi - lo;
    values.iter_mut().for_each(|v| *v = (*v - lo) / range);
}

struct Stft {
    fft: Arc<dyn Fft<f64>>,
    window: Vec<f64>,
}

impl Stft {
    fn new(size: usize) -> Self {
        let fft = FftPlanner::new().plan_fft_forward(size);
        // periodic Hann
        let window = (0..size)
            .map(|i| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * i as f64 / size as f64).cos())
            .collect();
        Self { fft, window }
    }

    fn power(&self, frame: &[f32]) -> Vec<f64> {
        let mut buf: Vec<Complex<f64>> = frame
            .iter()
            .zip(&self.window)
            .map(|(&s, &w)| Complex::new(s as f64 * w, 0.0))
            .collect();
        self.fft.process(&mut buf);
        buf[..frame.len() / 2 + 1].iter().map(|c| c.norm_sqr()).collect()
    }
}

/// Log-Mel transform with default [`FrameParams`].
///
/// Labels default to the clip's `source_id` for `id` and empty strings for
/// individual and song type; callers attach labels afterwards.
pub fn mel_transform(clip: &AudioClip) -> Result<MelSpectrogram> {
    mel_transform_with(clip, &FrameParams::default())
}

pub fn mel_transform_with(clip: &AudioClip, params: &FrameParams) -> Result<MelSpectrogram> {
    if clip.samples.len() < params.window {
        return Err(Error::validation(format!(
            "clip '{}' has {} samples, shorter than one {}-sample window",
            clip.source_id,
            clip.samples.len(),
            params.window
        )));
    }
    let n_frames = params.n_frames(clip.samples.len());
    let bank = mel_filterbank(params);
    let stft = Stft::new(params.window);
    let mut values = vec![0f32; params.n_mels * n_frames];
    for t in 0..n_frames {
        let start = t * params.hop;
        let power = stft.power(&clip.samples[start..start + params.window]);
        for (m, filt) in bank.iter().enumerate() {
            let e: f64 = filt.iter().zip(&power).map(|(w, p)| w * p).sum();
            values[m * n_frames + t] = (e + LOG_FLOOR).ln() as f32;
        }
    }
    normalize_min_max(&mut values);
    MelSpectrogram::new(clip.source_id.clone(), "", "", params.n_mels, n_frames, values)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn clip(n: usize) -> AudioClip {
        AudioClip {
            samples: (0..n).map(|i| (i as f32 * 0.3).sin() * 0.5).collect(),
            sample_rate: 22_050,
            source_id: "t".into(),
        }
    }

    #[test]
    fn three_seconds_gives_255_frames() {
        let spec = mel_transform(&clip(66_150)).unwrap();
        assert_eq!(spec.n_frames, 255);
        assert_eq!(spec.n_mels, 80);
        assert!(spec.values.iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn single_window_gives_one_frame() {
        assert_eq!(mel_transform(&clip(1024)).unwrap().n_frames, 1);
    }

    #[test]
    fn too_short_is_rejected() {
        assert!(mel_transform(&clip(1023)).unwrap_err().is_validation());
    }

    #[test]
    fn silence_maps_to_zeros() {
        let c = AudioClip { samples: vec![0.0; 4096], sample_rate: 22_050, source_id: "z".into() };
        let spec = mel_transform(&c).unwrap();
        assert!(spec.values.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn filterbank_covers_band() {
        let p = FrameParams::default();
        let bank = mel_filterbank(&p);
        assert_eq!(bank.len(), 80);
        let bin_hz = 22_050.0 / 1024.0;
        for filt in &bank {
            assert!(filt.iter().any(|&w| w > 0.0), "empty filter");
            for (k, &w) in filt.iter().enumerate() {
                if w > 0.0 {
                    let f = k as f64 * bin_hz;
                    assert!(f > 1500.0 && f < 10_000.0);
                }
            }
        }
    }

    #[test]
    fn tone_peaks_in_matching_band() {
        // 4 kHz tone should light up a band whose centre is near 4 kHz.
        let n = 8192;
        let samples = (0..n)
            .map(|i| (2.0 * std::f32::consts::PI * 4000.0 * i as f32 / 22_050.0).sin())
            .collect();
        let c = AudioClip { samples, sample_rate: 22_050, source_id: "tone".into() };
        let spec = mel_transform(&c).unwrap();
        let col = spec.column(0);
        let peak = col
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.total_cmp(b.1))
            .unwrap()
            .0;
        let lo = hz_to_mel(1500.0);
        let hi = hz_to_mel(10_000.0);
        let centre = mel_to_hz(lo + (hi - lo) * (peak + 1) as f64 / 81.0);
        assert!((centre - 4000.0).abs() < 250.0, "peak band centre {centre}");
    }

    proptest! {
        #[test]
        fn frame_count_formula(n in 1024usize..200_000) {
            let p = FrameParams::default();
            prop_assert_eq!(p.n_frames(n), (n - 1024) / 256 + 1);
        }

        #[test]
        fn normalization_is_idempotent(v in proptest::collection::vec(-50f32..50f32, 1..200)) {
            let mut once = v.clone();
            normalize_min_max(&mut once);
            let mut twice = once.clone();
            normalize_min_max(&mut twice);
            prop_assert_eq!(once, twice);
        }
    }
}
