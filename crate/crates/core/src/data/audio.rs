use std::path::Path;

use audioadapter_buffers::direct::SequentialSlice;
use rubato::{Fft, FixedSync, Resampler};

use crate::{Error, Result};

/// Sample rate every clip is converted to before the Mel transform.
pub const TARGET_SAMPLE_RATE: u32 = 22_050;

/// Mono audio at a known sample rate.
#[derive(Debug, Clone, PartialEq)]
pub struct AudioClip {
    pub samples: Vec<f32>,
    pub sample_rate: u32,
    pub source_id: String,
}

/// Reads a PCM WAV file, averages channels to mono and resamples to 22050 Hz.
///
/// Clips already at 22050 Hz are returned sample-for-sample unchanged.
pub fn load_and_resample(path: &Path) -> Result<AudioClip> {
    let mut reader = hound::WavReader::open(path)
        .map_err(|e| Error::Input(format!("{}: {e}", path.display())))?;
    let spec = reader.spec();
    let channels = spec.channels as usize;
    let interleaved: Vec<f32> = match spec.sample_format {
        hound::SampleFormat::Float => reader
            .samples::<f32>()
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| Error::Input(format!("{}: {e}", path.display())))?,
        hound::SampleFormat::Int => {
            let scale = 1.0 / (1u64 << (spec.bits_per_sample - 1)) as f32;
            reader
                .samples::<i32>()
                .map(|s| s.map(|v| v as f32 * scale))
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| Error::Input(format!("{}: {e}", path.display())))?
        }
    };
    if interleaved.is_empty() {
        return Err(Error::validation(format!("{}: zero-length audio", path.display())));
    }
    let mono = downmix(&interleaved, channels);
    let source_id = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    let samples = resample(&mono, spec.sample_rate, TARGET_SAMPLE_RATE)?;
    if samples.iter().any(|v| !v.is_finite()) {
        return Err(Error::validation(format!("{}: non-finite samples", path.display())));
    }
    Ok(AudioClip { samples, sample_rate: TARGET_SAMPLE_RATE, source_id })
}

fn downmix(interleaved: &[f32], channels: usize) -> Vec<f32> {
    if channels <= 1 {
        return interleaved.to_vec();
    }
    interleaved
        .chunks_exact(channels)
        .map(|frame| frame.iter().sum::<f32>() / channels as f32)
        .collect()
}

/// Band-limited resampling of a mono signal. Output length is `ceil(n · to / from)`.
pub fn resample(samples: &[f32], from: u32, to: u32) -> Result<Vec<f32>> {
    if from == to {
        return Ok(samples.to_vec());
    }
    let input: Vec<f64> = samples.iter().map(|&s| s as f64).collect();
    let mut resampler = Fft::<f64>::new(from as usize, to as usize, 1024, 1, FixedSync::Input)
        .map_err(|e| Error::Input(format!("resampler construction failed: {e}")))?;
    let adapter = SequentialSlice::new(&input, 1, input.len())
        .map_err(|e| Error::Input(format!("resampler input: {e}")))?;
    let out = resampler
        .process_all(&adapter, input.len(), None)
        .map_err(|e| Error::Input(format!("resampling failed: {e}")))?;
    Ok(out.take_data().into_iter().map(|s| s as f32).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write_wav(path: &Path, rate: u32, channels: u16, frames: usize) {
        let spec = hound::WavSpec {
            channels,
            sample_rate: rate,
            bits_per_sample: 16,
            sample_format: hound::SampleFormat::Int,
        };
        let mut w = hound::WavWriter::create(path, spec).unwrap();
        for i in 0..frames {
            let v = ((i as f32 * 0.05).sin() * 8000.0) as i16;
            for _ in 0..channels {
                w.write_sample(v).unwrap();
            }
        }
        w.finalize().unwrap();
    }

    #[test]
    fn stereo_44100_is_halved_to_mono() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.wav");
        write_wav(&p, 44_100, 2, 88_200);
        let clip = load_and_resample(&p).unwrap();
        assert_eq!(clip.sample_rate, 22_050);
        assert_eq!(clip.samples.len(), 44_100);
        assert_eq!(clip.source_id, "a");
    }

    #[test]
    fn native_rate_is_bit_equal() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("b.wav");
        write_wav(&p, 22_050, 1, 5000);
        let clip = load_and_resample(&p).unwrap();
        let mut r = hound::WavReader::open(&p).unwrap();
        let raw: Vec<f32> = r
            .samples::<i32>()
            .map(|s| s.unwrap() as f32 / 32768.0)
            .collect();
        assert_eq!(clip.samples, raw);
    }

    #[test]
    fn empty_file_is_validation_error() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.wav");
        write_wav(&p, 22_050, 1, 0);
        assert!(load_and_resample(&p).unwrap_err().is_validation());
    }

    #[test]
    fn unreadable_file_is_input_error() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("junk.wav");
        std::fs::write(&p, b"not a wav").unwrap();
        assert!(matches!(load_and_resample(&p), Err(Error::Input(_))));
    }
}
