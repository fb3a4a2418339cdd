//! Segment shuffling of the local encoder's input.

use rand::seq::SliceRandom;

use crate::data::MelSpectrogram;
use crate::seed;

/// Block boundaries `(start, len)` for a spectrogram of `t` frames: full
/// `segment_len` blocks followed by a shorter remainder block when `t` is not
/// a multiple of `segment_len`.
pub fn segments(t: usize, segment_len: usize) -> Vec<(usize, usize)> {
    (0..t.div_ceil(segment_len))
        .map(|i| {
            let start = i * segment_len;
            (start, segment_len.min(t - start))
        })
        .collect()
}

/// Permutation of the blocks under `seed`.
pub fn block_order(t: usize, segment_len: usize, seed: u64) -> Vec<(usize, usize)> {
    let mut blocks = segments(t, segment_len);
    blocks.shuffle(&mut seed::rng(seed, &[seed::stream::SHUFFLE]));
    blocks
}

/// Shuffles the time axis of a row-major `[bands × t]` matrix in blocks.
pub fn shuffle_matrix(values: &[f32], bands: usize, t: usize, segment_len: usize, seed: u64) -> Vec<f32> {
    let order = block_order(t, segment_len, seed);
    let mut out = vec![0f32; values.len()];
    for band in 0..bands {
        let row = &values[band * t..(band + 1) * t];
        let dst = &mut out[band * t..(band + 1) * t];
        let mut pos = 0;
        for &(start, len) in &order {
            dst[pos..pos + len].copy_from_slice(&row[start..start + len]);
            pos += len;
        }
    }
    out
}

/// Cuts `x` into consecutive `segment_len`-frame blocks (remainder kept as its
/// own block) and permutes the blocks uniformly under `seed`.
pub fn shuffle_segments(x: &MelSpectrogram, segment_len: usize, seed: u64) -> MelSpectrogram {
    MelSpectrogram {
        values: shuffle_matrix(&x.values, x.n_mels, x.n_frames, segment_len, seed),
        ..x.clone()
    }
}
