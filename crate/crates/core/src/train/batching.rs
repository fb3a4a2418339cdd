//! Batch sampling and length bucketing.

use std::collections::BTreeMap;

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::MelSpectrogram;

/// `batch` song indices drawn uniformly: without replacement when the split
/// is large enough, with replacement otherwise.
pub fn sample_batch(n: usize, batch: usize, seed: u64) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    if batch <= n {
        index::sample(&mut rng, n, batch).into_vec()
    } else {
        (0..batch).map(|_| rng.random_range(0..n)).collect()
    }
}

/// Positions within a sampled batch that share one length bucket.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Group {
    pub bucket: usize,
    pub positions: Vec<usize>,
}

/// Groups batch positions by `ceil(T / bucket_frames)`, buckets ascending,
/// positions in sampling order.
pub fn bucket_groups(picks: &[usize], songs: &[&MelSpectrogram], bucket_frames: usize) -> Vec<Group> {
    let mut by: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (pos, &i) in picks.iter().enumerate() {
        by.entry(songs[i].n_frames.div_ceil(bucket_frames)).or_default().push(pos);
    }
    by.into_iter().map(|(bucket, positions)| Group { bucket, positions }).collect()
}

/// Deterministic chunks of at most `max` songs, each within one bucket.
pub fn validation_chunks(songs: &[&MelSpectrogram], bucket_frames: usize, max: usize) -> Vec<Vec<usize>> {
    let picks: Vec<usize> = (0..songs.len()).collect();
    bucket_groups(&picks, songs, bucket_frames)
        .into_iter()
        .flat_map(|g| g.positions.chunks(max.max(1)).map(<[usize]>::to_vec).collect::<Vec<_>>())
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn song(t: usize) -> MelSpectrogram {
        MelSpectrogram::new(format!("s{t}"), "i", "a", 2, t, vec![0.0; 2 * t]).unwrap()
    }

    #[test]
    fn sampling_without_replacement_is_distinct() {
        let picks = sample_batch(50, 32, 9);
        let mut s = picks.clone();
        s.sort();
        s.dedup();
        assert_eq!(s.len(), 32);
        assert_eq!(picks, sample_batch(50, 32, 9));
    }

    #[test]
    fn small_split_samples_with_replacement() {
        let picks = sample_batch(3, 10, 1);
        assert_eq!(picks.len(), 10);
        assert!(picks.iter().all(|&i| i < 3));
    }

    #[test]
    fn groups_cover_every_position_once() {
        let owned: Vec<_> = [100, 130, 128, 101, 400, 129].into_iter().map(song).collect();
        let songs: Vec<&MelSpectrogram> = owned.iter().collect();
        let picks = vec![0, 1, 2, 3, 4, 5];
        let groups = bucket_groups(&picks, &songs, 32);
        assert_eq!(
            groups,
            vec![
                Group { bucket: 4, positions: vec![0, 2, 3] },
                Group { bucket: 5, positions: vec![1, 5] },
                Group { bucket: 13, positions: vec![4] },
            ]
        );
    }

    #[test]
    fn validation_chunks_respect_limit() {
        let owned: Vec<_> = (0..7).map(|_| song(120)).collect();
        let songs: Vec<&MelSpectrogram> = owned.iter().collect();
        let c = validation_chunks(&songs, 32, 3);
        assert_eq!(c, vec![vec![0, 1, 2], vec![3, 4, 5], vec![6]]);
    }
}
