//! Length filtering and individual-disjoint dataset splits.

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::MelSpectrogram;
use crate::{Error, Result};

/// Keeps spectrograms with `100 ≤ T ≤ 400`, preserving order.
pub fn filter_by_length(specs: Vec<MelSpectrogram>) -> Vec<MelSpectrogram> {
    specs.into_iter().filter(MelSpectrogram::in_length_range).collect()
}

/// Fractions of *individuals* assigned to train / validation / test.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitFractions {
    pub train: f64,
    pub val: f64,
    pub test: f64,
}

impl Default for SplitFractions {
    fn default() -> Self {
        Self { train: 0.7, val: 0.1, test: 0.2 }
    }
}

impl SplitFractions {
    fn as_array(&self) -> [f64; 3] {
        [self.train, self.val, self.test]
    }

    fn validate(&self) -> Result<()> {
        let f = self.as_array();
        if f.iter().any(|x| !x.is_finite() || *x < 0.0) {
            return Err(Error::validation(format!("split fractions must be non-negative: {f:?}")));
        }
        if (f.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(Error::validation(format!("split fractions must sum to 1: {f:?}")));
        }
        Ok(())
    }

    /// Largest-remainder apportionment of `n` items. Ties go to the earlier split.
    pub fn apportion(&self, n: usize) -> [usize; 3] {
        let quotas = self.as_array().map(|f| f * n as f64);
        let mut counts = quotas.map(|q| q.floor() as usize);
        let assigned: usize = counts.iter().sum();
        let mut order = [0usize, 1, 2];
        order.sort_by(|&a, &b| {
            // quantized so 8 * 0.7 and 8 * 0.2 tie despite rounding
            let rem = |i: usize| ((quotas[i] - quotas[i].floor()) * 1e9).round() as i64;
            rem(b).cmp(&rem(a)).then(a.cmp(&b))
        });
        for &i in order.iter().take(n.saturating_sub(assigned)) {
            counts[i] += 1;
        }
        counts
    }
}

/// Indices into a spectrogram list, partitioned so that no individual spans two parts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSplit {
    pub fractions: SplitFractions,
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
    pub train_individuals: Vec<String>,
    pub val_individuals: Vec<String>,
    pub test_individuals: Vec<String>,
}

impl DatasetSplit {
    pub fn select<'a>(specs: &'a [MelSpectrogram], idx: &[usize]) -> Vec<&'a MelSpectrogram> {
        idx.iter().map(|&i| &specs[i]).collect()
    }

    /// Songs of every individual not used for training.
    pub fn held_out(&self) -> Vec<usize> {
        let mut v: Vec<usize> = self.val.iter().chain(&self.test).copied().collect();
        v.sort_unstable();
        v
    }
}

/// Shuffles the sorted set of individuals under `seed` and apportions them to
/// train / validation / test.
pub fn split_by_individual(
    specs: &[MelSpectrogram],
    fractions: SplitFractions,
    seed: u64,
) -> Result<DatasetSplit> {
    fractions.validate()?;
    let mut individuals: Vec<String> = specs
        .iter()
        .map(|s| s.individual_id.clone())
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    if individuals.len() < 3 {
        return Err(Error::validation(format!(
            "{} individuals cannot fill 3 splits",
            individuals.len()
        )));
    }
    individuals.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let [n_train, n_val, _] = fractions.apportion(individuals.len());
    let mut part_of = BTreeMap::new();
    for (i, ind) in individuals.iter().enumerate() {
        let part = if i < n_train {
            0
        } else if i < n_train + n_val {
            1
        } else {
            2
        };
        part_of.insert(ind.as_str(), part);
    }
    let mut parts: [Vec<usize>; 3] = Default::default();
    for (i, s) in specs.iter().enumerate() {
        parts[part_of[s.individual_id.as_str()]].push(i);
    }
    let mut names: [Vec<String>; 3] = Default::default();
    for (ind, &p) in &part_of {
        names[p].push(ind.to_string());
    }
    let [train, val, test] = parts;
    let [train_individuals, val_individuals, test_individuals] = names;
    Ok(DatasetSplit {
        fractions,
        train,
        val,
        test,
        train_individuals,
        val_individuals,
        test_individuals,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn spec(id: usize, ind: &str, t: usize) -> MelSpectrogram {
        MelSpectrogram::new(format!("s{id}"), ind, "a", 2, t, vec![0.0; 2 * t]).unwrap()
    }

    fn corpus(n_ind: usize, per: usize) -> Vec<MelSpectrogram> {
        (0..n_ind * per).map(|i| spec(i, &format!("bird{}", i / per), 120)).collect()
    }

    #[test]
    fn length_filter_keeps_inclusive_bounds() {
        let v = vec![spec(0, "a", 50), spec(1, "a", 100), spec(2, "a", 400), spec(3, "a", 401)];
        let kept: Vec<usize> = filter_by_length(v).iter().map(|s| s.n_frames).collect();
        assert_eq!(kept, vec![100, 400]);
        assert!(filter_by_length(vec![]).is_empty());
        let all = vec![spec(0, "a", 120), spec(1, "a", 300)];
        assert_eq!(filter_by_length(all.clone()), all);
    }

    #[test]
    fn ten_individuals_split_7_1_2() {
        let c = corpus(10, 3);
        let s = split_by_individual(&c, SplitFractions::default(), 5).unwrap();
        assert_eq!(
            (s.train_individuals.len(), s.val_individuals.len(), s.test_individuals.len()),
            (7, 1, 2)
        );
        assert_eq!(s.train.len() + s.val.len() + s.test.len(), 30);
        assert_eq!(s, split_by_individual(&c, SplitFractions::default(), 5).unwrap());
    }

    #[test]
    fn paper_scale_counts_within_one() {
        let [a, b, c] = SplitFractions::default().apportion(350);
        assert_eq!(a + b + c, 350);
        for (got, want) in [(a, 244i64), (b, 35), (c, 71)] {
            assert!((got as i64 - want).abs() <= 1, "{got} vs {want}");
        }
    }

    #[test]
    fn eight_individuals_hold_out_two() {
        assert_eq!(SplitFractions::default().apportion(8), [6, 1, 1]);
    }

    #[test]
    fn too_few_individuals() {
        let c = corpus(2, 4);
        assert!(split_by_individual(&c, SplitFractions::default(), 0).unwrap_err().is_validation());
    }

    #[test]
    fn fractions_must_sum_to_one() {
        let c = corpus(5, 1);
        let f = SplitFractions { train: 0.5, val: 0.1, test: 0.1 };
        assert!(split_by_individual(&c, f, 0).unwrap_err().is_validation());
    }

    proptest! {
        #[test]
        fn splits_are_disjoint_by_individual(seed in any::<u64>(), n_ind in 3usize..40) {
            let c = corpus(n_ind, 2);
            let s = split_by_individual(&c, SplitFractions::default(), seed).unwrap();
            let sets: Vec<BTreeSet<&str>> = [&s.train, &s.val, &s.test]
                .iter()
                .map(|idx| idx.iter().map(|&i| c[i].individual_id.as_str()).collect())
                .collect();
            prop_assert!(sets[0].is_disjoint(&sets[1]));
            prop_assert!(sets[0].is_disjoint(&sets[2]));
            prop_assert!(sets[1].is_disjoint(&sets[2]));
            prop_assert_eq!(s.train.len() + s.val.len() + s.test.len(), c.len());
        }
    }
}
