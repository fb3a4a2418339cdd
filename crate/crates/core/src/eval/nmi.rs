//! Normalized mutual information between a labelling and a clustering.

use std::collections::BTreeMap;
use std::hash::Hash;

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Joint counts of (label, cluster) pairs with both marginals.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContingencyTable {
    /// `counts[i][j]`: items with the i-th label and the j-th cluster.
    pub counts: Vec<Vec<usize>>,
    pub label_totals: Vec<usize>,
    pub cluster_totals: Vec<usize>,
    pub total: usize,
}

fn dense_ids<T: Ord + Clone>(items: &[T]) -> (Vec<usize>, usize) {
    let mut ids = BTreeMap::new();
    for it in items {
        let next = ids.len();
        ids.entry(it.clone()).or_insert(next);
    }
    // renumber in sorted order so the table layout is independent of input order
    let order: BTreeMap<T, usize> = ids.keys().cloned().enumerate().map(|(i, k)| (k, i)).collect();
    (items.iter().map(|it| order[it]).collect(), order.len())
}

impl ContingencyTable {
    pub fn new<L: Ord + Clone, C: Ord + Clone>(labels: &[L], clusters: &[C]) -> Result<Self> {
        if labels.len() != clusters.len() {
            return Err(Error::validation(format!(
                "label/cluster length mismatch: {} vs {}",
                labels.len(),
                clusters.len()
            )));
        }
        if labels.is_empty() {
            return Err(Error::validation("NMI needs at least one item"));
        }
        let (li, nl) = dense_ids(labels);
        let (ci, nc) = dense_ids(clusters);
        let mut counts = vec![vec![0usize; nc]; nl];
        for (&a, &b) in li.iter().zip(&ci) {
            counts[a][b] += 1;
        }
        let label_totals = counts.iter().map(|r| r.iter().sum()).collect();
        let cluster_totals = (0..nc).map(|j| counts.iter().map(|r| r[j]).sum()).collect();
        Ok(Self { counts, label_totals, cluster_totals, total: labels.len() })
    }

    fn entropy(totals: &[usize], n: f64) -> f64 {
        totals.iter().filter(|&&c| c > 0).map(|&c| c as f64 / n).map(|p| -p * p.ln()).sum()
    }

    pub fn label_entropy(&self) -> f64 {
        Self::entropy(&self.label_totals, self.total as f64)
    }

    pub fn cluster_entropy(&self) -> f64 {
        Self::entropy(&self.cluster_totals, self.total as f64)
    }

    /// `I(L; C)` in nats.
    pub fn mutual_information(&self) -> f64 {
        let n = self.total as f64;
        let mut mi = 0.0;
        for (i, row) in self.counts.iter().enumerate() {
            for (j, &c) in row.iter().enumerate() {
                if c == 0 {
                    continue;
                }
                let pij = c as f64 / n;
                let pi = self.label_totals[i] as f64 / n;
                let pj = self.cluster_totals[j] as f64 / n;
                mi += pij * (pij / (pi * pj)).ln();
            }
        }
        mi.max(0.0)
    }

    /// True when the partitions agree up to relabeling: every row and every
    /// column of the table has exactly one nonzero cell.
    pub fn is_relabeling(&self) -> bool {
        self.label_totals.len() == self.cluster_totals.len()
            && self.counts.iter().all(|r| r.iter().filter(|&&c| c > 0).count() == 1)
    }

    /// `2 I / (H(L) + H(C))`, with 1 when both partitions are trivial and 0
    /// when exactly one is. Relabelings score exactly 1.
    pub fn nmi(&self) -> f64 {
        if self.is_relabeling() {
            return 1.0;
        }
        let (hl, hc) = (self.label_entropy(), self.cluster_entropy());
        let l_trivial = self.label_totals.len() <= 1;
        let c_trivial = self.cluster_totals.len() <= 1;
        match (l_trivial, c_trivial) {
            (true, true) => 1.0,
            (true, false) | (false, true) => 0.0,
            _ => (2.0 * self.mutual_information() / (hl + hc)).clamp(0.0, 1.0),
        }
    }
}

/// NMI of two equal-length partitions, natural log.
pub fn nmi<L: Ord + Clone, C: Ord + Clone>(labels: &[L], clusters: &[C]) -> Result<f64> {
    Ok(ContingencyTable::new(labels, clusters)?.nmi())
}

/// How clusterer noise points (`-1`) enter the score.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum NoisePolicy {
    /// Drop noise points before scoring.
    #[default]
    Exclude,
    /// Treat all noise points as one extra cluster.
    Singleton,
}

/// NMI of string labels against assignments that may contain noise.
///
/// With [`NoisePolicy::Exclude`] and every point noise the score is 0.
pub fn nmi_with_noise<L: Ord + Clone + Hash>(labels: &[L], assignments: &[i32], policy: NoisePolicy) -> Result<f64> {
    if labels.len() != assignments.len() {
        return Err(Error::validation(format!(
            "label/cluster length mismatch: {} vs {}",
            labels.len(),
            assignments.len()
        )));
    }
    match policy {
        NoisePolicy::Singleton => nmi(labels, assignments),
        NoisePolicy::Exclude => {
            let (l, c): (Vec<L>, Vec<i32>) =
                labels.iter().zip(assignments).filter(|(_, &a)| a >= 0).map(|(l, &a)| (l.clone(), a)).unzip();
            if l.is_empty() {
                return Ok(0.0);
            }
            nmi(&l, &c)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    /// Definition-based double loop over distinct values, no table.
    fn oracle(labels: &[u32], clusters: &[u32]) -> f64 {
        let n = labels.len() as f64;
        let mut lv: Vec<u32> = labels.to_vec();
        lv.sort();
        lv.dedup();
        let mut cv: Vec<u32> = clusters.to_vec();
        cv.sort();
        cv.dedup();
        let p = |pred: &dyn Fn(usize) -> bool| (0..labels.len()).filter(|&i| pred(i)).count() as f64 / n;
        let h = |vals: &[u32], xs: &[u32]| -> f64 {
            vals.iter()
                .map(|&v| {
                    let q = p(&|i| xs[i] == v);
                    -q * q.ln()
                })
                .sum()
        };
        let (hl, hc) = (h(&lv, labels), h(&cv, clusters));
        if lv.len() <= 1 && cv.len() <= 1 {
            return 1.0;
        }
        if lv.len() <= 1 || cv.len() <= 1 {
            return 0.0;
        }
        let mut mi = 0.0;
        for &a in &lv {
            for &b in &cv {
                let pab = p(&|i| labels[i] == a && clusters[i] == b);
                if pab > 0.0 {
                    mi += pab * (pab / (p(&|i| labels[i] == a) * p(&|i| clusters[i] == b))).ln();
                }
            }
        }
        2.0 * mi / (hl + hc)
    }

    #[test]
    fn worked_examples() {
        assert_eq!(nmi(&[0, 0, 1, 1], &[1, 1, 0, 0]).unwrap(), 1.0);
        assert!(nmi(&[0, 0, 1, 1], &[0, 1, 0, 1]).unwrap().abs() < 1e-15);
        let t = ContingencyTable::new(&[0, 0, 1, 1], &[0, 0, 0, 1]).unwrap();
        assert!((t.mutual_information() - 0.21576).abs() < 1e-5);
        assert!((t.label_entropy() - std::f64::consts::LN_2).abs() < 1e-12);
        assert!((t.cluster_entropy() - 0.56234).abs() < 1e-5);
        assert!((t.nmi() - 0.3437).abs() < 1e-4);
    }

    #[test]
    fn trivial_partition_conventions() {
        assert_eq!(nmi(&[1, 1, 1], &[4, 4, 4]).unwrap(), 1.0);
        assert_eq!(nmi(&[1, 1, 1], &[0, 1, 2]).unwrap(), 0.0);
        assert_eq!(nmi(&[0, 1, 2], &[7, 7, 7]).unwrap(), 0.0);
    }

    #[test]
    fn table_marginals_are_consistent() {
        let t = ContingencyTable::new(&["a", "b", "a", "c"], &[2, 2, 0, 0]).unwrap();
        assert_eq!(t.total, 4);
        assert_eq!(t.label_totals.iter().sum::<usize>(), 4);
        assert_eq!(t.cluster_totals, vec![2, 2]);
        assert_eq!(t.counts.iter().flatten().sum::<usize>(), 4);
    }

    #[test]
    fn errors_on_bad_input() {
        assert!(nmi::<i32, i32>(&[0, 1], &[0]).unwrap_err().is_validation());
        assert!(nmi::<i32, i32>(&[], &[]).unwrap_err().is_validation());
    }

    #[test]
    fn noise_policies() {
        let labels = ["a", "a", "b", "b", "b"];
        let assign = [0, 0, 1, 1, -1];
        assert_eq!(nmi_with_noise(&labels, &assign, NoisePolicy::Exclude).unwrap(), 1.0);
        assert!(nmi_with_noise(&labels, &assign, NoisePolicy::Singleton).unwrap() < 1.0);
        assert_eq!(nmi_with_noise(&labels, &[-1; 5], NoisePolicy::Exclude).unwrap(), 0.0);
    }

    fn partitions() -> impl Strategy<Value = (Vec<u32>, Vec<u32>)> {
        (1usize..=200, 1u32..6, 1u32..8).prop_flat_map(|(n, kl, kc)| {
            (proptest::collection::vec(0..kl, n), proptest::collection::vec(0..kc, n))
        })
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(300))]
        #[test]
        fn matches_oracle_and_is_symmetric((l, c) in partitions()) {
            let s = nmi(&l, &c).unwrap();
            prop_assert!((s - oracle(&l, &c)).abs() < 1e-10);
            prop_assert!((s - nmi(&c, &l).unwrap()).abs() < 1e-12);
            prop_assert!((0.0..=1.0).contains(&s));
        }

        #[test]
        fn relabelling_clusters_is_invisible((l, c) in partitions(), shift in 1u32..50) {
            let renamed: Vec<u32> = c.iter().map(|&x| (7 - x) * 100 + shift).collect();
            prop_assert!((nmi(&l, &c).unwrap() - nmi(&l, &renamed).unwrap()).abs() < 1e-12);
        }
    }
}
