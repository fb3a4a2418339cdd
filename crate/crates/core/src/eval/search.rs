//! Exhaustive search over clustering parameters.

use std::cmp::Ordering;
use std::collections::BTreeMap;
use std::hash::Hash;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::cluster::{check_vectors, cluster_reduced, ClusterBackend, ClusterParams};
use super::nmi::{nmi_with_noise, NoisePolicy};
use crate::{Error, Result};

/// Axes of the parameter grid; the search visits their Cartesian product.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ParamGrid {
    pub reduce_dim: Vec<usize>,
    pub min_cluster_size: Vec<usize>,
    pub min_samples: Vec<usize>,
    pub cluster_selection_epsilon: Vec<f64>,
    #[serde(default)]
    pub seed: u64,
}

impl Default for ParamGrid {
    fn default() -> Self {
        Self {
            reduce_dim: vec![2, 4, 8],
            min_cluster_size: vec![3, 5, 10],
            min_samples: vec![1, 3, 5],
            cluster_selection_epsilon: vec![0.0, 0.1, 0.5],
            seed: 0,
        }
    }
}

impl ParamGrid {
    pub fn single(p: &ClusterParams) -> Self {
        Self {
            reduce_dim: vec![p.reduce_dim],
            min_cluster_size: vec![p.min_cluster_size],
            min_samples: vec![p.min_samples],
            cluster_selection_epsilon: vec![p.cluster_selection_epsilon],
            seed: p.seed,
        }
    }

    pub fn points(&self) -> Vec<ClusterParams> {
        let mut out = Vec::new();
        for &reduce_dim in &self.reduce_dim {
            for &min_cluster_size in &self.min_cluster_size {
                for &min_samples in &self.min_samples {
                    for &eps in &self.cluster_selection_epsilon {
                        out.push(ClusterParams {
                            reduce_dim,
                            min_cluster_size,
                            min_samples,
                            cluster_selection_epsilon: eps,
                            seed: self.seed,
                        });
                    }
                }
            }
        }
        out
    }
}

/// Score of one grid point.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridScore {
    pub params: ClusterParams,
    pub nmi: f64,
    pub n_clusters: usize,
    pub noise_fraction: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchOutcome {
    pub best: GridScore,
    pub evaluated: Vec<GridScore>,
}

/// Higher NMI first, then lower noise, then the lexicographically smaller params.
fn better(a: &GridScore, b: &GridScore) -> Ordering {
    b.nmi
        .total_cmp(&a.nmi)
        .then(a.noise_fraction.total_cmp(&b.noise_fraction))
        .then(a.params.key().cmp(&b.params.key()))
}

/// Evaluates every grid point and returns the best by NMI.
///
/// Reductions are computed once per target dimension and shared by all
/// clustering settings at that dimension.
pub fn search_cluster_params<L: Ord + Clone + Hash + Sync>(
    vectors: &[Vec<f64>],
    labels: &[L],
    grid: &ParamGrid,
    backend: &dyn ClusterBackend,
    noise: NoisePolicy,
) -> Result<SearchOutcome> {
    let points = grid.points();
    if points.is_empty() {
        return Err(Error::validation("empty parameter grid"));
    }
    if vectors.len() != labels.len() {
        return Err(Error::validation("records and labels differ in length"));
    }
    check_vectors(vectors)?;
    for p in &points {
        p.validate()?;
    }
    let smallest = points.iter().map(|p| p.min_cluster_size).min().unwrap_or(0);
    if vectors.len() < smallest {
        return Err(Error::validation(format!("{} records is fewer than min_cluster_size {smallest}", vectors.len())));
    }
    let dims: Vec<usize> = {
        let mut d = grid.reduce_dim.clone();
        d.sort();
        d.dedup();
        d
    };
    let reduced: BTreeMap<usize, Vec<Vec<f64>>> = dims
        .par_iter()
        .map(|&d| backend.reduce(vectors, d, grid.seed).map(|r| (d, r)))
        .collect::<Result<_>>()?;
    let evaluated: Vec<GridScore> = points
        .par_iter()
        .map(|p| {
            let usable = vectors.len() >= p.min_cluster_size;
            let r = if usable { Some(cluster_reduced(&reduced[&p.reduce_dim], p, backend)?) } else { None };
            Ok(match r {
                Some(r) => GridScore {
                    nmi: nmi_with_noise(labels, &r.assignments, noise)?,
                    n_clusters: r.n_clusters,
                    noise_fraction: r.noise_fraction,
                    params: p.clone(),
                },
                None => GridScore { params: p.clone(), nmi: 0.0, n_clusters: 0, noise_fraction: 1.0 },
            })
        })
        .collect::<Result<_>>()?;
    let best = evaluated.iter().min_by(|a, b| better(a, b)).cloned().expect("non-empty grid");
    Ok(SearchOutcome { best, evaluated })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::eval::cluster::stubs::RoundingBackend;

    fn data() -> (Vec<Vec<f64>>, Vec<&'static str>) {
        let v: Vec<Vec<f64>> = (0..12).map(|i| vec![(i / 4) as f64 * 2.0]).collect();
        let l = (0..12).map(|i| ["a", "b", "c"][i / 4]).collect();
        (v, l)
    }

    #[test]
    fn singleton_grid_returns_its_params() {
        let (v, l) = data();
        let p = ClusterParams { min_cluster_size: 4, ..ClusterParams::default() };
        let out = search_cluster_params(&v, &l, &ParamGrid::single(&p), &RoundingBackend, NoisePolicy::Exclude).unwrap();
        assert_eq!(out.best.params, p);
        assert_eq!(out.evaluated.len(), 1);
    }

    #[test]
    fn empty_grid_is_rejected() {
        let (v, l) = data();
        let grid = ParamGrid { reduce_dim: vec![], ..ParamGrid::default() };
        assert!(search_cluster_params(&v, &l, &grid, &RoundingBackend, NoisePolicy::Exclude).unwrap_err().is_validation());
    }

    #[test]
    fn ties_prefer_less_noise_then_smaller_params() {
        let mk = |size, noise| GridScore {
            params: ClusterParams { min_cluster_size: size, ..ClusterParams::default() },
            nmi: 0.5,
            n_clusters: 2,
            noise_fraction: noise,
        };
        assert_eq!(better(&mk(9, 0.1), &mk(3, 0.2)), Ordering::Less);
        assert_eq!(better(&mk(3, 0.1), &mk(9, 0.1)), Ordering::Less);
    }

    #[test]
    fn search_picks_the_best_scoring_point() {
        let (v, l) = data();
        // epsilon 2 merges bins 0 and 2 under the stub, lowering NMI
        let grid = ParamGrid {
            reduce_dim: vec![1],
            min_cluster_size: vec![2],
            min_samples: vec![1],
            cluster_selection_epsilon: vec![2.0, 0.0],
            seed: 0,
        };
        let out = search_cluster_params(&v, &l, &grid, &RoundingBackend, NoisePolicy::Exclude).unwrap();
        assert_eq!(out.best.params.cluster_selection_epsilon, 0.0);
        assert_eq!(out.best.nmi, 1.0);
        assert!(out.evaluated[0].nmi < 1.0);
    }
}
