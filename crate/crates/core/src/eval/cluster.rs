//! Reduce-then-cluster behind a pluggable backend.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Reduction and density-clustering settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClusterParams {
    pub reduce_dim: usize,
    pub min_cluster_size: usize,
    pub min_samples: usize,
    pub cluster_selection_epsilon: f64,
    pub seed: u64,
}

impl Default for ClusterParams {
    fn default() -> Self {
        Self { reduce_dim: 4, min_cluster_size: 5, min_samples: 3, cluster_selection_epsilon: 0.1, seed: 0 }
    }
}

impl ClusterParams {
    pub fn validate(&self) -> Result<()> {
        if self.reduce_dim == 0 {
            return Err(Error::validation("reduce_dim must be >= 1"));
        }
        if self.min_cluster_size < 2 {
            return Err(Error::validation("min_cluster_size must be >= 2"));
        }
        if self.min_samples == 0 {
            return Err(Error::validation("min_samples must be >= 1"));
        }
        if !(self.cluster_selection_epsilon >= 0.0 && self.cluster_selection_epsilon.is_finite()) {
            return Err(Error::validation("cluster_selection_epsilon must be finite and >= 0"));
        }
        Ok(())
    }

    /// Ordering key for deterministic tie-breaks.
    pub(crate) fn key(&self) -> (usize, usize, usize, u64) {
        (self.reduce_dim, self.min_cluster_size, self.min_samples, self.cluster_selection_epsilon.to_bits())
    }

    pub(crate) fn describe(&self) -> String {
        format!(
            "reduce_dim={} min_cluster_size={} min_samples={} epsilon={} seed={}",
            self.reduce_dim, self.min_cluster_size, self.min_samples, self.cluster_selection_epsilon, self.seed
        )
    }
}

/// Assignments of one clustering run; noise is `-1`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterResult {
    pub assignments: Vec<i32>,
    pub params: ClusterParams,
    pub n_clusters: usize,
    pub noise_fraction: f64,
}

/// Dimension reduction plus density clustering.
pub trait ClusterBackend: Sync {
    fn name(&self) -> &str;

    /// Maps `n` vectors to `n` points in `dim` dimensions.
    fn reduce(&self, vectors: &[Vec<f64>], dim: usize, seed: u64) -> Result<Vec<Vec<f64>>>;

    /// Labels each point with a cluster id or `-1` for noise.
    fn cluster(&self, points: &[Vec<f64>], params: &ClusterParams) -> Result<Vec<i32>>;
}

/// Renumbers non-noise ids to `0..k` in order of first appearance, turning
/// clusters smaller than `min_size` into noise.
pub fn densify(assignments: &[i32], min_size: usize) -> (Vec<i32>, usize) {
    let mut sizes: BTreeMap<i32, usize> = BTreeMap::new();
    for &a in assignments.iter().filter(|&&a| a >= 0) {
        *sizes.entry(a).or_default() += 1;
    }
    let mut map = BTreeMap::new();
    let out = assignments
        .iter()
        .map(|&a| {
            if a < 0 || sizes[&a] < min_size {
                return -1;
            }
            let next = map.len() as i32;
            *map.entry(a).or_insert(next)
        })
        .collect();
    (out, map.len())
}

fn backend_err(params: &ClusterParams, e: Error) -> Error {
    match e {
        Error::Backend { .. } => e,
        other => Error::Backend { message: other.to_string(), params: params.describe() },
    }
}

/// Clusters already-reduced points.
pub fn cluster_reduced(points: &[Vec<f64>], params: &ClusterParams, backend: &dyn ClusterBackend) -> Result<ClusterResult> {
    let raw = backend.cluster(points, params).map_err(|e| backend_err(params, e))?;
    if raw.len() != points.len() {
        return Err(Error::Backend {
            message: format!("backend returned {} labels for {} points", raw.len(), points.len()),
            params: params.describe(),
        });
    }
    let (assignments, n_clusters) = densify(&raw, params.min_cluster_size);
    let noise = assignments.iter().filter(|&&a| a < 0).count();
    Ok(ClusterResult {
        noise_fraction: noise as f64 / assignments.len().max(1) as f64,
        assignments,
        params: params.clone(),
        n_clusters,
    })
}

pub(crate) fn check_vectors(vectors: &[Vec<f64>]) -> Result<usize> {
    let dim = vectors.first().map(|v| v.len()).unwrap_or(0);
    if dim == 0 {
        return Err(Error::validation("embedding vectors are empty"));
    }
    if vectors.iter().any(|v| v.len() != dim) {
        return Err(Error::validation("embedding vectors have mixed lengths"));
    }
    if vectors.iter().flatten().any(|x| !x.is_finite()) {
        return Err(Error::validation("embedding vectors contain non-finite values"));
    }
    Ok(dim)
}

/// Reduces `vectors` to `params.reduce_dim` dimensions and clusters them.
pub fn reduce_and_cluster(vectors: &[Vec<f64>], params: &ClusterParams, backend: &dyn ClusterBackend) -> Result<ClusterResult> {
    params.validate()?;
    if vectors.len() < params.min_cluster_size {
        return Err(Error::validation(format!(
            "{} records is fewer than min_cluster_size {}",
            vectors.len(),
            params.min_cluster_size
        )));
    }
    check_vectors(vectors)?;
    let points = backend.reduce(vectors, params.reduce_dim, params.seed).map_err(|e| backend_err(params, e))?;
    cluster_reduced(&points, params, backend)
}


#[cfg(test)]
mod tests {
    use super::stubs::*;
    use super::*;

    #[test]
    fn densify_renumbers_and_drops_small_clusters() {
        let (d, k) = densify(&[7, 7, 7, -1, 3, 3, 3, 9], 2);
        assert_eq!(d, vec![0, 0, 0, -1, 1, 1, 1, -1]);
        assert_eq!(k, 2);
    }

    #[test]
    fn too_few_records_is_a_validation_error() {
        let v = vec![vec![0.0]; 4];
        let err = reduce_and_cluster(&v, &ClusterParams::default(), &RoundingBackend).unwrap_err();
        assert!(err.is_validation());
    }

    #[test]
    fn backend_failure_echoes_params() {
        let v = vec![vec![0.0]; 8];
        let err = reduce_and_cluster(&v, &ClusterParams::default(), &FailingBackend).unwrap_err();
        match err {
            Error::Backend { message, params } => {
                assert!(message.contains("boom"));
                assert!(params.contains("min_cluster_size=5"));
            }
            other => panic!("unexpected {other}"),
        }
    }

    #[test]
    fn stub_result_is_dense_with_noise_fraction() {
        let mut v: Vec<Vec<f64>> = (0..10).map(|i| vec![(i % 2) as f64 * 5.0]).collect();
        v.push(vec![-1.0]);
        let r = reduce_and_cluster(&v, &ClusterParams::default(), &RoundingBackend).unwrap();
        assert_eq!(r.n_clusters, 2);
        assert!((r.noise_fraction - 1.0 / 11.0).abs() < 1e-15);
        assert!(r.assignments.iter().all(|&a| a < r.n_clusters as i32));
    }
}
