//! Reference backend: neighbourhood-graph reduction followed by
//! hierarchical density clustering.
//!
//! The fuzzy neighbourhood graph comes from `umap-rs`; its optimizer draws
//! from an unseeded thread-local generator, so the layout step is run here
//! with the same update rule and a seeded stream.

use hdbscan::{Hdbscan, HdbscanHyperParams};
use ndarray::Array2;
use rand::Rng;
use umap_rs::{Umap, UmapConfig};

use super::cluster::{check_vectors, ClusterBackend, ClusterParams};
use crate::seed;
use crate::{Error, Result};

/// Graph-layout reduction plus density clustering.
#[derive(Debug, Clone)]
pub struct ReferenceBackend {
    pub n_neighbors: usize,
    pub min_dist: f32,
    pub n_epochs: usize,
    pub negative_sample_rate: usize,
    pub learning_rate: f64,
    pub repulsion_strength: f64,
}

impl Default for ReferenceBackend {
    fn default() -> Self {
        Self {
            n_neighbors: 15,
            min_dist: 0.1,
            n_epochs: 500,
            negative_sample_rate: 5,
            learning_rate: 1.0,
            repulsion_strength: 1.0,
        }
    }
}

fn fail(message: impl Into<String>, what: &str) -> Error {
    Error::Backend { message: message.into(), params: what.to_string() }
}

/// Exact k nearest neighbours (self first) by Euclidean distance.
pub fn knn(vectors: &[Vec<f64>], k: usize) -> (Array2<u32>, Array2<f32>) {
    let n = vectors.len();
    let mut idx = Array2::<u32>::zeros((n, k));
    let mut dist = Array2::<f32>::zeros((n, k));
    for i in 0..n {
        let mut row: Vec<(f64, usize)> = (0..n)
            .map(|j| {
                let d: f64 = vectors[i].iter().zip(&vectors[j]).map(|(a, b)| (a - b) * (a - b)).sum();
                (if i == j { -1.0 } else { d.sqrt() }, j)
            })
            .collect();
        row.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        for (c, &(d, j)) in row.iter().take(k).enumerate() {
            idx[[i, c]] = j as u32;
            dist[[i, c]] = d.max(0.0) as f32;
        }
    }
    (idx, dist)
}

fn clip(v: f64) -> f64 {
    v.clamp(-4.0, 4.0)
}

impl ReferenceBackend {
    /// Seeded single-threaded layout SGD over the fuzzy graph.
    fn layout(&self, edges: &[(usize, usize, f64)], n: usize, dim: usize, a: f64, b: f64, seed: u64) -> Vec<Vec<f64>> {
        let mut rng = seed::rng(seed, &[seed::stream::REDUCER]);
        let mut emb: Vec<Vec<f64>> =
            (0..n).map(|_| (0..dim).map(|_| rng.random_range(0.0..10.0)).collect()).collect();
        let w_max = edges.iter().map(|e| e.2).fold(0.0, f64::max);
        if edges.is_empty() || w_max <= 0.0 {
            return emb;
        }
        let n_epochs = self.n_epochs;
        let keep: Vec<&(usize, usize, f64)> = edges.iter().filter(|e| e.2 >= w_max / n_epochs as f64).collect();
        let eps: Vec<f64> = keep.iter().map(|e| w_max / e.2).collect();
        let eps_neg: Vec<f64> = eps.iter().map(|e| e / self.negative_sample_rate as f64).collect();
        let mut next = eps.clone();
        let mut next_neg = eps_neg.clone();
        let gamma = self.repulsion_strength;
        for epoch in 0..n_epochs {
            let alpha = self.learning_rate * (1.0 - epoch as f64 / n_epochs as f64);
            let ef = epoch as f64;
            for (i, &&(j, k, _)) in keep.iter().enumerate() {
                if next[i] > ef {
                    continue;
                }
                let d2: f64 = (0..dim).map(|d| (emb[j][d] - emb[k][d]).powi(2)).sum();
                let coeff = if d2 > 0.0 { -2.0 * a * b * d2.powf(b - 1.0) / (a * d2.powf(b) + 1.0) } else { 0.0 };
                for d in 0..dim {
                    let g = clip(coeff * (emb[j][d] - emb[k][d]));
                    emb[j][d] += g * alpha;
                    emb[k][d] -= g * alpha;
                }
                next[i] += eps[i];
                let n_neg = ((ef - next_neg[i]) / eps_neg[i]).floor().max(0.0) as usize;
                for _ in 0..n_neg {
                    let o = rng.random_range(0..n);
                    if o == j {
                        continue;
                    }
                    let d2: f64 = (0..dim).map(|d| (emb[j][d] - emb[o][d]).powi(2)).sum();
                    let coeff = if d2 > 0.0 { 2.0 * gamma * b / ((0.001 + d2) * (a * d2.powf(b) + 1.0)) } else { 0.0 };
                    for d in 0..dim {
                        let g = if coeff > 0.0 { clip(coeff * (emb[j][d] - emb[o][d])) } else { 4.0 };
                        emb[j][d] += g * alpha;
                    }
                }
                next_neg[i] += n_neg as f64 * eps_neg[i];
            }
        }
        emb
    }
}

impl ClusterBackend for ReferenceBackend {
    fn name(&self) -> &str {
        "umap-hdbscan"
    }

    fn reduce(&self, vectors: &[Vec<f64>], dim: usize, seed: u64) -> Result<Vec<Vec<f64>>> {
        let what = format!("reduce_dim={dim} seed={seed}");
        let width = check_vectors(vectors)?;
        let n = vectors.len();
        if n < 3 {
            return Err(fail(format!("reduction needs at least 3 records, got {n}"), &what));
        }
        // neighbour lists include the point itself; umap-rs wants n > k
        let k = self.n_neighbors.min(n - 1).max(2);
        let (idx, dist) = knn(vectors, k);
        let data = Array2::from_shape_fn((n, width), |(i, j)| vectors[i][j] as f32);
        let mut config = UmapConfig::default();
        config.n_components = dim;
        config.graph.n_neighbors = k;
        config.manifold.min_dist = self.min_dist;
        let manifold = Umap::new(config).learn_manifold(data.view(), idx.view(), dist.view());
        let (a, b) = manifold.curve_params();
        let edges: Vec<(usize, usize, f64)> =
            manifold.graph().iter().map(|(&w, (r, c))| (r as usize, c as usize, w as f64)).filter(|e| e.2 > 0.0).collect();
        let emb = self.layout(&edges, n, dim, a as f64, b as f64, seed);
        if emb.iter().flatten().any(|x| !x.is_finite()) {
            return Err(fail("layout diverged", &what));
        }
        Ok(emb)
    }

    fn cluster(&self, points: &[Vec<f64>], params: &ClusterParams) -> Result<Vec<i32>> {
        let hp = HdbscanHyperParams::builder()
            .min_cluster_size(params.min_cluster_size)
            .min_samples(params.min_samples.min(points.len().saturating_sub(1)).max(1))
            .epsilon(params.cluster_selection_epsilon)
            .build();
        Hdbscan::new(points, hp).cluster().map_err(|e| fail(e.to_string(), &params.describe()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::eval::cluster::reduce_and_cluster;
    use rand_distr::{Distribution, Normal};

    fn blobs(seed_value: u64) -> (Vec<Vec<f64>>, Vec<usize>) {
        let mut rng = seed::rng(seed_value, &[]);
        let noise = Normal::new(0.0, 0.01).unwrap();
        let centres = [[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0]];
        let mut v = Vec::new();
        let mut l = Vec::new();
        for (c, centre) in centres.iter().enumerate() {
            for _ in 0..50 {
                v.push(centre.iter().map(|x| x + noise.sample(&mut rng)).collect());
                l.push(c);
            }
        }
        (v, l)
    }

    #[test]
    fn knn_puts_self_first() {
        let v = vec![vec![0.0], vec![3.0], vec![1.0]];
        let (idx, dist) = knn(&v, 2);
        assert_eq!(idx.row(0).to_vec(), vec![0, 2]);
        assert_eq!(dist.row(1).to_vec(), vec![0.0, 2.0]);
    }

    #[test]
    fn separated_blobs_give_three_clean_clusters() {
        let (v, labels) = blobs(11);
        let r = reduce_and_cluster(&v, &ClusterParams::default(), &ReferenceBackend::default()).unwrap();
        assert_eq!(r.n_clusters, 3);
        assert_eq!(r.noise_fraction, 0.0);
        assert_eq!(crate::eval::nmi(&labels, &r.assignments).unwrap(), 1.0);
    }

    #[test]
    fn same_seed_same_assignments() {
        let (v, _) = blobs(12);
        let p = ClusterParams { seed: 5, ..ClusterParams::default() };
        let b = ReferenceBackend::default();
        assert_eq!(reduce_and_cluster(&v, &p, &b).unwrap(), reduce_and_cluster(&v, &p, &b).unwrap());
    }
}
