//! Clustering evaluation: reduction + density clustering behind
//! [`ClusterBackend`], parameter search, NMI and projection plots.

pub mod backend;
pub mod cluster;
pub mod nmi;
pub mod plot;
pub mod search;

use serde::{Deserialize, Serialize};

pub use backend::ReferenceBackend;
pub use cluster::{cluster_reduced, densify, reduce_and_cluster, ClusterBackend, ClusterParams, ClusterResult};
pub use nmi::{nmi, nmi_with_noise, ContingencyTable, NoisePolicy};
pub use plot::{emit_projection_plot, project_2d};
pub use search::{search_cluster_params, GridScore, ParamGrid, SearchOutcome};

/// Contents of a clustering results file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterReport {
    pub params: ClusterParams,
    pub n_clusters: usize,
    pub noise_fraction: f64,
    pub nmi: Option<f64>,
}

impl ClusterReport {
    pub fn new(r: &ClusterResult, nmi: Option<f64>) -> Self {
        Self { params: r.params.clone(), n_clusters: r.n_clusters, noise_fraction: r.noise_fraction, nmi }
    }
}
