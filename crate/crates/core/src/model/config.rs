use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Architecture hyperparameters shared by both encoders and the decoder.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub n_mels: usize,
    /// Channel width of every hidden layer.
    pub hidden: usize,
    pub heads: usize,
    /// `d_G`: channels of the per-frame global latent.
    pub global_dim: usize,
    /// `d_L`: length of the local latent vector.
    pub local_dim: usize,
    /// Segment length used when shuffling the local encoder's input.
    pub segment_len: usize,
}

impl ModelConfig {
    /// Full-size architecture.
    pub fn paper() -> Self {
        Self { n_mels: 80, hidden: 256, heads: 4, global_dim: 128, local_dim: 128, segment_len: 32 }
    }

    /// Reduced architecture for single-CPU experiments.
    pub fn desk() -> Self {
        Self { n_mels: 80, hidden: 32, heads: 1, global_dim: 16, local_dim: 16, segment_len: 32 }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_mels == 0 || self.hidden == 0 || self.global_dim == 0 || self.local_dim == 0 || self.segment_len == 0 {
            return Err(Error::validation("model dimensions must be positive"));
        }
        if self.heads == 0 || !self.hidden.is_multiple_of(self.heads) {
            return Err(Error::validation(format!(
                "hidden width {} is not divisible by {} heads",
                self.hidden, self.heads
            )));
        }
        Ok(())
    }

    /// Closed-form parameter counts `(local encoder, global encoder, decoder)`.
    pub fn analytic_counts(&self) -> ParamCounts {
        let h = self.hidden;
        let conv = |cin: usize, cout: usize, k: usize| cin * cout * k + cout;
        let bn = 2 * h;
        let ln = 2 * h;
        let attention = 4 * (h * h + h) + ln;
        let trunk = |cin: usize| conv(cin, h, 1) + 2 * (conv(h, h, 3) + bn) + 2 * attention;
        let global = trunk(self.n_mels) + 2 * conv(h, self.global_dim, 1);
        let local = conv(self.n_mels, h, 1)
            + conv(h, h, 3)
            + conv(h, h, 3)
            + conv(h, h, 5)
            + ln
            + 2 * (h * self.local_dim + self.local_dim);
        let decoder = trunk(self.global_dim + self.local_dim) + conv(h, self.n_mels, 1);
        ParamCounts { local_encoder: local, global_encoder: global, decoder }
    }

    /// Closed-form count for the single-encoder baseline `(encoder, decoder)`.
    pub fn analytic_baseline_counts(&self) -> (usize, usize) {
        let h = self.hidden;
        let c = self.analytic_counts();
        let trunk_global = c.global_encoder - 2 * (h * self.global_dim + self.global_dim);
        let encoder = trunk_global + 2 * (h * self.local_dim + self.local_dim);
        let decoder = c.decoder - (self.global_dim + self.local_dim) * h + self.local_dim * h;
        (encoder, decoder)
    }
}

/// Trainable parameter counts per submodule.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamCounts {
    pub local_encoder: usize,
    pub global_encoder: usize,
    pub decoder: usize,
}

impl ParamCounts {
    pub fn total(&self) -> usize {
        self.local_encoder + self.global_encoder + self.decoder
    }
}
