//! Global encoder, local encoder, decoder and the two assembled models.

use candle_core::{DType, Device, Tensor};

use super::gaussian::{DiagonalGaussian, LOG_VAR_MAX, LOG_VAR_MIN};
use super::layers::{
    masked_avg_pool2, relu, sinusoidal_positions, Conv1d, LayerNorm, Linear, Mask, MaskedBatchNorm,
    SelfAttention,
};
use super::params::{Init, ParamStore};
use super::shuffle::shuffle_matrix;
use super::{ModelConfig, ParamCounts};
use crate::data::MelSpectrogram;
use crate::seed;
use crate::{Error, Result};

/// A zero-padded batch of spectrograms plus the shuffled copy fed to the local encoder.
#[derive(Debug, Clone)]
pub struct Batch {
    /// `[B, n_mels, T_max]`.
    pub x: Tensor,
    /// Same shape as `x`; each song's valid region block-shuffled.
    pub x_shuffled: Tensor,
    pub mask: Mask,
}

impl Batch {
    fn pack(rows: &[(usize, &[f32])], n_mels: usize, t_max: usize, dtype: DType) -> Result<Tensor> {
        let mut data = vec![0f32; rows.len() * n_mels * t_max];
        for (i, &(t, values)) in rows.iter().enumerate() {
            for band in 0..n_mels {
                let dst = &mut data[(i * n_mels + band) * t_max..][..t];
                dst.copy_from_slice(&values[band * t..(band + 1) * t]);
            }
        }
        Ok(Tensor::from_vec(data, (rows.len(), n_mels, t_max), &Device::Cpu)?.to_dtype(dtype)?)
    }

    fn check(specs: &[&MelSpectrogram]) -> Result<usize> {
        let first = specs.first().ok_or_else(|| Error::validation("empty batch"))?;
        if let Some(s) = specs.iter().find(|s| s.n_frames == 0) {
            return Err(Error::validation(format!("spectrogram '{}' has zero frames", s.id)));
        }
        if specs.iter().any(|s| s.n_mels != first.n_mels) {
            return Err(Error::validation("mixed band counts in one batch"));
        }
        Ok(first.n_mels)
    }

    /// Batch without shuffling: the local encoder sees the original frame order.
    pub fn unshuffled(specs: &[&MelSpectrogram], dtype: DType) -> Result<Self> {
        let n_mels = Self::check(specs)?;
        let t_max = specs.iter().map(|s| s.n_frames).max().unwrap_or(0);
        let rows: Vec<(usize, &[f32])> = specs.iter().map(|s| (s.n_frames, s.values.as_slice())).collect();
        let x = Self::pack(&rows, n_mels, t_max, dtype)?;
        let mask = Mask::new(specs.iter().map(|s| s.n_frames).collect(), t_max, dtype)?;
        Ok(Self { x_shuffled: x.clone(), x, mask })
    }

    /// Batch whose local-encoder copy is block-shuffled, song `i` with `seeds[i]`.
    pub fn shuffled(specs: &[&MelSpectrogram], segment_len: usize, seeds: &[u64], dtype: DType) -> Result<Self> {
        let n_mels = Self::check(specs)?;
        let t_max = specs.iter().map(|s| s.n_frames).max().unwrap_or(0);
        let rows: Vec<(usize, &[f32])> = specs.iter().map(|s| (s.n_frames, s.values.as_slice())).collect();
        let x = Self::pack(&rows, n_mels, t_max, dtype)?;
        let shuffled: Vec<Vec<f32>> = specs
            .iter()
            .zip(seeds)
            .map(|(s, &sd)| shuffle_matrix(&s.values, s.n_mels, s.n_frames, segment_len, sd))
            .collect();
        let srows: Vec<(usize, &[f32])> =
            specs.iter().zip(&shuffled).map(|(s, v)| (s.n_frames, v.as_slice())).collect();
        let x_shuffled = Self::pack(&srows, n_mels, t_max, dtype)?;
        let mask = Mask::new(specs.iter().map(|s| s.n_frames).collect(), t_max, dtype)?;
        Ok(Self { x, x_shuffled, mask })
    }

    pub fn size(&self) -> usize {
        self.mask.lengths.len()
    }
}

/// `conv(k=1) → [conv(k=3) + batch-norm + ReLU] × 2 → positions → self-attention × 2`.
#[derive(Debug, Clone)]
pub struct TemporalTrunk {
    pub input: Conv1d,
    pub convs: [Conv1d; 2],
    pub norms: [MaskedBatchNorm; 2],
    pub attention: [SelfAttention; 2],
    pub hidden: usize,
}

impl TemporalTrunk {
    pub fn new(init: &mut Init<'_>, cin: usize, hidden: usize, heads: usize) -> Result<Self> {
        Ok(Self {
            input: Conv1d::new(init, "conv_in", cin, hidden, 1)?,
            convs: [Conv1d::new(init, "conv1", hidden, hidden, 3)?, Conv1d::new(init, "conv2", hidden, hidden, 3)?],
            norms: [MaskedBatchNorm::new(init, "bn1", hidden)?, MaskedBatchNorm::new(init, "bn2", hidden)?],
            attention: [
                SelfAttention::new(init, "attn1", hidden, heads)?,
                SelfAttention::new(init, "attn2", hidden, heads)?,
            ],
            hidden,
        })
    }

    /// Channels-last `[B, T, cin] → [B, T, hidden]`.
    pub fn forward(&self, x: &Tensor, mask: &Mask, train: bool) -> Result<Tensor> {
        let mut h = self.input.forward(&mask.apply(x)?)?;
        for (conv, bn) in self.convs.iter().zip(&self.norms) {
            h = relu(&bn.forward(&conv.forward(&mask.apply(&h)?)?, mask, train)?)?;
        }
        let t = h.dim(1)?;
        let pos = sinusoidal_positions(t, self.hidden, h.dtype())?;
        let mut h = h.broadcast_add(&pos)?;
        for att in &self.attention {
            h = att.forward(&h, &mask.lengths)?;
        }
        Ok(h)
    }
}

fn clamp_log_var(lv: Tensor) -> Result<Tensor> {
    Ok(lv.clamp(LOG_VAR_MIN, LOG_VAR_MAX)?)
}

/// Per-frame posterior `q(Z_G | X)` over `[d_G × T]`.
#[derive(Debug, Clone)]
pub struct GlobalEncoder {
    pub trunk: TemporalTrunk,
    pub mean_head: Conv1d,
    pub log_var_head: Conv1d,
}

impl GlobalEncoder {
    pub fn new(init: &mut Init<'_>, cfg: &ModelConfig) -> Result<Self> {
        Ok(Self {
            trunk: TemporalTrunk::new(init, cfg.n_mels, cfg.hidden, cfg.heads)?,
            mean_head: Conv1d::new(init, "mean_head", cfg.hidden, cfg.global_dim, 1)?,
            log_var_head: Conv1d::new(init, "log_var_head", cfg.hidden, cfg.global_dim, 1)?,
        })
    }

    pub fn forward(&self, x: &Tensor, mask: &Mask, train: bool) -> Result<DiagonalGaussian> {
        if mask.t_max() == 0 || mask.lengths.contains(&0) {
            return Err(Error::validation("global encoder input has zero frames"));
        }
        let h = self.trunk.forward(&channels_last(x)?, mask, train)?;
        let mean = channels_first(&self.mean_head.forward(&h)?)?;
        let log_var = clamp_log_var(channels_first(&self.log_var_head.forward(&h)?)?)?;
        DiagonalGaussian::new(mean, log_var)
    }
}

/// Length-independent posterior `q(Z_L | X)` over `[d_L]`.
#[derive(Debug, Clone)]
pub struct LocalEncoder {
    pub input: Conv1d,
    pub convs: [Conv1d; 3],
    pub norm: LayerNorm,
    pub mean_head: Linear,
    pub log_var_head: Linear,
}

impl LocalEncoder {
    pub fn new(init: &mut Init<'_>, cfg: &ModelConfig) -> Result<Self> {
        let h = cfg.hidden;
        Ok(Self {
            input: Conv1d::new(init, "conv_in", cfg.n_mels, h, 1)?,
            convs: [
                Conv1d::new(init, "conv1", h, h, 3)?,
                Conv1d::new(init, "conv2", h, h, 3)?,
                Conv1d::new(init, "conv3", h, h, 5)?,
            ],
            norm: LayerNorm::new(init, "norm", h)?,
            mean_head: Linear::new(init, "mean_head", h, cfg.local_dim)?,
            log_var_head: Linear::new(init, "log_var_head", h, cfg.local_dim)?,
        })
    }

    /// Pooled features `[B, hidden]` before the heads.
    pub fn features(&self, x: &Tensor, mask: &Mask) -> Result<Tensor> {
        if mask.t_max() == 0 || mask.lengths.contains(&0) {
            return Err(Error::validation("local encoder input has zero frames"));
        }
        let mut mask = mask.clone();
        let mut h = self.input.forward(&mask.apply(&channels_last(x)?)?)?;
        for conv in &self.convs {
            let c = relu(&conv.forward(&mask.apply(&h)?)?)?;
            let (pooled, m) = masked_avg_pool2(&c, &mask)?;
            h = pooled;
            mask = m;
        }
        let h = self.norm.forward(&h)?;
        mask.mean_over_frames(&h)
    }

    pub fn forward(&self, x: &Tensor, mask: &Mask) -> Result<DiagonalGaussian> {
        let v = self.features(x, mask)?;
        let mean = self.mean_head.forward(&v)?;
        let log_var = clamp_log_var(self.log_var_head.forward(&v)?)?;
        DiagonalGaussian::new(mean, log_var)
    }
}

/// Reconstructs `[n_mels × T]` from a `[d_in × T]` latent.
#[derive(Debug, Clone)]
pub struct Decoder {
    pub trunk: TemporalTrunk,
    pub output: Conv1d,
    pub input_dim: usize,
}

impl Decoder {
    pub fn new(init: &mut Init<'_>, input_dim: usize, cfg: &ModelConfig) -> Result<Self> {
        Ok(Self {
            trunk: TemporalTrunk::new(init, input_dim, cfg.hidden, cfg.heads)?,
            output: Conv1d::new(init, "conv_out", cfg.hidden, cfg.n_mels, 1)?,
            input_dim,
        })
    }

    /// `[B, d_in, T] → [B, n_mels, T]`.
    pub fn forward(&self, z: &Tensor, mask: &Mask, train: bool) -> Result<Tensor> {
        self.forward_frames(&channels_last(z)?, mask, train)
    }

    /// Channels-last latent `[B, T, d_in]` to channels-first `[B, n_mels, T]`.
    pub fn forward_frames(&self, z: &Tensor, mask: &Mask, train: bool) -> Result<Tensor> {
        if z.dim(2)? != self.input_dim {
            return Err(Error::validation(format!(
                "decoder expects {} latent channels, got {}",
                self.input_dim,
                z.dim(2)?
            )));
        }
        let h = self.trunk.forward(z, mask, train)?;
        channels_first(&self.output.forward(&h)?)
    }
}

fn channels_last(x: &Tensor) -> Result<Tensor> {
    Ok(x.transpose(1, 2)?.contiguous()?)
}

fn channels_first(x: &Tensor) -> Result<Tensor> {
    Ok(x.transpose(1, 2)?.contiguous()?)
}

/// Broadcasts `[B, d]` along time to `[B, d, T]`.
pub fn expand_over_time(z: &Tensor, t: usize) -> Result<Tensor> {
    let (b, d) = z.dims2()?;
    Ok(z.reshape((b, d, 1))?.broadcast_as((b, d, t))?.contiguous()?)
}

/// Broadcasts `[B, d]` along time to channels-last `[B, T, d]`.
pub fn expand_over_frames(z: &Tensor, t: usize) -> Result<Tensor> {
    let (b, d) = z.dims2()?;
    Ok(z.reshape((b, 1, d))?.broadcast_as((b, t, d))?.contiguous()?)
}

/// Posteriors and reconstruction of one forward pass.
#[derive(Debug, Clone)]
pub struct DualOutput {
    pub q_global: DiagonalGaussian,
    pub q_local: DiagonalGaussian,
    pub recon: Tensor,
}

/// Standard-normal noise for both reparameterizations.
#[derive(Debug, Clone)]
pub struct Noise {
    pub global: Tensor,
    pub local: Tensor,
}

impl Noise {
    pub fn draw(cfg: &ModelConfig, batch: usize, t: usize, dtype: DType, seed: u64) -> Result<Self> {
        Ok(Self {
            global: super::gaussian::standard_normal(&[batch, cfg.global_dim, t], dtype, seed::derive(seed, &[0]))?,
            local: super::gaussian::standard_normal(&[batch, cfg.local_dim], dtype, seed::derive(seed, &[1]))?,
        })
    }

    pub fn zeros(cfg: &ModelConfig, batch: usize, t: usize, dtype: DType) -> Result<Self> {
        Ok(Self {
            global: Tensor::zeros((batch, cfg.global_dim, t), dtype, &Device::Cpu)?,
            local: Tensor::zeros((batch, cfg.local_dim), dtype, &Device::Cpu)?,
        })
    }
}

/// The dual-encoder VAE.
#[derive(Debug, Clone)]
pub struct DualVae {
    pub config: ModelConfig,
    pub store: ParamStore,
    pub global: GlobalEncoder,
    pub local: LocalEncoder,
    pub decoder: Decoder,
}

impl DualVae {
    pub fn new(config: ModelConfig, dtype: DType, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new(dtype);
        let mut rng = seed::rng(seed, &[seed::stream::INIT]);
        let mut init = Init::new(&mut store, &mut rng);
        let global = init.scoped("global", |i| GlobalEncoder::new(i, &config))?;
        let local = init.scoped("local", |i| LocalEncoder::new(i, &config))?;
        let decoder = init.scoped("decoder", |i| Decoder::new(i, config.global_dim + config.local_dim, &config))?;
        Ok(Self { config, store, global, local, decoder })
    }

    pub fn dtype(&self) -> DType {
        self.store.dtype()
    }

    pub fn encode_global(&self, batch: &Batch, train: bool) -> Result<DiagonalGaussian> {
        self.global.forward(&batch.x, &batch.mask, train)
    }

    pub fn encode_local(&self, batch: &Batch) -> Result<DiagonalGaussian> {
        self.local.forward(&batch.x_shuffled, &batch.mask)
    }

    /// Decodes `z_g: [B, d_G, T]` and `z_l: [B, d_L]`.
    pub fn decode(&self, z_g: &Tensor, z_l: &Tensor, mask: &Mask, train: bool) -> Result<Tensor> {
        let (_, dg, t) = z_g.dims3()?;
        let (_, dl) = z_l.dims2()?;
        if dg != self.config.global_dim || dl != self.config.local_dim {
            return Err(Error::validation(format!(
                "latent dims ({dg}, {dl}) do not match model ({}, {})",
                self.config.global_dim, self.config.local_dim
            )));
        }
        let z = Tensor::cat(&[&channels_last(z_g)?, &expand_over_frames(z_l, t)?], 2)?;
        self.decoder.forward_frames(&z, mask, train)
    }

    pub fn forward(&self, batch: &Batch, noise: &Noise, train: bool) -> Result<DualOutput> {
        let q_global = self.encode_global(batch, train)?;
        let q_local = self.encode_local(batch)?;
        let z_g = q_global.reparameterize(&noise.global)?;
        let z_l = q_local.reparameterize(&noise.local)?;
        let recon = self.decode(&z_g, &z_l, &batch.mask, train)?;
        Ok(DualOutput { q_global, q_local, recon })
    }

    pub fn param_counts(&self) -> ParamCounts {
        ParamCounts {
            local_encoder: self.store.count("local."),
            global_encoder: self.store.count("global."),
            decoder: self.store.count("decoder."),
        }
    }

    /// Zeroes both encoders' output heads so every posterior equals the prior.
    pub fn zero_output_heads(&self) -> Result<()> {
        for (name, var) in self.store.params() {
            if name.contains("mean_head") || name.contains("log_var_head") {
                var.set(&var.as_tensor().zeros_like()?)?;
            }
        }
        Ok(())
    }
}

/// Single-encoder baseline: the global encoder's trunk, averaged over time
/// into one latent vector, decoded by broadcasting it over the frames.
#[derive(Debug, Clone)]
pub struct VanillaVae {
    pub config: ModelConfig,
    pub store: ParamStore,
    pub trunk: TemporalTrunk,
    pub mean_head: Linear,
    pub log_var_head: Linear,
    pub decoder: Decoder,
}

/// Baseline forward output.
#[derive(Debug, Clone)]
pub struct VanillaOutput {
    pub q: DiagonalGaussian,
    pub recon: Tensor,
}

impl VanillaVae {
    pub fn new(config: ModelConfig, dtype: DType, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new(dtype);
        let mut rng = seed::rng(seed, &[seed::stream::INIT, 1]);
        let mut init = Init::new(&mut store, &mut rng);
        let d = config.local_dim;
        let (trunk, mean_head, log_var_head) = init.scoped("encoder", |i| {
            Ok((
                TemporalTrunk::new(i, config.n_mels, config.hidden, config.heads)?,
                Linear::new(i, "mean_head", config.hidden, d)?,
                Linear::new(i, "log_var_head", config.hidden, d)?,
            ))
        })?;
        let decoder = init.scoped("decoder", |i| Decoder::new(i, d, &config))?;
        Ok(Self { config, store, trunk, mean_head, log_var_head, decoder })
    }

    pub fn dtype(&self) -> DType {
        self.store.dtype()
    }

    /// One latent vector per song.
    pub fn encode(&self, batch: &Batch, train: bool) -> Result<DiagonalGaussian> {
        if batch.mask.lengths.contains(&0) {
            return Err(Error::validation("baseline encoder input has zero frames"));
        }
        let h = self.trunk.forward(&channels_last(&batch.x)?, &batch.mask, train)?;
        let v = batch.mask.mean_over_frames(&h)?;
        let mean = self.mean_head.forward(&v)?;
        let log_var = clamp_log_var(self.log_var_head.forward(&v)?)?;
        DiagonalGaussian::new(mean, log_var)
    }

    pub fn forward(&self, batch: &Batch, eps: &Tensor, train: bool) -> Result<VanillaOutput> {
        let q = self.encode(batch, train)?;
        let z = q.reparameterize(eps)?;
        let recon = self.decoder.forward_frames(&expand_over_frames(&z, batch.mask.t_max())?, &batch.mask, train)?;
        Ok(VanillaOutput { q, recon })
    }

    /// `(encoder, decoder)` parameter counts.
    pub fn param_counts(&self) -> (usize, usize) {
        (self.store.count("encoder."), self.store.count("decoder."))
    }
}
