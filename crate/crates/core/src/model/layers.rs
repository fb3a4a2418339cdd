//! Masked building blocks.
//!
//! Layers work channels-last on `[batch, time, channels]` tensors. Padded
//! frames are excluded from convolution inputs, batch statistics, attention
//! keys and pooling, so a padded batch computes exactly what each song would
//! compute alone (given the same normalization statistics).

use candle_core::{CpuStorage, CustomOp1, CustomOp2, DType, Layout, Shape, Tensor, Var, D};

use super::params::Init;
use crate::Result;

/// Per-song valid lengths plus the matching 0/1 masks.
#[derive(Debug, Clone)]
pub struct Mask {
    /// `[B, 1, T]`, for channels-first tensors.
    pub tensor: Tensor,
    /// `[B, T, 1]`, for channels-last tensors.
    pub frames: Tensor,
    pub lengths: Vec<usize>,
}

impl Mask {
    pub fn new(lengths: Vec<usize>, t_max: usize, dtype: DType) -> Result<Self> {
        let b = lengths.len();
        let mut data = vec![0f64; b * t_max];
        for (i, &l) in lengths.iter().enumerate() {
            data[i * t_max..i * t_max + l.min(t_max)].iter_mut().for_each(|v| *v = 1.0);
        }
        let tensor = Tensor::from_vec(data, (b, 1, t_max), &candle_core::Device::Cpu)?.to_dtype(dtype)?;
        let frames = tensor.reshape((b, t_max, 1))?;
        Ok(Self { tensor, frames, lengths })
    }

    pub fn t_max(&self) -> usize {
        self.tensor.dim(2).unwrap_or(0)
    }

    pub fn count(&self) -> usize {
        self.lengths.iter().sum()
    }

    /// Mask after a width-2 ceil-mode pooling step.
    pub fn pooled(&self) -> Result<Self> {
        let lengths = self.lengths.iter().map(|l| l.div_ceil(2)).collect();
        Mask::new(lengths, self.t_max().div_ceil(2), self.tensor.dtype())
    }

    fn lengths_column(&self, dtype: DType) -> Result<Tensor> {
        let denom: Vec<f64> = self.lengths.iter().map(|&l| l.max(1) as f64).collect();
        Ok(Tensor::from_vec(denom, (self.lengths.len(), 1), &candle_core::Device::Cpu)?.to_dtype(dtype)?)
    }

    /// Masked mean over time, channels-first: `[B, C, T]` → `[B, C]`.
    pub fn mean_over_time(&self, x: &Tensor) -> Result<Tensor> {
        let sums = x.broadcast_mul(&self.tensor)?.sum(2)?;
        Ok(sums.broadcast_div(&self.lengths_column(x.dtype())?)?)
    }

    /// Masked mean over time, channels-last: `[B, T, C]` → `[B, C]`.
    pub fn mean_over_frames(&self, x: &Tensor) -> Result<Tensor> {
        let sums = self.tensor.matmul(&x.contiguous()?)?.squeeze(1)?;
        Ok(sums.broadcast_div(&self.lengths_column(x.dtype())?)?)
    }

    /// Zeroes padded frames of a channels-last tensor.
    pub fn apply(&self, x: &Tensor) -> Result<Tensor> {
        Ok(x.broadcast_mul(&self.frames)?)
    }
}

pub fn relu(x: &Tensor) -> Result<Tensor> {
    Ok(x.relu()?)
}

/// 1-D convolution with "same" zero padding as one matrix product; the
/// weight is `[k·in, out]`, tap-major.
#[derive(Debug, Clone)]
pub struct Conv1d {
    pub weight: Var,
    pub bias: Var,
    pub kernel: usize,
    pub in_channels: usize,
    pub out_channels: usize,
}

impl Conv1d {
    pub fn new(init: &mut Init<'_>, name: &str, cin: usize, cout: usize, kernel: usize) -> Result<Self> {
        init.scoped(name, |init| {
            Ok(Self {
                weight: init.fan_in("weight", &[cin * kernel, cout], cin * kernel)?,
                bias: init.zeros("bias", &[cout])?,
                kernel,
                in_channels: cin,
                out_channels: cout,
            })
        })
    }

    /// `[B, T, in] → [B, T, out]`; `x` must already be zero on padded frames.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (b, t, c) = x.dims3()?;
        let cols = if self.kernel == 1 {
            x.contiguous()?
        } else {
            let left = (self.kernel - 1) / 2;
            let padded = x.pad_with_zeros(1, left, self.kernel - 1 - left)?;
            let views = (0..self.kernel)
                .map(|j| padded.narrow(1, j, t))
                .collect::<candle_core::Result<Vec<_>>>()?;
            Tensor::cat(&views, 2)?
        };
        let y = cols.reshape((b * t, c * self.kernel))?.matmul(self.weight.as_tensor())?;
        Ok(y.broadcast_add(self.bias.as_tensor())?.reshape((b, t, self.out_channels))?)
    }
}

/// Dense layer on the last dimension, weight stored `[in, out]`.
#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: Var,
    pub bias: Var,
}

impl Linear {
    pub fn new(init: &mut Init<'_>, name: &str, din: usize, dout: usize) -> Result<Self> {
        init.scoped(name, |init| {
            Ok(Self { weight: init.fan_in("weight", &[din, dout], din)?, bias: init.zeros("bias", &[dout])? })
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let dims = x.dims().to_vec();
        let din = *dims.last().unwrap_or(&0);
        let rows = x.elem_count() / din.max(1);
        let y = x.contiguous()?.reshape((rows, din))?.matmul(self.weight.as_tensor())?;
        let mut out = dims;
        if let Some(l) = out.last_mut() {
            *l = self.weight.dim(1)?;
        }
        Ok(y.broadcast_add(self.bias.as_tensor())?.reshape(out)?)
    }
}

/// Layer normalization over the last dimension.
#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gamma: Var,
    pub beta: Var,
    pub eps: f64,
}

impl LayerNorm {
    pub fn new(init: &mut Init<'_>, name: &str, dim: usize) -> Result<Self> {
        init.scoped(name, |init| {
            Ok(Self { gamma: init.ones("gamma", &[dim])?, beta: init.zeros("beta", &[dim])?, eps: 1e-5 })
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mean = x.mean_keepdim(D::Minus1)?;
        let xc = x.broadcast_sub(&mean)?;
        let var = xc.sqr()?.mean_keepdim(D::Minus1)?;
        let xn = xc.broadcast_div(&(var + self.eps)?.sqrt()?)?;
        Ok(xn.broadcast_mul(self.gamma.as_tensor())?.broadcast_add(self.beta.as_tensor())?)
    }
}

/// Batch normalization over channels-last tensors whose statistics skip padded frames.
#[derive(Debug, Clone)]
pub struct MaskedBatchNorm {
    pub gamma: Var,
    pub beta: Var,
    pub running_mean: Var,
    pub running_var: Var,
    pub momentum: f64,
    pub eps: f64,
}

impl MaskedBatchNorm {
    pub fn new(init: &mut Init<'_>, name: &str, channels: usize) -> Result<Self> {
        init.scoped(name, |init| {
            Ok(Self {
                gamma: init.ones("gamma", &[channels])?,
                beta: init.zeros("beta", &[channels])?,
                running_mean: init.buffer("running_mean", &[channels], 0.0)?,
                running_var: init.buffer("running_var", &[channels], 1.0)?,
                momentum: 0.1,
                eps: 1e-5,
            })
        })
    }

    /// In training mode normalizes with masked batch statistics and folds them
    /// into the running estimates; otherwise uses the running estimates.
    pub fn forward(&self, x: &Tensor, mask: &Mask, train: bool) -> Result<Tensor> {
        let (b, t, c) = x.dims3()?;
        let (mean, var) = if train {
            let n = mask.count().max(1) as f64;
            // masked sums over (B, T) as one row-vector product
            let weights = mask.tensor.reshape((1, b * t))?;
            let flat = x.contiguous()?.reshape((b * t, c))?;
            let mean = (weights.matmul(&flat)? / n)?.reshape(c)?;
            let xc = flat.broadcast_sub(&mean)?;
            let var = (weights.matmul(&xc.sqr()?)? / n)?.reshape(c)?;
            let unbiased = if n > 1.0 { n / (n - 1.0) } else { 1.0 };
            let m = self.momentum;
            let rm = ((self.running_mean.as_tensor() * (1.0 - m))? + (mean.detach() * m)?)?;
            let rv = ((self.running_var.as_tensor() * (1.0 - m))? + (var.detach() * (m * unbiased))?)?;
            self.running_mean.set(&rm)?;
            self.running_var.set(&rv)?;
            (mean, var)
        } else {
            (self.running_mean.as_tensor().clone(), self.running_var.as_tensor().clone())
        };
        let scale = self.gamma.as_tensor().div(&(var + self.eps)?.sqrt()?)?;
        let shift = self.beta.as_tensor().sub(&mean.mul(&scale)?)?;
        Ok(x.broadcast_mul(&scale)?.broadcast_add(&shift)?)
    }
}

/// Softmax over the last dimension of `[B, H, Tq, Tk]` attention scores,
/// restricted to the first `lengths[b]` keys; padded keys get probability 0.
struct MaskedSoftmax {
    lengths: Vec<usize>,
}

fn rows_per_song(shape: &Shape, songs: usize) -> candle_core::Result<(usize, usize)> {
    let dims = shape.dims();
    let tk = *dims.last().ok_or_else(|| candle_core::Error::Msg("softmax on a scalar".into()))?;
    let rows = shape.elem_count() / tk.max(1);
    if dims.len() != 4 || dims[0] != songs {
        return Err(candle_core::Error::Msg(format!("masked softmax expects [{songs}, H, Tq, Tk], got {dims:?}")));
    }
    Ok((rows / songs, tk))
}

trait Real: Copy + PartialOrd + std::ops::Sub<Output = Self> + std::ops::Mul<Output = Self> + std::ops::Div<Output = Self> + std::ops::AddAssign {
    const ZERO: Self;
    fn exp(self) -> Self;
}

impl Real for f32 {
    const ZERO: Self = 0.0;
    fn exp(self) -> Self {
        f32::exp(self)
    }
}

impl Real for f64 {
    const ZERO: Self = 0.0;
    fn exp(self) -> Self {
        f64::exp(self)
    }
}

fn softmax_rows<T: Real>(x: &[T], lengths: &[usize], per_song: usize, tk: usize) -> Vec<T> {
    let mut out = vec![T::ZERO; x.len()];
    for (r, (src, dst)) in x.chunks_exact(tk).zip(out.chunks_exact_mut(tk)).enumerate() {
        let valid = lengths[r / per_song].min(tk);
        if valid == 0 {
            continue;
        }
        let mut max = src[0];
        for &v in &src[1..valid] {
            if v > max {
                max = v;
            }
        }
        let mut sum = T::ZERO;
        for (d, &v) in dst[..valid].iter_mut().zip(&src[..valid]) {
            *d = (v - max).exp();
            sum += *d;
        }
        for d in &mut dst[..valid] {
            *d = *d / sum;
        }
    }
    out
}

/// `dx = y ⊙ (g − Σ g·y)` row by row.
fn softmax_grad_rows<T: Real>(y: &[T], g: &[T], tk: usize) -> Vec<T> {
    let mut out = vec![T::ZERO; y.len()];
    for ((yr, gr), dst) in y.chunks_exact(tk).zip(g.chunks_exact(tk)).zip(out.chunks_exact_mut(tk)) {
        let mut dot = T::ZERO;
        for (&a, &b) in yr.iter().zip(gr) {
            dot += a * b;
        }
        for ((d, &a), &b) in dst.iter_mut().zip(yr).zip(gr) {
            *d = a * (b - dot);
        }
    }
    out
}

fn contiguous<'a, T>(data: &'a [T], layout: &Layout) -> candle_core::Result<&'a [T]> {
    match layout.contiguous_offsets() {
        Some((a, b)) => Ok(&data[a..b]),
        None => Err(candle_core::Error::Msg("masked softmax needs contiguous input".into())),
    }
}

impl CustomOp1 for MaskedSoftmax {
    fn name(&self) -> &'static str {
        "masked-softmax"
    }

    fn cpu_fwd(&self, storage: &CpuStorage, layout: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let (per_song, tk) = rows_per_song(layout.shape(), self.lengths.len())?;
        let out = match storage {
            CpuStorage::F32(v) => CpuStorage::F32(softmax_rows(contiguous(v, layout)?, &self.lengths, per_song, tk)),
            CpuStorage::F64(v) => CpuStorage::F64(softmax_rows(contiguous(v, layout)?, &self.lengths, per_song, tk)),
            _ => return Err(candle_core::Error::Msg("masked softmax supports f32 and f64".into())),
        };
        Ok((out, layout.shape().clone()))
    }

    fn bwd(&self, _arg: &Tensor, res: &Tensor, grad_res: &Tensor) -> candle_core::Result<Option<Tensor>> {
        let g = grad_res.contiguous()?;
        Ok(Some(res.contiguous()?.apply_op2_no_bwd(&g, &SoftmaxGrad)?))
    }
}

struct SoftmaxGrad;

impl CustomOp2 for SoftmaxGrad {
    fn name(&self) -> &'static str {
        "masked-softmax-grad"
    }

    fn cpu_fwd(
        &self,
        s1: &CpuStorage,
        l1: &Layout,
        s2: &CpuStorage,
        l2: &Layout,
    ) -> candle_core::Result<(CpuStorage, Shape)> {
        let tk = *l1.shape().dims().last().unwrap_or(&1);
        let out = match (s1, s2) {
            (CpuStorage::F32(y), CpuStorage::F32(g)) => {
                CpuStorage::F32(softmax_grad_rows(contiguous(y, l1)?, contiguous(g, l2)?, tk))
            }
            (CpuStorage::F64(y), CpuStorage::F64(g)) => {
                CpuStorage::F64(softmax_grad_rows(contiguous(y, l1)?, contiguous(g, l2)?, tk))
            }
            _ => return Err(candle_core::Error::Msg("softmax gradient dtype mismatch".into())),
        };
        Ok((out, l1.shape().clone()))
    }
}

/// Softmax of `[B, H, Tq, Tk]` scores over each song's valid keys.
pub fn masked_softmax(scores: &Tensor, lengths: &[usize]) -> Result<Tensor> {
    Ok(scores.contiguous()?.apply_op1(MaskedSoftmax { lengths: lengths.to_vec() })?)
}

/// Fixed sinusoidal position table `[T, C]`.
pub fn sinusoidal_positions(t: usize, c: usize, dtype: DType) -> Result<Tensor> {
    let mut data = vec![0f64; t * c];
    for pos in 0..t {
        for i in 0..c {
            let rate = 1.0 / 10_000f64.powf((2 * (i / 2)) as f64 / c as f64);
            let angle = pos as f64 * rate;
            data[pos * c + i] = if i % 2 == 0 { angle.sin() } else { angle.cos() };
        }
    }
    Ok(Tensor::from_vec(data, (t, c), &candle_core::Device::Cpu)?.to_dtype(dtype)?)
}

/// Multi-head self-attention with residual connection and post layer-norm,
/// on `[B, T, C]` tensors.
#[derive(Debug, Clone)]
pub struct SelfAttention {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub output: Linear,
    pub norm: LayerNorm,
    pub heads: usize,
}

impl SelfAttention {
    pub fn new(init: &mut Init<'_>, name: &str, width: usize, heads: usize) -> Result<Self> {
        init.scoped(name, |init| {
            Ok(Self {
                query: Linear::new(init, "query", width, width)?,
                key: Linear::new(init, "key", width, width)?,
                value: Linear::new(init, "value", width, width)?,
                output: Linear::new(init, "output", width, width)?,
                norm: LayerNorm::new(init, "norm", width)?,
                heads,
            })
        })
    }

    pub fn forward(&self, x: &Tensor, lengths: &[usize]) -> Result<Tensor> {
        let (b, t, c) = x.dims3()?;
        let dh = c / self.heads;
        let split = |y: Tensor| -> Result<Tensor> {
            Ok(y.reshape((b, t, self.heads, dh))?.transpose(1, 2)?.contiguous()?)
        };
        let q = split((self.query.forward(x)? * (1.0 / (dh as f64).sqrt()))?)?;
        let k = split(self.key.forward(x)?)?;
        let v = split(self.value.forward(x)?)?;
        let scores = q.matmul(&k.t()?)?;
        let att = masked_softmax(&scores, lengths)?;
        let o = att.matmul(&v)?.transpose(1, 2)?.reshape((b, t, c))?;
        let o = self.output.forward(&o)?;
        self.norm.forward(&(x + o)?)
    }
}

/// Width-2 ceil-mode average pooling over time (channels-last) that
/// averages valid frames only.
pub fn masked_avg_pool2(x: &Tensor, mask: &Mask) -> Result<(Tensor, Mask)> {
    let (b, t, c) = x.dims3()?;
    let pad = t % 2;
    let xm = mask.apply(x)?.pad_with_zeros(1, 0, pad)?;
    let m = mask.frames.pad_with_zeros(1, 0, pad)?;
    let half = (t + pad) / 2;
    let sums = xm.reshape((b, half, 2 * c))?;
    let sums = (sums.narrow(2, 0, c)? + sums.narrow(2, c, c)?)?;
    let m = m.reshape((b, half, 2))?;
    let counts = (m.narrow(2, 0, 1)? + m.narrow(2, 1, 1)?)?.clamp(1.0, f64::INFINITY)?;
    Ok((sums.broadcast_div(&counts)?, mask.pooled()?))
}
