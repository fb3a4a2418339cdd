//! Reconstruction NLL plus two capacity-constrained KL penalties.
//!
//! `total = recon_nll + γ_G·|kl_global − C_G(step)| + γ_L·|kl_local − C_L(step)|`
//!
//! with standard-normal priors and these reductions:
//!
//! - `recon_nll`: unit-variance Gaussian NLL summed over valid elements, mean over songs;
//! - `kl_global`: summed over channels, averaged over valid frames, mean over songs;
//! - `kl_local`: summed over units, mean over songs.

use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::model::{DiagonalGaussian, Mask};
use crate::{Error, Result};

/// KL weights `γ_G`, `γ_L`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeights {
    pub gamma_global: f64,
    pub gamma_local: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { gamma_global: 100.0, gamma_local: 10.0 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if !(self.gamma_global > 0.0 && self.gamma_local > 0.0) {
            return Err(Error::validation("KL weights must be positive"));
        }
        if self.gamma_global <= self.gamma_local {
            return Err(Error::validation(format!(
                "gamma_global ({}) must exceed gamma_local ({})",
                self.gamma_global, self.gamma_local
            )));
        }
        Ok(())
    }
}

/// Linear capacity ramp from 0 to `c_max` nats over `ramp_steps`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CapacitySchedule {
    pub c_max: f64,
    pub ramp_steps: u64,
}

impl CapacitySchedule {
    pub fn global_default() -> Self {
        Self { c_max: 0.4, ramp_steps: 20_000 }
    }

    pub fn local_default() -> Self {
        Self { c_max: 100.0, ramp_steps: 20_000 }
    }
}

/// `min(c_max, c_max · step / ramp_steps)`.
pub fn capacity_at(schedule: &CapacitySchedule, step: u64) -> f64 {
    if schedule.ramp_steps == 0 || step >= schedule.ramp_steps {
        return schedule.c_max;
    }
    schedule.c_max * (step as f64 / schedule.ramp_steps as f64)
}

/// `0.5·(μ² + σ² − 1 − ln σ²)` for one unit against `N(0, 1)`.
pub fn gaussian_kl(mean: f64, log_var: f64) -> Result<f64> {
    if !mean.is_finite() || !log_var.is_finite() {
        return Err(Error::Numeric(format!("non-finite posterior parameters ({mean}, {log_var})")));
    }
    Ok(0.5 * (mean * mean + log_var.exp() - 1.0 - log_var))
}

/// Element-wise KL of a diagonal Gaussian against the standard normal.
pub fn gaussian_kl_tensor(q: &DiagonalGaussian) -> Result<Tensor> {
    let t = ((q.mean.sqr()? + q.log_var.exp()?)? - 1.0)?;
    Ok((t.sub(&q.log_var)? * 0.5)?)
}

/// Per-unit KL of a local posterior `[B, d]`, one row per song.
pub fn gaussian_kl_per_unit(q: &DiagonalGaussian) -> Result<Vec<Vec<f64>>> {
    let mean = q.mean.to_dtype(candle_core::DType::F64)?.to_vec2::<f64>()?;
    let lv = q.log_var.to_dtype(candle_core::DType::F64)?.to_vec2::<f64>()?;
    mean.iter()
        .zip(&lv)
        .map(|(m, l)| m.iter().zip(l).map(|(&a, &b)| gaussian_kl(a, b)).collect())
        .collect()
}

/// Per-channel KL of a global posterior `[B, d, T]`, averaged over valid frames.
pub fn gaussian_kl_per_channel(q: &DiagonalGaussian, mask: &Mask) -> Result<Vec<Vec<f64>>> {
    let kl = gaussian_kl_tensor(q)?;
    let per = mask.mean_over_time(&kl)?;
    let v = per.to_dtype(candle_core::DType::F64)?.to_vec2::<f64>()?;
    if v.iter().flatten().any(|x| !x.is_finite()) {
        return Err(Error::Numeric("non-finite global KL".into()));
    }
    Ok(v)
}

/// Sums over songs of every loss ingredient; combine groups with [`LossParts::add`].
#[derive(Debug, Clone)]
pub struct LossParts {
    pub recon_sum: Tensor,
    pub kl_global_sum: Tensor,
    pub kl_local_sum: Tensor,
    /// `[d_L]`, summed over songs.
    pub kl_local_unit_sum: Tensor,
    pub songs: usize,
}

impl LossParts {
    pub fn add(&self, other: &LossParts) -> Result<LossParts> {
        Ok(LossParts {
            recon_sum: (&self.recon_sum + &other.recon_sum)?,
            kl_global_sum: (&self.kl_global_sum + &other.kl_global_sum)?,
            kl_local_sum: (&self.kl_local_sum + &other.kl_local_sum)?,
            kl_local_unit_sum: (&self.kl_local_unit_sum + &other.kl_local_unit_sum)?,
            songs: self.songs + other.songs,
        })
    }
}

/// Per-song unit-variance Gaussian NLL over valid elements, summed over songs.
pub fn reconstruction_nll_sum(x: &Tensor, recon: &Tensor, mask: &Mask) -> Result<Tensor> {
    if x.dims() != recon.dims() {
        return Err(Error::validation(format!(
            "reconstruction shape {:?} differs from input {:?}",
            recon.dims(),
            x.dims()
        )));
    }
    let n_mels = x.dim(1)?;
    let resid = (x - recon)?.broadcast_mul(&mask.tensor)?;
    let sq = (resid.sqr()?.sum_all()? * 0.5)?;
    let elements = (mask.count() * n_mels) as f64;
    Ok((sq + 0.5 * elements * (2.0 * std::f64::consts::PI).ln())?)
}

/// Batch-mean reconstruction NLL.
pub fn reconstruction_nll(x: &Tensor, recon: &Tensor, mask: &Mask) -> Result<f64> {
    let b = mask.lengths.len().max(1) as f64;
    Ok(reconstruction_nll_sum(x, recon, mask)?.to_dtype(candle_core::DType::F64)?.to_scalar::<f64>()? / b)
}

/// Loss ingredients for one group of songs sharing a padded shape.
///
/// `q_global` may be `None` for the single-encoder baseline.
pub fn loss_parts(
    x: &Tensor,
    mask: &Mask,
    q_global: Option<&DiagonalGaussian>,
    q_local: &DiagonalGaussian,
    recon: &Tensor,
) -> Result<LossParts> {
    let recon_sum = reconstruction_nll_sum(x, recon, mask)?;
    let kl_global_sum = match q_global {
        Some(q) => {
            let per_frame = gaussian_kl_tensor(q)?.sum_keepdim(1)?;
            mask.mean_over_time(&per_frame)?.sum_all()?
        }
        None => recon_sum.zeros_like()?,
    };
    let kl_units = gaussian_kl_tensor(q_local)?;
    let kl_local_unit_sum = kl_units.sum(0)?;
    let kl_local_sum = kl_units.sum_all()?;
    Ok(LossParts { recon_sum, kl_global_sum, kl_local_sum, kl_local_unit_sum, songs: mask.lengths.len() })
}

/// All reported terms of one evaluation of the objective.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossTerms {
    pub recon_nll: f64,
    pub kl_global: f64,
    pub kl_local: f64,
    pub kl_local_per_unit: Vec<f64>,
    pub c_g_active: f64,
    pub c_l_active: f64,
    pub total: f64,
}

/// Differentiable total plus its reported terms.
#[derive(Debug, Clone)]
pub struct Loss {
    pub total: Tensor,
    pub terms: LossTerms,
}

fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(candle_core::DType::F64)?.to_scalar::<f64>()?)
}

/// `|d|` with subgradient 0 at `d = 0`.
fn abs_deviation(kl: &Tensor, capacity: f64) -> Result<(Tensor, f64)> {
    let d = (kl - capacity)?;
    let v = scalar(&d)?;
    let sign = if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    };
    Ok(((d * sign)?, v.abs()))
}

/// Objective configuration: weights plus the two capacity schedules.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Objective {
    pub weights: LossWeights,
    pub global_capacity: CapacitySchedule,
    pub local_capacity: CapacitySchedule,
}

impl Default for Objective {
    fn default() -> Self {
        Self {
            weights: LossWeights::default(),
            global_capacity: CapacitySchedule::global_default(),
            local_capacity: CapacitySchedule::local_default(),
        }
    }
}

impl Objective {
    /// Dual-encoder total from combined parts at `step`.
    pub fn total(&self, parts: &LossParts, step: u64) -> Result<Loss> {
        self.combine(parts, step, true)
    }

    /// Baseline total: NLL plus the local-weighted penalty on its single latent.
    pub fn total_single(&self, parts: &LossParts, step: u64) -> Result<Loss> {
        self.combine(parts, step, false)
    }

    fn combine(&self, parts: &LossParts, step: u64, with_global: bool) -> Result<Loss> {
        let b = parts.songs.max(1) as f64;
        let recon = (&parts.recon_sum / b)?;
        let kl_g = (&parts.kl_global_sum / b)?;
        let kl_l = (&parts.kl_local_sum / b)?;
        let c_g = if with_global { capacity_at(&self.global_capacity, step) } else { 0.0 };
        let c_l = capacity_at(&self.local_capacity, step);
        let (dev_l, abs_l) = abs_deviation(&kl_l, c_l)?;
        let mut total = (&recon + (dev_l * self.weights.gamma_local)?)?;
        let mut total_value = scalar(&recon)? + self.weights.gamma_local * abs_l;
        if with_global {
            let (dev_g, abs_g) = abs_deviation(&kl_g, c_g)?;
            total = (total + (dev_g * self.weights.gamma_global)?)?;
            total_value += self.weights.gamma_global * abs_g;
        }
        let per_unit: Vec<f64> = (&parts.kl_local_unit_sum / b)?
            .to_dtype(candle_core::DType::F64)?
            .to_vec1::<f64>()?;
        let terms = LossTerms {
            recon_nll: scalar(&recon)?,
            kl_global: scalar(&kl_g)?,
            kl_local: scalar(&kl_l)?,
            kl_local_per_unit: per_unit,
            c_g_active: c_g,
            c_l_active: c_l,
            total: total_value,
        };
        if !terms.total.is_finite() {
            return Err(Error::Numeric(format!("non-finite loss at step {step}: {terms:?}")));
        }
        Ok(Loss { total, terms })
    }
}

/// Convenience wrapper evaluating the whole objective for one padded batch.
#[allow(clippy::too_many_arguments)]
pub fn total_loss(
    x: &Tensor,
    mask: &Mask,
    q_global: &DiagonalGaussian,
    q_local: &DiagonalGaussian,
    recon: &Tensor,
    objective: &Objective,
    step: u64,
) -> Result<Loss> {
    let parts = loss_parts(x, mask, Some(q_global), q_local, recon)?;
    objective.total(&parts, step)
}

/// Sum of the reported per-unit local KL; equals `kl_local` up to rounding.
pub fn per_unit_sum(terms: &LossTerms) -> f64 {
    terms.kl_local_per_unit.iter().sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::{DType, Device};

    #[test]
    fn kl_closed_form_cases() {
        assert_eq!(gaussian_kl(0.0, 0.0).unwrap(), 0.0);
        assert_eq!(gaussian_kl(1.0, 0.0).unwrap(), 0.5);
        let v = gaussian_kl(0.5, 0.25f64.ln()).unwrap();
        assert!((v - 0.443_147).abs() < 1e-6, "{v}");
        assert!(matches!(gaussian_kl(f64::NAN, 0.0), Err(Error::Numeric(_))));
    }

    #[test]
    fn capacity_ramp() {
        for s in [CapacitySchedule::global_default(), CapacitySchedule::local_default()] {
            assert_eq!(capacity_at(&s, 0), 0.0);
            assert_eq!(capacity_at(&s, 10_000), s.c_max / 2.0);
            assert_eq!(capacity_at(&s, 20_000), s.c_max);
            assert_eq!(capacity_at(&s, 50_000), s.c_max);
        }
    }

    #[test]
    fn capacity_is_monotone() {
        let s = CapacitySchedule { c_max: 3.3, ramp_steps: 777 };
        let mut prev = 0.0;
        for step in 0..2000 {
            let c = capacity_at(&s, step);
            assert!(c >= prev);
            prev = c;
        }
    }

    fn mask(lengths: Vec<usize>, t: usize) -> Mask {
        Mask::new(lengths, t, DType::F64).unwrap()
    }

    #[test]
    fn nll_of_perfect_reconstruction_is_constant() {
        let x = Tensor::rand(0f64, 1.0, (2, 3, 5), &Device::Cpu).unwrap();
        let m = mask(vec![5, 4], 5);
        let got = reconstruction_nll(&x, &x, &m).unwrap();
        let want = 0.5 * (3.0 * 9.0) * (2.0 * std::f64::consts::PI).ln() / 2.0;
        assert!((got - want).abs() < 1e-12);
    }

    #[test]
    fn nll_single_element() {
        let x = Tensor::ones((1, 1, 1), DType::F64, &Device::Cpu).unwrap();
        let r = Tensor::zeros((1, 1, 1), DType::F64, &Device::Cpu).unwrap();
        let got = reconstruction_nll(&x, &r, &mask(vec![1], 1)).unwrap();
        assert!((got - 1.418_938_5).abs() < 1e-6, "{got}");
    }

    #[test]
    fn nll_ignores_padding() {
        let x = Tensor::rand(0f64, 1.0, (1, 2, 6), &Device::Cpu).unwrap();
        let r = Tensor::rand(0f64, 1.0, (1, 2, 6), &Device::Cpu).unwrap();
        let m = mask(vec![4], 6);
        let a = reconstruction_nll(&x, &r, &m).unwrap();
        let noise = Tensor::rand(-5f64, 5.0, (1, 2, 2), &Device::Cpu).unwrap();
        let x2 = Tensor::cat(&[&x.narrow(2, 0, 4).unwrap(), &noise], 2).unwrap();
        assert_eq!(a, reconstruction_nll(&x2, &r, &m).unwrap());
    }

    #[test]
    fn nll_shape_mismatch() {
        let x = Tensor::zeros((1, 2, 3), DType::F64, &Device::Cpu).unwrap();
        let r = Tensor::zeros((1, 2, 4), DType::F64, &Device::Cpu).unwrap();
        assert!(reconstruction_nll(&x, &r, &mask(vec![3], 3)).unwrap_err().is_validation());
    }

    fn gaussian(mean: Vec<f64>, lv: Vec<f64>, shape: &[usize]) -> DiagonalGaussian {
        DiagonalGaussian::new(
            Tensor::from_vec(mean, shape, &Device::Cpu).unwrap(),
            Tensor::from_vec(lv, shape, &Device::Cpu).unwrap(),
        )
        .unwrap()
    }

    #[test]
    fn penalties_vanish_at_capacity() {
        let x = Tensor::rand(0f64, 1.0, (1, 2, 3), &Device::Cpu).unwrap();
        let r = Tensor::rand(0f64, 1.0, (1, 2, 3), &Device::Cpu).unwrap();
        let m = mask(vec![3], 3);
        // unit means give per-unit KL 0.5
        let qg = gaussian(vec![1.0; 6], vec![0.0; 6], &[1, 2, 3]);
        let ql = gaussian(vec![1.0; 4], vec![0.0; 4], &[1, 4]);
        let obj = Objective {
            weights: LossWeights::default(),
            global_capacity: CapacitySchedule { c_max: 1.0, ramp_steps: 0 },
            local_capacity: CapacitySchedule { c_max: 2.0, ramp_steps: 0 },
        };
        let loss = total_loss(&x, &m, &qg, &ql, &r, &obj, 5).unwrap();
        assert!((loss.terms.kl_global - 1.0).abs() < 1e-12);
        assert!((loss.terms.kl_local - 2.0).abs() < 1e-12);
        assert!((loss.terms.total - loss.terms.recon_nll).abs() < 1e-9);
        assert!((per_unit_sum(&loss.terms) - loss.terms.kl_local).abs() < 1e-12);
    }

    #[test]
    fn reported_total_matches_formula() {
        let x = Tensor::rand(0f64, 1.0, (2, 2, 4), &Device::Cpu).unwrap();
        let r = Tensor::rand(0f64, 1.0, (2, 2, 4), &Device::Cpu).unwrap();
        let m = mask(vec![4, 2], 4);
        let qg = gaussian((0..16).map(|i| i as f64 * 0.1).collect(), vec![-0.3; 16], &[2, 2, 4]);
        let ql = gaussian(vec![0.2, -0.5, 1.5, 0.0, 0.3, 0.9], vec![0.1, -1.0, 0.4, 0.0, -2.0, 0.5], &[2, 3]);
        let obj = Objective::default();
        let loss = total_loss(&x, &m, &qg, &ql, &r, &obj, 7000).unwrap();
        let t = &loss.terms;
        let want = t.recon_nll + 100.0 * (t.kl_global - t.c_g_active).abs() + 10.0 * (t.kl_local - t.c_l_active).abs();
        assert!((t.total - want).abs() < 1e-9);
        assert!((loss.total.to_scalar::<f64>().unwrap() - t.total).abs() < 1e-9);
        // per-unit identity
        let rows = gaussian_kl_per_unit(&ql).unwrap();
        let direct: f64 = rows.iter().flatten().sum::<f64>() / 2.0;
        assert!((direct - t.kl_local).abs() <= 1e-6 * t.kl_local.abs());
        // masked global reduction by hand: song 1 averages only its 2 frames
        let per = gaussian_kl_per_channel(&qg, &m).unwrap();
        let hand = (per[0].iter().sum::<f64>() + per[1].iter().sum::<f64>()) / 2.0;
        assert!((hand - t.kl_global).abs() < 1e-12);
    }

    #[test]
    fn zero_local_weight_removes_local_dependence() {
        let x = Tensor::rand(0f64, 1.0, (1, 2, 3), &Device::Cpu).unwrap();
        let m = mask(vec![3], 3);
        let qg = gaussian(vec![0.3; 6], vec![0.1; 6], &[1, 2, 3]);
        let obj = Objective {
            weights: LossWeights { gamma_global: 100.0, gamma_local: 0.0 },
            ..Objective::default()
        };
        let a = gaussian(vec![0.0, 1.0], vec![0.0, 0.5], &[1, 2]);
        let b = gaussian(vec![3.0, -2.0], vec![-4.0, 1.5], &[1, 2]);
        let la = total_loss(&x, &m, &qg, &a, &x, &obj, 100).unwrap().terms.total;
        let lb = total_loss(&x, &m, &qg, &b, &x, &obj, 100).unwrap().terms.total;
        assert_eq!(la, lb);
    }

    #[test]
    fn abs_subgradient_is_zero_at_capacity() {
        let v = candle_core::Var::new(2.0f64, &Device::Cpu).unwrap();
        let (d, a) = abs_deviation(v.as_tensor(), 2.0).unwrap();
        assert_eq!(a, 0.0);
        let g = d.backward().unwrap();
        // candle drops gradients that are identically zero
        let grad = g.get(&v).map(|t| t.to_scalar::<f64>().unwrap()).unwrap_or(0.0);
        assert_eq!(grad, 0.0);
    }

    #[test]
    fn penalty_monotone_in_gamma() {
        let (kl, c) = (3.0_f64, 1.5_f64);
        let mut prev = 0.0;
        for g in [0.5, 1.0, 10.0, 100.0, 1000.0] {
            let p = g * (kl - c).abs();
            assert!(p >= prev);
            prev = p;
        }
    }

    #[test]
    fn weights_require_ratio_above_one() {
        assert!(LossWeights::default().validate().is_ok());
        assert!(LossWeights { gamma_global: 5.0, gamma_local: 10.0 }.validate().is_err());
    }
}
