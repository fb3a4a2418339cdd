use candle_core::{Device, DType, Tensor};
use rand_distr::{Distribution, StandardNormal};

use crate::seed;
use crate::{Error, Result};

/// Log-variances are clamped to this range before use.
pub const LOG_VAR_MIN: f64 = -10.0;
pub const LOG_VAR_MAX: f64 = 10.0;

/// Diagonal Gaussian `N(mean, exp(log_var))`, used for both posteriors.
#[derive(Debug, Clone)]
pub struct DiagonalGaussian {
    pub mean: Tensor,
    pub log_var: Tensor,
}

impl DiagonalGaussian {
    pub fn new(mean: Tensor, log_var: Tensor) -> Result<Self> {
        if mean.dims() != log_var.dims() {
            return Err(Error::validation(format!(
                "mean shape {:?} differs from log-variance shape {:?}",
                mean.dims(),
                log_var.dims()
            )));
        }
        Ok(Self { mean, log_var })
    }

    /// `mean + exp(0.5 · log_var) · eps`; differentiable in both parameters.
    pub fn reparameterize(&self, eps: &Tensor) -> Result<Tensor> {
        let std = (&self.log_var * 0.5)?.exp()?;
        Ok((&self.mean + std.mul(eps)?)?)
    }

    /// Draws with standard-normal noise from a stream derived from `seed`.
    pub fn sample(&self, seed: u64) -> Result<Tensor> {
        let eps = standard_normal(self.mean.dims(), self.mean.dtype(), seed)?;
        self.reparameterize(&eps)
    }
}

/// Standard-normal tensor drawn from a ChaCha stream seeded by `seed`.
pub fn standard_normal(shape: &[usize], dtype: DType, seed: u64) -> Result<Tensor> {
    let mut rng = seed::rng(seed, &[seed::stream::NOISE]);
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n).map(|_| StandardNormal.sample(&mut rng)).collect();
    Ok(Tensor::from_vec(data, shape, &Device::Cpu)?.to_dtype(dtype)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn floor_variance_sample_is_mean() {
        let mean = Tensor::new(&[0.5f64, -2.0, 3.0], &Device::Cpu).unwrap();
        let lv = Tensor::new(&[LOG_VAR_MIN; 3], &Device::Cpu).unwrap();
        let g = DiagonalGaussian::new(mean.clone(), lv).unwrap();
        let s = g.sample(1).unwrap().to_vec1::<f64>().unwrap();
        for (a, b) in s.iter().zip(mean.to_vec1::<f64>().unwrap()) {
            // std = e^-5 ≈ 0.0067
            assert!((a - b).abs() < 0.05);
        }
    }

    #[test]
    fn standard_normal_moments() {
        let n = 100_000;
        let mean = Tensor::zeros(n, DType::F64, &Device::Cpu).unwrap();
        let g = DiagonalGaussian::new(mean.clone(), mean).unwrap();
        let s = g.sample(42).unwrap().to_vec1::<f64>().unwrap();
        let m = s.iter().sum::<f64>() / n as f64;
        let v = s.iter().map(|x| (x - m).powi(2)).sum::<f64>() / n as f64;
        assert!(m.abs() < 3.0 / (n as f64).sqrt(), "mean {m}");
        assert!((v - 1.0).abs() < 0.05, "var {v}");
    }

    #[test]
    fn fixed_seed_is_deterministic() {
        let mean = Tensor::zeros(16, DType::F32, &Device::Cpu).unwrap();
        let g = DiagonalGaussian::new(mean.clone(), mean).unwrap();
        assert_eq!(
            g.sample(9).unwrap().to_vec1::<f32>().unwrap(),
            g.sample(9).unwrap().to_vec1::<f32>().unwrap()
        );
    }

    #[test]
    fn shape_mismatch_rejected() {
        let a = Tensor::zeros(3, DType::F32, &Device::Cpu).unwrap();
        let b = Tensor::zeros(4, DType::F32, &Device::Cpu).unwrap();
        assert!(DiagonalGaussian::new(a, b).unwrap_err().is_validation());
    }

    #[test]
    fn gradient_reaches_mean_and_log_var() {
        let mean = candle_core::Var::new(&[0.3f64, -0.1], &Device::Cpu).unwrap();
        let lv = candle_core::Var::new(&[0.2f64, -0.4], &Device::Cpu).unwrap();
        let g = DiagonalGaussian::new(mean.as_tensor().clone(), lv.as_tensor().clone()).unwrap();
        let eps = Tensor::new(&[0.7f64, -1.3], &Device::Cpu).unwrap();
        let grads = g.reparameterize(&eps).unwrap().sum_all().unwrap().backward().unwrap();
        let dm = grads.get(&mean).unwrap().to_vec1::<f64>().unwrap();
        let dl = grads.get(&lv).unwrap().to_vec1::<f64>().unwrap();
        assert_eq!(dm, vec![1.0, 1.0]);
        assert!((dl[0] - 0.5 * (0.1f64).exp() * 0.7).abs() < 1e-12);
    }
}
