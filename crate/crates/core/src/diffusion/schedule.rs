use crate::error::{shape_mismatch, Error, Result};
use crate::tensor::Tensor;

/// Discrete DDPM noise schedule.
#[derive(Clone, Debug, PartialEq)]
pub struct DiffusionSchedule {
    pub betas: Vec<f64>,
    pub alphas: Vec<f64>,
    pub alpha_bars: Vec<f64>,
}

impl DiffusionSchedule {
    /// Betas spaced linearly from `beta_start` to `beta_end` over `t_max` steps.
    pub fn linear(t_max: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        if t_max == 0 || !(0.0 < beta_start && beta_start <= beta_end && beta_end < 1.0) {
            return Err(Error::Config(format!(
                "invalid schedule: t_max={t_max}, betas {beta_start}..{beta_end}"
            )));
        }
        let betas: Vec<f64> = (0..t_max)
            .map(|i| {
                let f = if t_max == 1 { 0.0 } else { i as f64 / (t_max - 1) as f64 };
                beta_start + f * (beta_end - beta_start)
            })
            .collect();
        let alphas: Vec<f64> = betas.iter().map(|b| 1.0 - b).collect();
        let alpha_bars = alphas
            .iter()
            .scan(1.0, |acc, a| {
                *acc *= a;
                Some(*acc)
            })
            .collect();
        Ok(Self { betas, alphas, alpha_bars })
    }

    pub fn t_max(&self) -> usize {
        self.betas.len()
    }

    pub fn alpha_bar(&self, t: usize) -> Result<f64> {
        self.alpha_bars
            .get(t)
            .copied()
            .ok_or(Error::Timestep { t, t_max: self.t_max() })
    }
}

impl Default for DiffusionSchedule {
    fn default() -> Self {
        Self::linear(1000, 1e-4, 2e-2).expect("valid default")
    }
}

/// `√ᾱ_t · x + √(1−ᾱ_t) · ε`. Only the target frame is ever noised.
pub fn q_sample(x: &Tensor, t: usize, eps: &Tensor, sched: &DiffusionSchedule) -> Result<Tensor> {
    if x.shape() != eps.shape() {
        return Err(shape_mismatch("q_sample", x.shape(), eps.shape()));
    }
    let ab = sched.alpha_bar(t)?;
    let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
    Ok(Tensor::from_fn(x.shape().to_vec(), |i| a * x.data()[i] + b * eps.data()[i]))
}
