//! Discrete diffusion noise schedule.
//!
//! Tables are indexed by timestep with `alpha_bars[0] == 1` stored explicitly,
//! so `t - 1` lookups never need a special case. `betas[0]` and `alphas[0]`
//! are placeholders (0 and 1) and never used by the forward process.

use crate::error::{check_dim, LabError, Result};

/// Which standard deviation the stochastic-latent construction divides by.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum SigmaForm {
    /// DDPM posterior standard deviation `sqrt((1 - abar_{t-1}) / (1 - abar_t) * beta_t)`.
    #[default]
    Posterior,
    /// `(1 - abar_{t-1}) / (1 - alpha_t) * beta_t`, kept for comparison only.
    Literal,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    steps: usize,
    betas: Vec<f64>,
    alphas: Vec<f64>,
    alpha_bars: Vec<f64>,
    sigma_form: SigmaForm,
}

/// Coefficients of the DDPM posterior `q(x_{t-1} | x_t, x_0)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PosteriorCoeffs {
    /// Weight on `x_0` in the posterior mean.
    pub x0_coeff: f64,
    /// Weight on `x_t` in the posterior mean.
    pub xt_coeff: f64,
    pub sigma: f64,
}

impl NoiseSchedule {
    /// Betas linearly interpolated from `beta_start` to `beta_end`, both inclusive.
    pub fn linear(steps: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        if steps < 2 {
            return Err(LabError::InvalidSchedule(format!(
                "need at least 2 timesteps, got {steps}"
            )));
        }
        if !beta_start.is_finite() || !beta_end.is_finite() {
            return Err(LabError::InvalidSchedule("non-finite beta bound".into()));
        }
        if !(0.0 < beta_start && beta_start <= beta_end && beta_end < 1.0) {
            return Err(LabError::InvalidSchedule(format!(
                "require 0 < beta_start <= beta_end < 1, got {beta_start}..{beta_end}"
            )));
        }
        let span = (steps - 1) as f64;
        let betas = (1..=steps)
            .map(|t| beta_start + (beta_end - beta_start) * (t - 1) as f64 / span)
            .collect();
        Self::from_betas(betas)
    }

    /// Default schedule: 1000 steps, beta from 0.00085 to 0.012.
    pub fn default_linear() -> Self {
        Self::linear(1000, 0.00085, 0.012).expect("default schedule is valid")
    }

    /// Builds the tables from `beta_1..beta_T`.
    pub fn from_betas(betas_1_to_t: Vec<f64>) -> Result<Self> {
        let steps = betas_1_to_t.len();
        if steps < 2 {
            return Err(LabError::InvalidSchedule("need at least 2 betas".into()));
        }
        if betas_1_to_t.iter().any(|b| !b.is_finite() || *b <= 0.0 || *b >= 1.0) {
            return Err(LabError::InvalidSchedule("betas must lie in (0, 1)".into()));
        }
        let mut betas = Vec::with_capacity(steps + 1);
        let mut alphas = Vec::with_capacity(steps + 1);
        let mut alpha_bars = Vec::with_capacity(steps + 1);
        betas.push(0.0);
        alphas.push(1.0);
        alpha_bars.push(1.0);
        for b in betas_1_to_t {
            let a = 1.0 - b;
            let prev = *alpha_bars.last().unwrap();
            betas.push(b);
            alphas.push(a);
            alpha_bars.push(prev * a);
        }
        Ok(Self {
            steps,
            betas,
            alphas,
            alpha_bars,
            sigma_form: SigmaForm::Posterior,
        })
    }

    pub fn with_sigma_form(mut self, form: SigmaForm) -> Self {
        self.sigma_form = form;
        self
    }

    pub fn sigma_form(&self) -> SigmaForm {
        self.sigma_form
    }

    /// Number of timesteps `T`.
    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.betas[t]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        self.alphas[t]
    }

    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bars[t]
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bars
    }

    pub(crate) fn check_t(&self, t: usize, min: usize) -> Result<()> {
        if t < min || t > self.steps {
            Err(LabError::TimestepOutOfRange {
                t,
                min,
                max: self.steps,
            })
        } else {
            Ok(())
        }
    }

    /// `x_t = sqrt(abar_t) x0 + sqrt(1 - abar_t) eps`
    pub fn forward_noise(&self, x0: &[f64], t: usize, eps: &[f64]) -> Result<Vec<f64>> {
        check_dim(x0.len(), eps.len())?;
        self.check_t(t, 0)?;
        Ok(self.noise_unchecked(x0, t, eps))
    }

    pub(crate) fn noise_unchecked(&self, x0: &[f64], t: usize, eps: &[f64]) -> Vec<f64> {
        let a = self.alpha_bars[t];
        let (sa, sn) = (a.sqrt(), (1.0 - a).sqrt());
        x0.iter().zip(eps).map(|(x, e)| sa * x + sn * e).collect()
    }

    /// Posterior mean coefficients and standard deviation for `2 <= t <= T`.
    pub fn posterior_coeffs(&self, t: usize) -> Result<PosteriorCoeffs> {
        self.check_t(t, 2)?;
        let ab = self.alpha_bars[t];
        let ab_prev = self.alpha_bars[t - 1];
        let beta = self.betas[t];
        let alpha = self.alphas[t];
        let x0_coeff = ab_prev.sqrt() * beta / (1.0 - ab);
        let xt_coeff = alpha.sqrt() * (1.0 - ab_prev) / (1.0 - ab);
        let sigma = match self.sigma_form {
            SigmaForm::Posterior => ((1.0 - ab_prev) / (1.0 - ab) * beta).sqrt(),
            SigmaForm::Literal => (1.0 - ab_prev) / (1.0 - alpha) * beta,
        };
        Ok(PosteriorCoeffs {
            x0_coeff,
            xt_coeff,
            sigma,
        })
    }
}

impl Default for NoiseSchedule {
    fn default() -> Self {
        Self::default_linear()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_half_betas() {
        let s = NoiseSchedule::linear(2, 0.5, 0.5).unwrap();
        assert_eq!(s.alpha_bars(), &[1.0, 0.5, 0.25]);
    }

    #[test]
    fn default_schedule_terminal_value() {
        let s = NoiseSchedule::default_linear();
        let direct: f64 = (0..1000)
            .map(|i| 1.0 - (0.00085 + (0.012 - 0.00085) * i as f64 / 999.0))
            .product();
        assert!((s.alpha_bar(1000) - direct).abs() < 1e-15);
        // The product is about 1.58e-3: small, but not below 1e-3.
        assert!(s.alpha_bar(1000) > 1.5e-3 && s.alpha_bar(1000) < 1.6e-3);
    }

    #[test]
    fn table_invariants() {
        let s = NoiseSchedule::default_linear();
        assert_eq!(s.alpha_bar(0), 1.0);
        for t in 1..=s.steps() {
            assert!(s.alpha_bar(t) < s.alpha_bar(t - 1));
            let rel = (s.alpha_bar(t) - s.alpha_bar(t - 1) * s.alpha(t)).abs() / s.alpha_bar(t);
            assert!(rel < 1e-15);
        }
    }

    #[test]
    fn rejects_bad_bounds() {
        assert!(NoiseSchedule::linear(2, 0.9, 0.1).is_err());
        assert!(NoiseSchedule::linear(1, 0.1, 0.2).is_err());
        assert!(NoiseSchedule::linear(10, 0.0, 0.2).is_err());
        assert!(NoiseSchedule::linear(10, 0.1, 1.0).is_err());
        assert!(NoiseSchedule::linear(10, f64::NAN, 0.2).is_err());
    }

    #[test]
    fn forward_noise_examples() {
        let s = NoiseSchedule::linear(2, 0.5, 0.5).unwrap();
        let x = s.forward_noise(&[1.0, 0.0], 2, &[0.0, 2.0]).unwrap();
        assert!((x[0] - 0.5).abs() < 1e-15);
        assert!((x[1] - 3f64.sqrt()).abs() < 1e-15);

        let x = s.forward_noise(&[3.0, -1.0], 1, &[0.0, 0.0]).unwrap();
        assert_eq!(x, vec![0.5f64.sqrt() * 3.0, -(0.5f64.sqrt())]);

        assert!(s.forward_noise(&[1.0], 1, &[1.0, 2.0]).is_err());
        assert!(s.forward_noise(&[1.0], 3, &[1.0]).is_err());
    }

    #[test]
    fn terminal_noise_dominates() {
        let s = NoiseSchedule::default_linear();
        let e = [0.3, -1.2, 2.0];
        let x = s.forward_noise(&[0.0; 3], 1000, &e).unwrap();
        for (xi, ei) in x.iter().zip(&e) {
            assert!((xi - ei).abs() < 1e-3 * ei.abs());
        }
    }

    #[test]
    fn posterior_coeffs_two_step() {
        let s = NoiseSchedule::linear(2, 0.5, 0.5).unwrap();
        let c = s.posterior_coeffs(2).unwrap();
        let expected = 0.5f64.sqrt() * 0.5 / 0.75;
        assert!((c.x0_coeff - expected).abs() < 1e-15);
        assert!((c.xt_coeff - expected).abs() < 1e-15);
        assert!((c.sigma - (0.5f64 * 0.5 / 0.75).sqrt()).abs() < 1e-15);
        assert!((c.x0_coeff - 0.4714).abs() < 1e-4);
        assert!((c.sigma - 0.5774).abs() < 1e-4);
        assert!(s.posterior_coeffs(1).is_err());
        assert!(s.posterior_coeffs(3).is_err());
    }

    #[test]
    fn literal_sigma_form() {
        let s = NoiseSchedule::linear(2, 0.5, 0.5)
            .unwrap()
            .with_sigma_form(SigmaForm::Literal);
        let c = s.posterior_coeffs(2).unwrap();
        // (1 - 0.5) / (1 - 0.5) * 0.5
        assert!((c.sigma - 0.5).abs() < 1e-15);
    }
}
