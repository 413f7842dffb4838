//! Brute-force reference computations used to check the implementations.
//!
//! Nothing here calls the code it checks except the one function under test
//! in each check. Noised latents, Tweedie estimates, posterior means and
//! coefficients are re-derived from the raw schedule tables with their own
//! arithmetic.

use crate::denoiser::{Condition, Denoiser};
use crate::distill::{self, DeltaInputs, DistillerConfig, Method, PromptPair};
use crate::error::{LabError, Result};
use crate::latent::{self, X0ApproxMode};
use crate::schedule::{NoiseSchedule, SigmaForm};

/// Central-difference gradient of `log_density` at `x`.
pub fn fd_score<F>(log_density: F, x: &[f64], h: f64) -> Result<Vec<f64>>
where
    F: Fn(&[f64]) -> f64,
{
    if !(h > 0.0) || !h.is_finite() {
        return Err(LabError::InvalidConfig(format!("step must be positive, got {h}")));
    }
    let mut probe = x.to_vec();
    let mut grad = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        probe[i] = x[i] + h;
        let up = log_density(&probe);
        probe[i] = x[i] - h;
        let down = log_density(&probe);
        probe[i] = x[i];
        if !up.is_finite() || !down.is_finite() {
            return Err(LabError::NonFinite(format!("log-density near coordinate {i}")));
        }
        grad.push((up - down) / (2.0 * h));
    }
    Ok(grad)
}

/// Mixture log-density by direct summation of Gaussian pdfs (no log-sum-exp).
/// Components are `(weight, mean, diagonal variance)`.
pub fn naive_mixture_log_density(components: &[(f64, Vec<f64>, Vec<f64>)], x: &[f64]) -> f64 {
    let mut p = 0.0;
    for (w, m, v) in components {
        let mut dens = 1.0;
        for i in 0..x.len() {
            let d = x[i] - m[i];
            dens *= (-d * d / (2.0 * v[i])).exp() / (2.0 * std::f64::consts::PI * v[i]).sqrt();
        }
        p += w * dens;
    }
    p.ln()
}

/// `E[x0 | x_t]` for isotropic Gaussian data `N(m, s2 I)`.
pub fn gaussian_posterior_mean(m: &[f64], s2: f64, x_t: &[f64], t: usize, sched: &NoiseSchedule) -> Vec<f64> {
    let a = sched.alpha_bar(t);
    let denom = a * s2 + 1.0 - a;
    m.iter()
        .zip(x_t)
        .map(|(mi, xi)| (s2 * a.sqrt() * xi + (1.0 - a) * mi) / denom)
        .collect()
}

/// Exact one-dimensional posterior `p(x0 | x_t)` of a two-component Gaussian
/// prior by quadrature over `x0`; returns the posterior mean.
pub fn quadrature_posterior_mean_1d(
    components: [(f64, f64, f64); 2],
    x_t: f64,
    t: usize,
    sched: &NoiseSchedule,
) -> f64 {
    let a = sched.alpha_bar(t);
    let (lo, hi, n) = (-30.0, 30.0, 600_000usize);
    let dx = (hi - lo) / n as f64;
    let (mut num, mut den) = (0.0, 0.0);
    for k in 0..=n {
        let x0 = lo + k as f64 * dx;
        let prior: f64 = components
            .iter()
            .map(|(w, m, v)| w * (-(x0 - m).powi(2) / (2.0 * v)).exp() / v.sqrt())
            .sum();
        let lik = (-(x_t - a.sqrt() * x0).powi(2) / (2.0 * (1.0 - a))).exp();
        let wk = if k == 0 || k == n { 0.5 } else { 1.0 };
        num += wk * x0 * prior * lik;
        den += wk * prior * lik;
    }
    num / den
}

fn noisy(x0: &[f64], eps: &[f64], a: f64) -> Vec<f64> {
    x0.iter()
        .zip(eps)
        .map(|(x, e)| a.sqrt() * x + (1.0 - a).sqrt() * e)
        .collect()
}

fn max_dev(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).fold(0.0, |m, (x, y)| m.max((x - y).abs()))
}

/// `z = (x_{t-1} - mu(x0_hat, x_t)) / sigma` evaluated from scratch.
fn direct_z(
    x0: &[f64],
    eps: &[f64],
    t: usize,
    den: &dyn Denoiser,
    cond: Condition,
    w: f64,
    sched: &NoiseSchedule,
) -> Result<Vec<f64>> {
    let (a, a_prev, beta) = (sched.alpha_bar(t), sched.alpha_bar(t - 1), sched.beta(t));
    let x_t = noisy(x0, eps, a);
    let x_prev = noisy(x0, eps, a_prev);
    let e_u = den.predict(&x_t, t, Condition::Unconditional, sched)?;
    let e_c = den.predict(&x_t, t, cond, sched)?;
    let sigma = match sched.sigma_form() {
        SigmaForm::Posterior => ((1.0 - a_prev) * beta / (1.0 - a)).sqrt(),
        SigmaForm::Literal => (1.0 - a_prev) * beta / (1.0 - (1.0 - beta)),
    };
    let mut z = Vec::with_capacity(x0.len());
    for i in 0..x0.len() {
        let e = (1.0 - w) * e_u[i] + w * e_c[i];
        let x0_hat = (x_t[i] - (1.0 - a).sqrt() * e) / a.sqrt();
        let mu = (a_prev.sqrt() * beta * x0_hat + (1.0 - beta).sqrt() * (1.0 - a_prev) * x_t[i]) / (1.0 - a);
        z.push((x_prev[i] - mu) / sigma);
    }
    Ok(z)
}

/// Max deviation between the directly evaluated `z_tgt - z_src` and the
/// coefficient form `c0 (x0_tgt - x0_src) + c1 (eps_w_tgt - eps_w_src)`,
/// where `eps_w` is the guided prediction at weight `w`.
#[allow(clippy::too_many_arguments)]
pub fn pds_coeff_check(
    x0_src: &[f64],
    x0_tgt: &[f64],
    eps: &[f64],
    t: usize,
    den: &dyn Denoiser,
    src: Condition,
    tgt: Condition,
    w: f64,
    sched: &NoiseSchedule,
) -> Result<f64> {
    let z_t = direct_z(x0_tgt, eps, t, den, tgt, w, sched)?;
    let z_s = direct_z(x0_src, eps, t, den, src, w, sched)?;
    let (c0, c1) = distill::pds_coefficients(t, sched)?;
    let a = sched.alpha_bar(t);
    let guided = |x0: &[f64], c: Condition| -> Result<Vec<f64>> {
        let x_t = noisy(x0, eps, a);
        let u = den.predict(&x_t, t, Condition::Unconditional, sched)?;
        let y = den.predict(&x_t, t, c, sched)?;
        Ok(u.iter().zip(&y).map(|(u, y)| u + w * (y - u)).collect())
    };
    let (g_t, g_s) = (guided(x0_tgt, tgt)?, guided(x0_src, src)?);
    let split: Vec<f64> = (0..eps.len())
        .map(|i| c0 * (x0_tgt[i] - x0_src[i]) + c1 * (g_t[i] - g_s[i]))
        .collect();
    let direct: Vec<f64> = z_t.iter().zip(&z_s).map(|(a, b)| a - b).collect();
    Ok(max_dev(&direct, &split))
}

/// The two ways of writing the UDS editing delta that the checks compare.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum UdsExpansion {
    /// `eps_hat = eps(y) - r eps(none)` with `r = sqrt(1 - abar) / sqrt(abar)`,
    /// as printed in the derivation of the method.
    Printed,
    /// `eps_hat = eps(y) - (1 + r) eps(none)`, which is what
    /// `x0_hat_tgt - x0_hat_src + (cls_tgt - cls_src)` expands to.
    Expanded,
}

#[allow(clippy::too_many_arguments)]
fn uds_expansion_deviation(
    form: UdsExpansion,
    x0_src: &[f64],
    x0_tgt: &[f64],
    eps: &[f64],
    t: usize,
    den: &dyn Denoiser,
    prompts: &PromptPair,
    cfg: &DistillerConfig,
    sched: &NoiseSchedule,
) -> Result<f64> {
    if cfg.method != Method::UdsEdit || cfg.x0_mode != X0ApproxMode::TweedieSingleStep {
        return Err(LabError::InvalidConfig(
            "expansion check needs UDS_EDIT with single-step Tweedie".into(),
        ));
    }
    let src = prompts.src.ok_or(LabError::MissingCondition("source prompt"))?;
    let inputs = DeltaInputs {
        x0: x0_tgt,
        x0_src: Some(x0_src),
        t,
        eps,
    };
    let terms = distill::delta_uds_edit(&inputs, den, prompts, cfg, sched)?;
    let a = sched.alpha_bar(t);
    let r = (1.0 - a).sqrt() / a.sqrt();
    let k = match form {
        UdsExpansion::Printed => r,
        UdsExpansion::Expanded => 1.0 + r,
    };
    let eps_hat = |x0: &[f64], c: Condition| -> Result<Vec<f64>> {
        let x_t = noisy(x0, eps, a);
        let u = den.predict(&x_t, t, Condition::Unconditional, sched)?;
        let y = den.predict(&x_t, t, c, sched)?;
        Ok(y.iter().zip(&u).map(|(y, u)| y - k * u).collect())
    };
    let (h_t, h_s) = (eps_hat(x0_tgt, prompts.tgt)?, eps_hat(x0_src, src)?);
    let reference: Vec<f64> = (0..eps.len())
        .map(|i| (x0_tgt[i] - x0_src[i]) + (h_t[i] - h_s[i]))
        .collect();
    let got: Vec<f64> = terms.total.iter().map(|v| v / terms.omega_t).collect();
    Ok(max_dev(&got, &reference))
}

/// Deviation of `delta_uds_edit(cfg)` from the printed closed form
/// `(x0_tgt - x0_src) + (eps_hat_tgt - eps_hat_src)`,
/// `eps_hat = eps(y) - sqrt(1 - abar)/sqrt(abar) eps(none)`.
#[allow(clippy::too_many_arguments)]
pub fn uds_printed_check(
    x0_src: &[f64],
    x0_tgt: &[f64],
    eps: &[f64],
    t: usize,
    den: &dyn Denoiser,
    prompts: &PromptPair,
    cfg: &DistillerConfig,
    sched: &NoiseSchedule,
) -> Result<f64> {
    uds_expansion_deviation(UdsExpansion::Printed, x0_src, x0_tgt, eps, t, den, prompts, cfg, sched)
}

/// As [`uds_printed_check`] with the unconditional coefficient `1 + r`.
/// Holds exactly at `w = 1` for any denoiser.
#[allow(clippy::too_many_arguments)]
pub fn uds_expanded_check(
    x0_src: &[f64],
    x0_tgt: &[f64],
    eps: &[f64],
    t: usize,
    den: &dyn Denoiser,
    prompts: &PromptPair,
    cfg: &DistillerConfig,
    sched: &NoiseSchedule,
) -> Result<f64> {
    uds_expansion_deviation(UdsExpansion::Expanded, x0_src, x0_tgt, eps, t, den, prompts, cfg, sched)
}

/// Max deviation between the combined-prediction SDS delta
/// `cfg_combine(eps_none, eps_y, w) - eps` and `recon + w cls`.
pub fn sds_cfg_check(
    x0: &[f64],
    eps: &[f64],
    t: usize,
    den: &dyn Denoiser,
    tgt: Condition,
    w: f64,
    sched: &NoiseSchedule,
) -> Result<f64> {
    let x_t = noisy(x0, eps, sched.alpha_bar(t));
    let u = den.predict(&x_t, t, Condition::Unconditional, sched)?;
    let y = den.predict(&x_t, t, tgt, sched)?;
    let combined: Vec<f64> = latent::cfg_combine(&u, &y, w)
        .iter()
        .zip(eps)
        .map(|(c, e)| c - e)
        .collect();
    let cfg = DistillerConfig::new(Method::Sds).with_w(w);
    let inputs = DeltaInputs {
        x0,
        x0_src: None,
        t,
        eps,
    };
    let terms = distill::delta_sds(&inputs, den, &PromptPair::generation(tgt), &cfg, sched)?;
    let split: Vec<f64> = (0..eps.len()).map(|i| terms.recon[i] + w * terms.cls[i]).collect();
    Ok(max_dev(&combined, &split))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::denoiser::ConstantDenoiser;

    #[test]
    fn fd_score_standard_normal() {
        let ld = |x: &[f64]| -0.5 * x.iter().map(|v| v * v).sum::<f64>();
        let x = [0.3, -1.2, 2.0];
        let g = fd_score(ld, &x, 1e-4).unwrap();
        for i in 0..3 {
            assert!((g[i] + x[i]).abs() < 1e-8);
        }
        assert!(fd_score(ld, &x, 0.0).is_err());
        assert!(fd_score(|_: &[f64]| f64::NAN, &x, 1e-3).is_err());
    }

    #[test]
    fn posterior_mean_examples() {
        let s = NoiseSchedule::linear(2, 0.75, 0.75).unwrap();
        // abar_1 = 0.25
        let v = gaussian_posterior_mean(&[2.0], 1.0, &[1.0], 1, &s);
        assert!((v[0] - 2.0).abs() < 1e-15);
        let v = gaussian_posterior_mean(&[2.0], 1e-300, &[5.0], 1, &s);
        assert!((v[0] - 2.0).abs() < 1e-12);
        let v = gaussian_posterior_mean(&[2.0], 1.0, &[5.0], 0, &s);
        assert_eq!(v[0], 5.0);
    }

    #[test]
    fn quadrature_matches_gaussian_closed_form() {
        let s = NoiseSchedule::default_linear();
        let got = quadrature_posterior_mean_1d([(0.5, 1.0, 0.5), (0.5, 1.0, 0.5)], 0.7, 300, &s);
        let want = gaussian_posterior_mean(&[1.0], 0.5, &[0.7], 300, &s)[0];
        assert!((got - want).abs() < 1e-9);
    }

    #[test]
    fn naive_density_standard_normal() {
        let c = vec![(1.0, vec![0.0, 0.0], vec![1.0, 1.0])];
        let v = naive_mixture_log_density(&c, &[0.0, 0.0]);
        assert!((v + (2.0 * std::f64::consts::PI).ln()).abs() < 1e-14);
    }

    #[test]
    fn pds_check_constant_denoiser() {
        let s = NoiseSchedule::default_linear();
        let den = ConstantDenoiser {
            unconditional: vec![0.4, -0.1],
            conditional: vec![1.5, 0.2],
        };
        let d = pds_coeff_check(
            &[0.1, 0.2],
            &[-1.0, 0.7],
            &[0.3, -0.9],
            400,
            &den,
            Condition::Prompt(0),
            Condition::Prompt(1),
            100.0,
            &s,
        )
        .unwrap();
        assert!(d <= 1e-10, "{d}");
    }
}
