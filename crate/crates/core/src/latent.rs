//! Latent-space operations shared by the distillers: guidance combination,
//! single-step and multi-step clean-sample estimates, deterministic DDIM
//! stepping and inversion, and the DDPM stochastic latent.

use crate::denoiser::{Condition, Denoiser};
use crate::error::{check_dim, LabError, Result};
use crate::schedule::NoiseSchedule;
use crate::vecops;

/// Divisions by `sqrt(abar_t)` are refused below this floor.
pub const ALPHA_BAR_FLOOR: f64 = 1e-6;

/// How the clean sample is estimated from `x_t`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum X0ApproxMode {
    TweedieSingleStep,
    DdimMultiStep(usize),
}

/// How a render is carried to noise level `t`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NoisingMode {
    ForwardProcess,
    DdimInverse(usize),
}

/// `eps_uncond + w (eps_cond - eps_uncond)`
pub fn cfg_combine(eps_uncond: &[f64], eps_cond: &[f64], w: f64) -> Vec<f64> {
    eps_uncond.iter().zip(eps_cond).map(|(u, c)| u + w * (c - u)).collect()
}

fn check_floor(t: usize, sched: &NoiseSchedule) -> Result<f64> {
    sched.check_t(t, 0)?;
    let a = sched.alpha_bar(t);
    if a < ALPHA_BAR_FLOOR {
        return Err(LabError::InvalidConfig(format!(
            "alpha_bar at t={t} is {a:e}, below the {ALPHA_BAR_FLOOR:e} floor"
        )));
    }
    Ok(a)
}

/// Posterior-mean estimate `(x_t - sqrt(1 - abar_t) eps) / sqrt(abar_t)`.
pub fn tweedie_x0(x_t: &[f64], t: usize, eps_pred: &[f64], sched: &NoiseSchedule) -> Result<Vec<f64>> {
    check_dim(x_t.len(), eps_pred.len())?;
    let a = check_floor(t, sched)?;
    let (sa, sn) = (a.sqrt(), (1.0 - a).sqrt());
    Ok(x_t.iter().zip(eps_pred).map(|(x, e)| (x - sn * e) / sa).collect())
}

/// One deterministic DDIM move from `t` to `t_prev`.
///
/// `t_prev == t` is the identity. The same formula run with `t_prev > t`
/// is the inversion step; use [`ddim_invert`] for that.
pub fn ddim_step(x_t: &[f64], t: usize, t_prev: usize, eps_pred: &[f64], sched: &NoiseSchedule) -> Result<Vec<f64>> {
    if t_prev > t {
        return Err(LabError::InvalidConfig(format!(
            "ddim_step needs t_prev <= t, got {t_prev} > {t}"
        )));
    }
    sched.check_t(t, 0)?;
    if t_prev == t {
        check_dim(x_t.len(), eps_pred.len())?;
        return Ok(x_t.to_vec());
    }
    ddim_move(x_t, t, t_prev, eps_pred, sched)
}

fn ddim_move(x_t: &[f64], t: usize, t_next: usize, eps_pred: &[f64], sched: &NoiseSchedule) -> Result<Vec<f64>> {
    let x0 = tweedie_x0(x_t, t, eps_pred, sched)?;
    let a = sched.alpha_bar(t_next);
    Ok(vecops::lincomb(a.sqrt(), &x0, (1.0 - a).sqrt(), eps_pred))
}

/// Evenly spaced integer grid from `from` to `to` with `n` intervals,
/// endpoints included, intermediate points rounded down. Repeated points
/// (possible when `n` exceeds the span) are dropped.
pub fn ddim_grid(from: usize, to: usize, n: usize) -> Vec<usize> {
    let n = n.max(1);
    let mut grid: Vec<usize> = (0..=n)
        .map(|i| {
            if from <= to {
                from + (to - from) * i / n
            } else {
                from - ((from - to) * i).div_ceil(n)
            }
        })
        .collect();
    grid.dedup();
    grid
}

fn ensure_finite(x: &[f64], what: &str, t: usize) -> Result<()> {
    if vecops::all_finite(x) {
        Ok(())
    } else {
        Err(LabError::NonFinite(format!("{what} at t={t}")))
    }
}

/// Deterministic DDIM inversion of `x0` up to `t_target` in `n_steps` moves.
pub fn ddim_invert(
    x0: &[f64],
    t_target: usize,
    n_steps: usize,
    denoiser: &dyn Denoiser,
    cond: Condition,
    sched: &NoiseSchedule,
) -> Result<Vec<f64>> {
    if n_steps == 0 {
        return Err(LabError::InvalidConfig("n_steps must be at least 1".into()));
    }
    sched.check_t(t_target, 0)?;
    check_dim(denoiser.dim(), x0.len())?;
    let grid = ddim_grid(0, t_target, n_steps);
    let mut x = x0.to_vec();
    for pair in grid.windows(2) {
        let (t, t_next) = (pair[0], pair[1]);
        let eps = denoiser.predict(&x, t, cond, sched)?;
        ensure_finite(&eps, "inversion prediction", t)?;
        x = ddim_move(&x, t, t_next, &eps, sched)?;
        ensure_finite(&x, "inversion state", t_next)?;
    }
    Ok(x)
}

/// Deterministic DDIM sampling from `x_t` down to a clean estimate.
pub fn ddim_denoise_to_x0(
    x_t: &[f64],
    t: usize,
    n_steps: usize,
    denoiser: &dyn Denoiser,
    cond: Condition,
    sched: &NoiseSchedule,
) -> Result<Vec<f64>> {
    if n_steps == 0 {
        return Err(LabError::InvalidConfig("n_steps must be at least 1".into()));
    }
    sched.check_t(t, 0)?;
    check_dim(denoiser.dim(), x_t.len())?;
    let grid = ddim_grid(t, 0, n_steps);
    let mut x = x_t.to_vec();
    for pair in grid.windows(2) {
        let (from, to) = (pair[0], pair[1]);
        let eps = denoiser.predict(&x, from, cond, sched)?;
        ensure_finite(&eps, "denoising prediction", from)?;
        x = ddim_move(&x, from, to, &eps, sched)?;
        ensure_finite(&x, "denoising state", to)?;
    }
    Ok(x)
}

/// Clean-sample estimate at `(x_t, t)` under the requested approximation.
/// `eps_at_t` is the prediction already computed at `(x_t, t, cond)`; it is
/// reused so the single-step path costs no extra evaluation.
pub fn estimate_x0(
    x_t: &[f64],
    t: usize,
    eps_at_t: &[f64],
    mode: X0ApproxMode,
    denoiser: &dyn Denoiser,
    cond: Condition,
    sched: &NoiseSchedule,
) -> Result<Vec<f64>> {
    match mode {
        X0ApproxMode::TweedieSingleStep => tweedie_x0(x_t, t, eps_at_t, sched),
        X0ApproxMode::DdimMultiStep(n) => {
            if n == 0 {
                return Err(LabError::InvalidConfig("DdimMultiStep needs n >= 1".into()));
            }
            let grid = ddim_grid(t, 0, n);
            let mut x = x_t.to_vec();
            for (k, pair) in grid.windows(2).enumerate() {
                let eps = if k == 0 {
                    eps_at_t.to_vec()
                } else {
                    denoiser.predict(&x, pair[0], cond, sched)?
                };
                x = ddim_move(&x, pair[0], pair[1], &eps, sched)?;
            }
            ensure_finite(&x, "multi-step estimate", t)?;
            Ok(x)
        }
    }
}

/// Noised render under the configured noising mode. The forward process
/// uses `eps`; DDIM inversion ignores it.
pub fn noise_to(
    x0: &[f64],
    t: usize,
    eps: &[f64],
    mode: NoisingMode,
    denoiser: &dyn Denoiser,
    sched: &NoiseSchedule,
) -> Result<Vec<f64>> {
    match mode {
        NoisingMode::ForwardProcess => sched.forward_noise(x0, t, eps),
        NoisingMode::DdimInverse(n) => ddim_invert(x0, t, n, denoiser, Condition::Unconditional, sched),
    }
}

/// DDPM stochastic latent `(x_{t-1} - mu(x_t)) / sigma_t`.
///
/// `x_{t-1}` and `x_t` are both built from `x0` with the shared `eps`, and
/// `mu = x0_coeff * x0_hat + xt_coeff * x_t` where `x0_hat` is the Tweedie
/// estimate under the guided prediction `cfg_combine(eps_uncond, eps_cond, w)`.
pub fn stochastic_latent(
    x0: &[f64],
    t: usize,
    eps: &[f64],
    denoiser: &dyn Denoiser,
    cond: Condition,
    w: f64,
    sched: &NoiseSchedule,
) -> Result<Vec<f64>> {
    let coeffs = sched.posterior_coeffs(t)?;
    check_dim(x0.len(), eps.len())?;
    let x_t = sched.forward_noise(x0, t, eps)?;
    let x_prev = sched.forward_noise(x0, t - 1, eps)?;
    let pred = guided_prediction(&x_t, t, denoiser, cond, w, sched)?;
    let x0_hat = tweedie_x0(&x_t, t, &pred, sched)?;
    Ok(x_prev
        .iter()
        .zip(&x0_hat)
        .zip(&x_t)
        .map(|((xp, xh), xt)| (xp - coeffs.x0_coeff * xh - coeffs.xt_coeff * xt) / coeffs.sigma)
        .collect())
}

/// `cfg_combine(eps(x, t, none), eps(x, t, cond), w)`; with `w == 1` the
/// conditional prediction is returned untouched.
pub fn guided_prediction(
    x_t: &[f64],
    t: usize,
    denoiser: &dyn Denoiser,
    cond: Condition,
    w: f64,
    sched: &NoiseSchedule,
) -> Result<Vec<f64>> {
    let eps_c = denoiser.predict(x_t, t, cond, sched)?;
    if w == 1.0 {
        return Ok(eps_c);
    }
    let eps_u = denoiser.predict(x_t, t, Condition::Unconditional, sched)?;
    Ok(cfg_combine(&eps_u, &eps_c, w))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gmm::{GaussianMixture, GmmOracle, PromptRegistry};

    fn dirac(m: Vec<f64>) -> GmmOracle {
        GmmOracle::new(PromptRegistry::new(vec![("d".into(), GaussianMixture::isotropic(m, 1e-24).unwrap())]).unwrap())
    }

    #[test]
    fn cfg_edge_weights() {
        let u = [1.0, -2.0];
        let c = [0.5, 3.0];
        assert_eq!(cfg_combine(&u, &c, 0.0), u.to_vec());
        assert_eq!(cfg_combine(&u, &c, 1.0), c.to_vec());
        assert_eq!(cfg_combine(&u, &u, 42.0), u.to_vec());
    }

    #[test]
    fn tweedie_inverts_forward_noise() {
        let s = NoiseSchedule::default_linear();
        let x0 = [0.3, -1.7, 2.2];
        let e = [1.1, 0.4, -0.9];
        for t in [1, 50, 500, 1000] {
            let xt = s.forward_noise(&x0, t, &e).unwrap();
            let back = tweedie_x0(&xt, t, &e, &s).unwrap();
            assert!(vecops::max_abs_diff(&back, &x0) < 1e-10 * (1.0 / s.alpha_bar(t)).sqrt());
        }
        let xt = [2.0, 4.0, -1.0];
        let z = tweedie_x0(&xt, 300, &[0.0; 3], &s).unwrap();
        let sa = s.alpha_bar(300).sqrt();
        assert_eq!(z, xt.iter().map(|v| v / sa).collect::<Vec<_>>());
    }

    #[test]
    fn tweedie_floor() {
        let s = NoiseSchedule::linear(10, 0.9, 0.9).unwrap();
        assert!(s.alpha_bar(10) < ALPHA_BAR_FLOOR);
        assert!(tweedie_x0(&[1.0], 10, &[0.0], &s).is_err());
    }

    #[test]
    fn ddim_step_cases() {
        let s = NoiseSchedule::default_linear();
        let xt = [0.4, -0.2];
        let e = [0.1, 0.7];
        let to_zero = ddim_step(&xt, 200, 0, &e, &s).unwrap();
        assert_eq!(to_zero, tweedie_x0(&xt, 200, &e, &s).unwrap());
        assert_eq!(ddim_step(&xt, 200, 200, &e, &s).unwrap(), xt.to_vec());
        assert!(ddim_step(&xt, 200, 201, &e, &s).is_err());

        // eps chosen so the clean estimate is zero
        let t = 300;
        let a = s.alpha_bar(t);
        let eps: Vec<f64> = xt.iter().map(|x| x / (1.0 - a).sqrt()).collect();
        let out = ddim_step(&xt, t, 100, &eps, &s).unwrap();
        let sn = (1.0 - s.alpha_bar(100)).sqrt();
        assert!(vecops::max_abs_diff(&out, &vecops::scale(&eps, sn)) < 1e-14);
    }

    #[test]
    fn ddim_step_dirac_prior() {
        let s = NoiseSchedule::default_linear();
        let m = vec![1.0, -2.0];
        let o = dirac(m.clone());
        let xt = [0.5, 0.5];
        let (t, tp) = (600, 250);
        let e = o.predict(&xt, t, Condition::Prompt(0), &s).unwrap();
        let got = ddim_step(&xt, t, tp, &e, &s).unwrap();
        let (a, ap) = (s.alpha_bar(t), s.alpha_bar(tp));
        for i in 0..2 {
            let want = ap.sqrt() * m[i] + (1.0 - ap).sqrt() * (xt[i] - a.sqrt() * m[i]) / (1.0 - a).sqrt();
            assert!((got[i] - want).abs() < 1e-10);
        }
    }

    #[test]
    fn grids() {
        assert_eq!(ddim_grid(0, 10, 4), vec![0, 2, 5, 7, 10]);
        assert_eq!(ddim_grid(10, 0, 4), vec![10, 7, 5, 2, 0]);
        assert_eq!(ddim_grid(0, 3, 10), vec![0, 1, 2, 3]);
        assert_eq!(ddim_grid(7, 7, 3), vec![7]);
        assert_eq!(ddim_grid(0, 1000, 1), vec![0, 1000]);
    }

    #[test]
    fn inversion_edge_cases() {
        let s = NoiseSchedule::default_linear();
        let m = vec![0.8, -0.3];
        let o = dirac(m.clone());
        let x0 = o.registry().resolve(Condition::Prompt(0)).unwrap().components()[0]
            .mean
            .clone();
        assert_eq!(ddim_invert(&x0, 0, 10, &o, Condition::Unconditional, &s).unwrap(), x0);
        for t in [100, 500, 900] {
            let xt = ddim_invert(&x0, t, 20, &o, Condition::Unconditional, &s).unwrap();
            let sa = s.alpha_bar(t).sqrt();
            for i in 0..2 {
                assert!((xt[i] - sa * m[i]).abs() < 1e-12);
            }
            let back = ddim_denoise_to_x0(&xt, t, 20, &o, Condition::Unconditional, &s).unwrap();
            assert!(vecops::max_abs_diff(&back, &m) < 1e-12);
        }
        assert!(ddim_invert(&x0, 10, 0, &o, Condition::Unconditional, &s).is_err());
        let a = ddim_invert(&[0.1, 0.2], 700, 13, &o, Condition::Unconditional, &s).unwrap();
        let b = ddim_invert(&[0.1, 0.2], 700, 13, &o, Condition::Unconditional, &s).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn single_step_denoise_is_tweedie() {
        let s = NoiseSchedule::default_linear();
        let o = GmmOracle::new(
            PromptRegistry::new(vec![(
                "g".into(),
                GaussianMixture::isotropic(vec![1.0, 1.0], 0.5).unwrap(),
            )])
            .unwrap(),
        );
        let xt = [0.2, 1.4];
        let e = o.predict(&xt, 420, Condition::Unconditional, &s).unwrap();
        let one = ddim_denoise_to_x0(&xt, 420, 1, &o, Condition::Unconditional, &s).unwrap();
        assert_eq!(one, tweedie_x0(&xt, 420, &e, &s).unwrap());
        let est = estimate_x0(
            &xt,
            420,
            &e,
            X0ApproxMode::DdimMultiStep(1),
            &o,
            Condition::Unconditional,
            &s,
        )
        .unwrap();
        assert_eq!(est, one);
    }

    #[test]
    fn stochastic_latent_zero_and_dirac() {
        let s = NoiseSchedule::default_linear();
        let m = vec![0.5, 1.5];
        let o = dirac(m.clone());
        let e = [0.9, -0.4];
        let t = 350;
        let z = stochastic_latent(&m, t, &e, &o, Condition::Prompt(0), 1.0, &s).unwrap();
        let c = s.posterior_coeffs(t).unwrap();
        let k = ((1.0 - s.alpha_bar(t - 1)).sqrt() - c.xt_coeff * (1.0 - s.alpha_bar(t)).sqrt()) / c.sigma;
        for i in 0..2 {
            assert!((z[i] - k * e[i]).abs() < 1e-9);
        }
        assert!(stochastic_latent(&m, 1, &e, &o, Condition::Prompt(0), 1.0, &s).is_err());
    }

    #[test]
    fn stochastic_latent_vanishes_when_prev_matches_mean() {
        // With eps = 0 and a perfect Dirac prior at x0, x_{t-1} is exactly the
        // posterior mean, so the latent is zero.
        let s = NoiseSchedule::default_linear();
        let m = vec![0.5, 1.5];
        let o = dirac(m.clone());
        let z = stochastic_latent(&m, 80, &[0.0, 0.0], &o, Condition::Prompt(0), 1.0, &s).unwrap();
        assert!(vecops::max_abs(&z) < 1e-12);
    }
}
