//! `verify`: runs the reference-oracle checks and reports one row per check.
//!
//! Rows marked non-gating hold a tolerance that no correct implementation
//! meets (see the README); they are reported but only fail the command under
//! `--strict`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::Serialize;
use udslab::denoiser::ConstantDenoiser;
use udslab::gmm::Component;
use udslab::latent::{ddim_denoise_to_x0, ddim_invert, tweedie_x0, X0ApproxMode};
use udslab::oracles::{
    fd_score, gaussian_posterior_mean, naive_mixture_log_density, pds_coeff_check, sds_cfg_check, uds_expanded_check,
    uds_printed_check,
};
use udslab::{
    Condition, Denoiser, DistillerConfig, GaussianMixture, GmmOracle, Method, NoiseSchedule, PromptPair, PromptRegistry,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Expect {
    /// Passes when `value <= tolerance`.
    AtMost,
    /// Passes when `value > tolerance` (counterexamples).
    Above,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Check {
    pub name: &'static str,
    pub description: &'static str,
    pub value: f64,
    pub tolerance: f64,
    pub expect: Expect,
    pub gating: bool,
    pub passed: bool,
}

impl Check {
    fn new(name: &'static str, description: &'static str, value: f64, tolerance: f64, expect: Expect) -> Self {
        let passed = match expect {
            Expect::AtMost => value <= tolerance,
            Expect::Above => value > tolerance,
        };
        Self {
            name,
            description,
            value,
            tolerance,
            expect,
            gating: true,
            passed,
        }
    }

    fn non_gating(mut self) -> Self {
        self.gating = false;
        self
    }
}

#[derive(Debug, Clone, Copy)]
pub struct VerifyOptions {
    pub trials: usize,
    pub seed: u64,
    /// Flip the classifier sign inside the UDS editing delta.
    pub inject_sign_fault: bool,
}

impl Default for VerifyOptions {
    fn default() -> Self {
        Self {
            trials: 1000,
            seed: 0,
            inject_sign_fault: false,
        }
    }
}

fn normal_vec(rng: &mut ChaCha8Rng, d: usize, scale: f64) -> Vec<f64> {
    (0..d).map(|_| scale * rng.sample::<f64, _>(StandardNormal)).collect()
}

/// Three prompts in three dimensions with random two-component mixtures.
fn random_oracle(rng: &mut ChaCha8Rng) -> GmmOracle {
    let d = 3;
    let prompts = (0..3)
        .map(|k| {
            let w0: f64 = rng.random_range(0.2..0.8);
            let comps = [w0, 1.0 - w0]
                .into_iter()
                .map(|weight| Component {
                    weight,
                    mean: normal_vec(rng, d, 1.5),
                    var: (0..d).map(|_| rng.random_range(0.05..1.5)).collect(),
                })
                .collect();
            (format!("p{k}"), GaussianMixture::new(comps).expect("valid mixture"))
        })
        .collect();
    GmmOracle::new(PromptRegistry::new(prompts).expect("valid registry"))
}

struct Trial {
    x0: Vec<f64>,
    x0_src: Vec<f64>,
    eps: Vec<f64>,
    t: usize,
    w: f64,
}

fn trial(rng: &mut ChaCha8Rng, t_lo: usize) -> Trial {
    Trial {
        x0: normal_vec(rng, 3, 1.5),
        x0_src: normal_vec(rng, 3, 1.5),
        eps: normal_vec(rng, 3, 1.0),
        t: rng.random_range(t_lo..=1000),
        w: rng.random_range(0.0..100.0),
    }
}

const P0: Condition = Condition::Prompt(0);
const P1: Condition = Condition::Prompt(1);

fn uds_config(w: f64, fault: bool) -> DistillerConfig {
    let mut c = DistillerConfig::new(Method::UdsEdit).with_w(w);
    c.x0_mode = X0ApproxMode::TweedieSingleStep;
    c.inject_sign_fault = fault;
    c
}

/// Worst deviation of the UDS editing delta from an expansion, over trials.
fn uds_worst(
    check: fn(
        &[f64],
        &[f64],
        &[f64],
        usize,
        &dyn Denoiser,
        &PromptPair,
        &DistillerConfig,
        &NoiseSchedule,
    ) -> udslab::Result<f64>,
    trials: &[Trial],
    den: &GmmOracle,
    cfg: &DistillerConfig,
    sched: &NoiseSchedule,
) -> udslab::Result<f64> {
    let prompts = PromptPair::editing(P0, P1);
    trials.iter().try_fold(0.0f64, |m, tr| {
        Ok(m.max(check(&tr.x0_src, &tr.x0, &tr.eps, tr.t, den, &prompts, cfg, sched)?))
    })
}

fn smooth_mixture() -> GaussianMixture {
    GaussianMixture::new(vec![
        Component {
            weight: 0.4,
            mean: vec![1.0, 1.0],
            var: vec![0.8, 0.8],
        },
        Component {
            weight: 0.6,
            mean: vec![-1.0, 0.5],
            var: vec![0.8, 0.8],
        },
    ])
    .expect("valid mixture")
}

/// Invert with 50 steps to `t`, denoise back with 50; relative error.
fn round_trip(x0: &[f64], t: usize, den: &dyn Denoiser, cond: Condition, sched: &NoiseSchedule) -> udslab::Result<f64> {
    let x_t = ddim_invert(x0, t, 50, den, cond, sched)?;
    let back = ddim_denoise_to_x0(&x_t, t, 50, den, cond, sched)?;
    let num: f64 = back.iter().zip(x0).map(|(a, b)| (a - b).powi(2)).sum();
    let den: f64 = x0.iter().map(|b| b * b).sum();
    Ok((num / den).sqrt())
}

pub fn run_checks(opts: &VerifyOptions) -> udslab::Result<Vec<Check>> {
    let sched = NoiseSchedule::default_linear();
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let oracle = random_oracle(&mut rng);
    let mut checks = Vec::new();

    let trials: Vec<Trial> = (0..opts.trials).map(|_| trial(&mut rng, 1)).collect();
    let mut worst = 0.0f64;
    for tr in &trials {
        worst = worst.max(sds_cfg_check(&tr.x0, &tr.eps, tr.t, &oracle, P1, tr.w, &sched)?);
    }
    checks.push(Check::new(
        "sds_cfg_decomposition",
        "guided SDS delta equals recon + w * cls",
        worst,
        1e-12,
        Expect::AtMost,
    ));

    let constant = ConstantDenoiser {
        unconditional: vec![0.4, -1.1, 0.25],
        conditional: vec![1.3, 0.2, -0.7],
    };
    let pds_trials: Vec<Trial> = (0..opts.trials).map(|_| trial(&mut rng, 2)).collect();
    let mut worst = 0.0f64;
    for (i, tr) in pds_trials.iter().enumerate() {
        let den: &dyn Denoiser = if i % 2 == 0 { &oracle } else { &constant };
        worst = worst.max(pds_coeff_check(
            &tr.x0_src, &tr.x0, &tr.eps, tr.t, den, P0, P1, tr.w, &sched,
        )?);
    }
    checks.push(Check::new(
        "pds_coefficients",
        "stochastic-latent difference equals c0 dx0 + c1 d(eps)",
        worst,
        1e-10,
        Expect::AtMost,
    ));

    let fault = opts.inject_sign_fault;
    let w1 = uds_config(1.0, fault);
    let w2 = uds_config(2.0, fault);
    checks.push(Check::new(
        "uds_expanded_identity",
        "UDS edit delta at w=1 equals dx0 + d(eps_y - (1 + r) eps_none)",
        uds_worst(uds_expanded_check, &trials, &oracle, &w1, &sched)?,
        1e-12,
        Expect::AtMost,
    ));
    checks.push(Check::new(
        "uds_expanded_counterexample",
        "the same expansion fails at w=2",
        uds_worst(uds_expanded_check, &trials[..1], &oracle, &w2, &sched)?,
        1e-12,
        Expect::Above,
    ));
    checks.push(
        Check::new(
            "uds_printed_identity",
            "UDS edit delta at w=1 equals dx0 + d(eps_y - r eps_none)",
            uds_worst(uds_printed_check, &trials, &oracle, &w1, &sched)?,
            1e-12,
            Expect::AtMost,
        )
        .non_gating(),
    );
    checks.push(Check::new(
        "uds_printed_counterexample",
        "the printed expansion deviates at w=2",
        uds_worst(uds_printed_check, &trials[..1], &oracle, &w2, &sched)?,
        1e-12,
        Expect::Above,
    ));

    let (m, s2) = ([0.7], 0.6);
    let single = GmmOracle::new(PromptRegistry::new(vec![(
        "g".into(),
        GaussianMixture::isotropic(m.to_vec(), s2)?,
    )])?);
    let mut worst = 0.0f64;
    for i in 0..20 {
        let t = 1 + i * (sched.steps() - 1) / 19;
        for j in 0..20 {
            let x_t = [-3.0 + 6.0 * j as f64 / 19.0];
            let eps = single.predict(&x_t, t, P0, &sched)?;
            let got = tweedie_x0(&x_t, t, &eps, &sched)?;
            worst = worst.max((got[0] - gaussian_posterior_mean(&m, s2, &x_t, t, &sched)[0]).abs());
        }
    }
    checks.push(Check::new(
        "tweedie_gaussian_grid",
        "Tweedie estimate equals the Gaussian posterior mean on a 20x20 (x_t, t) grid",
        worst,
        1e-9,
        Expect::AtMost,
    ));

    let mut worst = 0.0f64;
    for t in [1, 50, 300, 1000] {
        let a = sched.alpha_bar(t);
        for k in 0..3 {
            let mix = oracle.registry().resolve(Condition::Prompt(k))?;
            let comps: Vec<(f64, Vec<f64>, Vec<f64>)> = mix
                .components()
                .iter()
                .map(|c| {
                    (
                        c.weight,
                        c.mean.iter().map(|v| a.sqrt() * v).collect(),
                        c.var.iter().map(|v| a * v + 1.0 - a).collect(),
                    )
                })
                .collect();
            let x = normal_vec(&mut rng, 3, 1.0);
            let score = fd_score(|y: &[f64]| naive_mixture_log_density(&comps, y), &x, 1e-4)?;
            let eps = oracle.predict(&x, t, Condition::Prompt(k), &sched)?;
            for i in 0..3 {
                worst = worst.max((eps[i] + (1.0 - a).sqrt() * score[i]).abs());
            }
        }
    }
    checks.push(Check::new(
        "epsilon_star_vs_fd_score",
        "mixture noise prediction equals -sqrt(1 - abar) times the finite-difference score",
        worst,
        1e-5,
        Expect::AtMost,
    ));

    let point = [0.8, -1.3];
    let dirac = GmmOracle::new(PromptRegistry::new(vec![(
        "d".into(),
        GaussianMixture::isotropic(point.to_vec(), 1e-12)?,
    )])?);
    let mut worst = 0.0f64;
    for t in [50, 500, sched.steps()] {
        let x_t = ddim_invert(&point, t, 50, &dirac, P0, &sched)?;
        let back = ddim_denoise_to_x0(&x_t, t, 50, &dirac, P0, &sched)?;
        for i in 0..2 {
            worst = worst.max((back[i] - point[i]).abs());
        }
    }
    checks.push(Check::new(
        "ddim_round_trip_point_mass",
        "50+50-step DDIM invert/denoise on a near-point-mass prior",
        worst,
        1e-9,
        Expect::AtMost,
    ));

    let smooth = GmmOracle::new(PromptRegistry::new(vec![("m".into(), smooth_mixture())])?);
    let mut worst = 0.0f64;
    for x0 in [[0.5, 0.5], [1.2, 1.1], [-1.5, 0.0], [2.0, -1.0]] {
        worst = worst.max(round_trip(
            &x0,
            sched.steps(),
            &smooth,
            Condition::Unconditional,
            &sched,
        )?);
    }
    checks.push(
        Check::new(
            "ddim_round_trip_smooth_mixture",
            "50+50-step DDIM invert/denoise to t=T on a smooth 2-component mixture (relative)",
            worst,
            1e-2,
            Expect::AtMost,
        )
        .non_gating(),
    );
    Ok(checks)
}

/// Names of the checks that fail the command.
pub fn failing(checks: &[Check], strict: bool) -> Vec<String> {
    checks
        .iter()
        .filter(|c| !c.passed && (c.gating || strict))
        .map(|c| c.name.to_string())
        .collect()
}

pub fn render_table(checks: &[Check]) -> String {
    let mut out = String::new();
    for c in checks {
        let status = match (c.passed, c.gating) {
            (true, _) => "PASS",
            (false, true) => "FAIL",
            (false, false) => "FAIL (non-gating)",
        };
        let op = match c.expect {
            Expect::AtMost => "<=",
            Expect::Above => ">",
        };
        out.push_str(&format!(
            "{status:<18} {:<32} {:>12.3e} {op} {:.0e}  {}\n",
            c.name, c.value, c.tolerance, c.description
        ));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn by_name<'a>(checks: &'a [Check], name: &str) -> &'a Check {
        checks.iter().find(|c| c.name == name).unwrap()
    }

    #[test]
    fn default_build_passes_every_gating_check() {
        let checks = run_checks(&VerifyOptions {
            trials: 200,
            ..VerifyOptions::default()
        })
        .unwrap();
        assert!(failing(&checks, false).is_empty(), "{}", render_table(&checks));
    }

    #[test]
    fn sign_fault_is_caught() {
        let checks = run_checks(&VerifyOptions {
            trials: 50,
            inject_sign_fault: true,
            ..VerifyOptions::default()
        })
        .unwrap();
        assert!(!by_name(&checks, "uds_expanded_identity").passed);
        assert!(failing(&checks, false).contains(&"uds_expanded_identity".to_string()));
    }
}
