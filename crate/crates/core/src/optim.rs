//! The distillation loop: sample noise and timestep, compute the configured
//! delta, chain it through the generator and take an Adam step.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::denoiser::{Condition, Denoiser};
use crate::distill::{compute_delta, DeltaInputs, DeltaTerms, DistillerConfig, PromptPair};
use crate::error::{check_dim, LabError, Result};
use crate::generator::Generator;
use crate::gmm::PromptRegistry;
use crate::metrics::cosine_sim;
use crate::schedule::NoiseSchedule;
use crate::vecops;

/// Number of leading records whose mean normalizes the gradient norm.
pub const NORMALIZATION_WINDOW: usize = 100;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-2,
            beta1: 0.9,
            beta2: 0.99,
            eps: 1e-8,
        }
    }
}

/// Bias-corrected Adam.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub config: AdamConfig,
    m: Vec<f64>,
    v: Vec<f64>,
    step: i32,
}

impl Adam {
    pub fn new(config: AdamConfig, dim: usize) -> Self {
        Self {
            config,
            m: vec![0.0; dim],
            v: vec![0.0; dim],
            step: 0,
        }
    }

    pub fn steps_taken(&self) -> i32 {
        self.step
    }

    pub fn step(&mut self, theta: &mut [f64], grad: &[f64]) -> Result<()> {
        check_dim(self.m.len(), grad.len())?;
        check_dim(self.m.len(), theta.len())?;
        if !vecops::all_finite(grad) {
            return Err(LabError::NonFinite("gradient".into()));
        }
        let AdamConfig { lr, beta1, beta2, eps } = self.config;
        self.step += 1;
        let bc1 = 1.0 - beta1.powi(self.step);
        let bc2 = 1.0 - beta2.powi(self.step);
        for i in 0..grad.len() {
            self.m[i] = beta1 * self.m[i] + (1.0 - beta1) * grad[i];
            self.v[i] = beta2 * self.v[i] + (1.0 - beta2) * grad[i] * grad[i];
            let m_hat = self.m[i] / bc1;
            let v_hat = self.v[i] / bc2;
            theta[i] -= lr * m_hat / (v_hat.sqrt() + eps);
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum ThetaInit {
    /// Generator default with the given scale (Direct: `scale * N(0, I)`).
    Random {
        scale: f64,
    },
    /// Start from the source render (editing).
    FromSource,
    Fixed(Vec<f64>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub distiller: DistillerConfig,
    pub prompts: PromptPair,
    pub generator: Generator,
    pub init: ThetaInit,
    pub steps: usize,
    pub adam: AdamConfig,
    pub seed: u64,
    pub source_x0: Option<Vec<f64>>,
    pub record_every: usize,
    pub record_theta: bool,
    pub record_terms: bool,
}

impl RunConfig {
    pub fn new(distiller: DistillerConfig, prompts: PromptPair, generator: Generator) -> Self {
        let init = if distiller.method.is_editing() {
            ThetaInit::FromSource
        } else {
            ThetaInit::Random { scale: 0.1 }
        };
        Self {
            distiller,
            prompts,
            generator,
            init,
            steps: 2000,
            adam: AdamConfig::default(),
            seed: 0,
            source_x0: None,
            record_every: 1,
            record_theta: false,
            record_terms: false,
        }
    }

    pub fn validate(&self, sched: &NoiseSchedule) -> Result<()> {
        self.distiller.validate(sched)?;
        if self.steps < 1 {
            return Err(LabError::InvalidConfig("steps must be at least 1".into()));
        }
        if self.record_every < 1 {
            return Err(LabError::InvalidConfig("record_every must be at least 1".into()));
        }
        let method = self.distiller.method;
        if method.is_editing() {
            if self.prompts.src.is_none() {
                return Err(LabError::MissingCondition("source prompt"));
            }
            match &self.source_x0 {
                Some(x) => check_dim(self.generator.output_dim(), x.len())?,
                None => return Err(LabError::MissingCondition("source render")),
            }
        } else if self.init == ThetaInit::FromSource {
            return Err(LabError::InvalidConfig(
                "generation runs cannot start from a source render".into(),
            ));
        }
        if method == crate::distill::Method::UdsGenNeg && self.prompts.neg.is_none() {
            return Err(LabError::MissingCondition("negative prompt"));
        }
        Ok(())
    }
}

/// Draws a source render from the source prompt's distribution on an RNG
/// stream derived from (but disjoint from) the run seed.
pub fn sample_source(registry: &PromptRegistry, src: Condition, seed: u64) -> Result<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(1);
    registry.sample_x0(src, &mut rng)
}

#[derive(Debug, Clone, PartialEq)]
pub struct TraceRecord {
    pub step: usize,
    pub t: usize,
    pub grad_norm: f64,
    pub grad_norm_normalized: f64,
    pub cos_recon: f64,
    pub cos_cls: f64,
    pub cos_identity: f64,
    pub theta: Option<Vec<f64>>,
    pub terms: Option<DeltaTerms>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunOutput {
    pub theta: Vec<f64>,
    pub initial_render: Vec<f64>,
    pub final_render: Vec<f64>,
    pub trace: Vec<TraceRecord>,
}

fn abort(step: usize, reason: impl Into<String>, config: &RunConfig) -> LabError {
    LabError::RunAborted {
        step,
        reason: reason.into(),
        config: format!("{config:?}"),
    }
}

/// Runs the configured distillation for a fixed step budget.
pub fn run(config: &RunConfig, denoiser: &dyn Denoiser, sched: &NoiseSchedule) -> Result<RunOutput> {
    config.validate(sched)?;
    check_dim(denoiser.dim(), config.generator.output_dim())?;
    let gen = &config.generator;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);

    let mut theta = match &config.init {
        ThetaInit::Random { scale } => gen.init_theta(*scale, &mut rng),
        ThetaInit::FromSource => gen.fit(config.source_x0.as_deref().expect("validated"))?,
        ThetaInit::Fixed(v) => {
            check_dim(gen.param_dim(), v.len())?;
            v.clone()
        }
    };
    let initial_render = gen.render(&theta)?;
    let mut adam = Adam::new(config.adam, theta.len());
    let t_lo = config.distiller.effective_t_min();
    let t_hi = config.distiller.t_max;
    let dim = gen.output_dim();

    let mut trace = Vec::with_capacity(config.steps / config.record_every + 1);
    let mut window_sum = 0.0;
    let mut window_len = 0usize;

    for step in 1..=config.steps {
        let x0 = gen.render(&theta)?;
        let eps: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
        let t = rng.random_range(t_lo..=t_hi);
        let inputs = DeltaInputs {
            x0: &x0,
            x0_src: config.source_x0.as_deref(),
            t,
            eps: &eps,
        };
        let terms = compute_delta(&inputs, denoiser, &config.prompts, &config.distiller, sched)
            .map_err(|e| abort(step, e.to_string(), config))?;
        let grad = gen.backprop_delta(&terms.total)?;
        if !vecops::all_finite(&grad) {
            return Err(abort(step, format!("non-finite gradient at t={t}"), config));
        }
        let grad_norm = vecops::norm(&grad);

        if (step - 1) % config.record_every == 0 {
            if window_len < NORMALIZATION_WINDOW {
                window_sum += grad_norm;
                window_len += 1;
            }
            let mean = window_sum / window_len as f64;
            let normalized = if mean > 0.0 { grad_norm / mean } else { 0.0 };
            trace.push(TraceRecord {
                step,
                t,
                grad_norm,
                grad_norm_normalized: normalized,
                cos_recon: cosine_sim(&terms.recon, &terms.total),
                cos_cls: cosine_sim(&vecops::scale(&terms.cls, terms.w), &terms.total),
                cos_identity: cosine_sim(&terms.identity, &terms.total),
                theta: None,
                terms: config.record_terms.then(|| terms.clone()),
            });
        }

        adam.step(&mut theta, &grad)
            .map_err(|e| abort(step, e.to_string(), config))?;
        if config.record_theta {
            if let Some(last) = trace.last_mut() {
                if last.step == step {
                    last.theta = Some(theta.clone());
                }
            }
        }
    }

    let final_render = gen.render(&theta)?;
    Ok(RunOutput {
        theta,
        initial_render,
        final_render,
        trace,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_keeps_theta() {
        let mut adam = Adam::new(AdamConfig::default(), 3);
        let mut th = vec![1.0, -2.0, 0.5];
        for _ in 0..50 {
            adam.step(&mut th, &[0.0; 3]).unwrap();
        }
        assert_eq!(th, vec![1.0, -2.0, 0.5]);
    }

    #[test]
    fn first_step_is_signed_lr() {
        let cfg = AdamConfig::default();
        let mut adam = Adam::new(cfg, 3);
        let g = [0.5, -3.0, 1e-3];
        let mut th = vec![0.0; 3];
        adam.step(&mut th, &g).unwrap();
        for i in 0..3 {
            let want = -cfg.lr * g[i] / (g[i].abs() + cfg.eps);
            assert!((th[i] - want).abs() < 1e-15);
        }
    }

    #[test]
    fn rejects_non_finite_and_mismatch() {
        let mut adam = Adam::new(AdamConfig::default(), 2);
        let mut th = vec![0.0; 2];
        assert!(adam.step(&mut th, &[f64::NAN, 0.0]).is_err());
        assert!(adam.step(&mut th, &[0.0]).is_err());
    }

    #[test]
    fn adam_is_deterministic() {
        let run = || {
            let mut adam = Adam::new(AdamConfig::default(), 2);
            let mut th = vec![0.3, 0.1];
            for k in 0..100 {
                let g = [(k as f64).sin(), (k as f64 * 0.3).cos()];
                adam.step(&mut th, &g).unwrap();
            }
            (adam, th)
        };
        let (a, ta) = run();
        let (b, tb) = run();
        assert_eq!(a, b);
        assert_eq!(ta, tb);
    }
}
