//! Analytic conditional denoiser over diagonal Gaussian mixtures.
//!
//! Each prompt id selects a mixture. The unconditional distribution is the
//! prior-weighted union of every registered prompt mixture, so the optimal
//! noise prediction for any condition is available in closed form from the
//! diffused marginal's score.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::denoiser::{Condition, Denoiser};
use crate::error::{check_dim, LabError, Result};
use crate::schedule::NoiseSchedule;

const LN_2PI: f64 = 1.837_877_066_409_345_5;

#[derive(Debug, Clone, PartialEq)]
pub struct Component {
    pub weight: f64,
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GaussianMixture {
    components: Vec<Component>,
    dim: usize,
}

impl GaussianMixture {
    pub fn new(components: Vec<Component>) -> Result<Self> {
        let first = components
            .first()
            .ok_or_else(|| LabError::InvalidMixture("no components".into()))?;
        let dim = first.mean.len();
        if dim == 0 {
            return Err(LabError::InvalidMixture("zero dimension".into()));
        }
        let mut total = 0.0;
        for (k, c) in components.iter().enumerate() {
            if c.mean.len() != dim || c.var.len() != dim {
                return Err(LabError::InvalidMixture(format!(
                    "component {k} has dimension {}/{}, expected {dim}",
                    c.mean.len(),
                    c.var.len()
                )));
            }
            if !(c.weight > 0.0 && c.weight.is_finite()) {
                return Err(LabError::InvalidMixture(format!(
                    "component {k} weight must be positive"
                )));
            }
            if c.var.iter().any(|v| !(*v > 0.0 && v.is_finite())) {
                return Err(LabError::InvalidMixture(format!(
                    "component {k} variances must be positive"
                )));
            }
            if c.mean.iter().any(|m| !m.is_finite()) {
                return Err(LabError::InvalidMixture(format!("component {k} mean is not finite")));
            }
            total += c.weight;
        }
        if (total - 1.0).abs() > 1e-12 {
            return Err(LabError::InvalidMixture(format!("weights sum to {total}, expected 1")));
        }
        Ok(Self { components, dim })
    }

    /// Single component `N(mean, var * I)`.
    pub fn isotropic(mean: Vec<f64>, var: f64) -> Result<Self> {
        let d = mean.len();
        Self::new(vec![Component {
            weight: 1.0,
            mean,
            var: vec![var; d],
        }])
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn components(&self) -> &[Component] {
        &self.components
    }

    /// The mixture after forward noising to step `t`: means scale by
    /// `sqrt(abar_t)`, variances become `abar_t v + 1 - abar_t`.
    pub fn marginal(&self, t: usize, sched: &NoiseSchedule) -> Result<Self> {
        sched.check_t(t, 0)?;
        let a = sched.alpha_bar(t);
        let sa = a.sqrt();
        let components = self
            .components
            .iter()
            .map(|c| Component {
                weight: c.weight,
                mean: c.mean.iter().map(|m| sa * m).collect(),
                var: c.var.iter().map(|v| a * v + (1.0 - a)).collect(),
            })
            .collect();
        Ok(Self {
            components,
            dim: self.dim,
        })
    }

    fn component_log_densities(&self, x: &[f64]) -> Vec<f64> {
        self.components
            .iter()
            .map(|c| {
                let mut lp = c.weight.ln();
                for ((xi, m), v) in x.iter().zip(&c.mean).zip(&c.var) {
                    let r = xi - m;
                    lp -= 0.5 * (LN_2PI + v.ln() + r * r / v);
                }
                lp
            })
            .collect()
    }

    /// Exact log-density, log-sum-exp stabilized.
    pub fn log_density(&self, x: &[f64]) -> Result<f64> {
        check_dim(self.dim, x.len())?;
        let lps = self.component_log_densities(x);
        let max = lps.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let sum: f64 = lps.iter().map(|lp| (lp - max).exp()).sum();
        Ok(max + sum.ln())
    }

    /// Posterior component responsibilities at `x`.
    pub fn responsibilities(&self, x: &[f64]) -> Result<Vec<f64>> {
        check_dim(self.dim, x.len())?;
        let lps = self.component_log_densities(x);
        let max = lps.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut r: Vec<f64> = lps.iter().map(|lp| (lp - max).exp()).collect();
        let s: f64 = r.iter().sum();
        r.iter_mut().for_each(|v| *v /= s);
        Ok(r)
    }

    /// Gradient of the log-density.
    pub fn score(&self, x: &[f64]) -> Result<Vec<f64>> {
        let r = self.responsibilities(x)?;
        let mut g = vec![0.0; self.dim];
        for (rk, c) in r.iter().zip(&self.components) {
            for (i, gi) in g.iter_mut().enumerate() {
                *gi -= rk * (x[i] - c.mean[i]) / c.var[i];
            }
        }
        Ok(g)
    }

    /// Ancestral sample: pick a component by weight, then add its noise.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        let u: f64 = rng.random();
        let mut acc = 0.0;
        let mut chosen = &self.components[self.components.len() - 1];
        for c in &self.components {
            acc += c.weight;
            if u < acc {
                chosen = c;
                break;
            }
        }
        chosen
            .mean
            .iter()
            .zip(&chosen.var)
            .map(|(m, v)| {
                let z: f64 = rng.sample(StandardNormal);
                m + v.sqrt() * z
            })
            .collect()
    }
}

/// Prompt id to mixture map, plus the derived unconditional mixture.
#[derive(Debug, Clone)]
pub struct PromptRegistry {
    names: Vec<String>,
    mixtures: Vec<GaussianMixture>,
    prior: Vec<f64>,
    unconditional: GaussianMixture,
}

impl PromptRegistry {
    /// Uniform prior over prompts.
    pub fn new(prompts: Vec<(String, GaussianMixture)>) -> Result<Self> {
        let n = prompts.len();
        Self::with_prior(prompts, vec![1.0 / n.max(1) as f64; n])
    }

    pub fn with_prior(prompts: Vec<(String, GaussianMixture)>, prior: Vec<f64>) -> Result<Self> {
        if prompts.is_empty() {
            return Err(LabError::InvalidMixture("registry needs at least one prompt".into()));
        }
        if prior.len() != prompts.len() {
            return Err(LabError::InvalidMixture(format!(
                "{} prior weights for {} prompts",
                prior.len(),
                prompts.len()
            )));
        }
        if prior.iter().any(|p| !(*p > 0.0 && p.is_finite())) {
            return Err(LabError::InvalidMixture("prior weights must be positive".into()));
        }
        let dim = prompts[0].1.dim();
        if prompts.iter().any(|(_, m)| m.dim() != dim) {
            return Err(LabError::InvalidMixture("prompt mixtures differ in dimension".into()));
        }
        let z: f64 = prior.iter().sum();
        let prior: Vec<f64> = prior.iter().map(|p| p / z).collect();
        let mut union = Vec::new();
        for ((_, mix), p) in prompts.iter().zip(&prior) {
            for c in mix.components() {
                union.push(Component {
                    weight: p * c.weight,
                    ..c.clone()
                });
            }
        }
        // Renormalize so rounding in the products cannot trip the weight check.
        let total: f64 = union.iter().map(|c| c.weight).sum();
        union.iter_mut().for_each(|c| c.weight /= total);
        let unconditional = GaussianMixture::new(union)?;
        let (names, mixtures) = prompts.into_iter().unzip();
        Ok(Self {
            names,
            mixtures,
            prior,
            unconditional,
        })
    }

    pub fn len(&self) -> usize {
        self.mixtures.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mixtures.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.unconditional.dim()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn prior(&self) -> &[f64] {
        &self.prior
    }

    pub fn id_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn resolve(&self, cond: Condition) -> Result<&GaussianMixture> {
        match cond {
            Condition::Unconditional => Ok(&self.unconditional),
            Condition::Prompt(id) | Condition::NegativePrompt(id) => {
                self.mixtures.get(id).ok_or(LabError::UnknownPrompt(id))
            }
        }
    }

    pub fn unconditional(&self) -> &GaussianMixture {
        &self.unconditional
    }

    pub fn sample_x0<R: Rng + ?Sized>(&self, cond: Condition, rng: &mut R) -> Result<Vec<f64>> {
        Ok(self.resolve(cond)?.sample(rng))
    }
}

/// Exact optimal noise predictor for the registered mixtures.
#[derive(Debug, Clone)]
pub struct GmmOracle {
    registry: PromptRegistry,
}

impl GmmOracle {
    pub fn new(registry: PromptRegistry) -> Self {
        Self { registry }
    }

    pub fn registry(&self) -> &PromptRegistry {
        &self.registry
    }

    /// `-sqrt(1 - abar_t) * grad log p_t(x_t | cond)`.
    pub fn epsilon_star(&self, x_t: &[f64], t: usize, cond: Condition, sched: &NoiseSchedule) -> Result<Vec<f64>> {
        let mix = self.registry.resolve(cond)?;
        check_dim(mix.dim(), x_t.len())?;
        let marginal = mix.marginal(t, sched)?;
        let s = (1.0 - sched.alpha_bar(t)).sqrt();
        Ok(marginal.score(x_t)?.into_iter().map(|g| -s * g).collect())
    }
}

impl Denoiser for GmmOracle {
    fn dim(&self) -> usize {
        self.registry.dim()
    }

    fn predict(&self, x_t: &[f64], t: usize, cond: Condition, sched: &NoiseSchedule) -> Result<Vec<f64>> {
        self.epsilon_star(x_t, t, cond, sched)
    }
}
