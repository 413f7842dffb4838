//! Experiment configuration file.
//!
//! ```json
//! {
//!   "schedule":  { "steps": 1000, "beta_start": 0.00085, "beta_end": 0.012 },
//!   "prompts":   [ { "id": "cat", "mixture": [ { "weight": 1.0, "mean": [0, 0], "var": 0.5 } ] } ],
//!   "distiller": { "method": "UDS_GEN", "target": "cat" },
//!   "generator": { "kind": "direct" },
//!   "run":       { "steps": 2000, "seeds": 10 }
//! }
//! ```
//!
//! Every object rejects keys it does not know. Everything except `prompts`
//! and `distiller.method` / `distiller.target` has a default.

use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::Deserialize;
use udslab::distill::Omega;
use udslab::gmm::Component;
use udslab::latent::{NoisingMode, X0ApproxMode};
use udslab::neural::DenoiserNet;
use udslab::schedule::SigmaForm;
use udslab::{
    Condition, Denoiser, DistillerConfig, GaussianMixture, Generator, GmmOracle, Method, NoiseSchedule, PromptPair,
    PromptRegistry,
};

use crate::ConfigError;

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub schedule: ScheduleSection,
    pub prompts: Vec<PromptSection>,
    pub distiller: DistillerSection,
    #[serde(default)]
    pub generator: GeneratorSection,
    #[serde(default)]
    pub run: RunSection,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScheduleSection {
    pub steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    pub sigma_form: SigmaFormName,
}

impl Default for ScheduleSection {
    fn default() -> Self {
        Self {
            steps: 1000,
            beta_start: 0.00085,
            beta_end: 0.012,
            sigma_form: SigmaFormName::Posterior,
        }
    }
}

#[derive(Debug, Clone, Copy, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SigmaFormName {
    Posterior,
    Literal,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PromptSection {
    pub id: String,
    pub mixture: Vec<ComponentSection>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ComponentSection {
    pub weight: f64,
    pub mean: Vec<f64>,
    pub var: Variance,
}

/// Isotropic scalar or per-coordinate variance.
#[derive(Debug, Clone, Deserialize)]
#[serde(untagged)]
pub enum Variance {
    Scalar(f64),
    Diagonal(Vec<f64>),
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DistillerSection {
    pub method: String,
    pub target: String,
    #[serde(default)]
    pub source: Option<String>,
    #[serde(default)]
    pub negative: Option<String>,
    #[serde(default)]
    pub cfg_weight: Option<f64>,
    #[serde(default)]
    pub interval: Option<usize>,
    #[serde(default)]
    pub x0_mode: Option<X0ModeName>,
    #[serde(default)]
    pub noising: Option<NoisingName>,
    #[serde(default)]
    pub t_min: Option<usize>,
    #[serde(default)]
    pub t_max: Option<usize>,
    #[serde(default)]
    pub omega: Option<OmegaName>,
}

/// `"tweedie"` or `{"ddim": n}`.
#[derive(Debug, Clone, Copy, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum X0ModeName {
    Tweedie,
    Ddim(usize),
}

/// `"forward"` or `{"ddim_inverse": n}`.
#[derive(Debug, Clone, Copy, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoisingName {
    Forward,
    DdimInverse(usize),
}

#[derive(Debug, Clone, Copy, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OmegaName {
    Constant,
    OneMinusAlphaBar,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GeneratorSection {
    pub kind: GeneratorKind,
    /// Number of basis functions for `cosine_basis`.
    pub cols: Option<usize>,
    /// Also write PPM grids; needs a square output dimension.
    pub as_image: bool,
}

impl Default for GeneratorSection {
    fn default() -> Self {
        Self {
            kind: GeneratorKind::Direct,
            cols: None,
            as_image: false,
        }
    }
}

#[derive(Debug, Clone, Copy, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GeneratorKind {
    Direct,
    CosineBasis,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunSection {
    pub steps: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub seed: u64,
    pub seeds: usize,
    pub init_scale: f64,
    pub record_every: usize,
    /// Coordinates used by the identity-preservation metric (editing).
    pub frozen_dims: Vec<usize>,
    /// Fixed source render for editing; sampled per seed when absent.
    pub source_x0: Option<Vec<f64>>,
    pub denoiser: DenoiserSection,
}

impl Default for RunSection {
    fn default() -> Self {
        let adam = udslab::optim::AdamConfig::default();
        Self {
            steps: 2000,
            lr: adam.lr,
            beta1: adam.beta1,
            beta2: adam.beta2,
            adam_eps: adam.eps,
            seed: 0,
            seeds: 1,
            init_scale: 0.1,
            record_every: 1,
            frozen_dims: Vec::new(),
            source_x0: None,
            denoiser: DenoiserSection::Oracle,
        }
    }
}

/// `"oracle"`, `{"network": {"path": ...}}` or `{"trained": {...}}`.
#[derive(Debug, Clone, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum DenoiserSection {
    #[default]
    Oracle,
    Network(NetworkFile),
    Trained(TrainSection),
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkFile {
    /// Relative paths resolve against the config file's directory.
    pub path: PathBuf,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub hidden: usize,
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    pub cond_dropout: f64,
    pub ema: f64,
    pub seed: u64,
}

impl Default for TrainSection {
    fn default() -> Self {
        let t = udslab::neural::TrainConfig::default();
        Self {
            hidden: 64,
            steps: t.steps,
            batch: t.batch,
            lr: t.lr,
            cond_dropout: t.cond_dropout,
            ema: t.ema,
            seed: t.seed,
        }
    }
}

/// Command-line values that replace config entries.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub seeds: Option<usize>,
    pub method: Option<String>,
    pub cfg_weight: Option<f64>,
}

impl ExperimentConfig {
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let de = &mut serde_json::Deserializer::from_str(text);
        serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            let inner = e.into_inner();
            ConfigError(format!("{path}: {inner}"))
        })
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text =
            std::fs::read_to_string(path).map_err(|e| ConfigError(format!("cannot read {}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn apply(&mut self, o: &Overrides) {
        if let Some(s) = o.seed {
            self.run.seed = s;
        }
        if let Some(n) = o.seeds {
            self.run.seeds = n;
        }
        if let Some(m) = &o.method {
            self.distiller.method = m.clone();
        }
        if let Some(w) = o.cfg_weight {
            self.distiller.cfg_weight = Some(w);
        }
    }
}

/// Where the noise predictions come from.
pub enum DenoiserChoice {
    Oracle(GmmOracle),
    Network(DenoiserNet),
}

impl DenoiserChoice {
    pub fn as_dyn(&self) -> &dyn Denoiser {
        match self {
            DenoiserChoice::Oracle(o) => o,
            DenoiserChoice::Network(n) => n,
        }
    }
}

/// A validated configuration with every library object built.
pub struct Experiment {
    pub sched: NoiseSchedule,
    pub registry: PromptRegistry,
    pub prompts: PromptPair,
    pub distiller: DistillerConfig,
    pub generator: Generator,
    pub as_image: bool,
    pub run: RunSection,
}

fn field<T>(name: &str, r: udslab::Result<T>) -> Result<T, ConfigError> {
    r.map_err(|e| ConfigError(format!("{name}: {e}")))
}

impl Experiment {
    pub fn build(cfg: &ExperimentConfig) -> Result<Self, ConfigError> {
        let s = &cfg.schedule;
        let sched = field("schedule", NoiseSchedule::linear(s.steps, s.beta_start, s.beta_end))?.with_sigma_form(
            match s.sigma_form {
                SigmaFormName::Posterior => SigmaForm::Posterior,
                SigmaFormName::Literal => SigmaForm::Literal,
            },
        );

        if cfg.prompts.is_empty() {
            return Err(ConfigError("prompts: at least one prompt is required".into()));
        }
        let mut named = Vec::with_capacity(cfg.prompts.len());
        for (i, p) in cfg.prompts.iter().enumerate() {
            if named.iter().any(|(n, _): &(String, GaussianMixture)| n == &p.id) {
                return Err(ConfigError(format!("prompts[{i}].id: duplicate id '{}'", p.id)));
            }
            let comps = p
                .mixture
                .iter()
                .map(|c| Component {
                    weight: c.weight,
                    mean: c.mean.clone(),
                    var: match &c.var {
                        Variance::Scalar(v) => vec![*v; c.mean.len()],
                        Variance::Diagonal(v) => v.clone(),
                    },
                })
                .collect();
            let mix = field(&format!("prompts[{i}].mixture"), GaussianMixture::new(comps))?;
            named.push((p.id.clone(), mix));
        }
        let registry = field("prompts", PromptRegistry::new(named))?;

        let d = &cfg.distiller;
        let method = Method::from_str(&d.method).map_err(|_| {
            let names: Vec<&str> = Method::ALL.iter().map(|m| m.name()).collect();
            ConfigError(format!(
                "distiller.method: unknown method '{}', expected one of {}",
                d.method,
                names.join(", ")
            ))
        })?;
        let lookup = |key: &str, id: &str| {
            registry
                .id_of(id)
                .ok_or_else(|| ConfigError(format!("distiller.{key}: unknown prompt id '{id}'")))
        };
        let tgt = Condition::Prompt(lookup("target", &d.target)?);
        let mut prompts = match (&d.source, method.is_editing()) {
            (Some(src), _) => PromptPair::editing(Condition::Prompt(lookup("source", src)?), tgt),
            (None, true) => return Err(ConfigError(format!("distiller.source: {method} needs a source prompt"))),
            (None, false) => PromptPair::generation(tgt),
        };
        if let Some(neg) = &d.negative {
            prompts.neg = Some(Condition::NegativePrompt(lookup("negative", neg)?));
        }

        let mut distiller = DistillerConfig::new(method);
        distiller.t_max = sched.steps();
        if let Some(w) = d.cfg_weight {
            distiller.w = w;
        }
        if let Some(c) = d.interval {
            distiller.interval = c;
        }
        if let Some(m) = d.x0_mode {
            distiller.x0_mode = match m {
                X0ModeName::Tweedie => X0ApproxMode::TweedieSingleStep,
                X0ModeName::Ddim(n) => X0ApproxMode::DdimMultiStep(n),
            };
        }
        if let Some(n) = d.noising {
            distiller.noising = match n {
                NoisingName::Forward => NoisingMode::ForwardProcess,
                NoisingName::DdimInverse(k) => NoisingMode::DdimInverse(k),
            };
        }
        if let Some(t) = d.t_min {
            distiller.t_min = t;
        }
        if let Some(t) = d.t_max {
            distiller.t_max = t;
        }
        if let Some(o) = d.omega {
            distiller.omega = match o {
                OmegaName::Constant => Omega::Constant1,
                OmegaName::OneMinusAlphaBar => Omega::OneMinusAlphaBar,
            };
        }
        field("distiller", distiller.validate(&sched))?;

        let dim = registry.dim();
        let g = &cfg.generator;
        let generator = match (g.kind, g.cols) {
            (GeneratorKind::Direct, None) => Generator::direct(dim),
            (GeneratorKind::Direct, Some(_)) => {
                return Err(ConfigError("generator.cols: only valid for kind cosine_basis".into()))
            }
            (GeneratorKind::CosineBasis, cols) => {
                field("generator.cols", Generator::cosine_basis(dim, cols.unwrap_or(dim)))?
            }
        };
        if g.as_image && image_side(dim).is_none() {
            return Err(ConfigError(format!(
                "generator.as_image: output dimension {dim} is not a perfect square"
            )));
        }

        let r = &cfg.run;
        if r.steps == 0 {
            return Err(ConfigError("run.steps: must be at least 1".into()));
        }
        if r.seeds == 0 {
            return Err(ConfigError("run.seeds: must be at least 1".into()));
        }
        if r.record_every == 0 {
            return Err(ConfigError("run.record_every: must be at least 1".into()));
        }
        if let Some(&bad) = r.frozen_dims.iter().find(|&&i| i >= dim) {
            return Err(ConfigError(format!(
                "run.frozen_dims: {bad} is out of range for dimension {dim}"
            )));
        }
        if let Some(x) = &r.source_x0 {
            if x.len() != dim {
                return Err(ConfigError(format!(
                    "run.source_x0: expected {dim} values, got {}",
                    x.len()
                )));
            }
        }
        Ok(Self {
            sched,
            registry,
            prompts,
            distiller,
            generator,
            as_image: g.as_image,
            run: r.clone(),
        })
    }

    /// Builds the configured denoiser; networks are loaded or trained here.
    pub fn denoiser(&self, config_dir: &Path) -> anyhow::Result<DenoiserChoice> {
        Ok(match &self.run.denoiser {
            DenoiserSection::Oracle => DenoiserChoice::Oracle(GmmOracle::new(self.registry.clone())),
            DenoiserSection::Network(f) => {
                let path = config_dir.join(&f.path);
                let net = DenoiserNet::load(&path)
                    .map_err(|e| ConfigError(format!("run.denoiser.network.path: {}: {e}", path.display())))?;
                if net.dim() != self.registry.dim() || net.n_prompts() != self.registry.len() {
                    return Err(ConfigError(format!(
                        "run.denoiser.network.path: network is {}-dimensional with {} prompts, config has {} and {}",
                        net.dim(),
                        net.n_prompts(),
                        self.registry.dim(),
                        self.registry.len()
                    ))
                    .into());
                }
                DenoiserChoice::Network(net)
            }
            DenoiserSection::Trained(t) => {
                use rand::SeedableRng;
                let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(t.seed);
                let mut net = DenoiserNet::new(self.registry.dim(), self.registry.len(), t.hidden, &mut rng)
                    .map_err(|e| ConfigError(format!("run.denoiser.trained: {e}")))?;
                let tc = udslab::neural::TrainConfig {
                    steps: t.steps,
                    batch: t.batch,
                    lr: t.lr,
                    cond_dropout: t.cond_dropout,
                    ema: t.ema,
                    seed: t.seed,
                };
                udslab::neural::train(&mut net, &self.registry, &self.sched, &tc)?;
                DenoiserChoice::Network(net)
            }
        })
    }
}

/// Side length when `dim` is a perfect square.
pub fn image_side(dim: usize) -> Option<usize> {
    let s = (dim as f64).sqrt().round() as usize;
    (s * s == dim).then_some(s)
}
