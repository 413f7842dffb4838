//! Canonical two-dimensional editing and generation tasks shared by the
//! tests, the acceptance suite and the example configs.

use crate::denoiser::Condition;
use crate::distill::{DistillerConfig, Method, PromptPair};
use crate::error::Result;
use crate::generator::Generator;
use crate::gmm::{Component, GaussianMixture, PromptRegistry};
use crate::optim::{sample_source, RunConfig};

fn two_component(a: [f64; 2], b: [f64; 2], var: f64) -> Result<GaussianMixture> {
    GaussianMixture::new(vec![
        Component {
            weight: 0.5,
            mean: a.to_vec(),
            var: vec![var; 2],
        },
        Component {
            weight: 0.5,
            mean: b.to_vec(),
            var: vec![var; 2],
        },
    ])
}

#[derive(Debug, Clone)]
pub struct EditingTask {
    pub registry: PromptRegistry,
    pub prompts: PromptPair,
    /// Coordinates the edit should leave untouched.
    pub frozen_dims: Vec<usize>,
    pub steps: usize,
}

impl EditingTask {
    /// Source and target are two-component mixtures that differ only in
    /// dimension 0: the target is the source shifted by +2 along it. The two
    /// source modes sit at different dimension-0 offsets so the mixtures do
    /// not factorize over coordinates, which would make dimension 1 exactly
    /// invariant under every method.
    ///
    /// The step budget is where the edits reach the target's dimension-0
    /// location; every method here keeps moving past it.
    pub fn canonical() -> Result<Self> {
        let var = 0.05;
        let src = two_component([-1.0, 1.0], [-0.5, -1.0], var)?;
        let tgt = two_component([1.0, 1.0], [1.5, -1.0], var)?;
        let registry = PromptRegistry::new(vec![("source".into(), src), ("target".into(), tgt)])?;
        Ok(Self {
            registry,
            prompts: PromptPair::editing(Condition::Prompt(0), Condition::Prompt(1)),
            frozen_dims: vec![1],
            steps: 300,
        })
    }

    pub fn run_config(&self, method: Method, w: f64, seed: u64) -> Result<RunConfig> {
        let src = self.prompts.src.expect("editing task has a source prompt");
        let mut rc = RunConfig::new(
            DistillerConfig::new(method).with_w(w),
            self.prompts,
            Generator::direct(self.registry.dim()),
        );
        rc.steps = self.steps;
        rc.seed = seed;
        rc.source_x0 = Some(sample_source(&self.registry, src, seed)?);
        Ok(rc)
    }
}

#[derive(Debug, Clone)]
pub struct GenerationTask {
    pub registry: PromptRegistry,
    pub prompts: PromptPair,
    /// Mean and per-coordinate standard deviation of the component the
    /// generation is expected to reach.
    pub target_mean: Vec<f64>,
    pub target_std: f64,
    pub steps: usize,
}

impl GenerationTask {
    /// Two prompts with one component each: a narrow target `N((2, 1), 0.25 I)`
    /// and a broad background `N((2, 1), 4 I)` around the same centre.
    pub fn canonical() -> Result<Self> {
        let target = GaussianMixture::isotropic(vec![2.0, 1.0], 0.25)?;
        let background = GaussianMixture::isotropic(vec![2.0, 1.0], 4.0)?;
        let registry = PromptRegistry::new(vec![("target".into(), target), ("background".into(), background)])?;
        Ok(Self {
            registry,
            prompts: PromptPair::generation(Condition::Prompt(0)),
            target_mean: vec![2.0, 1.0],
            target_std: 0.5,
            steps: 1000,
        })
    }

    pub fn run_config(&self, method: Method, w: f64, seed: u64) -> Result<RunConfig> {
        let mut rc = RunConfig::new(
            DistillerConfig::new(method).with_w(w),
            self.prompts,
            Generator::direct(self.registry.dim()),
        );
        rc.steps = self.steps;
        rc.seed = seed;
        Ok(rc)
    }
}
