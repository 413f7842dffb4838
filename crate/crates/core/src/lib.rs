//! A small laboratory for score-distillation methods on low-dimensional
//! data with analytically known scores.
//!
//! The pieces are: a DDPM noise schedule, an exact Gaussian-mixture
//! denoiser and a small trainable one, latent-space helpers (guidance,
//! Tweedie, DDIM), the distillation deltas themselves, a linear generator,
//! the Adam-driven distillation loop and the metrics used to compare runs.

pub mod denoiser;
pub mod distill;
pub mod error;
pub mod generator;
pub mod gmm;
pub mod latent;
pub mod metrics;
pub mod neural;
pub mod optim;
pub mod oracles;
pub mod schedule;
pub mod tasks;
pub mod vecops;

pub use denoiser::{Condition, Denoiser};
pub use distill::{DeltaTerms, DistillerConfig, Method, Omega, PromptPair};
pub use error::{LabError, Result};
pub use generator::Generator;
pub use gmm::{GaussianMixture, GmmOracle, PromptRegistry};
pub use optim::{run, RunConfig, RunOutput};
pub use schedule::NoiseSchedule;
