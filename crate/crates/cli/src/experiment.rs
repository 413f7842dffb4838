//! `generate` and `edit`: replicate runs over consecutive seeds, written by a
//! single collector once every run has finished.

use std::path::Path;

use anyhow::Context;
use rayon::prelude::*;
use udslab::metrics::{identity_preservation, stability_stats, target_alignment, StabilityStats, DEFAULT_BURN_IN};
use udslab::optim::{sample_source, AdamConfig, RunConfig, ThetaInit};
use udslab::{run, Denoiser, RunOutput};

use crate::config::{image_side, Experiment, ExperimentConfig};
use crate::output::{fmt_f64, ppm_grid, write_bytes, Csv};
use crate::ConfigError;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Generate,
    Edit,
}

/// Columns of every per-run trace CSV.
pub const TRACE_COLUMNS: [&str; 7] = [
    "step",
    "t",
    "grad_norm",
    "grad_norm_normalized",
    "cos_recon",
    "cos_cls",
    "cos_identity",
];

#[derive(Debug, Clone)]
pub struct SeedResult {
    pub seed: u64,
    pub output: RunOutput,
    /// Log-density of the final render under the target prompt (quality proxy).
    pub target_log_density: f64,
    pub identity_preservation: Option<f64>,
    pub stability: StabilityStats,
}

/// Replicate cap from `UDSLAB_THREADS`; unset means the rayon default.
pub fn thread_cap() -> Result<Option<usize>, ConfigError> {
    match std::env::var("UDSLAB_THREADS") {
        Err(_) => Ok(None),
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n > 0 => Ok(Some(n)),
            _ => Err(ConfigError(format!(
                "UDSLAB_THREADS: expected a positive integer, got '{v}'"
            ))),
        },
    }
}

impl Experiment {
    pub fn run_config(&self, seed: u64) -> udslab::Result<RunConfig> {
        let mut rc = RunConfig::new(self.distiller.clone(), self.prompts, self.generator.clone());
        let r = &self.run;
        rc.steps = r.steps;
        rc.seed = seed;
        rc.record_every = r.record_every;
        rc.adam = AdamConfig {
            lr: r.lr,
            beta1: r.beta1,
            beta2: r.beta2,
            eps: r.adam_eps,
        };
        if self.distiller.method.is_editing() {
            rc.source_x0 = Some(match (&r.source_x0, self.prompts.src) {
                (Some(x), _) => x.clone(),
                (None, Some(src)) => sample_source(&self.registry, src, seed)?,
                (None, None) => return Err(udslab::LabError::MissingCondition("source prompt")),
            });
        } else {
            rc.init = ThetaInit::Random { scale: r.init_scale };
        }
        Ok(rc)
    }

    fn run_seed(&self, seed: u64, denoiser: &dyn Denoiser) -> udslab::Result<SeedResult> {
        let rc = self.run_config(seed)?;
        let output = run(&rc, denoiser, &self.sched)?;
        let target_log_density = target_alignment(&output.final_render, self.prompts.tgt, &self.registry)?;
        let identity = match (&rc.source_x0, self.run.frozen_dims.is_empty()) {
            (Some(src), false) => Some(identity_preservation(&output.final_render, src, &self.run.frozen_dims)?),
            _ => None,
        };
        let stability = stability_stats(&output.trace, DEFAULT_BURN_IN)?;
        Ok(SeedResult {
            seed,
            output,
            target_log_density,
            identity_preservation: identity,
            stability,
        })
    }

    /// Runs every seed, concurrently up to `threads`. Results are in seed order.
    pub fn run_all(&self, denoiser: &dyn Denoiser, threads: Option<usize>) -> anyhow::Result<Vec<SeedResult>> {
        let seeds: Vec<u64> = (0..self.run.seeds as u64).map(|k| self.run.seed + k).collect();
        let work =
            || -> Vec<udslab::Result<SeedResult>> { seeds.par_iter().map(|&s| self.run_seed(s, denoiser)).collect() };
        let results = match threads {
            Some(n) => rayon::ThreadPoolBuilder::new()
                .num_threads(n)
                .build()
                .context("building the replicate thread pool")?
                .install(work),
            None => work(),
        };
        Ok(results.into_iter().collect::<udslab::Result<Vec<_>>>()?)
    }
}

pub fn trace_csv(output: &RunOutput) -> Csv {
    let mut csv = Csv::new(&TRACE_COLUMNS);
    for r in &output.trace {
        csv.row(&[
            r.step.to_string(),
            r.t.to_string(),
            fmt_f64(r.grad_norm),
            fmt_f64(r.grad_norm_normalized),
            fmt_f64(r.cos_recon),
            fmt_f64(r.cos_cls),
            fmt_f64(r.cos_identity),
        ]);
    }
    csv
}

pub fn summary_csv(exp: &Experiment, results: &[SeedResult]) -> Csv {
    let dim = exp.registry.dim();
    let mut header: Vec<String> = [
        "method",
        "seed",
        "steps",
        "cfg_weight",
        "target_log_density_proxy",
        "identity_preservation",
        "grad_norm_normalized_mean",
        "grad_norm_normalized_stddev",
    ]
    .iter()
    .map(|s| s.to_string())
    .collect();
    header.extend((0..dim).map(|i| format!("final_{i}")));
    let refs: Vec<&str> = header.iter().map(String::as_str).collect();
    let mut csv = Csv::new(&refs);
    for r in results {
        let mut row = vec![
            exp.distiller.method.name().to_string(),
            r.seed.to_string(),
            exp.run.steps.to_string(),
            fmt_f64(exp.distiller.w),
            fmt_f64(r.target_log_density),
            r.identity_preservation.map(fmt_f64).unwrap_or_default(),
            fmt_f64(r.stability.mean),
            fmt_f64(r.stability.stddev),
        ];
        row.extend(r.output.final_render.iter().map(|v| fmt_f64(*v)));
        csv.row(&row);
    }
    csv
}

/// Loads, validates, runs and writes one experiment. Returns the per-seed
/// results for callers that want to inspect them.
pub fn execute(
    cfg: &ExperimentConfig,
    mode: Mode,
    config_dir: &Path,
    out_dir: &Path,
    threads: Option<usize>,
) -> anyhow::Result<Vec<SeedResult>> {
    let exp = Experiment::build(cfg)?;
    let method = exp.distiller.method;
    match mode {
        Mode::Generate if method.is_editing() => {
            return Err(ConfigError(format!("distiller.method: {method} is an editing method, use `edit`")).into())
        }
        Mode::Edit if !method.is_editing() => {
            return Err(ConfigError(format!(
                "distiller.method: {method} is a generation method, use `generate`"
            ))
            .into())
        }
        _ => {}
    }
    let denoiser = exp.denoiser(config_dir)?;
    let results = exp.run_all(denoiser.as_dyn(), threads)?;

    std::fs::create_dir_all(out_dir).with_context(|| format!("creating {}", out_dir.display()))?;
    for r in &results {
        let path = out_dir.join(format!("trace_{}_seed{}.csv", method.name(), r.seed));
        trace_csv(&r.output)
            .write(&path)
            .with_context(|| format!("writing {}", path.display()))?;
    }
    let path = out_dir.join(format!("summary_{}.csv", method.name()));
    summary_csv(&exp, &results)
        .write(&path)
        .with_context(|| format!("writing {}", path.display()))?;
    if exp.as_image {
        let side = image_side(exp.registry.dim()).expect("validated");
        for (name, pick) in [
            (
                "initial",
                (|r: &SeedResult| r.output.initial_render.clone()) as fn(&SeedResult) -> Vec<f64>,
            ),
            ("final", |r: &SeedResult| r.output.final_render.clone()),
        ] {
            let tiles: Vec<Vec<f64>> = results.iter().map(pick).collect();
            let path = out_dir.join(format!("grid_{}_{name}.ppm", method.name()));
            write_bytes(&path, &ppm_grid(&tiles, side)).with_context(|| format!("writing {}", path.display()))?;
        }
    }
    Ok(results)
}
