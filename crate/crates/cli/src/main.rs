use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Result;
use clap::{Args, Parser, Subcommand};
use udslab_cli::config::{ExperimentConfig, Overrides};
use udslab_cli::experiment::{execute, thread_cap, Mode};
use udslab_cli::verify::{failing, render_table, run_checks, VerifyOptions};
use udslab_cli::{exit_code, trace, VerifyFailed};

#[derive(Parser, Debug)]
#[command(
    name = "udslab",
    version,
    about = "Score-distillation experiments on analytic mixtures"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Distil a generation method and write traces and a summary.
    Generate(RunArgs),
    /// Distil an editing method and write traces and a summary.
    Edit(RunArgs),
    /// Check the implementation against the reference oracles.
    Verify {
        #[arg(long)]
        json: bool,
        /// Also fail on checks whose tolerance no correct implementation meets.
        #[arg(long)]
        strict: bool,
        /// Flip the classifier sign in the UDS editing delta.
        #[arg(long, hide = true)]
        inject_sign_fault: bool,
        #[arg(long, default_value_t = 1000)]
        trials: usize,
    },
    /// Per-method CSVs of gradient norms and term cosines from a trace directory.
    TraceAnalysis {
        trace_dir: PathBuf,
        /// Defaults to the trace directory.
        #[arg(long)]
        out_dir: Option<PathBuf>,
        #[arg(long)]
        json: bool,
    },
}

#[derive(Args, Debug)]
struct RunArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    /// Number of replicate seeds, starting at the base seed.
    #[arg(long)]
    seeds: Option<usize>,
    #[arg(long, default_value = "out")]
    out_dir: PathBuf,
    #[arg(long)]
    method: Option<String>,
    #[arg(long)]
    cfg_weight: Option<f64>,
    /// Print the per-seed summary as JSON.
    #[arg(long)]
    json: bool,
}

fn run_experiment(args: &RunArgs, mode: Mode) -> Result<()> {
    let mut cfg = ExperimentConfig::load(&args.config)?;
    cfg.apply(&Overrides {
        seed: args.seed,
        seeds: args.seeds,
        method: args.method.clone(),
        cfg_weight: args.cfg_weight,
    });
    let config_dir = args.config.parent().unwrap_or(Path::new("."));
    let results = execute(&cfg, mode, config_dir, &args.out_dir, thread_cap()?)?;
    if args.json {
        let rows: Vec<_> = results
            .iter()
            .map(|r| {
                serde_json::json!({
                    "seed": r.seed,
                    "target_log_density_proxy": r.target_log_density,
                    "identity_preservation": r.identity_preservation,
                    "grad_norm_normalized_stddev": r.stability.stddev,
                    "final_render": r.output.final_render,
                })
            })
            .collect();
        println!("{}", serde_json::to_string_pretty(&rows)?);
    } else {
        for r in &results {
            println!(
                "seed {:>4}  target log-density (proxy) {:>10.4}  grad-norm stddev {:.4}",
                r.seed, r.target_log_density, r.stability.stddev
            );
        }
        println!("wrote {}", args.out_dir.display());
    }
    Ok(())
}

fn real_main(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Generate(a) => run_experiment(&a, Mode::Generate),
        Command::Edit(a) => run_experiment(&a, Mode::Edit),
        Command::Verify {
            json,
            strict,
            inject_sign_fault,
            trials,
        } => {
            let checks = run_checks(&VerifyOptions {
                trials,
                inject_sign_fault,
                ..VerifyOptions::default()
            })?;
            if json {
                println!("{}", serde_json::to_string_pretty(&checks)?);
            } else {
                print!("{}", render_table(&checks));
            }
            let bad = failing(&checks, strict);
            if bad.is_empty() {
                Ok(())
            } else {
                Err(VerifyFailed(bad).into())
            }
        }
        Command::TraceAnalysis {
            trace_dir,
            out_dir,
            json,
        } => {
            let results = trace::analyse(&trace_dir)?;
            trace::write_analysis(&results, out_dir.as_deref().unwrap_or(&trace_dir))?;
            for m in &results {
                if json {
                    println!(
                        "{}",
                        serde_json::json!({"method": m.method, "traces": m.traces, "records": m.rows.len(), "tail_mean_cos_recon": m.tail_cos_recon})
                    );
                } else {
                    println!(
                        "{:<12} traces {:>3}  records {:>6}  tail mean cos(recon, delta) {:.4}",
                        m.method,
                        m.traces,
                        m.rows.len(),
                        m.tail_cos_recon
                    );
                }
            }
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match real_main(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e) as u8)
        }
    }
}
