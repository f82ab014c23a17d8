// SPDX-License-Identifier: MIT OR Apache-2.0

//! Argument parsing and subcommand dispatch.

use std::ffi::OsString;
use std::io::Write;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

use crate::config::RunConfig;
use crate::error::{WbError, WbResult};
use crate::exec::{resolve_workers, Threaded};
use crate::pipeline;

#[derive(Debug, Parser)]
#[command(name = "crosstrace", version, about = "Causal tracing and representation injection on a toy multimodal transformer")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct Common {
    /// Run configuration (TOML).
    #[arg(long, value_name = "PATH")]
    pub config: PathBuf,
    /// Overrides the root seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Worker threads; falls back to CROSSTRACE_WORKERS, then the core count.
    #[arg(long)]
    pub workers: Option<usize>,
    /// Overwrite existing outputs.
    #[arg(long)]
    pub force: bool,
    /// Overrides the output directory.
    #[arg(long, value_name = "DIR")]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate the synthetic dataset.
    GenData {
        #[command(flatten)]
        common: Common,
    },
    /// Train the model and save the best checkpoint.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        lr: Option<f64>,
    },
    /// Find a corruption strength in the target drop band and store it in the config.
    CalibrateSigma {
        #[command(flatten)]
        common: Common,
        /// Report the result without rewriting the config file.
        #[arg(long)]
        no_write: bool,
    },
    /// Sweep recovery rates and emit the grid, heatmaps and attention profile.
    Trace {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        sigma: Option<f64>,
    },
    /// Build an injection plan and evaluate it against the baseline.
    InjectEval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        sigma: Option<f64>,
        #[arg(long)]
        no_rr_scaling: bool,
        #[arg(long)]
        no_norm: bool,
        /// both, attn, mlp or hidden.
        #[arg(long)]
        component: Option<String>,
        /// all, firstN or lastN.
        #[arg(long)]
        layer_range: Option<String>,
        #[arg(long)]
        k1: Option<usize>,
        #[arg(long)]
        k2: Option<usize>,
        #[arg(long)]
        lambda_a: Option<f64>,
        #[arg(long)]
        lambda_m: Option<f64>,
        /// rank or after-deepest.
        #[arg(long)]
        target_rule: Option<String>,
        /// Skip the timing runs.
        #[arg(long)]
        no_latency: bool,
    },
}

fn load(common: &Common) -> WbResult<RunConfig> {
    let mut cfg = RunConfig::load(&common.config)?;
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    if let Some(o) = &common.out {
        cfg.out_dir = o.clone();
    }
    Ok(cfg)
}

fn executor(common: &Common) -> Threaded {
    Threaded::new(resolve_workers(common.workers))
}

fn guard(path: &std::path::Path, force: bool) -> WbResult<()> {
    if path.exists() && !force {
        return Err(WbError::validation(
            "out_dir",
            format!("{} already exists (pass --force to overwrite)", path.display()),
        ));
    }
    Ok(())
}

/// Runs one parsed command, writing human-readable progress to `out`.
pub fn run(cli: Cli, out: &mut dyn Write) -> WbResult<()> {
    let say = |out: &mut dyn Write, s: String| {
        let _ = writeln!(out, "{s}");
    };
    match cli.command {
        Command::GenData { common } => {
            let cfg = load(&common)?;
            let path = pipeline::gen_data(&cfg, common.force)?;
            say(out, format!("wrote {}", path.display()));
        }
        Command::Train { common, steps, lr } => {
            let mut cfg = load(&common)?;
            if let Some(s) = steps {
                cfg.train.steps = s;
            }
            if let Some(l) = lr {
                cfg.train.lr = l;
            }
            cfg.validate()?;
            let paths = pipeline::Paths::new(&cfg);
            guard(&paths.checkpoint(), common.force)?;
            let exec = executor(&common);
            let s = pipeline::train(&cfg, &exec, |e| {
                say(out, format!("step {:>6}  loss {:.4}  val_acc {:.4}", e.step, e.loss, e.val_acc));
            })?;
            say(
                out,
                format!(
                    "best val_acc {:.4} at step {} ({:.1}s); wrote {} sha256 {}",
                    s.best_val_acc,
                    s.best_step,
                    s.elapsed_s,
                    paths.checkpoint().display(),
                    s.checkpoint_sha256
                ),
            );
        }
        Command::CalibrateSigma { common, no_write } => {
            let cfg = load(&common)?;
            let cal = pipeline::calibrate(&cfg, &executor(&common))?;
            say(
                out,
                format!("sigma {:.6} gives mean yes drop {:.4} after {} evaluations", cal.sigma, cal.drop, cal.iterations),
            );
            if !no_write {
                pipeline::write_sigma(&common.config, cal.sigma)?;
                say(out, format!("updated trace.sigma in {}", common.config.display()));
            }
        }
        Command::Trace { common, sigma } => {
            let mut cfg = load(&common)?;
            if let Some(s) = sigma {
                cfg.trace.sigma = s;
            }
            cfg.validate()?;
            let s = pipeline::trace(&cfg, &executor(&common))?;
            say(
                out,
                format!(
                    "traced {} samples at sigma {}; wrote {}",
                    s.n_samples,
                    cfg.trace.sigma,
                    pipeline::Paths::new(&cfg).rr_grid().display()
                ),
            );
        }
        Command::InjectEval {
            common,
            sigma,
            no_rr_scaling,
            no_norm,
            component,
            layer_range,
            k1,
            k2,
            lambda_a,
            lambda_m,
            target_rule,
            no_latency,
        } => {
            let mut cfg = load(&common)?;
            let i = &mut cfg.inject;
            if let Some(s) = sigma {
                cfg.trace.sigma = s;
            }
            i.use_rr_scaling &= !no_rr_scaling;
            i.use_normalization &= !no_norm;
            if let Some(v) = component {
                i.component = v;
            }
            if let Some(v) = layer_range {
                i.layer_range = v;
            }
            if let Some(v) = k1 {
                i.k1 = v;
            }
            if let Some(v) = k2 {
                i.k2 = v;
            }
            if let Some(v) = lambda_a {
                i.lambda_a = v;
            }
            if let Some(v) = lambda_m {
                i.lambda_m = v;
            }
            if let Some(v) = target_rule {
                i.target_rule = v;
            }
            cfg.validate()?;
            let r = pipeline::inject_eval(&cfg, &executor(&common), !no_latency)?;
            let path = pipeline::write_report(&cfg, &r)?;
            let b = &r.qa_baseline.corrupted;
            say(
                out,
                format!(
                    "corrupted QA accuracy {:.4} -> {:.4} (multiplier {}); wrote {}",
                    b.accuracy,
                    r.accuracy,
                    r.chosen_multiplier,
                    path.display()
                ),
            );
        }
    }
    Ok(())
}

/// Parses `args`, runs, and returns the process exit code. Errors go to
/// standard error.
pub fn main_with<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    let stdout = std::io::stdout();
    match run(cli, &mut stdout.lock()) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
