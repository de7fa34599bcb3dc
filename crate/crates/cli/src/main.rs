use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use glrep_cli::{
    cmd_config, cmd_eval, cmd_forecast, cmd_generate, cmd_gradcheck, cmd_simulate, cmd_train, resolve, CliError,
    GenerateArgs, Overrides, GRADCHECK_THRESHOLD,
};

#[derive(Parser)]
#[command(name = "glrep", version, about = "Global and local time-series representations")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// TOML run configuration; missing keys take their defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override any config key, e.g. `--set model.beta=0.5`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    set: Vec<String>,
    /// Shortcut for the top-level `seed`.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Shortcut for `model.lambda`.
    #[arg(long, global = true)]
    lambda: Option<f64>,
    /// Shortcut for `model.epochs`.
    #[arg(long, global = true)]
    epochs: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Write the simulated dataset and its manifest.
    Simulate,
    /// Train a model and write the checkpoint and per-epoch metrics.
    Train,
    /// Write probe, swap and mutual-information reports.
    Eval {
        /// Second checkpoint whose MI is reported alongside.
        #[arg(long)]
        compare: Option<PathBuf>,
    },
    /// Forecast the last windows of every sample.
    Forecast {
        /// Windows to predict; defaults to `eval.horizon`.
        #[arg(long)]
        horizon: Option<usize>,
    },
    /// Sweep the global latent against local trajectories of chosen samples.
    Generate {
        #[arg(long)]
        sample: String,
        #[arg(long, default_value_t = 3)]
        zg_steps: usize,
        /// Sweep end point, comma separated.
        #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
        zg_to: Option<Vec<f64>>,
        /// Sample ids supplying local latents, comma separated.
        #[arg(long, value_delimiter = ',')]
        local_from: Option<Vec<String>>,
    },
    /// Check backward gradients of the objective against finite differences.
    Gradcheck {
        #[arg(long, hide = true)]
        inject_fault: Option<String>,
    },
    /// Print the effective configuration.
    Config,
}

fn run(cli: Cli) -> Result<(), CliError> {
    let c = cli.common;
    let overrides = Overrides {
        set: c.set,
        seed: c.seed,
        lambda: c.lambda,
        epochs: c.epochs,
    };
    let cfg = resolve(c.config.as_deref(), &overrides)?;
    match cli.command {
        Command::Simulate => {
            let out = cmd_simulate(&cfg)?;
            println!(
                "wrote {} samples x {} steps to {} (manifest {})",
                out.n_samples,
                out.length,
                out.data.display(),
                out.manifest.display()
            );
        }
        Command::Train => {
            let out = cmd_train(&cfg)?;
            let m = out.last;
            println!(
                "epoch {}: nll {:.4} kl_local {:.4} kl_global {:.4} reg {:.4} total {:.4}",
                m.epoch, m.nll, m.kl_local, m.kl_global, m.reg, m.total
            );
            println!("metrics {}", out.metrics.display());
            println!("checkpoint {} sha256 {}", out.checkpoint.display(), out.digest);
        }
        Command::Eval { compare } => {
            let out = cmd_eval(&cfg, compare.as_deref())?;
            println!("probe accuracy {:.4} ({} test samples)", out.probe.accuracy, out.probe.n_test);
            println!(
                "swap slope agreement {:.4} frequency preservation {:.4}",
                out.swap.slope_agreement, out.swap.frequency_preservation
            );
            println!("mi {:.6}", out.mi.mi);
            if let Some(c) = out.comparison {
                println!("{}", c.line());
            }
            println!("reports in {}", cfg.paths.out_dir.display());
        }
        Command::Forecast { horizon } => {
            let r = cmd_forecast(&cfg, horizon)?;
            println!(
                "horizon {} mse {:.6} persistence mse {:.6} nll {:.6} over {} points",
                r.horizon, r.mse, r.persistence_mse, r.nll, r.n_points
            );
        }
        Command::Generate {
            sample,
            zg_steps,
            zg_to,
            local_from,
        } => {
            let out = cmd_generate(
                &cfg,
                &GenerateArgs {
                    sample,
                    zg_steps,
                    zg_to,
                    local_from,
                },
            )?;
            println!("wrote {}x{} blocks to {}", out.rows, out.cols, out.path.display());
        }
        Command::Gradcheck { inject_fault } => {
            let r = cmd_gradcheck(cfg.seed, inject_fault.as_deref())?;
            let pass = r.passes(GRADCHECK_THRESHOLD);
            println!("max_rel_error {:e}", r.max_rel_error);
            println!("worst {}[{}]", r.worst_param, r.worst_index);
            println!("entries {}", r.entries_checked);
            println!("threshold {GRADCHECK_THRESHOLD:e}");
            println!("{}", if pass { "PASS" } else { "FAIL" });
            if !pass {
                return Err(CliError::GradCheckFailed);
            }
        }
        Command::Config => cmd_config(&cfg, &mut std::io::stdout().lock())?,
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
