use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use smr_lab::runner::{cmd_etc, cmd_gradcheck, cmd_nss, cmd_pendulum, GlobalOptions, RunError};

#[derive(Parser)]
#[command(name = "smrlab", version, about = "State-space models under sampling perturbation")]
struct Cli {
    /// TOML config for the subcommand; defaults are used when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides every seed in the config.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    /// Worker threads for independent runs.
    #[arg(long, global = true, default_value_t = 1)]
    threads: usize,
    /// Extra config line, e.g. `--set train.epochs=10`. Repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    set: Vec<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Event-triggered control run with sampling jitter replay.
    Etc,
    /// Sine fitting and perturbed-sampling evaluation.
    Nss,
    /// Pendulum dataset generation and paired regression.
    Pendulum {
        /// Write the dataset and stop.
        #[arg(long)]
        generate_only: bool,
    },
    /// Finite-difference check of every autodiff primitive.
    Gradcheck {
        /// Break this primitive's backward rule (fault injection).
        #[arg(long, value_name = "PRIMITIVE")]
        corrupt: Option<String>,
    },
}

fn run(cli: Cli) -> Result<(), RunError> {
    let mut opts = GlobalOptions {
        config: cli.config,
        seed: cli.seed,
        out: cli.out,
        threads: cli.threads.max(1),
        overrides: cli.set,
    };
    match cli.command {
        Command::Etc => {
            let m = cmd_etc(&opts)?;
            println!(
                "{} triggers, L_V(end)/L_V(0) = {:.3e}, perturbed max |x| = {:.3e} ({}/{} sweep seeds above 1e3)",
                m.trigger_count,
                m.lv_ratio,
                m.perturbed_max_norm,
                m.sweep_above_1e3,
                m.sweep_max_norms.len()
            );
        }
        Command::Nss => {
            let (r, _) = cmd_nss(&opts)?;
            println!(
                "smr = {}: clean MSE {:.3e}, perturbed MSE {:.3e}, ratio {:.2}, peak state {:.3e}, divergence = {}",
                r.smr, r.clean_mse, r.perturbed_mse, r.mse_ratio, r.peak_state, r.divergence_flag
            );
        }
        Command::Pendulum { generate_only } => {
            if generate_only {
                opts.overrides.push("generate_only = true".into());
            }
            match cmd_pendulum(&opts)? {
                Some(r) => println!(
                    "best test MSE without gate {:.4}, with gate {:.4}, smr_improves = {}",
                    r.without_smr.best_test_mse, r.with_smr.best_test_mse, r.smr_improves
                ),
                None => println!("dataset written to {}", opts.out.display()),
            }
        }
        Command::Gradcheck { corrupt } => {
            if let Some(op) = corrupt {
                opts.overrides.push(format!("corrupt = {}", toml_string(&op)));
            }
            print!("{}", cmd_gradcheck(&opts)?.table);
        }
    }
    Ok(())
}

fn toml_string(s: &str) -> String {
    format!("\"{}\"", s.replace('\\', "\\\\").replace('"', "\\\""))
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
