use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use nalgebra::DVector;

use maipwm::harness::{aggregate_from_replications, load_config, run_experiment, selfcheck, write_results, Experiment};

#[derive(Parser)]
#[command(name = "harness", about = "Coverage experiments for adaptive-data confidence regions")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the experiment described by a TOML config.
    Run {
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        reps: Option<usize>,
        #[arg(long)]
        workers: Option<usize>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Rebuild coverage tables from a replications.csv.
    Coverage {
        replications: PathBuf,
        #[arg(long, default_value = "unknown")]
        policy: String,
        #[arg(long, default_value = "unknown")]
        scenario: String,
        #[arg(long, default_value_t = 0.2)]
        alpha: f64,
        #[arg(long, default_value = "results")]
        out: PathBuf,
    },
    /// Print the target parameter of a config.
    Oracle { config: PathBuf },
    /// Run the built-in end-to-end checks.
    Selfcheck {
        #[arg(long, default_value = "selfcheck-out")]
        out: PathBuf,
    },
}

fn fmt_vec(v: &DVector<f64>) -> String {
    v.iter().map(|x| format!("{x:.6}")).collect::<Vec<_>>().join(", ")
}

fn run(cli: Cli) -> maipwm::Result<bool> {
    match cli.command {
        Command::Run { config, seed, reps, workers, out } => {
            let mut cfg = load_config(&config)?;
            if let Some(s) = seed {
                cfg.seed = s;
            }
            if let Some(r) = reps {
                cfg.reps = r;
            }
            if let Some(w) = workers {
                cfg.workers = w;
            }
            if let Some(o) = out {
                cfg.out = o;
            }
            let out = cfg.out.clone();
            let table = run_experiment(cfg, &out)?;
            for r in &table.coverage {
                println!(
                    "{:<18} T={:<6} coverage {:.3} (se {:.3}, n {}, flagged {})",
                    r.method.name(),
                    r.checkpoint_t,
                    r.coverage,
                    r.mc_se,
                    r.n_reps,
                    r.flagged
                );
            }
            println!("wrote {}", out.display());
            Ok(true)
        }
        Command::Coverage { replications, policy, scenario, alpha, out } => {
            let table = aggregate_from_replications(&replications, &policy, &scenario, alpha)?;
            write_results(&table, &out)?;
            println!("wrote {}", out.display());
            Ok(true)
        }
        Command::Oracle { config } => {
            let exp = Experiment::prepare(load_config(&config)?)?;
            println!("theta* = [{}]", fmt_vec(&exp.theta_star));
            if let Some(t) = exp.world.scenario.binarize_threshold {
                println!("binarize threshold = {t:.6}");
            }
            Ok(true)
        }
        Command::Selfcheck { out } => {
            let mut ok = true;
            for c in selfcheck(&out)? {
                println!("[{}] {}: {}", if c.passed { "pass" } else { "FAIL" }, c.name, c.detail);
                ok &= c.passed;
            }
            Ok(ok)
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
