use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use log::info;

use mobafl::experiment::{emit, run_experiment, run_sweep, sweep_csv, SweepAxis};
use mobafl::validation::{bounds_csv, bounds_table, read_grid, validate_suite};
use mobafl::ExperimentConfig;

#[derive(Parser)]
#[command(name = "mobafl", version, about = "Mobility-aware asynchronous FL simulator")]
struct Cli {
    /// Override any config key, e.g. `--set controller.V=1e-5`.
    #[arg(long = "set", value_name = "SECTION.KEY=VALUE", global = true)]
    overrides: Vec<String>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one experiment and write rounds.csv and summary.json.
    Simulate {
        /// Experiment config (TOML).
        #[arg(long)]
        config: PathBuf,
        /// mads, afl, afl_spar, sfl_spar or optimal.
        #[arg(long)]
        policy: Option<String>,
        #[arg(long)]
        seed: Option<u64>,
        /// Output directory; defaults to run.output_path.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run one experiment per axis value and repetition.
    Sweep {
        /// Experiment config (TOML).
        #[arg(long)]
        config: PathBuf,
        /// contact, intercontact, speed or V.
        #[arg(long)]
        axis: String,
        /// Comma-separated axis values.
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<f64>,
        /// Repetitions per value; seeds are shared across values and policies.
        #[arg(long, default_value_t = 1)]
        seeds: usize,
        /// Comma-separated policies; defaults to controller.policy.
        #[arg(long, value_delimiter = ',')]
        policies: Vec<String>,
        /// Output directory for sweep.csv and one subdirectory per run.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Evaluate the bounds on a CSV grid (lambda,c,delta,rate[,speed]).
    Bounds {
        /// Experiment config supplying the constants and model size.
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        grid: PathBuf,
    },
    /// Run the oracle self-checks.
    Validate {
        /// Multiply the Monte-Carlo sample counts.
        #[arg(long, default_value_t = 1.0)]
        scale: f64,
    },
}

fn load(path: &Path, overrides: &[String]) -> Result<ExperimentConfig> {
    ExperimentConfig::load(path, overrides).with_context(|| format!("loading {}", path.display()))
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match cli.command {
        Command::Simulate {
            config,
            policy,
            seed,
            out,
        } => {
            let mut overrides = cli.overrides.clone();
            if let Some(p) = policy {
                overrides.push(format!("controller.policy=\"{p}\""));
            }
            if let Some(s) = seed {
                overrides.push(format!("run.seed={s}"));
            }
            let cfg = load(&config, &overrides)?;
            let dir = out.unwrap_or_else(|| PathBuf::from(&cfg.run.output_path));
            info!(
                "simulating {} rounds, {} devices, policy {}",
                cfg.run.rounds, cfg.run.devices, cfg.controller.policy
            );
            let table = run_experiment(&cfg)?;
            let fp = emit(&table, &cfg, &dir)?;
            let s = &table.summary;
            println!(
                "policy={} rounds={} final_loss={:.6} test_metric={:.4} total_energy_j={:.4} fingerprint={fp}",
                s.policy, s.rounds, s.final_global_loss, s.final_test_metric, s.total_energy_j
            );
            println!("wrote {}", dir.display());
        }
        Command::Sweep {
            config,
            axis,
            values,
            seeds,
            policies,
            out,
        } => {
            let cfg = load(&config, &cli.overrides)?;
            let axis: SweepAxis = axis.parse()?;
            let dir = out.unwrap_or_else(|| PathBuf::from(&cfg.run.output_path));
            info!("sweeping {} over {:?} with {seeds} seed(s)", axis.name(), values);
            let points = run_sweep(&cfg, axis, &values, seeds, &policies)?;
            std::fs::create_dir_all(&dir)?;
            for p in &points {
                let sub = dir.join(format!(
                    "{}_{}={}_rep{}",
                    p.table.summary.policy,
                    axis.name(),
                    p.value,
                    p.repetition
                ));
                emit(&p.table, &p.config, sub)?;
            }
            let csv = sweep_csv(&points)?;
            std::fs::write(dir.join("sweep.csv"), &csv)?;
            print!("{}", String::from_utf8_lossy(&csv));
        }
        Command::Bounds { config, grid } => {
            let cfg = load(&config, &cli.overrides)?;
            let rows = read_grid(&grid).with_context(|| format!("reading {}", grid.display()))?;
            let world = mobafl::experiment::build_world(&cfg, cfg.controller.policy()?)?;
            let table = bounds_table(&cfg, world.model_size(), &rows)?;
            print!("{}", String::from_utf8_lossy(&bounds_csv(&table)?));
        }
        Command::Validate { scale } => {
            if scale.is_nan() || scale <= 0.0 {
                bail!("--scale must be positive");
            }
            let checks = validate_suite(scale)?;
            let mut failed = 0;
            for c in &checks {
                let status = match (c.passed, c.advisory) {
                    (true, _) => "PASS",
                    (false, false) => "FAIL",
                    (false, true) => "VIOLATED (advisory)",
                };
                println!("{status:<20} {}: {}", c.name, c.detail);
                if !c.passed && !c.advisory {
                    failed += 1;
                }
            }
            if failed > 0 {
                bail!("{failed} check(s) failed");
            }
        }
    }
    Ok(())
}
