use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use mvchaos::experiment::{load_manifest, report_from_dir, run_experiment, run_match, ExperimentConfig, ExperimentReport, Stage};
use mvchaos::market::{simulate, Measure};
use mvchaos::metrics::TableRow;
use mvchaos::par;

#[derive(Parser)]
#[command(name = "mvchaos", version, about = "Multi-period mean-variance portfolios with transaction costs via chaos expansions")]
struct Cli {
    /// Worker threads; 0 uses the default pool.
    #[arg(long, global = true, env = "MVCHAOS_THREADS")]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Experiment config (TOML) or a manifest.json from an earlier run.
    #[arg(long, short)]
    config: PathBuf,
    #[arg(long)]
    seed_fit: Option<u64>,
    #[arg(long)]
    seed_train: Option<u64>,
    #[arg(long)]
    seed_test: Option<u64>,
    /// Output directory, overriding the config.
    #[arg(long, short)]
    output: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Only {
    Fit,
    Optimize,
    Benchmarks,
}

#[derive(Clone, Copy, ValueEnum)]
enum MeasureArg {
    Physical,
    RiskNeutral,
}

#[derive(Clone, Copy, ValueEnum)]
enum SeedRole {
    Fit,
    Train,
    Test,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate price paths and write them as CSV.
    Simulate {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum, default_value = "physical")]
        measure: MeasureArg,
        /// Which configured seed to use.
        #[arg(long, value_enum, default_value = "test")]
        seed_role: SeedRole,
        /// Number of paths; defaults to the configured count for the seed role.
        #[arg(long)]
        paths: Option<usize>,
    },
    /// Fit the terminal-price chaos expansions.
    Fit {
        #[command(flatten)]
        common: Common,
    },
    /// Fit, build strategy maps and solve the cost-aware problem.
    Optimize {
        #[command(flatten)]
        common: Common,
    },
    /// Run the comparison strategies.
    Benchmark {
        #[command(flatten)]
        common: Common,
    },
    /// Recompute the results table from the wealth files of a finished run.
    Report {
        /// Directory holding manifest.json and wealth_*.csv.
        dir: PathBuf,
    },
    /// Run every stage, or a subset with --only.
    Run {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum)]
        only: Option<Only>,
    },
    /// Rescale a stored solution to the uni-period volatility and compare.
    Match {
        #[command(flatten)]
        common: Common,
        /// Solution JSON written by `optimize` or `run`.
        #[arg(long)]
        solution: PathBuf,
    },
}

fn load_config(common: &Common) -> Result<ExperimentConfig> {
    let path = &common.config;
    let mut cfg = if path.extension().is_some_and(|e| e == "json") {
        load_manifest(path).with_context(|| format!("config: reading manifest {}", path.display()))?.config
    } else {
        ExperimentConfig::load(path).with_context(|| format!("config: {}", path.display()))?
    };
    if let Some(s) = common.seed_fit {
        cfg.seeds.fit = s;
    }
    if let Some(s) = common.seed_train {
        cfg.seeds.train = s;
    }
    if let Some(s) = common.seed_test {
        cfg.seeds.test = s;
    }
    if let Some(o) = &common.output {
        cfg.output_dir = o.clone();
    }
    cfg.validate().context("config")?;
    Ok(cfg)
}

fn print_rows(title: &str, rows: &[TableRow]) {
    if rows.is_empty() {
        return;
    }
    println!("{title}");
    println!("{:<40} {:>8} {:>8} {:>8} {:>11} {:>8}", "model", "gamma", "ret%", "vol%", "min-var", "sharpe");
    for r in rows {
        let s = &r.stats;
        let sharpe = s.sharpe.map_or("n/a".to_string(), |v| format!("{v:.4}"));
        println!(
            "{:<40} {:>8.4} {:>8.2} {:>8.2} {:>11.5} {:>8}",
            r.model,
            s.gamma,
            100.0 * s.rate_of_return,
            100.0 * s.volatility,
            s.min_var,
            sharpe
        );
    }
}

fn print_report(report: &ExperimentReport, out: &Path) {
    print_rows("Results", &report.table5);
    if let Some(m) = &report.matching {
        println!("matched risk aversion {:.5} (scale {:.5})", m.gamma_prime, m.scale);
    }
    print_rows("Matched comparison", &report.table6);
    for (name, sol) in [("cost-aware", &report.solution_cost), ("cost-free", &report.solution_nocost)] {
        if let Some(s) = sol {
            println!(
                "{name} solution: certificate {:.3e} +- {:.3e}{}",
                s.certificate.residual,
                s.certificate.stderr,
                if s.converged() { "" } else { " (not converged)" }
            );
        }
    }
    println!("{} files written to {}", report.files.len(), out.display());
}

fn stage_run(common: &Common, stage: Stage) -> Result<()> {
    let cfg = load_config(common)?;
    let report = run_experiment(&cfg, stage)?;
    print_report(&report, &cfg.output_dir);
    Ok(())
}

fn execute(command: Command) -> Result<()> {
    match command {
        Command::Simulate { common, measure, seed_role, paths } => {
            let cfg = load_config(&common)?;
            let (seed, default_n) = match seed_role {
                SeedRole::Fit => (cfg.seeds.fit, cfg.chaos.fit_paths),
                SeedRole::Train => (cfg.seeds.train, cfg.train_paths),
                SeedRole::Test => (cfg.seeds.test, cfg.eval_paths),
            };
            let measure = match measure {
                MeasureArg::Physical => Measure::Physical,
                MeasureArg::RiskNeutral => Measure::RiskNeutral,
            };
            let grid = cfg.market.time_grid().context("simulate")?;
            let batch = simulate(&cfg.market, &grid, paths.unwrap_or(default_n), seed, measure).context("simulate")?;
            std::fs::create_dir_all(&cfg.output_dir)?;
            let p = cfg.output_dir.join("paths.csv");
            batch.write_csv(&p).context("simulate: writing paths")?;
            println!("{} paths written to {}", batch.n_paths, p.display());
        }
        Command::Fit { common } => stage_run(&common, Stage::Fit)?,
        Command::Optimize { common } => stage_run(&common, Stage::Optimize)?,
        Command::Benchmark { common } => stage_run(&common, Stage::Benchmarks)?,
        Command::Run { common, only } => {
            let stage = match only {
                None => Stage::All,
                Some(Only::Fit) => Stage::Fit,
                Some(Only::Optimize) => Stage::Optimize,
                Some(Only::Benchmarks) => Stage::Benchmarks,
            };
            stage_run(&common, stage)?
        }
        Command::Report { dir } => {
            let rows = report_from_dir(&dir).with_context(|| format!("report: {}", dir.display()))?;
            if rows.is_empty() {
                bail!("report: no wealth files in {}", dir.display());
            }
            print_rows("Results", &rows);
        }
        Command::Match { common, solution } => {
            let cfg = load_config(&common)?;
            let report = run_match(&cfg, &solution)?;
            print_report(&report, &cfg.output_dir);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let threads = cli.threads.unwrap_or(0);
    match par::with_threads(threads, move || execute(cli.command)) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            match e.downcast_ref::<mvchaos::error::Error>() {
                Some(mvchaos::error::Error::Config(_)) => ExitCode::from(2),
                Some(mvchaos::error::Error::Divergence { .. }) | Some(mvchaos::error::Error::Solver(_)) => ExitCode::from(3),
                _ => ExitCode::FAILURE,
            }
        }
    }
}
