use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use egal::data::{generate, save, split};
use egal::harness::{report, run_experiment, summarize, sweep_lambda, ExperimentConfig, RunResult};
use egal::{Error, Result};

#[derive(Parser)]
#[command(name = "egal", version, about = "Explainability-guided active learning experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic dataset and write it to `<out>/data`.
    GenData(Common),
    /// Run the acquisition loop for every configured strategy and seed.
    RunAl(Common),
    /// Run composite selection for several λ values.
    SweepLambda {
        #[command(flatten)]
        common: Common,
        /// Comma-separated λ values.
        #[arg(long, value_delimiter = ',', default_values_t = [0.0, 0.25, 0.5, 0.75, 1.0])]
        lambdas: Vec<f64>,
    },
    /// Summarize a finished run directory (defaults to the configured `out`).
    Report {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        dir: Option<PathBuf>,
    },
}

#[derive(Args)]
struct Common {
    /// Flat `key = value` configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    alpha: Option<f64>,
    /// Comma-separated strategy names.
    #[arg(long)]
    strategy: Option<String>,
    /// Comma-separated seeds.
    #[arg(long)]
    seeds: Option<String>,
    #[arg(long)]
    rounds: Option<usize>,
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    out: Option<PathBuf>,
}

impl Common {
    fn load(&self) -> Result<ExperimentConfig> {
        let mut cfg = match &self.config {
            Some(path) => ExperimentConfig::from_file(path)?,
            None => ExperimentConfig::default(),
        };
        let overrides = [
            ("lambda", self.lambda.map(|v| v.to_string())),
            ("alpha", self.alpha.map(|v| v.to_string())),
            ("strategy", self.strategy.clone()),
            ("seeds", self.seeds.clone()),
            ("rounds", self.rounds.map(|v| v.to_string())),
            ("k", self.k.map(|v| v.to_string())),
            ("out", self.out.as_ref().map(|p| p.display().to_string())),
        ];
        for (key, value) in overrides {
            if let Some(v) = value {
                cfg.set(key, &v)?;
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn print_summary(runs: &[RunResult]) {
    let mut tags: Vec<String> = Vec::new();
    for r in runs {
        let tag = egal::harness::strategy_tag(&r.strategy);
        if !tags.contains(&tag) {
            tags.push(tag);
        }
    }
    for tag in tags {
        let group: Vec<&RunResult> = runs
            .iter()
            .filter(|r| egal::harness::strategy_tag(&r.strategy) == tag)
            .collect();
        if let Some(last) = summarize(&group).last() {
            println!(
                "{tag}: round {} accuracy {:.4} ± {:.4}, macro-AUC {:.4} ± {:.4}, dice {:.4} ± {:.4}",
                last.round,
                last.accuracy.mean,
                last.accuracy.std,
                last.macro_auc.mean,
                last.macro_auc.std,
                last.mean_dice.mean,
                last.mean_dice.std
            );
        }
        for r in group.iter().filter(|r| r.truncated_at.is_some()) {
            println!("{tag} seed {}: pool exhausted at round {}", r.seed, r.truncated_at.unwrap_or(0));
        }
    }
}

fn execute(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData(common) => {
            let cfg = common.load()?;
            let ds = generate(&cfg.dataset)?;
            let state = split(&ds)?;
            let dir = cfg.out.join("data");
            save(&ds, &state, &dir)?;
            println!("wrote {} samples to {}", ds.samples.len(), dir.display());
        }
        Command::RunAl(common) => {
            let cfg = common.load()?;
            let runs = run_experiment(&cfg)?;
            print_summary(&runs);
            println!("artifacts in {}", cfg.out.display());
        }
        Command::SweepLambda { common, lambdas } => {
            let cfg = common.load()?;
            let runs = sweep_lambda(&cfg, &lambdas)?;
            print_summary(&runs);
            println!("sweep table in {}", cfg.out.join("sweep.csv").display());
        }
        Command::Report { common, dir } => {
            let dir = match dir {
                Some(d) => d,
                None => common.load()?.out,
            };
            let files = report(&dir)?;
            println!("{}", files.curves.display());
            println!("{}", files.census.display());
            println!("{} CAM dumps", files.cams.len());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            if let Error::MissingArtifacts(files) = &e {
                for f in files {
                    eprintln!("  missing: {f}");
                }
            }
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
