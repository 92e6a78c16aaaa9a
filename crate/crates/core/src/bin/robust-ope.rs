use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use robust_ope::bellman::Sign;
use robust_ope::error::{Error, Result};
use robust_ope::estimators::FoldLayout;
use robust_ope::experiment::{
    estimate, fit, generate, ground_truth, load_dataset, read_json, report, run_experiment, save_dataset, write_json,
    ExperimentConfig, NuisanceFile, DATASET_CSV, ESTIMATE_JSON, NUISANCE_JSON, TRUTH_JSON,
};

/// Robust off-policy evaluation under bounded transition perturbations.
#[derive(Parser)]
#[command(name = "robust-ope", version)]
struct Cli {
    /// Output directory.
    #[arg(long, global = true, env = "ROBUST_OPE_OUT", default_value = "robust-ope-out")]
    out: PathBuf,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Roll out the logging policy and write `dataset.csv` with its sidecar.
    Generate {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Replication index; the rollout seed is `seed + replication`.
        #[arg(long, default_value_t = 0)]
        replication: usize,
    },
    /// Monte Carlo ground truth for every configured sign and lambda.
    Oracle {
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Fit cross-fitted nuisances on a dataset.
    Fit {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        dataset: PathBuf,
    },
    /// Q, W and Orth estimates from persisted nuisances.
    Estimate {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        nuisances: PathBuf,
    },
    /// Full study: ground truth, every replication, MSE report.
    Experiment {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Worker threads for replications.
        #[arg(long, default_value_t = 1)]
        workers: usize,
    },
    /// Aggregate a finished study directory into MSE tables.
    Report {
        /// Study directory; defaults to `--out`.
        dir: Option<PathBuf>,
    },
}

#[derive(Args)]
struct ConfigArgs {
    /// JSON config; flags below override its fields.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    n: Option<usize>,
    #[arg(long, value_delimiter = ',')]
    lambdas: Option<Vec<f64>>,
    /// Comma-separated `minus`/`plus`.
    #[arg(long, value_delimiter = ',', value_parser = parse_sign)]
    signs: Option<Vec<Sign>>,
    #[arg(long)]
    replications: Option<usize>,
    /// `split` for a half/half split, or the number of cross-fitting folds.
    #[arg(long, value_parser = parse_folds)]
    folds: Option<FoldLayout>,
    #[arg(long)]
    restarts: Option<usize>,
    #[arg(long)]
    fqe_iterations: Option<usize>,
    #[arg(long)]
    n_traj: Option<usize>,
}

fn parse_sign(s: &str) -> std::result::Result<Sign, String> {
    match s {
        "minus" | "-" => Ok(Sign::Minus),
        "plus" | "+" => Ok(Sign::Plus),
        _ => Err(format!("unknown sign {s:?}")),
    }
}

fn parse_folds(s: &str) -> std::result::Result<FoldLayout, String> {
    if s == "split" {
        return Ok(FoldLayout::SimpleSplit);
    }
    s.parse()
        .map(|k| FoldLayout::KFold { k })
        .map_err(|_| format!("expected `split` or a fold count, got {s:?}"))
}

impl ConfigArgs {
    fn resolve(&self) -> Result<ExperimentConfig> {
        let mut c = match &self.config {
            Some(p) => ExperimentConfig::load(p)?,
            None => ExperimentConfig::default(),
        };
        if let Some(v) = self.seed {
            c.seed = v;
        }
        if let Some(v) = self.n {
            c.n = v;
        }
        if let Some(v) = &self.lambdas {
            c.lambdas = v.clone();
        }
        if let Some(v) = &self.signs {
            c.signs = v.clone();
        }
        if let Some(v) = self.replications {
            c.replications = v;
        }
        if let Some(v) = self.folds {
            c.folds = v;
        }
        if let Some(v) = self.restarts {
            c.restarts = v;
        }
        if let Some(v) = self.fqe_iterations {
            c.fqe.iterations = v;
        }
        if let Some(v) = self.n_traj {
            c.oracle.n_traj = v;
        }
        c.validate()?;
        Ok(c)
    }
}

fn run(cli: Cli) -> Result<String> {
    let out = cli.out.as_path();
    match cli.cmd {
        Cmd::Generate { cfg, replication } => {
            let c = cfg.resolve()?;
            let data = generate(&c, c.replication_seed(replication))?;
            save_dataset(&c, &data, out)?;
            Ok(path_line(&out.join(DATASET_CSV)))
        }
        Cmd::Oracle { cfg } => {
            let c = cfg.resolve()?;
            let path = out.join(TRUTH_JSON);
            write_json(&path, &ground_truth(&c)?)?;
            Ok(path_line(&path))
        }
        Cmd::Fit { cfg, dataset } => {
            let c = cfg.resolve()?;
            let data = load_dataset(&c, &dataset)?;
            let path = out.join(NUISANCE_JSON);
            write_json(&path, &fit(&c, &data)?)?;
            Ok(path_line(&path))
        }
        Cmd::Estimate { cfg, dataset, nuisances } => {
            let c = cfg.resolve()?;
            let data = load_dataset(&c, &dataset)?;
            let nu: NuisanceFile = read_json(&nuisances)?;
            let path = out.join(ESTIMATE_JSON);
            write_json(&path, &estimate(&c, &data, &nu)?)?;
            Ok(path_line(&path))
        }
        Cmd::Experiment { cfg, workers } => {
            if cfg.seed.is_none() {
                return Err(Error::InvalidArgument("experiment requires --seed".into()));
            }
            let c = cfg.resolve()?;
            Ok(run_experiment(&c, out, workers)?.table())
        }
        Cmd::Report { dir } => Ok(report(dir.as_deref().unwrap_or(out))?.table()),
    }
}

fn path_line(p: &Path) -> String {
    format!("{}\n", p.display())
}

fn fail(kind: &str, message: &str) -> ExitCode {
    let line = serde_json::json!({ "error": kind, "message": message });
    eprintln!("{line}");
    ExitCode::FAILURE
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let msg = e.to_string();
            let first = msg.lines().next().unwrap_or("").trim_start_matches("error: ");
            return fail("usage", first);
        }
    };
    match run(cli) {
        Ok(text) => {
            print!("{text}");
            ExitCode::SUCCESS
        }
        Err(e) => fail(e.kind(), &e.to_string()),
    }
}
