//! Config-driven benchmark pipeline: dataset generation, ground truth,
//! nuisance fitting, estimation and the MSE report.
//!
//! Every artifact embeds the config hash and the seed it was produced from.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{de::DeserializeOwned, Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::approx::{FeatureConfig, PinballOptions};
use crate::bellman::{SensitivityModel, Sign};
use crate::error::{Error, Result};
use crate::estimators::{
    cross_fit, direct_from_folds, orthogonal_from_folds, restart_percentile, weighted_from_folds, EstimatorKind,
    FoldLayout, FoldNuisance, FqeMilTrainer, RobustEstimate,
};
use crate::fqe::{FqeConfig, FqeSplit};
use crate::mdp::{rollout_dataset, Dataset, State, SyntheticEnv, SyntheticEnvConfig, ThresholdPolicy};
use crate::mil::MilConfig;
use crate::oracle::{benchmark_ground_truth, horizon_for, GroundTruth};

/// Robust FQE hyperparameters without the per-run sign, `Λ` and `γ`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FqeSettings {
    pub iterations: usize,
    pub split: FqeSplit,
    pub q_features: FeatureConfig,
    pub beta_features: FeatureConfig,
    pub ridge: f64,
    pub pinball: PinballOptions,
}

impl Default for FqeSettings {
    fn default() -> Self {
        let c = FqeConfig::new(SensitivityModel::constant(1.0).expect("valid"), Sign::Minus, 0.0);
        let cubic = FeatureConfig::Polynomial {
            degree: 3,
            center: 2.5,
            scale: 2.5,
        };
        FqeSettings {
            iterations: 200,
            split: c.split,
            q_features: cubic.clone(),
            beta_features: cubic,
            ridge: c.ridge,
            pinball: c.pinball,
        }
    }
}

impl FqeSettings {
    pub fn config(&self, lambda: f64, sign: Sign, gamma: f64, restart: u64) -> Result<FqeConfig> {
        Ok(FqeConfig {
            iterations: self.iterations,
            split: self.split,
            q_features: self.q_features.reseeded(restart),
            beta_features: self.beta_features.reseeded(restart),
            ridge: self.ridge,
            pinball: self.pinball.clone(),
            sign,
            sensitivity: SensitivityModel::constant(lambda)?,
            gamma,
        })
    }
}

/// Minimax weight-fit hyperparameters without the per-run sign, `Λ` and `γ`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MilSettings {
    pub stabilizer: f64,
    pub critic_ridge: f64,
    pub w_ridge: f64,
    pub w_features: FeatureConfig,
    pub critic_base: FeatureConfig,
    pub critic_rich: Option<FeatureConfig>,
    pub rounds: usize,
    pub sieve_cap: usize,
    pub tol: f64,
    pub w_max: f64,
    pub conserve_mass: bool,
}

impl Default for MilSettings {
    fn default() -> Self {
        let c = MilConfig::new(SensitivityModel::constant(1.0).expect("valid"), Sign::Minus, 0.0);
        MilSettings {
            stabilizer: 10.0,
            critic_ridge: c.critic_ridge,
            w_ridge: c.w_ridge,
            w_features: c.w_features,
            critic_base: c.critic_base,
            critic_rich: c.critic_rich,
            rounds: c.rounds,
            sieve_cap: c.sieve_cap,
            tol: c.tol,
            w_max: c.w_max,
            conserve_mass: c.conserve_mass,
        }
    }
}

impl MilSettings {
    pub fn config(&self, lambda: f64, sign: Sign, gamma: f64, restart: u64) -> Result<MilConfig> {
        Ok(MilConfig {
            stabilizer: self.stabilizer,
            critic_ridge: self.critic_ridge,
            w_ridge: self.w_ridge,
            w_features: self.w_features.reseeded(restart),
            critic_base: self.critic_base.reseeded(restart),
            critic_rich: self.critic_rich.as_ref().map(|c| c.reseeded(restart)),
            rounds: self.rounds,
            sieve_cap: self.sieve_cap,
            tol: self.tol,
            w_max: self.w_max,
            conserve_mass: self.conserve_mass,
            sign,
            sensitivity: SensitivityModel::constant(lambda)?,
            gamma,
        })
    }
}

/// Monte Carlo settings for the ground-truth stage.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OracleSettings {
    pub n_traj: usize,
    /// Truncation tolerance on the normalized value; sets the horizon.
    pub horizon_tol: f64,
}

impl Default for OracleSettings {
    fn default() -> Self {
        OracleSettings {
            n_traj: 200_000,
            horizon_tol: 1e-4,
        }
    }
}

/// One JSON document describing a full study.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub env: SyntheticEnvConfig,
    pub target: ThresholdPolicy,
    pub logging: ThresholdPolicy,
    pub lambdas: Vec<f64>,
    pub signs: Vec<Sign>,
    pub n: usize,
    pub burn_in: usize,
    pub thin: usize,
    pub replications: usize,
    /// Replication `i` uses seed `seed + i`.
    pub seed: u64,
    pub folds: FoldLayout,
    /// Nuisance-training restarts with reseeded features; 1 disables.
    pub restarts: usize,
    /// Percentile of the restart estimates that is reported.
    pub restart_percentile: f64,
    pub fqe: FqeSettings,
    pub mil: MilSettings,
    pub oracle: OracleSettings,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            env: SyntheticEnvConfig::default(),
            target: ThresholdPolicy::target(),
            logging: ThresholdPolicy::logging(),
            lambdas: vec![1.0, 2.0, 4.0, 8.0],
            signs: vec![Sign::Minus],
            n: 20_000,
            burn_in: 1000,
            thin: 10,
            replications: 10,
            seed: 0,
            folds: FoldLayout::SimpleSplit,
            restarts: 1,
            restart_percentile: 0.8,
            fqe: FqeSettings::default(),
            mil: MilSettings::default(),
            oracle: OracleSettings::default(),
        }
    }
}

impl ExperimentConfig {
    /// Replications 1, n 200, 3 FQE iterations.
    pub fn smoke() -> Self {
        let mut c = ExperimentConfig {
            n: 200,
            burn_in: 50,
            replications: 1,
            oracle: OracleSettings {
                n_traj: 500,
                horizon_tol: 1e-3,
            },
            ..ExperimentConfig::default()
        };
        c.fqe.iterations = 3;
        c.mil.rounds = 1;
        c
    }

    pub fn validate(&self) -> Result<()> {
        self.env.validate()?;
        crate::mdp::threshold_policy(self.target.threshold, self.target.smoothing)?;
        crate::mdp::threshold_policy(self.logging.threshold, self.logging.smoothing)?;
        if self.lambdas.is_empty() || self.signs.is_empty() {
            return Err(Error::InvalidArgument("need at least one lambda and one sign".into()));
        }
        for &l in &self.lambdas {
            SensitivityModel::constant(l)?;
        }
        if self.replications == 0 || self.restarts == 0 || self.thin == 0 || self.n == 0 {
            return Err(Error::InvalidArgument("replications, restarts, thin and n must be >= 1".into()));
        }
        if !(0.0..=1.0).contains(&self.restart_percentile) {
            return Err(Error::InvalidArgument("restart_percentile outside [0, 1]".into()));
        }
        if self.seed.checked_add(self.replications as u64).is_none() {
            return Err(Error::InvalidArgument("seed + replications overflows".into()));
        }
        self.folds.folds(self.n)?;
        self.fqe.config(1.0, Sign::Minus, self.env.gamma, 0)?.validate()?;
        self.mil.config(1.0, Sign::Minus, self.env.gamma, 0)?.validate()?;
        if self.oracle.n_traj < 2 || !(self.oracle.horizon_tol > 0.0) {
            return Err(Error::InvalidArgument("oracle needs n_traj >= 2 and horizon_tol > 0".into()));
        }
        Ok(())
    }

    /// First 16 hex digits of the SHA-256 of the canonical JSON encoding.
    pub fn hash(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("config serializes");
        let digest = Sha256::digest(&bytes);
        digest[..8].iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn replication_seed(&self, i: usize) -> u64 {
        self.seed + i as u64
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::json(path, e))
    }

    pub fn env(&self) -> Result<SyntheticEnv> {
        SyntheticEnv::new(self.env.clone())
    }

    pub fn d1(&self) -> Vec<State> {
        vec![State::scalar(self.env.initial_state)]
    }
}

/// Provenance block written next to (or inside) every artifact.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Stamp {
    pub config_hash: String,
    pub seed: u64,
}

/// Sidecar describing a dataset CSV.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub stamp: Stamp,
    pub n: usize,
    pub provenance: String,
    pub sha256: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TruthFile {
    pub stamp: Stamp,
    pub truths: Vec<GroundTruth>,
}

/// Fitted nuisances for one `(sign, Λ)`: one fold list per restart.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunNuisances {
    pub sign: Sign,
    pub lambda: f64,
    pub restarts: Vec<Vec<FoldNuisance>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NuisanceFile {
    pub stamp: Stamp,
    pub layout: FoldLayout,
    pub runs: Vec<RunNuisances>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EstimateFile {
    pub stamp: Stamp,
    pub replication: Option<usize>,
    pub estimates: Vec<RobustEstimate>,
}

pub const DATASET_CSV: &str = "dataset.csv";
pub const DATASET_META: &str = "dataset.meta.json";
pub const TRUTH_JSON: &str = "ground_truth.json";
pub const NUISANCE_JSON: &str = "nuisances.json";
pub const ESTIMATE_JSON: &str = "estimates.json";
pub const MSE_CSV: &str = "mse_table.csv";
pub const MSE_TXT: &str = "mse_table.txt";
pub const POINTS_CSV: &str = "results.csv";

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| Error::json(path, e))?;
    text.push('\n');
    write_bytes(path, text.as_bytes())
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::json(path, e))
}

fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn check_stamp(path: &Path, found: &Stamp, cfg_hash: &str) -> Result<()> {
    if found.config_hash != cfg_hash {
        return Err(Error::HashMismatch {
            path: path.to_path_buf(),
            expected: cfg_hash.to_string(),
            found: found.config_hash.clone(),
        });
    }
    Ok(())
}

/// Roll out the logging policy for replication seed `seed`.
pub fn generate(cfg: &ExperimentConfig, seed: u64) -> Result<Dataset> {
    let env = cfg.env()?;
    rollout_dataset(&env, &cfg.logging, cfg.n, cfg.burn_in, cfg.thin, seed)
}

/// Write `dataset.csv` and its sidecar into `dir`.
pub fn save_dataset(cfg: &ExperimentConfig, data: &Dataset, dir: &Path) -> Result<()> {
    let mut buf = Vec::new();
    data.write_csv(&mut buf)?;
    write_bytes(&dir.join(DATASET_CSV), &buf)?;
    let meta = DatasetMeta {
        stamp: Stamp {
            config_hash: cfg.hash(),
            seed: data.seed,
        },
        n: data.len(),
        provenance: data.provenance.clone(),
        sha256: sha256_hex(&buf),
    };
    write_json(&dir.join(DATASET_META), &meta)
}

/// Load a dataset CSV, verifying its sidecar (if present) against `cfg`.
pub fn load_dataset(cfg: &ExperimentConfig, csv_path: &Path) -> Result<Dataset> {
    let bytes = fs::read(csv_path).map_err(|e| Error::io(csv_path, e))?;
    let meta_path = csv_path.with_file_name(DATASET_META);
    let (seed, provenance) = if meta_path.exists() {
        let meta: DatasetMeta = read_json(&meta_path)?;
        check_stamp(&meta_path, &meta.stamp, &cfg.hash())?;
        let found = sha256_hex(&bytes);
        if found != meta.sha256 {
            return Err(Error::HashMismatch {
                path: csv_path.to_path_buf(),
                expected: meta.sha256,
                found,
            });
        }
        (meta.stamp.seed, meta.provenance)
    } else {
        (cfg.seed, format!("external file {}", csv_path.display()))
    };
    Dataset::read_csv(&bytes[..], seed, &provenance, &csv_path.display().to_string())
}

/// Ground truth for every configured `(sign, Λ)`.
pub fn ground_truth(cfg: &ExperimentConfig) -> Result<TruthFile> {
    let env = cfg.env()?;
    let horizon = horizon_for(cfg.env.gamma, cfg.oracle.horizon_tol);
    let mut truths = Vec::new();
    for &sign in &cfg.signs {
        for &lambda in &cfg.lambdas {
            truths.push(benchmark_ground_truth(
                &env,
                &cfg.target,
                lambda,
                sign,
                cfg.oracle.n_traj,
                horizon,
                cfg.seed,
            )?);
        }
    }
    Ok(TruthFile {
        stamp: Stamp {
            config_hash: cfg.hash(),
            seed: cfg.seed,
        },
        truths,
    })
}

/// Cross-fitted nuisances for every configured `(sign, Λ)` and restart.
pub fn fit(cfg: &ExperimentConfig, data: &Dataset) -> Result<NuisanceFile> {
    let gamma = cfg.env.gamma;
    let mut runs = Vec::new();
    for &sign in &cfg.signs {
        for &lambda in &cfg.lambdas {
            let mut restarts = Vec::with_capacity(cfg.restarts);
            for r in 0..cfg.restarts as u64 {
                let trainer = FqeMilTrainer {
                    fqe: cfg.fqe.config(lambda, sign, gamma, r)?,
                    mil: cfg.mil.config(lambda, sign, gamma, r)?,
                    d1: cfg.d1(),
                    target: &cfg.target,
                };
                restarts.push(cross_fit(data, cfg.folds, &trainer)?);
            }
            runs.push(RunNuisances { sign, lambda, restarts });
        }
    }
    Ok(NuisanceFile {
        stamp: Stamp {
            config_hash: cfg.hash(),
            seed: data.seed,
        },
        layout: cfg.folds,
        runs,
    })
}

/// Q, W and Orth estimates from persisted nuisances.
pub fn estimate(cfg: &ExperimentConfig, data: &Dataset, nuisances: &NuisanceFile) -> Result<EstimateFile> {
    let hash = cfg.hash();
    if nuisances.stamp.config_hash != hash {
        return Err(Error::HashMismatch {
            path: PathBuf::from(NUISANCE_JSON),
            expected: hash,
            found: nuisances.stamp.config_hash.clone(),
        });
    }
    let d1 = cfg.d1();
    let layout = nuisances.layout.describe();
    let mut estimates = Vec::new();
    for run in &nuisances.runs {
        let model = SensitivityModel::constant(run.lambda)?;
        for kind in EstimatorKind::ALL {
            let per_restart = run
                .restarts
                .iter()
                .map(|folds| {
                    check_eval_indices(folds, data.len())?;
                    match kind {
                        EstimatorKind::Q => direct_from_folds(folds, &cfg.target, &d1, &model, &layout),
                        EstimatorKind::W => weighted_from_folds(data, folds, &cfg.target, &model, &layout),
                        EstimatorKind::Orth => orthogonal_from_folds(data, folds, &cfg.target, &d1, &model, &layout),
                    }
                })
                .collect::<Result<Vec<_>>>()?;
            let mut e = combine_restarts(per_restart, cfg.restart_percentile)?;
            e.seed = Some(nuisances.stamp.seed);
            e.config_hash = Some(hash.clone());
            estimates.push(e);
        }
    }
    Ok(EstimateFile {
        stamp: Stamp {
            config_hash: hash,
            seed: nuisances.stamp.seed,
        },
        replication: None,
        estimates,
    })
}

fn check_eval_indices(folds: &[FoldNuisance], n: usize) -> Result<()> {
    let mut seen = vec![false; n];
    for f in folds {
        for &i in &f.eval {
            if i >= n || seen[i] {
                return Err(Error::InvalidArgument(format!(
                    "fold {} evaluation index {i} does not match a dataset of {n} tuples",
                    f.fold
                )));
            }
            seen[i] = true;
        }
    }
    Ok(())
}

/// A single restart passes through; several give the configured percentile of
/// the values, with the mean standard error.
fn combine_restarts(mut per_restart: Vec<RobustEstimate>, p: f64) -> Result<RobustEstimate> {
    if per_restart.len() == 1 {
        return Ok(per_restart.pop().expect("one element"));
    }
    let values: Vec<f64> = per_restart.iter().map(|e| e.value).collect();
    let value = restart_percentile(&values, p)?;
    let se = per_restart.iter().map(|e| e.std_error).sum::<f64>() / per_restart.len() as f64;
    let mut e = per_restart.swap_remove(0);
    e.value = value;
    e.std_error = se;
    if e.ci_2sided_95.is_some() {
        e.ci_lower_1sided_95 = Some(value - crate::estimators::Z_ONE_SIDED_95 * se);
        e.ci_upper_1sided_95 = Some(value + crate::estimators::Z_ONE_SIDED_95 * se);
        e.ci_2sided_95 = Some((
            value - crate::estimators::Z_TWO_SIDED_95 * se,
            value + crate::estimators::Z_TWO_SIDED_95 * se,
        ));
    }
    e.fold_layout = format!("{} p{}x{}", e.fold_layout, p, values.len());
    Ok(e)
}

pub fn replication_dir(out: &Path, i: usize) -> PathBuf {
    out.join(format!("rep_{i:03}"))
}

/// Generate, fit and estimate one replication, writing its artifacts.
pub fn run_replication(cfg: &ExperimentConfig, i: usize, out: &Path) -> Result<EstimateFile> {
    let dir = replication_dir(out, i);
    let data = generate(cfg, cfg.replication_seed(i))?;
    save_dataset(cfg, &data, &dir)?;
    let nuisances = fit(cfg, &data)?;
    write_json(&dir.join(NUISANCE_JSON), &nuisances)?;
    let mut est = estimate(cfg, &data, &nuisances)?;
    est.replication = Some(i);
    write_json(&dir.join(ESTIMATE_JSON), &est)?;
    Ok(est)
}

/// Full study: ground truth, then every replication on a pool of `workers`
/// threads, then the report.
pub fn run_experiment(cfg: &ExperimentConfig, out: &Path, workers: usize) -> Result<Report> {
    cfg.validate()?;
    write_json(&out.join("config.json"), cfg)?;
    let truth = ground_truth(cfg)?;
    write_json(&out.join(TRUTH_JSON), &truth)?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build()
        .map_err(|e| Error::InvalidArgument(format!("thread pool: {e}")))?;
    pool.install(|| {
        (0..cfg.replications)
            .into_par_iter()
            .map(|i| run_replication(cfg, i, out).map(|_| ()))
            .collect::<Result<Vec<()>>>()
    })?;
    report(out)
}

/// One row of the MSE table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MseRow {
    pub sign: Sign,
    pub lambda: f64,
    pub estimator: EstimatorKind,
    pub truth: f64,
    pub mse: f64,
    /// Standard deviation of the squared errors.
    pub sd: f64,
    pub replications: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportPoint {
    pub replication: usize,
    pub estimate: RobustEstimate,
    pub truth: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Report {
    pub stamp: Stamp,
    pub rows: Vec<MseRow>,
    pub points: Vec<ReportPoint>,
}

impl Report {
    pub fn row(&self, sign: Sign, lambda: f64, estimator: EstimatorKind) -> Option<&MseRow> {
        self.rows
            .iter()
            .find(|r| r.sign == sign && r.lambda == lambda && r.estimator == estimator)
    }

    pub fn table(&self) -> String {
        let mut s = format!(
            "MSE to true robust policy value (config {}, seed {})\n{:<6} {:>7} {:>24} {:>24} {:>24}\n",
            self.stamp.config_hash, self.stamp.seed, "sign", "lambda", "Q", "W", "Orth"
        );
        let mut keys: Vec<(Sign, f64)> = self.rows.iter().map(|r| (r.sign, r.lambda)).collect();
        keys.dedup();
        for (sign, lambda) in keys {
            s.push_str(&format!("{:<6} {:>7}", sign.as_str(), lambda));
            for kind in EstimatorKind::ALL {
                match self.row(sign, lambda, kind) {
                    Some(r) => s.push_str(&format!(" {:>24}", format!("{:.6} ± {:.6}", r.mse, r.sd))),
                    None => s.push_str(&format!(" {:>24}", "-")),
                }
            }
            s.push('\n');
        }
        s
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        let fmt_err = |p: &Path| {
            let p = p.to_path_buf();
            move |e: csv::Error| Error::Format {
                path: p.display().to_string(),
                msg: e.to_string(),
            }
        };
        let mse_path = dir.join(MSE_CSV);
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["config_hash", "seed", "sign", "lambda", "estimator", "truth", "mse", "sd", "replications"])
            .map_err(fmt_err(&mse_path))?;
        for r in &self.rows {
            w.write_record([
                self.stamp.config_hash.clone(),
                self.stamp.seed.to_string(),
                r.sign.as_str().to_string(),
                r.lambda.to_string(),
                r.estimator.to_string(),
                format!("{:.16e}", r.truth),
                format!("{:.16e}", r.mse),
                format!("{:.16e}", r.sd),
                r.replications.to_string(),
            ])
            .map_err(fmt_err(&mse_path))?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Format {
            path: mse_path.display().to_string(),
            msg: e.to_string(),
        })?;
        write_bytes(&mse_path, &bytes)?;

        let pts_path = dir.join(POINTS_CSV);
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record([
            "config_hash",
            "seed",
            "replication",
            "sign",
            "lambda",
            "estimator",
            "value",
            "std_error",
            "truth",
        ])
        .map_err(fmt_err(&pts_path))?;
        for p in &self.points {
            let e = &p.estimate;
            w.write_record([
                self.stamp.config_hash.clone(),
                e.seed.map(|s| s.to_string()).unwrap_or_default(),
                p.replication.to_string(),
                e.sign.as_str().to_string(),
                e.lambda.map(|l| l.to_string()).unwrap_or_default(),
                e.estimator.to_string(),
                format!("{:.16e}", e.value),
                format!("{:.16e}", e.std_error),
                format!("{:.16e}", p.truth),
            ])
            .map_err(fmt_err(&pts_path))?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Format {
            path: pts_path.display().to_string(),
            msg: e.to_string(),
        })?;
        write_bytes(&pts_path, &bytes)?;
        write_bytes(&dir.join(MSE_TXT), self.table().as_bytes())
    }
}

/// Aggregate `ground_truth.json` and every `rep_*/estimates.json` under `dir`.
pub fn load_report(dir: &Path) -> Result<Report> {
    let truth_path = dir.join(TRUTH_JSON);
    let truth: TruthFile = read_json(&truth_path)?;
    let hash = truth.stamp.config_hash.clone();
    let mut reps: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir() && p.file_name().and_then(|n| n.to_str()).is_some_and(|n| n.starts_with("rep_")))
        .collect();
    reps.sort();
    if reps.is_empty() {
        return Err(Error::InsufficientData(format!("no replications under {}", dir.display())));
    }
    let mut points = Vec::new();
    for (k, rep) in reps.iter().enumerate() {
        let path = rep.join(ESTIMATE_JSON);
        let file: EstimateFile = read_json(&path)?;
        check_stamp(&path, &file.stamp, &hash)?;
        for e in file.estimates {
            if e.config_hash.as_deref() != Some(hash.as_str()) {
                return Err(Error::HashMismatch {
                    path: path.clone(),
                    expected: hash.clone(),
                    found: e.config_hash.clone().unwrap_or_default(),
                });
            }
            let t = truth
                .truths
                .iter()
                .find(|t| Some(t.lambda) == e.lambda && t.sign == e.sign)
                .ok_or_else(|| Error::Format {
                    path: truth_path.display().to_string(),
                    msg: format!("no ground truth for sign {} lambda {:?}", e.sign.as_str(), e.lambda),
                })?;
            points.push(ReportPoint {
                replication: file.replication.unwrap_or(k),
                truth: t.value,
                estimate: e,
            });
        }
    }
    let mut groups: BTreeMap<(Sign, u64, EstimatorKind), (f64, Vec<f64>)> = BTreeMap::new();
    for p in &points {
        let lambda = p.estimate.lambda.unwrap_or(f64::NAN);
        let err = p.estimate.value - p.truth;
        groups
            .entry((p.estimate.sign, lambda.to_bits(), p.estimate.estimator))
            .or_insert((p.truth, Vec::new()))
            .1
            .push(err * err);
    }
    let mut rows: Vec<MseRow> = groups
        .into_iter()
        .map(|((sign, bits, estimator), (truth, sq))| {
            let m = sq.len() as f64;
            let mse = sq.iter().sum::<f64>() / m;
            let var = if sq.len() > 1 {
                sq.iter().map(|x| (x - mse) * (x - mse)).sum::<f64>() / (m - 1.0)
            } else {
                0.0
            };
            MseRow {
                sign,
                lambda: f64::from_bits(bits),
                estimator,
                truth,
                mse,
                sd: var.sqrt(),
                replications: sq.len(),
            }
        })
        .collect();
    rows.sort_by(|a, b| a.sign.cmp(&b.sign).then(a.lambda.total_cmp(&b.lambda)).then(a.estimator.cmp(&b.estimator)));
    Ok(Report {
        stamp: truth.stamp,
        rows,
        points,
    })
}

/// Aggregate and write `mse_table.csv`, `results.csv` and `mse_table.txt`.
pub fn report(dir: &Path) -> Result<Report> {
    let r = load_report(dir)?;
    r.write(dir)?;
    Ok(r)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hash_is_stable_and_sensitive() {
        let a = ExperimentConfig::default();
        let mut b = a.clone();
        assert_eq!(a.hash(), b.hash());
        assert_eq!(a.hash().len(), 16);
        b.seed = 1;
        assert_ne!(a.hash(), b.hash());
    }

    #[test]
    fn config_round_trips() {
        let a = ExperimentConfig::default();
        let text = serde_json::to_string(&a).unwrap();
        let b: ExperimentConfig = serde_json::from_str(&text).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.hash(), b.hash());
        let partial: ExperimentConfig = serde_json::from_str(r#"{"n": 500, "seed": 3}"#).unwrap();
        assert_eq!(partial.n, 500);
        assert_eq!(partial.lambdas, a.lambdas);
        assert!(serde_json::from_str::<ExperimentConfig>(r#"{"nn": 5}"#).is_err());
    }

    #[test]
    fn defaults_validate() {
        ExperimentConfig::default().validate().unwrap();
        ExperimentConfig::smoke().validate().unwrap();
    }
}
