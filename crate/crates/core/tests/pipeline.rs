use std::path::Path;
use std::process::Command;

use robust_ope::bellman::Sign;
use robust_ope::error::Error;
use robust_ope::estimators::EstimatorKind;
use robust_ope::experiment::{
    estimate, fit, generate, load_dataset, read_json, replication_dir, report, run_experiment, save_dataset,
    write_json, EstimateFile, ExperimentConfig, NuisanceFile, DATASET_CSV, DATASET_META, ESTIMATE_JSON, MSE_CSV,
    MSE_TXT, NUISANCE_JSON, POINTS_CSV, TRUTH_JSON,
};

fn smoke() -> ExperimentConfig {
    let mut c = ExperimentConfig::smoke();
    c.replications = 2;
    c
}

fn cli(out: &Path, args: &[&str]) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_robust-ope"))
        .arg("--out")
        .arg(out)
        .args(args)
        .output()
        .unwrap()
}

#[test]
fn smoke_experiment_emits_every_artifact() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = smoke();
    let rep = run_experiment(&cfg, dir.path(), 2).unwrap();
    for f in ["config.json", TRUTH_JSON, MSE_CSV, MSE_TXT, POINTS_CSV] {
        assert!(dir.path().join(f).is_file(), "{f}");
    }
    for i in 0..cfg.replications {
        for f in [DATASET_CSV, DATASET_META, NUISANCE_JSON, ESTIMATE_JSON] {
            assert!(replication_dir(dir.path(), i).join(f).is_file(), "rep {i} {f}");
        }
    }
    for &sign in &cfg.signs {
        for &lambda in &cfg.lambdas {
            for kind in EstimatorKind::ALL {
                let row = rep.row(sign, lambda, kind).unwrap();
                assert_eq!(row.replications, cfg.replications);
                assert!(row.mse.is_finite());
            }
        }
    }
    assert_eq!(rep.rows.len(), cfg.signs.len() * cfg.lambdas.len() * 3);
    assert_eq!(rep.stamp.config_hash, cfg.hash());
}

#[test]
fn report_refuses_mismatched_hashes() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = smoke();
    run_experiment(&cfg, dir.path(), 1).unwrap();
    let path = replication_dir(dir.path(), 1).join(ESTIMATE_JSON);
    let mut est: EstimateFile = read_json(&path).unwrap();
    est.stamp.config_hash = "0000000000000000".into();
    write_json(&path, &est).unwrap();
    assert!(matches!(report(dir.path()), Err(Error::HashMismatch { .. })));
}

#[test]
fn estimate_consumes_persisted_nuisances() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = smoke();
    let data = generate(&cfg, cfg.replication_seed(0)).unwrap();
    save_dataset(&cfg, &data, dir.path()).unwrap();
    let loaded = load_dataset(&cfg, &dir.path().join(DATASET_CSV)).unwrap();
    assert_eq!(loaded.tuples, data.tuples);
    let nu = fit(&cfg, &loaded).unwrap();
    let path = dir.path().join(NUISANCE_JSON);
    write_json(&path, &nu).unwrap();
    let reread: NuisanceFile = read_json(&path).unwrap();
    let a = estimate(&cfg, &loaded, &nu).unwrap();
    let b = estimate(&cfg, &loaded, &reread).unwrap();
    assert_eq!(a, b);

    let mut other = cfg.clone();
    other.seed += 1;
    assert!(matches!(estimate(&other, &loaded, &reread), Err(Error::HashMismatch { .. })));
}

#[test]
fn benchmark_weights_are_nonnegative_with_unit_scale_mass() {
    let mut cfg = ExperimentConfig::smoke();
    cfg.n = 2000;
    cfg.lambdas = vec![2.0];
    cfg.signs = vec![Sign::Minus, Sign::Plus];
    cfg.mil.rounds = 3;
    let data = generate(&cfg, cfg.replication_seed(0)).unwrap();
    let nu = fit(&cfg, &data).unwrap();
    for run in &nu.runs {
        for fold in run.restarts.iter().flatten() {
            let w: Vec<f64> = fold
                .eval
                .iter()
                .map(|&i| {
                    let t = &data.tuples[i];
                    fold.nuisance.w(&t.s, t.a)
                })
                .collect();
            assert!(w.iter().all(|x| *x >= 0.0));
            let mass = w.iter().sum::<f64>() / w.len() as f64;
            assert!((0.5..=2.0).contains(&mass), "{mass}");
        }
    }
}

#[test]
fn cli_errors_are_one_json_line() {
    let dir = tempfile::tempdir().unwrap();
    let out = cli(dir.path(), &["experiment", "--n", "200"]);
    assert!(!out.status.success());
    let err = String::from_utf8(out.stderr).unwrap();
    assert_eq!(err.lines().count(), 1);
    let v: serde_json::Value = serde_json::from_str(err.trim()).unwrap();
    assert_eq!(v["error"], "invalid_argument");

    let out = cli(dir.path(), &["fit", "--dataset", "/nonexistent/data.csv"]);
    let v: serde_json::Value = serde_json::from_slice(&out.stderr).unwrap();
    assert_eq!(v["error"], "io");

    let out = cli(dir.path(), &["generate", "--lambdas", "0.5"]);
    let v: serde_json::Value = serde_json::from_slice(&out.stderr).unwrap();
    assert_eq!(v["error"], "invalid_argument");

    let out = cli(dir.path(), &["frobnicate"]);
    let v: serde_json::Value = serde_json::from_slice(&out.stderr).unwrap();
    assert_eq!(v["error"], "usage");
}

#[test]
fn cli_stages_chain_through_files() {
    let dir = tempfile::tempdir().unwrap();
    let cfg_path = dir.path().join("smoke.json");
    write_json(&cfg_path, &smoke()).unwrap();
    let c = cfg_path.to_str().unwrap();
    let out_dir = dir.path().join("run");
    assert!(cli(&out_dir, &["generate", "--config", c]).status.success());
    let data = out_dir.join(DATASET_CSV);
    assert!(cli(&out_dir, &["fit", "--config", c, "--dataset", data.to_str().unwrap()]).status.success());
    let nu = out_dir.join(NUISANCE_JSON);
    let ok = cli(
        &out_dir,
        &["estimate", "--config", c, "--dataset", data.to_str().unwrap(), "--nuisances", nu.to_str().unwrap()],
    );
    assert!(ok.status.success());
    let est: EstimateFile = read_json(&out_dir.join(ESTIMATE_JSON)).unwrap();
    assert_eq!(est.estimates.len(), smoke().signs.len() * smoke().lambdas.len() * 3);

    let bad = cli(
        &out_dir,
        &[
            "estimate",
            "--config",
            c,
            "--seed",
            "99",
            "--dataset",
            data.to_str().unwrap(),
            "--nuisances",
            nu.to_str().unwrap(),
        ],
    );
    let v: serde_json::Value = serde_json::from_slice(&bad.stderr).unwrap();
    assert_eq!(v["error"], "hash_mismatch");
}
