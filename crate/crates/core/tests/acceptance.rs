use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::process::Command;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use robust_ope::approx::{ActionModel, FeatureConfig, FeatureMap, LinearModel, PinballOptions};
use robust_ope::bellman::{
    brute_force_robust_expectation, rho_value, robust_expectation_closed_form, robust_target, tau_of,
    DiscreteDistribution, SensitivityModel, Sign,
};
use robust_ope::estimators::{plug_in_value, psi, validity_probe, xi_hat, EstimatorKind, NuisanceSet};
use robust_ope::experiment::{run_experiment, write_json, ExperimentConfig, ReportPoint};
use robust_ope::fqe::{run_robust_fqe, FqeConfig};
use robust_ope::mdp::{Action, Dataset, State};
use robust_ope::mil::{run_robust_mil, MilConfig};
use robust_ope::oracle::{
    state_action_law, tabular_beta_fixed_point, tabular_flow_from_kernel, tabular_robust_value_iteration, TabularMdp,
};

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

fn tabular_model(values: &[Vec<f64>]) -> ActionModel {
    let map = FeatureMap::tabular(values.len()).unwrap();
    let n_actions = values[0].len();
    ActionModel::new(
        (0..n_actions)
            .map(|a| LinearModel {
                features: map.clone(),
                weights: values.iter().map(|row| row[a]).collect(),
                clip: None,
            })
            .collect(),
    )
}

fn nuisance(q: &[Vec<f64>], beta: &[Vec<f64>], w: &[Vec<f64>], sign: Sign, gamma: f64) -> NuisanceSet {
    NuisanceSet {
        q: tabular_model(q),
        beta: tabular_model(beta),
        w: tabular_model(w),
        sign,
        gamma,
        provenance: "exact".into(),
    }
}

/// `d1` as an equally weighted state list.
fn d1_states(mdp: &TabularMdp) -> Vec<State> {
    mdp.d1
        .iter()
        .enumerate()
        .flat_map(|(s, p)| std::iter::repeat_n(TabularMdp::state(s), (p * 10.0).round() as usize))
        .collect()
}

/// The example MDP with every `(s, a)` reaching state 2 with probability `tau`.
fn tail_mdp(tau: f64) -> TabularMdp {
    let base = TabularMdp::example();
    let p = base
        .p
        .iter()
        .map(|row| {
            row.iter()
                .map(|pr| {
                    let head = pr[0] + pr[1];
                    vec![pr[0] / head * (1.0 - tau), pr[1] / head * (1.0 - tau), tau]
                })
                .collect()
        })
        .collect();
    TabularMdp::new(p, base.r.clone(), base.d1.clone(), base.gamma).unwrap()
}

fn uniform_nu() -> [f64; 3] {
    [1.0 / 3.0; 3]
}

fn criterion_1() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut worst: f64 = 0.0;
    for i in 0..1000 {
        let k = rng.random_range(2..=20);
        let values: Vec<f64> = (0..k).map(|_| rng.random_range(-5.0..5.0)).collect();
        let raw: Vec<f64> = (0..k).map(|_| rng.random::<f64>() + 1e-3).collect();
        let total: f64 = raw.iter().sum();
        let probs: Vec<f64> = raw.iter().map(|p| p / total).collect();
        let dist = DiscreteDistribution::from_parts(&values, &probs).unwrap();
        let lambda = rng.random_range(1.0..=10.0);
        let sign = if i % 2 == 0 { Sign::Minus } else { Sign::Plus };
        let closed = robust_expectation_closed_form(&dist, lambda, sign).unwrap();
        let lp = brute_force_robust_expectation(&dist, lambda, sign).unwrap().value;
        worst = worst.max((closed - lp).abs());
    }
    let secs = start.elapsed().as_secs_f64();
    outcome(
        worst <= 1e-8 && secs < 5.0,
        format!("max |closed - LP| = {worst:.2e} over 1000 laws in {secs:.2}s"),
    )
}

fn criterion_2() -> Outcome {
    let start = Instant::now();
    let pi = TabularMdp::example_target();
    let behavior = TabularMdp::example_behavior();
    let mut fqe_err: f64 = 0.0;
    let mut mil_err: f64 = 0.0;
    for lambda in [1.0, 2.0, 4.0] {
        let mdp = TabularMdp::example();
        let data = mdp.sample_iid(&uniform_nu(), &behavior, 100_000, 20).unwrap();
        for sign in Sign::BOTH {
            let sol = tabular_robust_value_iteration(&mdp, &pi, lambda, sign, 1e-12).unwrap();
            let cfg = FqeConfig {
                iterations: 40,
                q_features: FeatureConfig::TabularIndicator { n_states: 3 },
                beta_features: FeatureConfig::TabularIndicator { n_states: 3 },
                ridge: 1e-10,
                pinball: PinballOptions {
                    ridge: 1e-10,
                    ..PinballOptions::default()
                },
                ..FqeConfig::new(SensitivityModel::constant(lambda).unwrap(), sign, mdp.gamma)
            };
            let res = run_robust_fqe(&data, &pi, &cfg).unwrap();
            for s in 0..3 {
                for a in 0..2 {
                    fqe_err = fqe_err.max((res.q(&TabularMdp::state(s), Action(a)) - sol.q[s][a]).abs());
                }
            }
        }

        let mdp = tail_mdp(tau_of(lambda));
        let data = mdp.sample_iid(&uniform_nu(), &behavior, 100_000, 21).unwrap();
        let nu = state_action_law(&mdp, &uniform_nu(), &behavior);
        let sign = Sign::Minus;
        let sol = tabular_robust_value_iteration(&mdp, &pi, lambda, sign, 1e-13).unwrap();
        let flow = tabular_flow_from_kernel(&mdp, &pi, &sol.kernel, &nu).unwrap();
        let (v, beta) = (sol.v.clone(), sol.beta.clone());
        let zeta = move |s: &State, a: Action, sn: &State| v[sn.index()] - beta[s.index()][a.0];
        let cfg = MilConfig {
            critic_ridge: 1e-10,
            w_ridge: 1e-12,
            w_features: FeatureConfig::TabularIndicator { n_states: 3 },
            critic_base: FeatureConfig::TabularIndicator { n_states: 3 },
            critic_rich: None,
            w_max: 1e3,
            ..MilConfig::new(SensitivityModel::constant(lambda).unwrap(), sign, mdp.gamma)
        };
        let res = run_robust_mil(&data, &pi, &d1_states(&mdp), &zeta, &cfg).unwrap();
        let mut l2 = 0.0;
        for s in 0..3 {
            for a in 0..2 {
                let diff = res.w(&TabularMdp::state(s), Action(a)) - flow.w[s][a];
                l2 += nu[s][a] * diff * diff;
            }
        }
        mil_err = mil_err.max(l2.sqrt());
    }
    let secs = start.elapsed().as_secs_f64();
    outcome(
        fqe_err <= 1e-2 && mil_err <= 5e-2 && secs < 120.0,
        format!("FQE sup error {fqe_err:.2e}, MIL L2(nu) error {mil_err:.2e}, {secs:.1}s"),
    )
}

fn criterion_3() -> Outcome {
    let mdp = TabularMdp::example();
    let pi = TabularMdp::example_target();
    let data = mdp.sample_iid(&uniform_nu(), &TabularMdp::example_behavior(), 2000, 30).unwrap();
    let model = SensitivityModel::constant(1.0).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let mut table = || -> Vec<Vec<f64>> { (0..3).map(|_| (0..2).map(|_| rng.random_range(-2.0..3.0)).collect()).collect() };
    let (q, beta, w) = (table(), table(), table());
    let d1 = d1_states(&mdp);
    let mut mismatches = 0usize;
    for sign in Sign::BOTH {
        let eta = nuisance(&q, &beta, &w, sign, mdp.gamma);
        let plug = plug_in_value(&eta.q, &pi, mdp.gamma, &d1);
        for t in &data.tuples {
            let v = eta.v(&pi, &t.s_next);
            let b = eta.beta(&t.s, t.a);
            let drl = plug + eta.w(&t.s, t.a) * (t.r + mdp.gamma * v - eta.q(&t.s, t.a));
            let ok = rho_value(v, b, 1.0, sign).to_bits() == v.to_bits()
                && xi_hat(t, &eta, &pi, &model) == 1.0
                && psi(t, &eta, plug, &pi, mdp.gamma, &model).to_bits() == drl.to_bits()
                && robust_target(t.r, v, b, 1.0, mdp.gamma, sign).to_bits() == (t.r + mdp.gamma * v).to_bits();
            mismatches += usize::from(!ok);
        }
    }
    outcome(
        mismatches == 0,
        format!("{mismatches} of {} tuple checks differ bitwise", 2 * data.len()),
    )
}

fn criterion_4_and_7() -> (Outcome, Outcome) {
    let dir = tempfile::tempdir().unwrap();
    let cfg = ExperimentConfig {
        signs: vec![Sign::Minus, Sign::Plus],
        ..ExperimentConfig::default()
    };
    let start = Instant::now();
    let report = run_experiment(&cfg, dir.path(), 1).unwrap();
    let secs = start.elapsed().as_secs_f64();
    print!("{}", report.table());

    let mse = |l: f64, k: EstimatorKind| report.row(Sign::Minus, l, k).map(|r| r.mse).unwrap_or(f64::NAN);
    let mut within = true;
    let mut smallest = 0;
    let mut parts = Vec::new();
    for &l in &cfg.lambdas {
        let (q, w, o) = (mse(l, EstimatorKind::Q), mse(l, EstimatorKind::W), mse(l, EstimatorKind::Orth));
        let best = q.min(w);
        within &= o <= 1.5 * best;
        smallest += usize::from(o < best);
        parts.push(format!("L={l}: Orth/min {:.2}", o / best));
    }
    let orth_1 = mse(1.0, EstimatorKind::Orth);
    let c4 = outcome(
        within && smallest >= 3 && orth_1 <= 1e-3 && report.rows.iter().all(|r| r.replications == 10),
        format!(
            "{}; Orth smallest at {smallest}/4; Orth MSE at L=1 {orth_1:.2e}; {secs:.0}s",
            parts.join(", ")
        ),
    );

    let mut by_key: BTreeMap<(usize, EstimatorKind, Sign), Vec<&ReportPoint>> = BTreeMap::new();
    for p in &report.points {
        by_key
            .entry((p.replication, p.estimate.estimator, p.estimate.sign))
            .or_default()
            .push(p);
    }
    let mut order_bad = 0usize;
    let mut mono_bad = 0usize;
    let mut checks = 0usize;
    for ((rep, kind, sign), pts) in &by_key {
        let mut pts = pts.clone();
        pts.sort_by(|a, b| a.estimate.lambda.partial_cmp(&b.estimate.lambda).unwrap());
        for pair in pts.windows(2) {
            let (a, b) = (&pair[0].estimate, &pair[1].estimate);
            let slack = 3.0 * a.std_error.hypot(b.std_error);
            let ok = match sign {
                Sign::Minus => b.value <= a.value + slack,
                Sign::Plus => b.value >= a.value - slack,
            };
            mono_bad += usize::from(!ok);
            checks += 1;
        }
        if *sign == Sign::Minus {
            if let Some(plus) = by_key.get(&(*rep, *kind, Sign::Plus)) {
                for m in &pts {
                    if let Some(p) = plus.iter().find(|p| p.estimate.lambda == m.estimate.lambda) {
                        let slack = m.estimate.std_error.hypot(p.estimate.std_error);
                        order_bad += usize::from(m.estimate.value > p.estimate.value + slack);
                        checks += 1;
                    }
                }
            }
        }
    }
    let c7 = outcome(
        order_bad == 0 && mono_bad == 0 && checks > 0,
        format!("{order_bad} sign-order and {mono_bad} monotonicity violations in {checks} checks"),
    );
    (c4, c7)
}

fn criterion_5() -> Outcome {
    let mdp = TabularMdp::example();
    let pi = TabularMdp::example_target();
    let behavior = TabularMdp::example_behavior();
    let (lambda, sign) = (2.0, Sign::Minus);
    let sol = tabular_robust_value_iteration(&mdp, &pi, lambda, sign, 1e-13).unwrap();
    let nu = state_action_law(&mdp, &uniform_nu(), &behavior);
    let flow = tabular_flow_from_kernel(&mdp, &pi, &sol.kernel, &nu).unwrap();
    let eta = nuisance(&sol.q, &sol.beta, &flow.w, sign, mdp.gamma);
    let model = SensitivityModel::constant(lambda).unwrap();
    let d1 = d1_states(&mdp);
    let mut covered = 0;
    for rep in 0..100 {
        let data = mdp.sample_iid(&uniform_nu(), &behavior, 5000, 500 + rep).unwrap();
        let e = validity_probe(&eta, &data, &pi, &d1, &model).unwrap();
        covered += usize::from(e.ci_lower_1sided_95.unwrap() <= sol.v_d1);
    }
    outcome(covered >= 88, format!("lower bound below V- in {covered}/100 replications"))
}

fn criterion_6() -> Outcome {
    let mdp = TabularMdp::example();
    let pi = TabularMdp::example_target();
    let behavior = TabularMdp::example_behavior();
    let (lambda, sign) = (2.0, Sign::Minus);
    let model = SensitivityModel::constant(lambda).unwrap();
    let sol = tabular_robust_value_iteration(&mdp, &pi, lambda, sign, 1e-13).unwrap();
    let nu = state_action_law(&mdp, &uniform_nu(), &behavior);
    let flow = tabular_flow_from_kernel(&mdp, &pi, &sol.kernel, &nu).unwrap();
    let data: Dataset = mdp.sample_iid(&uniform_nu(), &behavior, 20_000, 60).unwrap();
    let d1 = d1_states(&mdp);
    let mut rng = ChaCha8Rng::seed_from_u64(61);
    let mut bound_bad = 0;
    let mut exact_bad = 0;
    let mut worst_gap = f64::NEG_INFINITY;
    for _ in 0..20 {
        let beta: Vec<Vec<f64>> = sol
            .beta
            .iter()
            .map(|row| row.iter().map(|b| b + rng.random_range(-0.5..0.5)).collect())
            .collect();
        let w: Vec<Vec<f64>> = flow
            .w
            .iter()
            .map(|row| row.iter().map(|w| w * rng.random_range(0.2..3.0)).collect())
            .collect();
        let perturbed = validity_probe(&nuisance(&sol.q, &beta, &w, sign, mdp.gamma), &data, &pi, &d1, &model).unwrap();
        bound_bad += usize::from(perturbed.value > sol.v_d1 + 3.0 * perturbed.std_error);
        worst_gap = worst_gap.max((perturbed.value - sol.v_d1) / perturbed.std_error.max(1e-300));
        let sharp = validity_probe(&nuisance(&sol.q, &sol.beta, &w, sign, mdp.gamma), &data, &pi, &d1, &model).unwrap();
        exact_bad += usize::from((sharp.value - sol.v_d1).abs() > 3.0 * sharp.std_error);
    }
    let mut fixed_bad = 0;
    for _ in 0..5 {
        let beta: Vec<Vec<f64>> = sol
            .beta
            .iter()
            .map(|row| row.iter().map(|b| b + rng.random_range(-0.5..0.5)).collect())
            .collect();
        let q_beta = tabular_beta_fixed_point(&mdp, &pi, &beta, lambda, sign).unwrap();
        let w: Vec<Vec<f64>> = flow
            .w
            .iter()
            .map(|row| row.iter().map(|w| w * rng.random_range(0.2..3.0)).collect())
            .collect();
        let e = validity_probe(&nuisance(&q_beta, &beta, &w, sign, mdp.gamma), &data, &pi, &d1, &model).unwrap();
        fixed_bad += usize::from(e.value > sol.v_d1 + 3.0 * e.std_error);
    }
    outcome(
        bound_bad == 0 && exact_bad == 0 && fixed_bad == 0,
        format!(
            "bound violations {bound_bad}/20 (max z {worst_gap:.2}), sharp-beta misses {exact_bad}/20, fixed-point violations {fixed_bad}/5"
        ),
    )
}

fn run_cli(out: &Path, args: &[&str]) -> bool {
    Command::new(env!("CARGO_BIN_EXE_robust-ope"))
        .arg("--out")
        .arg(out)
        .args(args)
        .output()
        .map(|o| o.status.success())
        .unwrap_or(false)
}

fn snapshot(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut files = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in fs::read_dir(&d).unwrap() {
            let p = entry.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                let rel = p.strip_prefix(dir).unwrap().display().to_string();
                files.insert(rel, fs::read(&p).unwrap());
            }
        }
    }
    files
}

fn criterion_8() -> Outcome {
    let tmp = tempfile::tempdir().unwrap();
    let cfg_path = tmp.path().join("smoke.json");
    write_json(&cfg_path, &ExperimentConfig::smoke()).unwrap();
    let cfg = cfg_path.to_str().unwrap();
    let mut runs = Vec::new();
    let mut failures = 0;
    for run in ["a", "b"] {
        let out = tmp.path().join(run);
        let stage = |name: &str| out.join(name);
        let ds = stage("gen").join("dataset.csv");
        let nu = stage("fit").join("nuisances.json");
        let steps: Vec<(std::path::PathBuf, Vec<String>)> = vec![
            (stage("gen"), vec!["generate".into(), "--config".into(), cfg.into(), "--seed".into(), "7".into()]),
            (stage("oracle"), vec!["oracle".into(), "--config".into(), cfg.into(), "--seed".into(), "7".into()]),
            (
                stage("fit"),
                vec![
                    "fit".into(),
                    "--config".into(),
                    cfg.into(),
                    "--seed".into(),
                    "7".into(),
                    "--dataset".into(),
                    ds.display().to_string(),
                ],
            ),
            (
                stage("estimate"),
                vec![
                    "estimate".into(),
                    "--config".into(),
                    cfg.into(),
                    "--seed".into(),
                    "7".into(),
                    "--dataset".into(),
                    ds.display().to_string(),
                    "--nuisances".into(),
                    nu.display().to_string(),
                ],
            ),
            (stage("experiment"), vec!["experiment".into(), "--config".into(), cfg.into(), "--seed".into(), "7".into()]),
            (stage("experiment"), vec!["report".into()]),
        ];
        for (dir, args) in &steps {
            let args: Vec<&str> = args.iter().map(String::as_str).collect();
            failures += usize::from(!run_cli(dir, &args));
        }
        runs.push(snapshot(&out));
    }
    let (a, b) = (&runs[0], &runs[1]);
    let differing = a.iter().filter(|(k, v)| b.get(*k) != Some(*v)).count();
    outcome(
        failures == 0 && a.len() == b.len() && differing == 0 && a.len() >= 10,
        format!("{} files per run, {differing} differ, {failures} stage failures", a.len()),
    )
}

fn main() {
    let mut results: Vec<(u8, &str, Outcome)> = vec![
        (1, "oracle equivalence", criterion_1()),
        (2, "tabular fixed points", criterion_2()),
        (3, "unit-lambda reductions", criterion_3()),
    ];
    let (c4, c7) = criterion_4_and_7();
    results.push((4, "benchmark MSE ordering", c4));
    results.push((5, "interval coverage", criterion_5()));
    results.push((6, "validity probes", criterion_6()));
    results.push((7, "sign ordering", c7));
    results.push((8, "determinism", criterion_8()));
    results.sort_by_key(|r| r.0);
    let mut failed = 0;
    for (n, name, o) in &results {
        println!("criterion {n} {name}: {} ({})", if o.pass { "PASS" } else { "FAIL" }, o.detail);
        failed += usize::from(!o.pass);
    }
    if failed > 0 {
        std::process::exit(1);
    }
}
