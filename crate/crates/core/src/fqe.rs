//! Robust fitted-Q evaluation.
//!
//! Each iteration first fits the conditional `τ`-quantile `β̂ᵢ(s, a)` of the
//! previous next-state value `v̂ᵢ₋₁(s')` by pinball regression, then regresses
//! the pseudo-outcome
//!
//! ```text
//! r + γΛ⁻¹v̂ᵢ₋₁(s') + γ(1-Λ⁻¹)(β̂ᵢ(s,a) + τ⁻¹(v̂ᵢ₋₁(s') - β̂ᵢ(s,a))_∓)
//! ```
//!
//! on `(s, a)` by least squares. `v̂₀ ≡ 0`.

use std::io::Write;
use std::path::Path;

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::approx::{
    mean_pinball, pinball_descent, ActionModel, FeatureConfig, FeatureMap, LeastSquaresSolver, LinearModel,
    PinballOptions,
};
use crate::bellman::{robust_target, SensitivityModel, Sign};
use crate::error::{Error, Result};
use crate::mdp::{Dataset, Policy, State};

/// How the data is shared across iterations.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FqeSplit {
    /// Every iteration uses all tuples: even positions feed the quantile
    /// fit and odd positions the regression.
    ReuseAll,
    /// Iteration `i` uses its own contiguous slice, first half for the
    /// quantile fit and second half for the regression.
    PerIterationSlices,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct FqeConfig {
    pub iterations: usize,
    pub split: FqeSplit,
    pub q_features: FeatureConfig,
    pub beta_features: FeatureConfig,
    pub ridge: f64,
    pub pinball: PinballOptions,
    pub sign: Sign,
    pub sensitivity: SensitivityModel,
    pub gamma: f64,
}

impl FqeConfig {
    pub fn new(sensitivity: SensitivityModel, sign: Sign, gamma: f64) -> Self {
        FqeConfig {
            iterations: 50,
            split: FqeSplit::ReuseAll,
            q_features: FeatureConfig::rff(128, 17),
            beta_features: FeatureConfig::rff(128, 29),
            ridge: 1e-4,
            pinball: PinballOptions {
                max_steps: 200,
                ..PinballOptions::default()
            },
            sign,
            sensitivity,
            gamma,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.iterations == 0 {
            return Err(Error::InvalidArgument("FQE needs at least one iteration".into()));
        }
        if !(0.0..1.0).contains(&self.gamma) {
            return Err(Error::InvalidArgument(format!("gamma {} outside [0, 1)", self.gamma)));
        }
        if !(self.ridge >= 0.0) {
            return Err(Error::InvalidArgument("ridge must be >= 0".into()));
        }
        Ok(())
    }

    pub fn q_max(&self) -> f64 {
        1.0 / (1.0 - self.gamma)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FqeDiagnostics {
    pub iter: usize,
    /// Mean squared residual of the regression against its pseudo-outcomes.
    pub bellman_mse: f64,
    /// Mean pinball loss of the quantile fit.
    pub pinball_loss: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FqeResult {
    pub q: ActionModel,
    pub beta: ActionModel,
    pub sign: Sign,
    pub gamma: f64,
    pub diagnostics: Vec<FqeDiagnostics>,
}

impl FqeResult {
    pub fn q(&self, s: &State, a: crate::mdp::Action) -> f64 {
        self.q.predict(s, a)
    }

    pub fn beta(&self, s: &State, a: crate::mdp::Action) -> f64 {
        self.beta.predict(s, a)
    }

    pub fn v<P: Policy + ?Sized>(&self, target: &P, s: &State) -> f64 {
        self.q.value(target, s)
    }

    pub fn write_diagnostics_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let fmt = |e: csv::Error| Error::Format {
            path: "<diagnostics>".into(),
            msg: e.to_string(),
        };
        w.write_record(["iter", "bellman_mse", "pinball_loss"]).map_err(fmt)?;
        for d in &self.diagnostics {
            w.write_record([d.iter.to_string(), format!("{:.16e}", d.bellman_mse), format!("{:.16e}", d.pinball_loss)])
                .map_err(fmt)?;
        }
        w.flush().map_err(|e| Error::io("<diagnostics>", e))
    }

    pub fn save_diagnostics(&self, path: &Path) -> Result<()> {
        let f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        self.write_diagnostics_csv(std::io::BufWriter::new(f))
    }
}

/// Policy-averaged Q: `v(s) = Σ_a π(a|s) q(s, a)`.
pub fn value_of<P: Policy + ?Sized>(q: &ActionModel, target: &P, s: &State) -> f64 {
    q.value(target, s)
}

/// Rows of one half of the data that carry a given action.
struct ActionBlock {
    rows: Vec<usize>,
    solver: LeastSquaresSolver,
}

fn blocks(
    data: &Dataset,
    idx: &[usize],
    map: &FeatureMap,
    n_actions: usize,
    ridge: f64,
    what: &str,
) -> Result<Vec<ActionBlock>> {
    (0..n_actions)
        .map(|a| {
            let rows: Vec<usize> = idx.iter().copied().filter(|&i| data.tuples[i].a.0 == a).collect();
            if rows.is_empty() {
                return Err(Error::InsufficientData(format!("no tuples with action {a} in the {what} half")));
            }
            let x = map.matrix(rows.iter().map(|&i| &data.tuples[i].s));
            Ok(ActionBlock {
                rows,
                solver: LeastSquaresSolver::new(x, ridge)?,
            })
        })
        .collect()
}

/// Run robust FQE and return the final Q and quantile models.
pub fn run_robust_fqe<P: Policy + ?Sized>(data: &Dataset, target: &P, cfg: &FqeConfig) -> Result<FqeResult> {
    cfg.validate()?;
    let n = data.len();
    if n < 2 {
        return Err(Error::InsufficientData(format!("{n} tuples")));
    }
    let m = cfg.iterations;
    if cfg.split == FqeSplit::PerIterationSlices && n < 2 * m {
        return Err(Error::InsufficientData(format!("{n} tuples for {m} slices of at least 2")));
    }
    let n_actions = target.n_actions();
    let q_max = cfg.q_max();
    let clip = Some((0.0, q_max));

    let states: Vec<&State> = data.tuples.iter().flat_map(|t| [&t.s, &t.s_next]).collect();
    let q_map = cfg.q_features.build(&states)?;
    let beta_map = cfg.beta_features.build(&states)?;

    // Next-state features and target probabilities for every tuple.
    let next_phi = q_map.matrix(data.tuples.iter().map(|t| &t.s_next));
    let next_pi: Vec<Vec<f64>> = data.tuples.iter().map(|t| target.action_probs(&t.s_next)).collect();
    let lambdas: Vec<f64> = data.tuples.iter().map(|t| cfg.sensitivity.lambda(&t.s, t.a)).collect();
    let skip_quantile = lambdas.iter().all(|l| *l == 1.0);

    let mut q_w: Vec<DVector<f64>> = vec![DVector::zeros(q_map.dim()); n_actions];
    let mut beta_w: Vec<Option<Vec<f64>>> = vec![None; n_actions];
    let mut v_prev = vec![0.0; n];
    let mut diagnostics = Vec::with_capacity(m);

    let halves = |i: usize| -> (Vec<usize>, Vec<usize>) {
        match cfg.split {
            FqeSplit::ReuseAll => ((0..n).step_by(2).collect(), (1..n).step_by(2).collect()),
            FqeSplit::PerIterationSlices => {
                let (lo, hi) = (i * n / m, (i + 1) * n / m);
                let mid = lo + (hi - lo) / 2;
                ((lo..mid).collect(), (mid..hi).collect())
            }
        }
    };
    let mut cached: Option<(Vec<ActionBlock>, Vec<ActionBlock>)> = None;

    for iter in 0..m {
        if cached.is_none() || cfg.split == FqeSplit::PerIterationSlices {
            let (qr_idx, ls_idx) = halves(iter);
            cached = Some((
                blocks(data, &qr_idx, &beta_map, n_actions, cfg.pinball.ridge, "quantile")?,
                blocks(data, &ls_idx, &q_map, n_actions, cfg.ridge, "regression")?,
            ));
        }
        let (qr_blocks, ls_blocks) = cached.as_ref().expect("blocks built");

        // Quantile step.
        let mut pinball_total = 0.0;
        let mut pinball_rows = 0usize;
        let mut beta_pred: Vec<DVector<f64>> = Vec::with_capacity(n_actions);
        for a in 0..n_actions {
            let blk = &qr_blocks[a];
            if !skip_quantile {
                let y: Vec<f64> = blk.rows.iter().map(|&i| v_prev[i]).collect();
                let taus: Vec<f64> = blk
                    .rows
                    .iter()
                    .map(|&i| cfg.sign.pinball_level(1.0 / (1.0 + lambdas[i])))
                    .collect();
                let fit = pinball_descent(&blk.solver, &y, &taus, &cfg.pinball, beta_w[a].as_deref())?;
                let pred: Vec<f64> = (blk.solver.design() * DVector::from_column_slice(&fit.weights))
                    .iter()
                    .map(|p| p.clamp(0.0, q_max))
                    .collect();
                pinball_total += mean_pinball(&y, &pred, &taus) * y.len() as f64;
                pinball_rows += y.len();
                beta_w[a] = Some(fit.weights);
            }
            let w = beta_w[a].clone().unwrap_or_else(|| vec![0.0; beta_map.dim()]);
            let lx = beta_map.matrix(ls_blocks[a].rows.iter().map(|&i| &data.tuples[i].s));
            beta_pred.push((lx * DVector::from_column_slice(&w)).map(|b| b.clamp(0.0, q_max)));
        }

        // Regression step.
        let mut sq = 0.0;
        let mut ls_rows = 0usize;
        for a in 0..n_actions {
            let blk = &ls_blocks[a];
            let y: Vec<f64> = blk
                .rows
                .iter()
                .enumerate()
                .map(|(k, &i)| {
                    let t = &data.tuples[i];
                    robust_target(t.r, v_prev[i], beta_pred[a][k], lambdas[i], cfg.gamma, cfg.sign)
                })
                .collect();
            if y.iter().any(|v| !v.is_finite()) {
                return Err(Error::Numerical(format!("non-finite pseudo-outcome at iteration {}", iter + 1)));
            }
            let w = DVector::from_column_slice(&blk.solver.solve(&y)?);
            let fitted = blk.solver.design() * &w;
            sq += fitted.iter().zip(&y).map(|(f, y)| (f.clamp(0.0, q_max) - y).powi(2)).sum::<f64>();
            ls_rows += y.len();
            q_w[a] = w;
        }

        // v̂ᵢ at every next state.
        let preds: Vec<DVector<f64>> = q_w.iter().map(|w| &next_phi * w).collect();
        for (i, v) in v_prev.iter_mut().enumerate() {
            *v = (0..n_actions)
                .map(|a| next_pi[i][a] * preds[a][i].clamp(0.0, q_max))
                .sum();
        }
        diagnostics.push(FqeDiagnostics {
            iter: iter + 1,
            bellman_mse: sq / ls_rows.max(1) as f64,
            pinball_loss: if pinball_rows > 0 { pinball_total / pinball_rows as f64 } else { 0.0 },
        });
    }

    let to_models = |ws: Vec<Vec<f64>>, map: &FeatureMap| {
        ActionModel::new(
            ws.into_iter()
                .map(|w| LinearModel {
                    features: map.clone(),
                    weights: w,
                    clip,
                })
                .collect(),
        )
    };
    let q = to_models(q_w.iter().map(|w| w.as_slice().to_vec()).collect(), &q_map);
    let beta = to_models(
        beta_w
            .into_iter()
            .map(|w| w.unwrap_or_else(|| vec![0.0; beta_map.dim()]))
            .collect(),
        &beta_map,
    );
    Ok(FqeResult {
        q,
        beta,
        sign: cfg.sign,
        gamma: cfg.gamma,
        diagnostics,
    })
}
