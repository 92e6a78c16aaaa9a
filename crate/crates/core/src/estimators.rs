//! Direct (Q), weighted (W) and orthogonal (Orth) estimators of the
//! normalized worst- or best-case value, with Wald intervals.
//!
//! The orthogonal estimator averages the recentered influence function
//!
//! ```text
//! ψ(s,a,s') = (1-γ)Ê_{d1}[v̂(s₁)] + ŵ(s,a)(r + γρ(s,a,s'; v̂, β̂) - q̂(s,a))
//! ```
//!
//! over held-out folds, with nuisances trained on the complement.

use serde::{Deserialize, Serialize};

use crate::approx::ActionModel;
use crate::bellman::{rho_value, xi_from_threshold, SensitivityModel, Sign, ThresholdFn};
use crate::error::{Error, Result};
use crate::fqe::{run_robust_fqe, FqeConfig, FqeResult};
use crate::mdp::{Action, Dataset, Policy, State, TransitionTuple};
use crate::mil::{run_robust_mil, MilConfig, MilResult};

/// `z` for the one-sided 95% bound.
pub const Z_ONE_SIDED_95: f64 = 1.64;
/// `z` for the two-sided 95% interval.
pub const Z_TWO_SIDED_95: f64 = 1.96;

/// The triple `(q, β, w)` for one sign.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NuisanceSet {
    pub q: ActionModel,
    pub beta: ActionModel,
    pub w: ActionModel,
    pub sign: Sign,
    pub gamma: f64,
    pub provenance: String,
}

impl NuisanceSet {
    pub fn from_fits(fqe: &FqeResult, mil: &MilResult, provenance: impl Into<String>) -> Self {
        NuisanceSet {
            q: fqe.q.clone(),
            beta: fqe.beta.clone(),
            w: mil.w.clone(),
            sign: fqe.sign,
            gamma: fqe.gamma,
            provenance: provenance.into(),
        }
    }

    pub fn q(&self, s: &State, a: Action) -> f64 {
        self.q.predict(s, a)
    }

    pub fn beta(&self, s: &State, a: Action) -> f64 {
        self.beta.predict(s, a)
    }

    pub fn w(&self, s: &State, a: Action) -> f64 {
        self.w.predict(s, a)
    }

    pub fn v<P: Policy + ?Sized>(&self, target: &P, s: &State) -> f64 {
        self.q.value(target, s)
    }
}

/// `ζ̃(s,a,s') = q̂(s',π) - β̂(s,a)` from fitted Q and quantile models.
pub struct FittedThreshold<'a, P: ?Sized> {
    pub q: &'a ActionModel,
    pub beta: &'a ActionModel,
    pub target: &'a P,
}

impl<P: Policy + ?Sized> ThresholdFn for FittedThreshold<'_, P> {
    fn eval(&self, s: &State, a: Action, s_next: &State) -> f64 {
        self.q.value(self.target, s_next) - self.beta.predict(s, a)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum EstimatorKind {
    Q,
    W,
    Orth,
}

impl EstimatorKind {
    pub const ALL: [EstimatorKind; 3] = [EstimatorKind::Q, EstimatorKind::W, EstimatorKind::Orth];

    pub fn as_str(self) -> &'static str {
        match self {
            EstimatorKind::Q => "Q",
            EstimatorKind::W => "W",
            EstimatorKind::Orth => "Orth",
        }
    }
}

impl std::fmt::Display for EstimatorKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// A point estimate with its Wald bounds. Bounds are `None` for estimators
/// without per-sample scores.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RobustEstimate {
    pub estimator: EstimatorKind,
    pub sign: Sign,
    pub lambda: Option<f64>,
    pub n: usize,
    pub value: f64,
    pub std_error: f64,
    pub ci_lower_1sided_95: Option<f64>,
    pub ci_upper_1sided_95: Option<f64>,
    pub ci_2sided_95: Option<(f64, f64)>,
    pub fold_layout: String,
    pub seed: Option<u64>,
    pub config_hash: Option<String>,
}

impl RobustEstimate {
    /// Mean (shifted by the first score) of per-sample scores with `σ̂ = (1/n)(Σ(xᵢ - x̄)²)^{1/2}`.
    pub fn from_scores(
        estimator: EstimatorKind,
        sign: Sign,
        model: &SensitivityModel,
        scores: &[f64],
        fold_layout: impl Into<String>,
    ) -> Result<Self> {
        if scores.is_empty() {
            return Err(Error::InsufficientData("no scores to average".into()));
        }
        let n = scores.len() as f64;
        let shift = scores[0];
        let value = shift + scores.iter().map(|x| x - shift).sum::<f64>() / n;
        let ss: f64 = scores.iter().map(|x| (x - value) * (x - value)).sum();
        let se = ss.sqrt() / n;
        if !value.is_finite() || !se.is_finite() {
            return Err(Error::Numerical("non-finite estimate".into()));
        }
        Ok(RobustEstimate {
            estimator,
            sign,
            lambda: model.constant_value(),
            n: scores.len(),
            value,
            std_error: se,
            ci_lower_1sided_95: Some(value - Z_ONE_SIDED_95 * se),
            ci_upper_1sided_95: Some(value + Z_ONE_SIDED_95 * se),
            ci_2sided_95: Some((value - Z_TWO_SIDED_95 * se, value + Z_TWO_SIDED_95 * se)),
            fold_layout: fold_layout.into(),
            seed: None,
            config_hash: None,
        })
    }

    fn point(estimator: EstimatorKind, sign: Sign, model: &SensitivityModel, n: usize, value: f64, layout: String) -> Self {
        RobustEstimate {
            estimator,
            sign,
            lambda: model.constant_value(),
            n,
            value,
            std_error: 0.0,
            ci_lower_1sided_95: None,
            ci_upper_1sided_95: None,
            ci_2sided_95: None,
            fold_layout: layout,
            seed: None,
            config_hash: None,
        }
    }
}

/// `(1-γ) Ê_{d1}[q̂(s₁, π)]`.
pub fn plug_in_value<P: Policy + ?Sized>(q: &ActionModel, target: &P, gamma: f64, d1: &[State]) -> f64 {
    if d1.is_empty() {
        return 0.0;
    }
    (1.0 - gamma) * d1.iter().map(|s| q.value(target, s)).sum::<f64>() / d1.len() as f64
}

/// One influence-function evaluation.
pub fn psi<P: Policy + ?Sized>(
    t: &TransitionTuple,
    eta: &NuisanceSet,
    plug_in: f64,
    target: &P,
    gamma: f64,
    model: &SensitivityModel,
) -> f64 {
    let v_next = eta.v(target, &t.s_next);
    let rho = rho_value(v_next, eta.beta(&t.s, t.a), model.lambda(&t.s, t.a), eta.sign);
    plug_in + eta.w(&t.s, t.a) * (t.r + gamma * rho - eta.q(&t.s, t.a))
}

/// Estimated adversarial weight `ξ̂` from `1[v̂(s') ≤ β̂(s,a)]` (or `≥` for the best case).
pub fn xi_hat<P: Policy + ?Sized>(t: &TransitionTuple, eta: &NuisanceSet, target: &P, model: &SensitivityModel) -> f64 {
    let zeta = eta.v(target, &t.s_next) - eta.beta(&t.s, t.a);
    xi_from_threshold(zeta, model.lambda(&t.s, t.a), eta.sign)
}

/// How tuples are divided between nuisance training and evaluation.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum FoldLayout {
    /// `K` contiguous folds; fold `k` is `[⌊kn/K⌋, ⌊(k+1)n/K⌋)`.
    KFold { k: usize },
    /// First half trains, second half evaluates.
    SimpleSplit,
}

impl Default for FoldLayout {
    fn default() -> Self {
        FoldLayout::KFold { k: 2 }
    }
}

impl FoldLayout {
    pub fn describe(&self) -> String {
        match self {
            FoldLayout::KFold { k } => format!("kfold{k}"),
            FoldLayout::SimpleSplit => "simple_split".into(),
        }
    }

    /// `(train, eval)` index sets.
    pub fn folds(&self, n: usize) -> Result<Vec<(Vec<usize>, Vec<usize>)>> {
        match *self {
            FoldLayout::KFold { k } => {
                if k < 2 {
                    return Err(Error::InvalidArgument(format!("cross-fitting needs K >= 2, got {k}")));
                }
                if n < 2 * k {
                    return Err(Error::InsufficientData(format!("{n} tuples for {k} folds")));
                }
                Ok((0..k)
                    .map(|f| {
                        let (lo, hi) = (f * n / k, (f + 1) * n / k);
                        ((0..lo).chain(hi..n).collect(), (lo..hi).collect())
                    })
                    .collect())
            }
            FoldLayout::SimpleSplit => {
                if n < 4 {
                    return Err(Error::InsufficientData(format!("{n} tuples for a split")));
                }
                let mid = n / 2;
                Ok(vec![((0..mid).collect(), (mid..n).collect())])
            }
        }
    }
}

/// Trains a nuisance set on a training subset.
pub trait NuisanceTrainer: Sync {
    fn train(&self, data: &Dataset, fold: usize) -> Result<NuisanceSet>;
}

/// Robust FQE for `(q, β)` followed by the minimax fit of `w` with
/// `ζ̃ = q̂(s',π) - β̂(s,a)`.
pub struct FqeMilTrainer<'a, P: ?Sized> {
    pub fqe: FqeConfig,
    pub mil: MilConfig,
    pub d1: Vec<State>,
    pub target: &'a P,
}

impl<P: Policy + ?Sized> FqeMilTrainer<'_, P> {
    pub fn fit(&self, data: &Dataset) -> Result<(FqeResult, MilResult)> {
        let fqe = run_robust_fqe(data, self.target, &self.fqe)?;
        let zeta = FittedThreshold {
            q: &fqe.q,
            beta: &fqe.beta,
            target: self.target,
        };
        let mil = run_robust_mil(data, self.target, &self.d1, &zeta, &self.mil)?;
        Ok((fqe, mil))
    }
}

impl<P: Policy + ?Sized> NuisanceTrainer for FqeMilTrainer<'_, P> {
    fn train(&self, data: &Dataset, fold: usize) -> Result<NuisanceSet> {
        let (fqe, mil) = self.fit(data)?;
        Ok(NuisanceSet::from_fits(&fqe, &mil, format!("fold {fold}, {} training tuples", data.len())))
    }
}

/// Nuisances for one fold with the tuples they must be evaluated on.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FoldNuisance {
    pub fold: usize,
    pub eval: Vec<usize>,
    pub nuisance: NuisanceSet,
}

/// Train one nuisance set per fold on the complement of that fold.
pub fn cross_fit<T: NuisanceTrainer + ?Sized>(data: &Dataset, layout: FoldLayout, trainer: &T) -> Result<Vec<FoldNuisance>> {
    use rayon::prelude::*;
    let folds = layout.folds(data.len())?;
    folds
        .into_par_iter()
        .enumerate()
        .map(|(k, (train, eval))| {
            let nuisance = trainer.train(&data.subset(train), k).map_err(|e| Error::Fold {
                fold: k,
                source: Box::new(e),
            })?;
            Ok(FoldNuisance { fold: k, eval, nuisance })
        })
        .collect()
}

fn check_folds(folds: &[FoldNuisance]) -> Result<Sign> {
    let sign = folds
        .first()
        .ok_or_else(|| Error::InsufficientData("no folds".into()))?
        .nuisance
        .sign;
    if folds.iter().any(|f| f.nuisance.sign != sign) {
        return Err(Error::InvalidArgument("folds mix signs".into()));
    }
    Ok(sign)
}

/// Cross-fitted orthogonal estimate from per-fold nuisances.
pub fn orthogonal_from_folds<P: Policy + ?Sized>(
    data: &Dataset,
    folds: &[FoldNuisance],
    target: &P,
    d1: &[State],
    model: &SensitivityModel,
    layout: &str,
) -> Result<RobustEstimate> {
    let sign = check_folds(folds)?;
    let mut scores = Vec::with_capacity(data.len());
    for f in folds {
        let eta = &f.nuisance;
        let plug = plug_in_value(&eta.q, target, eta.gamma, d1);
        scores.extend(f.eval.iter().map(|&i| psi(&data.tuples[i], eta, plug, target, eta.gamma, model)));
    }
    RobustEstimate::from_scores(EstimatorKind::Orth, sign, model, &scores, layout)
}

/// Cross-fitted weighted estimate `(1/n)Σ ŵ ξ̂ r`.
pub fn weighted_from_folds<P: Policy + ?Sized>(
    data: &Dataset,
    folds: &[FoldNuisance],
    target: &P,
    model: &SensitivityModel,
    layout: &str,
) -> Result<RobustEstimate> {
    let sign = check_folds(folds)?;
    let mut scores = Vec::with_capacity(data.len());
    for f in folds {
        let eta = &f.nuisance;
        scores.extend(f.eval.iter().map(|&i| {
            let t = &data.tuples[i];
            eta.w(&t.s, t.a) * xi_hat(t, eta, target, model) * t.r
        }));
    }
    RobustEstimate::from_scores(EstimatorKind::W, sign, model, &scores, layout)
}

/// Direct estimate averaged over the per-fold Q models.
pub fn direct_from_folds<P: Policy + ?Sized>(
    folds: &[FoldNuisance],
    target: &P,
    d1: &[State],
    model: &SensitivityModel,
    layout: &str,
) -> Result<RobustEstimate> {
    let sign = check_folds(folds)?;
    let value = folds
        .iter()
        .map(|f| plug_in_value(&f.nuisance.q, target, f.nuisance.gamma, d1))
        .sum::<f64>()
        / folds.len() as f64;
    let n = folds.iter().map(|f| f.eval.len()).sum();
    Ok(RobustEstimate::point(EstimatorKind::Q, sign, model, n, value, layout.to_string()))
}

/// Cross-fitted orthogonal estimator.
#[allow(clippy::too_many_arguments)]
pub fn estimate_orthogonal<P: Policy + ?Sized, T: NuisanceTrainer + ?Sized>(
    data: &Dataset,
    layout: FoldLayout,
    trainer: &T,
    target: &P,
    d1: &[State],
    model: &SensitivityModel,
    sign: Sign,
) -> Result<RobustEstimate> {
    let folds = cross_fit(data, layout, trainer)?;
    if check_folds(&folds)? != sign {
        return Err(Error::InvalidArgument("trainer produced nuisances for the other sign".into()));
    }
    orthogonal_from_folds(data, &folds, target, d1, model, &layout.describe())
}

/// `(1-γ) Ê_{d1}[v̂(s₁)]` from a single FQE fit.
pub fn estimate_direct_q<P: Policy + ?Sized>(fqe: &FqeResult, target: &P, d1: &[State], model: &SensitivityModel) -> RobustEstimate {
    let value = plug_in_value(&fqe.q, target, fqe.gamma, d1);
    RobustEstimate::point(EstimatorKind::Q, fqe.sign, model, 0, value, "none".into())
}

/// `(1/n)Σ ŵ ξ̂ r` over `data` from single fits.
pub fn estimate_weighted<P: Policy + ?Sized>(
    mil: &MilResult,
    fqe: &FqeResult,
    data: &Dataset,
    target: &P,
    model: &SensitivityModel,
) -> Result<RobustEstimate> {
    let eta = NuisanceSet::from_fits(fqe, mil, "single fit");
    let scores: Vec<f64> = data
        .tuples
        .iter()
        .map(|t| eta.w(&t.s, t.a) * xi_hat(t, &eta, target, model) * t.r)
        .collect();
    RobustEstimate::from_scores(EstimatorKind::W, fqe.sign, model, &scores, "none")
}

/// `Êₙ[ψ(·; q, β, w)]` with its standard error, for arbitrary nuisances.
pub fn validity_probe<P: Policy + ?Sized>(
    eta: &NuisanceSet,
    data: &Dataset,
    target: &P,
    d1: &[State],
    model: &SensitivityModel,
) -> Result<RobustEstimate> {
    let plug = plug_in_value(&eta.q, target, eta.gamma, d1);
    let scores: Vec<f64> = data
        .tuples
        .iter()
        .map(|t| psi(t, eta, plug, target, eta.gamma, model))
        .collect();
    RobustEstimate::from_scores(EstimatorKind::Orth, eta.sign, model, &scores, "none")
}

/// The `p`-quantile (linear interpolation) of restart estimates.
pub fn restart_percentile(values: &[f64], p: f64) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::InsufficientData("no restarts".into()));
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let pos = p.clamp(0.0, 1.0) * (v.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    Ok(v[lo] + (v[hi] - v[lo]) * (pos - lo as f64))
}
