//! Sensitivity model and robust Bellman primitives.
//!
//! The uncertainty set contains every kernel `U` whose density ratio against
//! the nominal kernel lies in `[1/Λ(s,a), Λ(s,a)]`. Its extreme expectations
//! decompose into a nominal mean plus a CVaR at level `τ = 1/(1+Λ)`:
//!
//! ```text
//! inf_U E_U[v] = E[v]/Λ + (1 - 1/Λ) CVaR⁻_τ[v]
//! sup_U E_U[v] = E[v]/Λ + (1 - 1/Λ) CVaR⁺_τ[v]
//! ```
//!
//! The CVaRs are evaluated through their dual forms
//! `CVaR⁻_τ = max_b { b + E[(X-b)_-]/τ }` and `CVaR⁺_τ = min_b { b + E[(X-b)_+]/τ }`.
//! [`brute_force_robust_expectation`] solves the defining linear program
//! directly and is the independent check for the closed form.

use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};
use crate::mdp::{Action, State};

/// Worst case (`Minus`) or best case (`Plus`).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Sign {
    Minus,
    Plus,
}

impl Sign {
    pub const BOTH: [Sign; 2] = [Sign::Minus, Sign::Plus];

    /// `(x)_-` for the worst case, `(x)_+` for the best case.
    #[inline]
    pub fn hinge(self, x: f64) -> f64 {
        match self {
            Sign::Minus => x.min(0.0),
            Sign::Plus => x.max(0.0),
        }
    }

    /// Whether a threshold value lies on the adversarially reweighted side.
    /// Ties count as reweighted for both signs.
    #[inline]
    pub fn in_tail(self, zeta: f64) -> bool {
        match self {
            Sign::Minus => zeta <= 0.0,
            Sign::Plus => zeta >= 0.0,
        }
    }

    /// Pinball level that targets the lower (`Minus`) or upper (`Plus`)
    /// `tau`-quantile.
    #[inline]
    pub fn pinball_level(self, tau: f64) -> f64 {
        match self {
            Sign::Minus => tau,
            Sign::Plus => 1.0 - tau,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Sign::Minus => "minus",
            Sign::Plus => "plus",
        }
    }
}

impl fmt::Display for Sign {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Sign {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "minus" | "-" | "worst" => Ok(Sign::Minus),
            "plus" | "+" | "best" => Ok(Sign::Plus),
            other => Err(Error::InvalidArgument(format!("unknown sign {other:?}"))),
        }
    }
}

type LambdaFn = dyn Fn(&State, Action) -> f64 + Send + Sync;

#[derive(Clone)]
enum Lambda {
    Constant(f64),
    Custom(Arc<LambdaFn>),
}

/// The sensitivity bound `Λ(s,a) >= 1`.
#[derive(Clone)]
pub struct SensitivityModel {
    lambda: Lambda,
}

impl fmt::Debug for SensitivityModel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match &self.lambda {
            Lambda::Constant(l) => write!(f, "SensitivityModel(Λ = {l})"),
            Lambda::Custom(_) => write!(f, "SensitivityModel(custom)"),
        }
    }
}

impl SensitivityModel {
    pub fn constant(lambda: f64) -> Result<Self> {
        if !(lambda >= 1.0) || !lambda.is_finite() {
            return Err(Error::InvalidArgument(format!("Λ must be a finite value >= 1, got {lambda}")));
        }
        Ok(SensitivityModel {
            lambda: Lambda::Constant(lambda),
        })
    }

    /// A state-action dependent bound. The function must return values in `[1, ∞)`.
    pub fn from_fn(f: impl Fn(&State, Action) -> f64 + Send + Sync + 'static) -> Self {
        SensitivityModel {
            lambda: Lambda::Custom(Arc::new(f)),
        }
    }

    #[inline]
    pub fn lambda(&self, s: &State, a: Action) -> f64 {
        let l = match &self.lambda {
            Lambda::Constant(l) => *l,
            Lambda::Custom(f) => f(s, a),
        };
        debug_assert!(l >= 1.0, "Λ(s,a) = {l} < 1");
        l
    }

    #[inline]
    pub fn tau(&self, s: &State, a: Action) -> f64 {
        tau_of(self.lambda(s, a))
    }

    pub fn constant_value(&self) -> Option<f64> {
        match self.lambda {
            Lambda::Constant(l) => Some(l),
            Lambda::Custom(_) => None,
        }
    }

    pub fn describe(&self) -> String {
        match self.lambda {
            Lambda::Constant(l) => format!("{l}"),
            Lambda::Custom(_) => "custom".to_string(),
        }
    }
}

impl Serialize for SensitivityModel {
    fn serialize<S: Serializer>(&self, serializer: S) -> std::result::Result<S::Ok, S::Error> {
        match self.lambda {
            Lambda::Constant(l) => serializer.serialize_f64(l),
            Lambda::Custom(_) => Err(serde::ser::Error::custom(
                "only constant sensitivity models can be serialized",
            )),
        }
    }
}

impl<'de> Deserialize<'de> for SensitivityModel {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> std::result::Result<Self, D::Error> {
        let l = f64::deserialize(deserializer)?;
        SensitivityModel::constant(l).map_err(serde::de::Error::custom)
    }
}

/// `τ = 1/(1+Λ)`.
#[inline]
pub fn tau_of(lambda: f64) -> f64 {
    1.0 / (1.0 + lambda)
}

/// A finitely supported law.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiscreteDistribution {
    atoms: Vec<(f64, f64)>,
}

impl DiscreteDistribution {
    /// Atoms are `(value, probability)` pairs.
    pub fn new(atoms: Vec<(f64, f64)>) -> Result<Self> {
        if atoms.is_empty() {
            return Err(Error::InvalidArgument("distribution has no atoms".into()));
        }
        let mut total = 0.0;
        for &(v, p) in &atoms {
            if !v.is_finite() || !(p >= 0.0) || !p.is_finite() {
                return Err(Error::InvalidArgument(format!("bad atom ({v}, {p})")));
            }
            total += p;
        }
        if (total - 1.0).abs() > 1e-12 {
            return Err(Error::InvalidArgument(format!("probabilities sum to {total}")));
        }
        Ok(DiscreteDistribution { atoms })
    }

    pub fn from_parts(values: &[f64], probs: &[f64]) -> Result<Self> {
        if values.len() != probs.len() {
            return Err(Error::InvalidArgument("values/probs length mismatch".into()));
        }
        Self::new(values.iter().copied().zip(probs.iter().copied()).collect())
    }

    pub fn atoms(&self) -> &[(f64, f64)] {
        &self.atoms
    }

    pub fn mean(&self) -> f64 {
        self.atoms.iter().map(|(v, p)| v * p).sum()
    }

    /// Lower (`Minus`) or upper (`Plus`) `tau`-quantile: the smallest atom
    /// whose CDF reaches `tau`, or the mirror image from the top.
    pub fn quantile(&self, tau: f64, sign: Sign) -> f64 {
        let mut order: Vec<usize> = (0..self.atoms.len()).collect();
        match sign {
            Sign::Minus => order.sort_by(|&i, &j| self.atoms[i].0.total_cmp(&self.atoms[j].0)),
            Sign::Plus => order.sort_by(|&i, &j| self.atoms[j].0.total_cmp(&self.atoms[i].0)),
        }
        let mut acc = 0.0;
        for &i in &order {
            let (v, p) = self.atoms[i];
            acc += p;
            if acc >= tau - 1e-12 {
                return v;
            }
        }
        self.atoms[*order.last().unwrap()].0
    }

    /// Dual objective `b + E[(X-b)_∓]/τ` at threshold `b`.
    pub fn cvar_dual(&self, tau: f64, b: f64, sign: Sign) -> f64 {
        b + self.atoms.iter().map(|(v, p)| p * sign.hinge(v - b)).sum::<f64>() / tau
    }

    /// Exact CVaR: the dual objective is piecewise linear with kinks at the
    /// atoms, so its optimum over `b` is attained on the support.
    pub fn cvar(&self, tau: f64, sign: Sign) -> f64 {
        let vals = self.atoms.iter().map(|&(v, _)| self.cvar_dual(tau, v, sign));
        match sign {
            Sign::Minus => vals.fold(f64::NEG_INFINITY, f64::max),
            Sign::Plus => vals.fold(f64::INFINITY, f64::min),
        }
    }
}

/// Estimated threshold `ζ̃(s,a,s') ≈ V(s') - β(s,a)`.
pub trait ThresholdFn: Send + Sync {
    fn eval(&self, s: &State, a: Action, s_next: &State) -> f64;
}

impl<F> ThresholdFn for F
where
    F: Fn(&State, Action, &State) -> f64 + Send + Sync,
{
    fn eval(&self, s: &State, a: Action, s_next: &State) -> f64 {
        self(s, a, s_next)
    }
}

fn order_statistic_index(tau: f64, n: usize) -> usize {
    let x = tau * n as f64;
    let r = x.round();
    let k = if (x - r).abs() <= 1e-9 * x.max(1.0) { r } else { x.ceil() };
    (k as usize).clamp(1, n)
}

/// Empirical lower (`Minus`) or upper (`Plus`) `tau`-quantile: the order
/// statistic at position `⌈τn⌉` from the bottom or from the top.
pub fn empirical_quantile(samples: &[f64], tau: f64, sign: Sign) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::InvalidArgument("quantile of an empty sample".into()));
    }
    if !(tau > 0.0 && tau < 1.0) {
        return Err(Error::InvalidArgument(format!("quantile level {tau} outside (0, 1)")));
    }
    let n = samples.len();
    let k = order_statistic_index(tau, n);
    let mut buf = samples.to_vec();
    let v = match sign {
        Sign::Minus => *buf.select_nth_unstable_by(k - 1, f64::total_cmp).1,
        Sign::Plus => *buf.select_nth_unstable_by(n - k, f64::total_cmp).1,
    };
    Ok(v)
}

/// `b + mean((x - b)_∓)/τ`. At the empirical quantile this is the plug-in
/// CVaR; for any other `b` it is a lower (`Minus`) or upper (`Plus`) bound on it.
pub fn cvar_dual(samples: &[f64], tau: f64, b: f64, sign: Sign) -> f64 {
    if samples.is_empty() {
        return b;
    }
    let s: f64 = samples.iter().map(|x| sign.hinge(x - b)).sum();
    b + s / (samples.len() as f64 * tau)
}

/// Plug-in CVaR: the dual form evaluated at the empirical quantile.
pub fn empirical_cvar(samples: &[f64], tau: f64, sign: Sign) -> Result<f64> {
    let b = empirical_quantile(samples, tau, sign)?;
    Ok(cvar_dual(samples, tau, b, sign))
}

/// The CVaR-mixture backup `Λ⁻¹v + (1-Λ⁻¹)(β + τ⁻¹(v-β)_∓)` for one
/// next-state value. Its conditional mean at the true quantile is the
/// robust expectation of `v`.
#[inline]
pub fn rho_value(v_next: f64, beta: f64, lambda: f64, sign: Sign) -> f64 {
    let inv = 1.0 / lambda;
    let tau = tau_of(lambda);
    inv * v_next + (1.0 - inv) * (beta + sign.hinge(v_next - beta) / tau)
}

/// Robust FQE pseudo-outcome
/// `r + γΛ⁻¹v' + γ(1-Λ⁻¹)(β + τ⁻¹(v'-β)_∓)`.
#[inline]
pub fn robust_target(r: f64, v_next: f64, beta: f64, lambda: f64, gamma: f64, sign: Sign) -> f64 {
    let inv = 1.0 / lambda;
    let tau = tau_of(lambda);
    r + gamma * inv * v_next + gamma * (1.0 - inv) * (beta + sign.hinge(v_next - beta) / tau)
}

/// Adversarial density ratio for a given threshold value:
/// `Λ⁻¹ + (1-Λ⁻¹)τ⁻¹·1[tail]`, which takes the values `1/Λ` and `Λ`.
#[inline]
pub fn xi_from_threshold(zeta: f64, lambda: f64, sign: Sign) -> f64 {
    let inv = 1.0 / lambda;
    let ind = if sign.in_tail(zeta) { 1.0 } else { 0.0 };
    inv + (1.0 - inv) * (1.0 + lambda) * ind
}

/// Estimated adversarial-kernel density ratio `ξ(s,a,s')`.
pub fn xi_weight(
    s: &State,
    a: Action,
    s_next: &State,
    zeta: &dyn ThresholdFn,
    model: &SensitivityModel,
    sign: Sign,
) -> f64 {
    xi_from_threshold(zeta.eval(s, a, s_next), model.lambda(s, a), sign)
}

/// Influence-function inner term `ρ(s,a,s'; v, β)`.
pub fn rho<V, B>(s: &State, a: Action, s_next: &State, v: V, beta: B, model: &SensitivityModel, sign: Sign) -> f64
where
    V: Fn(&State) -> f64,
    B: Fn(&State, Action) -> f64,
{
    rho_value(v(s_next), beta(s, a), model.lambda(s, a), sign)
}

/// Optimal value and achieving distribution of the robust linear program.
#[derive(Clone, Debug, PartialEq)]
pub struct RobustExpectation {
    pub value: f64,
    /// Achieving probabilities, aligned with the input atoms.
    pub probs: Vec<f64>,
}

/// Solve `inf/sup Σ uᵢvᵢ` subject to `pᵢ/Λ <= uᵢ <= Λpᵢ`, `Σuᵢ = 1`.
///
/// Start every atom at its lower bound, then pour the remaining
/// `1 - 1/Λ` of mass into atoms ordered from the most adversarial value,
/// each up to its upper bound. The feasible set is a box intersected with
/// the simplex, so this fractional allocation is optimal.
pub fn brute_force_robust_expectation(dist: &DiscreteDistribution, lambda: f64, sign: Sign) -> Result<RobustExpectation> {
    if !(lambda >= 1.0) || !lambda.is_finite() {
        return Err(Error::InvalidArgument(format!("Λ must be a finite value >= 1, got {lambda}")));
    }
    let atoms = dist.atoms();
    let mut probs: Vec<f64> = atoms.iter().map(|(_, p)| p / lambda).collect();
    let mut remaining = 1.0 - probs.iter().sum::<f64>();
    let mut order: Vec<usize> = (0..atoms.len()).collect();
    match sign {
        Sign::Minus => order.sort_by(|&i, &j| atoms[i].0.total_cmp(&atoms[j].0).then(i.cmp(&j))),
        Sign::Plus => order.sort_by(|&i, &j| atoms[j].0.total_cmp(&atoms[i].0).then(i.cmp(&j))),
    }
    for &i in &order {
        if remaining <= 0.0 {
            break;
        }
        let room = atoms[i].1 * lambda - probs[i];
        let add = room.min(remaining);
        probs[i] += add;
        remaining -= add;
    }
    let value = probs.iter().zip(atoms).map(|(u, (v, _))| u * v).sum();
    Ok(RobustExpectation { value, probs })
}

/// `Λ⁻¹E[v] + (1-Λ⁻¹)CVaR_τ[v]` with the exact discrete CVaR.
pub fn robust_expectation_closed_form(dist: &DiscreteDistribution, lambda: f64, sign: Sign) -> Result<f64> {
    if !(lambda >= 1.0) || !lambda.is_finite() {
        return Err(Error::InvalidArgument(format!("Λ must be a finite value >= 1, got {lambda}")));
    }
    let inv = 1.0 / lambda;
    Ok(inv * dist.mean() + (1.0 - inv) * dist.cvar(tau_of(lambda), sign))
}
