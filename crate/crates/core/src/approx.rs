//! Linear-in-features function classes.
//!
//! Every nuisance (Q-function, conditional quantile, density ratio, critic)
//! is linear in a fixed feature map of the state, with one weight vector per
//! action. Feature maps are deterministic given their construction seed and
//! serialize to a compact description that is re-expanded on load.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mdp::{Action, Policy, State};
use crate::rng::{stream_rng, streams};

/// Serializable description of a feature map.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum FeatureSpec {
    /// `1, z, z^2, .., z^degree` per coordinate with `z = (x - center)/scale`.
    Polynomial {
        input_dim: usize,
        degree: usize,
        center: f64,
        scale: f64,
    },
    /// `sqrt(2/D) cos(ωᵀx + b)` with `ω ~ N(0, I/bandwidth²)`, `b ~ U[0, 2π)`,
    /// plus a constant feature.
    RandomFourier {
        input_dim: usize,
        n_features: usize,
        bandwidth: f64,
        seed: u64,
    },
    /// One-hot encoding of the tabular state index.
    TabularIndicator { n_states: usize },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(from = "FeatureSpec", into = "FeatureSpec")]
pub struct FeatureMap {
    spec: FeatureSpec,
    omega: Vec<f64>,
    phase: Vec<f64>,
}

impl From<FeatureSpec> for FeatureMap {
    fn from(spec: FeatureSpec) -> Self {
        let (omega, phase) = match spec {
            FeatureSpec::RandomFourier {
                input_dim,
                n_features,
                bandwidth,
                seed,
            } => {
                let mut rng = stream_rng(seed, streams::FEATURES);
                let omega = (0..n_features * input_dim)
                    .map(|_| {
                        let z: f64 = StandardNormal.sample(&mut rng);
                        z / bandwidth
                    })
                    .collect();
                let phase = (0..n_features)
                    .map(|_| rng.random::<f64>() * std::f64::consts::TAU)
                    .collect();
                (omega, phase)
            }
            _ => (Vec::new(), Vec::new()),
        };
        FeatureMap { spec, omega, phase }
    }
}

impl From<FeatureMap> for FeatureSpec {
    fn from(map: FeatureMap) -> Self {
        map.spec
    }
}

impl FeatureMap {
    pub fn polynomial(input_dim: usize, degree: usize, center: f64, scale: f64) -> Result<Self> {
        if input_dim == 0 || !(scale > 0.0) {
            return Err(Error::InvalidArgument("polynomial features need input_dim >= 1 and scale > 0".into()));
        }
        Ok(FeatureSpec::Polynomial {
            input_dim,
            degree,
            center,
            scale,
        }
        .into())
    }

    pub fn random_fourier(input_dim: usize, n_features: usize, bandwidth: f64, seed: u64) -> Result<Self> {
        if input_dim == 0 || n_features == 0 || !(bandwidth > 0.0) || !bandwidth.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "random Fourier features need positive sizes and bandwidth, got bandwidth {bandwidth}"
            )));
        }
        Ok(FeatureSpec::RandomFourier {
            input_dim,
            n_features,
            bandwidth,
            seed,
        }
        .into())
    }

    pub fn tabular(n_states: usize) -> Result<Self> {
        if n_states == 0 {
            return Err(Error::InvalidArgument("tabular features need n_states >= 1".into()));
        }
        Ok(FeatureSpec::TabularIndicator { n_states }.into())
    }

    pub fn spec(&self) -> &FeatureSpec {
        &self.spec
    }

    pub fn dim(&self) -> usize {
        match self.spec {
            FeatureSpec::Polynomial { input_dim, degree, .. } => 1 + input_dim * degree,
            FeatureSpec::RandomFourier { n_features, .. } => n_features + 1,
            FeatureSpec::TabularIndicator { n_states } => n_states,
        }
    }

    pub fn eval_into(&self, s: &State, out: &mut [f64]) {
        debug_assert_eq!(out.len(), self.dim());
        match self.spec {
            FeatureSpec::Polynomial {
                input_dim,
                degree,
                center,
                scale,
            } => {
                out[0] = 1.0;
                for (j, x) in s.as_slice().iter().take(input_dim).enumerate() {
                    let z = (x - center) / scale;
                    let mut p = 1.0;
                    for k in 0..degree {
                        p *= z;
                        out[1 + j * degree + k] = p;
                    }
                }
            }
            FeatureSpec::RandomFourier {
                input_dim, n_features, ..
            } => {
                let amp = (2.0 / n_features as f64).sqrt();
                let x = s.as_slice();
                for k in 0..n_features {
                    let w = &self.omega[k * input_dim..(k + 1) * input_dim];
                    let arg: f64 = w.iter().zip(x).map(|(a, b)| a * b).sum::<f64>() + self.phase[k];
                    out[k] = amp * arg.cos();
                }
                out[n_features] = 1.0;
            }
            FeatureSpec::TabularIndicator { n_states } => {
                out.fill(0.0);
                let i = s.index();
                if i < n_states {
                    out[i] = 1.0;
                }
            }
        }
    }

    pub fn eval(&self, s: &State) -> Vec<f64> {
        let mut out = vec![0.0; self.dim()];
        self.eval_into(s, &mut out);
        out
    }

    /// Row-per-state feature matrix.
    pub fn matrix<'a>(&self, states: impl ExactSizeIterator<Item = &'a State>) -> DMatrix<f64> {
        let n = states.len();
        let d = self.dim();
        let mut x = DMatrix::zeros(n, d);
        let mut buf = vec![0.0; d];
        for (i, s) in states.enumerate() {
            self.eval_into(s, &mut buf);
            for (j, v) in buf.iter().enumerate() {
                x[(i, j)] = *v;
            }
        }
        x
    }
}

/// Median pairwise distance over (at most `max_points`) states, a standard
/// bandwidth for Gaussian-kernel features.
pub fn median_bandwidth(states: &[&State], max_points: usize, seed: u64) -> f64 {
    let pts: Vec<&State> = if states.len() <= max_points {
        states.to_vec()
    } else {
        let mut rng = stream_rng(seed, streams::FEATURES ^ 0x5eed);
        (0..max_points).map(|_| states[rng.random_range(0..states.len())]).collect()
    };
    let mut dists = Vec::with_capacity(pts.len() * pts.len().saturating_sub(1) / 2);
    for i in 0..pts.len() {
        for j in i + 1..pts.len() {
            let d2: f64 = pts[i]
                .as_slice()
                .iter()
                .zip(pts[j].as_slice())
                .map(|(a, b)| (a - b) * (a - b))
                .sum();
            dists.push(d2.sqrt());
        }
    }
    if dists.is_empty() {
        return 1.0;
    }
    let mid = dists.len() / 2;
    let m = *dists.select_nth_unstable_by(mid, f64::total_cmp).1;
    if m > 0.0 && m.is_finite() {
        m
    } else {
        1.0
    }
}

/// Feature-map recipe that is resolved against training data.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum FeatureConfig {
    RandomFourier {
        n_features: usize,
        /// `None` selects the median heuristic on the training states,
        /// multiplied by `bandwidth_scale`.
        bandwidth: Option<f64>,
        #[serde(default = "one")]
        bandwidth_scale: f64,
        seed: u64,
    },
    Polynomial {
        degree: usize,
        center: f64,
        scale: f64,
    },
    TabularIndicator {
        n_states: usize,
    },
}

fn one() -> f64 {
    1.0
}

impl FeatureConfig {
    pub fn rff(n_features: usize, seed: u64) -> Self {
        FeatureConfig::RandomFourier {
            n_features,
            bandwidth: None,
            bandwidth_scale: 1.0,
            seed,
        }
    }

    /// Same recipe with its random seed offset (for restarts and folds).
    pub fn reseeded(&self, offset: u64) -> Self {
        let mut out = self.clone();
        if let FeatureConfig::RandomFourier { seed, .. } = &mut out {
            *seed = seed.wrapping_add(offset);
        }
        out
    }

    pub fn build(&self, states: &[&State]) -> Result<FeatureMap> {
        let input_dim = states.first().map_or(1, |s| s.dim());
        match *self {
            FeatureConfig::RandomFourier {
                n_features,
                bandwidth,
                bandwidth_scale,
                seed,
            } => {
                let bw = match bandwidth {
                    Some(b) => b,
                    None => median_bandwidth(states, 1000, seed) * bandwidth_scale,
                };
                FeatureMap::random_fourier(input_dim, n_features, bw, seed)
            }
            FeatureConfig::Polynomial { degree, center, scale } => FeatureMap::polynomial(input_dim, degree, center, scale),
            FeatureConfig::TabularIndicator { n_states } => FeatureMap::tabular(n_states),
        }
    }
}

/// A linear predictor `clip(wᵀφ(s))`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LinearModel {
    pub features: FeatureMap,
    pub weights: Vec<f64>,
    pub clip: Option<(f64, f64)>,
}

/// Quantile models share the linear form; only the fitting loss differs.
pub type QuantileModel = LinearModel;

impl LinearModel {
    pub fn zeros(features: FeatureMap, clip: Option<(f64, f64)>) -> Self {
        let d = features.dim();
        LinearModel {
            features,
            weights: vec![0.0; d],
            clip,
        }
    }

    pub fn with_clip(mut self, clip: Option<(f64, f64)>) -> Self {
        self.clip = clip;
        self
    }

    #[inline]
    pub fn apply_clip(&self, y: f64) -> f64 {
        match self.clip {
            Some((lo, hi)) => y.clamp(lo, hi),
            None => y,
        }
    }

    /// Prediction from precomputed features.
    #[inline]
    pub fn predict_features(&self, phi: &[f64]) -> f64 {
        self.apply_clip(dot(&self.weights, phi))
    }

    pub fn predict_raw(&self, s: &State) -> f64 {
        dot(&self.weights, &self.features.eval(s))
    }
}

/// Evaluate a linear model at a state: linear in features, then clipped.
pub fn predict(model: &LinearModel, s: &State) -> f64 {
    model.apply_clip(model.predict_raw(s))
}

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// One linear model per action.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ActionModel {
    pub per_action: Vec<LinearModel>,
}

impl ActionModel {
    pub fn new(per_action: Vec<LinearModel>) -> Self {
        ActionModel { per_action }
    }

    pub fn n_actions(&self) -> usize {
        self.per_action.len()
    }

    pub fn predict(&self, s: &State, a: Action) -> f64 {
        predict(&self.per_action[a.0], s)
    }

    /// `f(s, π) = Σ_a π(a|s) f(s, a)`.
    pub fn value<P: Policy + ?Sized>(&self, policy: &P, s: &State) -> f64 {
        let probs = policy.action_probs(s);
        self.value_with_probs(&probs, s)
    }

    pub fn value_with_probs(&self, probs: &[f64], s: &State) -> f64 {
        // Share the feature evaluation when all actions use the same map.
        let first = &self.per_action[0].features;
        if self.per_action.iter().all(|m| &m.features == first) {
            let phi = first.eval(s);
            probs
                .iter()
                .zip(&self.per_action)
                .filter(|(p, _)| **p != 0.0)
                .map(|(p, m)| p * m.predict_features(&phi))
                .sum()
        } else {
            probs
                .iter()
                .zip(&self.per_action)
                .filter(|(p, _)| **p != 0.0)
                .map(|(p, m)| p * predict(m, s))
                .sum()
        }
    }
}

/// Cached normal equations `XᵀX/n + ridge·I` for repeated solves against
/// the same design.
pub struct LeastSquaresSolver {
    x: DMatrix<f64>,
    chol: Cholesky<f64, Dyn>,
    ridge: f64,
}

impl LeastSquaresSolver {
    pub fn new(x: DMatrix<f64>, ridge: f64) -> Result<Self> {
        let (n, d) = x.shape();
        if !(ridge >= 0.0) {
            return Err(Error::InvalidArgument(format!("ridge {ridge} must be >= 0")));
        }
        if n == 0 {
            return Err(Error::InsufficientData("least squares with no rows".into()));
        }
        if ridge == 0.0 && n < d {
            return Err(Error::Singular(format!("{n} rows for {d} unpenalized features")));
        }
        let mut gram = x.tr_mul(&x) / n as f64;
        for j in 0..d {
            gram[(j, j)] += ridge;
        }
        let chol = Cholesky::new(gram).ok_or_else(|| Error::Singular("normal equations are not positive definite".into()))?;
        if ridge == 0.0 {
            let diag = chol.l_dirty().diagonal();
            let max = diag.iter().fold(0.0f64, |m, v| m.max(v.abs()));
            let min = diag.iter().fold(f64::INFINITY, |m, v| m.min(v.abs()));
            if !(min > max * 1e-7) {
                return Err(Error::Singular("normal equations are numerically singular".into()));
            }
        }
        Ok(LeastSquaresSolver { x, chol, ridge })
    }

    pub fn design(&self) -> &DMatrix<f64> {
        &self.x
    }

    pub fn ridge(&self) -> f64 {
        self.ridge
    }

    pub fn solve(&self, y: &[f64]) -> Result<Vec<f64>> {
        let n = self.x.nrows();
        if y.len() != n {
            return Err(Error::InvalidArgument(format!("{} targets for {n} rows", y.len())));
        }
        if y.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numerical("non-finite regression target".into()));
        }
        let rhs = self.x.tr_mul(&DVector::from_column_slice(y)) / n as f64;
        Ok(self.chol.solve(&rhs).as_slice().to_vec())
    }

    /// Solve `(XᵀX/n + ridge·I) z = g`.
    pub fn precondition(&self, g: &DVector<f64>) -> DVector<f64> {
        self.chol.solve(g)
    }
}

/// Minimize `mean((y - Xw)^2) + ridge·|w|^2`.
pub fn fit_least_squares(features: &FeatureMap, x: &DMatrix<f64>, y: &[f64], ridge: f64) -> Result<LinearModel> {
    if x.ncols() != features.dim() {
        return Err(Error::InvalidArgument("design width does not match the feature map".into()));
    }
    let solver = LeastSquaresSolver::new(x.clone(), ridge)?;
    let weights = solver.solve(y)?;
    Ok(LinearModel {
        features: features.clone(),
        weights,
        clip: None,
    })
}

/// `ρ_τ(u) = u(τ - 1[u < 0])`.
#[inline]
pub fn pinball_loss(u: f64, tau: f64) -> f64 {
    if u < 0.0 {
        u * (tau - 1.0)
    } else {
        u * tau
    }
}

pub fn mean_pinball(y: &[f64], pred: &[f64], tau: &[f64]) -> f64 {
    let n = y.len().max(1) as f64;
    y.iter()
        .zip(pred)
        .zip(tau)
        .map(|((y, p), t)| pinball_loss(y - p, *t))
        .sum::<f64>()
        / n
}

/// Algorithm used to minimize the pinball loss.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PinballMethod {
    /// Primal-dual interior point on the dual linear program; exact up to `tol`.
    #[default]
    InteriorPoint,
    /// Preconditioned subgradient descent; approximate, supports warm starts.
    Subgradient,
}

/// Settings for the pinball-loss solvers.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PinballOptions {
    #[serde(default)]
    pub method: PinballMethod,
    /// Iteration cap for either method.
    pub max_steps: usize,
    /// Initial step, as a multiple of the target spread.
    pub lr: f64,
    /// Subgradient: stop once the step falls below `tol` times the target
    /// spread. Interior point: stop once the relative duality gap is below `tol`.
    pub tol: f64,
    /// Halve the step after this many steps without a new best loss.
    pub patience: usize,
    /// Ridge used in the preconditioner.
    pub ridge: f64,
}

impl Default for PinballOptions {
    fn default() -> Self {
        PinballOptions {
            method: PinballMethod::InteriorPoint,
            max_steps: 2000,
            lr: 0.5,
            tol: 1e-9,
            patience: 8,
            ridge: 1e-6,
        }
    }
}

/// Outcome of a pinball fit.
#[derive(Clone, Debug)]
pub struct PinballFit {
    pub weights: Vec<f64>,
    pub loss: f64,
    pub steps: usize,
}

/// Minimize the mean pinball loss over linear predictors on `solver`'s
/// design. The warm start is used by the subgradient method only.
pub fn pinball_descent(
    solver: &LeastSquaresSolver,
    y: &[f64],
    tau: &[f64],
    opts: &PinballOptions,
    warm_start: Option<&[f64]>,
) -> Result<PinballFit> {
    let x = solver.design();
    let n = x.nrows();
    if y.len() != n || tau.len() != n {
        return Err(Error::InvalidArgument("pinball targets/levels do not match the design".into()));
    }
    if n == 0 {
        return Err(Error::InsufficientData("quantile regression with no rows".into()));
    }
    if let Some(t) = tau.iter().find(|t| !(**t > 0.0 && **t < 1.0)) {
        return Err(Error::InvalidArgument(format!("pinball level {t} outside (0, 1)")));
    }
    if y.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numerical("non-finite quantile target".into()));
    }
    match opts.method {
        PinballMethod::InteriorPoint => interior_point(x, y, tau, opts),
        PinballMethod::Subgradient => subgradient(solver, y, tau, opts, warm_start),
    }
}

/// Mehrotra predictor-corrector on the dual of quantile regression:
/// `max yᵀu` over `Xᵀu = Xᵀ(1 - τ)`, `0 ≤ u ≤ 1`, written as
/// `min cᵀu` with `c = -y`. The primal weights are minus the equality duals.
fn interior_point(x: &DMatrix<f64>, y: &[f64], tau: &[f64], opts: &PinballOptions) -> Result<PinballFit> {
    let (n, d) = x.shape();
    let nf = n as f64;
    let c = DVector::from_iterator(n, y.iter().map(|v| -v));
    let mut u = DVector::from_iterator(n, tau.iter().map(|t| 1.0 - t));
    let b = x.tr_mul(&u);
    let mut s = u.map(|v| 1.0 - v);

    let gram = x.tr_mul(x);
    let scale = (gram.trace() / d as f64).max(1e-300);
    let jitter = opts.ridge.max(1e-12) * scale;
    let mut lhs = gram.clone();
    for k in 0..d {
        lhs[(k, k)] += jitter;
    }
    let ls = Cholesky::new(lhs).ok_or_else(|| Error::Numerical("singular quantile design".into()))?;
    let mut dual = ls.solve(&x.tr_mul(&c));
    let r = &c - x * &dual;
    let offset = (r.iter().map(|v| v.abs()).sum::<f64>() / nf).max(1e-8 * (1.0 + c.amax()));
    let mut z = r.map(|v| v.max(0.0) + offset);
    let mut w = r.map(|v| (-v).max(0.0) + offset);

    let step_len = |v: &DVector<f64>, dv: &DVector<f64>| -> f64 {
        v.iter()
            .zip(dv.iter())
            .filter(|(_, d)| **d < 0.0)
            .map(|(v, d)| -v / d)
            .fold(1.0f64, f64::min)
    };

    let mut steps = 0usize;
    let mut scaled = x.clone();
    let mut theta = DVector::zeros(n);
    while steps < opts.max_steps {
        let gap = u.dot(&z) + s.dot(&w);
        let obj = c.dot(&u).abs();
        if gap <= opts.tol.max(1e-14) * (1.0 + obj) {
            break;
        }
        steps += 1;
        let mu = gap / (2.0 * nf);
        let rp = &b - x.tr_mul(&u);
        let rd = &c - x * &dual - &z + &w;
        for i in 0..n {
            theta[i] = 1.0 / (z[i] / u[i] + w[i] / s[i]);
            let sq = theta[i].sqrt();
            for k in 0..d {
                scaled[(i, k)] = x[(i, k)] * sq;
            }
        }
        let mut normal = scaled.tr_mul(&scaled);
        let ntrace = normal.trace() / d as f64;
        for k in 0..d {
            normal[(k, k)] += 1e-13 * ntrace.max(1e-300);
        }
        let chol = Cholesky::new(normal).ok_or_else(|| Error::Numerical("interior point normal matrix".into()))?;

        let solve = |rxz: &DVector<f64>, rsw: &DVector<f64>| {
            let mut t = DVector::zeros(n);
            for i in 0..n {
                t[i] = rd[i] - rxz[i] / u[i] + rsw[i] / s[i];
            }
            let dy = chol.solve(&(&rp + x.tr_mul(&theta.component_mul(&t))));
            let mut dx = x * &dy;
            for i in 0..n {
                dx[i] = theta[i] * (dx[i] - t[i]);
            }
            let dz = DVector::from_fn(n, |i, _| (rxz[i] - z[i] * dx[i]) / u[i]);
            let dw = DVector::from_fn(n, |i, _| (rsw[i] + w[i] * dx[i]) / s[i]);
            (dx, dy, dz, dw)
        };
        let lengths = |dx: &DVector<f64>, dz: &DVector<f64>, dw: &DVector<f64>| {
            let ap = step_len(&u, dx).min(step_len(&s, &(-dx)));
            let ad = step_len(&z, dz).min(step_len(&w, dw));
            (ap, ad)
        };

        let rxz = -u.component_mul(&z);
        let rsw = -s.component_mul(&w);
        let (dxa, _, dza, dwa) = solve(&rxz, &rsw);
        let (apa, ada) = lengths(&dxa, &dza, &dwa);
        let mut aff = 0.0;
        for i in 0..n {
            aff += (u[i] + apa * dxa[i]) * (z[i] + ada * dza[i]) + (s[i] - apa * dxa[i]) * (w[i] + ada * dwa[i]);
        }
        let sigma = (aff / gap).powi(3).clamp(0.0, 1.0);
        let rxz = DVector::from_fn(n, |i, _| -u[i] * z[i] - dxa[i] * dza[i] + sigma * mu);
        let rsw = DVector::from_fn(n, |i, _| -s[i] * w[i] + dxa[i] * dwa[i] + sigma * mu);
        let (dx, dy, dz, dw) = solve(&rxz, &rsw);
        let (ap, ad) = lengths(&dx, &dz, &dw);
        let (ap, ad) = ((0.99995 * ap).min(1.0), (0.99995 * ad).min(1.0));
        u.axpy(ap, &dx, 1.0);
        s.axpy(-ap, &dx, 1.0);
        dual.axpy(ad, &dy, 1.0);
        z.axpy(ad, &dz, 1.0);
        w.axpy(ad, &dw, 1.0);
        if !dual.iter().all(|v| v.is_finite()) {
            return Err(Error::Numerical("interior point diverged".into()));
        }
    }
    let weights: Vec<f64> = dual.iter().map(|v| -v).collect();
    let pred = x * DVector::from_column_slice(&weights);
    Ok(PinballFit {
        loss: mean_pinball(y, pred.as_slice(), tau),
        weights,
        steps,
    })
}

/// Full-batch subgradient descent on the mean pinball loss, preconditioned
/// by the (ridged) feature Gram matrix. The iterate with the lowest loss is
/// returned; the step halves whenever `patience` steps pass without
/// improvement and the search restarts from the best iterate.
fn subgradient(
    solver: &LeastSquaresSolver,
    y: &[f64],
    tau: &[f64],
    opts: &PinballOptions,
    warm_start: Option<&[f64]>,
) -> Result<PinballFit> {
    let x = solver.design();
    let (n, d) = x.shape();
    let mean = y.iter().sum::<f64>() / n as f64;
    let spread = (y.iter().map(|v| (v - mean).abs()).sum::<f64>() / n as f64).max(1e-3 * (1.0 + mean.abs()));

    let mut theta = match warm_start {
        Some(w) if w.len() == d => DVector::from_column_slice(w),
        _ => DVector::from_column_slice(&solver.solve(y)?),
    };
    let mut pred = x * &theta;
    let loss_of = |pred: &DVector<f64>| -> f64 { mean_pinball(y, pred.as_slice(), tau) };
    let mut best_theta = theta.clone();
    let mut best_loss = loss_of(&pred);
    let mut step = opts.lr * spread;
    let min_step = opts.tol * spread;
    let mut since_best = 0usize;
    let mut steps = 0usize;
    let mut resid = DVector::zeros(n);
    while steps < opts.max_steps && step > min_step {
        steps += 1;
        for i in 0..n {
            // d/dpred of ρ_τ(y - pred)
            resid[i] = if y[i] < pred[i] { 1.0 - tau[i] } else { -tau[i] };
        }
        let g = x.tr_mul(&resid) / n as f64;
        let dir = solver.precondition(&g);
        let norm = g.dot(&dir).max(0.0).sqrt();
        if norm == 0.0 {
            break;
        }
        theta.axpy(-step / norm, &dir, 1.0);
        pred = x * &theta;
        let loss = loss_of(&pred);
        if !loss.is_finite() {
            return Err(Error::Numerical("pinball loss diverged".into()));
        }
        if loss < best_loss - 1e-15 * best_loss.abs() {
            best_loss = loss;
            best_theta.copy_from(&theta);
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= opts.patience {
                step *= 0.5;
                since_best = 0;
                theta.copy_from(&best_theta);
                pred = x * &theta;
            }
        }
    }
    Ok(PinballFit {
        weights: best_theta.as_slice().to_vec(),
        loss: best_loss,
        steps,
    })
}

/// Approximately minimize `mean ρ_{τᵢ}(yᵢ - f(xᵢ))` over linear `f`.
pub fn fit_quantile_pinball(
    features: &FeatureMap,
    x: &DMatrix<f64>,
    y: &[f64],
    tau_per_row: &[f64],
    opts: &PinballOptions,
) -> Result<QuantileModel> {
    if x.ncols() != features.dim() {
        return Err(Error::InvalidArgument("design width does not match the feature map".into()));
    }
    let solver = LeastSquaresSolver::new(x.clone(), opts.ridge)?;
    let fit = pinball_descent(&solver, y, tau_per_row, opts, None)?;
    Ok(LinearModel {
        features: features.clone(),
        weights: fit.weights,
        clip: None,
    })
}
