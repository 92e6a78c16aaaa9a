//! Minimax estimation of the robust visitation density ratio `w`.
//!
//! For a critic `f` the penalized adversarial objective is
//!
//! ```text
//! L(w, f) = Eₙ[w(s,a)(γξ f(s',π) - f(s,a))] + (1-γ)E_{d1}[f(s₁,π)]
//!           - λ Eₙ[(γξ f(s',π) - f(s,a))²]
//! ```
//!
//! With `w = θ_wᵀΦ(s,a)` and `f = θ_fᵀΨ(s,a)` write `gᵢ = γξᵢΨ(s'ᵢ,π) - Ψ(sᵢ,aᵢ)`,
//! `A = Eₙ[gΦᵀ]`, `c = (1-γ)E_{d1}Ψ(s₁,π)`, `G = Eₙ[ggᵀ]` and `m = Aθ_w + c`. With a
//! ridge `μ|θ_f|²` on the critic the inner maximum is `¼ mᵀ(λG + μI)⁻¹m`,
//! attained at `θ_f = ½(λG + μI)⁻¹m`, and the outer problem is a quadratic
//! in `θ_w`.
//!
//! The critic lives in a sieve: it starts from a base feature map and each
//! round appends the best response from a richer feature class.

use std::io::Write;
use std::path::Path;

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use serde::{Deserialize, Serialize};

use crate::approx::{ActionModel, FeatureConfig, FeatureMap, LinearModel};
use crate::bellman::{xi_weight, SensitivityModel, Sign, ThresholdFn};
use crate::error::{Error, Result};
use crate::mdp::{Action, Dataset, Policy, State};

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MilConfig {
    /// Weight `λ > 0` of the quadratic stabilizer.
    pub stabilizer: f64,
    /// Ridge `μ` on the critic coefficients.
    pub critic_ridge: f64,
    /// Ridge on the weight coefficients.
    pub w_ridge: f64,
    pub w_features: FeatureConfig,
    pub critic_base: FeatureConfig,
    /// Class searched for best responses; `None` keeps the base sieve fixed.
    pub critic_rich: Option<FeatureConfig>,
    pub rounds: usize,
    pub sieve_cap: usize,
    /// Stop when the objective changes by less than this between rounds.
    pub tol: f64,
    pub w_max: f64,
    /// Constrain the fitted ratio to `Eₙ[w] = 1`.
    #[serde(default)]
    pub conserve_mass: bool,
    pub sign: Sign,
    pub sensitivity: SensitivityModel,
    pub gamma: f64,
}

impl MilConfig {
    pub fn new(sensitivity: SensitivityModel, sign: Sign, gamma: f64) -> Self {
        MilConfig {
            stabilizer: 1.0,
            critic_ridge: 1e-4,
            w_ridge: 1e-6,
            w_features: FeatureConfig::rff(32, 41),
            critic_base: FeatureConfig::rff(16, 53),
            critic_rich: Some(FeatureConfig::rff(64, 67)),
            rounds: 5,
            sieve_cap: 64,
            tol: 1e-6,
            w_max: 50.0,
            conserve_mass: true,
            sign,
            sensitivity,
            gamma,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.stabilizer > 0.0) {
            return Err(Error::InvalidArgument("stabilizer λ must be > 0".into()));
        }
        if !(self.critic_ridge >= 0.0) || !(self.w_ridge >= 0.0) {
            return Err(Error::InvalidArgument("ridges must be >= 0".into()));
        }
        if !(self.w_max > 0.0) || !self.w_max.is_finite() {
            return Err(Error::InvalidArgument("w_max must be finite and > 0".into()));
        }
        if !(0.0..1.0).contains(&self.gamma) {
            return Err(Error::InvalidArgument(format!("gamma {} outside [0, 1)", self.gamma)));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MilDiagnostics {
    pub round: usize,
    pub objective: f64,
    /// Largest absolute moment residual over the (normalized) sieve.
    pub max_residual: f64,
}

/// Critic functions `f_j(s, a) = b_jᵀ (e_a ⊗ ψ(s))` over a stacked feature map.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CriticSieve {
    pub maps: Vec<FeatureMap>,
    pub n_actions: usize,
    /// Columns in the stacked coordinate system.
    pub basis: Vec<Vec<f64>>,
}

impl CriticSieve {
    fn width(&self) -> usize {
        self.maps.iter().map(FeatureMap::dim).sum()
    }

    fn psi(&self, s: &State) -> Vec<f64> {
        self.maps.iter().flat_map(|m| m.eval(s)).collect()
    }

    pub fn len(&self) -> usize {
        self.basis.len()
    }

    pub fn is_empty(&self) -> bool {
        self.basis.is_empty()
    }

    /// `f_j(s, a)`.
    pub fn eval(&self, j: usize, s: &State, a: Action) -> f64 {
        let d = self.width();
        let psi = self.psi(s);
        self.basis[j][a.0 * d..(a.0 + 1) * d].iter().zip(&psi).map(|(b, p)| b * p).sum()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MilResult {
    pub w: ActionModel,
    pub sign: Sign,
    pub objective: f64,
    /// Final moment residual per sieve function.
    pub residuals: Vec<f64>,
    pub critic: CriticSieve,
    pub diagnostics: Vec<MilDiagnostics>,
}

impl MilResult {
    pub fn w(&self, s: &State, a: Action) -> f64 {
        self.w.predict(s, a)
    }

    pub fn write_diagnostics_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let fmt = |e: csv::Error| Error::Format {
            path: "<diagnostics>".into(),
            msg: e.to_string(),
        };
        w.write_record(["round", "objective", "max_residual"]).map_err(fmt)?;
        for d in &self.diagnostics {
            w.write_record([d.round.to_string(), format!("{:.16e}", d.objective), format!("{:.16e}", d.max_residual)])
                .map_err(fmt)?;
        }
        w.flush().map_err(|e| Error::io("<diagnostics>", e))
    }

    pub fn save_diagnostics(&self, path: &Path) -> Result<()> {
        let f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        self.write_diagnostics_csv(std::io::BufWriter::new(f))
    }
}

/// `max_θ θᵀm - θᵀ(λG + μI)θ`: returns the value `¼mᵀ(λG+μI)⁻¹m` and the maximizer.
pub fn inner_max(m: &DVector<f64>, g: &DMatrix<f64>, stabilizer: f64, ridge: f64) -> Result<(f64, DVector<f64>)> {
    let h = penalty_cholesky(g, stabilizer, ridge)?;
    let theta = h.solve(m) * 0.5;
    Ok((0.5 * m.dot(&theta), theta))
}

fn penalty_cholesky(g: &DMatrix<f64>, stabilizer: f64, ridge: f64) -> Result<Cholesky<f64, Dyn>> {
    let k = g.nrows();
    let mut p = g * stabilizer;
    for j in 0..k {
        p[(j, j)] += ridge;
    }
    if let Some(c) = Cholesky::new(p.clone()) {
        return Ok(c);
    }
    // Ill-conditioned critic Gram: regularize progressively.
    let scale = (0..k).map(|j| p[(j, j)].abs()).fold(0.0, f64::max).max(1e-300);
    let mut eps = scale * 1e-12;
    for _ in 0..12 {
        let mut q = p.clone();
        for j in 0..k {
            q[(j, j)] += eps;
        }
        if let Some(c) = Cholesky::new(q) {
            return Ok(c);
        }
        eps *= 10.0;
    }
    Err(Error::Singular("critic Gram matrix".into()))
}

/// `(1-γ)Ê_{d1}[f(s₁,π)] + Êₙ[w(s,a)(γξ f(s',π) - f(s,a))]`.
#[allow(clippy::too_many_arguments)]
pub fn moment_residual<P, W, F>(
    w: W,
    f: F,
    data: &Dataset,
    d1_sample: &[State],
    target: &P,
    zeta: &dyn ThresholdFn,
    model: &SensitivityModel,
    sign: Sign,
    gamma: f64,
) -> f64
where
    P: Policy + ?Sized,
    W: Fn(&State, Action) -> f64,
    F: Fn(&State, Action) -> f64,
{
    let f_pi = |s: &State| -> f64 {
        target
            .action_probs(s)
            .iter()
            .enumerate()
            .filter(|(_, p)| **p != 0.0)
            .map(|(a, p)| p * f(s, Action(a)))
            .sum()
    };
    let start = if d1_sample.is_empty() {
        0.0
    } else {
        d1_sample.iter().map(f_pi).sum::<f64>() / d1_sample.len() as f64
    };
    let n = data.len().max(1) as f64;
    let body: f64 = data
        .tuples
        .iter()
        .map(|t| {
            let xi = xi_weight(&t.s, t.a, &t.s_next, zeta, model, sign);
            w(&t.s, t.a) * (gamma * xi * f_pi(&t.s_next) - f(&t.s, t.a))
        })
        .sum();
    (1.0 - gamma) * start + body / n
}

/// Stack per-state features into the `e_a ⊗ φ(s)` layout.
fn stacked(phi: &[f64], a: usize, n_actions: usize, out: &mut [f64]) {
    let d = phi.len();
    debug_assert_eq!(out.len(), d * n_actions);
    out.fill(0.0);
    out[a * d..(a + 1) * d].copy_from_slice(phi);
}

fn stacked_pi(phi: &[f64], probs: &[f64], out: &mut [f64]) {
    let d = phi.len();
    for (a, p) in probs.iter().enumerate() {
        for k in 0..d {
            out[a * d + k] = p * phi[k];
        }
    }
}

/// Sufficient statistics of the minimax problem in the rich critic coordinates.
struct Moments {
    a: DMatrix<f64>,
    g: DMatrix<f64>,
    c: DVector<f64>,
    /// `Eₙ[Ψ(s,a)Ψ(s,a)ᵀ]`, for normalizing critic functions.
    f: DMatrix<f64>,
}

impl Moments {
    fn restrict(&self, b: &DMatrix<f64>) -> (DMatrix<f64>, DMatrix<f64>, DVector<f64>) {
        (b.tr_mul(&self.a), b.tr_mul(&(&self.g * b)), b.tr_mul(&self.c))
    }
}

fn solve_outer(
    a: &DMatrix<f64>,
    g: &DMatrix<f64>,
    c: &DVector<f64>,
    mass: Option<(&DVector<f64>, f64)>,
    cfg: &MilConfig,
) -> Result<(DVector<f64>, f64, DVector<f64>)> {
    let h = penalty_cholesky(g, cfg.stabilizer, cfg.critic_ridge)?;
    let ha = h.solve(a);
    let hc = h.solve(c);
    let q = a.ncols();
    let lhs = a.tr_mul(&ha);
    let rhs = -a.tr_mul(&hc);
    let scale = (0..q).map(|j| lhs[(j, j)].abs()).fold(0.0, f64::max).max(1e-300);
    let mut eps = cfg.w_ridge.max(scale * 1e-14);
    let theta = loop {
        let mut l = lhs.clone();
        for j in 0..q {
            l[(j, j)] += eps;
        }
        if let Some(ch) = Cholesky::new(l) {
            let theta = ch.solve(&rhs);
            break match mass {
                Some((k, k0)) => {
                    let u = ch.solve(k);
                    let ku = k.dot(&u);
                    if ku.abs() > 1e-300 {
                        &theta + u * ((k0 - k.dot(&theta)) / ku)
                    } else {
                        theta
                    }
                }
                None => theta,
            };
        }
        eps *= 10.0;
        if eps > scale * 1e3 {
            return Err(Error::Singular("weight normal equations".into()));
        }
    };
    let m = a * &theta + c;
    let obj = 0.25 * m.dot(&h.solve(&m));
    if !obj.is_finite() {
        return Err(Error::Numerical("non-finite minimax objective".into()));
    }
    Ok((theta, obj, m))
}

/// Fit `ŵ` by the penalized minimax program with a growing critic sieve.
pub fn run_robust_mil<P: Policy + ?Sized>(
    data: &Dataset,
    target: &P,
    d1_sample: &[State],
    zeta: &dyn ThresholdFn,
    cfg: &MilConfig,
) -> Result<MilResult> {
    cfg.validate()?;
    let n = data.len();
    if n == 0 {
        return Err(Error::InsufficientData("empty dataset".into()));
    }
    if d1_sample.is_empty() {
        return Err(Error::InvalidArgument("empty initial-state sample".into()));
    }
    let n_actions = target.n_actions();
    let states: Vec<&State> = data.tuples.iter().flat_map(|t| [&t.s, &t.s_next]).collect();
    let w_map = cfg.w_features.build(&states)?;
    let mut maps = vec![cfg.critic_base.build(&states)?];
    if let Some(rich) = &cfg.critic_rich {
        maps.push(rich.build(&states)?);
    }
    let d_base = maps[0].dim();
    let d_all: usize = maps.iter().map(FeatureMap::dim).sum();
    let r = d_all * n_actions;
    let dw = w_map.dim();
    let q = dw * n_actions;

    let psi = |s: &State| -> Vec<f64> { maps.iter().flat_map(|m| m.eval(s)).collect() };

    let mut g_rows = DMatrix::<f64>::zeros(n, r);
    let mut f_rows = DMatrix::<f64>::zeros(n, r);
    let mut w_rows = DMatrix::<f64>::zeros(n, q);
    let mut buf_g = vec![0.0; r];
    let mut buf_f = vec![0.0; r];
    let mut buf_w = vec![0.0; q];
    let mut k_mass = DVector::<f64>::zeros(q);
    for (i, t) in data.tuples.iter().enumerate() {
        let xi = xi_weight(&t.s, t.a, &t.s_next, zeta, &cfg.sensitivity, cfg.sign);
        let ps = psi(&t.s);
        let pn = psi(&t.s_next);
        stacked_pi(&pn, &target.action_probs(&t.s_next), &mut buf_g);
        stacked(&ps, t.a.0, n_actions, &mut buf_f);
        stacked(&w_map.eval(&t.s), t.a.0, n_actions, &mut buf_w);
        for k in 0..r {
            g_rows[(i, k)] = cfg.gamma * xi * buf_g[k] - buf_f[k];
            f_rows[(i, k)] = buf_f[k];
        }
        for k in 0..q {
            w_rows[(i, k)] = buf_w[k];
            k_mass[k] += buf_w[k];
        }
    }
    k_mass /= n as f64;
    let mass = cfg.conserve_mass.then_some((&k_mass, 1.0));
    let mut c = DVector::<f64>::zeros(r);
    for s1 in d1_sample {
        stacked_pi(&psi(s1), &target.action_probs(s1), &mut buf_g);
        for k in 0..r {
            c[k] += buf_g[k];
        }
    }
    c *= (1.0 - cfg.gamma) / d1_sample.len() as f64;
    let nf = n as f64;
    let mom = Moments {
        a: g_rows.tr_mul(&w_rows) / nf,
        g: g_rows.tr_mul(&g_rows) / nf,
        c,
        f: f_rows.tr_mul(&f_rows) / nf,
    };
    drop((g_rows, f_rows, w_rows));

    let norm_of = |b: &DVector<f64>| -> f64 { b.dot(&(&mom.f * b)).max(0.0).sqrt() };

    // Base sieve: every base coordinate for every action, unit RMS.
    let mut cols: Vec<DVector<f64>> = Vec::new();
    for a in 0..n_actions {
        for k in 0..d_base {
            let mut b = DVector::zeros(r);
            b[a * d_all + k] = 1.0;
            let nb = norm_of(&b);
            if nb > 1e-12 {
                cols.push(b / nb);
            }
        }
    }
    if cols.is_empty() {
        return Err(Error::InsufficientData("critic base features vanish on the data".into()));
    }

    let mut diagnostics = Vec::new();
    let mut prev_obj: Option<f64> = None;
    let mut round = 0usize;
    let (theta, obj, m_sieve) = loop {
        let b = DMatrix::from_columns(&cols);
        let (a_s, g_s, c_s) = mom.restrict(&b);
        let (theta, obj, m_s) = solve_outer(&a_s, &g_s, &c_s, mass, cfg)?;
        diagnostics.push(MilDiagnostics {
            round,
            objective: obj,
            max_residual: m_s.amax(),
        });
        let settled = prev_obj.is_some_and(|p| (obj - p).abs() < cfg.tol);
        if settled || round >= cfg.rounds || cols.len() >= cfg.sieve_cap || cfg.critic_rich.is_none() {
            break (theta, obj, m_s);
        }
        // Best response in the rich class at the current weights.
        let m_rich = &mom.a * &theta + &mom.c;
        let (_, theta_f) = inner_max(&m_rich, &mom.g, cfg.stabilizer, cfg.critic_ridge)?;
        let nb = norm_of(&theta_f);
        if !(nb > 1e-12) {
            break (theta, obj, m_s);
        }
        let cand = theta_f / nb;
        // Skip if already (numerically) in the span of the sieve.
        let gram = b.tr_mul(&(&mom.f * &b));
        let proj = match Cholesky::new(gram) {
            Some(ch) => &b * ch.solve(&b.tr_mul(&(&mom.f * &cand))),
            None => DVector::zeros(r),
        };
        if norm_of(&(&cand - proj)) < 1e-6 {
            break (theta, obj, m_s);
        }
        cols.push(cand);
        prev_obj = Some(obj);
        round += 1;
    };

    let clip = Some((0.0, cfg.w_max));
    let w = ActionModel::new(
        (0..n_actions)
            .map(|a| LinearModel {
                features: w_map.clone(),
                weights: theta.as_slice()[a * dw..(a + 1) * dw].to_vec(),
                clip,
            })
            .collect(),
    );
    Ok(MilResult {
        w,
        sign: cfg.sign,
        objective: obj,
        residuals: m_sieve.as_slice().to_vec(),
        critic: CriticSieve {
            maps,
            n_actions,
            basis: cols.iter().map(|c| c.as_slice().to_vec()).collect(),
        },
        diagnostics,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::oracle::{state_action_law, tabular_robust_flow_solve, tabular_robust_value_iteration, TabularMdp};

    fn tabular_cfg(lambda: f64, sign: Sign, gamma: f64) -> MilConfig {
        MilConfig {
            critic_ridge: 1e-10,
            w_ridge: 1e-12,
            w_features: FeatureConfig::TabularIndicator { n_states: 3 },
            critic_base: FeatureConfig::TabularIndicator { n_states: 3 },
            critic_rich: None,
            w_max: 1e3,
            ..MilConfig::new(SensitivityModel::constant(lambda).unwrap(), sign, gamma)
        }
    }

    #[test]
    fn inner_max_matches_grid_search() {
        let m = DVector::from_vec(vec![0.3, -0.2]);
        let g = DMatrix::from_row_slice(2, 2, &[1.0, 0.3, 0.3, 0.5]);
        let (val, theta) = inner_max(&m, &g, 0.8, 0.1).unwrap();
        let p = &g * 0.8 + DMatrix::identity(2, 2) * 0.1;
        let obj = |t: &DVector<f64>| t.dot(&m) - t.dot(&(&p * t));
        let mut best = f64::NEG_INFINITY;
        let k = 800;
        for i in 0..=k {
            for j in 0..=k {
                let t = DVector::from_vec(vec![-1.0 + 2.0 * i as f64 / k as f64, -1.0 + 2.0 * j as f64 / k as f64]);
                best = best.max(obj(&t));
            }
        }
        assert!((val - best).abs() <= 1e-5, "{val} vs {best}");
        assert!((obj(&theta) - val).abs() <= 1e-12);
        // Refine around the grid optimum to certify agreement at 1e-6.
        let mut best = f64::NEG_INFINITY;
        for i in -200..=200 {
            for j in -200..=200 {
                let t = &theta + DVector::from_vec(vec![i as f64 * 1e-5, j as f64 * 1e-5]);
                best = best.max(obj(&t));
            }
        }
        assert!((val - best).abs() <= 1e-6);
    }

    #[test]
    fn moment_residual_trivial_cases() {
        let mdp = TabularMdp::example();
        let pi = TabularMdp::example_target();
        let data = mdp.sample_iid(&[1.0 / 3.0; 3], &TabularMdp::example_behavior(), 500, 1).unwrap();
        let model = SensitivityModel::constant(2.0).unwrap();
        let zeta = |_: &State, _: Action, _: &State| 0.0;
        let d1 = vec![TabularMdp::state(0)];
        let r0 = moment_residual(|_, _| 1.0, |_, _| 0.0, &data, &d1, &pi, &zeta, &model, Sign::Minus, 0.5);
        assert_eq!(r0, 0.0);
        let f = |s: &State, a: Action| (s.index() + a.0) as f64;
        let rz = moment_residual(|_, _| 0.0, f, &data, &d1, &pi, &zeta, &model, Sign::Minus, 0.5);
        // (1-γ) f(s₁,π) with s₁ = 0: 0.8·0 + 0.2·1.
        assert!((rz - 0.5 * 0.2).abs() < 1e-15);
    }

    #[test]
    fn gamma_zero_recovers_one_step_ratio() {
        let mdp = TabularMdp::example();
        let pi = TabularMdp::example_target();
        let nu_state = [0.5, 0.3, 0.2];
        let data = mdp.sample_iid(&nu_state, &TabularMdp::example_behavior(), 50_000, 2).unwrap();
        let zeta = |_: &State, _: Action, _: &State| 0.0;
        let d1: Vec<State> = vec![TabularMdp::state(1)];
        let res = run_robust_mil(&data, &pi, &d1, &zeta, &tabular_cfg(2.0, Sign::Minus, 0.0)).unwrap();
        let emp = crate::oracle::empirical_state_action_law(&data, 3, 2);
        // w(s,a) = 1{s = 1} π(a|1) / ν̂(s,a)
        for s in 0..3 {
            for a in 0..2 {
                let want = if s == 1 { pi.p(1, a) / emp[s][a] } else { 0.0 };
                let got = res.w(&TabularMdp::state(s), Action(a));
                assert!((got - want).abs() < 1e-6, "({s},{a}) {got} vs {want}");
            }
        }
    }

    #[test]
    fn tabular_matches_flow_solve() {
        let mdp = TabularMdp::example();
        let pi = TabularMdp::example_target();
        let nu_state = [1.0 / 3.0; 3];
        let behavior = TabularMdp::example_behavior();
        let data = mdp.sample_iid(&nu_state, &behavior, 100_000, 3).unwrap();
        let nu = state_action_law(&mdp, &nu_state, &behavior);
        let lambda = 2.0;
        // Every (s, a) reaches the lowest-value state with probability exactly
        // τ = 1/3, so the indicator kernel coincides with the extreme kernel.
        for sign in [Sign::Minus] {
            let sol = tabular_robust_value_iteration(&mdp, &pi, lambda, sign, 1e-13).unwrap();
            let flow = tabular_robust_flow_solve(&mdp, &pi, lambda, sign, &nu).unwrap();
            let v = sol.v.clone();
            let beta = sol.beta.clone();
            let zeta = move |s: &State, a: Action, sn: &State| v[sn.index()] - beta[s.index()][a.0];
            let d1: Vec<State> = (0..3).map(TabularMdp::state).collect();
            // d1 is not uniform; weight the sample by repeating states.
            let d1_sample: Vec<State> = d1
                .iter()
                .zip(&mdp.d1)
                .flat_map(|(s, p)| std::iter::repeat_n(s.clone(), (p * 10.0).round() as usize))
                .collect();
            let res = run_robust_mil(&data, &pi, &d1_sample, &zeta, &tabular_cfg(lambda, sign, mdp.gamma)).unwrap();
            let mut l2 = 0.0;
            for s in 0..3 {
                for a in 0..2 {
                    let diff = res.w(&TabularMdp::state(s), Action(a)) - flow.w[s][a];
                    l2 += nu[s][a] * diff * diff;
                }
            }
            assert!(l2.sqrt() <= 5e-2, "{sign}: {}", l2.sqrt());
        }
    }

    #[test]
    fn fit_beats_trivial_baselines_and_is_deterministic() {
        let mdp = TabularMdp::example();
        let pi = TabularMdp::example_target();
        let data = mdp.sample_iid(&[1.0 / 3.0; 3], &TabularMdp::example_behavior(), 5000, 4).unwrap();
        let zeta = |_: &State, _: Action, sn: &State| if sn.index() == 2 { -1.0 } else { 1.0 };
        let d1 = vec![TabularMdp::state(0)];
        let cfg = MilConfig {
            conserve_mass: false,
            ..tabular_cfg(2.0, Sign::Minus, 0.5)
        };
        let res = run_robust_mil(&data, &pi, &d1, &zeta, &cfg).unwrap();
        let again = run_robust_mil(&data, &pi, &d1, &zeta, &cfg).unwrap();
        assert_eq!(res, again);
        let residual_norm = |w: &dyn Fn(&State, Action) -> f64| -> f64 {
            (0..res.critic.len())
                .map(|j| {
                    let f = |s: &State, a: Action| res.critic.eval(j, s, a);
                    moment_residual(w, f, &data, &d1, &pi, &zeta, &cfg.sensitivity, cfg.sign, cfg.gamma).powi(2)
                })
                .sum::<f64>()
                .sqrt()
        };
        let fitted = residual_norm(&|s, a| res.w(s, a));
        assert!(fitted <= residual_norm(&|_, _| 0.0));
        assert!(fitted <= residual_norm(&|_, _| 1.0));
        assert!(fitted < 1e-6, "{fitted}");
    }

    #[test]
    fn conserved_mass_has_unit_sample_mean() {
        let mdp = TabularMdp::example();
        let pi = TabularMdp::example_target();
        let data = mdp.sample_iid(&[1.0 / 3.0; 3], &TabularMdp::example_behavior(), 5000, 4).unwrap();
        let zeta = |_: &State, _: Action, sn: &State| if sn.index() == 2 { -1.0 } else { 1.0 };
        let d1 = vec![TabularMdp::state(0)];
        let res = run_robust_mil(&data, &pi, &d1, &zeta, &tabular_cfg(2.0, Sign::Minus, 0.5)).unwrap();
        let mass = data.tuples.iter().map(|t| res.w(&t.s, t.a)).sum::<f64>() / data.len() as f64;
        assert!((mass - 1.0).abs() < 1e-8, "{mass}");
    }
}
