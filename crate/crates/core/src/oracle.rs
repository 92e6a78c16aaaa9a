//! Ground truth: analytic adversarial kernels for uniform nominal laws,
//! Monte Carlo robust values, and exact tabular solves.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bellman::{brute_force_robust_expectation, rho_value, tau_of, DiscreteDistribution, Sign};
use crate::error::{Error, Result};
use crate::mdp::{
    sample_index, uniform_between, Action, Dataset, Environment, Policy, State, SyntheticEnv, TabularPolicy,
    TransitionTuple,
};
use crate::rng::{stream_rng, streams, sub_stream};

/// A nominal `Unif[x, y]` next-state law (endpoints already clipped).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct UniformKernelSpec {
    pub x: f64,
    pub y: f64,
}

impl UniformKernelSpec {
    pub fn new(x: f64, y: f64) -> Result<Self> {
        if !(x <= y) || !x.is_finite() || !y.is_finite() {
            return Err(Error::InvalidArgument(format!("bad uniform interval [{x}, {y}]")));
        }
        Ok(UniformKernelSpec { x, y })
    }
}

/// The extreme kernel of the uncertainty set around `Unif[x, y]` when the
/// value of the next state is monotone decreasing in the state.
///
/// Under that assumption the worst case moves the extra `1 - 1/Λ` of mass to
/// the top `α`-fraction of the interval and the best case to the bottom one,
/// `α = 1/(1+Λ)`:
///
/// ```text
/// U⁻ = (1-1/Λ) Unif[y - α(y-x), y] + (1/Λ) Unif[x, y]
/// U⁺ = (1-1/Λ) Unif[x, x + α(y-x)] + (1/Λ) Unif[x, y]
/// ```
///
/// The monotonicity is a property of the environment and target policy and
/// is not checked here.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdversarialUniform {
    pub spec: UniformKernelSpec,
    pub lambda: f64,
    pub sign: Sign,
}

pub fn adversarial_uniform_kernel(spec: UniformKernelSpec, lambda: f64, sign: Sign) -> Result<AdversarialUniform> {
    if !(lambda >= 1.0) || !lambda.is_finite() {
        return Err(Error::InvalidArgument(format!("Λ must be a finite value >= 1, got {lambda}")));
    }
    Ok(AdversarialUniform { spec, lambda, sign })
}

impl AdversarialUniform {
    /// Weight on the tail component.
    pub fn tail_weight(&self) -> f64 {
        1.0 - 1.0 / self.lambda
    }

    /// The reweighted segment.
    pub fn tail(&self) -> (f64, f64) {
        let UniformKernelSpec { x, y } = self.spec;
        let alpha = tau_of(self.lambda);
        match self.sign {
            Sign::Minus => (y - alpha * (y - x), y),
            Sign::Plus => (x, x + alpha * (y - x)),
        }
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        let UniformKernelSpec { x, y } = self.spec;
        if y <= x {
            return x;
        }
        let u: f64 = rng.random();
        if u < self.tail_weight() {
            let (lo, hi) = self.tail();
            uniform_between(lo, hi, rng)
        } else {
            uniform_between(x, y, rng)
        }
    }

    /// Lebesgue density of the mixture. The degenerate interval is a point
    /// mass and has no density.
    pub fn density(&self, s: f64) -> f64 {
        let UniformKernelSpec { x, y } = self.spec;
        if y <= x || s < x || s > y {
            return 0.0;
        }
        let (lo, hi) = self.tail();
        let base = 1.0 / (self.lambda * (y - x));
        if s >= lo && s <= hi {
            base + self.tail_weight() / (hi - lo)
        } else {
            base
        }
    }

    /// `dU/dP` at `s`; `1/Λ` off the tail and `Λ` on it.
    pub fn density_ratio(&self, s: f64) -> f64 {
        let UniformKernelSpec { x, y } = self.spec;
        if y <= x {
            return 1.0;
        }
        self.density(s) * (y - x)
    }
}

/// The benchmark with its nominal kernel replaced by the extreme kernel.
#[derive(Clone, Debug, PartialEq)]
pub struct AdversarialEnv {
    pub base: SyntheticEnv,
    pub lambda: f64,
    pub sign: Sign,
}

impl AdversarialEnv {
    pub fn new(base: SyntheticEnv, lambda: f64, sign: Sign) -> Result<Self> {
        adversarial_uniform_kernel(UniformKernelSpec { x: 0.0, y: 0.0 }, lambda, sign)?;
        Ok(AdversarialEnv { base, lambda, sign })
    }

    pub fn kernel(&self, s: f64, a: Action) -> Result<AdversarialUniform> {
        let (x, y) = self.base.transition_interval(s, a)?;
        Ok(AdversarialUniform {
            spec: UniformKernelSpec { x, y },
            lambda: self.lambda,
            sign: self.sign,
        })
    }
}

impl Environment for AdversarialEnv {
    fn n_actions(&self) -> usize {
        self.base.n_actions()
    }

    fn initial_state<R: Rng + ?Sized>(&self, rng: &mut R) -> State {
        self.base.initial_state(rng)
    }

    fn step<R: Rng + ?Sized>(&self, s: &State, a: Action, rng: &mut R) -> Result<(State, f64)> {
        let r = self.base.reward(s.x(), a)?;
        let k = self.kernel(s.x(), a)?;
        Ok((State::scalar(k.sample(rng)), r))
    }

    fn describe(&self) -> String {
        format!("adversarial({}, Λ={}, {})", self.base.describe(), self.lambda, self.sign)
    }
}

/// Monte Carlo estimate of a normalized discounted value.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct McValue {
    pub value: f64,
    pub mc_std_error: f64,
    /// Upper bound on `|value - untruncated value|` for rewards in `[0, 1]`.
    pub truncation_bias: f64,
    pub n_traj: usize,
    pub horizon: usize,
    pub seed: u64,
}

/// Shortest horizon whose normalized truncation error `γ^h` is at most
/// `tol·(1-γ)`.
pub fn horizon_for(gamma: f64, tol: f64) -> usize {
    if gamma <= 0.0 {
        return 1;
    }
    let h = ((tol * (1.0 - gamma)).ln() / gamma.ln()).ceil();
    (h.max(1.0)) as usize
}

/// `(1-γ)` times the average discounted return over `n_traj` independent
/// trajectories of length `horizon`. Trajectory `i` uses its own stream, so
/// the result does not depend on the thread pool.
pub fn monte_carlo_robust_value<E: Environment, P: Policy>(
    env: &E,
    target: &P,
    gamma: f64,
    n_traj: usize,
    horizon: usize,
    seed: u64,
) -> Result<McValue> {
    if !(0.0..1.0).contains(&gamma) {
        return Err(Error::InvalidArgument(format!("gamma {gamma} outside [0, 1)")));
    }
    if n_traj == 0 || horizon == 0 {
        return Err(Error::InvalidArgument("need at least one trajectory and one step".into()));
    }
    let returns: Vec<f64> = (0..n_traj)
        .into_par_iter()
        .map(|i| {
            let mut rng = stream_rng(seed, sub_stream(streams::ORACLE, i as u64));
            let mut s = env.initial_state(&mut rng);
            let mut disc = 1.0;
            let mut total = 0.0;
            for _ in 0..horizon {
                let a = target.sample(&s, &mut rng);
                let (s_next, r) = env.step(&s, a, &mut rng)?;
                total += disc * r;
                disc *= gamma;
                s = s_next;
            }
            Ok((1.0 - gamma) * total)
        })
        .collect::<Result<_>>()?;
    let n = n_traj as f64;
    let mean = returns.iter().sum::<f64>() / n;
    let var = if n_traj > 1 {
        returns.iter().map(|g| (g - mean) * (g - mean)).sum::<f64>() / (n - 1.0)
    } else {
        0.0
    };
    Ok(McValue {
        value: mean,
        mc_std_error: (var / n).sqrt(),
        truncation_bias: gamma.powi(horizon as i32),
        n_traj,
        horizon,
        seed,
    })
}

/// Ground-truth record consumed by the report stage.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub lambda: f64,
    pub sign: Sign,
    pub value: f64,
    pub mc_std_error: f64,
    pub n_traj: usize,
    pub horizon: usize,
    pub seed: u64,
}

/// Robust value of the benchmark target policy under the analytic extreme kernel.
pub fn benchmark_ground_truth<P: Policy>(
    env: &SyntheticEnv,
    target: &P,
    lambda: f64,
    sign: Sign,
    n_traj: usize,
    horizon: usize,
    seed: u64,
) -> Result<GroundTruth> {
    let adv = AdversarialEnv::new(env.clone(), lambda, sign)?;
    let mc = monte_carlo_robust_value(&adv, target, env.gamma(), n_traj, horizon, seed)?;
    Ok(GroundTruth {
        lambda,
        sign,
        value: mc.value,
        mc_std_error: mc.mc_std_error,
        n_traj,
        horizon,
        seed,
    })
}

/// A finite MDP. States are encoded as `State::scalar(index)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TabularMdp {
    pub n_states: usize,
    pub n_actions: usize,
    /// `p[s][a][s']`.
    pub p: Vec<Vec<Vec<f64>>>,
    /// `r[s][a]`.
    pub r: Vec<Vec<f64>>,
    pub d1: Vec<f64>,
    pub gamma: f64,
}

fn is_distribution(p: &[f64]) -> bool {
    p.iter().all(|x| *x >= 0.0) && (p.iter().sum::<f64>() - 1.0).abs() <= 1e-12
}

impl TabularMdp {
    pub fn new(p: Vec<Vec<Vec<f64>>>, r: Vec<Vec<f64>>, d1: Vec<f64>, gamma: f64) -> Result<Self> {
        let n_states = p.len();
        let n_actions = p.first().map_or(0, Vec::len);
        if n_states == 0 || n_actions == 0 {
            return Err(Error::InvalidArgument("empty tabular MDP".into()));
        }
        if !(0.0..1.0).contains(&gamma) {
            return Err(Error::InvalidArgument(format!("gamma {gamma} outside [0, 1)")));
        }
        if r.len() != n_states || d1.len() != n_states {
            return Err(Error::InvalidArgument("reward / initial distribution shape mismatch".into()));
        }
        for s in 0..n_states {
            if p[s].len() != n_actions || r[s].len() != n_actions {
                return Err(Error::InvalidArgument(format!("state {s}: ragged action dimension")));
            }
            for a in 0..n_actions {
                if p[s][a].len() != n_states || !is_distribution(&p[s][a]) {
                    return Err(Error::InvalidArgument(format!("P(.|{s},{a}) is not a distribution")));
                }
                if !(0.0..=1.0).contains(&r[s][a]) {
                    return Err(Error::InvalidArgument(format!("r({s},{a}) outside [0, 1]")));
                }
            }
        }
        if !is_distribution(&d1) {
            return Err(Error::InvalidArgument("d1 is not a distribution".into()));
        }
        Ok(TabularMdp {
            n_states,
            n_actions,
            p,
            r,
            d1,
            gamma,
        })
    }

    /// A 3-state, 2-action test MDP in which every `(s, a)` reaches state 2
    /// with probability exactly 1/3, and state 2 carries the lowest value
    /// under [`TabularMdp::example_target`].
    pub fn example() -> Self {
        let t = 1.0 / 3.0;
        let p = vec![
            vec![vec![0.5, 1.0 / 6.0, t], vec![t, t, t]],
            vec![vec![1.0 / 6.0, 0.5, t], vec![0.5, 1.0 / 6.0, t]],
            vec![vec![t, t, t], vec![0.6, 1.0 / 15.0, t]],
        ];
        let r = vec![vec![0.9, 0.8], vec![0.6, 0.5], vec![0.1, 0.2]];
        TabularMdp::new(p, r, vec![0.5, 0.3, 0.2], 0.5).expect("valid example MDP")
    }

    pub fn example_target() -> TabularPolicy {
        TabularPolicy::new(vec![vec![0.8, 0.2], vec![0.3, 0.7], vec![0.5, 0.5]]).expect("valid policy")
    }

    pub fn example_behavior() -> TabularPolicy {
        TabularPolicy::new(vec![vec![0.5, 0.5]; 3]).expect("valid policy")
    }

    pub fn state(i: usize) -> State {
        State::scalar(i as f64)
    }

    fn policy_matrix<P: Policy + ?Sized>(&self, policy: &P) -> Vec<Vec<f64>> {
        (0..self.n_states).map(|s| policy.action_probs(&Self::state(s))).collect()
    }

    /// `v(s) = Σ_a π(a|s) q(s, a)`.
    pub fn state_values<P: Policy + ?Sized>(&self, policy: &P, q: &[Vec<f64>]) -> Vec<f64> {
        let pi = self.policy_matrix(policy);
        (0..self.n_states)
            .map(|s| pi[s].iter().zip(&q[s]).map(|(p, q)| p * q).sum())
            .collect()
    }

    /// `(1-γ) Σ_s d1(s) v(s)`.
    pub fn normalized_value(&self, v: &[f64]) -> f64 {
        (1.0 - self.gamma) * self.d1.iter().zip(v).map(|(d, v)| d * v).sum::<f64>()
    }

    /// Draw `n` i.i.d. tuples with `s ~ nu_state`, `a ~ behavior(.|s)`.
    pub fn sample_iid<P: Policy>(&self, nu_state: &[f64], behavior: &P, n: usize, seed: u64) -> Result<Dataset> {
        if nu_state.len() != self.n_states || !is_distribution(nu_state) {
            return Err(Error::InvalidArgument("state sampling law is not a distribution".into()));
        }
        let mut rng = stream_rng(seed, streams::DATASET);
        let mut tuples = Vec::with_capacity(n);
        for _ in 0..n {
            let s = sample_index(nu_state, &mut rng).0;
            let a = behavior.sample(&Self::state(s), &mut rng);
            let s_next = sample_index(&self.p[s][a.0], &mut rng).0;
            tuples.push(TransitionTuple {
                s: Self::state(s),
                a,
                r: self.r[s][a.0],
                s_next: Self::state(s_next),
            });
        }
        Ok(Dataset::new(tuples, seed, format!("tabular iid policy={}", behavior.describe())))
    }
}

impl Environment for TabularMdp {
    fn n_actions(&self) -> usize {
        self.n_actions
    }

    fn initial_state<R: Rng + ?Sized>(&self, rng: &mut R) -> State {
        Self::state(sample_index(&self.d1, rng).0)
    }

    fn step<R: Rng + ?Sized>(&self, s: &State, a: Action, rng: &mut R) -> Result<(State, f64)> {
        let i = s.index();
        if i >= self.n_states || a.0 >= self.n_actions {
            return Err(Error::Domain(format!("({i}, {}) outside the tabular MDP", a.0)));
        }
        Ok((Self::state(sample_index(&self.p[i][a.0], rng).0), self.r[i][a.0]))
    }

    fn describe(&self) -> String {
        format!("tabular({} states, {} actions)", self.n_states, self.n_actions)
    }
}

fn flat(mdp: &TabularMdp, s: usize, a: usize) -> usize {
    s * mdp.n_actions + a
}

fn solve_dense(m: DMatrix<f64>, b: DVector<f64>) -> Result<DVector<f64>> {
    m.lu().solve(&b).ok_or_else(|| Error::Singular("tabular linear system".into()))
}

/// Nominal `Q^π` from `(I - γ P Π) q = r`.
pub fn tabular_policy_evaluation<P: Policy + ?Sized>(mdp: &TabularMdp, target: &P) -> Result<Vec<Vec<f64>>> {
    let kernel = mdp.p.clone();
    tabular_kernel_evaluation(mdp, target, &kernel)
}

/// `Q` under an arbitrary kernel `u[s][a][s']`.
pub fn tabular_kernel_evaluation<P: Policy + ?Sized>(
    mdp: &TabularMdp,
    target: &P,
    kernel: &[Vec<Vec<f64>>],
) -> Result<Vec<Vec<f64>>> {
    let pi = mdp.policy_matrix(target);
    let m = mdp.n_states * mdp.n_actions;
    let mut a_mat = DMatrix::<f64>::identity(m, m);
    let mut b = DVector::zeros(m);
    for s in 0..mdp.n_states {
        for a in 0..mdp.n_actions {
            let i = flat(mdp, s, a);
            b[i] = mdp.r[s][a];
            for s2 in 0..mdp.n_states {
                for a2 in 0..mdp.n_actions {
                    a_mat[(i, flat(mdp, s2, a2))] -= mdp.gamma * kernel[s][a][s2] * pi[s2][a2];
                }
            }
        }
    }
    let q = solve_dense(a_mat, b)?;
    Ok((0..mdp.n_states)
        .map(|s| (0..mdp.n_actions).map(|a| q[flat(mdp, s, a)]).collect())
        .collect())
}

/// One application of the exact robust operator
/// `r + γ inf/sup_{U} E_U[v(s')]`, computed by the greedy LP per `(s, a)`.
pub fn tabular_robust_backup<P: Policy + ?Sized>(
    mdp: &TabularMdp,
    target: &P,
    q: &[Vec<f64>],
    lambda: f64,
    sign: Sign,
) -> Result<Vec<Vec<f64>>> {
    let v = mdp.state_values(target, q);
    let mut out = vec![vec![0.0; mdp.n_actions]; mdp.n_states];
    for s in 0..mdp.n_states {
        for a in 0..mdp.n_actions {
            let dist = DiscreteDistribution::from_parts(&v, &mdp.p[s][a])?;
            out[s][a] = mdp.r[s][a] + mdp.gamma * brute_force_robust_expectation(&dist, lambda, sign)?.value;
        }
    }
    Ok(out)
}

/// Fixed point of the robust operator and its certificates.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TabularRobustSolution {
    pub q: Vec<Vec<f64>>,
    pub v: Vec<f64>,
    /// Lower/upper `τ`-quantile of `v(s')` under `P(.|s, a)`.
    pub beta: Vec<Vec<f64>>,
    /// `(1-γ) Σ d1(s) v(s)`.
    pub v_d1: f64,
    /// Extreme kernel `u[s][a][s']` attaining the robust backup at `v`.
    pub kernel: Vec<Vec<Vec<f64>>>,
    pub iterations: usize,
}

pub fn tabular_robust_value_iteration<P: Policy + ?Sized>(
    mdp: &TabularMdp,
    target: &P,
    lambda: f64,
    sign: Sign,
    tol: f64,
) -> Result<TabularRobustSolution> {
    if !(tol > 0.0) {
        return Err(Error::InvalidArgument("tolerance must be positive".into()));
    }
    let mut q = vec![vec![0.0; mdp.n_actions]; mdp.n_states];
    let mut iterations = 0;
    loop {
        let next = tabular_robust_backup(mdp, target, &q, lambda, sign)?;
        iterations += 1;
        let delta = next
            .iter()
            .flatten()
            .zip(q.iter().flatten())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        q = next;
        if delta <= tol {
            break;
        }
        if iterations > 1_000_000 {
            return Err(Error::Numerical("robust value iteration did not converge".into()));
        }
    }
    let v = mdp.state_values(target, &q);
    let tau = tau_of(lambda);
    let mut beta = vec![vec![0.0; mdp.n_actions]; mdp.n_states];
    let mut kernel = vec![vec![Vec::new(); mdp.n_actions]; mdp.n_states];
    for s in 0..mdp.n_states {
        for a in 0..mdp.n_actions {
            let dist = DiscreteDistribution::from_parts(&v, &mdp.p[s][a])?;
            beta[s][a] = dist.quantile(tau, sign);
            kernel[s][a] = brute_force_robust_expectation(&dist, lambda, sign)?.probs;
        }
    }
    let v_d1 = mdp.normalized_value(&v);
    Ok(TabularRobustSolution {
        q,
        v,
        beta,
        v_d1,
        kernel,
        iterations,
    })
}

/// Discounted occupancy under a kernel and the implied density ratio.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FlowSolution {
    /// `d(s)`, summing to one.
    pub d: Vec<f64>,
    /// `w(s, a) = d(s) π(a|s) / ν(s, a)`.
    pub w: Vec<Vec<f64>>,
    /// `max_s |d(s) - (1-γ)d1(s) - γ Σ d(s̄)π(ā|s̄)u(s|s̄,ā)|`.
    pub residual: f64,
}

/// Solve `d = (1-γ)d1 + γ Σ_{s,a} d(s)π(a|s)u(.|s,a)` and form `w` against `nu[s][a]`.
pub fn tabular_flow_from_kernel<P: Policy + ?Sized>(
    mdp: &TabularMdp,
    target: &P,
    kernel: &[Vec<Vec<f64>>],
    nu: &[Vec<f64>],
) -> Result<FlowSolution> {
    let pi = mdp.policy_matrix(target);
    let n = mdp.n_states;
    let mut m = DMatrix::<f64>::zeros(n, n);
    for s in 0..n {
        for a in 0..mdp.n_actions {
            for s2 in 0..n {
                m[(s, s2)] += pi[s][a] * kernel[s][a][s2];
            }
        }
    }
    let lhs = DMatrix::<f64>::identity(n, n) - m.transpose() * mdp.gamma;
    let rhs = DVector::from_column_slice(&mdp.d1) * (1.0 - mdp.gamma);
    let d = solve_dense(lhs, rhs.clone())?;
    let flow = &rhs + m.transpose() * &d * mdp.gamma;
    let residual = (&d - flow).amax();
    let mut w = vec![vec![0.0; mdp.n_actions]; n];
    for s in 0..n {
        for a in 0..mdp.n_actions {
            let mass = d[s] * pi[s][a];
            if nu[s][a] > 0.0 {
                w[s][a] = mass / nu[s][a];
            } else if mass > 1e-15 {
                return Err(Error::Coverage(format!(
                    "target occupancy {mass:.3e} at ({s}, {a}) where the data law has no mass"
                )));
            }
        }
    }
    Ok(FlowSolution {
        d: d.as_slice().to_vec(),
        w,
        residual,
    })
}

/// Robust visitation density ratio: the flow of the extreme kernel at the
/// robust fixed point.
pub fn tabular_robust_flow_solve<P: Policy + ?Sized>(
    mdp: &TabularMdp,
    target: &P,
    lambda: f64,
    sign: Sign,
    nu: &[Vec<f64>],
) -> Result<FlowSolution> {
    let sol = tabular_robust_value_iteration(mdp, target, lambda, sign, 1e-13)?;
    tabular_flow_from_kernel(mdp, target, &sol.kernel, nu)
}

/// Stationary state distribution of the nominal chain under `policy`.
pub fn stationary_distribution<P: Policy + ?Sized>(mdp: &TabularMdp, policy: &P) -> Result<Vec<f64>> {
    let pi = mdp.policy_matrix(policy);
    let n = mdp.n_states;
    // Rows 0..n-1 of (Pπᵀ - I) d = 0, last row replaced by Σ d = 1.
    let mut m = DMatrix::<f64>::zeros(n, n);
    for s in 0..n {
        for a in 0..mdp.n_actions {
            for s2 in 0..n {
                m[(s2, s)] += pi[s][a] * mdp.p[s][a][s2];
            }
        }
    }
    m -= DMatrix::<f64>::identity(n, n);
    for s in 0..n {
        m[(n - 1, s)] = 1.0;
    }
    let mut b = DVector::zeros(n);
    b[n - 1] = 1.0;
    Ok(solve_dense(m, b)?.as_slice().to_vec())
}

/// `ν(s, a) = nu_state(s) · behavior(a|s)`.
pub fn state_action_law<P: Policy + ?Sized>(mdp: &TabularMdp, nu_state: &[f64], behavior: &P) -> Vec<Vec<f64>> {
    let pi = mdp.policy_matrix(behavior);
    (0..mdp.n_states)
        .map(|s| pi[s].iter().map(|p| nu_state[s] * p).collect())
        .collect()
}

/// Empirical `ν(s, a)` of a tabular dataset.
pub fn empirical_state_action_law(data: &Dataset, n_states: usize, n_actions: usize) -> Vec<Vec<f64>> {
    let mut nu = vec![vec![0.0; n_actions]; n_states];
    for t in &data.tuples {
        nu[t.s.index()][t.a.0] += 1.0;
    }
    let n = data.len().max(1) as f64;
    nu.iter_mut().flatten().for_each(|x| *x /= n);
    nu
}

/// `T_β q = r + γ E[ρ(v(s'), β(s, a))]` for a fixed threshold function `β`.
pub fn tabular_beta_backup<P: Policy + ?Sized>(
    mdp: &TabularMdp,
    target: &P,
    q: &[Vec<f64>],
    beta: &[Vec<f64>],
    lambda: f64,
    sign: Sign,
) -> Vec<Vec<f64>> {
    let v = mdp.state_values(target, q);
    (0..mdp.n_states)
        .map(|s| {
            (0..mdp.n_actions)
                .map(|a| {
                    let e: f64 = (0..mdp.n_states)
                        .map(|s2| mdp.p[s][a][s2] * rho_value(v[s2], beta[s][a], lambda, sign))
                        .sum();
                    mdp.r[s][a] + mdp.gamma * e
                })
                .collect()
        })
        .collect()
}

/// Solve `q = T_β q`. The operator is piecewise linear in `q`, so fix the
/// tail indicators, solve the resulting linear system, and repeat until the
/// indicators stop changing. Fails when no fixed point is found.
pub fn tabular_beta_fixed_point<P: Policy + ?Sized>(
    mdp: &TabularMdp,
    target: &P,
    beta: &[Vec<f64>],
    lambda: f64,
    sign: Sign,
) -> Result<Vec<Vec<f64>>> {
    let pi = mdp.policy_matrix(target);
    let inv = 1.0 / lambda;
    let tau = tau_of(lambda);
    let (ns, na) = (mdp.n_states, mdp.n_actions);
    let m = ns * na;
    let mut q = tabular_policy_evaluation(mdp, target)?;
    let mut prev: Option<Vec<bool>> = None;
    for _ in 0..200 {
        let v = mdp.state_values(target, &q);
        let ind: Vec<bool> = (0..ns)
            .flat_map(|s| (0..na).flat_map(move |a| (0..ns).map(move |s2| (s, a, s2))))
            .map(|(s, a, s2)| sign.in_tail(v[s2] - beta[s][a]))
            .collect();
        if prev.as_ref() == Some(&ind) {
            let residual = tabular_beta_backup(mdp, target, &q, beta, lambda, sign)
                .iter()
                .flatten()
                .zip(q.iter().flatten())
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f64::max);
            if residual > 1e-9 {
                return Err(Error::Numerical(format!("T_β fixed point residual {residual:.3e}")));
            }
            return Ok(q);
        }
        // In the tail ρ = Λ v - (Λ-1) β; off the tail ρ = v/Λ + (1-1/Λ) β.
        let mut a_mat = DMatrix::<f64>::identity(m, m);
        let mut b = DVector::zeros(m);
        for s in 0..ns {
            for a in 0..na {
                let i = flat(mdp, s, a);
                b[i] = mdp.r[s][a];
                for s2 in 0..ns {
                    let p = mdp.p[s][a][s2];
                    if p == 0.0 {
                        continue;
                    }
                    let tail = ind[(s * na + a) * ns + s2];
                    let (cv, cb) = if tail {
                        (inv + (1.0 - inv) / tau, (1.0 - inv) * (1.0 - 1.0 / tau))
                    } else {
                        (inv, 1.0 - inv)
                    };
                    b[i] += mdp.gamma * p * cb * beta[s][a];
                    for a2 in 0..na {
                        a_mat[(i, flat(mdp, s2, a2))] -= mdp.gamma * p * cv * pi[s2][a2];
                    }
                }
            }
        }
        let sol = solve_dense(a_mat, b)?;
        q = (0..ns).map(|s| (0..na).map(|a| sol[flat(mdp, s, a)]).collect()).collect();
        prev = Some(ind);
    }
    Err(Error::Numerical("T_β fixed-point search did not settle".into()))
}

/// Cell-midpoint discretization of the benchmark: `P(j | i, a)` is the
/// fraction of the nominal interval at midpoint `i` that falls in cell `j`.
pub fn discretize_benchmark(env: &SyntheticEnv, cells: usize) -> Result<(TabularMdp, Vec<f64>)> {
    if cells < 2 {
        return Err(Error::InvalidArgument("need at least two cells".into()));
    }
    let (lo, hi) = env.config.state_bounds;
    let width = (hi - lo) / cells as f64;
    let mids: Vec<f64> = (0..cells).map(|i| lo + (i as f64 + 0.5) * width).collect();
    let cell_of = |x: f64| (((x - lo) / width).floor().max(0.0) as usize).min(cells - 1);
    let n_actions = env.config.transitions.len();
    let mut p = vec![vec![vec![0.0; cells]; n_actions]; cells];
    let mut r = vec![vec![0.0; n_actions]; cells];
    for (i, &m) in mids.iter().enumerate() {
        for a in 0..n_actions {
            r[i][a] = env.reward(m, Action(a))?;
            let (x, y) = env.transition_interval(m, Action(a))?;
            let row = &mut p[i][a];
            if y <= x {
                row[cell_of(x)] = 1.0;
                continue;
            }
            for (j, cell) in row.iter_mut().enumerate() {
                let (c0, c1) = (lo + j as f64 * width, lo + (j + 1) as f64 * width);
                let overlap = (y.min(c1) - x.max(c0)).max(0.0);
                *cell = overlap / (y - x);
            }
            let total: f64 = row.iter().sum();
            row.iter_mut().for_each(|v| *v /= total);
        }
    }
    let mut d1 = vec![0.0; cells];
    d1[cell_of(env.config.initial_state)] = 1.0;
    Ok((TabularMdp::new(p, r, d1, env.gamma())?, mids))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mdp::ThresholdPolicy;
    use approx::assert_abs_diff_eq;

    #[test]
    fn adversarial_kernel_example() {
        let k = adversarial_uniform_kernel(UniformKernelSpec::new(0.0, 3.0).unwrap(), 2.0, Sign::Minus).unwrap();
        assert_eq!(k.tail(), (2.0, 3.0));
        assert_abs_diff_eq!(k.tail_weight(), 0.5);
        // 0.5·Unif[2,3] + 0.5·Unif[0,3]
        assert_abs_diff_eq!(k.density(1.0), 0.5 / 3.0, epsilon = 1e-15);
        assert_abs_diff_eq!(k.density(2.5), 0.5 + 0.5 / 3.0, epsilon = 1e-15);
        let plus = adversarial_uniform_kernel(UniformKernelSpec::new(0.0, 3.0).unwrap(), 2.0, Sign::Plus).unwrap();
        assert_eq!(plus.tail(), (0.0, 1.0));
    }

    #[test]
    fn unit_lambda_is_nominal() {
        let k = adversarial_uniform_kernel(UniformKernelSpec::new(1.0, 2.0).unwrap(), 1.0, Sign::Minus).unwrap();
        for s in [1.0, 1.3, 1.9, 2.0] {
            assert_abs_diff_eq!(k.density(s), 1.0, epsilon = 1e-15);
        }
    }

    #[test]
    fn density_integrates_and_ratio_is_bounded() {
        for lambda in [1.0, 2.0, 4.0, 8.0] {
            for sign in Sign::BOTH {
                let k = adversarial_uniform_kernel(UniformKernelSpec::new(0.38, 2.5).unwrap(), lambda, sign).unwrap();
                // Piecewise constant: integrate exactly on the two pieces.
                let (lo, hi) = k.tail();
                let tail_mass = k.density((lo + hi) / 2.0) * (hi - lo);
                let off = if sign == Sign::Minus { (0.38 + lo) / 2.0 } else { (hi + 2.5) / 2.0 };
                let off_mass = k.density(off) * (2.12 - (hi - lo));
                assert!((tail_mass + off_mass - 1.0).abs() <= 1e-10);
                // Riemann check on a fine grid as well.
                let m = 200_000;
                let h = 2.12 / m as f64;
                let riemann: f64 = (0..m).map(|i| k.density(0.38 + (i as f64 + 0.5) * h) * h).sum();
                assert!((riemann - 1.0).abs() < 1e-4);
                for i in 0..=1000 {
                    let s = 0.38 + 2.12 * i as f64 / 1000.0;
                    let ratio = k.density_ratio(s);
                    assert!(ratio >= 1.0 / lambda - 1e-12 && ratio <= lambda + 1e-12, "{ratio}");
                }
            }
        }
    }

    #[test]
    fn degenerate_interval_is_point_mass() {
        let k = adversarial_uniform_kernel(UniformKernelSpec::new(5.0, 5.0).unwrap(), 4.0, Sign::Minus).unwrap();
        let mut rng = stream_rng(0, 0);
        assert_eq!(k.sample(&mut rng), 5.0);
    }

    #[test]
    fn sampler_matches_tail_mass() {
        let k = adversarial_uniform_kernel(UniformKernelSpec::new(0.0, 3.0).unwrap(), 2.0, Sign::Minus).unwrap();
        let mut rng = stream_rng(1, 0);
        let n = 200_000;
        let hits = (0..n).filter(|_| k.sample(&mut rng) >= 2.0).count() as f64 / n as f64;
        // 0.5 + 0.5/3
        let p = 2.0 / 3.0;
        assert!((hits - p).abs() <= 3.0 * (p * (1.0 - p) / n as f64).sqrt());
    }

    #[test]
    fn mc_gamma_zero_is_first_reward() {
        let env = SyntheticEnv::new(crate::mdp::SyntheticEnvConfig {
            gamma: 0.0,
            ..Default::default()
        })
        .unwrap();
        let adv = AdversarialEnv::new(env, 4.0, Sign::Minus).unwrap();
        let mc = monte_carlo_robust_value(&adv, &ThresholdPolicy::target(), 0.0, 100, 5, 3).unwrap();
        assert_abs_diff_eq!(mc.value, 21.0 / 26.0, epsilon = 1e-15);
        assert!(mc.mc_std_error < 1e-15);
    }

    #[test]
    fn horizon_rule() {
        let h = horizon_for(0.95, 1e-4);
        assert!(h <= 260);
        assert!(0.95f64.powi(h as i32) / 0.05 <= 1e-4);
    }

    #[test]
    fn vi_matches_policy_evaluation_at_unit_lambda() {
        let mdp = TabularMdp::example();
        let pi = TabularMdp::example_target();
        let exact = tabular_policy_evaluation(&mdp, &pi).unwrap();
        let sol = tabular_robust_value_iteration(&mdp, &pi, 1.0, Sign::Minus, 1e-12).unwrap();
        for (a, b) in sol.q.iter().flatten().zip(exact.iter().flatten()) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-10);
        }
    }

    #[test]
    fn vi_fixed_point_certificate() {
        let mdp = TabularMdp::example();
        let pi = TabularMdp::example_target();
        for lambda in [2.0, 4.0] {
            for sign in Sign::BOTH {
                let tol = 1e-12;
                let sol = tabular_robust_value_iteration(&mdp, &pi, lambda, sign, tol).unwrap();
                let again = tabular_robust_backup(&mdp, &pi, &sol.q, lambda, sign).unwrap();
                for (a, b) in again.iter().flatten().zip(sol.q.iter().flatten()) {
                    assert!((a - b).abs() <= tol);
                }
                // The extreme kernel reproduces the robust fixed point.
                let q_u = tabular_kernel_evaluation(&mdp, &pi, &sol.kernel).unwrap();
                for (a, b) in q_u.iter().flatten().zip(sol.q.iter().flatten()) {
                    assert_abs_diff_eq!(a, b, epsilon = 1e-9);
                }
            }
        }
    }

    #[test]
    fn example_has_lowest_value_at_state_two() {
        let mdp = TabularMdp::example();
        let pi = TabularMdp::example_target();
        for lambda in [1.0, 2.0, 4.0, 8.0] {
            for sign in Sign::BOTH {
                let sol = tabular_robust_value_iteration(&mdp, &pi, lambda, sign, 1e-12).unwrap();
                assert!(sol.v[2] < sol.v[1] && sol.v[2] < sol.v[0]);
            }
        }
    }

    #[test]
    fn two_state_chain_extreme_lambda() {
        // From either state both next states are reachable; with huge Λ the
        // worst case sends (almost) all mass to the bad state 1.
        let p = vec![vec![vec![0.5, 0.5]], vec![vec![0.5, 0.5]]];
        let r = vec![vec![1.0], vec![0.0]];
        let mdp = TabularMdp::new(p, r, vec![1.0, 0.0], 0.9).unwrap();
        let pi = TabularPolicy::new(vec![vec![1.0], vec![1.0]]).unwrap();
        let sol = tabular_robust_value_iteration(&mdp, &pi, 1e6, Sign::Minus, 1e-12).unwrap();
        // Limit: V(1) = 0, V(0) = 1.
        assert!(sol.v[1].abs() < 1e-4, "{:?}", sol.v);
        assert!((sol.v[0] - 1.0).abs() < 1e-4, "{:?}", sol.v);
    }

    #[test]
    fn single_state_value_is_reward() {
        let mdp = TabularMdp::new(vec![vec![vec![1.0]]], vec![vec![0.7]], vec![1.0], 0.8).unwrap();
        let pi = TabularPolicy::new(vec![vec![1.0]]).unwrap();
        for lambda in [1.0, 3.0, 50.0] {
            let sol = tabular_robust_value_iteration(&mdp, &pi, lambda, Sign::Minus, 1e-13).unwrap();
            assert_abs_diff_eq!(sol.v_d1, 0.7, epsilon = 1e-11);
        }
    }

    #[test]
    fn flow_solution_certificates() {
        let mdp = TabularMdp::example();
        let pi = TabularMdp::example_target();
        let nu = state_action_law(&mdp, &[1.0 / 3.0; 3], &TabularMdp::example_behavior());
        for sign in Sign::BOTH {
            let f = tabular_robust_flow_solve(&mdp, &pi, 2.0, sign, &nu).unwrap();
            assert!(f.residual <= 1e-10);
            assert_abs_diff_eq!(f.d.iter().sum::<f64>(), 1.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn on_policy_stationary_ratio_is_one() {
        let mdp = TabularMdp::example();
        let pi = TabularMdp::example_target();
        let d = stationary_distribution(&mdp, &pi).unwrap();
        let nu = state_action_law(&mdp, &d, &pi);
        // Start from the stationary law so the discounted occupancy equals it.
        let mdp = TabularMdp::new(mdp.p.clone(), mdp.r.clone(), d.clone(), mdp.gamma).unwrap();
        let f = tabular_robust_flow_solve(&mdp, &pi, 1.0, Sign::Minus, &nu).unwrap();
        for (s, row) in f.w.iter().enumerate() {
            for (a, w) in row.iter().enumerate() {
                if nu[s][a] > 0.0 {
                    assert_abs_diff_eq!(*w, 1.0, epsilon = 1e-10);
                }
            }
        }
    }

    #[test]
    fn coverage_violation_is_reported() {
        let mdp = TabularMdp::example();
        let pi = TabularMdp::example_target();
        let mut nu = state_action_law(&mdp, &[1.0 / 3.0; 3], &TabularMdp::example_behavior());
        nu[1][1] = 0.0;
        assert!(matches!(
            tabular_robust_flow_solve(&mdp, &pi, 2.0, Sign::Minus, &nu),
            Err(Error::Coverage(_))
        ));
    }

    #[test]
    fn beta_fixed_point_at_true_quantile_is_robust_q() {
        let mdp = TabularMdp::example();
        let pi = TabularMdp::example_target();
        for sign in Sign::BOTH {
            let sol = tabular_robust_value_iteration(&mdp, &pi, 2.0, sign, 1e-13).unwrap();
            let qb = tabular_beta_fixed_point(&mdp, &pi, &sol.beta, 2.0, sign).unwrap();
            for (a, b) in qb.iter().flatten().zip(sol.q.iter().flatten()) {
                assert_abs_diff_eq!(a, b, epsilon = 1e-9);
            }
        }
    }

    #[test]
    fn discretized_benchmark_rows_are_distributions() {
        let (mdp, mids) = discretize_benchmark(&SyntheticEnv::default(), 50).unwrap();
        assert_eq!(mids.len(), 50);
        assert_eq!(mdp.d1.iter().position(|p| *p == 1.0), Some(20));
    }
}
