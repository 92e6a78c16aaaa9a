//! States, actions, policies, logged datasets and the synthetic control
//! benchmark.
//!
//! The benchmark is a continuing MDP on `S = [0, 5]` with two actions.
//! Rewards favour states near zero; action 1 pulls the state toward zero at a
//! small cost and action 0 lets it drift upward. Next states are uniform on an
//! action-dependent interval whose endpoints are clipped to the state bounds.

use std::fmt;
use std::io::{Read, Write};
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};
use smallvec::SmallVec;

use crate::error::{Error, Result};
use crate::rng::{stream_rng, streams};

/// A point in the (continuous) state space.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct State(pub SmallVec<[f64; 2]>);

impl State {
    pub fn scalar(x: f64) -> Self {
        State(SmallVec::from_slice(&[x]))
    }

    pub fn from_slice(xs: &[f64]) -> Self {
        State(SmallVec::from_slice(xs))
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    /// First coordinate; the benchmark and tabular substrates are one-dimensional.
    pub fn x(&self) -> f64 {
        self.0[0]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    /// Interpret the first coordinate as a tabular state index.
    pub fn index(&self) -> usize {
        self.0[0].round().max(0.0) as usize
    }
}

impl fmt::Display for State {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.0.len() == 1 {
            write!(f, "{}", self.0[0])
        } else {
            write!(f, "{:?}", self.0.as_slice())
        }
    }
}

/// Index into a finite action set.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Action(pub usize);

/// One logged transition `(s, a, r, s')`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TransitionTuple {
    pub s: State,
    pub a: Action,
    pub r: f64,
    pub s_next: State,
}

/// Logged transitions in sampling order.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub tuples: Vec<TransitionTuple>,
    pub seed: u64,
    pub provenance: String,
}

impl Dataset {
    pub fn new(tuples: Vec<TransitionTuple>, seed: u64, provenance: impl Into<String>) -> Self {
        Dataset {
            tuples,
            seed,
            provenance: provenance.into(),
        }
    }

    pub fn len(&self) -> usize {
        self.tuples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tuples.is_empty()
    }

    pub fn state_dim(&self) -> usize {
        self.tuples.first().map_or(1, |t| t.s.dim())
    }

    /// Copy of the tuples at `indices`, keeping seed and provenance.
    pub fn subset(&self, indices: impl IntoIterator<Item = usize>) -> Dataset {
        Dataset {
            tuples: indices.into_iter().map(|i| self.tuples[i].clone()).collect(),
            seed: self.seed,
            provenance: self.provenance.clone(),
        }
    }

    pub fn slice(&self, range: std::ops::Range<usize>) -> Dataset {
        self.subset(range)
    }

    /// Write as CSV with header `s,a,r,s_next` (one-dimensional states) or
    /// `s_0,..,a,r,s_next_0,..` for higher dimensions. Floats carry 17
    /// significant digits so the file round-trips exactly.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let dim = self.state_dim();
        let mut w = csv::Writer::from_writer(out);
        let mut header: Vec<String> = Vec::new();
        push_state_header(&mut header, "s", dim);
        header.push("a".into());
        header.push("r".into());
        push_state_header(&mut header, "s_next", dim);
        w.write_record(&header).map_err(csv_err)?;
        let mut row: Vec<String> = Vec::with_capacity(2 * dim + 2);
        for t in &self.tuples {
            if t.s.dim() != dim || t.s_next.dim() != dim {
                return Err(Error::InvalidArgument("mixed state dimensions in dataset".into()));
            }
            row.clear();
            row.extend(t.s.as_slice().iter().map(|x| fmt_float(*x)));
            row.push(t.a.0.to_string());
            row.push(fmt_float(t.r));
            row.extend(t.s_next.as_slice().iter().map(|x| fmt_float(*x)));
            w.write_record(&row).map_err(csv_err)?;
        }
        w.flush().map_err(|e| Error::io("<csv>", e))?;
        Ok(())
    }

    pub fn read_csv<R: Read>(input: R, seed: u64, provenance: &str, origin: &str) -> Result<Dataset> {
        let fmt_err = |msg: String| Error::Format {
            path: origin.to_string(),
            msg,
        };
        let mut rdr = csv::Reader::from_reader(input);
        let header = rdr.headers().map_err(|e| fmt_err(e.to_string()))?.clone();
        let cols = header.len();
        if cols < 4 || cols % 2 != 0 {
            return Err(fmt_err(format!("unexpected column count {cols}")));
        }
        let dim = (cols - 2) / 2;
        let mut expected = Vec::new();
        push_state_header(&mut expected, "s", dim);
        expected.push("a".into());
        expected.push("r".into());
        push_state_header(&mut expected, "s_next", dim);
        if header.iter().ne(expected.iter().map(String::as_str)) {
            return Err(fmt_err(format!("bad header {:?}", header)));
        }
        let mut tuples = Vec::new();
        for (line, rec) in rdr.records().enumerate() {
            let rec = rec.map_err(|e| fmt_err(e.to_string()))?;
            let row = line + 2;
            let num = |i: usize| -> Result<f64> {
                let v: f64 = rec[i]
                    .trim()
                    .parse()
                    .map_err(|_| fmt_err(format!("row {row}: cannot parse {:?}", &rec[i])))?;
                if !v.is_finite() {
                    return Err(fmt_err(format!("row {row}: non-finite value")));
                }
                Ok(v)
            };
            let s: Vec<f64> = (0..dim).map(num).collect::<Result<_>>()?;
            let a: usize = rec[dim]
                .trim()
                .parse()
                .map_err(|_| fmt_err(format!("row {row}: action {:?} is not an integer", &rec[dim])))?;
            let r = num(dim + 1)?;
            if !(0.0..=1.0).contains(&r) {
                return Err(fmt_err(format!("row {row}: reward {r} outside [0, 1]")));
            }
            let s_next: Vec<f64> = (dim + 2..2 * dim + 2).map(num).collect::<Result<_>>()?;
            tuples.push(TransitionTuple {
                s: State::from_slice(&s),
                a: Action(a),
                r,
                s_next: State::from_slice(&s_next),
            });
        }
        Ok(Dataset::new(tuples, seed, provenance))
    }

    pub fn save_csv(&self, path: &Path) -> Result<()> {
        let f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        self.write_csv(std::io::BufWriter::new(f))
    }

    pub fn load_csv(path: &Path, seed: u64, provenance: &str) -> Result<Dataset> {
        let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        Dataset::read_csv(std::io::BufReader::new(f), seed, provenance, &path.display().to_string())
    }
}

fn push_state_header(out: &mut Vec<String>, name: &str, dim: usize) {
    if dim == 1 {
        out.push(name.to_string());
    } else {
        out.extend((0..dim).map(|i| format!("{name}_{i}")));
    }
}

fn fmt_float(x: f64) -> String {
    format!("{x:.16e}")
}

fn csv_err(e: csv::Error) -> Error {
    Error::Format {
        path: "<csv>".into(),
        msg: e.to_string(),
    }
}

/// A stationary Markov policy over a finite action set.
pub trait Policy: Send + Sync {
    fn n_actions(&self) -> usize;

    /// Write `pi(.|s)` into `out` (length `n_actions`).
    fn probs_into(&self, s: &State, out: &mut [f64]);

    fn action_probs(&self, s: &State) -> Vec<f64> {
        let mut out = vec![0.0; self.n_actions()];
        self.probs_into(s, &mut out);
        out
    }

    fn prob(&self, s: &State, a: Action) -> f64 {
        let mut buf: SmallVec<[f64; 4]> = SmallVec::from_elem(0.0, self.n_actions());
        self.probs_into(s, &mut buf);
        buf[a.0]
    }

    fn sample<R: Rng + ?Sized>(&self, s: &State, rng: &mut R) -> Action
    where
        Self: Sized,
    {
        let mut buf: SmallVec<[f64; 4]> = SmallVec::from_elem(0.0, self.n_actions());
        self.probs_into(s, &mut buf);
        sample_index(&buf, rng)
    }

    fn describe(&self) -> String {
        "policy".to_string()
    }
}

pub(crate) fn sample_index<R: Rng + ?Sized>(probs: &[f64], rng: &mut R) -> Action {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return Action(i);
        }
    }
    // Round-off: fall back to the last action with positive mass.
    Action(probs.iter().rposition(|p| *p > 0.0).unwrap_or(0))
}

/// Two-action threshold rule on the first state coordinate: action 1 with
/// probability `smoothing` when `s >= threshold`, action 0 with probability
/// `smoothing` otherwise.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ThresholdPolicy {
    pub threshold: f64,
    pub smoothing: f64,
}

/// Build a [`ThresholdPolicy`], checking `threshold in [0, 5]` and
/// `smoothing in [0.5, 1]`.
pub fn threshold_policy(threshold: f64, smoothing: f64) -> Result<ThresholdPolicy> {
    if !(0.0..=5.0).contains(&threshold) {
        return Err(Error::InvalidArgument(format!("threshold {threshold} outside [0, 5]")));
    }
    if !(0.5..=1.0).contains(&smoothing) {
        return Err(Error::InvalidArgument(format!("smoothing {smoothing} outside [0.5, 1]")));
    }
    Ok(ThresholdPolicy { threshold, smoothing })
}

impl ThresholdPolicy {
    /// The benchmark target policy: action 1 iff `s >= 2`.
    pub fn target() -> Self {
        ThresholdPolicy {
            threshold: 2.0,
            smoothing: 1.0,
        }
    }

    /// The benchmark logging policy.
    pub fn logging() -> Self {
        ThresholdPolicy {
            threshold: 1.5,
            smoothing: 0.95,
        }
    }
}

impl Policy for ThresholdPolicy {
    fn n_actions(&self) -> usize {
        2
    }

    fn probs_into(&self, s: &State, out: &mut [f64]) {
        let p1 = if s.x() >= self.threshold {
            self.smoothing
        } else {
            1.0 - self.smoothing
        };
        out[0] = 1.0 - p1;
        out[1] = p1;
    }

    fn sample<R: Rng + ?Sized>(&self, s: &State, rng: &mut R) -> Action {
        let p1 = if s.x() >= self.threshold {
            self.smoothing
        } else {
            1.0 - self.smoothing
        };
        if p1 >= 1.0 {
            Action(1)
        } else if p1 <= 0.0 {
            Action(0)
        } else if rng.random::<f64>() < p1 {
            Action(1)
        } else {
            Action(0)
        }
    }

    fn describe(&self) -> String {
        format!("threshold(threshold={}, smoothing={})", self.threshold, self.smoothing)
    }
}

/// Policy over an enumerable state space, indexed by [`State::index`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TabularPolicy {
    pub probs: Vec<Vec<f64>>,
}

impl TabularPolicy {
    pub fn new(probs: Vec<Vec<f64>>) -> Result<Self> {
        let n_actions = probs.first().map_or(0, Vec::len);
        if n_actions == 0 {
            return Err(Error::InvalidArgument("empty tabular policy".into()));
        }
        for (s, row) in probs.iter().enumerate() {
            if row.len() != n_actions {
                return Err(Error::InvalidArgument(format!("state {s}: ragged action row")));
            }
            let total: f64 = row.iter().sum();
            if row.iter().any(|p| !(*p >= 0.0)) || (total - 1.0).abs() > 1e-12 {
                return Err(Error::InvalidArgument(format!("state {s}: not a distribution")));
            }
        }
        Ok(TabularPolicy { probs })
    }

    pub fn n_states(&self) -> usize {
        self.probs.len()
    }

    pub fn p(&self, s: usize, a: usize) -> f64 {
        self.probs[s][a]
    }
}

impl Policy for TabularPolicy {
    fn n_actions(&self) -> usize {
        self.probs[0].len()
    }

    fn probs_into(&self, s: &State, out: &mut [f64]) {
        out.copy_from_slice(&self.probs[s.index()]);
    }

    fn describe(&self) -> String {
        format!("tabular({} states)", self.probs.len())
    }
}

/// A simulator that can be rolled forward one step at a time.
pub trait Environment: Send + Sync {
    fn n_actions(&self) -> usize;

    fn initial_state<R: Rng + ?Sized>(&self, rng: &mut R) -> State;

    /// Sample `s'` and return it with the reward `r(s, a)`.
    fn step<R: Rng + ?Sized>(&self, s: &State, a: Action, rng: &mut R) -> Result<(State, f64)>;

    fn describe(&self) -> String {
        "environment".to_string()
    }
}

/// Next-state interval `[lo_slope*s + lo_offset, hi_slope*s + hi_offset]`
/// before clipping to the state bounds.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct IntervalRule {
    pub lo_slope: f64,
    pub lo_offset: f64,
    pub hi_slope: f64,
    pub hi_offset: f64,
}

impl IntervalRule {
    pub fn interval(&self, s: f64) -> (f64, f64) {
        (self.lo_slope * s + self.lo_offset, self.hi_slope * s + self.hi_offset)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticEnvConfig {
    pub state_bounds: (f64, f64),
    /// Reward is `(reward_scale - s^2 - action_cost * 1{a = 1}) / reward_scale`.
    pub reward_scale: f64,
    pub action_cost: f64,
    /// One rule per action.
    pub transitions: Vec<IntervalRule>,
    pub initial_state: f64,
    pub gamma: f64,
}

impl Default for SyntheticEnvConfig {
    fn default() -> Self {
        SyntheticEnvConfig {
            state_bounds: (0.0, 5.0),
            reward_scale: 26.0,
            action_cost: 1.0,
            transitions: vec![
                IntervalRule {
                    lo_slope: 1.0,
                    lo_offset: -0.2,
                    hi_slope: 1.0,
                    hi_offset: 1.0,
                },
                IntervalRule {
                    lo_slope: 0.2,
                    lo_offset: -0.02,
                    hi_slope: 1.0,
                    hi_offset: 0.5,
                },
            ],
            initial_state: 2.0,
            gamma: 0.95,
        }
    }
}

impl SyntheticEnvConfig {
    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.state_bounds;
        if !(lo < hi) {
            return Err(Error::InvalidArgument("empty state bounds".into()));
        }
        if !(0.0..1.0).contains(&self.gamma) {
            return Err(Error::InvalidArgument(format!("gamma {} outside [0, 1)", self.gamma)));
        }
        if self.transitions.is_empty() {
            return Err(Error::InvalidArgument("no transition rules".into()));
        }
        if !(lo..=hi).contains(&self.initial_state) {
            return Err(Error::InvalidArgument("initial state outside bounds".into()));
        }
        // Interval endpoints are affine in s, so nonemptiness at both bounds
        // implies nonemptiness everywhere.
        for (a, rule) in self.transitions.iter().enumerate() {
            for s in [lo, hi] {
                let (x, y) = rule.interval(s);
                if x.max(lo) > y.min(hi) {
                    return Err(Error::InvalidArgument(format!(
                        "action {a}: clipped transition interval empty at s = {s}"
                    )));
                }
            }
        }
        Ok(())
    }
}

/// The one-dimensional control benchmark.
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticEnv {
    pub config: SyntheticEnvConfig,
}

impl Default for SyntheticEnv {
    fn default() -> Self {
        SyntheticEnv {
            config: SyntheticEnvConfig::default(),
        }
    }
}

impl SyntheticEnv {
    pub fn new(config: SyntheticEnvConfig) -> Result<Self> {
        config.validate()?;
        Ok(SyntheticEnv { config })
    }

    pub fn gamma(&self) -> f64 {
        self.config.gamma
    }

    fn check_state(&self, s: f64) -> Result<()> {
        let (lo, hi) = self.config.state_bounds;
        if !(lo..=hi).contains(&s) {
            return Err(Error::Domain(format!("state {s} outside [{lo}, {hi}]")));
        }
        Ok(())
    }

    fn check_action(&self, a: Action) -> Result<()> {
        if a.0 >= self.config.transitions.len() {
            return Err(Error::Domain(format!("action {} out of range", a.0)));
        }
        Ok(())
    }

    pub fn reward(&self, s: f64, a: Action) -> Result<f64> {
        self.check_state(s)?;
        self.check_action(a)?;
        let c = self.config.reward_scale;
        let cost = if a.0 == 1 { self.config.action_cost } else { 0.0 };
        Ok((c - s * s - cost) / c)
    }

    /// Clipped nominal next-state interval `[x, y]` at `(s, a)`.
    pub fn transition_interval(&self, s: f64, a: Action) -> Result<(f64, f64)> {
        self.check_state(s)?;
        self.check_action(a)?;
        let (lo, hi) = self.config.state_bounds;
        let (x, y) = self.config.transitions[a.0].interval(s);
        Ok((x.max(lo), y.min(hi)))
    }
}

/// `r(s, a) = (26 - s^2 - 1{a = 1}) / 26` for the default benchmark.
pub fn synthetic_reward(s: &State, a: Action) -> Result<f64> {
    SyntheticEnv::default().reward(s.x(), a)
}

/// One step of the default benchmark from `(s, a)`.
pub fn synthetic_step<R: Rng + ?Sized>(s: &State, a: Action, rng: &mut R) -> Result<(State, f64)> {
    SyntheticEnv::default().step(s, a, rng)
}

pub(crate) fn uniform_between<R: Rng + ?Sized>(x: f64, y: f64, rng: &mut R) -> f64 {
    if y <= x {
        x
    } else {
        x + (y - x) * rng.random::<f64>()
    }
}

impl Environment for SyntheticEnv {
    fn n_actions(&self) -> usize {
        self.config.transitions.len()
    }

    fn initial_state<R: Rng + ?Sized>(&self, _rng: &mut R) -> State {
        State::scalar(self.config.initial_state)
    }

    fn step<R: Rng + ?Sized>(&self, s: &State, a: Action, rng: &mut R) -> Result<(State, f64)> {
        let r = self.reward(s.x(), a)?;
        let (x, y) = self.transition_interval(s.x(), a)?;
        Ok((State::scalar(uniform_between(x, y, rng)), r))
    }

    fn describe(&self) -> String {
        "synthetic-control".to_string()
    }
}

/// Roll out `policy` in `env`, discard `burn_in` steps, then record one tuple
/// every `thin` steps until `n` tuples are collected.
pub fn rollout_dataset<E: Environment, P: Policy>(
    env: &E,
    policy: &P,
    n: usize,
    burn_in: usize,
    thin: usize,
    seed: u64,
) -> Result<Dataset> {
    if n == 0 {
        return Err(Error::InvalidArgument("n must be at least 1".into()));
    }
    if thin == 0 {
        return Err(Error::InvalidArgument("thin must be at least 1".into()));
    }
    let mut rng = stream_rng(seed, streams::DATASET);
    let mut s = env.initial_state(&mut rng);
    let mut tuples = Vec::with_capacity(n);
    let mut t = 0usize;
    while tuples.len() < n {
        let a = policy.sample(&s, &mut rng);
        let (s_next, r) = env.step(&s, a, &mut rng)?;
        if t >= burn_in && (t - burn_in) % thin == 0 {
            tuples.push(TransitionTuple {
                s: s.clone(),
                a,
                r,
                s_next: s_next.clone(),
            });
        }
        s = s_next;
        t += 1;
    }
    let provenance = format!(
        "rollout env={} policy={} burn_in={burn_in} thin={thin}",
        env.describe(),
        policy.describe()
    );
    Ok(Dataset::new(tuples, seed, provenance))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream_rng;

    #[test]
    fn reward_examples() {
        let r = synthetic_reward(&State::scalar(2.0), Action(1)).unwrap();
        assert!((r - 21.0 / 26.0).abs() < 1e-15);
        assert_eq!(synthetic_reward(&State::scalar(0.0), Action(0)).unwrap(), 1.0);
        assert_eq!(synthetic_reward(&State::scalar(5.0), Action(1)).unwrap(), 0.0);
        assert!(matches!(
            synthetic_reward(&State::scalar(5.5), Action(0)),
            Err(Error::Domain(_))
        ));
        assert!(synthetic_reward(&State::scalar(1.0), Action(2)).is_err());
    }

    #[test]
    fn step_intervals_clip() {
        let env = SyntheticEnv::default();
        assert_eq!(env.transition_interval(0.0, Action(0)).unwrap(), (0.0, 1.0));
        let (x, y) = env.transition_interval(5.0, Action(0)).unwrap();
        assert!((x - 4.8).abs() < 1e-12 && y == 5.0);
        let (x, y) = env.transition_interval(2.0, Action(1)).unwrap();
        assert!((x - 0.38).abs() < 1e-12 && (y - 2.5).abs() < 1e-12);

        let mut rng = stream_rng(1, 0);
        for _ in 0..1000 {
            let (s, _) = synthetic_step(&State::scalar(0.0), Action(0), &mut rng).unwrap();
            assert!((0.0..=1.0).contains(&s.x()));
            let (s, _) = synthetic_step(&State::scalar(5.0), Action(0), &mut rng).unwrap();
            assert!((4.8..=5.0).contains(&s.x()));
        }
    }

    #[test]
    fn step_mean_matches_uniform_mean() {
        // Unif[0.38, 2.5]: mean 1.44, sd (2.12)/sqrt(12).
        let n = 1_000_000;
        let mut rng = stream_rng(3, 0);
        let s = State::scalar(2.0);
        let mut total = 0.0;
        for _ in 0..n {
            total += synthetic_step(&s, Action(1), &mut rng).unwrap().0.x();
        }
        let mean = total / n as f64;
        let se = (2.12 / 12f64.sqrt()) / (n as f64).sqrt();
        assert!((mean - 1.44).abs() <= 3.0 * se, "mean {mean}");
    }

    #[test]
    fn threshold_policy_examples() {
        let target = threshold_policy(2.0, 1.0).unwrap();
        assert_eq!(target.action_probs(&State::scalar(2.0)), vec![0.0, 1.0]);
        assert_eq!(target.action_probs(&State::scalar(1.99)), vec![1.0, 0.0]);
        let logging = threshold_policy(1.5, 0.95).unwrap();
        let p = logging.action_probs(&State::scalar(1.0));
        assert!((p[0] - 0.95).abs() < 1e-15 && (p[1] - 0.05).abs() < 1e-15);
        assert!(threshold_policy(6.0, 1.0).is_err());
        assert!(threshold_policy(2.0, 0.4).is_err());
    }

    #[test]
    fn threshold_policy_sampling_frequencies() {
        let logging = ThresholdPolicy::logging();
        let mut rng = stream_rng(11, 0);
        let n = 100_000;
        for (x, p1) in [(1.0, 0.05), (3.0, 0.95)] {
            let s = State::scalar(x);
            let ones = (0..n).filter(|_| logging.sample(&s, &mut rng) == Action(1)).count();
            let se = (p1 * (1.0 - p1) / n as f64).sqrt();
            assert!((ones as f64 / n as f64 - p1).abs() <= 3.0 * se);
        }
    }

    #[test]
    fn rollout_shapes_and_determinism() {
        let env = SyntheticEnv::default();
        let logging = ThresholdPolicy::logging();
        let one = rollout_dataset(&env, &logging, 1, 0, 1, 5).unwrap();
        assert_eq!(one.len(), 1);
        assert_eq!(one.tuples[0].s.x(), 2.0);

        let a = rollout_dataset(&env, &logging, 500, 100, 10, 9).unwrap();
        let b = rollout_dataset(&env, &logging, 500, 100, 10, 9).unwrap();
        assert_eq!(a, b);
        let mut buf_a = Vec::new();
        let mut buf_b = Vec::new();
        a.write_csv(&mut buf_a).unwrap();
        b.write_csv(&mut buf_b).unwrap();
        assert_eq!(buf_a, buf_b);
        for t in &a.tuples {
            assert!((0.0..=5.0).contains(&t.s_next.x()));
            assert!((0.0..=1.0).contains(&t.r));
        }
        assert!(rollout_dataset(&env, &logging, 0, 0, 1, 1).is_err());
        assert!(rollout_dataset(&env, &logging, 1, 0, 0, 1).is_err());
    }

    #[test]
    fn thinning_links_consecutive_records() {
        // With thin = 1 each recorded s is the previous recorded s'.
        let env = SyntheticEnv::default();
        let d = rollout_dataset(&env, &ThresholdPolicy::logging(), 50, 3, 1, 2).unwrap();
        for w in d.tuples.windows(2) {
            assert_eq!(w[0].s_next, w[1].s);
        }
    }

    #[test]
    fn csv_round_trip_and_reward_check() {
        let env = SyntheticEnv::default();
        let d = rollout_dataset(&env, &ThresholdPolicy::logging(), 40, 0, 1, 4).unwrap();
        let mut buf = Vec::new();
        d.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("s,a,r,s_next\n"));
        let back = Dataset::read_csv(&buf[..], d.seed, &d.provenance, "mem").unwrap();
        assert_eq!(back, d);

        let bad = "s,a,r,s_next\n1.0,0,1.5,2.0\n";
        assert!(matches!(
            Dataset::read_csv(bad.as_bytes(), 0, "", "mem"),
            Err(Error::Format { .. })
        ));
        let bad_header = "x,a,r,s_next\n1.0,0,0.5,2.0\n";
        assert!(Dataset::read_csv(bad_header.as_bytes(), 0, "", "mem").is_err());
    }
}
