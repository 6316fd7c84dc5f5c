//! The 2-D grid environment: state space, actions, the 9-mode indicator
//! reward, and the state-hiding masks used to measure generalization.
//!
//! States are pairs `(a, b)` with `0 <= a, b <= N-1`, indexed `b * N + a` so
//! that ascending state index matches the fixed action order (increment `a`,
//! increment `b`, terminate). The sink takes index `N * N`. Every grid state
//! is terminal.

use std::sync::atomic::{AtomicU64, Ordering};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::graph::{PointedDag, StateId};

/// Additive floor of the indicator-sum reward.
pub const BASE_REWARD: f64 = 1e-3;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum GridError {
    #[error("grid side must be at least 2, got {0}")]
    SideTooSmall(usize),
    #[error("mode region {0:?} is empty or outside the grid")]
    BadModeRegion(ModeRegion),
    #[error("default mode lattice needs N >= 8, got {0}")]
    ModesCollide(usize),
    #[error("state ({0}, {1}) is outside the grid")]
    OutOfBounds(usize, usize),
    #[error("cannot hide {requested} states, only {available} candidates")]
    MaskTooLarge { requested: usize, available: usize },
    #[error("maximum trajectory length {0} exceeds 2(N-1)")]
    LengthTooLarge(usize),
}

/// An axis-aligned rectangle of boosted reward, bounds inclusive.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ModeRegion {
    pub a_lo: usize,
    pub a_hi: usize,
    pub b_lo: usize,
    pub b_hi: usize,
}

impl ModeRegion {
    pub fn contains(&self, a: usize, b: usize) -> bool {
        (self.a_lo..=self.a_hi).contains(&a) && (self.b_lo..=self.b_hi).contains(&b)
    }
}

/// Side length plus mode regions; the full description of one environment.
#[derive(Debug, Clone)]
pub struct GridSpec {
    n: usize,
    modes: Vec<ModeRegion>,
}

impl GridSpec {
    pub fn new(n: usize, modes: Vec<ModeRegion>) -> Result<Self, GridError> {
        if n < 2 {
            return Err(GridError::SideTooSmall(n));
        }
        for m in &modes {
            if m.a_lo > m.a_hi || m.b_lo > m.b_hi || m.a_hi >= n || m.b_hi >= n {
                return Err(GridError::BadModeRegion(*m));
            }
        }
        Ok(Self { n, modes })
    }

    /// A grid without mode regions (uniform base reward).
    pub fn plain(n: usize) -> Result<Self, GridError> {
        Self::new(n, Vec::new())
    }

    /// The nine-mode default lattice for side `n >= 8`.
    pub fn with_default_modes(n: usize) -> Result<Self, GridError> {
        Self::new(n, default_nine_modes(n)?)
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn modes(&self) -> &[ModeRegion] {
        &self.modes
    }

    pub fn state_count(&self) -> usize {
        self.n * self.n
    }

    pub fn idx(&self, a: usize, b: usize) -> StateId {
        debug_assert!(a < self.n && b < self.n);
        (b * self.n + a) as StateId
    }

    pub fn coords(&self, s: StateId) -> (usize, usize) {
        let s = s as usize;
        debug_assert!(s < self.state_count());
        (s % self.n, s / self.n)
    }

    pub fn sink_id(&self) -> StateId {
        self.state_count() as StateId
    }

    /// Longest possible interior trajectory: 2(N-1) increments.
    pub fn max_path_len(&self) -> usize {
        2 * (self.n - 1)
    }
}

/// Nine disjoint squares of side `ceil(N/8)` on a 3x3 lattice; the square for
/// lattice cell `(i, j)` has its lower corner at `(floor((1+3i)N/8), floor((1+3j)N/8))`.
pub fn default_nine_modes(n: usize) -> Result<Vec<ModeRegion>, GridError> {
    if n < 8 {
        return Err(GridError::ModesCollide(n));
    }
    let side = n.div_ceil(8);
    let corner = |i: usize| (1 + 3 * i) * n / 8;
    let mut out = Vec::with_capacity(9);
    for i in 0..3 {
        for j in 0..3 {
            let a_lo = corner(i).min(n - 1);
            let b_lo = corner(j).min(n - 1);
            out.push(ModeRegion {
                a_lo,
                a_hi: (a_lo + side - 1).min(n - 1),
                b_lo,
                b_hi: (b_lo + side - 1).min(n - 1),
            });
        }
    }
    Ok(out)
}

/// The pointed DAG of the grid: `N*N` grid states plus a sink, with increment
/// edges where in-bounds and a terminate edge from every grid state.
pub fn build_grid(spec: &GridSpec) -> PointedDag {
    let n = spec.n;
    let sink = spec.sink_id();
    let mut edges = Vec::with_capacity(3 * spec.state_count());
    for b in 0..n {
        for a in 0..n {
            let s = spec.idx(a, b);
            if a + 1 < n {
                edges.push((s, spec.idx(a + 1, b)));
            }
            if b + 1 < n {
                edges.push((s, spec.idx(a, b + 1)));
            }
            edges.push((s, sink));
        }
    }
    PointedDag::new(spec.state_count() + 1, &edges).expect("grid construction is a pointed DAG")
}

/// Base reward plus the count of mode regions containing the state.
pub fn reward(spec: &GridSpec, a: usize, b: usize) -> Result<f64, GridError> {
    if a >= spec.n || b >= spec.n {
        return Err(GridError::OutOfBounds(a, b));
    }
    let hits = spec.modes.iter().filter(|m| m.contains(a, b)).count();
    Ok(BASE_REWARD + hits as f64)
}

/// Rewards over terminal states with their normalizing sum.
#[derive(Debug, Clone)]
pub struct RewardTable {
    n_states: usize,
    terminal: Vec<StateId>,
    value_by_state: Vec<f64>,
    z: f64,
}

impl RewardTable {
    /// Tabulates the grid reward over all `N*N` terminal states.
    pub fn from_grid(spec: &GridSpec) -> Self {
        let mut value_by_state = vec![f64::NAN; spec.state_count() + 1];
        let mut terminal = Vec::with_capacity(spec.state_count());
        let mut z = 0.0;
        for s in 0..spec.state_count() as StateId {
            let (a, b) = spec.coords(s);
            let r = reward(spec, a, b).expect("in-bounds by construction");
            value_by_state[s as usize] = r;
            terminal.push(s);
            z += r;
        }
        Self {
            n_states: spec.state_count() + 1,
            terminal,
            value_by_state,
            z,
        }
    }

    /// Explicit values for the terminal states of an arbitrary DAG. Values
    /// must be aligned with `dag.terminal_states()` and strictly positive.
    pub fn from_values(dag: &PointedDag, values: &[f64]) -> Result<Self, RewardError> {
        let terminal = dag.terminal_states();
        if values.len() != terminal.len() {
            return Err(RewardError::WrongCount {
                expected: terminal.len(),
                got: values.len(),
            });
        }
        let mut value_by_state = vec![f64::NAN; dag.n_states()];
        let mut z = 0.0;
        for (&s, &v) in terminal.iter().zip(values) {
            if !(v.is_finite() && v > 0.0) {
                return Err(RewardError::NonPositive { state: s, value: v });
            }
            value_by_state[s as usize] = v;
            z += v;
        }
        Ok(Self {
            n_states: dag.n_states(),
            terminal,
            value_by_state,
            z,
        })
    }

    pub fn n_states(&self) -> usize {
        self.n_states
    }

    /// Terminal states in ascending order, aligned with [`Self::values`].
    pub fn terminal_states(&self) -> &[StateId] {
        &self.terminal
    }

    pub fn values(&self) -> impl Iterator<Item = f64> + '_ {
        self.terminal.iter().map(|&s| self.value_by_state[s as usize])
    }

    pub fn value(&self, s: StateId) -> f64 {
        let v = self.value_by_state[s as usize];
        debug_assert!(v.is_finite(), "reward queried at non-terminal state {s}");
        v
    }

    pub fn z(&self) -> f64 {
        self.z
    }

    /// A copy with `delta` shifted from `from` to... onto `to`, keeping the sum.
    /// Returns `None` if either endpoint would become non-positive.
    pub fn shifted(&self, from: StateId, to: StateId, delta: f64) -> Option<Self> {
        let mut out = self.clone();
        out.value_by_state[from as usize] -= delta;
        out.value_by_state[to as usize] += delta;
        if out.value_by_state[from as usize] <= 0.0 || out.value_by_state[to as usize] <= 0.0 {
            return None;
        }
        Some(out)
    }

    /// Recomputed sum, for the `Z` consistency invariant.
    pub fn recompute_z(&self) -> f64 {
        self.values().sum()
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum RewardError {
    #[error("expected {expected} terminal rewards, got {got}")]
    WrongCount { expected: usize, got: usize },
    #[error("reward at state {state} must be positive and finite, got {value}")]
    NonPositive { state: StateId, value: f64 },
}

/// Per-state counters for every reward read made by a training objective.
/// Evaluation reads (JSD against the normalized reward) bypass the log.
#[derive(Debug)]
pub struct AccessLog {
    counts: Vec<AtomicU64>,
}

impl AccessLog {
    pub fn new(n_states: usize) -> Self {
        Self {
            counts: (0..n_states).map(|_| AtomicU64::new(0)).collect(),
        }
    }

    fn record(&self, s: StateId) {
        self.counts[s as usize].fetch_add(1, Ordering::Relaxed);
    }

    pub fn count(&self, s: StateId) -> u64 {
        self.counts[s as usize].load(Ordering::Relaxed)
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().map(|c| c.load(Ordering::Relaxed)).sum()
    }

    /// Total reads that touched states hidden by `mask`.
    pub fn hidden_reads(&self, mask: &HidingMask) -> u64 {
        mask.iter_hidden().map(|s| self.count(s)).sum()
    }
}

/// A reward handle that records every read in an optional [`AccessLog`].
#[derive(Clone, Copy)]
pub struct TrackedReward<'a> {
    table: &'a RewardTable,
    log: Option<&'a AccessLog>,
}

impl<'a> TrackedReward<'a> {
    pub fn new(table: &'a RewardTable, log: Option<&'a AccessLog>) -> Self {
        Self { table, log }
    }

    pub fn untracked(table: &'a RewardTable) -> Self {
        Self { table, log: None }
    }

    pub fn value(&self, s: StateId) -> f64 {
        if let Some(log) = self.log {
            log.record(s);
        }
        self.table.value(s)
    }

    pub fn ln(&self, s: StateId) -> f64 {
        self.value(s).ln()
    }

    pub fn z(&self) -> f64 {
        self.table.z()
    }
}

/// How a mask affects training.
///
/// `SkipTrajectory` rejects any TB update whose trajectory contains a hidden
/// state; `ForbidTerminate` removes the terminate action at hidden states
/// during sampling and rejects TB updates that terminate at one. Either way,
/// DB/FL-DB omit exactly the loss terms whose reward query touches a hidden
/// state, and hidden states stay traversable as intermediates.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MaskMode {
    SkipTrajectory,
    ForbidTerminate,
}

/// A set of grid states whose rewards are withheld from training.
#[derive(Debug, Clone)]
pub struct HidingMask {
    hidden: Vec<bool>,
    pub mode: MaskMode,
}

impl HidingMask {
    pub fn empty(spec: &GridSpec, mode: MaskMode) -> Self {
        Self {
            hidden: vec![false; spec.state_count()],
            mode,
        }
    }

    /// Uniform sample of `count` distinct states, never including the source
    /// `(0,0)`; reproducible from `seed`. With `avoid_modes`, mode-region
    /// states are excluded from the candidate pool as well.
    pub fn random(
        spec: &GridSpec,
        count: usize,
        seed: u64,
        mode: MaskMode,
        avoid_modes: bool,
    ) -> Result<Self, GridError> {
        let candidates: Vec<StateId> = (1..spec.state_count() as StateId)
            .filter(|&s| {
                if !avoid_modes {
                    return true;
                }
                let (a, b) = spec.coords(s);
                !spec.modes.iter().any(|m| m.contains(a, b))
            })
            .collect();
        if count >= spec.state_count() || count > candidates.len() {
            return Err(GridError::MaskTooLarge {
                requested: count,
                available: candidates.len(),
            });
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let picks = rand::seq::index::sample(&mut rng, candidates.len(), count);
        let mut hidden = vec![false; spec.state_count()];
        for i in picks.iter() {
            hidden[candidates[i] as usize] = true;
        }
        Ok(Self { hidden, mode })
    }

    /// Hides every state `(a, b)` with `a + b > max_len`.
    pub fn by_length(spec: &GridSpec, max_len: usize, mode: MaskMode) -> Result<Self, GridError> {
        if max_len > spec.max_path_len() {
            return Err(GridError::LengthTooLarge(max_len));
        }
        let hidden = (0..spec.state_count() as StateId)
            .map(|s| {
                let (a, b) = spec.coords(s);
                a + b > max_len
            })
            .collect();
        Ok(Self { hidden, mode })
    }

    /// Explicit hidden set; panics if it contains the source.
    pub fn from_states(spec: &GridSpec, states: &[StateId], mode: MaskMode) -> Self {
        let mut hidden = vec![false; spec.state_count()];
        for &s in states {
            assert!(s != spec.idx(0, 0), "the source cannot be hidden");
            hidden[s as usize] = true;
        }
        Self { hidden, mode }
    }

    pub fn is_hidden(&self, s: StateId) -> bool {
        (s as usize) < self.hidden.len() && self.hidden[s as usize]
    }

    pub fn hidden_count(&self) -> usize {
        self.hidden.iter().filter(|&&h| h).count()
    }

    pub fn iter_hidden(&self) -> impl Iterator<Item = StateId> + '_ {
        self.hidden
            .iter()
            .enumerate()
            .filter(|(_, &h)| h)
            .map(|(s, _)| s as StateId)
    }
}
