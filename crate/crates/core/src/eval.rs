//! Exact computation of the learned terminal distribution by dynamic
//! programming over the topological order, and divergence metrics against the
//! normalized reward. No sampling anywhere: every number here is exact up to
//! floating point.

use thiserror::Error;

use crate::graph::{PointedDag, StateId};
use crate::hypergrid::RewardTable;
use crate::policy::ForwardPolicy;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum EvalError {
    #[error("distributions have mismatched supports")]
    MismatchedSupport,
}

/// Probability of terminating at each terminal state, aligned with
/// `dag.terminal_states()` (ascending index).
#[derive(Debug, Clone)]
pub struct TerminalDistribution {
    states: Vec<StateId>,
    probs: Vec<f64>,
}

impl TerminalDistribution {
    pub fn new(states: Vec<StateId>, probs: Vec<f64>) -> Self {
        debug_assert_eq!(states.len(), probs.len());
        Self { states, probs }
    }

    pub fn states(&self) -> &[StateId] {
        &self.states
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn prob_of(&self, s: StateId) -> Option<f64> {
        self.states
            .binary_search(&s)
            .ok()
            .map(|i| self.probs[i])
    }

    pub fn total(&self) -> f64 {
        self.probs.iter().sum()
    }

    fn same_support(&self, other: &Self) -> bool {
        self.states == other.states
    }
}

/// Marginal probability of reaching each state, then exiting to the sink:
/// `mu(source) = 1`, `mu(s) = sum over parents p of mu(p) * P_F(s | p)`,
/// `P_T(x) = mu(x) * P_F(sink | x)`.
pub fn exact_terminal_distribution(
    dag: &PointedDag,
    policy: &impl ForwardPolicy,
) -> TerminalDistribution {
    let mut mu = vec![0.0f64; dag.n_states()];
    let mut terminal_mass = vec![0.0f64; dag.n_states()];
    mu[dag.source() as usize] = 1.0;
    for &s in dag.topological_order() {
        if s == dag.sink() {
            continue;
        }
        let kids = dag.children(s).expect("non-sink state");
        let probs = policy.action_probs(s);
        debug_assert_eq!(kids.len(), probs.len());
        for (&c, &p) in kids.iter().zip(&probs) {
            if c == dag.sink() {
                terminal_mass[s as usize] = mu[s as usize] * p;
            } else {
                mu[c as usize] += mu[s as usize] * p;
            }
        }
    }
    let states = dag.terminal_states();
    let probs = states.iter().map(|&s| terminal_mass[s as usize]).collect();
    TerminalDistribution::new(states, probs)
}

/// `x -> R(x) / Z` over the table's terminal states.
pub fn normalized_reward(table: &RewardTable) -> TerminalDistribution {
    let z = table.z();
    let states = table.terminal_states().to_vec();
    let probs = table.values().map(|v| v / z).collect();
    TerminalDistribution::new(states, probs)
}

/// Kullback-Leibler divergence in nats over aligned slices; `+inf` when
/// absolute continuity fails, with `0 log(0/q) = 0`.
pub fn kl_slices(p: &[f64], q: &[f64]) -> f64 {
    debug_assert_eq!(p.len(), q.len());
    let mut total = 0.0;
    for (&pi, &qi) in p.iter().zip(q) {
        if pi == 0.0 {
            continue;
        }
        if qi == 0.0 {
            return f64::INFINITY;
        }
        total += pi * (pi / qi).ln();
    }
    total
}

/// Total variation distance under the half-L1 convention.
pub fn tv_slices(p: &[f64], q: &[f64]) -> f64 {
    debug_assert_eq!(p.len(), q.len());
    0.5 * p.iter().zip(q).map(|(a, b)| (a - b).abs()).sum::<f64>()
}

/// Jensen-Shannon divergence in nats: `0.5 KL(P||M) + 0.5 KL(Q||M)` with
/// `M = (P + Q) / 2`. Bounded by `ln 2`.
pub fn jsd_slices(p: &[f64], q: &[f64]) -> f64 {
    debug_assert_eq!(p.len(), q.len());
    let m: Vec<f64> = p.iter().zip(q).map(|(a, b)| 0.5 * (a + b)).collect();
    0.5 * kl_slices(p, &m) + 0.5 * kl_slices(q, &m)
}

pub fn kl(p: &TerminalDistribution, q: &TerminalDistribution) -> Result<f64, EvalError> {
    if !p.same_support(q) {
        return Err(EvalError::MismatchedSupport);
    }
    Ok(kl_slices(p.probs(), q.probs()))
}

pub fn tv(p: &TerminalDistribution, q: &TerminalDistribution) -> Result<f64, EvalError> {
    if !p.same_support(q) {
        return Err(EvalError::MismatchedSupport);
    }
    Ok(tv_slices(p.probs(), q.probs()))
}

pub fn jsd(p: &TerminalDistribution, q: &TerminalDistribution) -> Result<f64, EvalError> {
    if !p.same_support(q) {
        return Err(EvalError::MismatchedSupport);
    }
    Ok(jsd_slices(p.probs(), q.probs()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::Trajectory;
    use crate::hypergrid::{build_grid, GridSpec};
    use crate::policy::{GridPolicy, Parametrization, PolicyConfig, TabularPolicy};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Enumeration oracle: sum of forward products per terminal state.
    fn enumeration_distribution(
        dag: &crate::graph::PointedDag,
        policy: &impl crate::policy::ForwardPolicy,
    ) -> TerminalDistribution {
        let trajs = dag.enumerate_trajectories().unwrap();
        let mut mass = vec![0.0; dag.n_states()];
        for t in &trajs {
            mass[t.terminal() as usize] += traj_prob(dag, policy, t);
        }
        let states = dag.terminal_states();
        let probs = states.iter().map(|&s| mass[s as usize]).collect();
        TerminalDistribution::new(states, probs)
    }

    fn traj_prob(
        dag: &crate::graph::PointedDag,
        policy: &impl crate::policy::ForwardPolicy,
        t: &Trajectory,
    ) -> f64 {
        t.states()
            .windows(2)
            .map(|w| {
                let kids = dag.children(w[0]).unwrap();
                let pos = kids.binary_search(&w[1]).unwrap();
                policy.action_probs(w[0])[pos]
            })
            .product()
    }

    #[test]
    fn uniform_policy_two_by_two() {
        let spec = GridSpec::plain(2).unwrap();
        let dag = build_grid(&spec);
        let policy = TabularPolicy::uniform(&dag);
        let dist = exact_terminal_distribution(&dag, &policy);
        // Hand enumeration with per-state valid-action counts 3, 2, 2, 1:
        // terminate at (0,0) with 1/3; each single path to (1,0)/(0,1) carries
        // 1/3 * 1/2; the two paths into (1,1) carry 1/6 each.
        assert!((dist.prob_of(spec.idx(0, 0)).unwrap() - 1.0 / 3.0).abs() < 1e-15);
        assert!((dist.prob_of(spec.idx(1, 0)).unwrap() - 1.0 / 6.0).abs() < 1e-15);
        assert!((dist.prob_of(spec.idx(0, 1)).unwrap() - 1.0 / 6.0).abs() < 1e-15);
        assert!((dist.prob_of(spec.idx(1, 1)).unwrap() - 1.0 / 3.0).abs() < 1e-15);
        let oracle = enumeration_distribution(&dag, &policy);
        for (a, b) in dist.probs().iter().zip(oracle.probs()) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn deterministic_terminate_at_source() {
        let spec = GridSpec::plain(3).unwrap();
        let dag = build_grid(&spec);
        let mut probs = vec![Vec::new(); dag.n_states()];
        for s in 0..spec.state_count() as StateId {
            let kids = dag.children(s).unwrap();
            let mut row = vec![0.0; kids.len()];
            // All mass on terminate (the sink is always the last child).
            *row.last_mut().unwrap() = 1.0;
            probs[s as usize] = row;
        }
        let policy = TabularPolicy::new(probs);
        let dist = exact_terminal_distribution(&dag, &policy);
        assert!((dist.prob_of(spec.idx(0, 0)).unwrap() - 1.0).abs() < 1e-15);
        assert!(dist.probs().iter().skip(1).all(|&p| p == 0.0));
    }

    #[test]
    fn dp_matches_enumeration_under_random_mlp() {
        let spec = GridSpec::plain(4).unwrap();
        let dag = build_grid(&spec);
        let mut policy = GridPolicy::new(
            4,
            PolicyConfig {
                width: 8,
                parametrization: Parametrization::Tb,
                ..PolicyConfig::default()
            },
        );
        for seed in [1u64, 2, 3] {
            policy.init_random(seed);
            let dp = exact_terminal_distribution(&dag, &policy);
            let oracle = enumeration_distribution(&dag, &policy);
            for (a, b) in dp.probs().iter().zip(oracle.probs()) {
                assert!((a - b).abs() < 1e-10);
            }
            assert!((dp.total() - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn jsd_basics() {
        let d = |probs: Vec<f64>| TerminalDistribution::new(vec![0, 1], probs);
        let p = d(vec![0.5, 0.5]);
        assert!(jsd(&p, &p).unwrap().abs() < 1e-15);

        let delta_x = d(vec![1.0, 0.0]);
        let delta_y = d(vec![0.0, 1.0]);
        assert!((jsd(&delta_x, &delta_y).unwrap() - 2f64.ln()).abs() < 1e-15);

        // Direct scalar-arithmetic oracle for P = (1/2, 1/2), Q = (3/4, 1/4).
        let q = d(vec![0.75, 0.25]);
        let m = [0.625, 0.375];
        let expect = 0.5 * (0.5 * (0.5f64 / m[0]).ln() + 0.5 * (0.5f64 / m[1]).ln())
            + 0.5 * (0.75 * (0.75f64 / m[0]).ln() + 0.25 * (0.25f64 / m[1]).ln());
        assert!((jsd(&p, &q).unwrap() - expect).abs() < 1e-15);

        let mismatched = TerminalDistribution::new(vec![0, 2], vec![0.5, 0.5]);
        assert_eq!(jsd(&p, &mismatched), Err(EvalError::MismatchedSupport));
    }

    #[test]
    fn jsd_symmetric_and_bounded() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        for _ in 0..200 {
            let k = rng.random_range(2..12);
            let p = random_dist(&mut rng, k);
            let q = random_dist(&mut rng, k);
            let a = jsd_slices(&p, &q);
            let b = jsd_slices(&q, &p);
            assert!((a - b).abs() < 1e-15);
            assert!((0.0..=2f64.ln() + 1e-12).contains(&a));
        }
    }

    #[test]
    fn kl_and_tv_basics() {
        let p = vec![0.2, 0.3, 0.5];
        assert_eq!(kl_slices(&p, &p), 0.0);
        assert_eq!(tv_slices(&p, &p), 0.0);
        let dx = vec![1.0, 0.0];
        let dy = vec![0.0, 1.0];
        assert_eq!(tv_slices(&dx, &dy), 1.0);
        assert_eq!(kl_slices(&dx, &dy), f64::INFINITY);
    }

    #[test]
    fn pinsker_on_random_pairs() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..1000 {
            let p = random_dist(&mut rng, 10);
            let q = random_dist(&mut rng, 10);
            let tv = tv_slices(&p, &q);
            let kl = kl_slices(&p, &q);
            assert!(tv <= (0.5 * kl).sqrt() + 1e-12);
        }
    }

    #[test]
    fn normalized_reward_basics() {
        let spec = GridSpec::with_default_modes(8).unwrap();
        let table = crate::hypergrid::RewardTable::from_grid(&spec);
        let dist = normalized_reward(&table);
        assert!((dist.total() - 1.0).abs() < 1e-12);
        // Mode-cell mass under the default lattice: 1.001 / (64*0.001 + 9).
        let per_mode = 1.001 / 9.064;
        let mode = &spec.modes()[0];
        let got = dist.prob_of(spec.idx(mode.a_lo, mode.b_lo)).unwrap();
        assert!((got - per_mode).abs() < 1e-12);
        let mode_mass: f64 = spec
            .modes()
            .iter()
            .map(|m| dist.prob_of(spec.idx(m.a_lo, m.b_lo)).unwrap())
            .sum();
        assert!((mode_mass - 9.0 * 1.001 / 9.064).abs() < 1e-12);
    }

    #[test]
    fn normalized_reward_scale_invariance() {
        let spec = GridSpec::plain(3).unwrap();
        let dag = build_grid(&spec);
        let values: Vec<f64> = (1..=9).map(|i| i as f64).collect();
        let table = crate::hypergrid::RewardTable::from_values(&dag, &values).unwrap();
        let scaled: Vec<f64> = values.iter().map(|v| v * 3.7).collect();
        let table_scaled = crate::hypergrid::RewardTable::from_values(&dag, &scaled).unwrap();
        let a = normalized_reward(&table);
        let b = normalized_reward(&table_scaled);
        for (x, y) in a.probs().iter().zip(b.probs()) {
            assert!((x - y).abs() < 1e-15);
        }
        // Two equal rewards normalize to one half each.
        let chain = crate::graph::PointedDag::new(
            4,
            &[(0, 1), (0, 2), (1, 3), (2, 3)],
        )
        .unwrap();
        let half = crate::hypergrid::RewardTable::from_values(&chain, &[1.0, 1.0]).unwrap();
        let dist = normalized_reward(&half);
        assert_eq!(dist.probs(), &[0.5, 0.5]);
    }

    fn random_dist(rng: &mut ChaCha8Rng, k: usize) -> Vec<f64> {
        let mut v: Vec<f64> = (0..k).map(|_| -rng.random::<f64>().max(1e-300).ln()).collect();
        let t: f64 = v.iter().sum();
        for x in &mut v {
            *x /= t;
        }
        v
    }

    use crate::graph::StateId;
}
