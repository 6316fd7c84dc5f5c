//! Numerical certification on exhaustively enumerable DAGs: the reward-shift
//! stability bound, the Jensen/Pinsker chain behind the beyond-i.i.d.
//! inequality, and the bounded-function total-variation lemma. Every
//! expectation here is an exact sum over the enumerated trajectory set; no
//! sampling anywhere.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::eval::tv_slices;
use crate::graph::{GraphError, PointedDag, StateId, Trajectory};
use crate::hypergrid::RewardTable;
use crate::parallel;
use crate::policy::{ForwardPolicy, TabularPolicy};

#[derive(Debug, Error, PartialEq)]
pub enum TheoryError {
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error("h must be finite everywhere")]
    NonFiniteH,
    #[error("could not draw a positive sum-preserving perturbation after {tries} tries")]
    PerturbationFailed { tries: usize },
    #[error("slices must have equal length")]
    LengthMismatch,
}

/// One checked inequality: PASS means `lhs <= rhs + tol`.
#[derive(Debug, Clone)]
pub struct BoundReport {
    pub name: String,
    pub lhs: f64,
    pub rhs: f64,
    pub witness: Option<String>,
    pub pass: bool,
}

impl BoundReport {
    pub fn new(name: impl Into<String>, lhs: f64, rhs: f64, witness: Option<String>, tol: f64) -> Self {
        Self {
            name: name.into(),
            lhs,
            rhs,
            witness,
            pass: lhs <= rhs + tol,
        }
    }

    pub fn slack(&self) -> f64 {
        self.rhs - self.lhs
    }

    /// lhs / rhs, the empirical tightness of the bound (0 when rhs is 0).
    pub fn ratio(&self) -> f64 {
        if self.rhs == 0.0 {
            0.0
        } else {
            self.lhs / self.rhs
        }
    }
}

/// Tolerances used by the certification suites.
pub const STABILITY_TOL: f64 = 1e-12;
pub const CHAIN_TOL: f64 = 1e-9;

/// The closed-form loss minimizer under a uniform backward policy: each
/// trajectory carries weight `R(x) * prod 1/|Par(s_i)|` (sink factor fixed to
/// one), normalized by `Z`. The per-state forward policy is recovered by
/// conditioning edge flows on state flows, both aggregated over trajectories.
#[derive(Debug, Clone)]
pub struct ExactMinimizer {
    pub trajectories: Vec<Trajectory>,
    /// P(tau), aligned with `trajectories`; sums to one.
    pub probs: Vec<f64>,
    /// prod 1/|Par(s_i)| per trajectory (the uniform backward product).
    pub backward_products: Vec<f64>,
    pub policy: TabularPolicy,
    pub z: f64,
}

impl ExactMinimizer {
    /// max over trajectories of the uniform backward product; the constant in
    /// the stability bound.
    pub fn c_constant(&self) -> f64 {
        self.backward_products
            .iter()
            .fold(f64::NEG_INFINITY, |a, &b| a.max(b))
    }

    /// The induced terminal distribution, which equals `R / Z`.
    pub fn terminal_distribution(&self, dag: &PointedDag) -> crate::eval::TerminalDistribution {
        crate::eval::exact_terminal_distribution(dag, &self.policy)
    }
}

pub fn exact_minimizer(
    dag: &PointedDag,
    reward: &RewardTable,
    cap: usize,
) -> Result<ExactMinimizer, TheoryError> {
    let trajectories = dag.enumerate_trajectories_capped(cap)?;
    minimizer_from_trajectories(dag, reward, trajectories)
}

/// Recomputes the minimizer for a new reward over an already enumerated
/// trajectory set (the perturbation loop reuses the enumeration).
fn minimizer_from_trajectories(
    dag: &PointedDag,
    reward: &RewardTable,
    trajectories: Vec<Trajectory>,
) -> Result<ExactMinimizer, TheoryError> {
    let n = dag.n_states();
    let mut state_flow = vec![0.0f64; n];
    let mut edge_flow: Vec<Vec<f64>> = (0..n)
        .map(|s| {
            if s == dag.sink() as usize {
                Vec::new()
            } else {
                vec![0.0; dag.children(s as StateId).expect("non-sink").len()]
            }
        })
        .collect();

    let mut weights = Vec::with_capacity(trajectories.len());
    let mut backward_products = Vec::with_capacity(trajectories.len());
    for traj in &trajectories {
        let states = traj.states();
        let mut bp = 1.0;
        for &s in &states[1..states.len() - 1] {
            bp /= dag.parent_count(s) as f64;
        }
        let w = reward.value(traj.terminal()) * bp;
        backward_products.push(bp);
        weights.push(w);
        for (t, pair) in states.windows(2).enumerate() {
            let s = pair[0];
            state_flow[s as usize] += w;
            let kids = dag.children(s).expect("non-sink");
            let pos = kids
                .binary_search(&pair[1])
                .expect("trajectory follows edges");
            edge_flow[s as usize][pos] += w;
            let _ = t;
        }
    }
    let z: f64 = weights.iter().sum();
    let probs: Vec<f64> = weights.iter().map(|w| w / z).collect();

    let table = (0..n)
        .map(|s| {
            if s == dag.sink() as usize || state_flow[s] == 0.0 {
                return Vec::new();
            }
            edge_flow[s]
                .iter()
                .map(|f| f / state_flow[s])
                .collect()
        })
        .collect();

    Ok(ExactMinimizer {
        trajectories,
        probs,
        backward_products,
        policy: TabularPolicy::new(table),
        z,
    })
}

/// Sum-preserving reward perturbations and the per-trajectory stability
/// bound: `|P1(tau) - P2(tau)| <= (C/Z) * max_x |R1(x) - R2(x)|`. One report
/// per perturbation, with the worst trajectory as witness.
pub fn stability_check(
    dag: &PointedDag,
    reward: &RewardTable,
    epsilon: f64,
    n_perturbations: usize,
    seed: u64,
    cap: usize,
) -> Result<Vec<BoundReport>, TheoryError> {
    let base = exact_minimizer(dag, reward, cap)?;
    let c = base.c_constant();
    let z = base.z;
    let terminals = dag.terminal_states();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    // Draw perturbations sequentially for determinism, then verify in
    // parallel.
    let mut jobs: Vec<(RewardTable, f64, usize)> = Vec::with_capacity(n_perturbations);
    for k in 0..n_perturbations {
        let mut tries = 0;
        loop {
            tries += 1;
            if tries > 10_000 {
                return Err(TheoryError::PerturbationFailed { tries });
            }
            let i = rng.random_range(0..terminals.len());
            let j = rng.random_range(0..terminals.len());
            if i == j {
                continue;
            }
            let delta = rng.random::<f64>() * epsilon;
            if delta == 0.0 {
                continue;
            }
            // +delta at terminals[i], -delta at terminals[j]; rejected and
            // resampled when a reward would become non-positive.
            if let Some(shifted) = reward.shifted(terminals[j], terminals[i], delta) {
                jobs.push((shifted, delta, k));
                break;
            }
        }
    }

    let reports = parallel::run_all(jobs, |(r2, delta, k)| {
        let pert = minimizer_from_trajectories(dag, &r2, base.trajectories.clone())
            .expect("same enumeration");
        let mut worst = 0.0;
        let mut witness = 0usize;
        for (t, (&p1, &p2)) in base.probs.iter().zip(&pert.probs).enumerate() {
            let d = (p1 - p2).abs();
            if d > worst {
                worst = d;
                witness = t;
            }
        }
        let rhs = c / z * delta;
        BoundReport::new(
            format!("stability[{k}] delta={delta:.3e}"),
            worst,
            rhs,
            Some(format!(
                "trajectory {:?}",
                base.trajectories[witness].states()
            )),
            STABILITY_TOL,
        )
    });
    Ok(reports)
}

/// `|E_Q[h] - E_P[h]| <= (M1 + M2) * TV(P, Q)` for `-M1 <= h <= M2`.
pub fn tv_lemma_check(h: &[f64], p: &[f64], q: &[f64]) -> Result<BoundReport, TheoryError> {
    if h.len() != p.len() || h.len() != q.len() {
        return Err(TheoryError::LengthMismatch);
    }
    if h.iter().any(|x| !x.is_finite()) {
        return Err(TheoryError::NonFiniteH);
    }
    let min = h.iter().cloned().fold(f64::INFINITY, f64::min);
    let max = h.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let m1 = (-min).max(0.0);
    let m2 = max.max(0.0);
    let e_p: f64 = h.iter().zip(p).map(|(a, b)| a * b).sum();
    let e_q: f64 = h.iter().zip(q).map(|(a, b)| a * b).sum();
    let lhs = (e_q - e_p).abs();
    let rhs = (m1 + m2) * tv_slices(p, q);
    Ok(BoundReport::new("tv-lemma", lhs, rhs, None, CHAIN_TOL))
}

/// The three exact sub-checks of the beyond-i.i.d. inequality over trajectory
/// space, with the TB loss evaluated under a uniform backward policy and the
/// given `log_z` (pass `ln Z` for the inequality's known-Z assumption):
///
/// 1. the Jensen step `KL(P_theta || P*) <= E_Ptheta[L]^(1/2)`,
/// 2. the Pinsker step `TV(P_theta, P*) <= sqrt(KL / 2)`,
/// 3. the full chain
///    `E_P*[L] <= (M1 + M2)/sqrt(2) * E_Ptheta[L]^(1/4) + E_Ptheta[L]`
///    with `M1 = 0` and `M2 = max_tau L(tau)`.
pub struct BeyondIidReport {
    pub jensen: BoundReport,
    pub pinsker: BoundReport,
    pub full: BoundReport,
}

impl BeyondIidReport {
    pub fn all(&self) -> [&BoundReport; 3] {
        [&self.jensen, &self.pinsker, &self.full]
    }

    pub fn pass(&self) -> bool {
        self.all().iter().all(|r| r.pass)
    }
}

pub fn beyond_iid_check(
    dag: &PointedDag,
    reward: &RewardTable,
    policy: &impl ForwardPolicy,
    log_z: f64,
    cap: usize,
) -> Result<BeyondIidReport, TheoryError> {
    let minimizer = exact_minimizer(dag, reward, cap)?;
    let mut p_theta = Vec::with_capacity(minimizer.trajectories.len());
    let mut losses = Vec::with_capacity(minimizer.trajectories.len());
    for (traj, (&p_star, &bp)) in minimizer
        .trajectories
        .iter()
        .zip(minimizer.probs.iter().zip(&minimizer.backward_products))
    {
        let mut log_pf = 0.0;
        let states = traj.states();
        for w in states.windows(2) {
            let kids = dag.children(w[0]).expect("non-sink");
            let pos = kids.binary_search(&w[1]).expect("edge");
            log_pf += policy.action_probs(w[0])[pos].ln();
        }
        let delta = log_z + log_pf - reward.value(traj.terminal()).ln() - bp.ln();
        losses.push(delta * delta);
        p_theta.push(log_pf.exp());
        let _ = p_star;
    }
    debug_assert!((p_theta.iter().sum::<f64>() - 1.0).abs() < 1e-9);

    let e_theta: f64 = losses.iter().zip(&p_theta).map(|(l, p)| l * p).sum();
    let e_star: f64 = losses.iter().zip(&minimizer.probs).map(|(l, p)| l * p).sum();
    let kl: f64 = p_theta
        .iter()
        .zip(&minimizer.probs)
        .filter(|(&pt, _)| pt > 0.0)
        .map(|(&pt, &ps)| pt * (pt / ps).ln())
        .sum();
    let tv = tv_slices(&p_theta, &minimizer.probs);
    let m2 = losses.iter().cloned().fold(0.0f64, f64::max);

    let jensen = BoundReport::new("jensen: KL <= sqrt(E_theta[L])", kl, e_theta.sqrt(), None, CHAIN_TOL);
    let pinsker = BoundReport::new(
        "pinsker: TV <= sqrt(KL/2)",
        tv,
        (0.5 * kl).sqrt(),
        None,
        CHAIN_TOL,
    );
    let full = BoundReport::new(
        "beyond-iid: E_star[L] <= (M1+M2)/sqrt(2) E_theta[L]^(1/4) + E_theta[L]",
        e_star,
        m2 / 2f64.sqrt() * e_theta.powf(0.25) + e_theta,
        None,
        CHAIN_TOL,
    );
    Ok(BeyondIidReport {
        jensen,
        pinsker,
        full,
    })
}
