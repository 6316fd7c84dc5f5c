//! On-policy stochastic-gradient training: one trajectory sampled from the
//! current forward policy per step (batching optional), hiding-mask
//! enforcement, SGD or Adam updates, and exact JSD evaluation on a fixed
//! cadence. Seeds run independently and in parallel; each run owns its
//! parameters and RNG while the DAG and reward table are shared read-only.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::autodiff::Tape;
use crate::eval::{exact_terminal_distribution, jsd, normalized_reward};
use crate::graph::{PointedDag, Trajectory};
use crate::hypergrid::{build_grid, AccessLog, GridSpec, HidingMask, MaskMode, RewardTable, TrackedReward};
use crate::objectives::{tb_loss, tb_loss_value, trajectory_db_loss, ObjectiveError};
use crate::parallel;
use crate::policy::{
    Encoding, ForwardPolicy, GridPolicy, Parametrization, PolicyConfig, UniformBackward,
};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("learning rate must be positive")]
    BadLearningRate,
    #[error("at least one iteration required")]
    NoIterations,
    #[error("at least one seed required")]
    NoSeeds,
    #[error("batch size must be positive")]
    BadBatchSize,
    #[error("gradient length {got} does not match parameter count {expected}")]
    GradientShape { expected: usize, got: usize },
    #[error("objective failure: {0}")]
    Objective(#[from] ObjectiveError),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum OptimizerKind {
    Sgd,
    Adam { beta1: f64, beta2: f64, eps: f64 },
}

impl OptimizerKind {
    pub fn adam_default() -> Self {
        OptimizerKind::Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub spec: GridSpec,
    pub loss: Parametrization,
    pub mask: Option<HidingMask>,
    pub optimizer: OptimizerKind,
    /// Learning rate for all network weights.
    pub lr: f64,
    /// Learning rate for the scalar log Z.
    pub lr_log_z: f64,
    pub iterations: u64,
    pub batch_size: usize,
    pub seeds: Vec<u64>,
    pub eval_every: u64,
    /// Probability of a uniform-random action per step.
    pub epsilon_uniform: f64,
    pub width: usize,
    pub hidden_layers: usize,
    pub encoding: Encoding,
    pub learn_backward: bool,
    /// Keep every sampled trajectory and evaluate the Definition-style
    /// training-loss average under the final parameters (TB runs only).
    pub post_hoc_rn: bool,
}

impl TrainConfig {
    pub fn new(spec: GridSpec, loss: Parametrization) -> Self {
        Self {
            spec,
            loss,
            mask: None,
            optimizer: OptimizerKind::adam_default(),
            lr: 1e-3,
            lr_log_z: 1e-1,
            iterations: 5000,
            batch_size: 1,
            seeds: vec![0],
            eval_every: 50,
            epsilon_uniform: 0.0,
            width: 64,
            hidden_layers: 2,
            encoding: Encoding::OneHot,
            learn_backward: false,
            post_hoc_rn: false,
        }
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        if !(self.lr > 0.0 && self.lr_log_z > 0.0) {
            return Err(TrainError::BadLearningRate);
        }
        if self.iterations == 0 {
            return Err(TrainError::NoIterations);
        }
        if self.seeds.is_empty() {
            return Err(TrainError::NoSeeds);
        }
        if self.batch_size == 0 {
            return Err(TrainError::BadBatchSize);
        }
        Ok(())
    }

    fn policy_config(&self) -> PolicyConfig {
        PolicyConfig {
            width: self.width,
            hidden_layers: self.hidden_layers,
            encoding: self.encoding,
            parametrization: self.loss,
            learn_backward: self.learn_backward,
        }
    }
}

/// One evaluation record along a run.
#[derive(Debug, Clone, Copy)]
pub struct TracePoint {
    pub iteration: u64,
    /// Running mean of computed per-step losses under the then-current
    /// parameters; NaN until the first computed step.
    pub train_loss_mean: f64,
    pub jsd: f64,
    pub wall_secs: f64,
}

#[derive(Debug)]
pub struct TrainingTrace {
    pub seed: u64,
    pub points: Vec<TracePoint>,
    /// Set when a non-finite loss or gradient aborted the run.
    pub aborted_at: Option<u64>,
    /// Definition-style average of the stored trajectories' TB losses under
    /// the final parameters, when requested.
    pub post_hoc_rn: Option<f64>,
    pub policy: GridPolicy,
}

impl TrainingTrace {
    pub fn final_jsd(&self) -> f64 {
        self.points.last().map(|p| p.jsd).unwrap_or(f64::NAN)
    }
}

/// SGD / Adam state over the flat parameter vector.
pub struct Optimizer {
    kind: OptimizerKind,
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, n_params: usize) -> Self {
        let stateful = matches!(kind, OptimizerKind::Adam { .. });
        let len = if stateful { n_params } else { 0 };
        Self {
            kind,
            m: vec![0.0; len],
            v: vec![0.0; len],
            t: 0,
        }
    }

    /// One update step; `lrs` holds the per-parameter learning rate. Errors
    /// on non-finite gradients without touching the parameters.
    pub fn step(
        &mut self,
        params: &mut [f64],
        grads: &[f64],
        lrs: &[f64],
    ) -> Result<(), TrainError> {
        if grads.len() != params.len() {
            return Err(TrainError::GradientShape {
                expected: params.len(),
                got: grads.len(),
            });
        }
        match self.kind {
            OptimizerKind::Sgd => {
                for ((p, &g), &lr) in params.iter_mut().zip(grads).zip(lrs) {
                    *p -= lr * g;
                }
            }
            OptimizerKind::Adam { beta1, beta2, eps } => {
                self.t += 1;
                let bc1 = 1.0 - beta1.powi(self.t as i32);
                let bc2 = 1.0 - beta2.powi(self.t as i32);
                for (i, ((p, &g), &lr)) in params.iter_mut().zip(grads).zip(lrs).enumerate() {
                    self.m[i] = beta1 * self.m[i] + (1.0 - beta1) * g;
                    self.v[i] = beta2 * self.v[i] + (1.0 - beta2) * g * g;
                    let m_hat = self.m[i] / bc1;
                    let v_hat = self.v[i] / bc2;
                    *p -= lr * m_hat / (v_hat.sqrt() + eps);
                }
            }
        }
        Ok(())
    }
}

/// Rolls out one trajectory from the source under the forward policy, mixing
/// in a uniform action with probability `epsilon_uniform` per step. Under a
/// forbid-terminate mask the terminate action is removed at hidden states
/// unless it is the only valid action.
pub fn sample_trajectory(
    dag: &PointedDag,
    policy: &impl ForwardPolicy,
    mask: Option<&HidingMask>,
    epsilon_uniform: f64,
    rng: &mut ChaCha8Rng,
) -> Trajectory {
    let mut states = vec![dag.source()];
    let mut current = dag.source();
    while current != dag.sink() {
        let kids = dag.children(current).expect("non-sink");
        let mut probs = policy.action_probs(current);
        if let Some(m) = mask {
            if m.mode == MaskMode::ForbidTerminate && m.is_hidden(current) && kids.len() > 1 {
                let sink_pos = kids
                    .iter()
                    .position(|&c| c == dag.sink())
                    .expect("terminal state");
                probs[sink_pos] = 0.0;
                let total: f64 = probs.iter().sum();
                for p in &mut probs {
                    *p /= total;
                }
            }
        }
        let pos = if epsilon_uniform > 0.0 && rng.random::<f64>() < epsilon_uniform {
            let allowed: Vec<usize> = (0..probs.len()).filter(|&i| probs[i] > 0.0).collect();
            allowed[rng.random_range(0..allowed.len())]
        } else {
            categorical(&probs, rng)
        };
        current = kids[pos];
        states.push(current);
    }
    Trajectory::from_states_unchecked(states)
}

fn categorical(probs: &[f64], rng: &mut ChaCha8Rng) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, &p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    probs.len() - 1
}

/// Whether a mask rejects a TB update for this trajectory: under
/// skip-trajectory any hidden state on the path rejects; under
/// forbid-terminate only a hidden terminal does.
pub fn tb_mask_rejects(mask: &HidingMask, traj: &Trajectory) -> bool {
    match mask.mode {
        MaskMode::SkipTrajectory => {
            let states = traj.states();
            states[..states.len() - 1].iter().any(|&s| mask.is_hidden(s))
        }
        MaskMode::ForbidTerminate => mask.is_hidden(traj.terminal()),
    }
}

/// Trains one run per seed, in parallel when the `parallel` feature is
/// enabled; traces are returned in seed order either way.
pub fn train(config: &TrainConfig) -> Result<Vec<TrainingTrace>, TrainError> {
    train_with_log(config, None)
}

/// As [`train`], recording every training-path reward read in `access`.
pub fn train_with_log(
    config: &TrainConfig,
    access: Option<&AccessLog>,
) -> Result<Vec<TrainingTrace>, TrainError> {
    config.validate()?;
    let dag = build_grid(&config.spec);
    let table = RewardTable::from_grid(&config.spec);
    let results = parallel::run_all(config.seeds.clone(), |seed| {
        train_seed(config, seed, &dag, &table, access)
    });
    results.into_iter().collect()
}

/// Sequential twin of [`train_with_log`], kept for the parallel-vs-sequential
/// benchmark.
pub fn train_with_log_sequential(
    config: &TrainConfig,
    access: Option<&AccessLog>,
) -> Result<Vec<TrainingTrace>, TrainError> {
    config.validate()?;
    let dag = build_grid(&config.spec);
    let table = RewardTable::from_grid(&config.spec);
    let results = parallel::run_all_sequential(config.seeds.clone(), |seed| {
        train_seed(config, seed, &dag, &table, access)
    });
    results.into_iter().collect()
}

/// One seed's full run. The sampling stream is decoupled from the
/// initialization stream so both are reproducible from the seed alone.
pub fn train_seed(
    config: &TrainConfig,
    seed: u64,
    dag: &PointedDag,
    table: &RewardTable,
    access: Option<&AccessLog>,
) -> Result<TrainingTrace, TrainError> {
    let start = Instant::now();
    let mut policy = GridPolicy::new(config.spec.n(), config.policy_config());
    policy.init_random(seed);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(1);

    let tracked = TrackedReward::new(table, access);
    let target = normalized_reward(table);
    let n_params = policy.params.len();
    let mut optimizer = Optimizer::new(config.optimizer, n_params);
    let mut lrs = vec![config.lr; n_params];
    let log_z_at = policy.layout().slice("log_z").offset;
    lrs[log_z_at] = config.lr_log_z;

    let mut points = Vec::new();
    let mut loss_sum = 0.0;
    let mut computed_steps = 0u64;
    let mut aborted_at = None;
    let mut stored: Vec<Trajectory> = Vec::new();

    let record = |policy: &GridPolicy, iteration: u64, loss_sum: f64, steps: u64, points: &mut Vec<TracePoint>| {
        let dist = exact_terminal_distribution(dag, policy);
        let div = jsd(&dist, &target).expect("aligned supports");
        debug_assert!((-1e-12..=2f64.ln() + 1e-9).contains(&div));
        points.push(TracePoint {
            iteration,
            train_loss_mean: if steps == 0 { f64::NAN } else { loss_sum / steps as f64 },
            jsd: div,
            wall_secs: start.elapsed().as_secs_f64(),
        });
    };

    record(&policy, 0, loss_sum, computed_steps, &mut points);

    for i in 1..=config.iterations {
        let batch: Vec<Trajectory> = (0..config.batch_size)
            .map(|_| {
                sample_trajectory(
                    dag,
                    &policy,
                    config.mask.as_ref(),
                    config.epsilon_uniform,
                    &mut rng,
                )
            })
            .collect();
        if config.post_hoc_rn {
            stored.extend(batch.iter().cloned());
        }

        let mut tape = Tape::new(&policy.params);
        let mut kept = Vec::new();
        for traj in &batch {
            match config.loss {
                Parametrization::Tb => {
                    if config
                        .mask
                        .as_ref()
                        .is_some_and(|m| tb_mask_rejects(m, traj))
                    {
                        continue;
                    }
                    kept.push(tb_loss(&mut tape, &policy, traj, &tracked)?.node);
                }
                Parametrization::Db | Parametrization::FlDb => {
                    if let Some(loss) =
                        trajectory_db_loss(&mut tape, &policy, traj, &tracked, config.mask.as_ref())?
                    {
                        kept.push(loss.node);
                    }
                }
            }
        }
        if kept.is_empty() {
            // Masked-out step: no update, but the iteration still counts.
            if i % config.eval_every == 0 || i == config.iterations {
                record(&policy, i, loss_sum, computed_steps, &mut points);
            }
            continue;
        }
        let mut total = kept[0];
        for &node in &kept[1..] {
            total = tape.add(total, node);
        }
        if kept.len() > 1 {
            total = tape.affine(total, 1.0 / kept.len() as f64, 0.0);
        }
        let loss_value = tape.value(total);
        if !loss_value.is_finite() {
            aborted_at = Some(i);
            break;
        }
        let grads = tape.backward(total).expect("fresh tape");
        if grads.iter().any(|g| !g.is_finite()) {
            aborted_at = Some(i);
            break;
        }
        optimizer.step(&mut policy.params, &grads, &lrs)?;
        loss_sum += loss_value;
        computed_steps += 1;

        if i % config.eval_every == 0 || i == config.iterations {
            record(&policy, i, loss_sum, computed_steps, &mut points);
        }
    }

    let post_hoc_rn = if config.post_hoc_rn && config.loss == Parametrization::Tb {
        let uniform = UniformBackward { dag };
        let total: f64 = stored
            .iter()
            .map(|t| tb_loss_value(dag, &policy, &uniform, policy.log_z(), &tracked, t))
            .sum();
        Some(total / stored.len().max(1) as f64)
    } else {
        None
    };

    Ok(TrainingTrace {
        seed,
        points,
        aborted_at,
        post_hoc_rn,
        policy,
    })
}

/// Convenience: log-probability of a trajectory under a forward policy,
/// used by the on-policy contract tests.
pub fn trajectory_log_prob(
    dag: &PointedDag,
    policy: &impl ForwardPolicy,
    traj: &Trajectory,
) -> f64 {
    traj.states()
        .windows(2)
        .map(|w| {
            let kids = dag.children(w[0]).expect("non-sink");
            let pos = kids.binary_search(&w[1]).expect("edge");
            policy.action_probs(w[0])[pos].ln()
        })
        .sum()
}
