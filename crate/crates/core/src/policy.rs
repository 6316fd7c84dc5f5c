//! Parametric policies: a small tanh MLP with a shared trunk and separate
//! heads for the forward policy, the optional backward policy, and the
//! per-state log flow, plus the scalar log Z. All learnable scalars live in
//! one flat vector with named slices so checkpoints and tapes stay aligned.
//!
//! Tabular policies cover exact constructions on arbitrary pointed DAGs.

use std::fmt;
use std::fs;
use std::io::Write as _;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::autodiff::{Node, Tape};
use crate::graph::{PointedDag, StateId};
use crate::hypergrid::{GridSpec, ModeRegion, TrackedReward};

/// Which objective the parameter vector is set up for.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Parametrization {
    Tb,
    Db,
    FlDb,
}

impl fmt::Display for Parametrization {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Parametrization::Tb => write!(f, "tb"),
            Parametrization::Db => write!(f, "db"),
            Parametrization::FlDb => write!(f, "fldb"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Encoding {
    /// Two concatenated one-hot vectors of length N (dimension 2N).
    OneHot,
    /// Two coordinates scaled to [0, 1] (dimension 2).
    Scalar,
}

impl fmt::Display for Encoding {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Encoding::OneHot => write!(f, "onehot"),
            Encoding::Scalar => write!(f, "scalar"),
        }
    }
}

/// Grid action ids, fixed so logit heads are reproducible: increment `a`,
/// increment `b`, terminate. Ascending child index order coincides with this.
pub const ACTION_RIGHT: usize = 0;
pub const ACTION_UP: usize = 1;
pub const ACTION_TERMINATE: usize = 2;

/// Backward head ids: arrived from `(a-1, b)` or from `(a, b-1)`.
pub const PARENT_FROM_LEFT: usize = 0;
pub const PARENT_FROM_BELOW: usize = 1;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum PolicyError {
    #[error("state flow is undefined under the TB parametrization")]
    NoFlowHead,
    #[error("backward head requested but the policy uses a uniform backward")]
    NoBackwardHead,
    #[error("{0} -> {1} is not a grid transition")]
    NotATransition(StateId, StateId),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PolicyConfig {
    pub width: usize,
    pub hidden_layers: usize,
    pub encoding: Encoding,
    pub parametrization: Parametrization,
    pub learn_backward: bool,
}

impl Default for PolicyConfig {
    fn default() -> Self {
        Self {
            width: 64,
            hidden_layers: 2,
            encoding: Encoding::OneHot,
            parametrization: Parametrization::Tb,
            learn_backward: false,
        }
    }
}

/// One named slice of the flat parameter vector.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SliceInfo {
    pub name: String,
    pub offset: usize,
    pub rows: usize,
    pub cols: usize,
}

impl SliceInfo {
    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone)]
pub struct ParamLayout {
    slices: Vec<SliceInfo>,
    total: usize,
}

impl ParamLayout {
    fn build(input_dim: usize, config: &PolicyConfig) -> Self {
        let mut slices = Vec::new();
        let mut offset = 0;
        let mut push = |name: &str, rows: usize, cols: usize, offset: &mut usize| {
            slices.push(SliceInfo {
                name: name.to_string(),
                offset: *offset,
                rows,
                cols,
            });
            *offset += rows * cols;
        };
        let w = config.width;
        for l in 0..config.hidden_layers {
            let fan_in = if l == 0 { input_dim } else { w };
            push(&format!("w{l}"), w, fan_in, &mut offset);
            push(&format!("b{l}"), w, 1, &mut offset);
        }
        push("w_pf", 3, w, &mut offset);
        push("b_pf", 3, 1, &mut offset);
        if config.learn_backward {
            push("w_pb", 2, w, &mut offset);
            push("b_pb", 2, 1, &mut offset);
        }
        if config.parametrization != Parametrization::Tb {
            push("w_flow", 1, w, &mut offset);
            push("b_flow", 1, 1, &mut offset);
        }
        push("log_z", 1, 1, &mut offset);
        Self {
            slices,
            total: offset,
        }
    }

    pub fn slices(&self) -> &[SliceInfo] {
        &self.slices
    }

    pub fn total_len(&self) -> usize {
        self.total
    }

    pub fn slice(&self, name: &str) -> &SliceInfo {
        self.slices
            .iter()
            .find(|s| s.name == name)
            .unwrap_or_else(|| panic!("no parameter slice named {name}"))
    }

    pub fn try_slice(&self, name: &str) -> Option<&SliceInfo> {
        self.slices.iter().find(|s| s.name == name)
    }
}

/// Plain (untaped) head values at one grid state.
#[derive(Debug, Clone, Copy)]
pub struct HeadValues {
    pub pf_logits: [f64; 3],
    pub pb_logits: Option<[f64; 2]>,
    pub flow_raw: Option<f64>,
}

/// Taped head nodes at one grid state.
#[derive(Debug, Clone, Copy)]
pub struct TapedHeads {
    pub pf_logits: [Node; 3],
    pub pb_logits: Option<[Node; 2]>,
    pub flow_raw: Option<Node>,
}

/// The MLP policy over a 2-D grid.
#[derive(Debug, Clone)]
pub struct GridPolicy {
    n: usize,
    config: PolicyConfig,
    layout: ParamLayout,
    pub params: Vec<f64>,
}

impl GridPolicy {
    pub fn new(n: usize, config: PolicyConfig) -> Self {
        let input_dim = match config.encoding {
            Encoding::OneHot => 2 * n,
            Encoding::Scalar => 2,
        };
        let layout = ParamLayout::build(input_dim, &config);
        let params = vec![0.0; layout.total_len()];
        Self {
            n,
            config,
            layout,
            params,
        }
    }

    /// Weight matrices drawn uniform in `(-1/sqrt(fan_in), 1/sqrt(fan_in))`,
    /// biases and log Z zero. Deterministic in `seed`.
    pub fn init_random(&mut self, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for s in self.layout.slices.clone() {
            if s.name.starts_with('w') {
                let bound = 1.0 / (s.cols as f64).sqrt();
                for i in 0..s.len() {
                    self.params[s.offset + i] = rng.random_range(-bound..bound);
                }
            } else {
                for i in 0..s.len() {
                    self.params[s.offset + i] = 0.0;
                }
            }
        }
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn config(&self) -> &PolicyConfig {
        &self.config
    }

    pub fn layout(&self) -> &ParamLayout {
        &self.layout
    }

    pub fn input_dim(&self) -> usize {
        match self.config.encoding {
            Encoding::OneHot => 2 * self.n,
            Encoding::Scalar => 2,
        }
    }

    pub fn log_z(&self) -> f64 {
        self.params[self.layout.slice("log_z").offset]
    }

    pub fn coords(&self, s: StateId) -> (usize, usize) {
        let s = s as usize;
        debug_assert!(s < self.n * self.n);
        (s % self.n, s / self.n)
    }

    pub fn state_index(&self, a: usize, b: usize) -> StateId {
        (b * self.n + a) as StateId
    }

    pub fn sink_id(&self) -> StateId {
        (self.n * self.n) as StateId
    }

    /// Deterministic featurization of a grid state.
    pub fn encode_state(&self, a: usize, b: usize, out: &mut Vec<f64>) {
        out.clear();
        match self.config.encoding {
            Encoding::OneHot => {
                out.resize(2 * self.n, 0.0);
                out[a] = 1.0;
                out[self.n + b] = 1.0;
            }
            Encoding::Scalar => {
                let denom = (self.n - 1) as f64;
                out.push(a as f64 / denom);
                out.push(b as f64 / denom);
            }
        }
    }

    /// `[right valid, up valid, terminate]`.
    pub fn valid_actions(&self, a: usize, b: usize) -> [bool; 3] {
        [a + 1 < self.n, b + 1 < self.n, true]
    }

    /// `[from (a-1,b) valid, from (a,b-1) valid]`.
    pub fn valid_parents(&self, a: usize, b: usize) -> [bool; 2] {
        [a > 0, b > 0]
    }

    /// Action id of a grid transition `s -> next` (next may be the sink).
    pub fn action_of(&self, s: StateId, next: StateId) -> Result<usize, PolicyError> {
        if next == self.sink_id() {
            return Ok(ACTION_TERMINATE);
        }
        if next == s + 1 {
            return Ok(ACTION_RIGHT);
        }
        if next == s + self.n as StateId {
            return Ok(ACTION_UP);
        }
        Err(PolicyError::NotATransition(s, next))
    }

    /// Backward head id of the parent `prev` of `s`.
    pub fn parent_action_of(&self, prev: StateId, s: StateId) -> Result<usize, PolicyError> {
        if prev + 1 == s {
            return Ok(PARENT_FROM_LEFT);
        }
        if prev + self.n as StateId == s {
            return Ok(PARENT_FROM_BELOW);
        }
        Err(PolicyError::NotATransition(prev, s))
    }

    fn matvec(&self, name: &str, x: &[f64], out: &mut Vec<f64>) {
        let s = self.layout.slice(name);
        debug_assert_eq!(s.cols, x.len());
        out.clear();
        for r in 0..s.rows {
            let row = &self.params[s.offset + r * s.cols..s.offset + (r + 1) * s.cols];
            out.push(row.iter().zip(x).map(|(w, v)| w * v).sum());
        }
    }

    fn add_bias_tanh(&self, name: &str, v: &mut [f64]) {
        let s = self.layout.slice(name);
        for (i, x) in v.iter_mut().enumerate() {
            *x = (*x + self.params[s.offset + i]).tanh();
        }
    }

    /// Plain trunk + heads at one state.
    pub fn heads(&self, a: usize, b: usize) -> HeadValues {
        let mut x = Vec::new();
        self.encode_state(a, b, &mut x);
        let mut h = Vec::new();
        let mut next = Vec::new();
        self.matvec("w0", &x, &mut h);
        self.add_bias_tanh("b0", &mut h);
        for l in 1..self.config.hidden_layers {
            self.matvec(&format!("w{l}"), &h, &mut next);
            self.add_bias_tanh(&format!("b{l}"), &mut next);
            std::mem::swap(&mut h, &mut next);
        }
        let mut head = Vec::new();
        self.matvec("w_pf", &h, &mut head);
        let b_pf = self.layout.slice("b_pf");
        let pf_logits = [
            head[0] + self.params[b_pf.offset],
            head[1] + self.params[b_pf.offset + 1],
            head[2] + self.params[b_pf.offset + 2],
        ];
        let pb_logits = if self.config.learn_backward {
            self.matvec("w_pb", &h, &mut head);
            let b_pb = self.layout.slice("b_pb");
            Some([
                head[0] + self.params[b_pb.offset],
                head[1] + self.params[b_pb.offset + 1],
            ])
        } else {
            None
        };
        let flow_raw = if self.config.parametrization != Parametrization::Tb {
            self.matvec("w_flow", &h, &mut head);
            let b_flow = self.layout.slice("b_flow");
            Some(head[0] + self.params[b_flow.offset])
        } else {
            None
        };
        HeadValues {
            pf_logits,
            pb_logits,
            flow_raw,
        }
    }

    /// Forward probabilities over valid actions, zero on invalid ones,
    /// indexed by action id.
    pub fn forward_probs_by_action(&self, a: usize, b: usize) -> [f64; 3] {
        let heads = self.heads(a, b);
        masked_softmax(&heads.pf_logits, &self.valid_actions(a, b))
    }

    /// Log-probability of `action` at `(a, b)` under the masked softmax.
    pub fn log_pf(&self, a: usize, b: usize, action: usize) -> f64 {
        let heads = self.heads(a, b);
        masked_log_softmax(&heads.pf_logits, &self.valid_actions(a, b), action)
    }

    /// Backward probabilities aligned with ascending parents of `(a, b)`:
    /// `(a, b-1)` first when present, then `(a-1, b)`. Uniform unless the
    /// backward head is learned.
    pub fn parent_probs(&self, a: usize, b: usize) -> Vec<f64> {
        let valid = self.valid_parents(a, b);
        let n_par = valid.iter().filter(|&&v| v).count();
        debug_assert!(n_par >= 1, "source has no parents");
        if !self.config.learn_backward {
            return vec![1.0 / n_par as f64; n_par];
        }
        let heads = self.heads(a, b);
        let logits = heads.pb_logits.expect("learned backward head");
        let by_action = masked_softmax_2(&logits, &valid);
        // Ascending parent order: (a, b-1) = from below, then (a-1, b).
        let mut out = Vec::with_capacity(n_par);
        if valid[PARENT_FROM_BELOW] {
            out.push(by_action[PARENT_FROM_BELOW]);
        }
        if valid[PARENT_FROM_LEFT] {
            out.push(by_action[PARENT_FROM_LEFT]);
        }
        out
    }

    /// Log backward probability of arriving from the parent reached by
    /// `parent_action`.
    pub fn log_pb(&self, a: usize, b: usize, parent_action: usize) -> f64 {
        let valid = self.valid_parents(a, b);
        debug_assert!(valid[parent_action]);
        if !self.config.learn_backward {
            let n_par = valid.iter().filter(|&&v| v).count();
            return -( n_par as f64).ln();
        }
        let heads = self.heads(a, b);
        let logits = heads.pb_logits.expect("learned backward head");
        let full = [logits[0], logits[1], 0.0];
        let mask = [valid[0], valid[1], false];
        masked_log_softmax(&full, &mask, parent_action)
    }

    /// Log state flow: the DB flow-head output, offset by `log R(s)` under
    /// the forward-looking parametrization.
    pub fn log_state_flow(
        &self,
        a: usize,
        b: usize,
        reward: &TrackedReward<'_>,
    ) -> Result<f64, PolicyError> {
        let heads = self.heads(a, b);
        let raw = heads.flow_raw.ok_or(PolicyError::NoFlowHead)?;
        Ok(match self.config.parametrization {
            Parametrization::Db => raw,
            Parametrization::FlDb => reward.ln(self.state_index(a, b)) + raw,
            Parametrization::Tb => unreachable!("flow head absent under TB"),
        })
    }

    /// Records trunk and heads for one state on the tape. The tape must have
    /// been created from this policy's parameter vector.
    pub fn taped_heads(&self, tape: &mut Tape, a: usize, b: usize) -> TapedHeads {
        let mut x = Vec::new();
        self.encode_state(a, b, &mut x);
        let mut acts = tape.constants(&x);
        for l in 0..self.config.hidden_layers {
            let w = self.layout.slice(&format!("w{l}"));
            let bias = self.layout.slice(&format!("b{l}"));
            let dots: Vec<Node> = (0..w.rows)
                .map(|r| {
                    let row = tape.param_range(w.offset + r * w.cols, w.cols);
                    tape.dot(row, acts).expect("row length matches activations")
                })
                .collect();
            let sums: Vec<Node> = dots
                .iter()
                .enumerate()
                .map(|(r, &d)| {
                    let bnode = tape.param(bias.offset + r);
                    tape.add(d, bnode)
                })
                .collect();
            let mut last = sums[0];
            for &s in &sums {
                last = tape.tanh(s);
            }
            // Tanh nodes are contiguous; reconstruct the range from the last id.
            acts = crate::autodiff::NodeRange::ending_at(last, w.rows);
        }
        let pf = self.head_nodes(tape, "w_pf", "b_pf", acts, 3);
        let pf_logits = [pf[0], pf[1], pf[2]];
        let pb_logits = if self.config.learn_backward {
            let pb = self.head_nodes(tape, "w_pb", "b_pb", acts, 2);
            Some([pb[0], pb[1]])
        } else {
            None
        };
        let flow_raw = if self.config.parametrization != Parametrization::Tb {
            Some(self.head_nodes(tape, "w_flow", "b_flow", acts, 1)[0])
        } else {
            None
        };
        TapedHeads {
            pf_logits,
            pb_logits,
            flow_raw,
        }
    }

    fn head_nodes(
        &self,
        tape: &mut Tape,
        w_name: &str,
        b_name: &str,
        acts: crate::autodiff::NodeRange,
        rows: usize,
    ) -> Vec<Node> {
        let w = self.layout.slice(w_name);
        let bias = self.layout.slice(b_name);
        debug_assert_eq!(w.rows, rows);
        (0..rows)
            .map(|r| {
                let row = tape.param_range(w.offset + r * w.cols, w.cols);
                let d = tape.dot(row, acts).expect("head row matches trunk width");
                let bnode = tape.param(bias.offset + r);
                tape.add(d, bnode)
            })
            .collect()
    }

    /// Taped log P_F of `action` at `(a, b)`.
    pub fn taped_log_pf(
        &self,
        tape: &mut Tape,
        heads: &TapedHeads,
        a: usize,
        b: usize,
        action: usize,
    ) -> Node {
        let valid = self.valid_actions(a, b);
        debug_assert!(valid[action]);
        let picked: Vec<Node> = (0..3)
            .filter(|&i| valid[i])
            .map(|i| heads.pf_logits[i])
            .collect();
        let lse = tape.logsumexp(&picked);
        tape.sub(heads.pf_logits[action], lse)
    }

    /// Taped log P_B of the parent reached by `parent_action` at `(a, b)`;
    /// a constant node under the uniform backward.
    pub fn taped_log_pb(
        &self,
        tape: &mut Tape,
        heads: &TapedHeads,
        a: usize,
        b: usize,
        parent_action: usize,
    ) -> Node {
        let valid = self.valid_parents(a, b);
        debug_assert!(valid[parent_action]);
        if !self.config.learn_backward {
            let n_par = valid.iter().filter(|&&v| v).count();
            return tape.constant(-(n_par as f64).ln());
        }
        let logits = heads.pb_logits.expect("learned backward head");
        let picked: Vec<Node> = (0..2).filter(|&i| valid[i]).map(|i| logits[i]).collect();
        let lse = tape.logsumexp(&picked);
        tape.sub(logits[parent_action], lse)
    }

    /// Taped log state flow; reads `R` under FL-DB.
    pub fn taped_log_flow(
        &self,
        tape: &mut Tape,
        heads: &TapedHeads,
        a: usize,
        b: usize,
        reward: &TrackedReward<'_>,
    ) -> Result<Node, PolicyError> {
        let raw = heads.flow_raw.ok_or(PolicyError::NoFlowHead)?;
        Ok(match self.config.parametrization {
            Parametrization::Db => raw,
            Parametrization::FlDb => tape.affine(raw, 1.0, reward.ln(self.state_index(a, b))),
            Parametrization::Tb => unreachable!("flow head absent under TB"),
        })
    }
}

/// Softmax over the valid subset, zeros elsewhere, indexed by action id.
pub fn masked_softmax(logits: &[f64; 3], valid: &[bool; 3]) -> [f64; 3] {
    let m = logits
        .iter()
        .zip(valid)
        .filter(|(_, &v)| v)
        .map(|(&l, _)| l)
        .fold(f64::NEG_INFINITY, f64::max);
    let mut out = [0.0; 3];
    let mut total = 0.0;
    for i in 0..3 {
        if valid[i] {
            out[i] = (logits[i] - m).exp();
            total += out[i];
        }
    }
    for v in &mut out {
        *v /= total;
    }
    out
}

fn masked_softmax_2(logits: &[f64; 2], valid: &[bool; 2]) -> [f64; 2] {
    let full = [logits[0], logits[1], f64::NEG_INFINITY];
    let mask = [valid[0], valid[1], false];
    let sm = masked_softmax(&full, &mask);
    [sm[0], sm[1]]
}

/// Log of the masked softmax at `pick`.
pub fn masked_log_softmax(logits: &[f64; 3], valid: &[bool; 3], pick: usize) -> f64 {
    debug_assert!(valid[pick]);
    let m = logits
        .iter()
        .zip(valid)
        .filter(|(_, &v)| v)
        .map(|(&l, _)| l)
        .fold(f64::NEG_INFINITY, f64::max);
    let total: f64 = (0..3)
        .filter(|&i| valid[i])
        .map(|i| (logits[i] - m).exp())
        .sum();
    logits[pick] - m - total.ln()
}

/// Per-state forward distribution aligned with `dag.children(s)`.
pub trait ForwardPolicy {
    fn action_probs(&self, s: StateId) -> Vec<f64>;
}

impl ForwardPolicy for GridPolicy {
    fn action_probs(&self, s: StateId) -> Vec<f64> {
        let (a, b) = self.coords(s);
        let by_action = self.forward_probs_by_action(a, b);
        let valid = self.valid_actions(a, b);
        let mut out = Vec::with_capacity(3);
        if valid[ACTION_RIGHT] {
            out.push(by_action[ACTION_RIGHT]);
        }
        if valid[ACTION_UP] {
            out.push(by_action[ACTION_UP]);
        }
        out.push(by_action[ACTION_TERMINATE]);
        out
    }
}

/// Per-state backward distribution aligned with `dag.parents(s)`.
pub trait BackwardPolicy {
    fn parent_probs(&self, s: StateId) -> Vec<f64>;
}

impl BackwardPolicy for GridPolicy {
    fn parent_probs(&self, s: StateId) -> Vec<f64> {
        let (a, b) = self.coords(s);
        GridPolicy::parent_probs(self, a, b)
    }
}

/// Uniform backward over the DAG's parent sets.
pub struct UniformBackward<'a> {
    pub dag: &'a PointedDag,
}

impl BackwardPolicy for UniformBackward<'_> {
    fn parent_probs(&self, s: StateId) -> Vec<f64> {
        let k = self.dag.parent_count(s);
        vec![1.0 / k as f64; k]
    }
}

/// Explicit per-state action probabilities aligned with children order.
#[derive(Debug, Clone)]
pub struct TabularPolicy {
    probs: Vec<Vec<f64>>,
}

impl TabularPolicy {
    pub fn new(probs: Vec<Vec<f64>>) -> Self {
        Self { probs }
    }

    pub fn uniform(dag: &PointedDag) -> Self {
        let probs = (0..dag.n_states() as StateId)
            .map(|s| {
                if s == dag.sink() {
                    return Vec::new();
                }
                let k = dag.children(s).expect("non-sink").len();
                vec![1.0 / k as f64; k]
            })
            .collect();
        Self { probs }
    }

    /// Dirichlet(1) draws per state: strictly positive, sums to one.
    pub fn random(dag: &PointedDag, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let probs = (0..dag.n_states() as StateId)
            .map(|s| {
                if s == dag.sink() {
                    return Vec::new();
                }
                let k = dag.children(s).expect("non-sink").len();
                let mut draws: Vec<f64> =
                    (0..k).map(|_| -rng.random::<f64>().max(1e-300).ln()).collect();
                let total: f64 = draws.iter().sum();
                for d in &mut draws {
                    *d /= total;
                }
                draws
            })
            .collect();
        Self { probs }
    }
}

impl ForwardPolicy for TabularPolicy {
    fn action_probs(&self, s: StateId) -> Vec<f64> {
        self.probs[s as usize].clone()
    }
}

// ---------------------------------------------------------------------------
// Checkpoints
// ---------------------------------------------------------------------------

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("checkpoint parse error: {0}")]
    Parse(String),
}

/// Writes a stable text checkpoint: header of `key = value` lines (including
/// the grid spec) followed by named `(slice, shape, values)` triples with 17
/// significant digits.
pub fn save_checkpoint(
    path: &Path,
    policy: &GridPolicy,
    spec: &GridSpec,
) -> Result<(), CheckpointError> {
    let mut out = String::new();
    out.push_str("gflow-lab checkpoint v1\n");
    out.push_str(&format!("grid_n = {}\n", spec.n()));
    out.push_str(&format!("width = {}\n", policy.config.width));
    out.push_str(&format!("hidden_layers = {}\n", policy.config.hidden_layers));
    out.push_str(&format!("encoding = {}\n", policy.config.encoding));
    out.push_str(&format!(
        "parametrization = {}\n",
        policy.config.parametrization
    ));
    out.push_str(&format!("learn_backward = {}\n", policy.config.learn_backward));
    let modes: Vec<String> = spec
        .modes()
        .iter()
        .map(|m| format!("{},{},{},{}", m.a_lo, m.a_hi, m.b_lo, m.b_hi))
        .collect();
    out.push_str(&format!("modes = {}\n", modes.join(";")));
    for s in policy.layout.slices() {
        out.push_str(&format!("slice {} {} {}\n", s.name, s.rows, s.cols));
        for r in 0..s.rows {
            let row: Vec<String> = (0..s.cols)
                .map(|c| format!("{:.16e}", policy.params[s.offset + r * s.cols + c]))
                .collect();
            out.push_str(&row.join(" "));
            out.push('\n');
        }
    }
    out.push_str("end\n");
    let mut f = fs::File::create(path)?;
    f.write_all(out.as_bytes())?;
    Ok(())
}

/// Reloads a checkpoint written by [`save_checkpoint`].
pub fn load_checkpoint(path: &Path) -> Result<(GridPolicy, GridSpec), CheckpointError> {
    let text = fs::read_to_string(path)?;
    let mut lines = text.lines();
    let magic = lines
        .next()
        .ok_or_else(|| CheckpointError::Parse("empty file".into()))?;
    if magic.trim() != "gflow-lab checkpoint v1" {
        return Err(CheckpointError::Parse(format!(
            "unrecognized header: {magic}"
        )));
    }
    let mut header = std::collections::HashMap::new();
    let mut slice_lines: Vec<&str> = Vec::new();
    for line in lines.by_ref() {
        if line.starts_with("slice ") {
            slice_lines.push(line);
            break;
        }
        if line.trim() == "end" {
            break;
        }
        if let Some((k, v)) = line.split_once('=') {
            header.insert(k.trim().to_string(), v.trim().to_string());
        }
    }
    let get = |k: &str| -> Result<&String, CheckpointError> {
        header
            .get(k)
            .ok_or_else(|| CheckpointError::Parse(format!("missing header key {k}")))
    };
    let n: usize = get("grid_n")?
        .parse()
        .map_err(|e| CheckpointError::Parse(format!("grid_n: {e}")))?;
    let width: usize = get("width")?
        .parse()
        .map_err(|e| CheckpointError::Parse(format!("width: {e}")))?;
    let hidden_layers: usize = get("hidden_layers")?
        .parse()
        .map_err(|e| CheckpointError::Parse(format!("hidden_layers: {e}")))?;
    let encoding = match get("encoding")?.as_str() {
        "onehot" => Encoding::OneHot,
        "scalar" => Encoding::Scalar,
        other => return Err(CheckpointError::Parse(format!("encoding: {other}"))),
    };
    let parametrization = match get("parametrization")?.as_str() {
        "tb" => Parametrization::Tb,
        "db" => Parametrization::Db,
        "fldb" => Parametrization::FlDb,
        other => return Err(CheckpointError::Parse(format!("parametrization: {other}"))),
    };
    let learn_backward: bool = get("learn_backward")?
        .parse()
        .map_err(|e| CheckpointError::Parse(format!("learn_backward: {e}")))?;
    let modes_str = get("modes")?;
    let mut modes = Vec::new();
    if !modes_str.is_empty() {
        for part in modes_str.split(';') {
            let nums: Vec<usize> = part
                .split(',')
                .map(|x| x.trim().parse())
                .collect::<Result<_, _>>()
                .map_err(|e| CheckpointError::Parse(format!("modes: {e}")))?;
            if nums.len() != 4 {
                return Err(CheckpointError::Parse(format!("mode region: {part}")));
            }
            modes.push(ModeRegion {
                a_lo: nums[0],
                a_hi: nums[1],
                b_lo: nums[2],
                b_hi: nums[3],
            });
        }
    }
    let spec = GridSpec::new(n, modes)
        .map_err(|e| CheckpointError::Parse(format!("grid spec: {e}")))?;
    let config = PolicyConfig {
        width,
        hidden_layers,
        encoding,
        parametrization,
        learn_backward,
    };
    let mut policy = GridPolicy::new(n, config);

    // Re-scan from the first slice line onward.
    let mut rest = text
        .lines()
        .skip_while(|l| !l.starts_with("slice "))
        .peekable();
    let _ = slice_lines;
    while let Some(line) = rest.next() {
        if line.trim() == "end" {
            break;
        }
        let parts: Vec<&str> = line.split_whitespace().collect();
        if parts.len() != 4 || parts[0] != "slice" {
            return Err(CheckpointError::Parse(format!("bad slice line: {line}")));
        }
        let name = parts[1];
        let rows: usize = parts[2]
            .parse()
            .map_err(|e| CheckpointError::Parse(format!("rows: {e}")))?;
        let cols: usize = parts[3]
            .parse()
            .map_err(|e| CheckpointError::Parse(format!("cols: {e}")))?;
        let info = policy
            .layout
            .try_slice(name)
            .ok_or_else(|| CheckpointError::Parse(format!("unknown slice {name}")))?
            .clone();
        if info.rows != rows || info.cols != cols {
            return Err(CheckpointError::Parse(format!(
                "slice {name} has shape {rows}x{cols}, expected {}x{}",
                info.rows, info.cols
            )));
        }
        for r in 0..rows {
            let row_line = rest
                .next()
                .ok_or_else(|| CheckpointError::Parse(format!("slice {name} truncated")))?;
            let vals: Vec<f64> = row_line
                .split_whitespace()
                .map(|x| x.parse())
                .collect::<Result<_, _>>()
                .map_err(|e| CheckpointError::Parse(format!("slice {name}: {e}")))?;
            if vals.len() != cols {
                return Err(CheckpointError::Parse(format!(
                    "slice {name} row {r} has {} values, expected {cols}",
                    vals.len()
                )));
            }
            policy.params[info.offset + r * cols..info.offset + (r + 1) * cols]
                .copy_from_slice(&vals);
        }
    }
    Ok((policy, spec))
}
