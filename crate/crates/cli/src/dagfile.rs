//! Text format for small custom DAGs used by `certify --dag`:
//!
//! ```text
//! # comment
//! states 4
//! edge 0 1
//! edge 0 2
//! edge 1 3
//! edge 2 3
//! reward 1 1.5
//! reward 2 0.5
//! ```
//!
//! The source and sink are inferred from degrees; every state with an edge to
//! the sink is terminal and requires a `reward` line.

use std::path::Path;

use gflow_core::graph::{PointedDag, StateId};
use gflow_core::hypergrid::RewardTable;

use crate::config::ConfigError;

pub fn load_dag_file(path: &Path) -> Result<(PointedDag, RewardTable), ConfigError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| ConfigError(format!("cannot read {}: {e}", path.display())))?;
    let mut n_states: Option<usize> = None;
    let mut edges: Vec<(StateId, StateId)> = Vec::new();
    let mut rewards: Vec<(StateId, f64)> = Vec::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let bad = |msg: &str| {
            ConfigError(format!("{}:{}: {msg}", path.display(), lineno + 1))
        };
        let parts: Vec<&str> = line.split_whitespace().collect();
        match parts.as_slice() {
            ["states", n] => {
                n_states = Some(n.parse().map_err(|_| bad("bad state count"))?);
            }
            ["edge", u, v] => {
                let u: StateId = u.parse().map_err(|_| bad("bad edge endpoint"))?;
                let v: StateId = v.parse().map_err(|_| bad("bad edge endpoint"))?;
                edges.push((u, v));
            }
            ["reward", s, r] => {
                let s: StateId = s.parse().map_err(|_| bad("bad reward state"))?;
                let r: f64 = r.parse().map_err(|_| bad("bad reward value"))?;
                rewards.push((s, r));
            }
            _ => return Err(bad("expected `states N`, `edge U V`, or `reward S R`")),
        }
    }
    let n = n_states.ok_or_else(|| ConfigError("dag file: missing `states N` line".into()))?;
    let dag = PointedDag::new(n, &edges)
        .map_err(|e| ConfigError(format!("dag file: {e}")))?;
    let terminals = dag.terminal_states();
    let mut values = vec![f64::NAN; terminals.len()];
    for (s, r) in rewards {
        let pos = terminals
            .binary_search(&s)
            .map_err(|_| ConfigError(format!("dag file: state {s} is not terminal")))?;
        values[pos] = r;
    }
    if let Some(i) = values.iter().position(|v| v.is_nan()) {
        return Err(ConfigError(format!(
            "dag file: missing reward for terminal state {}",
            terminals[i]
        )));
    }
    let table = RewardTable::from_values(&dag, &values)
        .map_err(|e| ConfigError(format!("dag file: {e}")))?;
    Ok((dag, table))
}
