//! Pointed-DAG representation and the brute-force trajectory oracles that the
//! rest of the crate tests against.
//!
//! States carry dense integer indices assigned at construction; every ordering
//! (children, parents, topological) breaks ties by ascending index so action
//! spaces are reproducible across runs.

use thiserror::Error;

/// Dense state index. The source and sink are ordinary indices.
pub type StateId = u32;

/// Default guard on [`PointedDag::enumerate_trajectories`].
pub const DEFAULT_TRAJECTORY_CAP: usize = 10_000_000;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum GraphError {
    #[error("state {0} out of range")]
    UnknownState(StateId),
    #[error("self loop at state {0}")]
    SelfLoop(StateId),
    #[error("duplicate edge {0} -> {1}")]
    DuplicateEdge(StateId, StateId),
    #[error("graph needs at least two states")]
    TooSmall,
    #[error("no state with in-degree 0")]
    NoSource,
    #[error("multiple states with in-degree 0: {0} and {1}")]
    MultipleSources(StateId, StateId),
    #[error("no state with out-degree 0")]
    NoSink,
    #[error("multiple states with out-degree 0: {0} and {1}")]
    MultipleSinks(StateId, StateId),
    #[error("cycle detected through back-edge {from} -> {to}")]
    Cycle { from: StateId, to: StateId },
    #[error("state {0} is unreachable from the source")]
    Unreachable(StateId),
    #[error("state {0} cannot reach the sink")]
    NotCoReachable(StateId),
    #[error("children of the sink are undefined")]
    ChildrenOfSink,
    #[error("parents of the source are undefined")]
    ParentsOfSource,
    #[error("trajectory count exceeded the cap of {cap}")]
    TrajectoryCapExceeded { cap: usize },
    #[error("invalid trajectory: {0}")]
    InvalidTrajectory(String),
}

/// A DAG with a unique source (no in-edges) and unique sink (no out-edges).
///
/// Terminal states are exactly the states with an edge to the sink. Immutable
/// after construction and safe to share read-only across concurrent runs.
#[derive(Debug, Clone)]
pub struct PointedDag {
    children: Vec<Vec<StateId>>,
    parents: Vec<Vec<StateId>>,
    source: StateId,
    sink: StateId,
    terminal: Vec<bool>,
    topo: Vec<StateId>,
}

impl PointedDag {
    /// Builds and validates a pointed DAG from an edge list over states
    /// `0..n_states`. The source and sink are inferred from degrees.
    pub fn new(n_states: usize, edges: &[(StateId, StateId)]) -> Result<Self, GraphError> {
        if n_states < 2 {
            return Err(GraphError::TooSmall);
        }
        let n = n_states;
        let mut children: Vec<Vec<StateId>> = vec![Vec::new(); n];
        let mut parents: Vec<Vec<StateId>> = vec![Vec::new(); n];
        for &(u, v) in edges {
            if u as usize >= n {
                return Err(GraphError::UnknownState(u));
            }
            if v as usize >= n {
                return Err(GraphError::UnknownState(v));
            }
            if u == v {
                return Err(GraphError::SelfLoop(u));
            }
            children[u as usize].push(v);
            parents[v as usize].push(u);
        }
        for (u, kids) in children.iter_mut().enumerate() {
            kids.sort_unstable();
            if let Some(w) = kids.windows(2).find(|w| w[0] == w[1]) {
                return Err(GraphError::DuplicateEdge(u as StateId, w[0]));
            }
        }
        for pars in parents.iter_mut() {
            pars.sort_unstable();
        }

        let source = unique_state_with(n, |s| parents[s].is_empty())
            .map_err(|two| match two {
                None => GraphError::NoSource,
                Some((a, b)) => GraphError::MultipleSources(a, b),
            })?;
        let sink = unique_state_with(n, |s| children[s].is_empty()).map_err(|two| match two {
            None => GraphError::NoSink,
            Some((a, b)) => GraphError::MultipleSinks(a, b),
        })?;

        let topo = kahn_topological_order(n, &children, &parents)?;

        // Reachability from the source over child edges.
        let mut seen = vec![false; n];
        seen[source as usize] = true;
        let mut stack = vec![source];
        while let Some(s) = stack.pop() {
            for &c in &children[s as usize] {
                if !seen[c as usize] {
                    seen[c as usize] = true;
                    stack.push(c);
                }
            }
        }
        if let Some(s) = seen.iter().position(|&r| !r) {
            return Err(GraphError::Unreachable(s as StateId));
        }

        // Co-reachability to the sink over parent edges.
        let mut coseen = vec![false; n];
        coseen[sink as usize] = true;
        let mut stack = vec![sink];
        while let Some(s) = stack.pop() {
            for &p in &parents[s as usize] {
                if !coseen[p as usize] {
                    coseen[p as usize] = true;
                    stack.push(p);
                }
            }
        }
        if let Some(s) = coseen.iter().position(|&r| !r) {
            return Err(GraphError::NotCoReachable(s as StateId));
        }

        let terminal: Vec<bool> = (0..n)
            .map(|s| children[s].binary_search(&sink).is_ok())
            .collect();

        Ok(Self {
            children,
            parents,
            source,
            sink,
            terminal,
            topo,
        })
    }

    pub fn n_states(&self) -> usize {
        self.children.len()
    }

    pub fn source(&self) -> StateId {
        self.source
    }

    pub fn sink(&self) -> StateId {
        self.sink
    }

    pub fn is_terminal(&self, s: StateId) -> bool {
        self.terminal[s as usize]
    }

    /// Terminal states in ascending index order.
    pub fn terminal_states(&self) -> Vec<StateId> {
        (0..self.n_states() as StateId)
            .filter(|&s| self.terminal[s as usize])
            .collect()
    }

    /// Children of `s` in ascending index order.
    pub fn children(&self, s: StateId) -> Result<&[StateId], GraphError> {
        if s as usize >= self.n_states() {
            return Err(GraphError::UnknownState(s));
        }
        if s == self.sink {
            return Err(GraphError::ChildrenOfSink);
        }
        Ok(&self.children[s as usize])
    }

    /// Parents of `s` in ascending index order.
    pub fn parents(&self, s: StateId) -> Result<&[StateId], GraphError> {
        if s as usize >= self.n_states() {
            return Err(GraphError::UnknownState(s));
        }
        if s == self.source {
            return Err(GraphError::ParentsOfSource);
        }
        Ok(&self.parents[s as usize])
    }

    /// Number of parents, usable on any non-source state.
    pub fn parent_count(&self, s: StateId) -> usize {
        self.parents[s as usize].len()
    }

    /// A topological order with ties broken by ascending index; the source is
    /// first and the sink last.
    pub fn topological_order(&self) -> &[StateId] {
        &self.topo
    }

    /// Every complete source-to-sink path, each exactly once, in depth-first
    /// order following ascending children. Aborts beyond
    /// [`DEFAULT_TRAJECTORY_CAP`] paths.
    pub fn enumerate_trajectories(&self) -> Result<Vec<Trajectory>, GraphError> {
        self.enumerate_trajectories_capped(DEFAULT_TRAJECTORY_CAP)
    }

    pub fn enumerate_trajectories_capped(&self, cap: usize) -> Result<Vec<Trajectory>, GraphError> {
        let mut out = Vec::new();
        let mut path: Vec<StateId> = vec![self.source];
        let mut cursor: Vec<usize> = vec![0];
        while let Some(&s) = path.last() {
            if s == self.sink {
                if out.len() >= cap {
                    return Err(GraphError::TrajectoryCapExceeded { cap });
                }
                out.push(Trajectory {
                    states: path.clone(),
                });
                path.pop();
                cursor.pop();
                continue;
            }
            let kids = &self.children[s as usize];
            let c = cursor.last_mut().expect("cursor tracks path");
            if *c == kids.len() {
                path.pop();
                cursor.pop();
                continue;
            }
            let next = kids[*c];
            *c += 1;
            path.push(next);
            cursor.push(0);
        }
        Ok(out)
    }
}

/// Finds the unique state satisfying `pred`, or reports zero/two witnesses.
fn unique_state_with(
    n: usize,
    pred: impl Fn(usize) -> bool,
) -> Result<StateId, Option<(StateId, StateId)>> {
    let mut found: Option<StateId> = None;
    for s in 0..n {
        if pred(s) {
            match found {
                None => found = Some(s as StateId),
                Some(first) => return Err(Some((first, s as StateId))),
            }
        }
    }
    found.ok_or(None)
}

fn kahn_topological_order(
    n: usize,
    children: &[Vec<StateId>],
    parents: &[Vec<StateId>],
) -> Result<Vec<StateId>, GraphError> {
    use std::cmp::Reverse;
    use std::collections::BinaryHeap;

    let mut indeg: Vec<usize> = parents.iter().map(Vec::len).collect();
    let mut heap: BinaryHeap<Reverse<StateId>> = (0..n as StateId)
        .filter(|&s| indeg[s as usize] == 0)
        .map(Reverse)
        .collect();
    let mut order = Vec::with_capacity(n);
    while let Some(Reverse(s)) = heap.pop() {
        order.push(s);
        for &c in &children[s as usize] {
            indeg[c as usize] -= 1;
            if indeg[c as usize] == 0 {
                heap.push(Reverse(c));
            }
        }
    }
    if order.len() < n {
        let mut in_order = vec![false; n];
        for &s in &order {
            in_order[s as usize] = true;
        }
        let from = (0..n).find(|&s| !in_order[s]).expect("some state missing");
        let to = children[from]
            .iter()
            .copied()
            .find(|&c| !in_order[c as usize])
            .expect("unprocessed state keeps an unprocessed child");
        return Err(GraphError::Cycle {
            from: from as StateId,
            to,
        });
    }
    Ok(order)
}

/// An ordered walk source -> ... -> terminal -> sink.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Trajectory {
    states: Vec<StateId>,
}

impl Trajectory {
    /// Validates the walk against the DAG: starts at the source, ends at the
    /// sink through a terminal state, and every consecutive pair is an edge.
    pub fn new(states: Vec<StateId>, dag: &PointedDag) -> Result<Self, GraphError> {
        if states.len() < 2 {
            return Err(GraphError::InvalidTrajectory(
                "needs at least source and sink".into(),
            ));
        }
        if states[0] != dag.source() {
            return Err(GraphError::InvalidTrajectory(format!(
                "starts at {} instead of the source",
                states[0]
            )));
        }
        if *states.last().unwrap() != dag.sink() {
            return Err(GraphError::InvalidTrajectory(format!(
                "ends at {} instead of the sink",
                states.last().unwrap()
            )));
        }
        let pre_sink = states[states.len() - 2];
        if !dag.is_terminal(pre_sink) {
            return Err(GraphError::InvalidTrajectory(format!(
                "state {pre_sink} before the sink is not terminal"
            )));
        }
        for w in states.windows(2) {
            let kids = dag.children(w[0])?;
            if kids.binary_search(&w[1]).is_err() {
                return Err(GraphError::InvalidTrajectory(format!(
                    "{} -> {} is not an edge",
                    w[0], w[1]
                )));
            }
        }
        Ok(Self { states })
    }

    /// Wraps a walk that is known valid (e.g. produced by the sampler).
    pub fn from_states_unchecked(states: Vec<StateId>) -> Self {
        debug_assert!(states.len() >= 2);
        Self { states }
    }

    /// Full state sequence including source and sink.
    pub fn states(&self) -> &[StateId] {
        &self.states
    }

    /// The terminal state, i.e. the state just before the sink.
    pub fn terminal(&self) -> StateId {
        self.states[self.states.len() - 2]
    }

    /// Number of interior states n in source -> s_1 .. s_n -> sink.
    pub fn interior_len(&self) -> usize {
        self.states.len() - 2
    }

    /// Number of forward transitions, including the terminating one.
    pub fn n_transitions(&self) -> usize {
        self.states.len() - 1
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::hypergrid::{build_grid, GridSpec};
    use proptest::prelude::*;

    fn grid(n: usize) -> (GridSpec, PointedDag) {
        let spec = GridSpec::plain(n).unwrap();
        let dag = build_grid(&spec);
        (spec, dag)
    }

    /// Independent path-count oracle: dynamic programming over ascending
    /// indices is valid on grids because every edge increases the index.
    fn dp_trajectory_count(dag: &PointedDag) -> u64 {
        let mut paths = vec![0u64; dag.n_states()];
        paths[dag.source() as usize] = 1;
        for &s in dag.topological_order() {
            if s == dag.sink() {
                continue;
            }
            for &c in dag.children(s).unwrap() {
                paths[c as usize] += paths[s as usize];
            }
        }
        paths[dag.sink() as usize]
    }

    #[test]
    fn children_of_grid_states() {
        let (spec, dag) = grid(2);
        let sf = dag.sink();
        assert_eq!(
            dag.children(spec.idx(0, 0)).unwrap(),
            &[spec.idx(1, 0), spec.idx(0, 1), sf]
        );
        assert_eq!(dag.children(spec.idx(1, 1)).unwrap(), &[sf]);

        let (spec3, dag3) = grid(3);
        assert_eq!(
            dag3.children(spec3.idx(1, 0)).unwrap(),
            &[spec3.idx(2, 0), spec3.idx(1, 1), dag3.sink()]
        );
    }

    #[test]
    fn parents_of_grid_states() {
        let (spec, dag) = grid(2);
        // Ascending index order: (1,0) has index 1, (0,1) has index 2.
        assert_eq!(
            dag.parents(spec.idx(1, 1)).unwrap(),
            &[spec.idx(1, 0), spec.idx(0, 1)]
        );
        assert_eq!(dag.parents(spec.idx(1, 0)).unwrap(), &[spec.idx(0, 0)]);
        // All grid states are terminal, so the sink has N*N parents.
        assert_eq!(dag.parents(dag.sink()).unwrap().len(), 4);
        let (_, dag5) = grid(5);
        assert_eq!(dag5.parents(dag5.sink()).unwrap().len(), 25);
    }

    #[test]
    fn child_and_parent_query_errors() {
        let (_, dag) = grid(2);
        assert_eq!(dag.children(dag.sink()), Err(GraphError::ChildrenOfSink));
        assert_eq!(dag.parents(dag.source()), Err(GraphError::ParentsOfSource));
        assert_eq!(dag.children(99), Err(GraphError::UnknownState(99)));
    }

    #[test]
    fn enumerate_two_by_two_grid() {
        let (spec, dag) = grid(2);
        let trajs = dag.enumerate_trajectories().unwrap();
        assert_eq!(trajs.len(), 5);
        // One path each to (0,0), (1,0), (0,1); two to (1,1).
        let terminating_at = |a, b| {
            trajs
                .iter()
                .filter(|t| t.terminal() == spec.idx(a, b))
                .count()
        };
        assert_eq!(terminating_at(0, 0), 1);
        assert_eq!(terminating_at(1, 0), 1);
        assert_eq!(terminating_at(0, 1), 1);
        assert_eq!(terminating_at(1, 1), 2);
    }

    #[test]
    fn enumerate_single_edge_dag() {
        let dag = PointedDag::new(2, &[(0, 1)]).unwrap();
        let trajs = dag.enumerate_trajectories().unwrap();
        assert_eq!(trajs.len(), 1);
        assert_eq!(trajs[0].states(), &[0, 1]);
        assert_eq!(trajs[0].interior_len(), 0);
    }

    #[test]
    fn enumeration_matches_dp_count_up_to_five() {
        for n in 2..=5 {
            let (_, dag) = grid(n);
            let trajs = dag.enumerate_trajectories().unwrap();
            assert_eq!(trajs.len() as u64, dp_trajectory_count(&dag), "grid {n}");
        }
    }

    #[test]
    fn enumeration_respects_cap() {
        let (_, dag) = grid(3);
        assert_eq!(
            dag.enumerate_trajectories_capped(10),
            Err(GraphError::TrajectoryCapExceeded { cap: 10 })
        );
    }

    #[test]
    fn topological_order_is_consistent() {
        let (spec, dag) = grid(2);
        let topo = dag.topological_order();
        let position = |s: StateId| topo.iter().position(|&t| t == s).unwrap();
        assert!(position(spec.idx(0, 0)) < position(spec.idx(1, 0)));
        assert!(position(spec.idx(0, 0)) < position(spec.idx(0, 1)));
        assert!(position(spec.idx(1, 1)) < position(dag.sink()));
        assert_eq!(topo[0], dag.source());
        assert_eq!(*topo.last().unwrap(), dag.sink());

        let chain = PointedDag::new(3, &[(0, 1), (1, 2)]).unwrap();
        assert_eq!(chain.topological_order(), &[0, 1, 2]);
    }

    #[test]
    fn cycle_is_reported_with_back_edge() {
        // 0 -> 1 -> 2 -> 1 cycles; 2 -> 3 keeps the sink unique.
        let err = PointedDag::new(4, &[(0, 1), (1, 2), (2, 1), (2, 3)]).unwrap_err();
        match err {
            GraphError::Cycle { from, to } => {
                assert!([(1, 2), (2, 1)].contains(&(from, to)));
            }
            other => panic!("expected cycle, got {other:?}"),
        }
    }

    #[test]
    fn degenerate_graphs_are_rejected() {
        assert_eq!(
            PointedDag::new(3, &[(0, 2), (1, 2)]).unwrap_err(),
            GraphError::MultipleSources(0, 1)
        );
        assert_eq!(
            PointedDag::new(3, &[(0, 1), (0, 2)]).unwrap_err(),
            GraphError::MultipleSinks(1, 2)
        );
        assert_eq!(
            PointedDag::new(2, &[(0, 1), (0, 1)]).unwrap_err(),
            GraphError::DuplicateEdge(0, 1)
        );
        // 3 is neither reachable nor co-reachable; the source check fires
        // first because 3 has no in-edges.
        assert_eq!(
            PointedDag::new(4, &[(0, 1), (1, 2), (3, 2)]).unwrap_err(),
            GraphError::MultipleSources(0, 3)
        );
    }

    #[test]
    fn trajectory_validation() {
        let (spec, dag) = grid(2);
        let ok = Trajectory::new(vec![0, spec.idx(1, 0), spec.idx(1, 1), dag.sink()], &dag);
        assert!(ok.is_ok());
        assert!(Trajectory::new(vec![spec.idx(1, 0), dag.sink()], &dag).is_err());
        assert!(Trajectory::new(vec![0, spec.idx(1, 1), dag.sink()], &dag).is_err());
        assert!(Trajectory::new(vec![0], &dag).is_err());
    }

    /// Random layered DAGs: edges only go to larger indices, every interior
    /// state gets at least one in- and out-edge, so the result is pointed.
    fn arb_pointed_dag() -> impl Strategy<Value = PointedDag> {
        (3usize..12, any::<u64>()).prop_map(|(n, seed)| {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let mut edges = Vec::new();
            for u in 0..n - 1 {
                for v in u + 1..n {
                    if rng.random::<f64>() < 0.35 {
                        edges.push((u as StateId, v as StateId));
                    }
                }
            }
            for v in 1..n {
                if !edges.iter().any(|&(_, b)| b == v as StateId) {
                    let u = rng.random_range(0..v);
                    edges.push((u as StateId, v as StateId));
                }
            }
            for u in 0..n - 1 {
                if !edges.iter().any(|&(a, _)| a == u as StateId) {
                    let v = rng.random_range(u + 1..n);
                    edges.push((u as StateId, v as StateId));
                }
            }
            edges.sort_unstable();
            edges.dedup();
            PointedDag::new(n, &edges).expect("layered construction is pointed")
        })
    }

    proptest! {
        #[test]
        fn adjacency_symmetry(dag in arb_pointed_dag()) {
            for s in 0..dag.n_states() as StateId {
                if s != dag.source() && s != dag.sink() {
                    for &p in dag.parents(s).unwrap() {
                        prop_assert!(dag.children(p).unwrap().contains(&s));
                    }
                    for &c in dag.children(s).unwrap() {
                        prop_assert!(dag.parents(c).unwrap().contains(&s));
                    }
                }
            }
        }

        #[test]
        fn topological_order_covers_all_edges(dag in arb_pointed_dag()) {
            let topo = dag.topological_order();
            prop_assert_eq!(topo.len(), dag.n_states());
            let mut pos = vec![0usize; dag.n_states()];
            for (i, &s) in topo.iter().enumerate() {
                pos[s as usize] = i;
            }
            for s in 0..dag.n_states() as StateId {
                if s == dag.sink() {
                    continue;
                }
                for &c in dag.children(s).unwrap() {
                    prop_assert!(pos[s as usize] < pos[c as usize]);
                }
            }
        }

        #[test]
        fn enumerated_trajectories_are_unique_and_valid(dag in arb_pointed_dag()) {
            let trajs = dag.enumerate_trajectories().unwrap();
            for t in &trajs {
                prop_assert!(Trajectory::new(t.states().to_vec(), &dag).is_ok());
            }
            let mut keys: Vec<&[StateId]> = trajs.iter().map(|t| t.states()).collect();
            keys.sort_unstable();
            keys.dedup();
            prop_assert_eq!(keys.len(), trajs.len());
        }
    }
}
