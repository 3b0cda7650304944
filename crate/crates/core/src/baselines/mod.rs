//! Single-call search baselines over code solutions: greedy tree search with
//! draft/debug/improve operators, and a graph-search variant that adds
//! cross-branch aggregation. Evaluated against a seeded synthetic task model
//! or, in agent mode, one provider completion per operator.

pub mod llm;
pub mod mcgs;
pub mod simulate;

use std::collections::VecDeque;
use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use mcgs::{intra_branch_context, mcgs_aggregate, mcgs_step, McgsParams, NodeStats};
pub use simulate::{bench, render_bench_table, simulate_policy, simulate_with, BenchSummary, SearchPolicy, Simulation, StepRecord};

pub type NodeId = usize;

/// AIRA's draft count is not published; 5 is our default.
pub const DEFAULT_DRAFTS: usize = 5;
pub const DEFAULT_MEMORY_CAP: usize = 32;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Operator {
    Draft,
    Debug,
    Improve,
    Aggregate,
}

impl Operator {
    pub fn word(self) -> &'static str {
        match self {
            Self::Draft => "draft",
            Self::Debug => "debug",
            Self::Improve => "improve",
            Self::Aggregate => "aggregate",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Outcome {
    pub valid: bool,
    pub score: Option<f64>,
}

impl Outcome {
    pub fn valid(score: f64) -> Self {
        Self { valid: true, score: Some(score) }
    }

    pub fn invalid() -> Self {
        Self { valid: false, score: None }
    }
}

impl fmt::Display for Outcome {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.score {
            Some(s) if self.valid => write!(f, "valid score={s:?}"),
            _ => f.write_str("invalid"),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SolutionNode {
    pub id: NodeId,
    pub code_ref: String,
    pub result: Outcome,
    pub parent: Option<NodeId>,
    pub children: Vec<NodeId>,
    pub branch_id: usize,
    pub operator: Operator,
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum BaselineError {
    #[error("debug applied to a valid node {0}")]
    DebugOnValid(NodeId),
    #[error("improve applied to an invalid node {0}")]
    ImproveOnInvalid(NodeId),
    #[error("aggregation needs at least two branches with a valid node")]
    InsufficientBranches,
    #[error("tree is empty after the draft phase")]
    EmptyTree,
    #[error("unknown node {0}")]
    UnknownNode(NodeId),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("provider: {0}")]
    Provider(String),
}

/// Search tree with optional cross-branch provenance edges. Without those
/// edges it is a forest whose roots are drafts and aggregates.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SolutionGraph {
    pub nodes: Vec<SolutionNode>,
    /// `(aggregate node, source node)`.
    pub provenance: Vec<(NodeId, NodeId)>,
    next_branch: usize,
}

impl SolutionGraph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn node(&self, id: NodeId) -> Result<&SolutionNode, BaselineError> {
        self.nodes.get(id).ok_or(BaselineError::UnknownNode(id))
    }

    fn push(&mut self, parent: Option<NodeId>, proposal: Proposal, operator: Operator) -> NodeId {
        let id = self.nodes.len();
        let branch_id = match parent {
            Some(p) => self.nodes[p].branch_id,
            None => {
                self.next_branch += 1;
                self.next_branch - 1
            }
        };
        let result = if proposal.result.valid && proposal.result.score.is_some_and(f64::is_finite) {
            proposal.result
        } else {
            Outcome::invalid()
        };
        self.nodes.push(SolutionNode { id, code_ref: proposal.code_ref, result, parent, children: Vec::new(), branch_id, operator });
        if let Some(p) = parent {
            self.nodes[p].children.push(id);
        }
        id
    }

    pub fn add_root(&mut self, proposal: Proposal, operator: Operator) -> NodeId {
        self.push(None, proposal, operator)
    }

    pub fn add_child(&mut self, parent: NodeId, proposal: Proposal, operator: Operator) -> Result<NodeId, BaselineError> {
        self.node(parent)?;
        Ok(self.push(Some(parent), proposal, operator))
    }

    pub fn best_valid(&self) -> Option<&SolutionNode> {
        let mut best: Option<&SolutionNode> = None;
        for n in self.nodes.iter().filter(|n| n.result.valid) {
            if best.is_none_or(|b| n.result.score > b.result.score) {
                best = Some(n);
            }
        }
        best
    }

    pub fn best_score(&self) -> Option<f64> {
        self.best_valid().and_then(|n| n.result.score)
    }

    /// Parent/child links agree, every node reaches a root, branches follow
    /// parents, and invalid nodes carry no score.
    pub fn check_consistency(&self) -> Result<(), String> {
        for (i, n) in self.nodes.iter().enumerate() {
            if n.id != i {
                return Err(format!("node at {i} has id {}", n.id));
            }
            if !n.result.valid && n.result.score.is_some() {
                return Err(format!("invalid node {i} has a score"));
            }
            if n.result.score.is_some_and(|s| !s.is_finite()) {
                return Err(format!("node {i} has a non-finite score"));
            }
            if let Some(p) = n.parent {
                let parent = self.nodes.get(p).ok_or(format!("node {i} has unknown parent {p}"))?;
                if p >= i || !parent.children.contains(&i) || parent.branch_id != n.branch_id {
                    return Err(format!("node {i} and parent {p} disagree"));
                }
            }
            for c in &n.children {
                if self.nodes.get(*c).and_then(|c| c.parent) != Some(i) {
                    return Err(format!("child {c} of {i} does not point back"));
                }
            }
        }
        Ok(())
    }

    /// True when the parent links alone form a forest: no node has two
    /// parents and following parents always ends at a root.
    pub fn backbone_is_forest(&self) -> bool {
        let mut incoming = vec![0usize; self.nodes.len()];
        for n in &self.nodes {
            for c in &n.children {
                match incoming.get_mut(*c) {
                    Some(k) => *k += 1,
                    None => return false,
                }
            }
        }
        if incoming.iter().any(|k| *k > 1) {
            return false;
        }
        self.nodes.iter().all(|n| {
            let mut cur = n.parent;
            let mut hops = 0;
            while let Some(p) = cur {
                hops += 1;
                if hops > self.nodes.len() {
                    return false;
                }
                cur = self.nodes.get(p).and_then(|x| x.parent);
            }
            true
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MemoryEntry {
    pub node: NodeId,
    pub digest: String,
}

/// Running summary of earlier solutions, oldest evicted first.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MemorySummary {
    pub cap: usize,
    pub entries: VecDeque<MemoryEntry>,
}

impl MemorySummary {
    pub fn new(cap: usize) -> Self {
        Self { cap, entries: VecDeque::new() }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn record(&mut self, node: &SolutionNode) {
        if self.cap == 0 {
            return;
        }
        while self.entries.len() >= self.cap {
            self.entries.pop_front();
        }
        self.entries.push_back(MemoryEntry { node: node.id, digest: format!("{} -> {}", node.operator.word(), node.result) });
    }

    pub fn render(&self) -> String {
        self.entries.iter().map(|e| format!("node {}: {}\n", e.node, e.digest)).collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Proposal {
    pub code_ref: String,
    pub result: Outcome,
}

/// Source of candidate solutions for the operators.
pub trait Proposer {
    fn draft(&mut self, memory: &MemorySummary) -> Result<Proposal, BaselineError>;
    fn debug(&mut self, node: &SolutionNode, context: &[&SolutionNode]) -> Result<Proposal, BaselineError>;
    fn improve(&mut self, node: &SolutionNode, memory: &MemorySummary, context: &[&SolutionNode]) -> Result<Proposal, BaselineError>;
    fn aggregate(&mut self, sources: &[&SolutionNode]) -> Result<Proposal, BaselineError>;
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticTaskModel {
    pub seed: u64,
    pub draft_valid_probability: f64,
    pub draft_mean: f64,
    pub draft_std: f64,
    pub improve_mean: f64,
    pub improve_std: f64,
    pub debug_success_probability: f64,
}

impl Default for SyntheticTaskModel {
    fn default() -> Self {
        Self {
            seed: 0,
            draft_valid_probability: 0.7,
            draft_mean: 0.5,
            draft_std: 0.1,
            improve_mean: 0.005,
            improve_std: 0.03,
            debug_success_probability: 0.6,
        }
    }
}

impl SyntheticTaskModel {
    /// Always-valid drafts at `draft`, fixed `delta` improvements, sure debugs.
    pub fn degenerate(draft: f64, delta: f64) -> Self {
        Self {
            seed: 0,
            draft_valid_probability: 1.0,
            draft_mean: draft,
            draft_std: 0.0,
            improve_mean: delta,
            improve_std: 0.0,
            debug_success_probability: 1.0,
        }
    }

    pub fn validate(&self) -> Result<(), BaselineError> {
        let prob = |p: f64, what: &str| {
            if (0.0..=1.0).contains(&p) {
                Ok(())
            } else {
                Err(BaselineError::InvalidArgument(format!("{what} must lie in [0, 1]")))
            }
        };
        prob(self.draft_valid_probability, "draft_valid_probability")?;
        prob(self.debug_success_probability, "debug_success_probability")?;
        for (v, what) in [(self.draft_mean, "draft_mean"), (self.improve_mean, "improve_mean")] {
            if !v.is_finite() {
                return Err(BaselineError::InvalidArgument(format!("{what} must be finite")));
            }
        }
        for (v, what) in [(self.draft_std, "draft_std"), (self.improve_std, "improve_std")] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(BaselineError::InvalidArgument(format!("{what} must be finite and >= 0")));
            }
        }
        Ok(())
    }
}

/// Seeded sampler over a [`SyntheticTaskModel`].
pub struct SyntheticProposer {
    rng: ChaCha8Rng,
    draft: Normal<f64>,
    delta: Normal<f64>,
    model: SyntheticTaskModel,
    counter: u64,
}

impl SyntheticProposer {
    pub fn new(model: &SyntheticTaskModel) -> Result<Self, BaselineError> {
        Self::with_seed(model, model.seed)
    }

    pub fn with_seed(model: &SyntheticTaskModel, seed: u64) -> Result<Self, BaselineError> {
        model.validate()?;
        let normal = |m, s| Normal::new(m, s).map_err(|e| BaselineError::InvalidArgument(e.to_string()));
        Ok(Self {
            rng: ChaCha8Rng::seed_from_u64(seed),
            draft: normal(model.draft_mean, model.draft_std)?,
            delta: normal(model.improve_mean, model.improve_std)?,
            model: model.clone(),
            counter: 0,
        })
    }

    fn code_ref(&mut self, op: Operator) -> String {
        self.counter += 1;
        format!("synthetic:{}:{}", op.word(), self.counter)
    }

    fn fresh(&mut self, p_valid: f64, op: Operator) -> Proposal {
        let valid = self.rng.random_bool(p_valid);
        let score = self.draft.sample(&mut self.rng);
        let result = if valid { Outcome::valid(score) } else { Outcome::invalid() };
        Proposal { code_ref: self.code_ref(op), result }
    }

    fn shifted(&mut self, base: f64, op: Operator) -> Proposal {
        let delta = self.delta.sample(&mut self.rng);
        Proposal { code_ref: self.code_ref(op), result: Outcome::valid(base + delta) }
    }
}

impl Proposer for SyntheticProposer {
    fn draft(&mut self, _memory: &MemorySummary) -> Result<Proposal, BaselineError> {
        Ok(self.fresh(self.model.draft_valid_probability, Operator::Draft))
    }

    fn debug(&mut self, _node: &SolutionNode, _context: &[&SolutionNode]) -> Result<Proposal, BaselineError> {
        Ok(self.fresh(self.model.debug_success_probability, Operator::Debug))
    }

    fn improve(&mut self, node: &SolutionNode, _memory: &MemorySummary, _context: &[&SolutionNode]) -> Result<Proposal, BaselineError> {
        let base = node.result.score.ok_or(BaselineError::ImproveOnInvalid(node.id))?;
        Ok(self.shifted(base, Operator::Improve))
    }

    fn aggregate(&mut self, sources: &[&SolutionNode]) -> Result<Proposal, BaselineError> {
        let base = sources
            .iter()
            .filter_map(|n| n.result.score)
            .fold(None, |acc: Option<f64>, s| Some(acc.map_or(s, |a| a.max(s))))
            .ok_or(BaselineError::InsufficientBranches)?;
        Ok(self.shifted(base, Operator::Aggregate))
    }
}

pub fn op_draft(graph: &mut SolutionGraph, memory: &mut MemorySummary, proposer: &mut dyn Proposer) -> Result<NodeId, BaselineError> {
    let proposal = proposer.draft(memory)?;
    let id = graph.add_root(proposal, Operator::Draft);
    memory.record(&graph.nodes[id]);
    Ok(id)
}

pub fn op_debug(
    graph: &mut SolutionGraph,
    memory: &mut MemorySummary,
    proposer: &mut dyn Proposer,
    target: NodeId,
    context: &[NodeId],
) -> Result<NodeId, BaselineError> {
    let node = graph.node(target)?;
    if node.result.valid {
        return Err(BaselineError::DebugOnValid(target));
    }
    let ctx: Vec<&SolutionNode> = context.iter().filter_map(|c| graph.nodes.get(*c)).collect();
    let proposal = proposer.debug(node, &ctx)?;
    let id = graph.add_child(target, proposal, Operator::Debug)?;
    memory.record(&graph.nodes[id]);
    Ok(id)
}

pub fn op_improve(
    graph: &mut SolutionGraph,
    memory: &mut MemorySummary,
    proposer: &mut dyn Proposer,
    target: NodeId,
    context: &[NodeId],
) -> Result<NodeId, BaselineError> {
    let node = graph.node(target)?;
    if !node.result.valid {
        return Err(BaselineError::ImproveOnInvalid(target));
    }
    let ctx: Vec<&SolutionNode> = context.iter().filter_map(|c| graph.nodes.get(*c)).collect();
    let proposal = proposer.improve(node, memory, &ctx)?;
    let id = graph.add_child(target, proposal, Operator::Improve)?;
    memory.record(&graph.nodes[id]);
    Ok(id)
}

/// Draft while `step_index < n_d`; afterwards improve the best valid node
/// (lowest id on ties), or debug the most recent node if none is valid.
pub fn greedy_step(graph: &SolutionGraph, n_d: usize, step_index: usize) -> Result<(Operator, Option<NodeId>), BaselineError> {
    if step_index < n_d {
        return Ok((Operator::Draft, None));
    }
    if let Some(best) = graph.best_valid() {
        return Ok((Operator::Improve, Some(best.id)));
    }
    match graph.nodes.last() {
        Some(last) => Ok((Operator::Debug, Some(last.id))),
        None => Err(BaselineError::EmptyTree),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn node_of(graph: &SolutionGraph, id: NodeId) -> &SolutionNode {
        &graph.nodes[id]
    }

    #[test]
    fn draft_is_seed_determined() {
        let model = SyntheticTaskModel { seed: 42, ..Default::default() };
        let run = || {
            let mut p = SyntheticProposer::new(&model).unwrap();
            p.draft(&MemorySummary::new(4)).unwrap().result
        };
        // Regenerate with the same primitives in the same order.
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let valid = rng.random_bool(model.draft_valid_probability);
        let score = Normal::new(model.draft_mean, model.draft_std).unwrap().sample(&mut rng);
        let expected = if valid { Outcome::valid(score) } else { Outcome::invalid() };
        assert_eq!(run(), expected);
        assert_eq!(run(), run());
    }

    #[test]
    fn drafts_are_roots_and_memory_is_capped() {
        let mut g = SolutionGraph::new();
        let mut m = MemorySummary::new(2);
        let mut p = SyntheticProposer::new(&SyntheticTaskModel::default()).unwrap();
        for _ in 0..3 {
            op_draft(&mut g, &mut m, &mut p).unwrap();
        }
        assert_eq!(g.nodes.iter().filter(|n| n.parent.is_none()).count(), 3);
        assert_eq!(m.len(), 2);
        assert_eq!(m.entries[0].node, 1);
        op_draft(&mut g, &mut m, &mut p).unwrap();
        assert_eq!(m.len(), 2);
        assert_eq!(m.entries.back().unwrap().node, 3);
        g.check_consistency().unwrap();
    }

    #[test]
    fn debug_and_improve_preconditions() {
        let mut g = SolutionGraph::new();
        let mut m = MemorySummary::new(8);
        let bad = g.add_root(Proposal { code_ref: "x".into(), result: Outcome::invalid() }, Operator::Draft);
        let good = g.add_root(Proposal { code_ref: "y".into(), result: Outcome::valid(0.5) }, Operator::Draft);

        let mut sure = SyntheticProposer::new(&SyntheticTaskModel::degenerate(0.5, 0.1)).unwrap();
        let child = op_debug(&mut g, &mut m, &mut sure, bad, &[]).unwrap();
        assert!(node_of(&g, child).result.valid);
        let never = SyntheticTaskModel { debug_success_probability: 0.0, ..SyntheticTaskModel::degenerate(0.5, 0.1) };
        let mut never = SyntheticProposer::new(&never).unwrap();
        let child = op_debug(&mut g, &mut m, &mut never, bad, &[]).unwrap();
        assert_eq!(node_of(&g, child).result, Outcome::invalid());

        assert_eq!(op_debug(&mut g, &mut m, &mut sure, good, &[]), Err(BaselineError::DebugOnValid(good)));
        assert_eq!(op_improve(&mut g, &mut m, &mut sure, bad, &[]), Err(BaselineError::ImproveOnInvalid(bad)));
        let child = op_improve(&mut g, &mut m, &mut sure, good, &[]).unwrap();
        assert_eq!(node_of(&g, child).result.score, Some(0.5 + 0.1));
        g.check_consistency().unwrap();
    }

    #[test]
    fn seeded_improve_matches_regeneration() {
        let model = SyntheticTaskModel { seed: 7, ..Default::default() };
        let mut g = SolutionGraph::new();
        let mut m = MemorySummary::new(8);
        let root = g.add_root(Proposal { code_ref: "r".into(), result: Outcome::valid(0.3) }, Operator::Draft);
        let mut p = SyntheticProposer::new(&model).unwrap();
        let child = op_improve(&mut g, &mut m, &mut p, root, &[]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let delta = Normal::new(model.improve_mean, model.improve_std).unwrap().sample(&mut rng);
        assert_eq!(node_of(&g, child).result.score, Some(0.3 + delta));
    }

    #[test]
    fn greedy_examples() {
        let mut g = SolutionGraph::new();
        assert_eq!(greedy_step(&g, 3, 0), Ok((Operator::Draft, None)));
        assert_eq!(greedy_step(&g, 3, 3), Err(BaselineError::EmptyTree));
        g.add_root(Proposal { code_ref: "a".into(), result: Outcome::invalid() }, Operator::Draft);
        g.add_root(Proposal { code_ref: "b".into(), result: Outcome::invalid() }, Operator::Draft);
        assert_eq!(greedy_step(&g, 2, 2), Ok((Operator::Debug, Some(1))));
        g.add_root(Proposal { code_ref: "c".into(), result: Outcome::valid(0.4) }, Operator::Draft);
        g.add_root(Proposal { code_ref: "d".into(), result: Outcome::valid(0.7) }, Operator::Draft);
        g.add_root(Proposal { code_ref: "e".into(), result: Outcome::valid(0.7) }, Operator::Draft);
        assert_eq!(greedy_step(&g, 2, 5), Ok((Operator::Improve, Some(3))));
    }

    #[test]
    fn backbone_checks_detect_corruption() {
        let mut g = SolutionGraph::new();
        let a = g.add_root(Proposal { code_ref: "a".into(), result: Outcome::valid(0.1) }, Operator::Draft);
        let b = g.add_child(a, Proposal { code_ref: "b".into(), result: Outcome::valid(0.2) }, Operator::Improve).unwrap();
        assert!(g.backbone_is_forest());
        g.nodes[a].children.push(b);
        assert!(!g.backbone_is_forest());
        assert!(g.check_consistency().is_ok());
        g.nodes[a].children.pop();
        g.nodes[b].result.score = Some(f64::NAN);
        assert!(g.check_consistency().is_err());
    }
}
