use serde::{Deserialize, Serialize};

use super::{BaselineError, MemorySummary, NodeId, Operator, Proposer, SolutionGraph, SolutionNode};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct McgsParams {
    pub drafts: usize,
    /// Top-k valid nodes combined by an aggregation.
    pub k: usize,
    /// Aggregate on every `aggregate_every`-th post-draft step; 0 disables.
    pub aggregate_every: usize,
    pub exploration: f64,
    /// Ancestors passed as context to debug and improve.
    pub context_k: usize,
}

impl Default for McgsParams {
    fn default() -> Self {
        Self { drafts: super::DEFAULT_DRAFTS, k: 3, aggregate_every: 5, exploration: 0.1, context_k: 3 }
    }
}

/// Visit statistics on the tree backbone.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct NodeStats {
    pub visits: Vec<u32>,
    pub value_sum: Vec<f64>,
}

impl NodeStats {
    pub fn mean(&self, id: NodeId) -> f64 {
        if self.visits[id] == 0 {
            0.0
        } else {
            self.value_sum[id] / f64::from(self.visits[id])
        }
    }

    /// Credits `id` and its tree ancestors. Provenance edges are not followed.
    pub fn backpropagate(&mut self, graph: &SolutionGraph, id: NodeId) {
        self.visits.resize(graph.len(), 0);
        self.value_sum.resize(graph.len(), 0.0);
        let reward = graph.nodes[id].result.score.unwrap_or(0.0);
        let mut cur = Some(id);
        while let Some(n) = cur {
            self.visits[n] += 1;
            self.value_sum[n] += reward;
            cur = graph.nodes[n].parent;
        }
    }

    fn uct(&self, id: NodeId, total: f64, c: f64) -> f64 {
        let n = f64::from(self.visits[id].max(1));
        self.mean(id) + c * (total.max(1.0).ln() / n).sqrt()
    }
}

/// The `k` nearest tree ancestors of `node`, nearest first.
pub fn intra_branch_context(graph: &SolutionGraph, node: NodeId, k: usize) -> Result<Vec<NodeId>, BaselineError> {
    let mut out = Vec::new();
    let mut cur = graph.node(node)?.parent;
    while let Some(p) = cur {
        if out.len() == k {
            break;
        }
        out.push(p);
        cur = graph.nodes[p].parent;
    }
    Ok(out)
}

/// Picks the aggregation sources: the best valid node of each branch first
/// (by score, lowest id on ties), then remaining valid nodes by score, up
/// to `k`.
fn aggregation_sources(graph: &SolutionGraph, k: usize) -> Result<Vec<NodeId>, BaselineError> {
    let mut valid: Vec<&SolutionNode> = graph.nodes.iter().filter(|n| n.result.valid).collect();
    valid.sort_by(|a, b| b.result.score.partial_cmp(&a.result.score).expect("finite scores").then(a.id.cmp(&b.id)));
    let mut branches: Vec<usize> = valid.iter().map(|n| n.branch_id).collect();
    branches.sort_unstable();
    branches.dedup();
    if branches.len() < 2 {
        return Err(BaselineError::InsufficientBranches);
    }
    let mut seen = Vec::new();
    let mut picked = Vec::new();
    for n in &valid {
        if !seen.contains(&n.branch_id) {
            seen.push(n.branch_id);
            picked.push(n.id);
        }
    }
    picked.truncate(k);
    for n in &valid {
        if picked.len() >= k {
            break;
        }
        if !picked.contains(&n.id) {
            picked.push(n.id);
        }
    }
    Ok(picked)
}

/// Combines top valid nodes from distinct branches into a new top-level
/// node, recording provenance edges to each source.
pub fn mcgs_aggregate(
    graph: &mut SolutionGraph,
    memory: &mut MemorySummary,
    proposer: &mut dyn Proposer,
    k: usize,
) -> Result<NodeId, BaselineError> {
    if k == 0 {
        return Err(BaselineError::InvalidArgument("k must be positive".into()));
    }
    let sources = aggregation_sources(graph, k)?;
    let refs: Vec<&SolutionNode> = sources.iter().map(|s| &graph.nodes[*s]).collect();
    let proposal = proposer.aggregate(&refs)?;
    let id = graph.add_root(proposal, Operator::Aggregate);
    graph.provenance.extend(sources.iter().map(|s| (id, *s)));
    memory.record(&graph.nodes[id]);
    Ok(id)
}

/// Next operator for the graph search: drafts first, periodic aggregation
/// when two branches have valid nodes, otherwise UCT selection over all
/// nodes (lowest id on ties) followed by improve or debug.
pub fn mcgs_step(
    graph: &SolutionGraph,
    stats: &NodeStats,
    params: &McgsParams,
    step_index: usize,
) -> Result<(Operator, Option<NodeId>), BaselineError> {
    if step_index < params.drafts {
        return Ok((Operator::Draft, None));
    }
    if graph.is_empty() {
        return Err(BaselineError::EmptyTree);
    }
    let post = step_index - params.drafts;
    if params.aggregate_every > 0 && post % params.aggregate_every == params.aggregate_every - 1 && aggregation_sources(graph, params.k).is_ok() {
        return Ok((Operator::Aggregate, None));
    }
    let total: f64 = graph.nodes.iter().filter(|n| n.parent.is_none()).map(|n| f64::from(stats.visits[n.id])).sum();
    let mut best = 0;
    let mut best_value = f64::NEG_INFINITY;
    for n in &graph.nodes {
        let v = stats.uct(n.id, total, params.exploration);
        if v > best_value {
            best = n.id;
            best_value = v;
        }
    }
    let op = if graph.nodes[best].result.valid { Operator::Improve } else { Operator::Debug };
    Ok((op, Some(best)))
}
