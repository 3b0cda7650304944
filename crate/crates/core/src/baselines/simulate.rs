use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::mcgs::{intra_branch_context, mcgs_aggregate, mcgs_step, McgsParams, NodeStats};
use super::{
    greedy_step, op_debug, op_draft, op_improve, BaselineError, MemorySummary, NodeId, Operator, Outcome, Proposer,
    SolutionGraph, SyntheticProposer, SyntheticTaskModel, DEFAULT_MEMORY_CAP,
};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "policy", rename_all = "snake_case")]
pub enum SearchPolicy {
    Greedy { drafts: usize },
    Mcgs(McgsParams),
}

impl SearchPolicy {
    pub fn drafts(&self) -> usize {
        match self {
            Self::Greedy { drafts } => *drafts,
            Self::Mcgs(p) => p.drafts,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Self::Greedy { .. } => "greedy",
            Self::Mcgs(_) => "mcgs",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub operator: Operator,
    pub target: Option<NodeId>,
    pub node: NodeId,
    pub outcome: Outcome,
}

impl StepRecord {
    pub fn render(&self) -> String {
        let target = self.target.map_or_else(|| "-".to_string(), |t| t.to_string());
        format!("{}\t{}\t{}\t{}\t{}", self.step, self.operator.word(), target, self.node, self.outcome)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Simulation {
    pub trajectory: Vec<StepRecord>,
    pub best_score: Option<f64>,
    pub graph: SolutionGraph,
}

impl Simulation {
    pub fn render_trajectory(&self) -> String {
        self.trajectory.iter().map(|r| r.render() + "\n").collect()
    }
}

/// Runs `policy` for `total_steps` operator applications.
pub fn simulate_with(proposer: &mut dyn Proposer, policy: &SearchPolicy, total_steps: usize) -> Result<Simulation, BaselineError> {
    let drafts = policy.drafts();
    if drafts == 0 {
        return Err(BaselineError::InvalidArgument("at least one draft is required".into()));
    }
    if total_steps < drafts {
        return Err(BaselineError::InvalidArgument(format!("{total_steps} steps cannot hold {drafts} drafts")));
    }
    let mut graph = SolutionGraph::new();
    let mut memory = MemorySummary::new(DEFAULT_MEMORY_CAP);
    let mut stats = NodeStats::default();
    let mut trajectory = Vec::with_capacity(total_steps);
    for step in 0..total_steps {
        let (operator, target) = match policy {
            SearchPolicy::Greedy { drafts } => greedy_step(&graph, *drafts, step)?,
            SearchPolicy::Mcgs(p) => mcgs_step(&graph, &stats, p, step)?,
        };
        let context = match (policy, target) {
            (SearchPolicy::Mcgs(p), Some(t)) => intra_branch_context(&graph, t, p.context_k)?,
            _ => Vec::new(),
        };
        let node = match (operator, target) {
            (Operator::Draft, _) => op_draft(&mut graph, &mut memory, proposer)?,
            (Operator::Improve, Some(t)) => op_improve(&mut graph, &mut memory, proposer, t, &context)?,
            (Operator::Debug, Some(t)) => op_debug(&mut graph, &mut memory, proposer, t, &context)?,
            (Operator::Aggregate, _) => {
                let k = match policy {
                    SearchPolicy::Mcgs(p) => p.k,
                    SearchPolicy::Greedy { .. } => unreachable!("greedy never aggregates"),
                };
                mcgs_aggregate(&mut graph, &mut memory, proposer, k)?
            }
            (op, None) => unreachable!("{} always has a target", op.word()),
        };
        stats.backpropagate(&graph, node);
        trajectory.push(StepRecord { step, operator, target, node, outcome: graph.nodes[node].result });
    }
    Ok(Simulation { trajectory, best_score: graph.best_score(), graph })
}

fn mix(model_seed: u64, seed: u64) -> u64 {
    model_seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ seed
}

/// Synthetic-mode simulation; identical inputs give identical trajectories.
pub fn simulate_policy(
    model: &SyntheticTaskModel,
    policy: &SearchPolicy,
    total_steps: usize,
    seed: u64,
) -> Result<Simulation, BaselineError> {
    let mut proposer = SyntheticProposer::with_seed(model, mix(model.seed, seed))?;
    simulate_with(&mut proposer, policy, total_steps)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchSummary {
    pub policy: String,
    pub trials: usize,
    pub steps: usize,
    /// Trials that produced at least one valid node.
    pub solved: usize,
    pub mean: f64,
    pub std: f64,
    pub min: f64,
    pub median: f64,
    pub max: f64,
}

/// Trial `t` uses seed `seed + t`.
pub fn bench(
    model: &SyntheticTaskModel,
    policy: &SearchPolicy,
    steps: usize,
    trials: usize,
    seed: u64,
) -> Result<BenchSummary, BaselineError> {
    let mut best = Vec::with_capacity(trials);
    for t in 0..trials {
        if let Some(s) = simulate_policy(model, policy, steps, seed.wrapping_add(t as u64))?.best_score {
            best.push(s);
        }
    }
    best.sort_by(|a, b| a.partial_cmp(b).expect("finite scores"));
    let n = best.len();
    let (mean, std, min, median, max) = if n == 0 {
        (f64::NAN, f64::NAN, f64::NAN, f64::NAN, f64::NAN)
    } else {
        let mean = best.iter().sum::<f64>() / n as f64;
        let var = best.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n as f64;
        let median = if n % 2 == 1 { best[n / 2] } else { (best[n / 2 - 1] + best[n / 2]) / 2.0 };
        (mean, var.sqrt(), best[0], median, best[n - 1])
    };
    Ok(BenchSummary { policy: policy.name().into(), trials, steps, solved: n, mean, std, min, median, max })
}

/// Tab-separated table with a header row.
pub fn render_bench_table(rows: &[BenchSummary]) -> String {
    let mut out = String::from("policy\ttrials\tsteps\tsolved\tmean\tstd\tmin\tmedian\tmax\n");
    for r in rows {
        let _ = writeln!(
            out,
            "{}\t{}\t{}\t{}\t{:.6}\t{:.6}\t{:.6}\t{:.6}\t{:.6}",
            r.policy, r.trials, r.steps, r.solved, r.mean, r.std, r.min, r.median, r.max
        );
    }
    out
}
