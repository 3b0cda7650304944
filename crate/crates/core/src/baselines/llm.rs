use std::fmt::Write as _;

use super::{BaselineError, MemorySummary, Operator, Outcome, Proposal, Proposer, SolutionNode};
use crate::agent::ModelSettings;
use crate::digest::content_digest;
use crate::provider::{complete, Message, ProviderBackend, ProviderRequest};

const PROMPT: &str = "You write a complete, self-contained training and inference program for the task. \
Reply with the program only.";

/// Scores a generated program. Stands in for executing it.
pub type Evaluator<'a> = dyn FnMut(Operator, &str) -> Outcome + 'a;

/// Agent-mode proposer: each operator is exactly one provider completion
/// with no tools.
pub struct LlmProposer<'a> {
    pub backend: &'a dyn ProviderBackend,
    pub model: ModelSettings,
    pub task: String,
    /// Optional static domain-knowledge text; off unless set.
    pub knowledge: Option<String>,
    pub evaluator: Box<Evaluator<'a>>,
    pub calls: u32,
}

impl<'a> LlmProposer<'a> {
    pub fn new(backend: &'a dyn ProviderBackend, task: impl Into<String>, evaluator: Box<Evaluator<'a>>) -> Self {
        Self { backend, model: ModelSettings::default(), task: task.into(), knowledge: None, evaluator, calls: 0 }
    }

    fn call(&mut self, operator: Operator, body: String) -> Result<Proposal, BaselineError> {
        let mut input = format!("# Task\n\n{}\n\n", self.task.trim_end());
        if let Some(k) = &self.knowledge {
            let _ = write!(input, "# Domain knowledge\n\n{}\n\n", k.trim_end());
        }
        input.push_str(&body);
        let request = ProviderRequest {
            agent: format!("baseline_{}", operator.word()),
            model_id: self.model.model_id.clone(),
            temperature: self.model.temperature,
            messages: vec![Message::Prompt { content: PROMPT.into() }, Message::User { content: input }],
            tool_descriptors: Vec::new(),
            max_output_tokens: self.model.max_output_tokens,
        };
        self.calls += 1;
        let response = complete(self.backend, &request).map_err(|e| BaselineError::Provider(e.to_string()))?;
        let result = (self.evaluator)(operator, &response.text);
        Ok(Proposal { code_ref: content_digest(response.text.as_bytes()), result })
    }
}

fn render_nodes(title: &str, nodes: &[&SolutionNode]) -> String {
    let mut s = format!("# {title}\n\n");
    for n in nodes {
        let _ = writeln!(s, "node {} ({}): {}", n.id, n.code_ref, n.result);
    }
    s.push('\n');
    s
}

impl Proposer for LlmProposer<'_> {
    fn draft(&mut self, memory: &MemorySummary) -> Result<Proposal, BaselineError> {
        let body = format!("# Memory\n\n{}\n# Operator\n\nDraft a new solution.\n", memory.render());
        self.call(Operator::Draft, body)
    }

    fn debug(&mut self, node: &SolutionNode, context: &[&SolutionNode]) -> Result<Proposal, BaselineError> {
        let body = render_nodes("Ancestors", context)
            + &format!("# Operator\n\nFix the failing solution {} ({}).\n", node.id, node.code_ref);
        self.call(Operator::Debug, body)
    }

    fn improve(&mut self, node: &SolutionNode, memory: &MemorySummary, context: &[&SolutionNode]) -> Result<Proposal, BaselineError> {
        let body = format!("# Memory\n\n{}\n", memory.render())
            + &render_nodes("Ancestors", context)
            + &format!("# Operator\n\nImprove solution {} ({}), currently {}.\n", node.id, node.code_ref, node.result);
        self.call(Operator::Improve, body)
    }

    fn aggregate(&mut self, sources: &[&SolutionNode]) -> Result<Proposal, BaselineError> {
        let body = render_nodes("Top solutions from other branches", sources)
            + "# Operator\n\nCombine these into a new solution written from scratch.\n";
        self.call(Operator::Aggregate, body)
    }
}
