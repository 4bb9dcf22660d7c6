//! Topology, rollout records and group identifiers shared by the rest of the crate.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Token id in the shared output vocabulary.
pub type Token = usize;

/// Index of a question in the dataset.
pub type QuestionId = usize;

/// One-based agent role id along the chain.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct AgentId(pub usize);

impl AgentId {
    /// Zero-based position of this agent in the chain.
    pub fn index(self) -> usize {
        self.0 - 1
    }
}

impl fmt::Display for AgentId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "A{}", self.0)
    }
}

/// Behavioural role of an agent; selects which format penalty applies.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum RoleKind {
    Rewriter,
    Reranker,
    Answerer,
    #[default]
    Generic,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AgentRole {
    pub id: AgentId,
    pub name: String,
    #[serde(default)]
    pub kind: RoleKind,
    /// Maximum emitted sequence length, stop token included.
    pub max_len: usize,
}

/// Ordered chain of agent roles; agent k feeds agent k + 1 only.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MasTopology {
    pub agents: Vec<AgentRole>,
}

impl MasTopology {
    /// The rewriter → reranker → answerer search chain.
    pub fn search_chain(rewriter_len: usize, reranker_len: usize, answerer_len: usize) -> Self {
        let role = |id, name: &str, kind, max_len| AgentRole {
            id: AgentId(id),
            name: name.to_string(),
            kind,
            max_len,
        };
        Self {
            agents: vec![
                role(1, "rewriter", RoleKind::Rewriter, rewriter_len),
                role(2, "reranker", RoleKind::Reranker, reranker_len),
                role(3, "answerer", RoleKind::Answerer, answerer_len),
            ],
        }
    }

    pub fn n(&self) -> usize {
        self.agents.len()
    }

    pub fn entry(&self) -> AgentId {
        AgentId(1)
    }

    pub fn role(&self, id: AgentId) -> Option<&AgentRole> {
        id.0.checked_sub(1).and_then(|i| self.agents.get(i))
    }

    /// Agent that consumes `id`'s output, if any.
    pub fn successor(&self, id: AgentId) -> Option<AgentId> {
        (id.0 < self.n()).then_some(AgentId(id.0 + 1))
    }

    pub fn agent_ids(&self) -> impl Iterator<Item = AgentId> + '_ {
        self.agents.iter().map(|a| a.id)
    }

    pub fn max_len(&self) -> usize {
        self.agents.iter().map(|a| a.max_len).max().unwrap_or(0)
    }
}

pub fn validate_topology(topology: MasTopology) -> Result<MasTopology> {
    if topology.agents.is_empty() {
        return Err(Error::Topology("agent list is empty".into()));
    }
    for (pos, agent) in topology.agents.iter().enumerate() {
        if agent.id.0 != pos + 1 {
            return Err(Error::Topology(format!(
                "agent ids must be consecutive from 1; found {} at position {}",
                agent.id.0,
                pos + 1
            )));
        }
        if agent.max_len == 0 {
            return Err(Error::Topology(format!(
                "agent {} has max_len 0",
                agent.name
            )));
        }
    }
    Ok(topology)
}

/// Rollout group identifier.
///
/// Two pairs are groupmates iff their keys are equal. Pairs from a fork carry
/// `(question, agent)`; singletons regrouped across the batch carry a bucket id
/// and no question.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct GroupKey {
    pub question_id: Option<QuestionId>,
    pub agent_id: Option<AgentId>,
    pub batch_bucket: Option<usize>,
}

impl GroupKey {
    pub fn per_question(question_id: QuestionId, agent_id: AgentId) -> Self {
        Self {
            question_id: Some(question_id),
            agent_id: Some(agent_id),
            batch_bucket: None,
        }
    }

    /// Key for a regrouped bucket. `agent_id` is `None` when buckets pool agents.
    pub fn bucket(agent_id: Option<AgentId>, bucket: usize) -> Self {
        Self {
            question_id: None,
            agent_id,
            batch_bucket: Some(bucket),
        }
    }

    pub fn is_regrouped(&self) -> bool {
        self.batch_bucket.is_some()
    }
}

/// Format observations on an agent output, consumed by the penalty rules.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct OutputFlags {
    /// Content tokens emitted (stop token excluded).
    pub content_len: usize,
    pub duplicate: bool,
    pub out_of_range: bool,
}

/// One agent invocation inside a rollout.
#[derive(Debug, Clone, PartialEq)]
pub struct RolloutPair {
    pub question_id: QuestionId,
    pub agent_id: AgentId,
    /// Context features the agent was prompted with.
    pub input_ctx: Vec<f64>,
    /// Emitted tokens, including a trailing stop token when one was sampled.
    pub output_seq: Vec<Token>,
    /// Log-probabilities of `output_seq` under the sampling policy.
    pub token_logps: Vec<f64>,
    pub group_key: GroupKey,
    /// Branch index; `None` for pairs in the shared prefix before the fork.
    pub trajectory_id: Option<usize>,
    /// Index of the pair whose output produced this pair's input.
    pub predecessor: Option<usize>,
    /// Fork point of the rollout this pair belongs to.
    pub fork_agent: AgentId,
    pub flags: OutputFlags,
    /// Set on singletons that could not be placed in a full regroup bucket.
    pub regroup_excluded: bool,
}

impl RolloutPair {
    /// Output without the trailing stop token.
    pub fn content(&self, stop_token: Token) -> &[Token] {
        strip_stop(&self.output_seq, stop_token)
    }
}

pub fn strip_stop(seq: &[Token], stop_token: Token) -> &[Token] {
    match seq.last() {
        Some(&t) if t == stop_token => &seq[..seq.len() - 1],
        _ => seq,
    }
}

/// Path from the system input to one final answer.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Trajectory {
    pub question_id: QuestionId,
    /// Indices into the owning rollout's pair arena, in agent order.
    pub steps: Vec<usize>,
    /// Content tokens of the last agent's output.
    pub final_output: Vec<Token>,
}
