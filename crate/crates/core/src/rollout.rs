//! Group rollout sampling: `fork_on` and the IS / FoF / RR strategies.

use std::collections::{BTreeMap, HashMap};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::env::SearchEnv;
use crate::error::{Error, Result};
use crate::policy::{sample_sequence, PolicyParams, SamplingConfig};
use crate::types::{strip_stop, AgentId, GroupKey, QuestionId, RolloutPair, Token, Trajectory};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Strategy {
    /// Independent sampling: fork at every agent, keep only the forked pairs.
    Is,
    /// Fork on first: branch at the entry agent only.
    Fof,
    /// Round robin: random fork point per question, singletons regrouped batch-wide.
    Rr,
}

impl Strategy {
    pub fn label(&self) -> &'static str {
        match self {
            Strategy::Is => "is",
            Strategy::Fof => "fof",
            Strategy::Rr => "rr",
        }
    }
}

/// How RR singletons are pooled before bucketing.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum RegroupMode {
    /// Partition by (agent, fork point) before bucketing.
    #[default]
    PerAgentFork,
    /// Shuffle all singletons together regardless of agent.
    Pooled,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RolloutPlan {
    pub strategy: Strategy,
    pub group_size: usize,
    pub rr_probs: Vec<f64>,
    pub regroup: RegroupMode,
}

impl Default for RolloutPlan {
    fn default() -> Self {
        Self {
            strategy: Strategy::Fof,
            group_size: 4,
            rr_probs: vec![0.7, 0.1, 0.2],
            regroup: RegroupMode::PerAgentFork,
        }
    }
}

impl RolloutPlan {
    pub fn validate(&self, n_agents: usize) -> Result<()> {
        if self.group_size == 0 {
            return Err(Error::Config("group size must be at least 1".into()));
        }
        if self.strategy == Strategy::Rr {
            if self.rr_probs.len() != n_agents {
                return Err(Error::Config(format!(
                    "rr_probs has {} entries for {n_agents} agents",
                    self.rr_probs.len()
                )));
            }
            if self.rr_probs.iter().any(|p| p.is_nan() || *p < 0.0) {
                return Err(Error::Config("rr_probs must be non-negative".into()));
            }
            let sum: f64 = self.rr_probs.iter().sum();
            if (sum - 1.0).abs() > 1e-9 {
                return Err(Error::Config(format!("rr_probs sum to {sum}, not 1")));
            }
        }
        Ok(())
    }
}

/// The trajectories of one `fork_on` call and the pairs they share.
#[derive(Debug, Clone, PartialEq)]
pub struct ForkRollout {
    pub question_id: QuestionId,
    pub fork_agent: AgentId,
    /// Pair arena; trajectories index into it. Prefix pairs are shared.
    pub pairs: Vec<RolloutPair>,
    pub trajectories: Vec<Trajectory>,
    /// When set, only this agent's pairs are used for training (IS).
    pub keep_agent: Option<AgentId>,
}

impl ForkRollout {
    pub fn is_kept(&self, pair: &RolloutPair) -> bool {
        self.keep_agent.is_none_or(|a| a == pair.agent_id)
    }

    pub fn kept_pairs(&self) -> impl Iterator<Item = &RolloutPair> {
        self.pairs.iter().filter(move |p| self.is_kept(p))
    }

    /// Number of policy invocations spent on this rollout.
    pub fn policy_calls(&self) -> usize {
        self.pairs.len()
    }

    /// Pair count per agent (index 0 is agent 1).
    pub fn agent_counts(&self, n_agents: usize) -> Vec<usize> {
        let mut c = vec![0; n_agents];
        for p in &self.pairs {
            c[p.agent_id.index()] += 1;
        }
        c
    }
}

/// All rollouts gathered for one question.
#[derive(Debug, Clone, PartialEq)]
pub struct QuestionRollout {
    pub question_id: QuestionId,
    pub forks: Vec<ForkRollout>,
}

impl QuestionRollout {
    pub fn kept_pairs(&self) -> impl Iterator<Item = &RolloutPair> {
        self.forks.iter().flat_map(|f| f.kept_pairs())
    }

    pub fn policy_calls(&self) -> usize {
        self.forks.iter().map(ForkRollout::policy_calls).sum()
    }
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Deterministic RNG streams for one training step.
///
/// Each question gets its own stream so rollouts are independent of the
/// order (or thread) in which questions are processed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StepSeeds {
    pub seed: u64,
    pub step: u64,
}

impl StepSeeds {
    pub fn new(seed: u64, step: u64) -> Self {
        Self { seed, step }
    }

    fn base(&self) -> u64 {
        splitmix(self.seed ^ splitmix(self.step))
    }

    pub fn question_rng(&self, question_id: QuestionId) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.base());
        rng.set_stream(question_id as u64);
        rng
    }

    /// Stream for batch-level draws: RR fork points and regroup shuffles.
    pub fn batch_rng(&self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.base());
        rng.set_stream(u64::MAX);
        rng
    }
}

struct Sampler<'a> {
    env: &'a SearchEnv,
    params: &'a PolicyParams,
    sampling: &'a SamplingConfig,
}

impl Sampler<'_> {
    #[allow(clippy::too_many_arguments)]
    fn invoke<R: Rng + ?Sized>(
        &self,
        question_id: QuestionId,
        agent: AgentId,
        ctx: Vec<f64>,
        predecessor: Option<usize>,
        trajectory_id: Option<usize>,
        fork_agent: AgentId,
        rng: &mut R,
    ) -> Result<RolloutPair> {
        let role = self
            .env
            .topology()
            .role(agent)
            .ok_or_else(|| Error::Topology(format!("no role {agent}")))?;
        let cfg = self.sampling.with_max_len(role.max_len);
        let s = sample_sequence(self.params, agent, &ctx, &cfg, rng)?;
        Ok(RolloutPair {
            question_id,
            agent_id: agent,
            input_ctx: ctx,
            flags: self.env.inspect_output(agent, &s.tokens),
            output_seq: s.tokens,
            token_logps: s.logps,
            group_key: GroupKey::per_question(question_id, agent),
            trajectory_id,
            predecessor,
            fork_agent,
            regroup_excluded: false,
        })
    }
}

/// One-to-one rollout up to `fork_agent`, `group_size` branches there, and
/// one-to-one continuation of every branch to the end of the chain.
#[allow(clippy::too_many_arguments)]
pub fn fork_on<R: Rng + ?Sized>(
    env: &SearchEnv,
    params: &PolicyParams,
    sampling: &SamplingConfig,
    question_id: QuestionId,
    group_size: usize,
    fork_agent: AgentId,
    rng: &mut R,
) -> Result<ForkRollout> {
    if fork_agent.0 == 0 || fork_agent.0 > env.topology().n() {
        return Err(Error::Topology(format!(
            "fork agent {fork_agent} not in chain"
        )));
    }
    if group_size == 0 {
        return Err(Error::Config("group size must be at least 1".into()));
    }
    let sampler = Sampler {
        env,
        params,
        sampling,
    };
    let mut pairs: Vec<RolloutPair> = Vec::new();
    let mut prefix: Vec<usize> = Vec::new();
    let mut state = env.initial_state(question_id);
    let mut output: Vec<Token> = Vec::new();

    loop {
        let agent = env
            .next_agent(&state)
            .ok_or_else(|| Error::Topology(format!("chain ended before {fork_agent}")))?;
        if agent == fork_agent {
            break;
        }
        let (ctx, next) = env.process_prompt(&state, agent, &output)?;
        let pair = sampler.invoke(
            question_id,
            agent,
            ctx,
            prefix.last().copied(),
            None,
            fork_agent,
            rng,
        )?;
        output = pair.output_seq.clone();
        prefix.push(pairs.len());
        pairs.push(pair);
        state = next;
    }

    let (fork_ctx, fork_state) = env.process_prompt(&state, fork_agent, &output)?;
    let mut trajectories = Vec::with_capacity(group_size);
    for branch in 0..group_size {
        let mut steps = prefix.clone();
        let pair = sampler.invoke(
            question_id,
            fork_agent,
            fork_ctx.clone(),
            prefix.last().copied(),
            Some(branch),
            fork_agent,
            rng,
        )?;
        let mut out = pair.output_seq.clone();
        steps.push(pairs.len());
        pairs.push(pair);
        let mut st = fork_state.clone();
        while let Some(agent) = env.next_agent(&st) {
            let (ctx, next) = env.process_prompt(&st, agent, &out)?;
            let pair = sampler.invoke(
                question_id,
                agent,
                ctx,
                steps.last().copied(),
                Some(branch),
                fork_agent,
                rng,
            )?;
            out = pair.output_seq.clone();
            steps.push(pairs.len());
            pairs.push(pair);
            st = next;
        }
        trajectories.push(Trajectory {
            question_id,
            steps,
            final_output: strip_stop(&out, env.stop_token()).to_vec(),
        });
    }
    Ok(ForkRollout {
        question_id,
        fork_agent,
        pairs,
        trajectories,
        keep_agent: None,
    })
}

pub fn sample_fof<R: Rng + ?Sized>(
    env: &SearchEnv,
    params: &PolicyParams,
    sampling: &SamplingConfig,
    question_id: QuestionId,
    group_size: usize,
    rng: &mut R,
) -> Result<QuestionRollout> {
    let entry = env.topology().entry();
    let fork = fork_on(env, params, sampling, question_id, group_size, entry, rng)?;
    Ok(QuestionRollout {
        question_id,
        forks: vec![fork],
    })
}

/// Fork at every agent in turn and keep only each fork point's own pairs.
///
/// Discarded pairs stay in the rollouts so rewards can still flow back
/// through them; [`QuestionRollout::kept_pairs`] filters them out.
pub fn sample_is<R: Rng + ?Sized>(
    env: &SearchEnv,
    params: &PolicyParams,
    sampling: &SamplingConfig,
    question_id: QuestionId,
    group_size: usize,
    rng: &mut R,
) -> Result<QuestionRollout> {
    let forks = env
        .topology()
        .agent_ids()
        .map(|agent| {
            let mut fork = fork_on(env, params, sampling, question_id, group_size, agent, rng)?;
            fork.keep_agent = Some(agent);
            Ok(fork)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(QuestionRollout { question_id, forks })
}

fn draw_fork<R: Rng + ?Sized>(probs: &[f64], rng: &mut R) -> AgentId {
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    for (i, p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return AgentId(i + 1);
        }
    }
    // Rounding left u above the total; fall back to the last agent with mass.
    let last = probs
        .iter()
        .rposition(|p| *p > 0.0)
        .unwrap_or(probs.len() - 1);
    AgentId(last + 1)
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct RegroupSummary {
    pub buckets: usize,
    pub excluded: usize,
}

/// Place singleton pairs into batch-wide buckets of `group_size`.
///
/// Full buckets get a fresh bucket key; leftovers are marked
/// `regroup_excluded` and keep their singleton key.
pub fn regroup_singletons<R: Rng + ?Sized>(
    singletons: Vec<&mut RolloutPair>,
    group_size: usize,
    mode: RegroupMode,
    rng: &mut R,
) -> RegroupSummary {
    let mut partitions: BTreeMap<(Option<AgentId>, Option<AgentId>), Vec<&mut RolloutPair>> =
        BTreeMap::new();
    for pair in singletons {
        let key = match mode {
            RegroupMode::PerAgentFork => (Some(pair.agent_id), Some(pair.fork_agent)),
            RegroupMode::Pooled => (None, None),
        };
        partitions.entry(key).or_default().push(pair);
    }
    let mut summary = RegroupSummary::default();
    for ((agent, _), mut members) in partitions {
        members.shuffle(rng);
        let full = if members.len() < 2 || group_size < 2 {
            0
        } else {
            members.len() / group_size
        };
        for (i, pair) in members.into_iter().enumerate() {
            if i < full * group_size {
                pair.group_key = GroupKey::bucket(agent, summary.buckets + i / group_size);
            } else {
                pair.regroup_excluded = true;
                summary.excluded += 1;
            }
        }
        summary.buckets += full;
    }
    summary
}

/// Sample one batch of questions under `plan`.
///
/// Questions are rolled out in parallel; each uses its own RNG stream.
pub fn sample_batch(
    env: &SearchEnv,
    params: &PolicyParams,
    sampling: &SamplingConfig,
    plan: &RolloutPlan,
    batch: &[QuestionId],
    seeds: StepSeeds,
) -> Result<(Vec<QuestionRollout>, RegroupSummary)> {
    plan.validate(env.topology().n())?;
    let g = plan.group_size;
    match plan.strategy {
        Strategy::Fof | Strategy::Is => {
            let rollouts = batch
                .par_iter()
                .map(|&qid| {
                    let mut rng = seeds.question_rng(qid);
                    if plan.strategy == Strategy::Fof {
                        sample_fof(env, params, sampling, qid, g, &mut rng)
                    } else {
                        sample_is(env, params, sampling, qid, g, &mut rng)
                    }
                })
                .collect::<Result<Vec<_>>>()?;
            Ok((rollouts, RegroupSummary::default()))
        }
        Strategy::Rr => sample_rr(env, params, sampling, plan, batch, seeds),
    }
}

pub fn sample_rr(
    env: &SearchEnv,
    params: &PolicyParams,
    sampling: &SamplingConfig,
    plan: &RolloutPlan,
    batch: &[QuestionId],
    seeds: StepSeeds,
) -> Result<(Vec<QuestionRollout>, RegroupSummary)> {
    if batch.is_empty() {
        return Err(Error::Empty("round-robin batch"));
    }
    let mut batch_rng = seeds.batch_rng();
    let forks: Vec<AgentId> = batch
        .iter()
        .map(|_| draw_fork(&plan.rr_probs, &mut batch_rng))
        .collect();
    let mut rollouts = batch
        .par_iter()
        .zip(forks.par_iter())
        .map(|(&qid, &fork)| {
            let mut rng = seeds.question_rng(qid);
            let f = fork_on(env, params, sampling, qid, plan.group_size, fork, &mut rng)?;
            Ok(QuestionRollout {
                question_id: qid,
                forks: vec![f],
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let summary = regroup_batch(&mut rollouts, plan, &mut batch_rng);
    Ok((rollouts, summary))
}

/// Regroup every pair whose group has a single member across the batch.
pub fn regroup_batch<R: Rng + ?Sized>(
    rollouts: &mut [QuestionRollout],
    plan: &RolloutPlan,
    rng: &mut R,
) -> RegroupSummary {
    let mut counts: HashMap<GroupKey, usize> = HashMap::new();
    for p in rollouts.iter().flat_map(|r| r.kept_pairs()) {
        *counts.entry(p.group_key).or_default() += 1;
    }
    let singletons: Vec<&mut RolloutPair> = rollouts
        .iter_mut()
        .flat_map(|r| r.forks.iter_mut())
        .flat_map(|f| {
            let keep = f.keep_agent;
            f.pairs
                .iter_mut()
                .filter(move |p| keep.is_none_or(|a| a == p.agent_id))
        })
        .filter(|p| counts[&p.group_key] == 1)
        .collect();
    regroup_singletons(singletons, plan.group_size, plan.regroup, rng)
}
