//! MHGPO optimization: clipped surrogate with a KL penalty, aggregated over all
//! agents of the chain, driven by group-relative advantages.
//!
//! The training loop samples a batch of rollouts with the configured strategy,
//! scores final answers, propagates shared rewards back through every
//! trajectory, adds format penalties, normalizes within rollout groups and
//! takes `ppo_epochs` gradient-ascent steps on the aggregated objective.

use std::collections::{BTreeMap, HashMap};

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::advantage::{group_advantages, AdvantageRecord, TokenCredit};
use crate::baseline::{self, CriticParams, MappoConfig};
use crate::env::SearchEnv;
use crate::error::{Error, Result};
use crate::metrics::{evaluate_policy, intra_group_similarity, MetricsRow};
use crate::policy::{apply_update, score_direction, walk_sequence, PolicyParams, SamplingConfig};
use crate::reward::{
    agent_specific_penalty, f1_score, propagate_shared_rewards, PenaltyRules, RewardRecord,
};
use crate::rollout::{sample_batch, QuestionRollout, RolloutPlan, StepSeeds, Strategy};
use crate::types::{AgentId, GroupKey, QuestionId, Token};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Algorithm {
    #[default]
    Mhgpo,
    Mappo,
}

/// KL penalty evaluation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum KlMode {
    /// Per-token `e^d − d − 1` with `d = log π_ref − log π_θ`.
    #[default]
    Estimator,
    /// Exact KL over the vocabulary at every position.
    Exact,
}

/// Which policy anchors the KL penalty.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum KlAnchor {
    /// The sampling-time snapshot of each batch.
    #[default]
    PerBatch,
    /// The initial parameters, for the whole run.
    Fixed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub algorithm: Algorithm,
    pub seed: u64,
    pub lr: f64,
    pub batch_size: usize,
    pub total_epochs: usize,
    /// Stop after this many optimizer steps, even mid-epoch.
    pub max_steps: Option<usize>,
    pub ppo_epochs: usize,
    pub clip_eps: f64,
    pub kl_beta: f64,
    pub kl_mode: KlMode,
    pub kl_anchor: KlAnchor,
    pub token_credit: TokenCredit,
    pub top_n: f64,
    pub temperature: f64,
    /// Validation cadence in steps; 0 disables validation.
    pub eval_every: usize,
    pub plan: RolloutPlan,
    pub mappo: MappoConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            algorithm: Algorithm::Mhgpo,
            seed: 0,
            lr: 10.0,
            batch_size: 32,
            total_epochs: 30,
            max_steps: None,
            ppo_epochs: 1,
            clip_eps: 0.2,
            kl_beta: 0.001,
            kl_mode: KlMode::Estimator,
            kl_anchor: KlAnchor::PerBatch,
            token_credit: TokenCredit::Broadcast,
            top_n: 0.9,
            temperature: 1.0,
            eval_every: 5,
            plan: RolloutPlan::default(),
            mappo: MappoConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self, n_agents: usize) -> Result<()> {
        if self.clip_eps.is_nan() || self.clip_eps <= 0.0 {
            return Err(Error::Config(format!(
                "clip_eps {} must be positive",
                self.clip_eps
            )));
        }
        if self.kl_beta.is_nan() || self.kl_beta < 0.0 {
            return Err(Error::Config(format!(
                "kl_beta {} must be non-negative",
                self.kl_beta
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if self.ppo_epochs == 0 {
            return Err(Error::Config("ppo_epochs must be at least 1".into()));
        }
        if !self.lr.is_finite() || self.lr < 0.0 {
            return Err(Error::Config(format!(
                "lr {} must be finite and non-negative",
                self.lr
            )));
        }
        self.plan.validate(n_agents)?;
        self.mappo.validate()?;
        Ok(())
    }

    pub fn update_settings(&self) -> UpdateSettings {
        UpdateSettings {
            lr: self.lr,
            clip_eps: self.clip_eps,
            kl_beta: self.kl_beta,
            kl_mode: self.kl_mode,
            ppo_epochs: self.ppo_epochs,
        }
    }

    pub fn sampling(&self, env: &SearchEnv) -> SamplingConfig {
        SamplingConfig {
            top_n: self.top_n,
            temperature: self.temperature,
            max_len: env.topology().max_len(),
            stop_token: env.stop_token(),
        }
    }
}

pub fn clipped_surrogate(ratio: f64, advantage: f64, eps: f64) -> Result<f64> {
    if !ratio.is_finite() || !advantage.is_finite() || !eps.is_finite() {
        return Err(Error::NonFinite("surrogate inputs"));
    }
    let clipped = ratio.clamp(1.0 - eps, 1.0 + eps);
    Ok((ratio * advantage).min(clipped * advantage))
}

/// Token-averaged `e^d − d − 1` with `d = logp_ref − logp_current`.
pub fn kl_estimate(logp_current: &[f64], logp_ref: &[f64]) -> f64 {
    if logp_current.is_empty() {
        return 0.0;
    }
    let sum: f64 = logp_current
        .iter()
        .zip(logp_ref)
        .map(|(cur, r)| {
            let d = r - cur;
            d.exp() - d - 1.0
        })
        .sum();
    sum / logp_current.len() as f64
}

/// One rollout pair ready for the policy update.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainSample {
    pub question_id: QuestionId,
    pub agent_id: AgentId,
    pub context: Vec<f64>,
    pub output_seq: Vec<Token>,
    pub sampling_logps: Vec<f64>,
    pub group_key: GroupKey,
    pub reward: RewardRecord,
    pub advantage: AdvantageRecord,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct PreparedBatch {
    pub samples: Vec<TrainSample>,
    /// Final answer reward of every sampled trajectory.
    pub final_rewards: Vec<f64>,
    pub groups: usize,
    pub excluded_groups: usize,
    pub policy_calls: usize,
}

/// Score, propagate, penalize and normalize one sampled batch.
pub fn prepare_batch(
    env: &SearchEnv,
    rollouts: &[QuestionRollout],
    rules: &PenaltyRules,
    credit: TokenCredit,
) -> Result<PreparedBatch> {
    let mut samples = Vec::new();
    let mut final_rewards = Vec::new();
    let mut forced_exclusion = Vec::new();
    let mut policy_calls = 0;
    for qr in rollouts {
        policy_calls += qr.policy_calls();
        let gold = &env.question(qr.question_id).gold;
        for fork in &qr.forks {
            let finals = fork
                .trajectories
                .iter()
                .map(|t| f1_score(&t.final_output, gold))
                .collect::<Result<Vec<_>>>()?;
            let shared = propagate_shared_rewards(&fork.pairs, &fork.trajectories, &finals)?;
            final_rewards.extend_from_slice(&finals);
            for (i, pair) in fork.pairs.iter().enumerate() {
                if !fork.is_kept(pair) {
                    continue;
                }
                let kind = env
                    .topology()
                    .role(pair.agent_id)
                    .map(|r| r.kind)
                    .unwrap_or_default();
                let specific = agent_specific_penalty(kind, &pair.flags, rules);
                forced_exclusion.push(pair.regroup_excluded);
                samples.push(TrainSample {
                    question_id: pair.question_id,
                    agent_id: pair.agent_id,
                    context: pair.input_ctx.clone(),
                    output_seq: pair.output_seq.clone(),
                    sampling_logps: pair.token_logps.clone(),
                    group_key: pair.group_key,
                    reward: RewardRecord::new(shared[i], specific),
                    advantage: AdvantageRecord {
                        advantage: 0.0,
                        token_advantages: Vec::new(),
                        excluded: true,
                    },
                });
            }
        }
    }
    let keys: Vec<GroupKey> = samples.iter().map(|s| s.group_key).collect();
    let totals: Vec<f64> = samples.iter().map(|s| s.reward.total).collect();
    let grouped = group_advantages(&keys, &totals);
    for ((s, mut g), forced) in samples.iter_mut().zip(grouped.items).zip(forced_exclusion) {
        if forced {
            g.advantage = 0.0;
            g.excluded = true;
        }
        s.advantage = AdvantageRecord::new(g, s.output_seq.len(), credit)?;
    }
    Ok(PreparedBatch {
        samples,
        final_rewards,
        groups: grouped.groups,
        excluded_groups: grouped.excluded_groups,
        policy_calls,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct UpdateSettings {
    pub lr: f64,
    pub clip_eps: f64,
    pub kl_beta: f64,
    pub kl_mode: KlMode,
    pub ppo_epochs: usize,
}

/// Diagnostics of one update, measured at the first inner epoch.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct UpdateStats {
    pub objective: f64,
    pub kl: f64,
    pub max_ratio_deviation: f64,
    pub clip_fraction: f64,
}

/// A weighted sequence entering the clipped policy objective.
pub(crate) struct UpdateItem<'a> {
    pub agent: AgentId,
    pub context: &'a [f64],
    pub sequence: &'a [Token],
    pub sampling_logps: &'a [f64],
    pub token_advantages: &'a [f64],
    /// Multiplier applied to every token's contribution.
    pub weight: f64,
}

enum ReferenceTokens {
    LogProb(Vec<f64>),
    Full(Vec<Vec<f64>>),
}

#[derive(Default)]
struct Partial {
    grad: Vec<f64>,
    objective: f64,
    kl_sum: f64,
    tokens: usize,
    clipped: usize,
    max_dev: f64,
}

const CHUNK: usize = 16;

/// Separates the epoch shuffle streams from the rollout streams.
const SHUFFLE_SALT: u64 = 0x5EED_5EED_0F0F_E0C4;

fn reference_tokens(
    reference: &PolicyParams,
    item: &UpdateItem<'_>,
    mode: KlMode,
) -> Result<ReferenceTokens> {
    let mut lp = Vec::new();
    let mut full = Vec::new();
    walk_sequence(
        reference,
        item.agent,
        item.context,
        item.sequence,
        |s| match mode {
            KlMode::Estimator => lp.push(s.log_probs[s.token]),
            KlMode::Exact => full.push(s.log_probs.to_vec()),
        },
    )?;
    Ok(match mode {
        KlMode::Estimator => ReferenceTokens::LogProb(lp),
        KlMode::Exact => ReferenceTokens::Full(full),
    })
}

fn objective_and_gradient(
    params: &PolicyParams,
    items: &[UpdateItem<'_>],
    refs: &[ReferenceTokens],
    settings: &UpdateSettings,
) -> Result<Partial> {
    let vocab = params.vocab_size();
    let eps = settings.clip_eps;
    let beta = settings.kl_beta;
    let partials = items
        .par_chunks(CHUNK)
        .zip(refs.par_chunks(CHUNK))
        .map(|(chunk, chunk_refs)| -> Result<Partial> {
            let mut acc = Partial {
                grad: vec![0.0; params.weights().len()],
                ..Partial::default()
            };
            let mut dz = vec![0.0; vocab];
            for (item, reference) in chunk.iter().zip(chunk_refs) {
                let mut failure = None;
                walk_sequence(params, item.agent, item.context, item.sequence, |s| {
                    let t = s.position;
                    let logp = s.log_probs[s.token];
                    let ratio = (logp - item.sampling_logps[t]).exp();
                    let adv = item.token_advantages[t];
                    let surrogate = match clipped_surrogate(ratio, adv, eps) {
                        Ok(v) => v,
                        Err(e) => {
                            failure.get_or_insert(e);
                            return;
                        }
                    };
                    acc.max_dev = acc.max_dev.max((ratio - 1.0).abs());
                    let unclipped_active = ratio * adv <= ratio.clamp(1.0 - eps, 1.0 + eps) * adv;
                    let surrogate_coef = if unclipped_active { adv * ratio } else { 0.0 };
                    if !unclipped_active {
                        acc.clipped += 1;
                    }
                    score_direction(s.log_probs, s.token, &mut dz);
                    let kl = match reference {
                        ReferenceTokens::LogProb(r) => {
                            let d = r[t] - logp;
                            // d kl / d logp = 1 − e^d, along the same score direction.
                            let coef = surrogate_coef - beta * (1.0 - d.exp());
                            dz.iter_mut().for_each(|v| *v *= coef);
                            d.exp() - d - 1.0
                        }
                        ReferenceTokens::Full(r) => {
                            let q = &r[t];
                            dz.iter_mut().for_each(|v| *v *= surrogate_coef);
                            let kl: f64 = s
                                .log_probs
                                .iter()
                                .zip(q)
                                .map(|(lp, lq)| lp.exp() * (lp - lq))
                                .sum();
                            for ((v, lp), lq) in dz.iter_mut().zip(s.log_probs).zip(q) {
                                *v -= beta * lp.exp() * (lp - lq - kl);
                            }
                            kl
                        }
                    };
                    acc.objective += item.weight * (surrogate - beta * kl);
                    acc.kl_sum += kl;
                    acc.tokens += 1;
                    params.add_logit_grad(item.agent, s.features, &dz, item.weight, &mut acc.grad);
                })?;
                if let Some(e) = failure {
                    return Err(e);
                }
            }
            Ok(acc)
        })
        .collect::<Result<Vec<_>>>()?;

    let mut total = Partial {
        grad: vec![0.0; params.weights().len()],
        ..Partial::default()
    };
    for p in partials {
        total
            .grad
            .iter_mut()
            .zip(&p.grad)
            .for_each(|(a, b)| *a += b);
        total.objective += p.objective;
        total.kl_sum += p.kl_sum;
        total.tokens += p.tokens;
        total.clipped += p.clipped;
        total.max_dev = total.max_dev.max(p.max_dev);
    }
    Ok(total)
}

/// Gradient of the clipped objective with respect to the policy weights,
/// together with its value. Exposed for gradient checks.
pub fn objective_gradient(
    samples: &[TrainSample],
    params: &PolicyParams,
    reference: &PolicyParams,
    settings: &UpdateSettings,
    n_agents: usize,
) -> Result<(f64, Vec<f64>)> {
    let items = mhgpo_items(samples, n_agents)?;
    let refs = items
        .iter()
        .map(|i| reference_tokens(reference, i, settings.kl_mode))
        .collect::<Result<Vec<_>>>()?;
    let p = objective_and_gradient(params, &items, &refs, settings)?;
    Ok((p.objective, p.grad))
}

pub(crate) fn policy_update(
    params: &PolicyParams,
    reference: &PolicyParams,
    items: &[UpdateItem<'_>],
    settings: &UpdateSettings,
) -> Result<(PolicyParams, UpdateStats)> {
    let refs = items
        .iter()
        .map(|i| reference_tokens(reference, i, settings.kl_mode))
        .collect::<Result<Vec<_>>>()?;
    let mut current = params.clone();
    let mut stats = UpdateStats::default();
    for epoch in 0..settings.ppo_epochs {
        let p = objective_and_gradient(&current, items, &refs, settings)?;
        if epoch == 0 {
            stats = UpdateStats {
                objective: p.objective,
                kl: if p.tokens == 0 {
                    0.0
                } else {
                    p.kl_sum / p.tokens as f64
                },
                max_ratio_deviation: p.max_dev,
                clip_fraction: if p.tokens == 0 {
                    0.0
                } else {
                    p.clipped as f64 / p.tokens as f64
                },
            };
        }
        current = apply_update(&current, &p.grad, settings.lr)?;
    }
    Ok((current, stats))
}

/// Per-sequence weight `1 / (B · n · G_k · |o|)`, with `G_k` the number of
/// agent-k pairs collected for the sample's question.
pub(crate) fn aggregation_weights(
    keys: impl Iterator<Item = (QuestionId, AgentId, usize)> + Clone,
    n_agents: usize,
) -> Vec<f64> {
    let mut per_agent: HashMap<(QuestionId, AgentId), usize> = HashMap::new();
    for (q, a, _) in keys.clone() {
        *per_agent.entry((q, a)).or_default() += 1;
    }
    let questions = per_agent
        .keys()
        .map(|(q, _)| *q)
        .collect::<std::collections::BTreeSet<_>>()
        .len() as f64;
    keys.map(|(q, a, len)| {
        1.0 / (questions * n_agents as f64 * per_agent[&(q, a)] as f64 * len as f64)
    })
    .collect()
}

fn mhgpo_items(samples: &[TrainSample], n_agents: usize) -> Result<Vec<UpdateItem<'_>>> {
    if samples.is_empty() {
        return Err(Error::Empty("update batch"));
    }
    let weights = aggregation_weights(
        samples
            .iter()
            .map(|s| (s.question_id, s.agent_id, s.output_seq.len())),
        n_agents,
    );
    Ok(samples
        .iter()
        .zip(weights)
        .filter(|(s, _)| !s.advantage.excluded)
        .map(|(s, weight)| UpdateItem {
            agent: s.agent_id,
            context: &s.context,
            sequence: &s.output_seq,
            sampling_logps: &s.sampling_logps,
            token_advantages: &s.advantage.token_advantages,
            weight,
        })
        .collect())
}

/// Critic-free update over all agents' pairs. Excluded pairs contribute nothing.
pub fn mhgpo_update(
    samples: &[TrainSample],
    params: &PolicyParams,
    reference: &PolicyParams,
    settings: &UpdateSettings,
    n_agents: usize,
) -> Result<(PolicyParams, UpdateStats)> {
    let items = mhgpo_items(samples, n_agents)?;
    policy_update(params, reference, &items, settings)
}

/// Per-step training diagnostics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepStats {
    pub mean_final_reward: f64,
    pub mean_total_reward: f64,
    pub mean_shared_reward: f64,
    /// Mean format penalty per agent.
    pub agent_penalty: Vec<f64>,
    /// Mean intra-group output similarity per agent; `None` without groups.
    pub agent_similarity: Vec<Option<f64>>,
    pub objective: f64,
    pub kl: f64,
    pub max_ratio_deviation: f64,
    pub clip_fraction: f64,
    pub groups: usize,
    pub excluded_groups: usize,
    pub pairs: usize,
    pub policy_calls: usize,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub critic_loss: Option<f64>,
}

fn mean(xs: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = xs.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    if n == 0 {
        0.0
    } else {
        s / n as f64
    }
}

pub(crate) fn batch_stats(
    batch: &PreparedBatch,
    update: &UpdateStats,
    n_agents: usize,
    stop_token: Token,
) -> StepStats {
    let s = &batch.samples;
    let agent_penalty = (1..=n_agents)
        .map(|k| {
            mean(
                s.iter()
                    .filter(|x| x.agent_id.0 == k)
                    .map(|x| x.reward.specific),
            )
        })
        .collect();
    let mut groups: BTreeMap<GroupKey, Vec<&TrainSample>> = BTreeMap::new();
    for x in s {
        groups.entry(x.group_key).or_default().push(x);
    }
    let agent_similarity = (1..=n_agents)
        .map(|k| {
            let sims: Vec<f64> = groups
                .values()
                .filter(|g| g.len() >= 2 && g.iter().all(|x| x.agent_id.0 == k))
                .filter_map(|g| {
                    let outputs: Vec<&[Token]> = g
                        .iter()
                        .map(|x| crate::types::strip_stop(&x.output_seq, stop_token))
                        .collect();
                    intra_group_similarity(&outputs).ok()
                })
                .collect();
            (!sims.is_empty()).then(|| mean(sims.into_iter()))
        })
        .collect();
    StepStats {
        mean_final_reward: mean(batch.final_rewards.iter().copied()),
        mean_total_reward: mean(s.iter().map(|x| x.reward.total)),
        mean_shared_reward: mean(s.iter().map(|x| x.reward.shared)),
        agent_penalty,
        agent_similarity,
        objective: update.objective,
        kl: update.kl,
        max_ratio_deviation: update.max_ratio_deviation,
        clip_fraction: update.clip_fraction,
        groups: batch.groups,
        excluded_groups: batch.excluded_groups,
        pairs: s.len(),
        policy_calls: batch.policy_calls,
        critic_loss: None,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    pub params: PolicyParams,
    pub critic: Option<CriticParams>,
    pub steps: usize,
}

/// Run the configured algorithm, reporting one metrics row per optimizer step.
pub fn train<F>(cfg: &TrainConfig, env: &SearchEnv, mut on_step: F) -> Result<TrainOutcome>
where
    F: FnMut(&MetricsRow) -> Result<()>,
{
    let n = env.topology().n();
    cfg.validate(n)?;
    let train_ids = env.data.train_ids();
    if train_ids.is_empty() {
        return Err(Error::Empty("training dataset"));
    }
    let eval_ids = env.data.eval_ids();
    let sampling = cfg.sampling(env);
    let settings = cfg.update_settings();
    let rules = PenaltyRules {
        answer_len_threshold: env.config().answer_len_threshold,
    };
    let mut params = PolicyParams::zeros(env.layout(), n);
    let anchor = params.clone();
    let mut critic = (cfg.algorithm == Algorithm::Mappo)
        .then(|| CriticParams::zeros(env.layout(), n, cfg.mappo.gamma, cfg.mappo.lambda));
    let mappo_plan = RolloutPlan {
        strategy: Strategy::Fof,
        group_size: 1,
        ..RolloutPlan::default()
    };

    let mut step = 0usize;
    'epochs: for epoch in 0..cfg.total_epochs {
        let mut order = train_ids.clone();
        order.shuffle(&mut StepSeeds::new(cfg.seed ^ SHUFFLE_SALT, epoch as u64).batch_rng());
        for batch in order.chunks(cfg.batch_size) {
            if cfg.max_steps.is_some_and(|m| step >= m) {
                break 'epochs;
            }
            step += 1;
            let seeds = StepSeeds::new(cfg.seed, step as u64);
            let reference = match cfg.kl_anchor {
                KlAnchor::PerBatch => params.clone(),
                KlAnchor::Fixed => anchor.clone(),
            };
            let stats = match (cfg.algorithm, critic.as_mut()) {
                (Algorithm::Mappo, Some(critic)) => {
                    let (rollouts, _) =
                        sample_batch(env, &params, &sampling, &mappo_plan, batch, seeds)?;
                    let prepared = prepare_batch(env, &rollouts, &rules, cfg.token_credit)?;
                    let mappo_batch = baseline::prepare_mappo_batch(&prepared, critic, &cfg.mappo)?;
                    let out = baseline::mappo_update(
                        &mappo_batch,
                        &params,
                        critic,
                        &reference,
                        &settings,
                        &cfg.mappo,
                        n,
                    )?;
                    params = out.actor;
                    *critic = out.critic;
                    let mut stats = batch_stats(&prepared, &out.stats, n, env.stop_token());
                    stats.groups = 0;
                    stats.excluded_groups = 0;
                    stats.critic_loss = Some(out.critic_loss);
                    stats
                }
                _ => {
                    let (rollouts, _) =
                        sample_batch(env, &params, &sampling, &cfg.plan, batch, seeds)?;
                    let prepared = prepare_batch(env, &rollouts, &rules, cfg.token_credit)?;
                    let (next, update) =
                        mhgpo_update(&prepared.samples, &params, &reference, &settings, n)?;
                    params = next;
                    batch_stats(&prepared, &update, n, env.stop_token())
                }
            };
            let eval = if cfg.eval_every > 0
                && step.is_multiple_of(cfg.eval_every)
                && !eval_ids.is_empty()
            {
                Some(evaluate_policy(env, &params, &eval_ids)?)
            } else {
                None
            };
            on_step(&MetricsRow {
                step,
                epoch: epoch + 1,
                stats,
                eval,
            })?;
        }
    }
    Ok(TrainOutcome {
        params,
        critic,
        steps: step,
    })
}
