//! MAPPO baseline: shared actor, linear role-conditioned critic, GAE advantages.
//!
//! Uses the same rollout and reward plumbing as MHGPO with one trajectory per
//! question. Each agent's total reward sits on its last token.

use serde::{Deserialize, Serialize};

use crate::advantage::{mean_and_population_std, STD_FLOOR};
use crate::error::{Error, Result};
use crate::policy::{sequence_features, FeatureLayout, PolicyParams};
use crate::trainer::{
    aggregation_weights, policy_update, PreparedBatch, UpdateItem, UpdateSettings, UpdateStats,
};
use crate::types::{AgentId, QuestionId, Token};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MappoConfig {
    pub critic_lr: f64,
    pub gamma: f64,
    pub lambda: f64,
    /// Standardize advantages over every token of the batch.
    pub whiten_advantages: bool,
}

impl Default for MappoConfig {
    fn default() -> Self {
        Self {
            critic_lr: 0.005,
            gamma: 1.0,
            lambda: 1.0,
            whiten_advantages: false,
        }
    }
}

impl MappoConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.gamma) || !(0.0..=1.0).contains(&self.lambda) {
            return Err(Error::Config(format!(
                "gamma {} and lambda {} must lie in [0, 1]",
                self.gamma, self.lambda
            )));
        }
        if !self.critic_lr.is_finite() || self.critic_lr < 0.0 {
            return Err(Error::Config(format!(
                "critic_lr {} must be non-negative",
                self.critic_lr
            )));
        }
        Ok(())
    }
}

/// Linear value function over `(role, step feature)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CriticParams {
    pub layout: FeatureLayout,
    pub n_roles: usize,
    pub weights: Vec<f64>,
    pub gamma: f64,
    pub lambda: f64,
}

impl CriticParams {
    pub fn zeros(layout: FeatureLayout, n_roles: usize, gamma: f64, lambda: f64) -> Self {
        Self {
            layout,
            n_roles,
            weights: vec![0.0; n_roles * layout.feature_dim()],
            gamma,
            lambda,
        }
    }

    fn offset(&self, role: AgentId) -> Result<usize> {
        if role.0 == 0 || role.0 > self.n_roles {
            return Err(Error::Shape(format!(
                "role {role} outside 1..={}",
                self.n_roles
            )));
        }
        Ok(role.index() * self.layout.feature_dim())
    }
}

/// `w_role · x` for one step's sparse features.
pub fn critic_value(
    critic: &CriticParams,
    role: AgentId,
    features: &[(usize, f64)],
) -> Result<f64> {
    let off = critic.offset(role)?;
    let dim = critic.layout.feature_dim();
    let mut v = 0.0;
    for &(f, x) in features {
        if f >= dim {
            return Err(Error::Shape(format!("feature {f} outside {dim}")));
        }
        v += critic.weights[off + f] * x;
    }
    if !v.is_finite() {
        return Err(Error::NonFinite("critic value"));
    }
    Ok(v)
}

/// Backward recursion `A_t = δ_t + γλ A_{t+1}`, `δ_t = r_t + γ V_{t+1} − V_t`, `V_{T+1} = 0`.
pub fn gae_advantages(
    rewards: &[f64],
    values: &[f64],
    gamma: f64,
    lambda: f64,
) -> Result<Vec<f64>> {
    if rewards.len() != values.len() {
        return Err(Error::Shape(format!(
            "{} rewards but {} values",
            rewards.len(),
            values.len()
        )));
    }
    let mut adv = vec![0.0; rewards.len()];
    let mut next_value = 0.0;
    let mut running = 0.0;
    for t in (0..rewards.len()).rev() {
        let delta = rewards[t] + gamma * next_value - values[t];
        running = delta + gamma * lambda * running;
        adv[t] = running;
        next_value = values[t];
    }
    Ok(adv)
}

#[derive(Debug, Clone, PartialEq)]
pub struct MappoSample {
    pub question_id: QuestionId,
    pub agent_id: AgentId,
    pub context: Vec<f64>,
    pub output_seq: Vec<Token>,
    pub sampling_logps: Vec<f64>,
    pub features: Vec<Vec<(usize, f64)>>,
    pub values: Vec<f64>,
    /// Actor advantages, whitened if configured.
    pub advantages: Vec<f64>,
    /// Critic targets `GAE + V`.
    pub returns: Vec<f64>,
}

/// Attach critic values, GAE advantages and returns to a prepared batch.
pub fn prepare_mappo_batch(
    batch: &PreparedBatch,
    critic: &CriticParams,
    cfg: &MappoConfig,
) -> Result<Vec<MappoSample>> {
    let mut out = Vec::with_capacity(batch.samples.len());
    for s in &batch.samples {
        let features = sequence_features(&critic.layout, &s.context, &s.output_seq)?;
        let values = features
            .iter()
            .map(|f| critic_value(critic, s.agent_id, f))
            .collect::<Result<Vec<_>>>()?;
        let mut rewards = vec![0.0; values.len()];
        if let Some(last) = rewards.last_mut() {
            *last = s.reward.total;
        }
        let advantages = gae_advantages(&rewards, &values, cfg.gamma, cfg.lambda)?;
        let returns = advantages.iter().zip(&values).map(|(a, v)| a + v).collect();
        out.push(MappoSample {
            question_id: s.question_id,
            agent_id: s.agent_id,
            context: s.context.clone(),
            output_seq: s.output_seq.clone(),
            sampling_logps: s.sampling_logps.clone(),
            features,
            values,
            advantages,
            returns,
        });
    }
    if cfg.whiten_advantages {
        let all: Vec<f64> = out
            .iter()
            .flat_map(|s| s.advantages.iter().copied())
            .collect();
        if all.len() >= 2 {
            let (mean, std) = mean_and_population_std(&all);
            let scale = if std >= STD_FLOOR { std } else { 1.0 };
            for s in &mut out {
                s.advantages
                    .iter_mut()
                    .for_each(|a| *a = (*a - mean) / scale);
            }
        }
    }
    Ok(out)
}

/// Mean squared error of the critic against the stored returns.
pub fn critic_loss(critic: &CriticParams, samples: &[MappoSample]) -> Result<f64> {
    let mut sum = 0.0;
    let mut n = 0usize;
    for s in samples {
        for (f, ret) in s.features.iter().zip(&s.returns) {
            let v = critic_value(critic, s.agent_id, f)?;
            sum += (v - ret).powi(2);
            n += 1;
        }
    }
    if n == 0 {
        return Err(Error::Empty("critic batch"));
    }
    Ok(sum / n as f64)
}

/// One gradient-descent step on [`critic_loss`].
pub fn critic_update(
    critic: &CriticParams,
    samples: &[MappoSample],
    lr: f64,
) -> Result<CriticParams> {
    let n: usize = samples.iter().map(|s| s.features.len()).sum();
    if n == 0 {
        return Err(Error::Empty("critic batch"));
    }
    let mut grad = vec![0.0; critic.weights.len()];
    for s in samples {
        let off = critic.offset(s.agent_id)?;
        for (f, ret) in s.features.iter().zip(&s.returns) {
            let err = critic_value(critic, s.agent_id, f)? - ret;
            for &(i, x) in f {
                grad[off + i] += 2.0 * err * x / n as f64;
            }
        }
    }
    let mut next = critic.clone();
    for (w, g) in next.weights.iter_mut().zip(&grad) {
        *w -= lr * g;
    }
    if next.weights.iter().any(|w| !w.is_finite()) {
        return Err(Error::NonFinite("critic weights"));
    }
    Ok(next)
}

#[derive(Debug, Clone, PartialEq)]
pub struct MappoOutcome {
    pub actor: PolicyParams,
    pub critic: CriticParams,
    pub stats: UpdateStats,
    /// Critic loss before the update.
    pub critic_loss: f64,
}

/// PPO-clip actor step on GAE advantages plus critic regression.
pub fn mappo_update(
    samples: &[MappoSample],
    actor: &PolicyParams,
    critic: &CriticParams,
    reference: &PolicyParams,
    settings: &UpdateSettings,
    cfg: &MappoConfig,
    n_agents: usize,
) -> Result<MappoOutcome> {
    if samples.is_empty() {
        return Err(Error::Empty("update batch"));
    }
    let weights = aggregation_weights(
        samples
            .iter()
            .map(|s| (s.question_id, s.agent_id, s.output_seq.len())),
        n_agents,
    );
    let items: Vec<UpdateItem<'_>> = samples
        .iter()
        .zip(weights)
        .map(|(s, weight)| UpdateItem {
            agent: s.agent_id,
            context: &s.context,
            sequence: &s.output_seq,
            sampling_logps: &s.sampling_logps,
            token_advantages: &s.advantages,
            weight,
        })
        .collect();
    let (actor, stats) = policy_update(actor, reference, &items, settings)?;
    let loss = critic_loss(critic, samples)?;
    let mut next = critic.clone();
    for _ in 0..settings.ppo_epochs {
        next = critic_update(&next, samples, cfg.critic_lr)?;
    }
    Ok(MappoOutcome {
        actor,
        critic: next,
        stats,
        critic_loss: loss,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::trainer::KlMode;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn brute_force(rewards: &[f64], values: &[f64], gamma: f64, lambda: f64) -> Vec<f64> {
        let t_max = rewards.len();
        let v = |i: usize| if i < t_max { values[i] } else { 0.0 };
        (0..t_max)
            .map(|t| {
                (0..t_max - t)
                    .map(|l| {
                        let delta = rewards[t + l] + gamma * v(t + l + 1) - v(t + l);
                        (gamma * lambda).powi(l as i32) * delta
                    })
                    .sum()
            })
            .collect()
    }

    #[test]
    fn gae_examples() {
        assert_eq!(
            gae_advantages(&[0.0, 0.0, 0.7], &[0.0; 3], 1.0, 1.0).unwrap(),
            vec![0.7, 0.7, 0.7]
        );
        let a = gae_advantages(&[1.0], &[0.4], 0.9, 0.95).unwrap();
        assert!((a[0] - 0.6).abs() < 1e-15);
        let r = [0.1, -0.2, 0.5];
        let v = [0.3, 0.2, -0.1];
        let a = gae_advantages(&r, &v, 0.9, 0.0).unwrap();
        let delta = [0.1 + 0.9 * 0.2 - 0.3, -0.2 + 0.9 * -0.1 - 0.2, 0.5 - -0.1];
        for (x, d) in a.iter().zip(delta) {
            assert!((x - d).abs() < 1e-15);
        }
        assert!(gae_advantages(&[1.0], &[], 1.0, 1.0).is_err());
    }

    #[test]
    fn gae_matches_double_sum() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..100 {
            let len = rng.gen_range(1..=16);
            let r: Vec<f64> = (0..len).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let v: Vec<f64> = (0..len).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let (g, l) = (rng.gen_range(0.0..=1.0), rng.gen_range(0.0..=1.0));
            let a = gae_advantages(&r, &v, g, l).unwrap();
            for (x, y) in a.iter().zip(brute_force(&r, &v, g, l)) {
                assert!((x - y).abs() < 1e-10);
            }
        }
    }

    fn layout() -> FeatureLayout {
        FeatureLayout {
            context_dim: 3,
            vocab_size: 4,
            max_positions: 3,
        }
    }

    #[test]
    fn critic_value_is_linear() {
        let mut c = CriticParams::zeros(layout(), 2, 1.0, 1.0);
        assert_eq!(
            critic_value(&c, AgentId(2), &[(0, 1.0), (4, 2.0)]).unwrap(),
            0.0
        );
        let off = c.layout.feature_dim();
        c.weights[off] = 0.5;
        c.weights[off + 4] = -1.0;
        assert_eq!(
            critic_value(&c, AgentId(2), &[(0, 1.0), (4, 2.0)]).unwrap(),
            -1.5
        );
        assert_eq!(
            critic_value(&c, AgentId(1), &[(0, 1.0), (4, 2.0)]).unwrap(),
            0.0
        );
        assert!(critic_value(&c, AgentId(3), &[]).is_err());
    }

    fn frozen_batch(rng: &mut ChaCha8Rng) -> Vec<MappoSample> {
        (0..12)
            .map(|i| {
                let context: Vec<f64> = (0..3).map(|_| rng.gen_range(0.0..2.0)).collect();
                let output_seq: Vec<Token> = (0..rng.gen_range(1..=3))
                    .map(|_| rng.gen_range(0..4))
                    .collect();
                let features = sequence_features(&layout(), &context, &output_seq).unwrap();
                let returns = features.iter().map(|_| rng.gen_range(-1.0..1.0)).collect();
                MappoSample {
                    question_id: i / 2,
                    agent_id: AgentId(1 + i % 2),
                    sampling_logps: vec![-(4f64.ln()); output_seq.len()],
                    values: vec![0.0; output_seq.len()],
                    advantages: vec![0.0; output_seq.len()],
                    context,
                    output_seq,
                    features,
                    returns,
                }
            })
            .collect()
    }

    #[test]
    fn critic_loss_is_non_increasing_on_frozen_batch() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let batch = frozen_batch(&mut rng);
        let mut c = CriticParams::zeros(layout(), 2, 1.0, 1.0);
        let mut last = critic_loss(&c, &batch).unwrap();
        let first = last;
        for _ in 0..200 {
            c = critic_update(&c, &batch, 0.02).unwrap();
            let now = critic_loss(&c, &batch).unwrap();
            assert!(now <= last + 1e-15, "{now} > {last}");
            last = now;
        }
        assert!(last < first);
    }

    #[test]
    fn zero_advantages_leave_actor_unchanged() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let batch = frozen_batch(&mut rng);
        let actor = PolicyParams::zeros(layout(), 2);
        let critic = CriticParams::zeros(layout(), 2, 1.0, 1.0);
        let settings = UpdateSettings {
            lr: 0.1,
            clip_eps: 0.2,
            kl_beta: 0.0,
            kl_mode: KlMode::Estimator,
            ppo_epochs: 1,
        };
        let out = mappo_update(
            &batch,
            &actor,
            &critic,
            &actor,
            &settings,
            &MappoConfig::default(),
            2,
        )
        .unwrap();
        assert_eq!(out.actor, actor);
        assert!(out.stats.max_ratio_deviation <= 1e-12);
        assert!(critic_loss(&out.critic, &batch).unwrap() < out.critic_loss);
    }

    #[test]
    fn perfect_critic_gives_zero_advantages() {
        // Values equal to the undiscounted return make every δ vanish.
        let r = [0.0, 0.0, 0.8];
        let a = gae_advantages(&r, &[0.8, 0.8, 0.8], 1.0, 1.0).unwrap();
        assert!(a.iter().all(|x| x.abs() < 1e-15));
    }
}
