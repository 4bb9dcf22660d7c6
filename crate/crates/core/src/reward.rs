//! Answer metrics, backward propagation of shared rewards, and format penalties.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::types::{OutputFlags, RoleKind, RolloutPair, Token, Trajectory};

/// Rewriters emitting more than this many query tokens are penalized.
pub const REWRITER_QUERY_LIMIT: usize = 4;
pub const REWRITER_PENALTY: f64 = -0.5;
pub const RERANKER_PENALTY: f64 = -0.5;
pub const ANSWERER_PENALTY: f64 = -1.0;

/// Normalization applied before EM/accuracy. Token ids are already canonical.
pub fn normalize(tokens: &[Token]) -> Vec<Token> {
    tokens.to_vec()
}

fn counts(tokens: &[Token]) -> HashMap<Token, usize> {
    let mut m = HashMap::new();
    for &t in tokens {
        *m.entry(t).or_insert(0) += 1;
    }
    m
}

fn common(prediction: &[Token], gold: &[Token]) -> usize {
    let pred = counts(prediction);
    counts(gold)
        .iter()
        .map(|(t, g)| pred.get(t).map_or(0, |p| (*p).min(*g)))
        .sum()
}

/// Token-multiset F1 between a prediction and the gold answer.
pub fn f1_score(prediction: &[Token], gold: &[Token]) -> Result<f64> {
    if gold.is_empty() {
        return Err(Error::Empty("gold answer"));
    }
    let same = common(prediction, gold);
    if same == 0 {
        return Ok(0.0);
    }
    let precision = same as f64 / prediction.len() as f64;
    let recall = same as f64 / gold.len() as f64;
    Ok(2.0 * precision * recall / (precision + recall))
}

pub fn exact_match(prediction: &[Token], gold: &[Token]) -> Result<f64> {
    if gold.is_empty() {
        return Err(Error::Empty("gold answer"));
    }
    Ok(f64::from(u8::from(
        normalize(prediction) == normalize(gold),
    )))
}

/// 1 iff every gold token (with multiplicity) appears in the prediction.
pub fn accuracy(prediction: &[Token], gold: &[Token]) -> Result<f64> {
    if gold.is_empty() {
        return Err(Error::Empty("gold answer"));
    }
    let gold = normalize(gold);
    Ok(f64::from(u8::from(
        common(&normalize(prediction), &gold) == gold.len(),
    )))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RewardRecord {
    pub shared: f64,
    pub specific: f64,
    pub total: f64,
}

impl RewardRecord {
    pub fn new(shared: f64, specific: f64) -> Self {
        Self {
            shared,
            specific,
            total: shared + specific,
        }
    }
}

/// Shared reward of every pair, propagated from trajectory endpoints.
///
/// A terminal pair receives its trajectory's final reward. Every other pair
/// receives the mean shared reward of its direct successors, the pairs whose
/// prompt was built from its output.
pub fn propagate_shared_rewards(
    pairs: &[RolloutPair],
    trajectories: &[Trajectory],
    final_rewards: &[f64],
) -> Result<Vec<f64>> {
    if trajectories.len() != final_rewards.len() {
        return Err(Error::Propagation(format!(
            "{} trajectories but {} final rewards",
            trajectories.len(),
            final_rewards.len()
        )));
    }
    let mut shared: Vec<Option<f64>> = vec![None; pairs.len()];
    for (traj, &reward) in trajectories.iter().zip(final_rewards) {
        let &last = traj
            .steps
            .last()
            .ok_or_else(|| Error::Propagation("empty trajectory".into()))?;
        shared[last] = Some(reward);
    }
    let mut successors: Vec<Vec<usize>> = vec![Vec::new(); pairs.len()];
    for (i, p) in pairs.iter().enumerate() {
        if let Some(prev) = p.predecessor {
            successors[prev].push(i);
        }
    }
    let mut order: Vec<usize> = (0..pairs.len()).collect();
    order.sort_by(|&a, &b| pairs[b].agent_id.cmp(&pairs[a].agent_id));
    for i in order {
        if shared[i].is_some() {
            continue;
        }
        let succ = &successors[i];
        if succ.is_empty() {
            return Err(Error::Propagation(format!(
                "pair {i} of agent {} has no successor and ends no trajectory",
                pairs[i].agent_id
            )));
        }
        let mut sum = 0.0;
        for &s in succ {
            sum += shared[s].ok_or_else(|| {
                Error::Propagation(format!("successor {s} of pair {i} has no reward yet"))
            })?;
        }
        shared[i] = Some(sum / succ.len() as f64);
    }
    Ok(shared.into_iter().map(|s| s.unwrap_or_default()).collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PenaltyRules {
    pub answer_len_threshold: usize,
}

impl Default for PenaltyRules {
    fn default() -> Self {
        Self {
            answer_len_threshold: 8,
        }
    }
}

/// Agent-specific format penalty (always ≤ 0).
pub fn agent_specific_penalty(kind: RoleKind, flags: &OutputFlags, rules: &PenaltyRules) -> f64 {
    match kind {
        RoleKind::Rewriter if flags.content_len > REWRITER_QUERY_LIMIT => REWRITER_PENALTY,
        RoleKind::Reranker if flags.duplicate || flags.out_of_range => RERANKER_PENALTY,
        RoleKind::Answerer if flags.content_len > rules.answer_len_threshold => ANSWERER_PENALTY,
        _ => 0.0,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::types::{AgentId, GroupKey};
    use proptest::prelude::*;

    #[test]
    fn f1_examples() {
        assert_eq!(f1_score(&[1, 2, 3], &[1, 2, 3]).unwrap(), 1.0);
        assert_eq!(f1_score(&[4, 5], &[1, 2, 3]).unwrap(), 0.0);
        // {ed, wood} vs {ed, wood, jr}: P = 1, R = 2/3.
        assert!((f1_score(&[10, 11], &[10, 11, 12]).unwrap() - 0.8).abs() < 1e-15);
        assert_eq!(f1_score(&[], &[1]).unwrap(), 0.0);
        assert!(f1_score(&[1], &[]).is_err());
    }

    #[test]
    fn em_and_accuracy() {
        assert_eq!(exact_match(&[1, 2], &[1, 2]).unwrap(), 1.0);
        assert_eq!(accuracy(&[1, 2], &[1, 2]).unwrap(), 1.0);
        assert_eq!(exact_match(&[1, 2, 9], &[1, 2]).unwrap(), 0.0);
        assert_eq!(accuracy(&[1, 2, 9], &[1, 2]).unwrap(), 1.0);
        assert_eq!(exact_match(&[2, 1], &[1, 2]).unwrap(), 0.0);
        assert_eq!(accuracy(&[2, 1], &[1, 2]).unwrap(), 1.0);
        assert_eq!(accuracy(&[1], &[1, 1]).unwrap(), 0.0);
        assert!(exact_match(&[1], &[]).is_err());
    }

    fn pair(agent: usize, predecessor: Option<usize>) -> RolloutPair {
        RolloutPair {
            question_id: 0,
            agent_id: AgentId(agent),
            input_ctx: vec![],
            output_seq: vec![0],
            token_logps: vec![0.0],
            group_key: GroupKey::per_question(0, AgentId(agent)),
            trajectory_id: None,
            predecessor,
            fork_agent: AgentId(1),
            flags: OutputFlags::default(),
            regroup_excluded: false,
        }
    }

    fn traj(steps: Vec<usize>) -> Trajectory {
        Trajectory {
            question_id: 0,
            steps,
            final_output: vec![],
        }
    }

    #[test]
    fn single_successor_passes_reward_through() {
        let pairs = vec![pair(1, None), pair(2, Some(0))];
        let shared = propagate_shared_rewards(&pairs, &[traj(vec![0, 1])], &[0.8]).unwrap();
        assert_eq!(shared, vec![0.8, 0.8]);
    }

    #[test]
    fn fork_at_second_agent_averages_branches() {
        // A1 → four A2 branches → one A3 each.
        let mut pairs = vec![pair(1, None)];
        let mut trajs = Vec::new();
        for _ in 0..4 {
            let a2 = pairs.len();
            pairs.push(pair(2, Some(0)));
            pairs.push(pair(3, Some(a2)));
            trajs.push(traj(vec![0, a2, a2 + 1]));
        }
        let shared = propagate_shared_rewards(&pairs, &trajs, &[1.0, 0.0, 0.0, 1.0]).unwrap();
        assert_eq!(shared[0], 0.5);
        assert_eq!(shared[1], 1.0);
        assert_eq!(shared[3], 0.0);
    }

    #[test]
    fn orphan_pair_is_an_error() {
        let pairs = vec![pair(1, None), pair(2, Some(0)), pair(1, None)];
        let r = propagate_shared_rewards(&pairs, &[traj(vec![0, 1])], &[1.0]);
        assert!(matches!(r, Err(Error::Propagation(_))));
    }

    #[test]
    fn penalties_match_the_rules() {
        let rules = PenaltyRules::default();
        let f = |content_len, duplicate, out_of_range| OutputFlags {
            content_len,
            duplicate,
            out_of_range,
        };
        assert_eq!(
            agent_specific_penalty(RoleKind::Rewriter, &f(5, false, false), &rules),
            -0.5
        );
        assert_eq!(
            agent_specific_penalty(RoleKind::Rewriter, &f(4, false, false), &rules),
            0.0
        );
        assert_eq!(
            agent_specific_penalty(RoleKind::Reranker, &f(2, true, false), &rules),
            -0.5
        );
        assert_eq!(
            agent_specific_penalty(RoleKind::Reranker, &f(2, false, true), &rules),
            -0.5
        );
        assert_eq!(
            agent_specific_penalty(RoleKind::Reranker, &f(2, false, false), &rules),
            0.0
        );
        assert_eq!(
            agent_specific_penalty(RoleKind::Answerer, &f(9, false, false), &rules),
            -1.0
        );
        assert_eq!(
            agent_specific_penalty(RoleKind::Answerer, &f(8, false, false), &rules),
            0.0
        );
        assert_eq!(
            agent_specific_penalty(RoleKind::Generic, &f(99, true, true), &rules),
            0.0
        );
    }

    #[test]
    fn record_total_is_sum() {
        let r = RewardRecord::new(0.75, -0.5);
        assert_eq!(r.total, r.shared + r.specific);
    }

    proptest! {
        #[test]
        fn f1_is_permutation_invariant(mut pred in prop::collection::vec(0usize..6, 0..8),
                                       gold in prop::collection::vec(0usize..6, 1..8),
                                       seed in any::<u64>()) {
            let base = f1_score(&pred, &gold).unwrap();
            let n = pred.len();
            if n > 1 {
                pred.rotate_left((seed as usize) % n);
                pred.swap(0, n - 1);
            }
            prop_assert!((f1_score(&pred, &gold).unwrap() - base).abs() < 1e-15);
            prop_assert!((0.0..=1.0).contains(&base));
        }

        #[test]
        fn f1_of_self_is_one(x in prop::collection::vec(0usize..6, 1..8)) {
            prop_assert_eq!(f1_score(&x, &x).unwrap(), 1.0);
        }
    }
}
