//! Group-relative advantage estimation over (possibly heterogeneous) groups.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::types::GroupKey;

/// Groups whose reward spread falls below this are excluded.
pub const STD_FLOOR: f64 = 1e-8;

/// How a sequence-level advantage is spread over its tokens.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum TokenCredit {
    /// Every token carries the sequence advantage.
    #[default]
    Broadcast,
    /// Only the last token carries it.
    LastToken,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdvantageRecord {
    pub advantage: f64,
    pub token_advantages: Vec<f64>,
    /// Set for members of degenerate groups; they contribute nothing to the objective.
    pub excluded: bool,
}

/// Per-item normalized advantage and exclusion flag.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GroupAdvantage {
    pub advantage: f64,
    pub excluded: bool,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct GroupedAdvantages {
    pub items: Vec<GroupAdvantage>,
    pub groups: usize,
    pub excluded_groups: usize,
}

pub fn mean_and_population_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// `(R − mean) / std` within each group of equal keys.
///
/// Groups with fewer than two members or a population standard deviation
/// below [`STD_FLOOR`] are excluded and get zero advantages.
pub fn group_advantages(keys: &[GroupKey], totals: &[f64]) -> GroupedAdvantages {
    assert_eq!(keys.len(), totals.len(), "one reward per key");
    let mut members: HashMap<GroupKey, Vec<usize>> = HashMap::new();
    for (i, k) in keys.iter().enumerate() {
        members.entry(*k).or_default().push(i);
    }
    let mut items = vec![
        GroupAdvantage {
            advantage: 0.0,
            excluded: true,
        };
        keys.len()
    ];
    let mut excluded_groups = 0;
    for idx in members.values() {
        let rewards: Vec<f64> = idx.iter().map(|&i| totals[i]).collect();
        let (mean, std) = mean_and_population_std(&rewards);
        if idx.len() < 2 || std.is_nan() || std < STD_FLOOR {
            excluded_groups += 1;
            continue;
        }
        for &i in idx {
            items[i] = GroupAdvantage {
                advantage: (totals[i] - mean) / std,
                excluded: false,
            };
        }
    }
    GroupedAdvantages {
        items,
        groups: members.len(),
        excluded_groups,
    }
}

pub fn broadcast_token_advantages(
    advantage: f64,
    len: usize,
    credit: TokenCredit,
) -> Result<Vec<f64>> {
    if len == 0 {
        return Err(Error::Empty("token sequence"));
    }
    Ok(match credit {
        TokenCredit::Broadcast => vec![advantage; len],
        TokenCredit::LastToken => {
            let mut v = vec![0.0; len];
            v[len - 1] = advantage;
            v
        }
    })
}

impl AdvantageRecord {
    pub fn new(g: GroupAdvantage, len: usize, credit: TokenCredit) -> Result<Self> {
        Ok(Self {
            advantage: g.advantage,
            token_advantages: broadcast_token_advantages(g.advantage, len, credit)?,
            excluded: g.excluded,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::types::AgentId;
    use proptest::prelude::*;

    fn key(q: usize) -> GroupKey {
        GroupKey::per_question(q, AgentId(1))
    }

    #[test]
    fn hand_computed_group() {
        let keys = vec![key(0); 4];
        let g = group_advantages(&keys, &[1.0, 0.0, 1.0, 0.0]);
        let adv: Vec<f64> = g.items.iter().map(|a| a.advantage).collect();
        assert_eq!(adv, vec![1.0, -1.0, 1.0, -1.0]);
        assert_eq!(g.excluded_groups, 0);
    }

    #[test]
    fn degenerate_groups_are_excluded() {
        let keys = vec![key(0), key(0), key(0), key(1)];
        let g = group_advantages(&keys, &[0.5, 0.5, 0.5, 0.9]);
        assert!(g.items.iter().all(|a| a.excluded && a.advantage == 0.0));
        assert_eq!(g.groups, 2);
        assert_eq!(g.excluded_groups, 2);
    }

    #[test]
    fn token_credit() {
        assert_eq!(
            broadcast_token_advantages(1.3, 5, TokenCredit::Broadcast).unwrap(),
            vec![1.3; 5]
        );
        assert_eq!(
            broadcast_token_advantages(0.0, 3, TokenCredit::Broadcast).unwrap(),
            vec![0.0; 3]
        );
        assert_eq!(
            broadcast_token_advantages(-2.0, 1, TokenCredit::Broadcast).unwrap(),
            vec![-2.0]
        );
        assert_eq!(
            broadcast_token_advantages(0.7, 3, TokenCredit::LastToken).unwrap(),
            vec![0.0, 0.0, 0.7]
        );
        assert!(broadcast_token_advantages(1.0, 0, TokenCredit::Broadcast).is_err());
    }

    proptest! {
        #[test]
        fn shift_and_scale_invariance(rewards in prop::collection::vec(-5.0f64..5.0, 2..12),
                                      shift in -10.0f64..10.0, scale in 0.1f64..10.0) {
            let keys = vec![key(0); rewards.len()];
            let base = group_advantages(&keys, &rewards);
            let moved: Vec<f64> = rewards.iter().map(|r| r * scale + shift).collect();
            let other = group_advantages(&keys, &moved);
            for (a, b) in base.items.iter().zip(&other.items) {
                if !a.excluded && !b.excluded {
                    prop_assert!((a.advantage - b.advantage).abs() < 1e-6);
                }
            }
        }

        #[test]
        fn grouping_depends_only_on_keys_and_rewards(rewards in prop::collection::vec(0.0f64..1.0, 1..16),
                                                     split in 1usize..4) {
            let keys: Vec<GroupKey> = (0..rewards.len()).map(|i| key(i % split)).collect();
            let a = group_advantages(&keys, &rewards);
            let b = group_advantages(&keys, &rewards);
            prop_assert_eq!(a, b);
        }
    }
}
