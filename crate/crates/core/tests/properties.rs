use std::collections::{BTreeSet, HashMap};
use std::sync::OnceLock;

use mhgpo::advantage::{group_advantages, mean_and_population_std};
use mhgpo::env::{EnvConfig, SearchEnv, SynthDataset};
use mhgpo::metrics::intra_group_similarity;
use mhgpo::policy::{walk_sequence, PolicyParams};
use mhgpo::reward::{f1_score, propagate_shared_rewards};
use mhgpo::rollout::{fork_on, sample_batch, RegroupMode, RolloutPlan, StepSeeds, Strategy};
use mhgpo::trainer::{clipped_surrogate, kl_estimate, train, Algorithm, TrainConfig};
use mhgpo::{AgentId, GroupKey, MasTopology};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn env() -> &'static SearchEnv {
    static ENV: OnceLock<SearchEnv> = OnceLock::new();
    ENV.get_or_init(|| {
        SearchEnv::new(
            SynthDataset::generate(EnvConfig::default(), 17).unwrap(),
            MasTopology::search_chain(6, 4, 10),
        )
        .unwrap()
    })
}

fn random_params(seed: u64, scale: f64) -> PolicyParams {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut p = PolicyParams::zeros(env().layout(), 3);
    p.weights_mut()
        .iter_mut()
        .for_each(|w| *w = rng.gen_range(-scale..scale));
    p
}

fn strategy() -> impl proptest::strategy::Strategy<Value = Strategy> {
    prop_oneof![Just(Strategy::Is), Just(Strategy::Fof), Just(Strategy::Rr)]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn fork_counts_follow_formula(seed in any::<u64>(), g in 1usize..7, fork in 1usize..=3, q in 0usize..160) {
        let env = env();
        let params = random_params(seed, 0.5);
        let sampling = TrainConfig::default().sampling(env);
        let f = fork_on(env, &params, &sampling, q, g, AgentId(fork), &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        let want: Vec<usize> = (1..=3).map(|k| if k < fork { 1 } else { g }).collect();
        prop_assert_eq!(f.agent_counts(3), want);
        prop_assert_eq!(f.pairs.len(), (fork - 1) + (3 - fork + 1) * g);
        prop_assert_eq!(f.trajectories.len(), g);
        let fork_inputs: Vec<_> = f.pairs.iter().filter(|p| p.agent_id.0 == fork).map(|p| &p.input_ctx).collect();
        prop_assert!(fork_inputs.iter().all(|c| *c == fork_inputs[0]));
    }

    #[test]
    fn every_kept_pair_is_keyed_once(seed in any::<u64>(), strat in strategy(), pooled in any::<bool>()) {
        let env = env();
        let params = random_params(seed, 0.5);
        let sampling = TrainConfig::default().sampling(env);
        let plan = RolloutPlan {
            strategy: strat,
            regroup: if pooled { RegroupMode::Pooled } else { RegroupMode::PerAgentFork },
            ..RolloutPlan::default()
        };
        let batch: Vec<usize> = (0..16).map(|i| (seed as usize + 7 * i) % 160).collect::<BTreeSet<_>>().into_iter().collect();
        let (rollouts, summary) = sample_batch(env, &params, &sampling, &plan, &batch, StepSeeds::new(seed, 1)).unwrap();
        let mut sizes: HashMap<GroupKey, usize> = HashMap::new();
        let mut kept = 0;
        let mut excluded = 0;
        for p in rollouts.iter().flat_map(|r| r.kept_pairs()) {
            *sizes.entry(p.group_key).or_default() += 1;
            kept += 1;
            excluded += usize::from(p.regroup_excluded);
            prop_assert_eq!(p.group_key.is_regrouped(), p.group_key.batch_bucket.is_some());
            prop_assert_eq!(p.token_logps.len(), p.output_seq.len());
        }
        prop_assert_eq!(sizes.values().sum::<usize>(), kept);
        prop_assert_eq!(excluded, summary.excluded);
        let buckets = sizes.keys().filter(|k| k.is_regrouped()).count();
        prop_assert_eq!(buckets, summary.buckets);
        for (k, n) in &sizes {
            if k.is_regrouped() {
                prop_assert_eq!(*n, plan.group_size);
            }
        }
        if strat == Strategy::Fof {
            for r in &rollouts {
                let mut per_agent = [0usize; 3];
                for p in r.kept_pairs() {
                    per_agent[p.agent_id.index()] += 1;
                }
                prop_assert_eq!(per_agent, [4, 4, 4]);
            }
        }
    }

    #[test]
    fn shared_rewards_stay_within_final_range(seed in any::<u64>(), fork in 1usize..=3, finals in prop::collection::vec(0.0f64..1.0, 4)) {
        let env = env();
        let params = random_params(seed, 0.5);
        let sampling = TrainConfig::default().sampling(env);
        let f = fork_on(env, &params, &sampling, 3, 4, AgentId(fork), &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        let shared = propagate_shared_rewards(&f.pairs, &f.trajectories, &finals).unwrap();
        let lo = finals.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = finals.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        for s in &shared {
            prop_assert!(*s >= lo - 1e-12 && *s <= hi + 1e-12);
        }
        // Pairs on a single branch carry that branch's final reward exactly.
        for (t, traj) in f.trajectories.iter().enumerate() {
            for &i in &traj.steps {
                if f.pairs[i].agent_id.0 >= fork {
                    prop_assert_eq!(shared[i], finals[t]);
                }
            }
        }
        let prefix_mean = finals.iter().sum::<f64>() / 4.0;
        for (i, p) in f.pairs.iter().enumerate() {
            if p.agent_id.0 < fork {
                prop_assert!((shared[i] - prefix_mean).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn included_groups_are_standardized(groups in prop::collection::vec(prop::collection::vec(-2.0f64..2.0, 1..10), 1..6)) {
        let mut keys = Vec::new();
        let mut totals = Vec::new();
        for (q, g) in groups.iter().enumerate() {
            for r in g {
                keys.push(GroupKey::per_question(q, AgentId(2)));
                totals.push(*r);
            }
        }
        let out = group_advantages(&keys, &totals);
        let mut offset = 0;
        for g in &groups {
            let items = &out.items[offset..offset + g.len()];
            offset += g.len();
            if items[0].excluded {
                prop_assert!(items.iter().all(|a| a.excluded && a.advantage == 0.0));
                continue;
            }
            let adv: Vec<f64> = items.iter().map(|a| a.advantage).collect();
            let (mean, std) = mean_and_population_std(&adv);
            prop_assert!(mean.abs() < 1e-9);
            prop_assert!((std - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn step_distributions_are_normalized(seed in any::<u64>(), role in 1usize..=3, q in 0usize..200) {
        let env = env();
        let params = random_params(seed, 2.0);
        let state = env.initial_state(q);
        let (ctx, _) = env.process_prompt(&state, AgentId(1), &[]).unwrap();
        let seq: Vec<usize> = (0..6).map(|i| (seed as usize + i) % 16).collect();
        walk_sequence(&params, AgentId(role), &ctx, &seq, |s| {
            let total: f64 = s.log_probs.iter().map(|l| l.exp()).sum();
            assert!((total - 1.0).abs() <= 1e-12, "{total}");
        }).unwrap();
    }

    #[test]
    fn kl_estimate_is_non_negative(cur in prop::collection::vec(-20.0f64..0.0, 1..12), shift in prop::collection::vec(-5.0f64..5.0, 12)) {
        let reference: Vec<f64> = cur.iter().zip(&shift).map(|(c, s)| c + s).collect();
        prop_assert!(kl_estimate(&cur, &reference) >= 0.0);
    }

    #[test]
    fn surrogate_respects_clip_bound(r in 0.01f64..5.0, a in -3.0f64..3.0, eps in 0.01f64..0.5) {
        let s = clipped_surrogate(r, a, eps).unwrap();
        let candidates = [r * a, (1.0 - eps) * a, (1.0 + eps) * a];
        let lo = candidates.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = candidates.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        prop_assert!(s >= lo - 1e-12 && s <= hi + 1e-12);
        prop_assert!(s <= r * a + 1e-12);
        if a > 0.0 {
            prop_assert!(s <= (1.0 + eps) * a + 1e-12);
        }
    }

    #[test]
    fn similarity_is_permutation_invariant(outputs in prop::collection::vec(prop::collection::vec(0usize..6, 0..5), 2..6), rot in 0usize..6) {
        let refs: Vec<&[usize]> = outputs.iter().map(|o| o.as_slice()).collect();
        let mut moved = refs.clone();
        let n = moved.len();
        moved.rotate_left(rot % n);
        moved.reverse();
        let a = intra_group_similarity(&refs).unwrap();
        let b = intra_group_similarity(&moved).unwrap();
        prop_assert!((a - b).abs() < 1e-12);
        prop_assert!((0.0..=1.0).contains(&a));
    }

    #[test]
    fn f1_is_symmetric(a in prop::collection::vec(0usize..6, 1..8), b in prop::collection::vec(0usize..6, 1..8)) {
        prop_assert!((f1_score(&a, &b).unwrap() - f1_score(&b, &a).unwrap()).abs() < 1e-15);
    }
}

fn schema(algorithm: Algorithm, seed: u64) -> BTreeSet<String> {
    let cfg = TrainConfig {
        algorithm,
        seed,
        max_steps: Some(5),
        batch_size: 8,
        ..TrainConfig::default()
    };
    let mut keys = BTreeSet::new();
    train(&cfg, env(), |row| {
        let v = serde_json::to_value(row).unwrap();
        keys.extend(v.as_object().unwrap().keys().cloned());
        Ok(())
    })
    .unwrap();
    keys
}

#[test]
fn metrics_schema_depends_only_on_algorithm() {
    for algorithm in [Algorithm::Mhgpo, Algorithm::Mappo] {
        let a = schema(algorithm, 1);
        assert_eq!(a, schema(algorithm, 99));
        assert_eq!(a.contains("critic_loss"), algorithm == Algorithm::Mappo);
    }
}
