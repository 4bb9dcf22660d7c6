//! Evaluation, per-step metrics rows, the intra-group similarity diagnostic
//! and run comparison tables.

use std::fmt::Write as _;
use std::io::{BufRead, Write};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::env::{EnvState, SearchEnv};
use crate::error::{Error, Result};
use crate::policy::{greedy_sequence, PolicyParams};
use crate::reward::{accuracy, exact_match, f1_score};
use crate::trainer::StepStats;
use crate::types::{AgentId, QuestionId, Token};

/// Mean F1 over all unordered pairs of outputs.
pub fn intra_group_similarity(outputs: &[&[Token]]) -> Result<f64> {
    if outputs.len() < 2 {
        return Err(Error::Empty("similarity group needs two members"));
    }
    let mut sum = 0.0;
    let mut pairs = 0usize;
    for i in 0..outputs.len() {
        for j in i + 1..outputs.len() {
            sum += pair_f1(outputs[i], outputs[j]);
            pairs += 1;
        }
    }
    Ok(sum / pairs as f64)
}

// Symmetric F1 that treats two empty outputs as identical.
fn pair_f1(a: &[Token], b: &[Token]) -> f64 {
    match (a.is_empty(), b.is_empty()) {
        (true, true) => 1.0,
        (_, true) => 0.0,
        _ => f1_score(b, a).unwrap_or(0.0),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub f1: f64,
    pub em: f64,
    pub accuracy: f64,
    pub questions: usize,
}

/// Score a deterministic decoder over `ids`. Questions run in parallel and
/// are summed in id order.
pub fn evaluate_with<F>(env: &SearchEnv, ids: &[QuestionId], decode: F) -> Result<EvalSummary>
where
    F: Fn(AgentId, &[f64], &EnvState) -> Result<Vec<Token>> + Sync,
{
    if ids.is_empty() {
        return Err(Error::Empty("evaluation set"));
    }
    let scores = ids
        .par_iter()
        .map(|&q| {
            let answer = env.run_episode(q, &decode)?;
            let gold = &env.question(q).gold;
            Ok([
                f1_score(&answer, gold)?,
                exact_match(&answer, gold)?,
                accuracy(&answer, gold)?,
            ])
        })
        .collect::<Result<Vec<_>>>()?;
    let mut total = [0.0; 3];
    for s in &scores {
        for (t, x) in total.iter_mut().zip(s) {
            *t += x;
        }
    }
    let n = ids.len() as f64;
    Ok(EvalSummary {
        f1: total[0] / n,
        em: total[1] / n,
        accuracy: total[2] / n,
        questions: ids.len(),
    })
}

/// Greedy decoding of every agent with the shared policy.
pub fn evaluate_policy(
    env: &SearchEnv,
    params: &PolicyParams,
    ids: &[QuestionId],
) -> Result<EvalSummary> {
    if params.layout() != env.layout() || params.n_roles() != env.topology().n() {
        return Err(Error::Shape(format!(
            "policy layout {:?} with {} roles does not fit environment layout {:?} with {} agents",
            params.layout(),
            params.n_roles(),
            env.layout(),
            env.topology().n()
        )));
    }
    let stop = env.stop_token();
    evaluate_with(env, ids, |agent, ctx, _| {
        let max_len = env.topology().role(agent).map_or(1, |r| r.max_len);
        greedy_sequence(params, agent, ctx, max_len, stop)
    })
}

pub fn evaluate_oracle(env: &SearchEnv, ids: &[QuestionId]) -> Result<EvalSummary> {
    evaluate_with(env, ids, |agent, _, state| {
        Ok(env.oracle_output(agent, state))
    })
}

/// One line of the metrics stream.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub step: usize,
    pub epoch: usize,
    #[serde(flatten)]
    pub stats: StepStats,
    /// Held-out evaluation, present on validation steps only.
    pub eval: Option<EvalSummary>,
}

pub fn write_row<W: Write>(out: &mut W, row: &MetricsRow) -> Result<()> {
    serde_json::to_writer(&mut *out, row)?;
    out.write_all(b"\n")?;
    Ok(())
}

pub fn read_rows<R: BufRead>(input: R) -> Result<Vec<MetricsRow>> {
    input
        .lines()
        .filter(|l| l.as_ref().map_or(true, |l| !l.trim().is_empty()))
        .map(|l| Ok(serde_json::from_str(&l?)?))
        .collect()
}

/// First step whose evaluation F1 reaches `threshold`.
pub fn steps_to_threshold(rows: &[MetricsRow], threshold: f64) -> Option<usize> {
    rows.iter()
        .find(|r| r.eval.is_some_and(|e| e.f1 >= threshold))
        .map(|r| r.step)
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunSeries {
    pub label: String,
    pub rows: Vec<MetricsRow>,
}

const MISSING: &str = "-";

/// Side-by-side per-step reward and evaluation F1, then steps-to-threshold.
pub fn compare_table(runs: &[RunSeries], threshold: f64) -> String {
    let width = runs
        .iter()
        .map(|r| r.label.len() + 7)
        .chain([10])
        .max()
        .unwrap_or(10);
    let mut out = String::new();
    let _ = write!(out, "{:>6}", "step");
    for r in runs {
        let _ = write!(
            out,
            " {:>width$} {:>width$}",
            format!("{}:reward", r.label),
            format!("{}:f1", r.label)
        );
    }
    out.push('\n');
    let steps = runs.iter().map(|r| r.rows.len()).max().unwrap_or(0);
    for i in 0..steps {
        let _ = write!(out, "{:>6}", i + 1);
        for r in runs {
            let (reward, f1) = match r.rows.get(i) {
                Some(row) => (
                    format!("{:.4}", row.stats.mean_final_reward),
                    row.eval
                        .map_or(MISSING.to_string(), |e| format!("{:.4}", e.f1)),
                ),
                None => (MISSING.to_string(), MISSING.to_string()),
            };
            let _ = write!(out, " {reward:>width$} {f1:>width$}");
        }
        out.push('\n');
    }
    let _ = writeln!(out, "\nsteps to eval F1 >= {threshold}:");
    for r in runs {
        let reached = steps_to_threshold(&r.rows, threshold)
            .map_or_else(|| "not reached".to_string(), |s| s.to_string());
        let _ = writeln!(out, "  {}: {reached}", r.label);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::{EnvConfig, SynthDataset};
    use crate::types::MasTopology;

    #[test]
    fn similarity_examples() {
        let a: &[Token] = &[1, 2];
        let c: &[Token] = &[3, 4];
        assert_eq!(intra_group_similarity(&[a, a, a]).unwrap(), 1.0);
        assert_eq!(intra_group_similarity(&[a, c]).unwrap(), 0.0);
        assert!((intra_group_similarity(&[a, a, c]).unwrap() - 1.0 / 3.0).abs() < 1e-15);
        assert!((intra_group_similarity(&[c, a, a]).unwrap() - 1.0 / 3.0).abs() < 1e-15);
        assert!(intra_group_similarity(&[a]).is_err());
        assert_eq!(intra_group_similarity(&[&[], &[]]).unwrap(), 1.0);
    }

    fn env() -> SearchEnv {
        SearchEnv::new(
            SynthDataset::generate(EnvConfig::default(), 4).unwrap(),
            MasTopology::search_chain(6, 4, 10),
        )
        .unwrap()
    }

    #[test]
    fn oracle_is_perfect_and_untrained_is_not() {
        let env = env();
        let ids = env.data.eval_ids();
        let oracle = evaluate_oracle(&env, &ids).unwrap();
        assert_eq!((oracle.f1, oracle.em, oracle.accuracy), (1.0, 1.0, 1.0));
        let untrained = evaluate_policy(&env, &PolicyParams::zeros(env.layout(), 3), &ids).unwrap();
        assert!(untrained.f1 < 1.0 && untrained.em < 1.0 && untrained.accuracy < 1.0);
        assert!(evaluate_oracle(&env, &[]).is_err());
    }

    #[test]
    fn layout_mismatch_is_rejected() {
        let env = env();
        let mut layout = env.layout();
        layout.vocab_size += 1;
        let params = PolicyParams::zeros(layout, 3);
        assert!(evaluate_policy(&env, &params, &env.data.eval_ids()).is_err());
    }

    fn row(step: usize, f1: Option<f64>) -> MetricsRow {
        MetricsRow {
            step,
            epoch: 1,
            stats: StepStats {
                mean_final_reward: 0.1 * step as f64,
                mean_total_reward: 0.0,
                mean_shared_reward: 0.0,
                agent_penalty: vec![0.0; 3],
                agent_similarity: vec![None; 3],
                objective: 0.0,
                kl: 0.0,
                max_ratio_deviation: 0.0,
                clip_fraction: 0.0,
                groups: 0,
                excluded_groups: 0,
                pairs: 0,
                policy_calls: 0,
                critic_loss: None,
            },
            eval: f1.map(|f1| EvalSummary {
                f1,
                em: 0.0,
                accuracy: 0.0,
                questions: 1,
            }),
        }
    }

    #[test]
    fn rows_round_trip_through_jsonl() {
        let rows = vec![row(1, None), row(2, Some(0.5))];
        let mut buf = Vec::new();
        for r in &rows {
            write_row(&mut buf, r).unwrap();
        }
        let text = String::from_utf8(buf.clone()).unwrap();
        assert_eq!(text.lines().count(), 2);
        assert!(!text.contains("critic_loss"));
        assert_eq!(read_rows(buf.as_slice()).unwrap(), rows);
    }

    #[test]
    fn compare_pads_and_reports_thresholds() {
        let a = RunSeries {
            label: "fof".into(),
            rows: vec![row(1, None), row(2, Some(0.6))],
        };
        let b = RunSeries {
            label: "is".into(),
            rows: vec![row(1, Some(0.1))],
        };
        let t = compare_table(&[a.clone(), b], 0.5);
        assert!(t.contains("fof:reward") && t.contains("is:f1"));
        assert!(t.contains("fof: 2"));
        assert!(t.contains("is: not reached"));
        let same = compare_table(
            &[
                a.clone(),
                RunSeries {
                    label: "fof2".into(),
                    ..a
                },
            ],
            0.9,
        );
        let lines: Vec<&str> = same.lines().collect();
        let cols: Vec<&str> = lines[2].split_whitespace().collect();
        assert_eq!(cols[1..3], cols[3..5]);
        assert!(same.contains("fof: not reached"));
    }
}
