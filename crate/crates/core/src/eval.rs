//! Metrics: exact-match accuracy by category, tool/argument F1, reward
//! model loss and accuracies, and the exploration/retention sweep.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus_io::{PrmRecord, Reward};
use crate::error::EvalError;
use crate::hashing::derive_seed;
use crate::policy::Policy;
use crate::schema::{canonical_value, matches_ground_truth, CallSequence, Category, Query};
use crate::scorer::{NoisyOracleScorer, OracleScorer, ScoreRequest, StepScorer};
use crate::search::{budget_of, run_search, SearchConfig, Strategy};
use crate::sim::{synth_query, SynthConfig};
use crate::stepper::{byte_offset, StepKind};

pub const UNTAGGED: &str = "untagged";

/// Predictions keyed by query id; `None` marks a response that did not
/// parse.
pub type Predictions = BTreeMap<String, Option<CallSequence>>;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CategoryScore {
    pub n: usize,
    pub correct: usize,
    pub accuracy: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub per_category: BTreeMap<String, CategoryScore>,
    /// Unweighted mean over the categories present.
    pub avg_accuracy: f64,
    pub f1_api: f64,
    pub f1_args: f64,
    /// Queries without a prediction (counted as incorrect).
    pub missing: Vec<String>,
}

fn category_key(q: &Query) -> &'static str {
    q.category.map_or(UNTAGGED, |c| c.as_str())
}

fn order_insensitive(q: &Query) -> bool {
    q.category.is_some_and(|c: Category| c.order_insensitive())
}

/// Exact-match accuracy per category: parallel categories match calls in
/// any order, the others in order.
pub fn ast_accuracy(predictions: &Predictions, queries: &[Query]) -> EvalReport {
    let mut per_category: BTreeMap<String, CategoryScore> = BTreeMap::new();
    let mut missing = Vec::new();
    for q in queries {
        let entry = per_category.entry(category_key(q).to_string()).or_default();
        entry.n += 1;
        match predictions.get(&q.id) {
            None => missing.push(q.id.clone()),
            Some(None) => {}
            Some(Some(pred)) => {
                if matches_ground_truth(pred, q, order_insensitive(q)) {
                    entry.correct += 1;
                }
            }
        }
    }
    for s in per_category.values_mut() {
        s.accuracy = s.correct as f64 / s.n as f64;
    }
    let avg_accuracy = if per_category.is_empty() {
        0.0
    } else {
        per_category.values().map(|s| s.accuracy).sum::<f64>() / per_category.len() as f64
    };
    missing.sort();
    EvalReport {
        per_category,
        avg_accuracy,
        missing,
        ..EvalReport::default()
    }
}

/// Size of the multiset intersection.
fn overlap(pred: &[String], truth: &[String]) -> usize {
    let mut counts: HashMap<&str, isize> = HashMap::new();
    for t in truth {
        *counts.entry(t).or_default() += 1;
    }
    let mut tp = 0;
    for p in pred {
        if let Some(c) = counts.get_mut(p.as_str()) {
            if *c > 0 {
                *c -= 1;
                tp += 1;
            }
        }
    }
    tp
}

fn f1(tp: usize, pred: usize, truth: usize) -> f64 {
    if pred + truth == 0 {
        1.0
    } else {
        2.0 * tp as f64 / (pred + truth) as f64
    }
}

fn api_items(seq: &CallSequence) -> Vec<String> {
    seq.calls.iter().map(|c| c.name.clone()).collect()
}

fn arg_items(seq: &CallSequence) -> Vec<String> {
    seq.calls
        .iter()
        .flat_map(|c| {
            c.args.iter().map(move |a| {
                format!(
                    "{}\u{1f}{}\u{1f}{}",
                    c.name,
                    a.name,
                    canonical_value(&a.value)
                )
            })
        })
        .collect()
}

#[derive(Clone, Copy, Default)]
struct Counts {
    tp: usize,
    pred: usize,
    truth: usize,
}

/// Counts against whichever alternative gives this query its best F1.
fn best_counts(pred: &[String], truths: &[Vec<String>]) -> Counts {
    truths
        .iter()
        .map(|t| Counts {
            tp: overlap(pred, t),
            pred: pred.len(),
            truth: t.len(),
        })
        .max_by(|a, b| {
            f1(a.tp, a.pred, a.truth)
                .total_cmp(&f1(b.tp, b.pred, b.truth))
                .then(b.truth.cmp(&a.truth))
        })
        .unwrap_or(Counts {
            tp: 0,
            pred: pred.len(),
            truth: 0,
        })
}

/// Micro-averaged F1 over function names and over (function, parameter,
/// value) triples. Missing or unparseable predictions count as empty.
pub fn tool_f1(predictions: &Predictions, queries: &[Query]) -> (f64, f64) {
    let mut api = Counts::default();
    let mut args = Counts::default();
    for q in queries {
        let pred = predictions
            .get(&q.id)
            .cloned()
            .flatten()
            .unwrap_or_default();
        let a = best_counts(
            &api_items(&pred),
            &q.ground_truths.iter().map(api_items).collect::<Vec<_>>(),
        );
        let b = best_counts(
            &arg_items(&pred),
            &q.ground_truths.iter().map(arg_items).collect::<Vec<_>>(),
        );
        for (acc, c) in [(&mut api, a), (&mut args, b)] {
            acc.tp += c.tp;
            acc.pred += c.pred;
            acc.truth += c.truth;
        }
    }
    (
        f1(api.tp, api.pred, api.truth),
        f1(args.tp, args.pred, args.truth),
    )
}

pub fn evaluate(predictions: &Predictions, queries: &[Query]) -> EvalReport {
    let mut report = ast_accuracy(predictions, queries);
    let (f1_api, f1_args) = tool_f1(predictions, queries);
    report.f1_api = f1_api;
    report.f1_args = f1_args;
    report
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RmReport {
    /// Mean negative log-likelihood of the labels.
    pub loss: f64,
    pub step_acc: f64,
    pub traj_acc: f64,
    pub steps: usize,
    pub trajectories: usize,
}

pub const PROB_CLAMP: f64 = 1e-9;

// (probability, label, kind) of one scored step.
type StepOutcome = (f64, bool, StepKind);

/// Scores every labeled step. A step is predicted "+" when its probability
/// reaches `threshold`; a trajectory is judged by its final TotalFinish
/// step only.
pub fn rm_metrics(
    scorer: &dyn StepScorer,
    dataset: &[PrmRecord],
    queries: &HashMap<String, Query>,
    threshold: f64,
) -> Result<RmReport, EvalError> {
    let per_record: Vec<Result<Vec<StepOutcome>, EvalError>> = dataset
        .par_iter()
        .map(|r| {
            let q = queries
                .get(&r.query_id)
                .ok_or_else(|| EvalError::UnknownQuery(r.query_id.clone()))?;
            r.steps
                .iter()
                .enumerate()
                .map(|(i, s)| {
                    let start = byte_offset(&r.response_text, s.span.start);
                    let end = byte_offset(&r.response_text, s.span.end);
                    let score = scorer
                        .score(&ScoreRequest {
                            query: q,
                            prefix: &r.response_text[..start],
                            step: &r.response_text[start..end],
                            kind: s.kind,
                        })
                        .map_err(|source| EvalError::Scorer {
                            query_id: r.query_id.clone(),
                            step: i,
                            source,
                        })?;
                    let p = score.prob.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
                    let nll = if s.label == Reward::Pos {
                        -p.ln()
                    } else {
                        -(1.0 - p).ln()
                    };
                    let hit = (score.prob >= threshold) == (s.label == Reward::Pos);
                    Ok((nll, hit, s.kind))
                })
                .collect()
        })
        .collect();

    let mut report = RmReport::default();
    let mut hits = 0usize;
    let mut traj_hits = 0usize;
    for rec in per_record {
        let rec = rec?;
        for &(nll, hit, _) in &rec {
            report.steps += 1;
            // Running mean: identical terms give exactly that term.
            report.loss += (nll - report.loss) / report.steps as f64;
            hits += hit as usize;
        }
        if let Some(&(_, hit, _)) = rec
            .iter()
            .rev()
            .find(|(_, _, k)| *k == StepKind::TotalFinish)
        {
            report.trajectories += 1;
            traj_hits += hit as usize;
        }
    }
    report.step_acc = if report.steps == 0 {
        0.0
    } else {
        hits as f64 / report.steps as f64
    };
    report.traj_acc = if report.trajectories == 0 {
        0.0
    } else {
        traj_hits as f64 / report.trajectories as f64
    };
    Ok(report)
}

/// 95% Wilson score interval.
pub fn wilson_interval(successes: usize, n: usize) -> (f64, f64) {
    if n == 0 {
        return (0.0, 1.0);
    }
    const Z: f64 = 1.959_963_984_540_054;
    let n_f = n as f64;
    let p = successes as f64 / n_f;
    let z2 = Z * Z;
    let denom = 1.0 + z2 / n_f;
    let center = (p + z2 / (2.0 * n_f)) / denom;
    let half = Z * (p * (1.0 - p) / n_f + z2 / (4.0 * n_f * n_f)).sqrt() / denom;
    ((center - half).max(0.0), (center + half).min(1.0))
}

/// Step scorer used by simulations.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SimScorerConfig {
    Oracle,
    NoisyOracle { accuracy: f64, seed: u64 },
}

impl SimScorerConfig {
    pub fn build(&self) -> Box<dyn StepScorer> {
        match *self {
            SimScorerConfig::Oracle => Box::new(OracleScorer::default()),
            SimScorerConfig::NoisyOracle { accuracy, seed } => {
                Box::new(NoisyOracleScorer::new(accuracy, seed))
            }
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EpisodeStats {
    pub episodes: usize,
    pub successes: usize,
    pub budget_total: usize,
    pub scorer_calls: usize,
}

impl EpisodeStats {
    pub fn success_rate(&self) -> f64 {
        if self.episodes == 0 {
            0.0
        } else {
            self.successes as f64 / self.episodes as f64
        }
    }

    pub fn mean_budget(&self) -> f64 {
        if self.episodes == 0 {
            0.0
        } else {
            self.budget_total as f64 / self.episodes as f64
        }
    }
}

/// Runs `cfg` on `episodes` synthetic queries. Episode `i` uses query `i`
/// of the `synth` stream and search seed `derive_seed(cfg.seed, i)`.
pub fn run_episodes(
    policy: &dyn Policy,
    scorer: &dyn StepScorer,
    cfg: &SearchConfig,
    synth: &SynthConfig,
    episodes: usize,
) -> Result<EpisodeStats, EvalError> {
    let results: Vec<Result<(bool, usize, usize), EvalError>> = (0..episodes as u64)
        .into_par_iter()
        .map(|i| {
            let q = synth_query(synth, i);
            let ep_cfg = SearchConfig {
                seed: derive_seed(cfg.seed, "episode", i),
                ..cfg.clone()
            };
            let out = run_search(&q, policy, scorer, &ep_cfg)
                .map_err(|f| EvalError::Search(f.to_string()))?;
            let ok = out
                .prediction
                .as_ref()
                .is_some_and(|p| matches_ground_truth(p, &q, order_insensitive(&q)));
            Ok((ok, budget_of(&ep_cfg, &out.trace), out.trace.scorer_calls))
        })
        .collect();
    let mut stats = EpisodeStats::default();
    for r in results {
        let (ok, budget, calls) = r?;
        stats.episodes += 1;
        stats.successes += ok as usize;
        stats.budget_total += budget;
        stats.scorer_calls += calls;
    }
    Ok(stats)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub strategy: String,
    #[serde(rename = "M")]
    pub m: usize,
    #[serde(rename = "N")]
    pub n: usize,
    /// Mean generation budget per episode.
    pub budget: f64,
    pub success: f64,
    pub ci_low: f64,
    pub ci_high: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SweepSpec {
    pub m_list: Vec<usize>,
    pub n_list: Vec<usize>,
    /// N held fixed while M varies.
    pub fixed_n: usize,
    /// M held fixed while N varies.
    pub fixed_m: usize,
    pub episodes: usize,
}

impl Default for SweepSpec {
    fn default() -> Self {
        Self {
            m_list: vec![1, 2, 4, 8, 16],
            n_list: vec![1, 2, 4, 8, 16],
            fixed_n: 4,
            fixed_m: 4,
            episodes: 1000,
        }
    }
}

/// Two fine-beam sweeps: M over `m_list` at N = `fixed_n`, then N over
/// `n_list` at M = `fixed_m`. `base` supplies seed, temperature and
/// aggregation.
pub fn sweep_explore_retain(
    policy: &dyn Policy,
    scorer: &dyn StepScorer,
    synth: &SynthConfig,
    base: &SearchConfig,
    spec: &SweepSpec,
) -> Result<Vec<SweepRow>, EvalError> {
    let mut rows = Vec::new();
    let points = spec
        .m_list
        .iter()
        .map(|&m| ("fine_beam:vary_m", m, spec.fixed_n))
        .chain(
            spec.n_list
                .iter()
                .map(|&n| ("fine_beam:vary_n", spec.fixed_m, n)),
        );
    for (label, m, n) in points {
        let cfg = SearchConfig {
            strategy: Strategy::FineBeam,
            m,
            n,
            ..base.clone()
        };
        let stats = run_episodes(policy, scorer, &cfg, synth, spec.episodes)?;
        let (ci_low, ci_high) = wilson_interval(stats.successes, stats.episodes);
        rows.push(SweepRow {
            strategy: label.to_string(),
            m,
            n,
            budget: stats.mean_budget(),
            success: stats.success_rate(),
            ci_low,
            ci_high,
        });
    }
    Ok(rows)
}

fn csv_err(e: csv::Error) -> EvalError {
    EvalError::Csv(e.to_string())
}

/// Columns: strategy, M, N, budget, success, ci_low, ci_high.
pub fn write_sweep_csv(path: &Path, rows: &[SweepRow]) -> Result<(), EvalError> {
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    for r in rows {
        w.serialize(r).map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_sweep_csv(path: &Path) -> Result<Vec<SweepRow>, EvalError> {
    let mut r = csv::Reader::from_path(path).map_err(csv_err)?;
    r.deserialize().map(|row| row.map_err(csv_err)).collect()
}

/// Rows `metric,value,n`: one per category, then avg, f1_api, f1_args.
pub fn write_eval_csv(path: &Path, report: &EvalReport) -> Result<(), EvalError> {
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    w.write_record(["metric", "value", "n"]).map_err(csv_err)?;
    let total: usize = report.per_category.values().map(|s| s.n).sum();
    for (cat, s) in &report.per_category {
        w.write_record([
            format!("accuracy:{cat}"),
            format!("{:.6}", s.accuracy),
            s.n.to_string(),
        ])
        .map_err(csv_err)?;
    }
    for (name, v) in [
        ("avg", report.avg_accuracy),
        ("f1_api", report.f1_api),
        ("f1_args", report.f1_args),
    ] {
        w.write_record([name.to_string(), format!("{v:.6}"), total.to_string()])
            .map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_rm_csv(path: &Path, report: &RmReport) -> Result<(), EvalError> {
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    w.serialize(report).map_err(csv_err)?;
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::schema::FunctionCall;
    use serde_json::json;

    #[test]
    fn wilson_brackets_the_estimate() {
        let (lo, hi) = wilson_interval(50, 100);
        assert!(lo < 0.5 && hi > 0.5);
        assert!((lo - 0.4038).abs() < 1e-3 && (hi - 0.5962).abs() < 1e-3);
        assert_eq!(wilson_interval(0, 0), (0.0, 1.0));
        let (lo, hi) = wilson_interval(0, 10);
        assert_eq!(lo, 0.0);
        assert!(hi > 0.0);
    }

    #[test]
    fn f1_half_recall() {
        let q = Query {
            id: "a".into(),
            text: String::new(),
            universe: Default::default(),
            ground_truths: vec![CallSequence::new(vec![
                FunctionCall::new("f").with_arg("x", json!(1)),
                FunctionCall::new("g"),
            ])],
            category: None,
        };
        let mut preds = Predictions::new();
        preds.insert(
            "a".into(),
            Some(CallSequence::new(vec![
                FunctionCall::new("f").with_arg("x", json!(1))
            ])),
        );
        let (api, args) = tool_f1(&preds, &[q]);
        assert!((api - 2.0 / 3.0).abs() < 1e-12);
        assert_eq!(args, 1.0);
    }
}
