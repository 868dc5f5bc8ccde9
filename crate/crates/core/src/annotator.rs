//! Step labeling by exact match against ground-truth alternatives.
//!
//! A prefix is "+" at a step iff some ground truth is still consistent
//! with everything generated up to and including that step. The set of
//! consistent alternatives (the survivor set) only shrinks.

use std::collections::{BTreeMap, BTreeSet};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus_io::{Granularity, PrmRecord, PrmStep, Reward};
use crate::error::{PolicyError, StepError};
use crate::hashing::derive_seed;
use crate::masking::{mask_query, MaskMap};
use crate::policy::{complete_sampled, Policy, DEFAULT_STEP_CAP};
use crate::schema::{canonical_value, CallSequence, Query};
use crate::stepper::{segment_lenient, CharSpan, StateId, StepEvent, StepKind, StepperOptions};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StepLabel {
    pub event: StepEvent,
    pub reward: Reward,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Trajectory {
    pub query_id: String,
    pub response_text: String,
    pub steps: Vec<StepLabel>,
}

impl Trajectory {
    /// Label of the final TotalFinish step.
    pub fn verdict(&self) -> Reward {
        self.steps
            .iter()
            .rev()
            .find(|s| s.event.kind == StepKind::TotalFinish)
            .map_or(Reward::Neg, |s| s.reward)
    }

    pub fn to_record(&self, granularity: Granularity) -> PrmRecord {
        PrmRecord {
            query_id: self.query_id.clone(),
            response_text: self.response_text.clone(),
            granularity,
            steps: self
                .steps
                .iter()
                .filter(|s| granularity.keeps(s.event.kind))
                .map(|s| PrmStep {
                    kind: s.event.kind,
                    span: s.event.span,
                    label: s.reward,
                })
                .collect(),
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct AnnotateOptions {
    /// Match calls to ground-truth calls in any order.
    pub order_insensitive: bool,
    pub stepper: StepperOptions,
}

struct TruthCall {
    name: String,
    /// Parameter name to canonical value.
    args: BTreeMap<String, String>,
}

#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord)]
struct Survivor {
    truth: usize,
    /// Ground-truth calls already matched by completed calls.
    used: Vec<bool>,
    /// Ground-truth call matched by the open call.
    current: Option<usize>,
}

/// Incremental survivor-set labeler for one query.
pub struct SurvivorTracker {
    truths: Vec<Vec<TruthCall>>,
    order_insensitive: bool,
    survivors: BTreeSet<Survivor>,
}

impl SurvivorTracker {
    pub fn new(q: &Query, order_insensitive: bool) -> Self {
        let truths: Vec<Vec<TruthCall>> = q
            .ground_truths
            .iter()
            .map(|g| {
                g.calls
                    .iter()
                    .map(|c| TruthCall {
                        name: c.name.clone(),
                        args: c
                            .args
                            .iter()
                            .map(|a| (a.name.clone(), canonical_value(&a.value)))
                            .collect(),
                    })
                    .collect()
            })
            .collect();
        let survivors = truths
            .iter()
            .enumerate()
            .map(|(i, t)| Survivor {
                truth: i,
                used: vec![false; t.len()],
                current: None,
            })
            .collect();
        Self {
            truths,
            order_insensitive,
            survivors,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.survivors.is_empty()
    }

    /// Indices of ground truths still consistent with the prefix.
    pub fn surviving_truths(&self) -> BTreeSet<usize> {
        self.survivors.iter().map(|s| s.truth).collect()
    }

    fn truth_call(&self, s: &Survivor) -> Option<&TruthCall> {
        s.current.and_then(|c| self.truths[s.truth].get(c))
    }

    /// Labels `event` and narrows the survivor set. `partial` is any parse
    /// of the response that already contains the event's call.
    pub fn observe(&mut self, event: &StepEvent, partial: &CallSequence) -> Reward {
        let call = partial.calls.get(event.call_index);
        let old = std::mem::take(&mut self.survivors);
        let next: BTreeSet<Survivor> = match event.kind {
            StepKind::FuncName => {
                let Some(call) = call else { return Reward::Neg };
                let mut next = BTreeSet::new();
                for s in old {
                    let truth = &self.truths[s.truth];
                    for (c, tc) in truth.iter().enumerate() {
                        let eligible = if self.order_insensitive {
                            !s.used[c]
                        } else {
                            c == event.call_index
                        };
                        if eligible && tc.name == call.name {
                            next.insert(Survivor {
                                current: Some(c),
                                ..s.clone()
                            });
                        }
                    }
                }
                next
            }
            StepKind::ArgValue => {
                let arg = call.and_then(|c| c.args.get(event.arg_index.unwrap_or(usize::MAX)));
                let Some(arg) = arg else { return Reward::Neg };
                let value = canonical_value(&arg.value);
                old.into_iter()
                    .filter(|s| {
                        self.truth_call(s)
                            .is_some_and(|tc| tc.args.get(&arg.name) == Some(&value))
                    })
                    .collect()
            }
            StepKind::ParamFinish => {
                let produced = call.map_or(0, |c| c.args.len());
                old.into_iter()
                    .filter(|s| {
                        self.truth_call(s)
                            .is_some_and(|tc| tc.args.len() == produced)
                    })
                    .collect()
            }
            StepKind::FuncFinish => old
                .into_iter()
                .filter_map(|mut s| {
                    let c = s.current.take()?;
                    s.used[c] = true;
                    Some(s)
                })
                .collect(),
            StepKind::TotalFinish => old
                .into_iter()
                .filter(|s| s.current.is_none() && s.used.iter().all(|u| *u))
                .collect(),
        };
        self.survivors = next;
        Reward::from_bool(!self.survivors.is_empty())
    }
}

pub fn annotate(response_text: &str, q: &Query) -> Trajectory {
    annotate_with(response_text, q, AnnotateOptions::default())
}

/// Labels every step of `response_text`. Malformed or unterminated text
/// keeps the steps emitted before the problem and gains a synthetic "-"
/// TotalFinish covering the remainder; text after a closed list turns the
/// final verdict "-".
pub fn annotate_with(response_text: &str, q: &Query, opts: AnnotateOptions) -> Trajectory {
    let out = segment_lenient(response_text, opts.stepper);
    let mut tracker = SurvivorTracker::new(q, opts.order_insensitive);
    let mut steps: Vec<StepLabel> = out
        .events
        .iter()
        .map(|e| StepLabel {
            event: *e,
            reward: tracker.observe(e, &out.machine.partial),
        })
        .collect();

    if out.machine.is_terminated() {
        if matches!(out.error, Some(StepError::Terminated { .. })) {
            if let Some(last) = steps.last_mut() {
                last.reward = Reward::Neg;
            }
        }
    } else {
        let start = steps.last().map_or(0, |s| s.event.span.end);
        steps.push(StepLabel {
            event: StepEvent {
                kind: StepKind::TotalFinish,
                call_index: out.machine.call_index,
                arg_index: None,
                span: CharSpan::new(start, response_text.chars().count()),
                state_before: out.machine.state_id,
                state_after: StateId::S4Terminated,
            },
            reward: Reward::Neg,
        });
    }

    Trajectory {
        query_id: q.id.clone(),
        response_text: response_text.to_string(),
        steps,
    }
}

/// Label of the step that ends at the end of `prefix + step`. A trailing
/// number argument is completed as if the input ended there. Text that is
/// not a valid machine prefix, or a step that completes no event, is "-".
pub fn label_step(q: &Query, prefix: &str, step: &str, opts: AnnotateOptions) -> Reward {
    let mut full = String::with_capacity(prefix.len() + step.len());
    full.push_str(prefix);
    full.push_str(step);
    let prefix_len = prefix.chars().count();
    let mut out = segment_lenient(&full, opts.stepper);
    if out.error.is_some() {
        return Reward::Neg;
    }
    match out.machine.flush_end_of_input() {
        Ok(extra) => out.events.extend(extra),
        Err(_) => return Reward::Neg,
    }
    let mut tracker = SurvivorTracker::new(q, opts.order_insensitive);
    let mut label = None;
    for e in &out.events {
        let r = tracker.observe(e, &out.machine.partial);
        if e.span.end > prefix_len {
            label = Some(r);
        }
    }
    label.unwrap_or(Reward::Neg)
}

pub fn build_prm_dataset(trajectories: &[Trajectory], granularity: Granularity) -> Vec<PrmRecord> {
    trajectories
        .iter()
        .map(|t| t.to_record(granularity))
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RolloutConfig {
    pub seed: u64,
    pub variants_per_query: usize,
    pub samples_per_variant: usize,
    pub temperature: f64,
    /// Per-function masking probability.
    #[serde(default = "one")]
    pub mask_probability: f64,
    #[serde(default = "default_concurrency")]
    pub concurrency: usize,
}

fn one() -> f64 {
    1.0
}

fn default_concurrency() -> usize {
    4
}

impl Default for RolloutConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            variants_per_query: 1,
            samples_per_variant: 1,
            temperature: 0.8,
            mask_probability: 1.0,
            concurrency: default_concurrency(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Rollout {
    pub query_index: usize,
    pub variant: usize,
    pub sample: usize,
    /// Masked query; its id is `{id}#v{variant}`.
    pub masked: Query,
    pub map: MaskMap,
    pub response: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RolloutFailure {
    pub query_id: String,
    pub variant: usize,
    pub sample: usize,
    pub error: PolicyError,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct RolloutOutput {
    pub rollouts: Vec<Rollout>,
    pub failures: Vec<RolloutFailure>,
}

pub fn masked_query_id(id: &str, variant: usize) -> String {
    format!("{id}#v{variant}")
}

/// Masks every query `variants_per_query` times and samples
/// `samples_per_variant` responses for each masked variant. Output order is
/// (query, variant, sample) whatever the completion order.
pub fn rollout_collect(
    policy: &dyn Policy,
    queries: &[Query],
    cfg: &RolloutConfig,
) -> RolloutOutput {
    let mut jobs = Vec::new();
    let mut failures = Vec::new();
    for (qi, q) in queries.iter().enumerate() {
        for v in 0..cfg.variants_per_query {
            let mask_seed = derive_seed(cfg.seed, &q.id, v as u64);
            match mask_query(q, mask_seed, cfg.mask_probability) {
                Ok((mut masked, map)) => {
                    masked.id = masked_query_id(&q.id, v);
                    for s in 0..cfg.samples_per_variant {
                        jobs.push((qi, v, s, masked.clone(), map.clone()));
                    }
                }
                Err(e) => failures.push(RolloutFailure {
                    query_id: q.id.clone(),
                    variant: v,
                    sample: 0,
                    error: PolicyError::Backend(e.to_string()),
                }),
            }
        }
    }

    let run =
        |(qi, v, s, masked, map): (usize, usize, usize, Query, MaskMap)| match complete_sampled(
            policy,
            &masked,
            cfg.temperature,
            cfg.seed,
            s as u64,
            DEFAULT_STEP_CAP,
        ) {
            Ok(c) => Ok(Rollout {
                query_index: qi,
                variant: v,
                sample: s,
                masked,
                map,
                response: c.text,
            }),
            Err(error) => Err(RolloutFailure {
                query_id: queries[qi].id.clone(),
                variant: v,
                sample: s,
                error,
            }),
        };
    let results: Vec<Result<Rollout, RolloutFailure>> = match rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.concurrency.max(1))
        .build()
    {
        Ok(pool) => pool.install(|| jobs.into_par_iter().map(run).collect()),
        Err(_) => jobs.into_iter().map(run).collect(),
    };

    let mut out = RolloutOutput {
        rollouts: Vec::new(),
        failures,
    };
    for r in results {
        match r {
            Ok(r) => out.rollouts.push(r),
            Err(f) => out.failures.push(f),
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::schema::{FunctionCall, FunctionSpec, ParamKind, ParamSpec, ToolUniverse};
    use serde_json::json;

    fn query() -> Query {
        let universe = ToolUniverse::new(vec![
            FunctionSpec::new("f", "")
                .with_param(ParamSpec::new("a", ParamKind::Integer, true))
                .with_param(ParamSpec::new("b", ParamKind::String, false)),
            FunctionSpec::new("g", "").with_param(ParamSpec::new("x", ParamKind::Boolean, true)),
        ]);
        let t = |calls: Vec<FunctionCall>| CallSequence::new(calls);
        Query {
            id: "q".into(),
            text: "".into(),
            universe,
            ground_truths: vec![
                t(vec![FunctionCall::new("g").with_arg("x", json!(true))]),
                t(vec![FunctionCall::new("f")
                    .with_arg("a", json!(1))
                    .with_arg("b", json!("s"))]),
                t(vec![
                    FunctionCall::new("f").with_arg("a", json!(2)),
                    FunctionCall::new("g").with_arg("x", json!(false)),
                ]),
            ],
            category: None,
        }
    }

    fn labels(t: &Trajectory) -> String {
        t.steps
            .iter()
            .map(|s| {
                format!(
                    "{}{}",
                    s.event.kind.as_str().chars().next().unwrap(),
                    s.reward.as_str()
                )
            })
            .collect::<Vec<_>>()
            .join(" ")
    }

    #[test]
    fn matching_second_truth_is_all_positive() {
        let t = annotate(r#"[{"name":"f","arguments":{"b":"s","a":1}}]"#, &query());
        assert!(
            t.steps.iter().all(|s| s.reward == Reward::Pos),
            "{}",
            labels(&t)
        );
        assert_eq!(t.steps.len(), 6);
    }

    #[test]
    fn one_wrong_value() {
        let t = annotate(r#"[{"name":"f","arguments":{"a":1,"b":"t"}}]"#, &query());
        assert_eq!(labels(&t), "F+ A+ A- P- F- T-");
    }

    #[test]
    fn early_close_and_call_count() {
        // Correct args so far but the set closes early.
        let t = annotate(r#"[{"name":"f","arguments":{"a":1}}]"#, &query());
        assert_eq!(labels(&t), "F+ A+ P- F- T-");
        // Prefix of a two-call truth terminated too soon.
        let t = annotate(r#"[{"name":"f","arguments":{"a":2}}]"#, &query());
        assert_eq!(labels(&t), "F+ A+ P+ F+ T-");
    }

    #[test]
    fn irrelevance_empty_answer() {
        let mut q = query();
        q.ground_truths = vec![CallSequence::empty()];
        let t = annotate("[]", &q);
        assert_eq!(labels(&t), "T+");
        assert_eq!(
            labels(&annotate(r#"[{"name":"g","arguments":{"x":true}}]"#, &q)),
            "F- A- P- F- T-"
        );
    }

    #[test]
    fn malformed_gets_synthetic_negative_tail() {
        let text = r#"[{"name":"g","arguments":{"x":tru"#;
        let t = annotate(text, &query());
        assert_eq!(labels(&t), "F+ T-");
        let last = t.steps.last().unwrap().event;
        assert_eq!(last.span, CharSpan::new(13, text.chars().count()));
        assert!(t.to_record(Granularity::Fine).validate().is_ok());

        let t = annotate(r#"[{"name":"g","arguments":{"x":true}}] extra"#, &query());
        assert_eq!(labels(&t), "F+ A+ P+ F+ T-");
        assert_eq!(labels(&annotate("", &query())), "T-");
    }

    #[test]
    fn order_sensitivity_is_configurable() {
        let mut q = query();
        q.ground_truths = vec![CallSequence::new(vec![
            FunctionCall::new("f").with_arg("a", json!(2)),
            FunctionCall::new("g").with_arg("x", json!(false)),
        ])];
        let swapped = r#"[{"name":"g","arguments":{"x":false}},{"name":"f","arguments":{"a":2}}]"#;
        assert!(annotate(swapped, &q).verdict() == Reward::Neg);
        let opts = AnnotateOptions {
            order_insensitive: true,
            ..Default::default()
        };
        assert!(annotate_with(swapped, &q, opts)
            .steps
            .iter()
            .all(|s| s.reward.is_pos()));
    }

    #[test]
    fn granularity_filters() {
        let t = annotate(r#"[{"name":"g","arguments":{"x":true}}]"#, &query());
        let kinds = |g| {
            t.to_record(g)
                .steps
                .iter()
                .map(|s| s.kind)
                .collect::<Vec<_>>()
        };
        use StepKind::*;
        assert_eq!(kinds(Granularity::Orm), [TotalFinish]);
        assert_eq!(
            kinds(Granularity::Coarse),
            [FuncName, ParamFinish, FuncFinish, TotalFinish]
        );
        assert_eq!(
            kinds(Granularity::Fine),
            [FuncName, ArgValue, ParamFinish, FuncFinish, TotalFinish]
        );
    }

    #[test]
    fn label_step_agrees_with_annotation() {
        let q = query();
        let text = r#"[{"name":"f","arguments":{"a":2}},{"name":"g","arguments":{"x":true}}]"#;
        let t = annotate(text, &q);
        for s in &t.steps {
            let prefix: String = text.chars().take(s.event.span.start).collect();
            let step = s.event.span.slice(text);
            assert_eq!(
                label_step(&q, &prefix, step, AnnotateOptions::default()),
                s.reward,
                "{step}"
            );
        }
        assert_eq!(
            label_step(&q, "[", "oops", AnnotateOptions::default()),
            Reward::Neg
        );
    }
}
