//! Synthetic queries with a fixed number of decision steps, for
//! simulation experiments.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::hashing::StableHash;
use crate::schema::{
    CallSequence, Category, FunctionCall, FunctionSpec, ParamKind, ParamSpec, Query, ToolUniverse,
};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    /// FuncName plus ArgValue steps in the ground truth.
    pub decision_steps: usize,
    /// Functions in each universe (at least the ones the truth calls).
    pub functions: usize,
    pub max_calls: usize,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            decision_steps: 5,
            functions: 6,
            max_calls: 2,
            seed: 0,
        }
    }
}

const VERBS: &[&str] = &[
    "get", "find", "list", "create", "update", "search", "compute", "fetch",
];
const NOUNS: &[&str] = &[
    "weather", "flights", "hotel", "stock", "recipe", "route", "invoice", "movie", "user", "order",
    "news", "rate",
];
const WORDS: &[&str] = &[
    "paris", "oslo", "lima", "blue", "fast", "alpha", "delta", "north", "spring", "river", "cedar",
    "amber",
];

fn pick<'a>(rng: &mut ChaCha8Rng, items: &[&'a str]) -> &'a str {
    items[rng.random_range(0..items.len())]
}

fn random_kind(rng: &mut ChaCha8Rng) -> ParamKind {
    match rng.random_range(0..6) {
        0 => ParamKind::Integer,
        1 => ParamKind::Number,
        2 => ParamKind::Boolean,
        3 => ParamKind::Enum(vec!["low".into(), "medium".into(), "high".into()]),
        4 => ParamKind::Array,
        _ => ParamKind::String,
    }
}

fn random_value(kind: &ParamKind, rng: &mut ChaCha8Rng) -> Value {
    match kind {
        ParamKind::Integer => json!(rng.random_range(1..500)),
        ParamKind::Number => json!(rng.random_range(1..400) as f64 / 4.0 + 0.25),
        ParamKind::Boolean => json!(rng.random::<bool>()),
        ParamKind::Enum(options) => json!(options[rng.random_range(0..options.len())]),
        ParamKind::Array => json!([pick(rng, WORDS), pick(rng, WORDS)]),
        _ => json!(format!("{}_{}", pick(rng, WORDS), rng.random_range(0..100))),
    }
}

fn random_function(
    rng: &mut ChaCha8Rng,
    index: usize,
    params: usize,
    used: &mut Vec<String>,
) -> FunctionSpec {
    let name = loop {
        let n = format!("{}_{}_{}", pick(rng, VERBS), pick(rng, NOUNS), index);
        if !used.contains(&n) {
            used.push(n.clone());
            break n;
        }
    };
    let mut f = FunctionSpec::new(
        name.clone(),
        format!("Tool {index}: {}", name.replace('_', " ")),
    );
    for p in 0..params {
        let kind = random_kind(rng);
        f = f.with_param(
            ParamSpec::new(format!("p{p}_{}", pick(rng, NOUNS)), kind, true)
                .with_description(format!("parameter {p}")),
        );
    }
    f
}

/// The `index`-th query of the stream defined by `cfg`.
pub fn synth_query(cfg: &SynthConfig, index: u64) -> Query {
    let mut rng = StableHash::new("synth").u64(cfg.seed).u64(index).rng();
    let t = cfg.decision_steps.max(1);
    let calls = rng.random_range(1..=cfg.max_calls.clamp(1, t));
    // Spread the remaining decision steps over the calls as arguments.
    let mut arg_counts = vec![0usize; calls];
    for _ in 0..(t - calls) {
        let i = rng.random_range(0..calls);
        arg_counts[i] += 1;
    }

    let mut used = Vec::new();
    let mut functions = Vec::new();
    let mut truth = Vec::new();
    for (i, &args) in arg_counts.iter().enumerate() {
        let f = random_function(&mut rng, i, args, &mut used);
        let mut call = FunctionCall::new(f.name.clone());
        for p in &f.params {
            call = call.with_arg(p.name.clone(), random_value(&p.kind, &mut rng));
        }
        truth.push(call);
        functions.push(f);
    }
    for i in calls..cfg.functions.max(calls) {
        let params = rng.random_range(0..4);
        functions.push(random_function(&mut rng, i, params, &mut used));
    }
    // Shuffle so the answer is not always listed first.
    for i in (1..functions.len()).rev() {
        let j = rng.random_range(0..=i);
        functions.swap(i, j);
    }

    Query {
        id: format!("synth-{}-{index}", cfg.seed),
        text: format!("Synthetic request {index} needing {calls} call(s)"),
        universe: ToolUniverse::new(functions),
        ground_truths: vec![CallSequence::new(truth)],
        category: Some(if calls == 1 {
            Category::Simple
        } else {
            Category::Multiple
        }),
    }
}

pub fn synth_queries(cfg: &SynthConfig, count: usize) -> Vec<Query> {
    (0..count as u64).map(|i| synth_query(cfg, i)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn decision_steps_and_validity() {
        for t in 1..8 {
            let cfg = SynthConfig {
                decision_steps: t,
                ..Default::default()
            };
            for i in 0..50 {
                let q = synth_query(&cfg, i);
                assert!(q.validate().is_ok());
                let g = &q.ground_truths[0];
                assert_eq!(
                    g.calls.len() + g.calls.iter().map(|c| c.args.len()).sum::<usize>(),
                    t
                );
                assert_eq!(q, synth_query(&cfg, i));
            }
        }
    }
}
