//! Inference-time search over step continuations: step-level beam search
//! guided by a step scorer, plus best-of-N, majority voting, greedy
//! sampling and a likelihood-guided stand-in for token-level beam search.

use std::collections::HashMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{PolicyError, SearchError};
use crate::policy::{complete_from, complete_sampled, GenRequest, Policy, DEFAULT_MAX_CHARS};
use crate::schema::{canonicalize, CallSequence, Query};
use crate::scorer::{LikelihoodScorer, ScoreRequest, StepScorer};
use crate::stepper::{
    byte_offset, parse_response, segment_lenient, CharSpan, MachineState, StepKind, StepperOptions,
};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    #[default]
    FineBeam,
    BestOfN,
    Majority,
    Greedy,
    TokenBeam,
}

impl Strategy {
    pub fn as_str(self) -> &'static str {
        match self {
            Strategy::FineBeam => "fine_beam",
            Strategy::BestOfN => "best_of_n",
            Strategy::Majority => "majority",
            Strategy::Greedy => "greedy",
            Strategy::TokenBeam => "token_beam",
        }
    }
}

impl std::str::FromStr for Strategy {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        [
            Strategy::FineBeam,
            Strategy::BestOfN,
            Strategy::Majority,
            Strategy::Greedy,
            Strategy::TokenBeam,
        ]
        .into_iter()
        .find(|k| k.as_str() == s)
        .ok_or_else(|| format!("unknown strategy `{s}`"))
    }
}

/// How per-step probabilities combine into a candidate score.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Aggregation {
    #[default]
    Product,
    Min,
    Mean,
    Last,
}

impl std::str::FromStr for Aggregation {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "product" => Ok(Aggregation::Product),
            "min" => Ok(Aggregation::Min),
            "mean" => Ok(Aggregation::Mean),
            "last" => Ok(Aggregation::Last),
            _ => Err(format!("unknown aggregation `{s}`")),
        }
    }
}

pub fn aggregate(scores: &[f64], how: Aggregation) -> f64 {
    if scores.is_empty() {
        return 1.0;
    }
    match how {
        Aggregation::Product => scores.iter().product(),
        Aggregation::Min => scores.iter().copied().fold(f64::INFINITY, f64::min),
        Aggregation::Mean => scores.iter().sum::<f64>() / scores.len() as f64,
        Aggregation::Last => scores[scores.len() - 1],
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SearchConfig {
    pub strategy: Strategy,
    /// Continuations sampled per retained candidate per round.
    #[serde(rename = "M")]
    pub m: usize,
    /// Candidates retained after each round.
    #[serde(rename = "N")]
    pub n: usize,
    /// Samples for best-of-N and majority voting.
    pub n_samples: usize,
    pub temperature: f64,
    pub seed: u64,
    pub aggregation: Aggregation,
    /// Round (or per-sample step) cap.
    pub step_cap: usize,
}

impl Default for SearchConfig {
    fn default() -> Self {
        Self {
            strategy: Strategy::FineBeam,
            m: 4,
            n: 1,
            n_samples: 8,
            temperature: 0.8,
            seed: 0,
            aggregation: Aggregation::Product,
            step_cap: 64,
        }
    }
}

impl SearchConfig {
    pub fn fine_beam(m: usize, n: usize, seed: u64) -> Self {
        Self {
            strategy: Strategy::FineBeam,
            m,
            n,
            seed,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), SearchError> {
        let bad = |m: &str| Err(SearchError::Config(m.into()));
        match self.strategy {
            Strategy::FineBeam | Strategy::TokenBeam if self.m == 0 || self.n == 0 => {
                bad("M and N must be at least 1")
            }
            Strategy::BestOfN | Strategy::Majority if self.n_samples == 0 => {
                bad("n_samples must be at least 1")
            }
            _ if self.temperature.is_nan() || self.temperature < 0.0 => {
                bad("temperature must be non-negative")
            }
            _ if self.step_cap == 0 => bad("step_cap must be at least 1"),
            _ => Ok(()),
        }
    }
}

/// A partial response under search.
#[derive(Clone, Debug)]
pub struct BeamCandidate {
    pub id: usize,
    pub parent_id: Option<usize>,
    pub prefix_text: String,
    pub machine: MachineState,
    pub step_scores: Vec<f64>,
    pub agg_score: f64,
    pub alive: bool,
    /// Sample index of every expansion from the root.
    pub path: Vec<u64>,
    pub boundary_missing: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoredStep {
    pub kind: StepKind,
    pub span: CharSpan,
    pub prob: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CandidateTrace {
    pub id: usize,
    pub parent_id: Option<usize>,
    pub sample_index: u64,
    pub delta: String,
    pub steps: Vec<ScoredStep>,
    pub agg_score: f64,
    pub terminated: bool,
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub boundary_missing: bool,
    pub retained: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoundTrace {
    pub round: usize,
    /// Candidates expanded this round.
    pub expanded: usize,
    pub candidates: Vec<CandidateTrace>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleTrace {
    pub sample_index: u64,
    pub response: String,
    /// generate_step calls spent on this sample.
    pub steps: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub score: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SearchTrace {
    pub query_id: String,
    pub strategy: Strategy,
    #[serde(rename = "M")]
    pub m: usize,
    #[serde(rename = "N")]
    pub n: usize,
    pub n_samples: usize,
    pub temperature: f64,
    pub seed: u64,
    pub aggregation: Aggregation,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub rounds: Vec<RoundTrace>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub samples: Vec<SampleTrace>,
    /// Majority-vote group sizes, in order of first occurrence.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub votes: Vec<usize>,
    /// Candidate id (fine beam) or sample index of the answer.
    pub selected: Option<u64>,
    /// No candidate terminated; the best prefix was completed by sampling.
    #[serde(default)]
    pub fallback: bool,
    #[serde(default)]
    pub fallback_steps: usize,
    /// The native backend beam was used.
    #[serde(default)]
    pub native: bool,
    pub generate_calls: usize,
    pub scorer_calls: usize,
}

impl SearchTrace {
    fn new(q: &Query, cfg: &SearchConfig) -> Self {
        Self {
            query_id: q.id.clone(),
            strategy: cfg.strategy,
            m: cfg.m,
            n: cfg.n,
            n_samples: cfg.n_samples,
            temperature: cfg.temperature,
            seed: cfg.seed,
            aggregation: cfg.aggregation,
            ..Self::default()
        }
    }
}

#[derive(Clone, Debug)]
pub struct SearchOutcome {
    pub response: String,
    /// `None` when the response does not parse.
    pub prediction: Option<CallSequence>,
    pub trace: SearchTrace,
}

impl SearchOutcome {
    fn new(response: String, trace: SearchTrace) -> Self {
        let prediction = parse_response(&response).ok();
        Self {
            response,
            prediction,
            trace,
        }
    }
}

#[derive(Debug)]
pub struct SearchFailure {
    pub error: SearchError,
    pub trace: Box<SearchTrace>,
}

impl std::fmt::Display for SearchFailure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "query `{}`: {}", self.trace.query_id, self.error)
    }
}

impl std::error::Error for SearchFailure {}

fn fail(error: impl Into<SearchError>, trace: SearchTrace) -> SearchFailure {
    SearchFailure {
        error: error.into(),
        trace: Box::new(trace),
    }
}

/// Generation budget: generate_step calls recomputed from a trace. Fine
/// beam counts expanded candidates times M per round, plus any fallback
/// completion; sampling strategies count the steps of every sample.
pub fn budget_of(cfg: &SearchConfig, trace: &SearchTrace) -> usize {
    match cfg.strategy {
        Strategy::FineBeam | Strategy::TokenBeam if !trace.native => {
            trace
                .rounds
                .iter()
                .map(|r| r.expanded * cfg.m)
                .sum::<usize>()
                + trace.fallback_steps
        }
        _ => trace.samples.iter().map(|s| s.steps).sum(),
    }
}

struct Expansion {
    candidate: BeamCandidate,
    trace: CandidateTrace,
    terminated: bool,
    scorer_calls: usize,
}

#[allow(clippy::too_many_arguments)]
fn expand(
    q: &Query,
    policy: &dyn Policy,
    scorer: &dyn StepScorer,
    cfg: &SearchConfig,
    parent: &BeamCandidate,
    parent_pos: usize,
    j: usize,
    id: usize,
) -> Result<Expansion, SearchError> {
    let sample_index = (parent_pos * cfg.m + j) as u64;
    let delta = policy.generate_step(&GenRequest {
        query: q,
        prefix: &parent.prefix_text,
        machine: &parent.machine,
        temperature: cfg.temperature,
        seed: cfg.seed,
        sample_index,
        max_chars: DEFAULT_MAX_CHARS,
    })?;
    let mut machine = parent.machine.clone();
    let events = if delta.boundary_missing {
        None
    } else {
        machine.feed(&delta.text).ok().filter(|e| !e.is_empty())
    };
    let mut full = parent.prefix_text.clone();
    full.push_str(&delta.text);
    let mut path = parent.path.clone();
    path.push(sample_index);

    let Some(events) = events else {
        let candidate = BeamCandidate {
            id,
            parent_id: Some(parent.id),
            prefix_text: full,
            machine,
            step_scores: parent.step_scores.iter().copied().chain([0.0]).collect(),
            agg_score: 0.0,
            alive: false,
            path,
            boundary_missing: true,
        };
        let trace = CandidateTrace {
            id,
            parent_id: Some(parent.id),
            sample_index,
            delta: delta.text,
            steps: Vec::new(),
            agg_score: 0.0,
            terminated: false,
            boundary_missing: true,
            retained: false,
        };
        return Ok(Expansion {
            candidate,
            trace,
            terminated: false,
            scorer_calls: 0,
        });
    };

    let mut scores = parent.step_scores.clone();
    let mut steps = Vec::with_capacity(events.len());
    for e in &events {
        let start = byte_offset(&full, e.span.start);
        let end = byte_offset(&full, e.span.end);
        let s = scorer.score(&ScoreRequest {
            query: q,
            prefix: &full[..start],
            step: &full[start..end],
            kind: e.kind,
        })?;
        scores.push(s.prob);
        steps.push(ScoredStep {
            kind: e.kind,
            span: e.span,
            prob: s.prob,
        });
    }
    let agg = aggregate(&scores, cfg.aggregation);
    let terminated = machine.is_terminated();
    let scorer_calls = steps.len();
    Ok(Expansion {
        candidate: BeamCandidate {
            id,
            parent_id: Some(parent.id),
            prefix_text: full,
            machine,
            step_scores: scores,
            agg_score: agg,
            alive: !terminated,
            path,
            boundary_missing: false,
        },
        trace: CandidateTrace {
            id,
            parent_id: Some(parent.id),
            sample_index,
            delta: delta.text,
            steps,
            agg_score: agg,
            terminated,
            boundary_missing: false,
            retained: false,
        },
        terminated,
        scorer_calls,
    })
}

/// Best-first order: higher score, usable before boundary-missing, then
/// pool position (earlier parent, lower sample index).
fn rank(a: &BeamCandidate, b: &BeamCandidate) -> std::cmp::Ordering {
    b.agg_score
        .total_cmp(&a.agg_score)
        .then(a.boundary_missing.cmp(&b.boundary_missing))
}

/// Final choice among terminated candidates: highest score, then the
/// lexicographically smallest sample path.
fn select_best(finished: &[BeamCandidate]) -> Option<&BeamCandidate> {
    finished.iter().min_by(|a, b| {
        a.boundary_missing
            .cmp(&b.boundary_missing)
            .then(b.agg_score.total_cmp(&a.agg_score))
            .then(a.path.cmp(&b.path))
    })
}

/// Step-level beam search. Each round expands every live candidate `M`
/// times, scores each new step, and keeps the global top `N` of the pooled
/// expansions. Terminated candidates are frozen and compete at the end.
pub fn fine_beam_search(
    q: &Query,
    policy: &dyn Policy,
    scorer: &dyn StepScorer,
    cfg: &SearchConfig,
) -> Result<SearchOutcome, SearchFailure> {
    let mut trace = SearchTrace::new(q, cfg);
    if let Err(e) = cfg.validate() {
        return Err(fail(e, trace));
    }
    let root = BeamCandidate {
        id: 0,
        parent_id: None,
        prefix_text: String::new(),
        machine: MachineState::new(StepperOptions::default()),
        step_scores: Vec::new(),
        agg_score: 1.0,
        alive: true,
        path: Vec::new(),
        boundary_missing: false,
    };
    let mut live = vec![root];
    let mut finished: Vec<BeamCandidate> = Vec::new();
    let mut last_pool: Vec<BeamCandidate> = Vec::new();
    let mut next_id = 1;

    for round in 1..=cfg.step_cap {
        if live.is_empty() {
            break;
        }
        let jobs: Vec<(usize, usize, usize)> = (0..live.len())
            .flat_map(|pos| (0..cfg.m).map(move |j| (pos, j)))
            .enumerate()
            .map(|(k, (pos, j))| (pos, j, next_id + k))
            .collect();
        next_id += jobs.len();
        trace.generate_calls += jobs.len();
        let results: Vec<Result<Expansion, SearchError>> = jobs
            .par_iter()
            .map(|&(pos, j, id)| expand(q, policy, scorer, cfg, &live[pos], pos, j, id))
            .collect();

        let mut pool = Vec::with_capacity(results.len());
        let mut round_trace = RoundTrace {
            round,
            expanded: live.len(),
            candidates: Vec::with_capacity(results.len()),
        };
        for r in results {
            match r {
                Ok(x) => {
                    trace.scorer_calls += x.scorer_calls;
                    debug_assert_eq!(x.terminated, x.candidate.machine.is_terminated());
                    round_trace.candidates.push(x.trace);
                    pool.push(x.candidate);
                }
                Err(e) => {
                    trace.rounds.push(round_trace);
                    return Err(fail(e, trace));
                }
            }
        }
        if round == 1 && pool.iter().all(|c| c.boundary_missing) {
            trace.rounds.push(round_trace);
            return Err(fail(SearchError::NoCandidate, trace));
        }

        // Stable sort keeps pool order (parent, sample index) among ties.
        let mut order: Vec<usize> = (0..pool.len()).collect();
        order.sort_by(|&a, &b| rank(&pool[a], &pool[b]));
        let keep = &order[..cfg.n.min(order.len())];
        let mut next_live = Vec::new();
        for &i in keep {
            round_trace.candidates[i].retained = true;
            let c = &pool[i];
            if c.machine.is_terminated() {
                finished.push(c.clone());
            } else if !c.boundary_missing {
                next_live.push(c.clone());
            }
        }
        trace.rounds.push(round_trace);
        live = next_live;
        last_pool = pool;
    }

    if let Some(best) = select_best(&finished).filter(|b| !b.boundary_missing) {
        trace.selected = Some(best.id as u64);
        let response = best.prefix_text.clone();
        return Ok(SearchOutcome::new(response, trace));
    }

    // Nothing terminated: complete the best usable prefix by sampling.
    let mut candidates: Vec<&BeamCandidate> = live
        .iter()
        .chain(
            last_pool
                .iter()
                .filter(|c| !c.boundary_missing && !c.machine.is_terminated()),
        )
        .collect();
    candidates.sort_by(|a, b| rank(a, b).then(a.path.cmp(&b.path)));
    match candidates.first() {
        Some(best) => {
            trace.fallback = true;
            trace.selected = Some(best.id as u64);
            match complete_from(
                policy,
                q,
                &best.prefix_text,
                &best.machine,
                cfg.temperature,
                cfg.seed,
                0,
                cfg.step_cap,
            ) {
                Ok(c) => {
                    trace.fallback_steps = c.steps;
                    trace.generate_calls += c.steps;
                    Ok(SearchOutcome::new(c.text, trace))
                }
                Err(e) => Err(fail(e, trace)),
            }
        }
        None => match select_best(&finished).or_else(|| last_pool.iter().min_by(|a, b| rank(a, b)))
        {
            Some(best) => {
                trace.selected = Some(best.id as u64);
                let response = best.prefix_text.clone();
                Ok(SearchOutcome::new(response, trace))
            }
            None => Err(fail(SearchError::NoCandidate, trace)),
        },
    }
}

fn sample_all(
    q: &Query,
    policy: &dyn Policy,
    n: usize,
    cfg: &SearchConfig,
    trace: &mut SearchTrace,
) -> Result<(), SearchError> {
    let results: Vec<Result<_, PolicyError>> = (0..n as u64)
        .into_par_iter()
        .map(|i| complete_sampled(policy, q, cfg.temperature, cfg.seed, i, cfg.step_cap))
        .collect();
    for (i, r) in results.into_iter().enumerate() {
        let c = r?;
        trace.generate_calls += c.steps;
        trace.samples.push(SampleTrace {
            sample_index: i as u64,
            response: c.text,
            steps: c.steps,
            score: None,
        });
    }
    Ok(())
}

/// Samples one response with sample index 0.
pub fn greedy_decode(
    q: &Query,
    policy: &dyn Policy,
    cfg: &SearchConfig,
) -> Result<SearchOutcome, SearchFailure> {
    let mut trace = SearchTrace::new(q, cfg);
    trace.strategy = Strategy::Greedy;
    if let Err(e) = sample_all(q, policy, 1, cfg, &mut trace) {
        return Err(fail(e, trace));
    }
    trace.selected = Some(0);
    let response = trace.samples[0].response.clone();
    Ok(SearchOutcome::new(response, trace))
}

/// Prefix and text of the final TotalFinish step of `response`, or of the
/// unterminated tail if it never closed.
fn outcome_step(response: &str) -> (&str, &str, StepKind) {
    let out = segment_lenient(response, StepperOptions::default());
    let start = out
        .events
        .iter()
        .rev()
        .find(|e| e.kind == StepKind::TotalFinish)
        .or(out.events.last())
        .map_or(0, |e| {
            if e.kind == StepKind::TotalFinish {
                e.span.start
            } else {
                e.span.end
            }
        });
    let b = byte_offset(response, start);
    (&response[..b], &response[b..], StepKind::TotalFinish)
}

/// Samples `n_samples` responses, scores each once as a whole and returns
/// the best, ties to the lowest sample index.
pub fn best_of_n(
    q: &Query,
    policy: &dyn Policy,
    outcome_scorer: &dyn StepScorer,
    cfg: &SearchConfig,
) -> Result<SearchOutcome, SearchFailure> {
    let mut trace = SearchTrace::new(q, cfg);
    trace.strategy = Strategy::BestOfN;
    if let Err(e) = cfg
        .validate()
        .and_then(|_| sample_all(q, policy, cfg.n_samples, cfg, &mut trace))
    {
        return Err(fail(e, trace));
    }
    let scores: Vec<Result<f64, _>> = trace
        .samples
        .par_iter()
        .map(|s| {
            let (prefix, step, kind) = outcome_step(&s.response);
            outcome_scorer
                .score(&ScoreRequest {
                    query: q,
                    prefix,
                    step,
                    kind,
                })
                .map(|x| x.prob)
        })
        .collect();
    let mut best: Option<(usize, f64)> = None;
    for (i, s) in scores.into_iter().enumerate() {
        match s {
            Ok(p) => {
                trace.scorer_calls += 1;
                trace.samples[i].score = Some(p);
                if best.is_none_or(|(_, b)| p > b) {
                    best = Some((i, p));
                }
            }
            Err(e) => return Err(fail(e, trace)),
        }
    }
    let (i, _) = best.expect("n_samples >= 1");
    trace.selected = Some(i as u64);
    let response = trace.samples[i].response.clone();
    Ok(SearchOutcome::new(response, trace))
}

/// Samples `n_samples` responses and returns the first member of the
/// largest group of equal answers (by canonical form; raw text for
/// responses that do not parse). Ties go to the group seen first.
pub fn majority_vote(
    q: &Query,
    policy: &dyn Policy,
    cfg: &SearchConfig,
) -> Result<SearchOutcome, SearchFailure> {
    let mut trace = SearchTrace::new(q, cfg);
    trace.strategy = Strategy::Majority;
    if let Err(e) = cfg
        .validate()
        .and_then(|_| sample_all(q, policy, cfg.n_samples, cfg, &mut trace))
    {
        return Err(fail(e, trace));
    }
    let mut groups: Vec<(usize, usize)> = Vec::new(); // (first sample, count)
    let mut index: HashMap<String, usize> = HashMap::new();
    for (i, s) in trace.samples.iter().enumerate() {
        let key = match parse_response(&s.response) {
            Ok(seq) => format!("ok:{}", canonicalize(&seq)),
            Err(_) => format!("raw:{}", s.response),
        };
        let g = *index.entry(key).or_insert_with(|| {
            groups.push((i, 0));
            groups.len() - 1
        });
        groups[g].1 += 1;
    }
    trace.votes = groups.iter().map(|g| g.1).collect();
    let (first, _) = groups
        .iter()
        .copied()
        .reduce(|best, g| if g.1 > best.1 { g } else { best })
        .expect("n_samples >= 1");
    trace.selected = Some(first as u64);
    let response = trace.samples[first].response.clone();
    Ok(SearchOutcome::new(response, trace))
}

/// Token-level beam search baseline. Uses the backend's native beam when
/// it has one; otherwise step-level beam search (`M = N = width`) ranked by
/// the policy's own step likelihoods.
pub fn token_beam(
    q: &Query,
    policy: &dyn Policy,
    cfg: &SearchConfig,
) -> Result<SearchOutcome, SearchFailure> {
    let mut trace = SearchTrace::new(q, cfg);
    trace.strategy = Strategy::TokenBeam;
    let width = cfg.m.max(1);
    match policy.complete_native_beam(q, width, cfg.temperature, cfg.seed) {
        Ok(Some(text)) => {
            trace.native = true;
            trace.generate_calls = 1;
            trace.samples.push(SampleTrace {
                sample_index: 0,
                response: text.clone(),
                steps: 1,
                score: None,
            });
            trace.selected = Some(0);
            return Ok(SearchOutcome::new(text, trace));
        }
        Ok(None) => {}
        Err(e) => return Err(fail(e, trace)),
    }
    let scorer = LikelihoodScorer { policy };
    let inner = SearchConfig {
        strategy: Strategy::TokenBeam,
        m: width,
        n: width,
        ..cfg.clone()
    };
    fine_beam_search(q, policy, &scorer, &inner)
}

/// Dispatches on `cfg.strategy`. `scorer` is the step scorer for fine beam
/// and the outcome scorer for best-of-N.
pub fn run_search(
    q: &Query,
    policy: &dyn Policy,
    scorer: &dyn StepScorer,
    cfg: &SearchConfig,
) -> Result<SearchOutcome, SearchFailure> {
    match cfg.strategy {
        Strategy::FineBeam => fine_beam_search(q, policy, scorer, cfg),
        Strategy::BestOfN => best_of_n(q, policy, scorer, cfg),
        Strategy::Majority => majority_vote(q, policy, cfg),
        Strategy::Greedy => greedy_decode(q, policy, cfg),
        Strategy::TokenBeam => token_beam(q, policy, cfg),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::policy::{
        complete_sampled, SimPolicy, SimPolicyConfig, StepDelta, DEFAULT_STEP_CAP,
    };
    use crate::schema::{FunctionCall, FunctionSpec, ParamKind, ParamSpec, ToolUniverse};
    use crate::scorer::{ConstantScorer, OracleScorer};
    use serde_json::json;

    fn query() -> Query {
        Query {
            id: "s".into(),
            text: "".into(),
            universe: ToolUniverse::new(vec![
                FunctionSpec::new("f", "")
                    .with_param(ParamSpec::new("a", ParamKind::Integer, true))
                    .with_param(ParamSpec::new("b", ParamKind::String, true)),
                FunctionSpec::new("g", "").with_param(ParamSpec::new(
                    "x",
                    ParamKind::Integer,
                    true,
                )),
                FunctionSpec::new("h", ""),
            ]),
            ground_truths: vec![CallSequence::new(vec![
                FunctionCall::new("f")
                    .with_arg("a", json!(1))
                    .with_arg("b", json!("z")),
                FunctionCall::new("g").with_arg("x", json!(4)),
            ])],
            category: None,
        }
    }

    #[test]
    fn degenerate_beam_is_greedy() {
        let q = query();
        let p = SimPolicy::new(SimPolicyConfig::uniform(0.5, 3));
        for seed in 0..30 {
            let cfg = SearchConfig {
                temperature: 0.7,
                ..SearchConfig::fine_beam(1, 1, seed)
            };
            let beam = fine_beam_search(&q, &p, &ConstantScorer(0.3), &cfg).unwrap();
            let greedy = complete_sampled(&p, &q, 0.7, seed, 0, DEFAULT_STEP_CAP).unwrap();
            assert_eq!(beam.response, greedy.text);
            assert_eq!(budget_of(&cfg, &beam.trace), greedy.steps);
        }
    }

    #[test]
    fn budget_counts_alive_times_m() {
        let q = query();
        let p = SimPolicy::new(SimPolicyConfig::uniform(1.0, 0));
        let cfg = SearchConfig::fine_beam(4, 2, 0);
        let out = fine_beam_search(&q, &p, &OracleScorer::default(), &cfg).unwrap();
        let expanded: Vec<usize> = out.trace.rounds.iter().map(|r| r.expanded).collect();
        // Every expansion is correct and identical, so all rounds keep 2.
        assert_eq!(expanded, [1, 2, 2, 2, 2]);
        assert_eq!(budget_of(&cfg, &out.trace), 36);
        assert_eq!(out.prediction.as_ref(), Some(&q.ground_truths[0]));
    }

    #[test]
    fn majority_counts_votes() {
        let q = query();
        let p = SimPolicy::new(SimPolicyConfig::uniform(0.7, 9));
        let cfg = SearchConfig {
            strategy: Strategy::Majority,
            n_samples: 101,
            ..SearchConfig::default()
        };
        let out = majority_vote(&q, &p, &cfg).unwrap();
        assert_eq!(out.trace.votes.iter().sum::<usize>(), 101);
    }

    struct Prose;

    impl Policy for Prose {
        fn name(&self) -> &str {
            "prose"
        }

        fn generate_step(&self, _req: &GenRequest<'_>) -> Result<StepDelta, PolicyError> {
            Ok(StepDelta {
                text: "I think".into(),
                boundary_missing: true,
            })
        }
    }

    #[test]
    fn all_missing_boundaries_is_no_candidate() {
        let err = fine_beam_search(
            &query(),
            &Prose,
            &ConstantScorer(0.5),
            &SearchConfig::fine_beam(3, 2, 0),
        )
        .unwrap_err();
        assert!(matches!(err.error, SearchError::NoCandidate));
        assert_eq!(err.trace.rounds[0].candidates.len(), 3);
    }

    #[test]
    fn aggregations() {
        let s = [0.5, 0.8, 0.25];
        assert_eq!(aggregate(&s, Aggregation::Product), 0.1);
        assert_eq!(aggregate(&s, Aggregation::Min), 0.25);
        assert!((aggregate(&s, Aggregation::Mean) - 1.55 / 3.0).abs() < 1e-15);
        assert_eq!(aggregate(&s, Aggregation::Last), 0.25);
        assert_eq!(aggregate(&[], Aggregation::Min), 1.0);
    }
}
