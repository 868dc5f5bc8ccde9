//! Step generators: a deterministic simulated policy and a remote
//! text-completion backend, plus drivers that run a generator to
//! termination.

use std::collections::BTreeMap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::error::PolicyError;
use crate::hashing::{text_hash, StableHash};
use crate::remote::{JsonClient, RemoteConfig};
use crate::schema::{canonical_value, json_string, FunctionCall, ParamKind, ParamSpec, Query};
use crate::stepper::{MachineState, Phase, StepKind};
use crate::templates::{tools_listing, PromptTemplate, DEFAULT_POLICY_TEMPLATE};

pub const DEFAULT_STEP_CAP: usize = 256;
pub const DEFAULT_MAX_CHARS: usize = 2048;
/// Follow-up requests when a stop string fired before a step boundary.
const MAX_RESUMES: usize = 4;

/// One request for the continuation of `prefix` up to the next step
/// boundary. `machine` is the stepper state after `prefix`.
#[derive(Clone, Copy, Debug)]
pub struct GenRequest<'a> {
    pub query: &'a Query,
    pub prefix: &'a str,
    pub machine: &'a MachineState,
    pub temperature: f64,
    pub seed: u64,
    pub sample_index: u64,
    pub max_chars: usize,
}

impl GenRequest<'_> {
    pub fn stop_strings(&self) -> Vec<&'static str> {
        self.machine.expected_stops()
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StepDelta {
    pub text: String,
    /// No step boundary was reached within the delta.
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub boundary_missing: bool,
}

pub trait Policy: Send + Sync {
    fn name(&self) -> &str;

    fn generate_step(&self, req: &GenRequest<'_>) -> Result<StepDelta, PolicyError>;

    /// Probability the policy assigns to producing `step` after `prefix`,
    /// when the backend can tell.
    fn step_likelihood(
        &self,
        _q: &Query,
        _prefix: &str,
        _machine: &MachineState,
        _step: &str,
    ) -> Option<f64> {
        None
    }

    /// Full response from a backend-native beam search, if supported.
    fn complete_native_beam(
        &self,
        _q: &Query,
        _width: usize,
        _temperature: f64,
        _seed: u64,
    ) -> Result<Option<String>, PolicyError> {
        Ok(None)
    }
}

/// Truncates `text` right after the first char that completes a step
/// event when fed after `machine`. Text that never reaches a boundary, or
/// is not a valid continuation, is returned whole and flagged.
pub fn cut_at_boundary(machine: &MachineState, text: &str) -> StepDelta {
    let mut m = machine.clone();
    let mut events = Vec::new();
    for (i, c) in text.char_indices() {
        if m.feed_char(c, &mut events).is_err() {
            break;
        }
        if !events.is_empty() {
            return StepDelta {
                text: text[..i + c.len_utf8()].to_string(),
                boundary_missing: false,
            };
        }
    }
    StepDelta {
        text: text.to_string(),
        boundary_missing: true,
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Completion {
    pub text: String,
    /// generate_step calls made.
    pub steps: usize,
}

/// Runs `policy` from `prefix` (with stepper state `machine`) until the
/// response terminates.
#[allow(clippy::too_many_arguments)]
pub fn complete_from(
    policy: &dyn Policy,
    q: &Query,
    prefix: &str,
    machine: &MachineState,
    temperature: f64,
    seed: u64,
    sample_index: u64,
    step_cap: usize,
) -> Result<Completion, PolicyError> {
    let mut text = prefix.to_string();
    let mut m = machine.clone();
    let mut steps = 0;
    while !m.is_terminated() {
        if steps >= step_cap {
            return Err(PolicyError::NonTerminating { steps });
        }
        let delta = policy.generate_step(&GenRequest {
            query: q,
            prefix: &text,
            machine: &m,
            temperature,
            seed,
            sample_index,
            max_chars: DEFAULT_MAX_CHARS,
        })?;
        steps += 1;
        m.feed(&delta.text)?;
        text.push_str(&delta.text);
    }
    Ok(Completion { text, steps })
}

/// Samples one full response (sample stream `sample_index`).
pub fn complete_sampled(
    policy: &dyn Policy,
    q: &Query,
    temperature: f64,
    seed: u64,
    sample_index: u64,
    step_cap: usize,
) -> Result<Completion, PolicyError> {
    complete_from(
        policy,
        q,
        "",
        &MachineState::default(),
        temperature,
        seed,
        sample_index,
        step_cap,
    )
}

pub fn complete_greedy(
    policy: &dyn Policy,
    q: &Query,
    temperature: f64,
    seed: u64,
) -> Result<String, PolicyError> {
    complete_sampled(policy, q, temperature, seed, 0, DEFAULT_STEP_CAP).map(|c| c.text)
}

// ---------------------------------------------------------------------------
// Simulated policy

/// How wrong argument steps are drawn.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DecoyStrategy {
    /// Keep the parameter, mutate the value (same JSON type).
    #[default]
    PerturbValue,
    /// Fill a different parameter of the same function where possible.
    WrongParam,
    /// Either of the above with equal odds.
    Mixed,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimPolicyConfig {
    /// Probability that a sampled step agrees with the target ground
    /// truth. `TOTAL_FINISH` governs answering `[]` on irrelevance queries.
    pub q_by_kind: BTreeMap<StepKind, f64>,
    #[serde(default)]
    pub decoy: DecoyStrategy,
    #[serde(default)]
    pub seed: u64,
}

impl SimPolicyConfig {
    pub fn uniform(q: f64, seed: u64) -> Self {
        Self {
            q_by_kind: StepKind::ALL.into_iter().map(|k| (k, q)).collect(),
            decoy: DecoyStrategy::PerturbValue,
            seed,
        }
    }

    pub fn with_q(mut self, kind: StepKind, q: f64) -> Self {
        self.q_by_kind.insert(kind, q);
        self
    }

    /// Missing kinds default to 1.0.
    pub fn q(&self, kind: StepKind) -> f64 {
        self.q_by_kind.get(&kind).copied().unwrap_or(1.0)
    }

    pub fn validate(&self) -> Result<(), String> {
        for (k, q) in &self.q_by_kind {
            if !(0.0..=1.0).contains(q) {
                return Err(format!("q for {k} must lie in [0, 1], got {q}"));
            }
        }
        Ok(())
    }
}

/// Generates grammatical steps that follow the query's first ground truth
/// with per-kind probability, and plausible decoys otherwise. Every delta
/// is a pure function of the config seed, the request seed, the query id,
/// the prefix and the sample index.
#[derive(Clone, Debug)]
pub struct SimPolicy {
    pub config: SimPolicyConfig,
}

/// What the simulator intends the current call to contain.
struct CallPlan {
    /// `None` values are drawn per parameter when emitted.
    args: Vec<(String, Option<Value>)>,
}

impl SimPolicy {
    pub fn new(config: SimPolicyConfig) -> Self {
        Self { config }
    }

    fn rng(&self, req: &GenRequest<'_>) -> ChaCha8Rng {
        StableHash::new("sim-step")
            .u64(self.config.seed)
            .u64(req.seed)
            .str(&req.query.id)
            .u64(text_hash(req.prefix))
            .u64(req.sample_index)
            .rng()
    }

    fn target(q: &Query) -> &[FunctionCall] {
        q.ground_truths
            .first()
            .map(|g| g.calls.as_slice())
            .unwrap_or(&[])
    }

    /// Arguments the simulator will emit for a call to `name` at `index`.
    fn plan(q: &Query, index: usize, name: &str) -> CallPlan {
        let target = Self::target(q);
        if let Some(call) = target.get(index).filter(|c| c.name == name) {
            return CallPlan {
                args: call
                    .args
                    .iter()
                    .map(|a| (a.name.clone(), Some(a.value.clone())))
                    .collect(),
            };
        }
        // A decoy call fills its function's required parameters.
        let args = q
            .universe
            .function(name)
            .map(|f| {
                f.params
                    .iter()
                    .filter(|p| p.required)
                    .map(|p| (p.name.clone(), None))
                    .collect()
            })
            .unwrap_or_default();
        CallPlan { args }
    }

    fn total_calls(q: &Query, machine: &MachineState) -> usize {
        Self::target(q).len().max(machine.partial.calls.len())
    }

    fn closing(q: &Query, machine: &MachineState, call_index: usize) -> &'static str {
        if call_index + 1 >= Self::total_calls(q, machine) {
            "}}]"
        } else {
            "}}"
        }
    }

    fn func_name_step(&self, req: &GenRequest<'_>, rng: &mut ChaCha8Rng, out: &mut String) {
        let q = req.query;
        let m = req.machine;
        let index = m.call_index;
        let target = Self::target(q);
        let correct = rng.random::<f64>() < self.config.q(StepKind::FuncName);
        let name = match target.get(index) {
            Some(call) if correct => call.name.clone(),
            Some(call) => decoy_function(q, &call.name, rng),
            None => decoy_function(q, "", rng),
        };
        if index > 0 {
            out.push(',');
        }
        out.push_str("{\"name\":");
        out.push_str(&json_string(&name));
        out.push(',');
        if Self::plan(q, index, &name).args.is_empty() {
            out.push_str("\"arguments\":{");
            // The call index is not yet advanced for this call.
            let total = target.len().max(index + 1);
            out.push_str(if index + 1 >= total { "}}]" } else { "}}" });
        }
    }

    fn arg_value_step(
        &self,
        req: &GenRequest<'_>,
        rng: &mut ChaCha8Rng,
        out: &mut String,
    ) -> Result<(), PolicyError> {
        let q = req.query;
        let m = req.machine;
        let call = m
            .current_call()
            .ok_or_else(|| PolicyError::Backend("simulated policy: no open call".into()))?;
        let plan = Self::plan(q, m.call_index, &call.name);
        let produced: Vec<&str> = call.args.iter().map(|a| a.name.as_str()).collect();
        let remaining: Vec<&(String, Option<Value>)> = plan
            .args
            .iter()
            .filter(|(n, _)| !produced.contains(&n.as_str()))
            .collect();
        let Some((name, planned)) = remaining.first().map(|(n, v)| (n.clone(), v.clone())) else {
            return Err(PolicyError::Backend(
                "simulated policy: call already complete".into(),
            ));
        };
        let spec = q.universe.function(&call.name).and_then(|f| f.param(&name));
        let planned = planned.unwrap_or_else(|| {
            plausible_value(
                spec.map(|p| &p.kind),
                &mut param_rng(self.config.seed, q, &call.name, &name),
            )
        });

        let correct = rng.random::<f64>() < self.config.q(StepKind::ArgValue);
        let (name, value) = if correct {
            (name, planned)
        } else {
            self.decoy_arg(q, &call.name, &name, &planned, &produced, rng)
        };

        match m.phase() {
            Phase::ArgsKey => out.push_str("\"arguments\":{"),
            Phase::ArgKey => {}
            _ => out.push(','),
        }
        out.push_str(&json_string(&name));
        out.push(':');
        out.push_str(&serde_json::to_string(&value).expect("value serialization is infallible"));
        let done = produced.len() + 1 >= plan.args.len() || remaining.len() <= 1;
        if done {
            out.push_str(Self::closing(q, m, m.call_index));
        } else if value.is_number() {
            // A number only completes at the next delimiter.
            out.push(',');
        }
        Ok(())
    }

    fn decoy_arg(
        &self,
        q: &Query,
        func: &str,
        param: &str,
        planned: &Value,
        produced: &[&str],
        rng: &mut ChaCha8Rng,
    ) -> (String, Value) {
        let wrong_param = match self.config.decoy {
            DecoyStrategy::PerturbValue => false,
            DecoyStrategy::WrongParam => true,
            DecoyStrategy::Mixed => rng.random::<bool>(),
        };
        let spec = q.universe.function(func);
        if wrong_param {
            let others: Vec<&ParamSpec> = spec
                .map(|f| {
                    f.params
                        .iter()
                        .filter(|p| p.name != param && !produced.contains(&p.name.as_str()))
                        .collect()
                })
                .unwrap_or_default();
            if !others.is_empty() {
                let p = others[rng.random_range(0..others.len())];
                return (p.name.clone(), plausible_value(Some(&p.kind), rng));
            }
        }
        let kind = spec.and_then(|f| f.param(param)).map(|p| &p.kind);
        (param.to_string(), perturb_value(planned, kind, rng))
    }

    /// True when `step` is what the target ground truth prescribes next.
    fn step_is_target(
        &self,
        q: &Query,
        machine: &MachineState,
        step: &str,
    ) -> Option<(StepKind, bool)> {
        let mut m = machine.clone();
        let events = m.feed(step).ok()?;
        let first = events.first()?;
        let target = Self::target(q);
        let ok = match first.kind {
            StepKind::FuncName => target.get(first.call_index).is_some_and(|c| {
                m.partial
                    .calls
                    .get(first.call_index)
                    .is_some_and(|g| g.name == c.name)
            }),
            StepKind::ArgValue => {
                let got = m
                    .partial
                    .calls
                    .get(first.call_index)
                    .and_then(|c| c.args.get(first.arg_index.unwrap_or(0)));
                match (target.get(first.call_index), got) {
                    (Some(t), Some(a)) => t
                        .arg(&a.name)
                        .is_some_and(|v| canonical_value(v) == canonical_value(&a.value)),
                    _ => false,
                }
            }
            StepKind::TotalFinish => target.is_empty(),
            _ => true,
        };
        Some((first.kind, ok))
    }
}

fn param_rng(seed: u64, q: &Query, func: &str, param: &str) -> ChaCha8Rng {
    StableHash::new("sim-param")
        .u64(seed)
        .str(&q.id)
        .str(func)
        .str(param)
        .rng()
}

fn random_word(rng: &mut ChaCha8Rng, len: usize) -> String {
    const ALPHA: &[u8] = b"abcdefghijklmnopqrstuvwxyz";
    (0..len)
        .map(|_| ALPHA[rng.random_range(0..ALPHA.len())] as char)
        .collect()
}

fn decoy_function(q: &Query, correct: &str, rng: &mut ChaCha8Rng) -> String {
    let others: Vec<&str> = q
        .universe
        .functions
        .iter()
        .map(|f| f.name.as_str())
        .filter(|n| *n != correct)
        .collect();
    if others.is_empty() {
        format!("fn_{}", random_word(rng, 6))
    } else {
        others[rng.random_range(0..others.len())].to_string()
    }
}

fn plausible_value(kind: Option<&ParamKind>, rng: &mut ChaCha8Rng) -> Value {
    match kind {
        Some(ParamKind::Integer) => json!(rng.random_range(0..100)),
        Some(ParamKind::Number) => json!(rng.random_range(0..1000) as f64 / 4.0 + 0.5),
        Some(ParamKind::Boolean) => json!(rng.random::<bool>()),
        Some(ParamKind::Array) => json!([random_word(rng, 5)]),
        Some(ParamKind::Object) => json!({ "key": random_word(rng, 5) }),
        Some(ParamKind::Enum(options)) if !options.is_empty() => {
            json!(options[rng.random_range(0..options.len())])
        }
        _ => json!(random_word(rng, 6)),
    }
}

/// A value of the same JSON type that differs canonically from `value`.
fn perturb_value(value: &Value, kind: Option<&ParamKind>, rng: &mut ChaCha8Rng) -> Value {
    let out = match value {
        Value::Null => json!(random_word(rng, 4)),
        Value::Bool(b) => json!(!b),
        Value::Number(n) => {
            let k = rng.random_range(1..10i64) * if rng.random::<bool>() { 1 } else { -1 };
            if let Some(i) = n.as_i64() {
                json!(i.checked_add(k).unwrap_or(i - k))
            } else {
                let f = n.as_f64().unwrap_or(0.0);
                let g = f + k as f64 / 2.0;
                json!(if g == f { f * 0.5 } else { g })
            }
        }
        Value::String(s) => {
            let alternatives: Vec<&String> = match kind {
                Some(ParamKind::Enum(options)) => options.iter().filter(|o| *o != s).collect(),
                _ => Vec::new(),
            };
            if !alternatives.is_empty() {
                json!(alternatives[rng.random_range(0..alternatives.len())])
            } else if s.is_empty() {
                json!(random_word(rng, 3))
            } else {
                let mut chars: Vec<char> = s.chars().collect();
                let i = rng.random_range(0..chars.len());
                let mut c = random_word(rng, 1).chars().next().unwrap_or('x');
                if c == chars[i] {
                    c = if c == 'z' { 'y' } else { 'z' };
                }
                chars[i] = c;
                json!(chars.into_iter().collect::<String>())
            }
        }
        Value::Array(items) => match items.split_first() {
            Some((head, rest)) => {
                let mut v = vec![perturb_value(head, None, rng)];
                v.extend(rest.iter().cloned());
                Value::Array(v)
            }
            None => json!([random_word(rng, 4)]),
        },
        Value::Object(map) => {
            let mut map = map.clone();
            match map.iter_mut().next() {
                Some((_, v)) => *v = perturb_value(v, None, rng),
                None => {
                    map.insert("key".into(), json!(random_word(rng, 4)));
                }
            }
            Value::Object(map)
        }
    };
    debug_assert_ne!(canonical_value(&out), canonical_value(value));
    out
}

impl Policy for SimPolicy {
    fn name(&self) -> &str {
        "sim"
    }

    fn generate_step(&self, req: &GenRequest<'_>) -> Result<StepDelta, PolicyError> {
        let mut rng = self.rng(req);
        let m = req.machine;
        let q = req.query;
        let mut out = String::new();
        match m.phase() {
            Phase::Start | Phase::ListOpen | Phase::ListNext => {
                if m.phase() == Phase::Start {
                    out.push('[');
                }
                let target_len = Self::target(q).len();
                if m.call_index >= target_len && m.call_index > 0 {
                    out.push(']');
                } else if target_len == 0 {
                    if rng.random::<f64>() < self.config.q(StepKind::TotalFinish) {
                        out.push(']');
                    } else {
                        self.func_name_step(req, &mut rng, &mut out);
                    }
                } else {
                    self.func_name_step(req, &mut rng, &mut out);
                }
            }
            Phase::ArgsKey | Phase::ArgKey | Phase::ArgsNext => {
                self.arg_value_step(req, &mut rng, &mut out)?
            }
            Phase::Done => return Err(PolicyError::Backend("response already terminated".into())),
            other => {
                return Err(PolicyError::Backend(format!(
                    "simulated policy cannot continue from mid-token phase {other:?}"
                )))
            }
        }
        Ok(StepDelta {
            text: out,
            boundary_missing: false,
        })
    }

    fn step_likelihood(
        &self,
        q: &Query,
        _prefix: &str,
        machine: &MachineState,
        step: &str,
    ) -> Option<f64> {
        let (kind, ok) = self.step_is_target(q, machine, step)?;
        let p = self.config.q(kind);
        Some(if ok { p } else { 1.0 - p })
    }
}

// ---------------------------------------------------------------------------
// Remote policy

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RemotePolicyConfig {
    #[serde(flatten)]
    pub remote: RemoteConfig,
    /// Built-in template id or a path to a template file.
    pub template: String,
    pub max_tokens: usize,
    /// The endpoint accepts a `beam_width` field for native beam search.
    pub native_beam: bool,
}

impl Default for RemotePolicyConfig {
    fn default() -> Self {
        Self {
            remote: RemoteConfig::default(),
            template: DEFAULT_POLICY_TEMPLATE.into(),
            max_tokens: 256,
            native_beam: false,
        }
    }
}

/// Text-completion endpoint. Request body:
/// `{"prompt","temperature","stop","seed","max_tokens","model"?}`; reply
/// `{"choices":[{"text","stop_reason"?}]}` or `{"text"}`.
pub struct RemotePolicy {
    client: JsonClient,
    template: PromptTemplate,
    max_tokens: usize,
    native_beam: bool,
}

impl RemotePolicy {
    pub fn new(config: RemotePolicyConfig) -> Result<Self, PolicyError> {
        let template = PromptTemplate::resolve(&config.template).map_err(PolicyError::Backend)?;
        Ok(Self {
            client: JsonClient::new(config.remote),
            template,
            max_tokens: config.max_tokens,
            native_beam: config.native_beam,
        })
    }

    fn prompt(&self, q: &Query, prefix: &str) -> String {
        self.template.render(&[
            ("tools", &tools_listing(&q.universe)),
            ("query", &q.text),
            ("prefix", prefix),
        ])
    }

    fn request(&self, mut body: Value) -> Result<(String, Option<String>), PolicyError> {
        if let Some(model) = &self.client.config().model {
            body["model"] = json!(model);
        }
        let reply = self
            .client
            .post(&body)
            .map_err(|e| PolicyError::Backend(e.to_string()))?;
        parse_completion(&reply).ok_or_else(|| {
            PolicyError::Backend(format!("protocol: unexpected completion reply {reply}"))
        })
    }
}

fn parse_completion(reply: &Value) -> Option<(String, Option<String>)> {
    let choice = reply.get("choices").and_then(|c| c.get(0)).unwrap_or(reply);
    let text = choice.get("text")?.as_str()?.to_string();
    let stop = choice
        .get("stop_reason")
        .and_then(Value::as_str)
        .map(str::to_string);
    Some((text, stop))
}

impl Policy for RemotePolicy {
    fn name(&self) -> &str {
        "remote"
    }

    fn generate_step(&self, req: &GenRequest<'_>) -> Result<StepDelta, PolicyError> {
        let stops = req.stop_strings();
        let limit = req.max_chars.max(1);
        let mut text = String::new();
        // A stop string can also occur inside a value (a comma in a string);
        // then no boundary was reached and generation resumes after it.
        for _ in 0..=MAX_RESUMES {
            let body = json!({
                "prompt": self.prompt(req.query, &format!("{}{text}", req.prefix)),
                "temperature": req.temperature,
                "stop": stops,
                "seed": req.seed.wrapping_add(req.sample_index),
                "max_tokens": self.max_tokens,
            });
            let (piece, stop_reason) = self.request(body)?;
            text.push_str(&piece);
            // Completion servers usually drop the matched stop string.
            let stopped = stop_reason.filter(|s| stops.contains(&s.as_str()));
            if let Some(stop) = &stopped {
                if !piece.ends_with(stop.as_str()) {
                    text.push_str(stop);
                }
            }
            let clipped: String = text.chars().take(limit).collect();
            let delta = cut_at_boundary(req.machine, &clipped);
            if !delta.boundary_missing
                || stopped.is_none()
                || clipped.len() < text.len()
                || piece.is_empty()
            {
                return Ok(delta);
            }
        }
        let clipped: String = text.chars().take(limit).collect();
        Ok(cut_at_boundary(req.machine, &clipped))
    }

    fn complete_native_beam(
        &self,
        q: &Query,
        width: usize,
        temperature: f64,
        seed: u64,
    ) -> Result<Option<String>, PolicyError> {
        if !self.native_beam {
            return Ok(None);
        }
        let body = json!({
            "prompt": self.prompt(q, ""),
            "temperature": temperature,
            "seed": seed,
            "max_tokens": self.max_tokens,
            "beam_width": width,
        });
        self.request(body).map(|(text, _)| Some(text))
    }
}
