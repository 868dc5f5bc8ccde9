//! Step scorers: remote process reward models, the ground-truth oracle and
//! a seeded noisy oracle, all behind [`StepScorer`].

use std::collections::HashMap;
use std::sync::Mutex;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::annotator::{label_step, AnnotateOptions};
use crate::corpus_io::Reward;
use crate::error::ScorerError;
use crate::hashing::{text_hash, unit_interval, StableHash};
use crate::policy::Policy;
use crate::remote::{HttpFailure, JsonClient, RemoteConfig};
use crate::schema::Query;
use crate::stepper::{MachineState, StepKind};
use crate::templates::{tools_listing, PromptTemplate, DEFAULT_PRM_TEMPLATE};

/// Magnitude of the synthetic logits attached to oracle verdicts.
pub const ORACLE_LOGIT: f64 = 30.0;

/// Two-way softmax `e^pos / (e^pos + e^neg)`, shifted by the max so large
/// logits do not overflow.
pub fn logits_to_prob(s_pos: f64, s_neg: f64) -> Result<f64, ScorerError> {
    if !s_pos.is_finite() || !s_neg.is_finite() {
        return Err(ScorerError::NonFinite(s_pos, s_neg));
    }
    let m = s_pos.max(s_neg);
    let a = (s_pos - m).exp();
    let b = (s_neg - m).exp();
    Ok(a / (a + b))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScoreSource {
    Prm,
    Oracle,
    NoisyOracle,
    Constant,
    Likelihood,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepScore {
    pub prob: f64,
    pub logit_pos: f64,
    pub logit_neg: f64,
    pub source: ScoreSource,
}

impl StepScore {
    pub fn from_logits(
        logit_pos: f64,
        logit_neg: f64,
        source: ScoreSource,
    ) -> Result<Self, ScorerError> {
        Ok(Self {
            prob: logits_to_prob(logit_pos, logit_neg)?,
            logit_pos,
            logit_neg,
            source,
        })
    }

    /// Exact 0/1 probability with matching synthetic logits.
    pub fn verdict(reward: Reward, source: ScoreSource) -> Self {
        let (prob, sign) = if reward.is_pos() {
            (1.0, 1.0)
        } else {
            (0.0, -1.0)
        };
        Self {
            prob,
            logit_pos: sign * ORACLE_LOGIT,
            logit_neg: -sign * ORACLE_LOGIT,
            source,
        }
    }

    /// A probability without logits of its own; logits are its log-odds
    /// split symmetrically.
    pub fn from_prob(prob: f64, source: ScoreSource) -> Self {
        let p = prob.clamp(1e-300, 1.0 - 1e-16);
        let half = 0.5 * (p / (1.0 - p)).ln();
        Self {
            prob,
            logit_pos: half,
            logit_neg: -half,
            source,
        }
    }
}

/// `(s_t, a_t)`: the query as shown to the policy, the response before the
/// step, and the step text.
#[derive(Clone, Copy, Debug)]
pub struct ScoreRequest<'a> {
    pub query: &'a Query,
    pub prefix: &'a str,
    pub step: &'a str,
    pub kind: StepKind,
}

pub trait StepScorer: Send + Sync {
    fn name(&self) -> &str;

    fn score(&self, req: &ScoreRequest<'_>) -> Result<StepScore, ScorerError>;
}

/// Scores 1 when the survivor-set rule labels the step "+", else 0. Uses
/// the request query's ground truths.
#[derive(Clone, Copy, Debug, Default)]
pub struct OracleScorer {
    pub options: AnnotateOptions,
}

pub fn score_with_oracle(req: &ScoreRequest<'_>, q: &Query, options: AnnotateOptions) -> StepScore {
    StepScore::verdict(
        label_step(q, req.prefix, req.step, options),
        ScoreSource::Oracle,
    )
}

impl StepScorer for OracleScorer {
    fn name(&self) -> &str {
        "oracle"
    }

    fn score(&self, req: &ScoreRequest<'_>) -> Result<StepScore, ScorerError> {
        Ok(score_with_oracle(req, req.query, self.options))
    }
}

/// The oracle verdict, flipped with probability `1 - accuracy`. The flip
/// is a hash of (seed, query id, prefix, step), so repeated requests agree.
#[derive(Clone, Copy, Debug)]
pub struct NoisyOracleScorer {
    pub accuracy: f64,
    pub seed: u64,
    pub options: AnnotateOptions,
}

impl NoisyOracleScorer {
    pub fn new(accuracy: f64, seed: u64) -> Self {
        Self {
            accuracy,
            seed,
            options: AnnotateOptions::default(),
        }
    }

    pub fn flips(&self, req: &ScoreRequest<'_>) -> bool {
        let h = StableHash::new("noisy-oracle")
            .u64(self.seed)
            .str(&req.query.id)
            .u64(text_hash(req.prefix))
            .u64(text_hash(req.step))
            .finish();
        unit_interval(h) >= self.accuracy
    }
}

impl StepScorer for NoisyOracleScorer {
    fn name(&self) -> &str {
        "noisy_oracle"
    }

    fn score(&self, req: &ScoreRequest<'_>) -> Result<StepScore, ScorerError> {
        let truth = label_step(req.query, req.prefix, req.step, self.options);
        let reward = if self.flips(req) {
            Reward::from_bool(!truth.is_pos())
        } else {
            truth
        };
        Ok(StepScore::verdict(reward, ScoreSource::NoisyOracle))
    }
}

#[derive(Clone, Copy, Debug)]
pub struct ConstantScorer(pub f64);

impl StepScorer for ConstantScorer {
    fn name(&self) -> &str {
        "constant"
    }

    fn score(&self, _req: &ScoreRequest<'_>) -> Result<StepScore, ScorerError> {
        Ok(StepScore::from_prob(self.0, ScoreSource::Constant))
    }
}

/// Scores a step by the policy's own probability of producing it.
pub struct LikelihoodScorer<'p> {
    pub policy: &'p dyn Policy,
}

impl StepScorer for LikelihoodScorer<'_> {
    fn name(&self) -> &str {
        "likelihood"
    }

    fn score(&self, req: &ScoreRequest<'_>) -> Result<StepScore, ScorerError> {
        let mut m = MachineState::default();
        m.feed(req.prefix)
            .map_err(|e| ScorerError::Protocol(format!("prefix is not a machine prefix: {e}")))?;
        let p = self
            .policy
            .step_likelihood(req.query, req.prefix, &m, req.step)
            .ok_or_else(|| {
                ScorerError::Protocol("policy does not expose step likelihoods".into())
            })?;
        Ok(StepScore::from_prob(p, ScoreSource::Likelihood))
    }
}

/// Memoizes another scorer by request content.
pub struct CachedScorer<S> {
    inner: S,
    cache: Mutex<HashMap<u64, StepScore>>,
}

impl<S: StepScorer> CachedScorer<S> {
    pub fn new(inner: S) -> Self {
        Self {
            inner,
            cache: Mutex::new(HashMap::new()),
        }
    }

    pub fn len(&self) -> usize {
        self.cache.lock().map(|c| c.len()).unwrap_or(0)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

fn request_key(req: &ScoreRequest<'_>) -> u64 {
    StableHash::new("score-request")
        .str(&req.query.id)
        .str(&req.query.text)
        .str(req.prefix)
        .str(req.step)
        .str(req.kind.as_str())
        .finish()
}

impl<S: StepScorer> StepScorer for CachedScorer<S> {
    fn name(&self) -> &str {
        self.inner.name()
    }

    fn score(&self, req: &ScoreRequest<'_>) -> Result<StepScore, ScorerError> {
        let key = request_key(req);
        if let Some(hit) = self.cache.lock().ok().and_then(|c| c.get(&key).copied()) {
            return Ok(hit);
        }
        let score = self.inner.score(req)?;
        if let Ok(mut c) = self.cache.lock() {
            c.insert(key, score);
        }
        Ok(score)
    }
}

// ---------------------------------------------------------------------------
// Remote PRM

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PrmProtocol {
    /// `{"query","tools","prefix","step","kind"}` in, `{"logit_pos","logit_neg"}` out.
    #[default]
    Logits,
    /// A completion endpoint: one new token of the verdict prompt, reading
    /// the `+`/`-` alternatives from `top_logprobs`.
    CompletionLogprobs,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RemotePrmConfig {
    #[serde(flatten)]
    pub remote: RemoteConfig,
    pub protocol: PrmProtocol,
    /// Built-in template id or a path; used by the completion protocol.
    pub template: String,
    pub top_logprobs: usize,
}

impl Default for RemotePrmConfig {
    fn default() -> Self {
        Self {
            remote: RemoteConfig::default(),
            protocol: PrmProtocol::Logits,
            template: DEFAULT_PRM_TEMPLATE.into(),
            top_logprobs: 20,
        }
    }
}

pub struct RemotePrmScorer {
    client: JsonClient,
    protocol: PrmProtocol,
    template: PromptTemplate,
    top_logprobs: usize,
}

impl RemotePrmScorer {
    pub fn new(config: RemotePrmConfig) -> Result<Self, ScorerError> {
        let template = PromptTemplate::resolve(&config.template).map_err(ScorerError::Protocol)?;
        Ok(Self {
            client: JsonClient::new(config.remote),
            protocol: config.protocol,
            template,
            top_logprobs: config.top_logprobs,
        })
    }

    fn context(req: &ScoreRequest<'_>) -> String {
        format!(
            "query `{}`, {} step at char {}",
            req.query.id,
            req.kind,
            req.prefix.chars().count()
        )
    }

    fn post(&self, req: &ScoreRequest<'_>, mut body: Value) -> Result<Value, ScorerError> {
        if let Some(model) = &self.client.config().model {
            body["model"] = json!(model);
        }
        self.client.post(&body).map_err(|e| {
            let ctx = Self::context(req);
            match e {
                HttpFailure::Timeout(m) => ScorerError::Timeout(format!("{ctx}: {m}")),
                HttpFailure::Transport(m) => ScorerError::Transport(format!("{ctx}: {m}")),
                HttpFailure::Protocol(m) => ScorerError::Protocol(format!("{ctx}: {m}")),
            }
        })
    }
}

/// Reads `(logit_pos, logit_neg)` from a logits reply.
pub fn parse_logits_reply(reply: &Value) -> Result<(f64, f64), String> {
    let get = |k: &str| {
        reply
            .get(k)
            .and_then(Value::as_f64)
            .ok_or_else(|| format!("reply lacks numeric `{k}`: {reply}"))
    };
    Ok((get("logit_pos")?, get("logit_neg")?))
}

/// Reads the `+`/`-` alternatives of the first generated token. A label
/// missing from the top list is assigned the smallest listed log-probability.
pub fn parse_logprobs_reply(reply: &Value) -> Result<(f64, f64), String> {
    let top = reply
        .pointer("/choices/0/logprobs/top_logprobs/0")
        .and_then(Value::as_object)
        .ok_or_else(|| format!("reply lacks choices[0].logprobs.top_logprobs[0]: {reply}"))?;
    let mut pos = None;
    let mut neg = None;
    let mut floor = f64::INFINITY;
    for (token, lp) in top {
        let Some(lp) = lp.as_f64() else { continue };
        floor = floor.min(lp);
        match token.trim() {
            "+" => pos = Some(pos.map_or(lp, |p: f64| p.max(lp))),
            "-" => neg = Some(neg.map_or(lp, |n: f64| n.max(lp))),
            _ => {}
        }
    }
    match (pos, neg) {
        (None, None) => Err("neither `+` nor `-` among the top alternatives".into()),
        (p, n) => Ok((p.unwrap_or(floor), n.unwrap_or(floor))),
    }
}

impl StepScorer for RemotePrmScorer {
    fn name(&self) -> &str {
        "prm"
    }

    fn score(&self, req: &ScoreRequest<'_>) -> Result<StepScore, ScorerError> {
        let (pos, neg) = match self.protocol {
            PrmProtocol::Logits => {
                let body = json!({
                    "query": req.query.text,
                    "tools": req.query.universe.to_json(),
                    "prefix": req.prefix,
                    "step": req.step,
                    "kind": req.kind.as_str(),
                });
                let reply = self.post(req, body)?;
                parse_logits_reply(&reply)
            }
            PrmProtocol::CompletionLogprobs => {
                let prompt = self.template.render(&[
                    ("tools", &tools_listing(&req.query.universe)),
                    ("query", &req.query.text),
                    ("prefix", req.prefix),
                    ("kind", req.kind.as_str()),
                    ("step", req.step),
                ]);
                let body = json!({
                    "prompt": prompt,
                    "max_tokens": 1,
                    "temperature": 0.0,
                    "logprobs": self.top_logprobs,
                });
                let reply = self.post(req, body)?;
                parse_logprobs_reply(&reply)
            }
        }
        .map_err(|m| ScorerError::Protocol(format!("{}: {m}", Self::context(req))))?;
        StepScore::from_logits(pos, neg, ScoreSource::Prm)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn closed_forms() {
        assert_eq!(logits_to_prob(0.0, 0.0).unwrap(), 0.5);
        assert!((logits_to_prob(3f64.ln(), 0.0).unwrap() - 0.75).abs() < 1e-12);
        assert!((logits_to_prob(1000.0, -1000.0).unwrap() - 1.0).abs() < 1e-12);
        assert_eq!(logits_to_prob(-1e4, 1e4).unwrap(), 0.0);
        assert!(matches!(
            logits_to_prob(f64::NAN, 0.0),
            Err(ScorerError::NonFinite(..))
        ));
        assert!(logits_to_prob(f64::INFINITY, 0.0).is_err());
    }

    #[test]
    fn verdict_logits_reproduce_prob() {
        for r in [Reward::Pos, Reward::Neg] {
            let s = StepScore::verdict(r, ScoreSource::Oracle);
            assert!((logits_to_prob(s.logit_pos, s.logit_neg).unwrap() - s.prob).abs() < 1e-9);
        }
        let s = StepScore::from_prob(0.8, ScoreSource::Constant);
        assert!((logits_to_prob(s.logit_pos, s.logit_neg).unwrap() - 0.8).abs() < 1e-12);
    }

    #[test]
    fn reply_parsing() {
        assert_eq!(
            parse_logits_reply(&json!({"logit_pos": 2.0, "logit_neg": 0})),
            Ok((2.0, 0.0))
        );
        assert!(parse_logits_reply(&json!({"logit_pos": 2.0})).is_err());
        let reply = json!({"choices": [{"logprobs": {"top_logprobs": [{" +": -0.1, "-": -2.5, "x": -4.0}]}}]});
        assert_eq!(parse_logprobs_reply(&reply), Ok((-0.1, -2.5)));
        let reply = json!({"choices": [{"logprobs": {"top_logprobs": [{"+": -0.01, "x": -6.0}]}}]});
        assert_eq!(parse_logprobs_reply(&reply), Ok((-0.01, -6.0)));
        assert!(parse_logprobs_reply(&json!({"choices": []})).is_err());
    }
}
