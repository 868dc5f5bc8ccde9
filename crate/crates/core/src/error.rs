use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SchemaError {
    #[error("malformed record: {0}")]
    Shape(String),
    #[error("invariant violated: {0}")]
    Violation(String),
}

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("line {line}: parse error: {message}")]
    Parse { line: usize, message: String },
    #[error("line {line}: schema violation: {detail}")]
    SchemaViolation { line: usize, detail: String },
    #[error("invalid record: {0}")]
    InvalidRecord(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum MaskError {
    #[error("name `{0}` is not covered by the mask map")]
    UnknownName(String),
}

/// Failure while feeding text to the step machine. Positions are char
/// offsets into the full response text.
#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum StepError {
    #[error("syntax error at char {position}: expected {expected}")]
    Syntax { position: usize, expected: String },
    #[error("duplicate argument `{key}` at char {position}")]
    DuplicateKey { position: usize, key: String },
    #[error("text continues after the response terminated (char {position})")]
    Terminated { position: usize },
    #[error("response is incomplete after {consumed} chars")]
    Incomplete { consumed: usize },
}

impl StepError {
    pub fn position(&self) -> usize {
        match self {
            StepError::Syntax { position, .. }
            | StepError::DuplicateKey { position, .. }
            | StepError::Terminated { position } => *position,
            StepError::Incomplete { consumed } => *consumed,
        }
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ScorerError {
    #[error("non-finite logit input ({0}, {1})")]
    NonFinite(f64, f64),
    #[error("transport error: {0}")]
    Transport(String),
    #[error("protocol error: {0}")]
    Protocol(String),
    #[error("timeout: {0}")]
    Timeout(String),
    #[error("unknown query `{0}`")]
    UnknownQuery(String),
}

impl ScorerError {
    pub fn is_retryable(&self) -> bool {
        matches!(
            self,
            ScorerError::Transport(_) | ScorerError::Protocol(_) | ScorerError::Timeout(_)
        )
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PolicyError {
    #[error("backend error: {0}")]
    Backend(String),
    #[error("response did not terminate within {steps} steps")]
    NonTerminating { steps: usize },
    #[error("generated text is not a valid continuation: {0}")]
    Invalid(#[from] StepError),
}

#[derive(Debug, Error)]
pub enum SearchError {
    #[error("policy: {0}")]
    Policy(#[from] PolicyError),
    #[error("scorer: {0}")]
    Scorer(#[from] ScorerError),
    #[error("no usable candidate: every first-round expansion missed a step boundary")]
    NoCandidate,
    #[error("invalid search config: {0}")]
    Config(String),
}

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("no query `{0}` for a record or prediction")]
    UnknownQuery(String),
    #[error("query `{query_id}`, step {step}: {source}")]
    Scorer {
        query_id: String,
        step: usize,
        source: ScorerError,
    },
    #[error("search failed: {0}")]
    Search(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("csv: {0}")]
    Csv(String),
}
