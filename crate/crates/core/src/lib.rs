//! Fine-grained process supervision for structured function calls.
//!
//! The crate splits a serialized call list into decision steps
//! ([`stepper`]), labels rolled-out responses against ground truths
//! ([`annotator`]), scores steps with a process reward model or an oracle
//! ([`scorer`]), and uses those scores to steer step-level beam search
//! ([`search`]). [`policy`] provides the step generators, [`eval`] the
//! metrics and the exploration/retention sweep.

pub mod annotator;
pub mod corpus_io;
pub mod error;
pub mod eval;
pub mod hashing;
pub mod masking;
pub mod policy;
pub mod remote;
pub mod schema;
pub mod scorer;
pub mod search;
pub mod sim;
pub mod stepper;
pub mod templates;

pub use error::{
    CorpusError, EvalError, MaskError, PolicyError, SchemaError, ScorerError, SearchError,
    StepError,
};
pub use schema::{
    canonicalize, matches_ground_truth, validate_call_against_spec, ArgAssignment, CallSequence,
    Category, FunctionCall, FunctionSpec, ParamKind, ParamSpec, Query, ToolUniverse, Violation,
};
pub use stepper::{MachineState, StateId, StepEvent, StepKind};
