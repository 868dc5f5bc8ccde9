//! Incremental step machine over serialized function-call text.
//!
//! The accepted grammar is a JSON array of call objects, each with exactly
//! the keys `"name"` then `"arguments"`:
//!
//! ```text
//! [{"name":"get_weather","arguments":{"city":"Paris","unit":"c"}}]
//! ```
//!
//! Text is consumed one char at a time, so feeding any partition of a text
//! yields the same events. A [`StepEvent`] fires at each fine-grained
//! decision boundary:
//!
//! | event         | trigger                                    | edge    |
//! |---------------|--------------------------------------------|---------|
//! | `FuncName`    | `,` after the `"name"` value                | S1 → S2 |
//! | `ArgValue`    | end of one `key: value` pair in arguments  | S3 → S2 |
//! | `ParamFinish` | `}` closing `"arguments"`                  | S2 → S3 |
//! | `FuncFinish`  | `}` closing the call object                | S3 → S1 |
//! | `TotalFinish` | `]` closing the top-level array            | S1 → S4 |
//!
//! Internally the machine also moves S0 → S1 on `[` and S2 → S3 when a
//! parameter key is read. Event spans are contiguous: each starts where the
//! previous one ended, so whitespace and separators belong to the following
//! event. Numbers are not self-delimiting; their `ArgValue` fires on the
//! first char after the number while the span still ends at the last digit.

use std::fmt;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::StepError;
use crate::schema::{ArgAssignment, CallSequence, FunctionCall, Query};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum StepKind {
    #[serde(rename = "FUNC_NAME")]
    FuncName,
    #[serde(rename = "ARG_VALUE")]
    ArgValue,
    #[serde(rename = "PARAM_FINISH")]
    ParamFinish,
    #[serde(rename = "FUNC_FINISH")]
    FuncFinish,
    #[serde(rename = "TOTAL_FINISH")]
    TotalFinish,
}

impl StepKind {
    pub const ALL: [StepKind; 5] = [
        StepKind::FuncName,
        StepKind::ArgValue,
        StepKind::ParamFinish,
        StepKind::FuncFinish,
        StepKind::TotalFinish,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            StepKind::FuncName => "FUNC_NAME",
            StepKind::ArgValue => "ARG_VALUE",
            StepKind::ParamFinish => "PARAM_FINISH",
            StepKind::FuncFinish => "FUNC_FINISH",
            StepKind::TotalFinish => "TOTAL_FINISH",
        }
    }

    /// The label symbol, e.g. `<FUNC_NAME>`.
    pub fn symbol(&self) -> String {
        format!("<{}>", self.as_str())
    }

    /// FuncName and ArgValue are choices; the others close a structure.
    pub fn is_decision(&self) -> bool {
        matches!(self, StepKind::FuncName | StepKind::ArgValue)
    }
}

impl fmt::Display for StepKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for StepKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let bare = s.trim_start_matches('<').trim_end_matches('>');
        StepKind::ALL
            .into_iter()
            .find(|k| k.as_str() == bare)
            .ok_or_else(|| format!("unknown step kind `{s}`"))
    }
}

/// The five decision-process states.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum StateId {
    #[serde(rename = "S0")]
    S0Initial,
    #[serde(rename = "S1")]
    S1SelectFuncName,
    #[serde(rename = "S2")]
    S2SelectParamName,
    #[serde(rename = "S3")]
    S3FillParamValue,
    #[serde(rename = "S4")]
    S4Terminated,
}

/// Permitted transitions of the state graph.
pub const STATE_EDGES: [(StateId, StateId); 7] = [
    (StateId::S0Initial, StateId::S1SelectFuncName),
    (StateId::S1SelectFuncName, StateId::S2SelectParamName),
    (StateId::S1SelectFuncName, StateId::S4Terminated),
    (StateId::S2SelectParamName, StateId::S3FillParamValue),
    (StateId::S3FillParamValue, StateId::S2SelectParamName),
    (StateId::S3FillParamValue, StateId::S1SelectFuncName),
    (StateId::S3FillParamValue, StateId::S4Terminated),
];

pub fn is_state_edge(from: StateId, to: StateId) -> bool {
    STATE_EDGES.contains(&(from, to))
}

/// Half-open `[start, end)` range of char offsets.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct CharSpan {
    pub start: usize,
    pub end: usize,
}

impl CharSpan {
    pub fn new(start: usize, end: usize) -> Self {
        Self { start, end }
    }

    pub fn len(&self) -> usize {
        self.end - self.start
    }

    pub fn is_empty(&self) -> bool {
        self.end == self.start
    }

    /// The spanned substring of `text`.
    pub fn slice<'a>(&self, text: &'a str) -> &'a str {
        let start = byte_offset(text, self.start);
        let end = byte_offset(text, self.end);
        &text[start..end]
    }
}

impl Serialize for CharSpan {
    fn serialize<S: serde::Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        [self.start, self.end].serialize(serializer)
    }
}

impl<'de> Deserialize<'de> for CharSpan {
    fn deserialize<D: serde::Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let [start, end] = <[usize; 2]>::deserialize(deserializer)?;
        if end < start {
            return Err(serde::de::Error::custom(format!(
                "span end {end} precedes start {start}"
            )));
        }
        Ok(CharSpan { start, end })
    }
}

/// Byte offset of the `chars`-th char (or the text length past the end).
pub fn byte_offset(text: &str, chars: usize) -> usize {
    text.char_indices()
        .nth(chars)
        .map(|(b, _)| b)
        .unwrap_or(text.len())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StepEvent {
    pub kind: StepKind,
    pub call_index: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub arg_index: Option<usize>,
    pub span: CharSpan,
    pub state_before: StateId,
    pub state_after: StateId,
}

/// Grammar position, finer than [`StateId`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Phase {
    Start,
    ListOpen,
    ListNext,
    CallOpen,
    NameKey,
    NameColon,
    NameValue,
    NameComma,
    ArgsKey,
    ArgsColon,
    ArgsOpen,
    ArgsFirst,
    ArgKey,
    ArgColon,
    ArgValue,
    ArgsNext,
    CallClose,
    Done,
}

const MAX_DEPTH: usize = 128;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum NumState {
    Minus,
    Zero,
    Int,
    FracStart,
    Frac,
    ExpStart,
    ExpSign,
    Exp,
}

impl NumState {
    fn terminal(self) -> bool {
        matches!(
            self,
            NumState::Zero | NumState::Int | NumState::Frac | NumState::Exp
        )
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Scalar {
    Str { escape: u8, hex_left: u8 },
    Num(NumState),
    Lit { word: &'static str, pos: usize },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum ObjExpect {
    KeyOrEnd,
    Key,
    Colon,
    Value,
    CommaOrEnd,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum ArrExpect {
    ValueOrEnd,
    Value,
    CommaOrEnd,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Frame {
    Obj(ObjExpect),
    Arr(ArrExpect),
}

enum LexStep {
    Continue,
    /// Value complete; the char was part of it.
    Complete,
    /// Value complete; the char was not part of it and must be reprocessed.
    CompleteBefore,
}

/// Depth-tracking lexer for one JSON value.
#[derive(Clone, Debug, PartialEq, Eq)]
struct ValueLexer {
    stack: Vec<Frame>,
    scalar: Option<Scalar>,
}

impl ValueLexer {
    fn new() -> Self {
        Self {
            stack: Vec::new(),
            scalar: None,
        }
    }

    fn pending_number(&self) -> bool {
        self.stack.is_empty() && matches!(self.scalar, Some(Scalar::Num(s)) if s.terminal())
    }

    fn feed(&mut self, c: char) -> Result<LexStep, &'static str> {
        if let Some(scalar) = self.scalar {
            match scalar {
                Scalar::Str { escape, hex_left } => {
                    let next = if hex_left > 0 {
                        if !c.is_ascii_hexdigit() {
                            return Err("hex digit");
                        }
                        Scalar::Str {
                            escape: 0,
                            hex_left: hex_left - 1,
                        }
                    } else if escape == 1 {
                        match c {
                            '"' | '\\' | '/' | 'b' | 'f' | 'n' | 'r' | 't' => Scalar::Str {
                                escape: 0,
                                hex_left: 0,
                            },
                            'u' => Scalar::Str {
                                escape: 0,
                                hex_left: 4,
                            },
                            _ => return Err("escape character"),
                        }
                    } else {
                        match c {
                            '"' => {
                                self.scalar = None;
                                return Ok(self.value_done());
                            }
                            '\\' => Scalar::Str {
                                escape: 1,
                                hex_left: 0,
                            },
                            c if (c as u32) < 0x20 => return Err("string character"),
                            _ => scalar,
                        }
                    };
                    self.scalar = Some(next);
                    return Ok(LexStep::Continue);
                }
                Scalar::Lit { word, pos } => {
                    if word.as_bytes()[pos] as char != c {
                        return Err("literal");
                    }
                    if pos + 1 == word.len() {
                        self.scalar = None;
                        return Ok(self.value_done());
                    }
                    self.scalar = Some(Scalar::Lit { word, pos: pos + 1 });
                    return Ok(LexStep::Continue);
                }
                Scalar::Num(state) => {
                    let next = match (state, c) {
                        (NumState::Minus, '0') => Some(NumState::Zero),
                        (NumState::Minus, '1'..='9') => Some(NumState::Int),
                        (NumState::Minus, _) => return Err("digit"),
                        (NumState::Zero, '.') | (NumState::Int, '.') => Some(NumState::FracStart),
                        (NumState::Int, '0'..='9') => Some(NumState::Int),
                        (NumState::Zero | NumState::Int | NumState::Frac, 'e' | 'E') => {
                            Some(NumState::ExpStart)
                        }
                        (NumState::FracStart, '0'..='9') | (NumState::Frac, '0'..='9') => {
                            Some(NumState::Frac)
                        }
                        (NumState::FracStart, _) => return Err("digit"),
                        (NumState::ExpStart, '+' | '-') => Some(NumState::ExpSign),
                        (NumState::ExpStart | NumState::ExpSign | NumState::Exp, '0'..='9') => {
                            Some(NumState::Exp)
                        }
                        (NumState::ExpStart | NumState::ExpSign, _) => return Err("digit"),
                        _ => None,
                    };
                    match next {
                        Some(s) => {
                            self.scalar = Some(Scalar::Num(s));
                            return Ok(LexStep::Continue);
                        }
                        None => {
                            self.scalar = None;
                            if let LexStep::Complete = self.value_done() {
                                return Ok(LexStep::CompleteBefore);
                            }
                            // fall through: reprocess `c` in the enclosing container
                        }
                    }
                }
            }
        }

        let ws = matches!(c, ' ' | '\t' | '\n' | '\r');
        match self.stack.last().copied() {
            None => self.start_value(c),
            Some(Frame::Obj(expect)) => match expect {
                _ if ws => Ok(LexStep::Continue),
                ObjExpect::KeyOrEnd | ObjExpect::Key if c == '"' => {
                    self.scalar = Some(Scalar::Str {
                        escape: 0,
                        hex_left: 0,
                    });
                    Ok(LexStep::Continue)
                }
                ObjExpect::KeyOrEnd if c == '}' => {
                    self.stack.pop();
                    Ok(self.value_done())
                }
                ObjExpect::KeyOrEnd | ObjExpect::Key => Err("object key"),
                ObjExpect::Colon if c == ':' => {
                    self.set_top(Frame::Obj(ObjExpect::Value));
                    Ok(LexStep::Continue)
                }
                ObjExpect::Colon => Err("':'"),
                ObjExpect::Value => self.start_value(c),
                ObjExpect::CommaOrEnd if c == ',' => {
                    self.set_top(Frame::Obj(ObjExpect::Key));
                    Ok(LexStep::Continue)
                }
                ObjExpect::CommaOrEnd if c == '}' => {
                    self.stack.pop();
                    Ok(self.value_done())
                }
                ObjExpect::CommaOrEnd => Err("',' or '}'"),
            },
            Some(Frame::Arr(expect)) => match expect {
                _ if ws => Ok(LexStep::Continue),
                ArrExpect::ValueOrEnd if c == ']' => {
                    self.stack.pop();
                    Ok(self.value_done())
                }
                ArrExpect::ValueOrEnd | ArrExpect::Value => self.start_value(c),
                ArrExpect::CommaOrEnd if c == ',' => {
                    self.set_top(Frame::Arr(ArrExpect::Value));
                    Ok(LexStep::Continue)
                }
                ArrExpect::CommaOrEnd if c == ']' => {
                    self.stack.pop();
                    Ok(self.value_done())
                }
                ArrExpect::CommaOrEnd => Err("',' or ']'"),
            },
        }
    }

    fn start_value(&mut self, c: char) -> Result<LexStep, &'static str> {
        let scalar = match c {
            '"' => Scalar::Str {
                escape: 0,
                hex_left: 0,
            },
            '-' => Scalar::Num(NumState::Minus),
            '0' => Scalar::Num(NumState::Zero),
            '1'..='9' => Scalar::Num(NumState::Int),
            't' => Scalar::Lit {
                word: "true",
                pos: 1,
            },
            'f' => Scalar::Lit {
                word: "false",
                pos: 1,
            },
            'n' => Scalar::Lit {
                word: "null",
                pos: 1,
            },
            '{' | '[' => {
                if self.stack.len() >= MAX_DEPTH {
                    return Err("shallower nesting");
                }
                self.stack.push(if c == '{' {
                    Frame::Obj(ObjExpect::KeyOrEnd)
                } else {
                    Frame::Arr(ArrExpect::ValueOrEnd)
                });
                return Ok(LexStep::Continue);
            }
            _ => return Err("JSON value"),
        };
        self.scalar = Some(scalar);
        Ok(LexStep::Continue)
    }

    fn set_top(&mut self, frame: Frame) {
        if let Some(top) = self.stack.last_mut() {
            *top = frame;
        }
    }

    /// A scalar or container just finished.
    fn value_done(&mut self) -> LexStep {
        match self.stack.last().copied() {
            None => LexStep::Complete,
            Some(Frame::Obj(ObjExpect::KeyOrEnd | ObjExpect::Key)) => {
                self.set_top(Frame::Obj(ObjExpect::Colon));
                LexStep::Continue
            }
            Some(Frame::Obj(_)) => {
                self.set_top(Frame::Obj(ObjExpect::CommaOrEnd));
                LexStep::Continue
            }
            Some(Frame::Arr(_)) => {
                self.set_top(Frame::Arr(ArrExpect::CommaOrEnd));
                LexStep::Continue
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub struct StepperOptions {
    /// Also accept `"parameters"` in place of the `"arguments"` key.
    pub lenient_args_key: bool,
}

/// Machine state after consuming a prefix. A plain value: cloning it forks
/// the parse.
#[derive(Clone, Debug, PartialEq)]
pub struct MachineState {
    pub state_id: StateId,
    /// Index of the call currently being built (= completed calls).
    pub call_index: usize,
    /// Completed arguments of the current call.
    pub arg_index: usize,
    /// Chars consumed so far.
    pub consumed: usize,
    /// Calls parsed so far; the last one may still be open.
    pub partial: CallSequence,
    phase: Phase,
    lexer: Option<ValueLexer>,
    token: String,
    pending_key: Option<String>,
    span_start: usize,
    options: StepperOptions,
}

impl Default for MachineState {
    fn default() -> Self {
        Self::new(StepperOptions::default())
    }
}

/// Fresh machine for a query. The grammar does not depend on the query's
/// tools or ground truths.
pub fn init_machine(_q: &Query) -> MachineState {
    MachineState::default()
}

/// Functional form of [`MachineState::feed`].
pub fn advance(
    m: &MachineState,
    text_delta: &str,
) -> Result<(MachineState, Vec<StepEvent>), StepError> {
    let mut next = m.clone();
    let events = next.feed(text_delta)?;
    Ok((next, events))
}

/// Segments a complete or partial response. Errors carry the char position
/// of the offending input, independent of how the text is chunked.
pub fn segment(response_text: &str, _q: &Query) -> Result<Vec<StepEvent>, StepError> {
    let mut m = MachineState::default();
    m.feed(response_text)
}

/// Result of segmenting text that may be malformed.
#[derive(Clone, Debug)]
pub struct SegmentOutcome {
    pub events: Vec<StepEvent>,
    pub machine: MachineState,
    pub error: Option<StepError>,
}

/// Segments `text`, keeping every event emitted before the first error.
pub fn segment_lenient(text: &str, options: StepperOptions) -> SegmentOutcome {
    let mut machine = MachineState::new(options);
    let mut events = Vec::new();
    let mut error = None;
    for c in text.chars() {
        if let Err(e) = machine.feed_char(c, &mut events) {
            error = Some(e);
            break;
        }
    }
    SegmentOutcome {
        events,
        machine,
        error,
    }
}

/// Parses a complete response into a call sequence.
pub fn parse_response(text: &str) -> Result<CallSequence, StepError> {
    let mut m = MachineState::default();
    m.feed(text)?;
    if m.state_id != StateId::S4Terminated {
        return Err(StepError::Incomplete {
            consumed: m.consumed,
        });
    }
    Ok(m.partial)
}

impl MachineState {
    pub fn new(options: StepperOptions) -> Self {
        Self {
            state_id: StateId::S0Initial,
            call_index: 0,
            arg_index: 0,
            consumed: 0,
            partial: CallSequence::empty(),
            phase: Phase::Start,
            lexer: None,
            token: String::new(),
            pending_key: None,
            span_start: 0,
            options,
        }
    }

    pub fn phase(&self) -> Phase {
        self.phase
    }

    pub fn is_terminated(&self) -> bool {
        self.state_id == StateId::S4Terminated
    }

    /// Char offset where the next event's span will begin.
    pub fn span_start(&self) -> usize {
        self.span_start
    }

    /// Delimiters at which the next step boundary occurs; usable as
    /// generation stop sequences.
    pub fn expected_stops(&self) -> Vec<&'static str> {
        match self.phase {
            Phase::Start
            | Phase::ListOpen
            | Phase::ListNext
            | Phase::CallOpen
            | Phase::NameKey
            | Phase::NameColon
            | Phase::NameValue
            | Phase::NameComma => vec!["\",", "]"],
            Phase::ArgsKey
            | Phase::ArgsColon
            | Phase::ArgsOpen
            | Phase::ArgsFirst
            | Phase::ArgKey
            | Phase::ArgColon
            | Phase::ArgValue
            | Phase::ArgsNext => vec![",", "}"],
            Phase::CallClose => vec!["}"],
            Phase::Done => Vec::new(),
        }
    }

    /// Name of the call currently being built, once its `FuncName` fired.
    pub fn current_call(&self) -> Option<&FunctionCall> {
        if self.partial.calls.len() > self.call_index {
            self.partial.calls.last()
        } else {
            None
        }
    }

    /// True right after a `,` inside `"arguments"`, before the next key.
    pub fn awaiting_arg_key_after_comma(&self) -> bool {
        self.phase == Phase::ArgKey
    }

    /// Consumes `delta`, returning the events it completes.
    ///
    /// On error the machine is left mid-token and should be discarded.
    pub fn feed(&mut self, delta: &str) -> Result<Vec<StepEvent>, StepError> {
        let mut events = Vec::new();
        for c in delta.chars() {
            self.feed_char(c, &mut events)?;
        }
        Ok(events)
    }

    /// Treats end of input as a delimiter: completes a trailing top-level
    /// argument number (`"n":5`) whose `ArgValue` would otherwise wait for
    /// the next char. No-op in every other position.
    pub fn flush_end_of_input(&mut self) -> Result<Vec<StepEvent>, StepError> {
        let pending = self.phase == Phase::ArgValue
            && self.lexer.as_ref().is_some_and(ValueLexer::pending_number);
        if !pending {
            return Ok(Vec::new());
        }
        self.lexer = None;
        let end = self.consumed;
        let mut events = Vec::new();
        self.finish_arg_value(end, &mut events)?;
        Ok(events)
    }

    fn syntax(&self, expected: &str) -> StepError {
        StepError::Syntax {
            position: self.consumed,
            expected: expected.to_string(),
        }
    }

    fn emit(&mut self, kind: StepKind, end: usize, to: StateId, events: &mut Vec<StepEvent>) {
        let from = self.state_id;
        events.push(StepEvent {
            kind,
            call_index: self.call_index,
            arg_index: (kind == StepKind::ArgValue).then_some(self.arg_index),
            span: CharSpan::new(self.span_start, end),
            state_before: from,
            state_after: to,
        });
        self.state_id = to;
        self.span_start = end;
    }

    pub(crate) fn feed_char(
        &mut self,
        c: char,
        events: &mut Vec<StepEvent>,
    ) -> Result<(), StepError> {
        self.step_char(c, events)?;
        self.consumed += 1;
        Ok(())
    }

    fn step_char(&mut self, c: char, events: &mut Vec<StepEvent>) -> Result<(), StepError> {
        let ws = matches!(c, ' ' | '\t' | '\n' | '\r');

        // Token lexing (name value, keys, argument values).
        if let Some(lexer) = self.lexer.as_mut() {
            let step = lexer.feed(c).map_err(|e| StepError::Syntax {
                position: self.consumed,
                expected: e.to_string(),
            })?;
            match step {
                LexStep::Continue => {
                    self.token.push(c);
                    return Ok(());
                }
                LexStep::Complete => {
                    self.token.push(c);
                    self.lexer = None;
                    return self.token_complete(self.consumed + 1, events);
                }
                LexStep::CompleteBefore => {
                    self.lexer = None;
                    self.token_complete(self.consumed, events)?;
                    // `c` still needs to be consumed by the new phase.
                }
            }
        }

        match self.phase {
            _ if ws => Ok(()),
            Phase::Start => match c {
                '[' => {
                    self.state_id = StateId::S1SelectFuncName;
                    self.phase = Phase::ListOpen;
                    Ok(())
                }
                _ => Err(self.syntax("'['")),
            },
            Phase::ListOpen => match c {
                ']' => self.close_list(events),
                '{' => {
                    self.phase = Phase::NameKey;
                    Ok(())
                }
                _ => Err(self.syntax("'{' or ']'")),
            },
            Phase::ListNext => match c {
                ']' => self.close_list(events),
                ',' => {
                    self.phase = Phase::CallOpen;
                    Ok(())
                }
                _ => Err(self.syntax("',' or ']'")),
            },
            Phase::CallOpen => match c {
                '{' => {
                    self.phase = Phase::NameKey;
                    Ok(())
                }
                _ => Err(self.syntax("'{'")),
            },
            Phase::NameKey
            | Phase::NameValue
            | Phase::ArgsKey
            | Phase::ArgsFirst
            | Phase::ArgKey
                if c == '"' =>
            {
                self.start_token(c)
            }
            Phase::NameKey => Err(self.syntax("\"name\" key")),
            Phase::NameValue => Err(self.syntax("function name string")),
            Phase::ArgsKey => Err(self.syntax("\"arguments\" key")),
            Phase::ArgKey => Err(self.syntax("parameter name")),
            Phase::ArgsFirst => match c {
                '}' => self.close_args(events),
                _ => Err(self.syntax("parameter name or '}'")),
            },
            Phase::NameColon | Phase::ArgsColon | Phase::ArgColon => {
                if c != ':' {
                    return Err(self.syntax("':'"));
                }
                self.phase = match self.phase {
                    Phase::NameColon => Phase::NameValue,
                    Phase::ArgsColon => Phase::ArgsOpen,
                    _ => Phase::ArgValue,
                };
                Ok(())
            }
            Phase::NameComma => match c {
                ',' => {
                    let name = std::mem::take(&mut self.token);
                    self.partial.calls.push(FunctionCall::new(name));
                    self.phase = Phase::ArgsKey;
                    self.emit(
                        StepKind::FuncName,
                        self.consumed + 1,
                        StateId::S2SelectParamName,
                        events,
                    );
                    Ok(())
                }
                _ => Err(self.syntax("',' before \"arguments\"")),
            },
            Phase::ArgsOpen => match c {
                '{' => {
                    self.phase = Phase::ArgsFirst;
                    Ok(())
                }
                _ => Err(self.syntax("'{'")),
            },
            Phase::ArgValue => self.start_token(c),
            Phase::ArgsNext => match c {
                ',' => {
                    self.phase = Phase::ArgKey;
                    Ok(())
                }
                '}' => self.close_args(events),
                _ => Err(self.syntax("',' or '}'")),
            },
            Phase::CallClose => match c {
                '}' => {
                    self.phase = Phase::ListNext;
                    self.emit(
                        StepKind::FuncFinish,
                        self.consumed + 1,
                        StateId::S1SelectFuncName,
                        events,
                    );
                    self.call_index += 1;
                    self.arg_index = 0;
                    Ok(())
                }
                _ => Err(self.syntax("'}' closing the call")),
            },
            Phase::Done => Err(StepError::Terminated {
                position: self.consumed,
            }),
        }
    }

    fn start_token(&mut self, c: char) -> Result<(), StepError> {
        let mut lexer = ValueLexer::new();
        lexer.feed(c).map_err(|e| StepError::Syntax {
            position: self.consumed,
            expected: e.to_string(),
        })?;
        self.token.clear();
        self.token.push(c);
        self.lexer = Some(lexer);
        Ok(())
    }

    fn close_list(&mut self, events: &mut Vec<StepEvent>) -> Result<(), StepError> {
        self.phase = Phase::Done;
        self.emit(
            StepKind::TotalFinish,
            self.consumed + 1,
            StateId::S4Terminated,
            events,
        );
        Ok(())
    }

    fn close_args(&mut self, events: &mut Vec<StepEvent>) -> Result<(), StepError> {
        self.phase = Phase::CallClose;
        self.emit(
            StepKind::ParamFinish,
            self.consumed + 1,
            StateId::S3FillParamValue,
            events,
        );
        Ok(())
    }

    fn decode_string(&self) -> Result<String, StepError> {
        serde_json::from_str::<String>(&self.token).map_err(|_| StepError::Syntax {
            position: self.consumed,
            expected: "valid string".into(),
        })
    }

    /// A lexed token ended at char offset `end`.
    fn token_complete(&mut self, end: usize, events: &mut Vec<StepEvent>) -> Result<(), StepError> {
        match self.phase {
            Phase::NameKey => {
                if self.decode_string()? != "name" {
                    return Err(self.syntax("\"name\" key"));
                }
                self.phase = Phase::NameColon;
            }
            Phase::NameValue => {
                self.token = self.decode_string()?;
                self.phase = Phase::NameComma;
            }
            Phase::ArgsKey => {
                let key = self.decode_string()?;
                let ok =
                    key == "arguments" || (self.options.lenient_args_key && key == "parameters");
                if !ok {
                    return Err(self.syntax("\"arguments\" key"));
                }
                self.phase = Phase::ArgsColon;
            }
            Phase::ArgsFirst | Phase::ArgKey => {
                let key = self.decode_string()?;
                let dup = self
                    .partial
                    .calls
                    .last()
                    .is_some_and(|call| call.args.iter().any(|a| a.name == key));
                if dup {
                    return Err(StepError::DuplicateKey {
                        position: self.consumed,
                        key,
                    });
                }
                self.pending_key = Some(key);
                self.state_id = StateId::S3FillParamValue;
                self.phase = Phase::ArgColon;
            }
            Phase::ArgValue => self.finish_arg_value(end, events)?,
            _ => unreachable!("no token is lexed in phase {:?}", self.phase),
        }
        Ok(())
    }

    fn finish_arg_value(
        &mut self,
        end: usize,
        events: &mut Vec<StepEvent>,
    ) -> Result<(), StepError> {
        let value: Value = serde_json::from_str(&self.token).map_err(|e| StepError::Syntax {
            position: end,
            expected: format!("valid JSON value ({e})"),
        })?;
        let key = self.pending_key.take().unwrap_or_default();
        if let Some(call) = self.partial.calls.last_mut() {
            call.args.push(ArgAssignment::new(key, value));
        }
        self.token.clear();
        self.phase = Phase::ArgsNext;
        self.emit(StepKind::ArgValue, end, StateId::S2SelectParamName, events);
        self.arg_index += 1;
        Ok(())
    }
}

/// Events expected for a well-formed response with the given per-call
/// argument counts: three per call, one per argument, one to close.
pub fn expected_event_count(arg_counts: &[usize]) -> usize {
    arg_counts.len() * 3 + arg_counts.iter().sum::<usize>() + 1
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    fn kinds(events: &[StepEvent]) -> Vec<StepKind> {
        events.iter().map(|e| e.kind).collect()
    }

    fn seg(text: &str) -> Result<Vec<StepEvent>, StepError> {
        MachineState::default().feed(text)
    }

    #[test]
    fn init_state() {
        let m = MachineState::default();
        assert_eq!(m.state_id, StateId::S0Initial);
        assert_eq!(m.call_index, 0);
        assert_eq!(m.consumed, 0);
        assert_eq!(m.expected_stops(), vec!["\",", "]"]);
    }

    #[test]
    fn func_name_delta() {
        let (m, ev) = advance(&MachineState::default(), r#"[{"name":"get_weather","#).unwrap();
        assert_eq!(kinds(&ev), [StepKind::FuncName]);
        assert_eq!(ev[0].span, CharSpan::new(0, 23));
        assert_eq!(ev[0].state_before, StateId::S1SelectFuncName);
        assert_eq!(m.state_id, StateId::S2SelectParamName);
        assert_eq!(m.current_call().unwrap().name, "get_weather");
    }

    #[test]
    fn zero_arg_call_closes() {
        let (m, _) = advance(&MachineState::default(), r#"[{"name":"now","#).unwrap();
        let (m, ev) = advance(&m, r#""arguments":{}}"#).unwrap();
        assert_eq!(kinds(&ev), [StepKind::ParamFinish, StepKind::FuncFinish]);
        assert_eq!(m.state_id, StateId::S1SelectFuncName);
    }

    #[test]
    fn empty_list() {
        let (m, ev) = advance(&MachineState::default(), "[]").unwrap();
        assert_eq!(kinds(&ev), [StepKind::TotalFinish]);
        assert_eq!(ev[0].state_before, StateId::S1SelectFuncName);
        assert_eq!(m.state_id, StateId::S4Terminated);
    }

    #[test]
    fn two_call_kind_sequence() {
        let text = r#"[{"name":"a","arguments":{"x":1}},{"name":"b","arguments":{"y":"s","z":[1,{"k":null}]}}]"#;
        use StepKind::*;
        assert_eq!(
            kinds(&seg(text).unwrap()),
            [
                FuncName,
                ArgValue,
                ParamFinish,
                FuncFinish,
                FuncName,
                ArgValue,
                ArgValue,
                ParamFinish,
                FuncFinish,
                TotalFinish
            ]
        );
    }

    #[test]
    fn number_span_ends_at_last_digit() {
        let text = r#"[{"name":"a","arguments":{"x":12 ,"y":-1.5e3}}]"#;
        let ev = seg(text).unwrap();
        assert_eq!(ev[1].span.slice(text), r#""arguments":{"x":12"#);
        assert_eq!(ev[2].span.slice(text), r#" ,"y":-1.5e3"#);
        assert_eq!(ev[3].span.slice(text), "}");
        let parsed = parse_response(text).unwrap();
        assert_eq!(parsed.calls[0].arg("y"), Some(&json!(-1500.0)));
    }

    #[test]
    fn pending_number_flushes_at_end_of_input() {
        let mut m = MachineState::default();
        assert_eq!(
            kinds(&m.feed(r#"[{"name":"a","#).unwrap()),
            [StepKind::FuncName]
        );
        assert!(m.feed(r#""arguments":{"x":7"#).unwrap().is_empty());
        let ev = m.flush_end_of_input().unwrap();
        assert_eq!(kinds(&ev), [StepKind::ArgValue]);
        assert_eq!(ev[0].span.end, m.consumed);
        assert!(m.clone().flush_end_of_input().unwrap().is_empty());
    }

    #[test]
    fn truncated_has_no_total_finish() {
        let ev = seg(r#"[{"name":"a","arguments":{}}"#).unwrap();
        assert!(!kinds(&ev).contains(&StepKind::TotalFinish));
        assert!(parse_response(r#"[{"name":"a","arguments":{}}"#).is_err());
    }

    #[test]
    fn syntax_errors_carry_position() {
        assert_eq!(
            seg("{}").unwrap_err(),
            StepError::Syntax {
                position: 0,
                expected: "'['".into()
            }
        );
        let err = seg(r#"[{"arguments":{}}]"#).unwrap_err();
        assert_eq!(err.position(), 12);
        let err = seg(r#"[{"name":"a","arguments":{"x":tru}}]"#).unwrap_err();
        assert!(matches!(err, StepError::Syntax { position: 33, .. }));
    }

    #[test]
    fn duplicate_key_rejected() {
        let err = seg(r#"[{"name":"a","arguments":{"x":1,"x":2}}]"#).unwrap_err();
        assert!(matches!(err, StepError::DuplicateKey { ref key, .. } if key == "x"));
    }

    #[test]
    fn trailing_whitespace_allowed_text_is_not() {
        let mut m = MachineState::default();
        m.feed("[]").unwrap();
        assert!(m.feed(" \n").unwrap().is_empty());
        assert!(matches!(
            m.feed("x"),
            Err(StepError::Terminated { position: 4 })
        ));
    }

    #[test]
    fn lenient_args_key() {
        let text = r#"[{"name":"a","parameters":{}}]"#;
        assert!(seg(text).is_err());
        let out = segment_lenient(
            text,
            StepperOptions {
                lenient_args_key: true,
            },
        );
        assert!(out.error.is_none());
        assert_eq!(out.events.len(), 4);
    }

    #[test]
    fn escapes_in_names_and_values() {
        let text = r#"[{"name":"f\"1","arguments":{"q":"a,b}\"]"}}]"#;
        let seq = parse_response(text).unwrap();
        assert_eq!(seq.calls[0].name, "f\"1");
        assert_eq!(seq.calls[0].arg("q"), Some(&json!("a,b}\"]")));
    }

    #[test]
    fn multibyte_chars_counted_as_chars() {
        let text = r#"[{"name":"météo","arguments":{"ville":"Zürich"}}]"#;
        let ev = seg(text).unwrap();
        assert_eq!(ev.last().unwrap().span.end, text.chars().count());
        assert_eq!(ev[0].span.slice(text), r#"[{"name":"météo","#);
    }

    #[test]
    fn stops_follow_phase() {
        let (m, _) = advance(&MachineState::default(), "[").unwrap();
        assert_eq!(m.expected_stops(), vec!["\",", "]"]);
        let (m, _) = advance(&m, r#"{"name":"f","#).unwrap();
        assert_eq!(m.expected_stops(), vec![",", "}"]);
        let (m, _) = advance(&m, r#""arguments":{}"#).unwrap();
        assert_eq!(m.expected_stops(), vec!["}"]);
    }

    #[test]
    fn step_kind_strings() {
        for k in StepKind::ALL {
            assert_eq!(k.as_str().parse::<StepKind>().unwrap(), k);
            assert_eq!(k.symbol().parse::<StepKind>().unwrap(), k);
            assert_eq!(
                serde_json::to_string(&k).unwrap(),
                format!("\"{}\"", k.as_str())
            );
        }
    }
}
