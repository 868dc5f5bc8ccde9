//! Data model for tools, queries and structured call sequences.
//!
//! Every other module works on these types. Equality of calls is defined by
//! [`canonicalize`]: argument keys sorted, numbers in shortest round-trip
//! form, no insignificant whitespace.

use std::collections::HashSet;
use std::fmt;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::error::SchemaError;

/// Value type of a declared parameter.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum ParamKind {
    String,
    Integer,
    Number,
    Boolean,
    Array,
    Object,
    Enum(Vec<String>),
}

impl ParamKind {
    /// Name used in the JSON-schema style `"type"` field.
    pub fn type_name(&self) -> &'static str {
        match self {
            ParamKind::String | ParamKind::Enum(_) => "string",
            ParamKind::Integer => "integer",
            ParamKind::Number => "number",
            ParamKind::Boolean => "boolean",
            ParamKind::Array => "array",
            ParamKind::Object => "object",
        }
    }

    /// Parses a type name. Accepts JSON-schema names and the short python-ish
    /// names found in xlam-style tool listings (`str`, `int`, `List[int]`, ...).
    pub fn from_type_name(raw: &str) -> Option<ParamKind> {
        let lowered = raw.trim().to_ascii_lowercase();
        let head = lowered.split(['[', '(', '<']).next().unwrap_or("").trim();
        let kind = match head {
            "string" | "str" | "text" => ParamKind::String,
            "integer" | "int" => ParamKind::Integer,
            "number" | "float" | "double" => ParamKind::Number,
            "boolean" | "bool" => ParamKind::Boolean,
            "array" | "list" | "tuple" | "set" => ParamKind::Array,
            "object" | "dict" | "mapping" => ParamKind::Object,
            _ => return None,
        };
        Some(kind)
    }

    /// Whether `value` conforms to this kind.
    pub fn accepts(&self, value: &Value) -> bool {
        match self {
            ParamKind::String => value.is_string(),
            ParamKind::Integer => match value {
                Value::Number(n) => {
                    n.is_i64() || n.is_u64() || n.as_f64().is_some_and(|f| f.fract() == 0.0)
                }
                _ => false,
            },
            ParamKind::Number => value.is_number(),
            ParamKind::Boolean => value.is_boolean(),
            ParamKind::Array => value.is_array(),
            ParamKind::Object => value.is_object(),
            ParamKind::Enum(values) => value
                .as_str()
                .is_some_and(|s| values.iter().any(|v| v == s)),
        }
    }
}

impl fmt::Display for ParamKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ParamKind::Enum(values) => write!(f, "enum({})", values.join("|")),
            other => f.write_str(other.type_name()),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamSpec {
    pub name: String,
    pub description: String,
    pub kind: ParamKind,
    pub required: bool,
    pub default: Option<Value>,
}

impl ParamSpec {
    pub fn new(name: impl Into<String>, kind: ParamKind, required: bool) -> Self {
        Self {
            name: name.into(),
            description: String::new(),
            kind,
            required,
            default: None,
        }
    }

    pub fn with_description(mut self, description: impl Into<String>) -> Self {
        self.description = description.into();
        self
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FunctionSpec {
    pub name: String,
    pub description: String,
    pub params: Vec<ParamSpec>,
}

impl FunctionSpec {
    pub fn new(name: impl Into<String>, description: impl Into<String>) -> Self {
        Self {
            name: name.into(),
            description: description.into(),
            params: Vec::new(),
        }
    }

    pub fn with_param(mut self, param: ParamSpec) -> Self {
        self.params.push(param);
        self
    }

    pub fn param(&self, name: &str) -> Option<&ParamSpec> {
        self.params.iter().find(|p| p.name == name)
    }
}

/// The set of candidate tools presented with a query.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ToolUniverse {
    pub functions: Vec<FunctionSpec>,
}

impl ToolUniverse {
    pub fn new(functions: Vec<FunctionSpec>) -> Self {
        Self { functions }
    }

    pub fn function(&self, name: &str) -> Option<&FunctionSpec> {
        self.functions.iter().find(|f| f.name == name)
    }

    /// Checks name uniqueness, enum non-emptiness and default conformance.
    pub fn validate(&self) -> Result<(), String> {
        let mut seen = HashSet::new();
        for func in &self.functions {
            if !seen.insert(func.name.as_str()) {
                return Err(format!("duplicate function name `{}`", func.name));
            }
            let mut params = HashSet::new();
            for p in &func.params {
                if !params.insert(p.name.as_str()) {
                    return Err(format!(
                        "duplicate parameter `{}` in function `{}`",
                        p.name, func.name
                    ));
                }
                if let ParamKind::Enum(values) = &p.kind {
                    if values.is_empty() {
                        return Err(format!(
                            "enum parameter `{}.{}` has no values",
                            func.name, p.name
                        ));
                    }
                }
                if let Some(default) = &p.default {
                    if !p.kind.accepts(default) {
                        return Err(format!(
                            "default of `{}.{}` does not conform to {}",
                            func.name, p.name, p.kind
                        ));
                    }
                }
            }
        }
        Ok(())
    }

    /// JSON-schema style tool listing, in the query file layout.
    pub fn to_json(&self) -> Value {
        Value::Array(self.functions.iter().map(function_to_json).collect())
    }

    pub fn from_json(value: &Value) -> Result<ToolUniverse, String> {
        let items = value.as_array().ok_or("`tools` must be an array")?;
        let functions = items
            .iter()
            .map(function_from_json)
            .collect::<Result<Vec<_>, _>>()?;
        Ok(ToolUniverse { functions })
    }
}

fn function_to_json(func: &FunctionSpec) -> Value {
    let mut properties = Map::new();
    let mut required = Vec::new();
    for p in &func.params {
        let mut prop = Map::new();
        prop.insert("type".into(), Value::from(p.kind.type_name()));
        prop.insert("description".into(), Value::from(p.description.clone()));
        if let ParamKind::Enum(values) = &p.kind {
            prop.insert(
                "enum".into(),
                Value::Array(values.iter().cloned().map(Value::from).collect()),
            );
        }
        if let Some(default) = &p.default {
            prop.insert("default".into(), default.clone());
        }
        properties.insert(p.name.clone(), Value::Object(prop));
        if p.required {
            required.push(Value::from(p.name.clone()));
        }
    }
    let mut params = Map::new();
    params.insert("type".into(), Value::from("object"));
    params.insert("properties".into(), Value::Object(properties));
    params.insert("required".into(), Value::Array(required));

    let mut obj = Map::new();
    obj.insert("name".into(), Value::from(func.name.clone()));
    obj.insert("description".into(), Value::from(func.description.clone()));
    obj.insert("parameters".into(), Value::Object(params));
    Value::Object(obj)
}

fn function_from_json(value: &Value) -> Result<FunctionSpec, String> {
    let obj = value.as_object().ok_or("tool entry must be an object")?;
    let name = obj
        .get("name")
        .and_then(Value::as_str)
        .ok_or("tool entry is missing a string `name`")?
        .to_string();
    let description = obj
        .get("description")
        .and_then(Value::as_str)
        .unwrap_or_default()
        .to_string();
    let params = match obj.get("parameters") {
        None | Some(Value::Null) => Vec::new(),
        Some(Value::Object(p)) => params_from_json(&name, p)?,
        Some(_) => return Err(format!("`parameters` of `{name}` must be an object")),
    };
    Ok(FunctionSpec {
        name,
        description,
        params,
    })
}

fn params_from_json(func: &str, params: &Map<String, Value>) -> Result<Vec<ParamSpec>, String> {
    // JSON-schema layout has a `properties` object; otherwise treat the map
    // itself as `{param: {type, description, default}}` (xlam layout).
    let (props, required): (&Map<String, Value>, Option<HashSet<&str>>) =
        match params.get("properties") {
            Some(Value::Object(props)) => {
                let required = params
                    .get("required")
                    .and_then(Value::as_array)
                    .map(|r| r.iter().filter_map(Value::as_str).collect())
                    .unwrap_or_default();
                (props, Some(required))
            }
            _ => (params, None),
        };

    let mut out = Vec::with_capacity(props.len());
    for (pname, spec) in props {
        let spec = spec
            .as_object()
            .ok_or_else(|| format!("parameter `{func}.{pname}` must be an object"))?;
        let type_raw = spec.get("type").and_then(Value::as_str).unwrap_or("string");
        let optional_suffix = type_raw.to_ascii_lowercase().contains("optional");
        let type_clean = type_raw
            .split(',')
            .next()
            .unwrap_or(type_raw)
            .trim()
            .trim_start_matches("Optional[")
            .trim_end_matches(']');
        let kind = match spec.get("enum") {
            Some(Value::Array(values)) => ParamKind::Enum(
                values
                    .iter()
                    .map(|v| match v {
                        Value::String(s) => s.clone(),
                        other => other.to_string(),
                    })
                    .collect(),
            ),
            _ => ParamKind::from_type_name(type_clean).ok_or_else(|| {
                format!("parameter `{func}.{pname}` has unsupported type `{type_raw}`")
            })?,
        };
        let default = spec.get("default").cloned();
        let is_required = match &required {
            Some(set) => set.contains(pname.as_str()),
            None => !optional_suffix && default.is_none(),
        };
        // xlam listings use an empty string default for "no default".
        let default = match default {
            Some(Value::String(s)) if s.is_empty() && !kind.accepts(&Value::from("")) => None,
            other => other,
        };
        out.push(ParamSpec {
            name: pname.clone(),
            description: spec
                .get("description")
                .and_then(Value::as_str)
                .unwrap_or_default()
                .to_string(),
            kind,
            required: is_required,
            default,
        });
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArgAssignment {
    pub name: String,
    pub value: Value,
}

impl ArgAssignment {
    pub fn new(name: impl Into<String>, value: Value) -> Self {
        Self {
            name: name.into(),
            value,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FunctionCall {
    pub name: String,
    pub args: Vec<ArgAssignment>,
}

impl FunctionCall {
    pub fn new(name: impl Into<String>) -> Self {
        Self {
            name: name.into(),
            args: Vec::new(),
        }
    }

    pub fn with_arg(mut self, name: impl Into<String>, value: Value) -> Self {
        self.args.push(ArgAssignment::new(name, value));
        self
    }

    pub fn arg(&self, name: &str) -> Option<&Value> {
        self.args.iter().find(|a| a.name == name).map(|a| &a.value)
    }

    pub fn to_json(&self) -> Value {
        let mut args = Map::new();
        for a in &self.args {
            args.insert(a.name.clone(), a.value.clone());
        }
        let mut obj = Map::new();
        obj.insert("name".into(), Value::from(self.name.clone()));
        obj.insert("arguments".into(), Value::Object(args));
        Value::Object(obj)
    }

    pub fn from_json(value: &Value) -> Result<FunctionCall, String> {
        let obj = value.as_object().ok_or("call must be a JSON object")?;
        let name = obj
            .get("name")
            .and_then(Value::as_str)
            .ok_or("call is missing a string `name`")?;
        let args = match obj.get("arguments") {
            None | Some(Value::Null) => Vec::new(),
            Some(Value::Object(map)) => map
                .iter()
                .map(|(k, v)| ArgAssignment::new(k.clone(), v.clone()))
                .collect(),
            // Some datasets store arguments as an encoded JSON string.
            Some(Value::String(s)) => match serde_json::from_str::<Value>(s) {
                Ok(Value::Object(map)) => map
                    .into_iter()
                    .map(|(k, v)| ArgAssignment::new(k, v))
                    .collect(),
                _ => return Err(format!("arguments of `{name}` are not an object")),
            },
            Some(_) => return Err(format!("arguments of `{name}` are not an object")),
        };
        Ok(FunctionCall {
            name: name.to_string(),
            args,
        })
    }
}

/// An ordered list of calls: the structured answer to a query. Empty means
/// "no tool applies".
#[derive(Clone, Debug, Default, PartialEq)]
pub struct CallSequence {
    pub calls: Vec<FunctionCall>,
}

impl CallSequence {
    pub fn new(calls: Vec<FunctionCall>) -> Self {
        Self { calls }
    }

    pub fn empty() -> Self {
        Self::default()
    }

    pub fn is_empty(&self) -> bool {
        self.calls.is_empty()
    }

    pub fn to_json(&self) -> Value {
        Value::Array(self.calls.iter().map(FunctionCall::to_json).collect())
    }

    pub fn from_json(value: &Value) -> Result<CallSequence, String> {
        match value {
            Value::Array(items) => Ok(CallSequence {
                calls: items
                    .iter()
                    .map(FunctionCall::from_json)
                    .collect::<Result<_, _>>()?,
            }),
            // A bare call object is accepted as a one-call sequence.
            Value::Object(_) => Ok(CallSequence {
                calls: vec![FunctionCall::from_json(value)?],
            }),
            _ => Err("call sequence must be a JSON array".into()),
        }
    }

    /// Compact response text in the response grammar: keys `name` then
    /// `arguments`, argument order preserved.
    pub fn to_response_text(&self) -> String {
        let mut out = String::from("[");
        for (i, call) in self.calls.iter().enumerate() {
            if i > 0 {
                out.push(',');
            }
            out.push_str("{\"name\":");
            out.push_str(&json_string(&call.name));
            out.push_str(",\"arguments\":{");
            for (j, arg) in call.args.iter().enumerate() {
                if j > 0 {
                    out.push(',');
                }
                out.push_str(&json_string(&arg.name));
                out.push(':');
                out.push_str(&arg.value.to_string());
            }
            out.push_str("}}");
        }
        out.push(']');
        out
    }
}

impl Serialize for CallSequence {
    fn serialize<S: serde::Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        self.to_json().serialize(serializer)
    }
}

impl<'de> Deserialize<'de> for CallSequence {
    fn deserialize<D: serde::Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let value = Value::deserialize(deserializer)?;
        CallSequence::from_json(&value).map_err(serde::de::Error::custom)
    }
}

/// Evaluation category of a query.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Category {
    Simple,
    Multiple,
    Parallel,
    MultipleParallel,
}

impl Category {
    pub const ALL: [Category; 4] = [
        Category::Simple,
        Category::Multiple,
        Category::Parallel,
        Category::MultipleParallel,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            Category::Simple => "simple",
            Category::Multiple => "multiple",
            Category::Parallel => "parallel",
            Category::MultipleParallel => "multiple_parallel",
        }
    }

    /// Parallel categories are matched order-insensitively.
    pub fn order_insensitive(&self) -> bool {
        matches!(self, Category::Parallel | Category::MultipleParallel)
    }
}

impl std::str::FromStr for Category {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Category::ALL
            .into_iter()
            .find(|c| c.as_str() == s)
            .ok_or_else(|| format!("unknown category `{s}`"))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Query {
    pub id: String,
    pub text: String,
    pub universe: ToolUniverse,
    /// Alternative acceptable answers. A single empty sequence marks an
    /// irrelevance sample.
    pub ground_truths: Vec<CallSequence>,
    pub category: Option<Category>,
}

impl Query {
    /// Checks the universe invariants and that every ground-truth call
    /// validates against it.
    pub fn validate(&self) -> Result<(), String> {
        self.universe.validate()?;
        if self.ground_truths.is_empty() {
            return Err(format!("query `{}` has no ground truths", self.id));
        }
        for (gi, truth) in self.ground_truths.iter().enumerate() {
            for call in &truth.calls {
                let violations = validate_call_against_spec(call, &self.universe);
                if let Some(v) = violations.first() {
                    return Err(format!("ground truth #{gi}: {v}"));
                }
            }
        }
        Ok(())
    }

    pub fn to_json(&self) -> Value {
        let mut obj = Map::new();
        obj.insert("id".into(), Value::from(self.id.clone()));
        obj.insert("query".into(), Value::from(self.text.clone()));
        obj.insert("tools".into(), self.universe.to_json());
        obj.insert(
            "ground_truths".into(),
            Value::Array(
                self.ground_truths
                    .iter()
                    .map(CallSequence::to_json)
                    .collect(),
            ),
        );
        if let Some(c) = self.category {
            obj.insert("category".into(), Value::from(c.as_str()));
        }
        Value::Object(obj)
    }

    pub fn from_json(value: &Value) -> Result<Query, SchemaError> {
        let obj = value
            .as_object()
            .ok_or_else(|| SchemaError::Shape("query record must be an object".into()))?;
        let field = |k: &str| {
            obj.get(k)
                .ok_or_else(|| SchemaError::Shape(format!("missing field `{k}`")))
        };
        let id = match field("id")? {
            Value::String(s) => s.clone(),
            Value::Number(n) => n.to_string(),
            _ => return Err(SchemaError::Shape("`id` must be a string".into())),
        };
        let text = field("query")?
            .as_str()
            .ok_or_else(|| SchemaError::Shape("`query` must be a string".into()))?
            .to_string();
        let universe = ToolUniverse::from_json(field("tools")?).map_err(SchemaError::Shape)?;
        let truths = field("ground_truths")?
            .as_array()
            .ok_or_else(|| SchemaError::Shape("`ground_truths` must be an array".into()))?;
        let ground_truths = truths
            .iter()
            .map(CallSequence::from_json)
            .collect::<Result<Vec<_>, _>>()
            .map_err(SchemaError::Shape)?;
        let category = match obj.get("category") {
            None | Some(Value::Null) => None,
            Some(Value::String(s)) => Some(s.parse().map_err(SchemaError::Shape)?),
            Some(_) => return Err(SchemaError::Shape("`category` must be a string".into())),
        };
        Ok(Query {
            id,
            text,
            universe,
            ground_truths,
            category,
        })
    }
}

/// One defect found by [`validate_call_against_spec`].
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "code", rename_all = "snake_case")]
pub enum Violation {
    UnknownFunction { name: String },
    MissingRequired { param: String },
    UndeclaredParam { param: String },
    KindMismatch { param: String, expected: String },
    DuplicateArg { param: String },
}

impl Violation {
    pub fn code(&self) -> &'static str {
        match self {
            Violation::UnknownFunction { .. } => "unknown_function",
            Violation::MissingRequired { .. } => "missing_required",
            Violation::UndeclaredParam { .. } => "undeclared_param",
            Violation::KindMismatch { .. } => "kind_mismatch",
            Violation::DuplicateArg { .. } => "duplicate_arg",
        }
    }
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::UnknownFunction { name } => write!(f, "unknown function `{name}`"),
            Violation::MissingRequired { param } => {
                write!(f, "missing required parameter `{param}`")
            }
            Violation::UndeclaredParam { param } => write!(f, "undeclared parameter `{param}`"),
            Violation::KindMismatch { param, expected } => {
                write!(f, "parameter `{param}` does not conform to {expected}")
            }
            Violation::DuplicateArg { param } => write!(f, "parameter `{param}` given twice"),
        }
    }
}

/// Lists every defect of `call` with respect to `universe`; empty when the
/// call conforms.
pub fn validate_call_against_spec(call: &FunctionCall, universe: &ToolUniverse) -> Vec<Violation> {
    let Some(spec) = universe.function(&call.name) else {
        return vec![Violation::UnknownFunction {
            name: call.name.clone(),
        }];
    };
    let mut out = Vec::new();
    let mut seen = HashSet::new();
    for arg in &call.args {
        if !seen.insert(arg.name.as_str()) {
            out.push(Violation::DuplicateArg {
                param: arg.name.clone(),
            });
            continue;
        }
        match spec.param(&arg.name) {
            None => out.push(Violation::UndeclaredParam {
                param: arg.name.clone(),
            }),
            Some(p) if !p.kind.accepts(&arg.value) => out.push(Violation::KindMismatch {
                param: arg.name.clone(),
                expected: p.kind.to_string(),
            }),
            Some(_) => {}
        }
    }
    for p in spec.params.iter().filter(|p| p.required) {
        if !seen.contains(p.name.as_str()) {
            out.push(Violation::MissingRequired {
                param: p.name.clone(),
            });
        }
    }
    out
}

/// Deterministic text form of a call sequence: keys sorted, numbers in
/// shortest round-trip form, no whitespace.
pub fn canonicalize(seq: &CallSequence) -> String {
    let mut out = String::from("[");
    for (i, call) in seq.calls.iter().enumerate() {
        if i > 0 {
            out.push(',');
        }
        write_canonical_call(&mut out, call);
    }
    out.push(']');
    out
}

pub fn canonical_call(call: &FunctionCall) -> String {
    let mut out = String::new();
    write_canonical_call(&mut out, call);
    out
}

fn write_canonical_call(out: &mut String, call: &FunctionCall) {
    let mut args: Vec<&ArgAssignment> = call.args.iter().collect();
    args.sort_by(|a, b| a.name.cmp(&b.name));
    out.push_str("{\"arguments\":{");
    for (i, arg) in args.iter().enumerate() {
        if i > 0 {
            out.push(',');
        }
        out.push_str(&json_string(&arg.name));
        out.push(':');
        write_canonical_value(out, &arg.value);
    }
    out.push_str("},\"name\":");
    out.push_str(&json_string(&call.name));
    out.push('}');
}

pub fn canonical_value(value: &Value) -> String {
    let mut out = String::new();
    write_canonical_value(&mut out, value);
    out
}

fn write_canonical_value(out: &mut String, value: &Value) {
    match value {
        Value::Null => out.push_str("null"),
        Value::Bool(b) => out.push_str(if *b { "true" } else { "false" }),
        Value::Number(n) => out.push_str(&canonical_number(n)),
        Value::String(s) => out.push_str(&json_string(s)),
        Value::Array(items) => {
            out.push('[');
            for (i, item) in items.iter().enumerate() {
                if i > 0 {
                    out.push(',');
                }
                write_canonical_value(out, item);
            }
            out.push(']');
        }
        Value::Object(map) => {
            let mut entries: Vec<(&String, &Value)> = map.iter().collect();
            entries.sort_by(|a, b| a.0.cmp(b.0));
            out.push('{');
            for (i, (k, v)) in entries.into_iter().enumerate() {
                if i > 0 {
                    out.push(',');
                }
                out.push_str(&json_string(k));
                out.push(':');
                write_canonical_value(out, v);
            }
            out.push('}');
        }
    }
}

// Integral floats below 2^53 render as integers, so `2.0` and `2` coincide.
const EXACT_INT_LIMIT: f64 = 9_007_199_254_740_992.0;

fn canonical_number(n: &serde_json::Number) -> String {
    if let Some(i) = n.as_i64() {
        return i.to_string();
    }
    if let Some(u) = n.as_u64() {
        return u.to_string();
    }
    let f = n.as_f64().unwrap_or(0.0);
    if f.fract() == 0.0 && f.abs() < EXACT_INT_LIMIT {
        return (f as i64).to_string();
    }
    serde_json::Number::from_f64(f)
        .map(|n| n.to_string())
        .unwrap_or_else(|| "null".into())
}

pub(crate) fn json_string(s: &str) -> String {
    serde_json::to_string(s).expect("string serialization is infallible")
}

/// True iff `candidate` equals at least one ground truth of `q` in canonical
/// form. With `order_insensitive`, calls are compared as a multiset.
pub fn matches_ground_truth(candidate: &CallSequence, q: &Query, order_insensitive: bool) -> bool {
    if order_insensitive {
        let key = sorted_call_keys(candidate);
        q.ground_truths.iter().any(|g| sorted_call_keys(g) == key)
    } else {
        let key = canonicalize(candidate);
        q.ground_truths.iter().any(|g| canonicalize(g) == key)
    }
}

fn sorted_call_keys(seq: &CallSequence) -> Vec<String> {
    let mut keys: Vec<String> = seq.calls.iter().map(canonical_call).collect();
    keys.sort();
    keys
}
