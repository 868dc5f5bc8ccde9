//! Versioned prompt templates for remote policy and PRM endpoints.

use crate::schema::ToolUniverse;

pub const DEFAULT_POLICY_TEMPLATE: &str = "policy-compact-json-v1";
pub const DEFAULT_PRM_TEMPLATE: &str = "prm-verdict-v1";

const BUILTIN: &[(&str, &str)] = &[
    (
        "policy-compact-json-v1",
        include_str!("../assets/templates/policy-compact-json-v1.txt"),
    ),
    (
        "prm-verdict-v1",
        include_str!("../assets/templates/prm-verdict-v1.txt"),
    ),
];

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PromptTemplate {
    pub id: String,
    body: String,
}

impl PromptTemplate {
    pub fn new(id: impl Into<String>, body: impl Into<String>) -> Self {
        Self {
            id: id.into(),
            body: body.into(),
        }
    }

    pub fn builtin(id: &str) -> Option<Self> {
        BUILTIN
            .iter()
            .find(|(name, _)| *name == id)
            .map(|(name, body)| Self::new(*name, *body))
    }

    /// A built-in id, or else a path to a template file.
    pub fn resolve(id_or_path: &str) -> Result<Self, String> {
        if let Some(t) = Self::builtin(id_or_path) {
            return Ok(t);
        }
        std::fs::read_to_string(id_or_path)
            .map(|body| Self::new(id_or_path, body))
            .map_err(|e| format!("template `{id_or_path}`: {e}"))
    }

    /// Substitutes `{key}` placeholders in one pass; unknown braces are kept
    /// verbatim. Trailing whitespace of the template is dropped so the
    /// prompt can end exactly at a continuation point.
    pub fn render(&self, fields: &[(&str, &str)]) -> String {
        let body = self.body.trim_end();
        let mut out = String::with_capacity(body.len() + 256);
        let mut rest = body;
        while let Some(pos) = rest.find('{') {
            out.push_str(&rest[..pos]);
            let tail = &rest[pos..];
            let hit = fields.iter().find(|(key, _)| {
                tail.len() > key.len() + 1
                    && tail[1..].starts_with(key)
                    && tail[1 + key.len()..].starts_with('}')
            });
            match hit {
                Some((key, value)) => {
                    out.push_str(value);
                    rest = &tail[key.len() + 2..];
                }
                None => {
                    out.push('{');
                    rest = &tail[1..];
                }
            }
        }
        out.push_str(rest);
        out
    }
}

/// Compact JSON listing of the tools, as shown to remote models.
pub fn tools_listing(universe: &ToolUniverse) -> String {
    universe.to_json().to_string()
}
