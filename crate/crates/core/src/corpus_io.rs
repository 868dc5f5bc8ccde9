//! Line-delimited JSON persistence for queries, rollouts and labeled step
//! datasets, plus dataset statistics.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::ops::Add;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::CorpusError;
use crate::schema::Query;
use crate::stepper::{CharSpan, StepKind};

/// Binary step reward.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Reward {
    #[serde(rename = "+")]
    Pos,
    #[serde(rename = "-")]
    Neg,
}

impl Reward {
    pub fn from_bool(ok: bool) -> Self {
        if ok {
            Reward::Pos
        } else {
            Reward::Neg
        }
    }

    pub fn is_pos(self) -> bool {
        self == Reward::Pos
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Reward::Pos => "+",
            Reward::Neg => "-",
        }
    }
}

/// Which step labels a dataset keeps.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Granularity {
    /// Only the final verdict.
    Orm,
    /// Everything except per-argument values.
    Coarse,
    Fine,
}

impl Granularity {
    pub fn keeps(self, kind: StepKind) -> bool {
        match self {
            Granularity::Orm => kind == StepKind::TotalFinish,
            Granularity::Coarse => kind != StepKind::ArgValue,
            Granularity::Fine => true,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Granularity::Orm => "orm",
            Granularity::Coarse => "coarse",
            Granularity::Fine => "fine",
        }
    }
}

impl std::str::FromStr for Granularity {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "orm" => Ok(Granularity::Orm),
            "coarse" => Ok(Granularity::Coarse),
            "fine" => Ok(Granularity::Fine),
            _ => Err(format!(
                "unknown granularity `{s}` (expected orm, coarse or fine)"
            )),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PrmStep {
    pub kind: StepKind,
    pub span: CharSpan,
    pub label: Reward,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PrmRecord {
    pub query_id: String,
    #[serde(rename = "response")]
    pub response_text: String,
    pub granularity: Granularity,
    pub steps: Vec<PrmStep>,
}

impl PrmRecord {
    /// Spans may not overlap, must start strictly after one another and
    /// must lie inside the response. Only a trailing span may be empty.
    pub fn validate(&self) -> Result<(), String> {
        let len = self.response_text.chars().count();
        let mut prev = CharSpan::new(0, 0);
        for (i, step) in self.steps.iter().enumerate() {
            let CharSpan { start, end } = step.span;
            if start > end {
                return Err(format!("step {i}: inverted span [{start},{end})"));
            }
            if end > len {
                return Err(format!(
                    "step {i}: span [{start},{end}) exceeds response length {len}"
                ));
            }
            if i > 0 && (start < prev.end || start <= prev.start || prev.is_empty()) {
                return Err(format!(
                    "step {i}: span [{start},{end}) overlaps or precedes the previous step"
                ));
            }
            prev = step.span;
        }
        Ok(())
    }

    /// Label of the last TotalFinish step, if any.
    pub fn final_verdict(&self) -> Option<Reward> {
        self.steps
            .iter()
            .rev()
            .find(|s| s.kind == StepKind::TotalFinish)
            .map(|s| s.label)
    }
}

/// One rolled-out response.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RolloutRecord {
    pub query_id: String,
    pub response: String,
    pub sample: usize,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CorpusStats {
    pub step_pos: u64,
    pub step_neg: u64,
    pub step_total: u64,
    pub traj_pos: u64,
    pub traj_neg: u64,
    pub traj_total: u64,
    pub avg_steps_per_sample: f64,
}

impl CorpusStats {
    pub fn of_records<'a>(records: impl IntoIterator<Item = &'a PrmRecord>) -> Self {
        let mut s = CorpusStats::default();
        for r in records {
            for step in &r.steps {
                match step.label {
                    Reward::Pos => s.step_pos += 1,
                    Reward::Neg => s.step_neg += 1,
                }
            }
            // A record without a final verdict never reached a correct end.
            match r.final_verdict() {
                Some(Reward::Pos) => s.traj_pos += 1,
                _ => s.traj_neg += 1,
            }
        }
        s.finalize()
    }

    fn finalize(mut self) -> Self {
        self.step_total = self.step_pos + self.step_neg;
        self.traj_total = self.traj_pos + self.traj_neg;
        self.avg_steps_per_sample = if self.traj_total == 0 {
            0.0
        } else {
            self.step_total as f64 / self.traj_total as f64
        };
        self
    }
}

impl Add for CorpusStats {
    type Output = CorpusStats;

    fn add(self, rhs: CorpusStats) -> CorpusStats {
        CorpusStats {
            step_pos: self.step_pos + rhs.step_pos,
            step_neg: self.step_neg + rhs.step_neg,
            traj_pos: self.traj_pos + rhs.traj_pos,
            traj_neg: self.traj_neg + rhs.traj_neg,
            ..CorpusStats::default()
        }
        .finalize()
    }
}

/// Non-blank lines with their 1-based line numbers.
fn lines(path: &Path) -> Result<Vec<(usize, String)>, CorpusError> {
    let reader = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if !line.trim().is_empty() {
            out.push((i + 1, line));
        }
    }
    Ok(out)
}

/// Reads one serde record per non-blank line.
pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>, CorpusError> {
    lines(path)?
        .into_iter()
        .map(|(line, text)| {
            serde_json::from_str(&text).map_err(|e| CorpusError::Parse {
                line,
                message: e.to_string(),
            })
        })
        .collect()
}

/// Writes one compact JSON document per line.
pub fn write_jsonl<T: Serialize>(path: &Path, records: &[T]) -> Result<usize, CorpusError> {
    let mut w = BufWriter::new(File::create(path)?);
    for r in records {
        let text =
            serde_json::to_string(r).map_err(|e| CorpusError::InvalidRecord(e.to_string()))?;
        w.write_all(text.as_bytes())?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(records.len())
}

pub fn load_queries(path: &Path) -> Result<Vec<Query>, CorpusError> {
    let mut out = Vec::new();
    for (line, text) in lines(path)? {
        let value: Value = serde_json::from_str(&text).map_err(|e| CorpusError::Parse {
            line,
            message: e.to_string(),
        })?;
        let q = Query::from_json(&value).map_err(|e| CorpusError::SchemaViolation {
            line,
            detail: e.to_string(),
        })?;
        q.validate()
            .map_err(|detail| CorpusError::SchemaViolation { line, detail })?;
        out.push(q);
    }
    Ok(out)
}

pub fn write_queries(path: &Path, queries: &[Query]) -> Result<usize, CorpusError> {
    let values: Vec<Value> = queries.iter().map(Query::to_json).collect();
    write_jsonl(path, &values)
}

/// Validates every record, then writes them. Nothing is written if any
/// record is invalid.
pub fn write_prm_dataset(path: &Path, records: &[PrmRecord]) -> Result<usize, CorpusError> {
    for (i, r) in records.iter().enumerate() {
        r.validate()
            .map_err(|e| CorpusError::InvalidRecord(format!("record {i} ({}): {e}", r.query_id)))?;
    }
    write_jsonl(path, records)
}

pub fn read_prm_dataset(path: &Path) -> Result<Vec<PrmRecord>, CorpusError> {
    let mut out = Vec::new();
    for (line, text) in lines(path)? {
        let r: PrmRecord = serde_json::from_str(&text).map_err(|e| CorpusError::Parse {
            line,
            message: e.to_string(),
        })?;
        r.validate()
            .map_err(|detail| CorpusError::SchemaViolation { line, detail })?;
        out.push(r);
    }
    Ok(out)
}

pub fn corpus_stats(path: &Path) -> Result<CorpusStats, CorpusError> {
    Ok(CorpusStats::of_records(&read_prm_dataset(path)?))
}

pub fn read_rollouts(path: &Path) -> Result<Vec<RolloutRecord>, CorpusError> {
    read_jsonl(path)
}

pub fn write_rollouts(path: &Path, rollouts: &[RolloutRecord]) -> Result<usize, CorpusError> {
    write_jsonl(path, rollouts)
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    fn record(labels: &[(StepKind, usize, usize, Reward)]) -> PrmRecord {
        PrmRecord {
            query_id: "q".into(),
            response_text: "x".repeat(40),
            granularity: Granularity::Fine,
            steps: labels
                .iter()
                .map(|&(kind, s, e, label)| PrmStep {
                    kind,
                    span: CharSpan::new(s, e),
                    label,
                })
                .collect(),
        }
    }

    #[test]
    fn wire_names() {
        let r = record(&[(StepKind::TotalFinish, 0, 2, Reward::Pos)]);
        let v = serde_json::to_value(&r).unwrap();
        assert_eq!(
            v,
            json!({"query_id": "q", "response": "x".repeat(40), "granularity": "fine",
                   "steps": [{"kind": "TOTAL_FINISH", "span": [0, 2], "label": "+"}]})
        );
    }

    #[test]
    fn overlapping_spans_rejected() {
        let r = record(&[
            (StepKind::FuncName, 0, 5, Reward::Pos),
            (StepKind::ParamFinish, 4, 6, Reward::Pos),
        ]);
        assert!(r.validate().is_err());
        assert!(record(&[(StepKind::FuncName, 0, 41, Reward::Pos)])
            .validate()
            .is_err());
    }

    #[test]
    fn stats_are_additive() {
        let a = CorpusStats::of_records(&[record(&[
            (StepKind::FuncName, 0, 3, Reward::Pos),
            (StepKind::TotalFinish, 3, 4, Reward::Neg),
        ])]);
        let b = CorpusStats::of_records(&[record(&[(StepKind::TotalFinish, 0, 2, Reward::Pos)])]);
        let sum = a + b;
        assert_eq!((sum.step_total, sum.traj_total, sum.traj_pos), (3, 2, 1));
        assert_eq!(sum.avg_steps_per_sample, 1.5);
        assert_eq!(CorpusStats::default().avg_steps_per_sample, 0.0);
    }
}
