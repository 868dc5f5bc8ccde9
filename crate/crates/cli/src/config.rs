//! Run configuration: a TOML file, then environment overrides, then flags.

use std::collections::BTreeMap;
use std::path::Path;

use callstep::eval::{SimScorerConfig, SweepSpec};
use callstep::policy::{
    DecoyStrategy, Policy, RemotePolicy, RemotePolicyConfig, SimPolicy, SimPolicyConfig,
};
use callstep::scorer::{
    ConstantScorer, NoisyOracleScorer, OracleScorer, RemotePrmConfig, RemotePrmScorer, StepScorer,
};
use callstep::search::SearchConfig;
use callstep::sim::SynthConfig;
use callstep::StepKind;
use serde::Deserialize;

use crate::CliError;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PolicyKind {
    #[default]
    Sim,
    Remote,
}

#[derive(Clone, Debug, PartialEq, Deserialize)]
#[serde(default)]
pub struct PolicySection {
    pub kind: PolicyKind,
    /// Simulator: per-step agreement probability for every kind ...
    pub q: f64,
    /// ... unless overridden here.
    pub q_by_kind: BTreeMap<StepKind, f64>,
    pub decoy: DecoyStrategy,
    #[serde(flatten)]
    pub remote: RemotePolicyConfig,
}

impl Default for PolicySection {
    fn default() -> Self {
        Self {
            kind: PolicyKind::Sim,
            q: 0.6,
            q_by_kind: BTreeMap::new(),
            decoy: DecoyStrategy::default(),
            remote: RemotePolicyConfig::default(),
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScorerKind {
    #[default]
    Oracle,
    NoisyOracle,
    Constant,
    Remote,
}

#[derive(Clone, Debug, PartialEq, Deserialize)]
#[serde(default)]
pub struct ScorerSection {
    pub kind: ScorerKind,
    /// Noisy oracle: probability a verdict is kept.
    pub accuracy: f64,
    /// Constant scorer output.
    pub prob: f64,
    #[serde(flatten)]
    pub remote: RemotePrmConfig,
}

impl Default for ScorerSection {
    fn default() -> Self {
        Self {
            kind: ScorerKind::Oracle,
            accuracy: 0.95,
            prob: 0.5,
            remote: RemotePrmConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Deserialize)]
#[serde(default)]
pub struct RolloutSection {
    pub variants_per_query: usize,
    pub samples_per_variant: usize,
    pub temperature: f64,
    pub mask_probability: f64,
}

impl Default for RolloutSection {
    fn default() -> Self {
        Self {
            variants_per_query: 4,
            samples_per_variant: 1,
            temperature: 0.8,
            mask_probability: 1.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    /// Mandatory; every random stream derives from it.
    pub seed: Option<u64>,
    pub concurrency: usize,
    /// Step threshold for reward-model accuracy.
    pub threshold: f64,
    pub policy: PolicySection,
    pub scorer: ScorerSection,
    pub search: SearchConfig,
    pub rollout: RolloutSection,
    pub synth: SynthConfig,
    pub sweep: SweepSpec,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: None,
            concurrency: 4,
            threshold: 0.5,
            policy: PolicySection::default(),
            scorer: ScorerSection::default(),
            search: SearchConfig::default(),
            rollout: RolloutSection::default(),
            synth: SynthConfig::default(),
            sweep: SweepSpec::default(),
        }
    }
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> Result<Self, CliError> {
        let mut cfg = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| {
                    CliError::Usage(format!("cannot read config {}: {e}", p.display()))
                })?;
                toml::from_str(&text)
                    .map_err(|e| CliError::Usage(format!("bad config {}: {e}", p.display())))?
            }
            None => RunConfig::default(),
        };
        cfg.apply_env(|k| std::env::var(k).ok());
        Ok(cfg)
    }

    /// `POLICY_ENDPOINT`, `SCORER_ENDPOINT` and `API_TOKEN` override the
    /// file.
    pub fn apply_env(&mut self, get: impl Fn(&str) -> Option<String>) {
        if let Some(v) = get("POLICY_ENDPOINT") {
            self.policy.remote.remote.endpoint = v;
        }
        if let Some(v) = get("SCORER_ENDPOINT") {
            self.scorer.remote.remote.endpoint = v;
        }
        if let Some(v) = get("API_TOKEN") {
            self.policy.remote.remote.api_token = Some(v.clone());
            self.scorer.remote.remote.api_token = Some(v);
        }
    }

    pub fn seed(&self) -> Result<u64, CliError> {
        self.seed
            .ok_or_else(|| CliError::Usage("a seed is required (config `seed` or --seed)".into()))
    }

    pub fn build_policy(&self) -> Result<Box<dyn Policy>, CliError> {
        let seed = self.seed()?;
        match self.policy.kind {
            PolicyKind::Sim => {
                let mut sim = SimPolicyConfig::uniform(self.policy.q, seed);
                sim.decoy = self.policy.decoy;
                for (&k, &q) in &self.policy.q_by_kind {
                    sim = sim.with_q(k, q);
                }
                sim.validate().map_err(CliError::Usage)?;
                Ok(Box::new(SimPolicy::new(sim)))
            }
            PolicyKind::Remote => {
                if self.policy.remote.remote.endpoint.is_empty() {
                    return Err(CliError::Usage(
                        "remote policy needs an endpoint (POLICY_ENDPOINT)".into(),
                    ));
                }
                let p = RemotePolicy::new(self.policy.remote.clone())
                    .map_err(|e| CliError::Usage(e.to_string()))?;
                Ok(Box::new(p))
            }
        }
    }

    pub fn build_scorer(&self) -> Result<Box<dyn StepScorer>, CliError> {
        let seed = self.seed()?;
        let s = &self.scorer;
        match s.kind {
            ScorerKind::Oracle => Ok(Box::new(OracleScorer::default())),
            ScorerKind::NoisyOracle => {
                check_unit("scorer.accuracy", s.accuracy)?;
                Ok(Box::new(NoisyOracleScorer::new(s.accuracy, seed)))
            }
            ScorerKind::Constant => {
                check_unit("scorer.prob", s.prob)?;
                Ok(Box::new(ConstantScorer(s.prob)))
            }
            ScorerKind::Remote => {
                if s.remote.remote.endpoint.is_empty() {
                    return Err(CliError::Usage(
                        "remote scorer needs an endpoint (SCORER_ENDPOINT)".into(),
                    ));
                }
                let r = RemotePrmScorer::new(s.remote.clone())
                    .map_err(|e| CliError::Usage(e.to_string()))?;
                Ok(Box::new(r))
            }
        }
    }

    /// Scorer for simulation sweeps, which only support oracle variants.
    pub fn sim_scorer(&self) -> Result<SimScorerConfig, CliError> {
        let seed = self.seed()?;
        match self.scorer.kind {
            ScorerKind::Oracle => Ok(SimScorerConfig::Oracle),
            ScorerKind::NoisyOracle => {
                check_unit("scorer.accuracy", self.scorer.accuracy)?;
                Ok(SimScorerConfig::NoisyOracle {
                    accuracy: self.scorer.accuracy,
                    seed,
                })
            }
            k => Err(CliError::Usage(format!(
                "sweep needs an oracle or noisy_oracle scorer, got {k:?}"
            ))),
        }
    }
}

fn check_unit(name: &str, v: f64) -> Result<(), CliError> {
    if (0.0..=1.0).contains(&v) {
        Ok(())
    } else {
        Err(CliError::Usage(format!(
            "{name} must lie in [0, 1], got {v}"
        )))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_sections_and_env() {
        let mut cfg: RunConfig = toml::from_str(
            r#"
            seed = 3
            [policy]
            q = 0.7
            q_by_kind = { FUNC_NAME = 0.9 }
            [scorer]
            kind = "noisy_oracle"
            accuracy = 0.9
            [search]
            strategy = "best_of_n"
            M = 2
            "#,
        )
        .unwrap();
        assert_eq!(cfg.seed, Some(3));
        assert_eq!(cfg.policy.q_by_kind[&StepKind::FuncName], 0.9);
        assert_eq!(cfg.search.m, 2);
        assert_eq!(cfg.search.n, 1);
        cfg.apply_env(|k| (k == "SCORER_ENDPOINT").then(|| "http://x".to_string()));
        assert_eq!(cfg.scorer.remote.remote.endpoint, "http://x");
        assert!(cfg.policy.remote.remote.endpoint.is_empty());
    }

    #[test]
    fn missing_seed_is_usage_error() {
        let cfg = RunConfig::default();
        assert!(matches!(cfg.seed(), Err(CliError::Usage(_))));
    }
}
