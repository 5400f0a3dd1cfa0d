use std::path::Path;

use serde::{Deserialize, Serialize};

use super::EngineError;
use crate::archive::DEFAULT_K;
use crate::cmaes::{DEFAULT_LAMBDA, DEFAULT_SIGMA, DEFAULT_STEPS};
use crate::embedding::RemoteConfig;
use crate::genome::GenomeLayout;
use crate::goals::{default_seed_goals, validate_seed_goals, VlmConfig, DEFAULT_CONTEXT, DEFAULT_FALLBACK_SCRIPT};
use crate::simulator::SimConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    /// Expansions plus periodic goal-directed expeditions.
    Ee,
    /// Novelty search: expansions only, biased by `alpha`.
    Ns,
    /// Expansions only with uniform parent selection.
    RandomGa,
    /// Every iteration samples fresh random parameters.
    RandomParams,
}

impl std::str::FromStr for Mode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "ee" => Ok(Mode::Ee),
            "ns" => Ok(Mode::Ns),
            "random_ga" => Ok(Mode::RandomGa),
            "random_params" => Ok(Mode::RandomParams),
            _ => Err(format!("unknown mode {s:?} (expected ee, ns, random_ga or random_params)")),
        }
    }
}

impl Mode {
    pub fn as_str(self) -> &'static str {
        match self {
            Mode::Ee => "ee",
            Mode::Ns => "ns",
            Mode::RandomGa => "random_ga",
            Mode::RandomParams => "random_params",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CmaConfig {
    pub steps: usize,
    pub lambda: usize,
    pub sigma_init: f64,
    /// Generations whose best-so-far behavior is saved as an image.
    pub snapshots: Vec<usize>,
}

impl Default for CmaConfig {
    fn default() -> Self {
        Self {
            steps: DEFAULT_STEPS,
            lambda: DEFAULT_LAMBDA,
            sigma_init: DEFAULT_SIGMA,
            snapshots: vec![0, 100, 200, 350],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Backend {
    Toy,
    Remote,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EmbeddingConfig {
    pub backend: Backend,
    pub toy_seed: u64,
    pub toy_dim: usize,
    pub remote: RemoteConfig,
}

impl Default for EmbeddingConfig {
    fn default() -> Self {
        Self {
            backend: Backend::Toy,
            toy_seed: crate::embedding::ToyEmbedder::DEFAULT_SEED,
            toy_dim: crate::embedding::ToyEmbedder::DEFAULT_DIM,
            remote: RemoteConfig::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GoalClientKind {
    Scripted,
    Vlm,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GoalConfig {
    pub client: GoalClientKind,
    /// Goals returned by the scripted client, cycling.
    pub script: Vec<String>,
    /// Goals used when the VLM fails.
    pub fallback_script: Vec<String>,
    /// The six hand-crafted goals that open the goal log.
    pub seed_goals: Vec<String>,
    /// Pursue the seed goals (in order) before asking for new ones.
    pub pursue_seed_goals: bool,
    /// Number of archived behaviors shown to the goal generator.
    pub context_size: usize,
    pub vlm: VlmConfig,
}

impl Default for GoalConfig {
    fn default() -> Self {
        let fallback: Vec<String> = DEFAULT_FALLBACK_SCRIPT.iter().map(|s| s.to_string()).collect();
        Self {
            client: GoalClientKind::Scripted,
            script: fallback.clone(),
            fallback_script: fallback,
            seed_goals: default_seed_goals(),
            pursue_seed_goals: false,
            context_size: DEFAULT_CONTEXT,
            vlm: VlmConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub mode: Mode,
    /// Total iterations N; one archive record per iteration.
    pub iterations: usize,
    /// Random initial solutions S.
    pub seed_iterations: usize,
    /// An expedition every K iterations after seeding.
    pub expedition_period: usize,
    /// Novelty bias of parent and context sampling.
    pub alpha: f64,
    /// Neighbors in the novelty score.
    pub k: usize,
    pub sigma_mut: f64,
    pub seed: u64,
    pub checkpoint_every: usize,
    pub layout: GenomeLayout,
    pub sim: SimConfig,
    pub cmaes: CmaConfig,
    pub embedding: EmbeddingConfig,
    pub goals: GoalConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            mode: Mode::Ee,
            iterations: 10_000,
            seed_iterations: 1_000,
            expedition_period: 50,
            alpha: 4.0,
            k: DEFAULT_K,
            sigma_mut: 0.05,
            seed: 0,
            checkpoint_every: 500,
            layout: GenomeLayout::default(),
            sim: SimConfig::default(),
            cmaes: CmaConfig::default(),
            embedding: EmbeddingConfig::default(),
            goals: GoalConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<(), EngineError> {
        let bad = |m: String| Err(EngineError::Config(m));
        if self.seed_iterations >= self.iterations {
            return bad(format!(
                "seed_iterations ({}) must be below iterations ({})",
                self.seed_iterations, self.iterations
            ));
        }
        if self.seed_iterations == 0 && self.mode != Mode::RandomParams {
            return bad("seed_iterations must be at least 1".into());
        }
        if self.expedition_period == 0 {
            return bad("expedition_period must be >= 1".into());
        }
        if !(self.alpha >= 0.0) || !self.alpha.is_finite() {
            return bad(format!("alpha must be >= 0, got {}", self.alpha));
        }
        if self.k == 0 {
            return bad("k must be >= 1".into());
        }
        if !(self.sigma_mut > 0.0) {
            return bad(format!("sigma_mut must be > 0, got {}", self.sigma_mut));
        }
        if self.checkpoint_every == 0 {
            return bad("checkpoint_every must be >= 1".into());
        }
        if self.cmaes.steps == 0 || self.cmaes.lambda < 4 || !(self.cmaes.sigma_init > 0.0) {
            return bad("cmaes needs steps >= 1, lambda >= 4 and sigma_init > 0".into());
        }
        if self.goals.context_size == 0 {
            return bad("goals.context_size must be >= 1".into());
        }
        if self.goals.client == GoalClientKind::Scripted && self.goals.script.is_empty() {
            return bad("goals.script must not be empty".into());
        }
        if self.goals.fallback_script.is_empty() {
            return bad("goals.fallback_script must not be empty".into());
        }
        validate_seed_goals(&self.goals.seed_goals).map_err(|e| EngineError::Config(e.to_string()))?;
        self.layout.validate()?;
        self.sim.validate()?;
        Ok(())
    }

    /// Number of expeditions a run of this config performs.
    pub fn expedition_count(&self) -> usize {
        if self.mode == Mode::Ee {
            (self.iterations - self.seed_iterations) / self.expedition_period
        } else {
            0
        }
    }

    /// Reads a TOML file, expanding `${VAR}` references from the environment
    /// and applying `key=value` overrides (dotted keys for nested tables).
    pub fn load(path: &Path, overrides: &[String]) -> Result<Self, EngineError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| EngineError::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml(&text, overrides)
    }

    pub fn from_toml(text: &str, overrides: &[String]) -> Result<Self, EngineError> {
        let expanded = interpolate_env(text)?;
        let mut table: toml::Table =
            toml::from_str(&expanded).map_err(|e| EngineError::Config(format!("config: {e}")))?;
        for o in overrides {
            apply_override(&mut table, o)?;
        }
        let config: RunConfig = toml::Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| EngineError::Config(format!("config: {}", e.message())))?;
        config.validate()?;
        Ok(config)
    }

    /// Applies overrides to an existing config.
    pub fn with_overrides(&self, overrides: &[String]) -> Result<Self, EngineError> {
        let text = toml::to_string(self).map_err(|e| EngineError::Config(e.to_string()))?;
        let mut config = Self::from_toml(&text, overrides)?;
        // secrets are not serialized; carry them over
        config.goals.vlm.api_key = self.goals.vlm.api_key.clone();
        Ok(config)
    }

    /// The configuration as echoed into the manifest. Secrets are skipped.
    pub fn echo(&self) -> serde_json::Value {
        serde_json::to_value(self).expect("config serializes")
    }
}

/// Replaces `${NAME}` with the value of environment variable `NAME`.
pub fn interpolate_env(text: &str) -> Result<String, EngineError> {
    let mut out = String::with_capacity(text.len());
    let mut rest = text;
    while let Some(start) = rest.find("${") {
        out.push_str(&rest[..start]);
        let after = &rest[start + 2..];
        let end = after
            .find('}')
            .ok_or_else(|| EngineError::Config("unterminated ${ in config".into()))?;
        let name = &after[..end];
        let value = std::env::var(name)
            .map_err(|_| EngineError::Config(format!("environment variable {name} is not set")))?;
        out.push_str(&value);
        rest = &after[end + 1..];
    }
    out.push_str(rest);
    Ok(out)
}

/// Sets `a.b.c=value` in a TOML table. The value is parsed as TOML when
/// possible (numbers, booleans, arrays) and taken as a string otherwise.
/// Unknown keys are caught when the table is deserialized.
fn apply_override(table: &mut toml::Table, item: &str) -> Result<(), EngineError> {
    let (key, raw) = item
        .split_once('=')
        .ok_or_else(|| EngineError::Config(format!("override {item:?} is not key=value")))?;
    let key = key.trim();
    let raw = raw.trim();
    let value = toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()));
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(EngineError::Config(format!("bad override key {key:?}")));
    }
    let mut cursor = table;
    for part in &parts[..parts.len() - 1] {
        let entry = cursor
            .entry(part.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cursor = entry
            .as_table_mut()
            .ok_or_else(|| EngineError::Config(format!("override {key:?}: {part} is not a table")))?;
    }
    cursor.insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_follow_the_reference_schedule() {
        let c = RunConfig::default();
        assert_eq!((c.iterations, c.seed_iterations, c.expedition_period), (10_000, 1_000, 50));
        assert_eq!(c.alpha, 4.0);
        assert_eq!(c.k, 10);
        assert_eq!((c.cmaes.steps, c.cmaes.lambda, c.cmaes.sigma_init), (350, 16, 0.1));
        assert_eq!(c.goals.context_size, 25);
        assert_eq!(c.expedition_count(), 180);
        c.validate().unwrap();
    }

    #[test]
    fn overrides_apply_to_declared_keys_only() {
        let c = RunConfig::from_toml("iterations = 1300\n", &["alpha=2".into(), "sim.grid_size=64".into()]).unwrap();
        assert_eq!(c.alpha, 2.0);
        assert_eq!(c.sim.grid_size, 64);
        assert_eq!(c.iterations, 1300);
        assert!(RunConfig::from_toml("", &["nonsense=1".into()]).is_err());
        assert!(RunConfig::from_toml("", &["sim.nonsense=1".into()]).is_err());
        assert!(RunConfig::from_toml("", &["alpha".into()]).is_err());
        let m = RunConfig::from_toml("", &["mode=random_ga".into()]).unwrap();
        assert_eq!(m.mode, Mode::RandomGa);
    }

    #[test]
    fn env_interpolation() {
        std::env::set_var("EE_TEST_MODEL_NAME", "clip-test");
        let c = RunConfig::from_toml("[embedding.remote]\nmodel = \"${EE_TEST_MODEL_NAME}\"\n", &[]).unwrap();
        assert_eq!(c.embedding.remote.model, "clip-test");
        assert!(interpolate_env("${EE_TEST_SURELY_UNSET_VAR}").is_err());
        assert!(interpolate_env("${oops").is_err());
    }

    #[test]
    fn invalid_schedules_are_rejected() {
        assert!(RunConfig::from_toml("iterations = 10\nseed_iterations = 10\n", &[]).is_err());
        assert!(RunConfig::from_toml("expedition_period = 0\n", &[]).is_err());
        assert!(RunConfig::from_toml("alpha = -1.0\n", &[]).is_err());
    }

    #[test]
    fn echo_round_trips_and_hides_the_key() {
        let mut c = RunConfig::default();
        c.goals.vlm.api_key = Some("hunter2".into());
        let echo = c.echo();
        assert!(!echo.to_string().contains("hunter2"));
        let back: RunConfig = serde_json::from_value(echo).unwrap();
        assert_eq!(back.goals.vlm.api_key, None);
        assert_eq!(back.iterations, c.iterations);
        let o = c.with_overrides(&["k=5".into()]).unwrap();
        assert_eq!(o.k, 5);
        assert_eq!(o.goals.vlm.api_key.as_deref(), Some("hunter2"));
    }
}
