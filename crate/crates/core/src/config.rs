//! Run configuration: TOML files merged over built-in defaults, with
//! environment-variable overrides and full validation.
//!
//! Every hyperparameter lives under a stable key (`planner.delta_ss_init`,
//! `latent.beta`, `models.gamma_ss`, ...). A config file only needs the keys
//! it wants to change, except `env.horizon`, which must always be stated so
//! a run's episode length is never implicit.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::envs::EnvConfig;
use crate::latent::LatentConfig;
use crate::models::ModelConfig;
use crate::planner::PlanConfig;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config file: {0}")]
    Io(#[from] std::io::Error),
    #[error("config parse error: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("missing required key `{0}`")]
    MissingKey(String),
    #[error("invalid config: {0}")]
    Invalid(String),
}

/// Gradient-step budgets per phase.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    /// Offline phase: steps per model after VAE training.
    pub offline_steps: usize,
    pub round_dyn_steps: usize,
    pub round_classifier_steps: usize,
    pub round_value_steps: usize,
    /// Recursive safe-set targets are recomputed every this many steps.
    pub ss_refit_interval: usize,
    /// Reinitialize model parameters each round instead of refitting
    /// incrementally.
    pub reinit_per_round: bool,
    pub batch_size: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            offline_steps: 2000,
            round_dyn_steps: 200,
            round_classifier_steps: 200,
            round_value_steps: 500,
            ss_refit_interval: 50,
            reinit_per_round: false,
            batch_size: 256,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub env: EnvConfig,
    pub latent: LatentConfig,
    pub models: ModelConfig,
    pub planner: PlanConfig,
    pub train: TrainConfig,
    /// Offline dataset composition.
    pub n_demo_success: usize,
    pub n_demo_constraint: usize,
    pub n_rand: usize,
    /// Attempts per successful demo under noise before giving up.
    pub demo_retry_cap: usize,
    /// Online update rounds U.
    pub n_rounds: usize,
    /// Rollouts per round K.
    pub rollouts_per_round: usize,
    pub eval_episodes: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            env: EnvConfig::default(),
            latent: LatentConfig::default(),
            models: ModelConfig::default(),
            planner: PlanConfig::default(),
            train: TrainConfig::default(),
            n_demo_success: 50,
            n_demo_constraint: 50,
            n_rand: 0,
            demo_retry_cap: 5,
            n_rounds: 25,
            rollouts_per_round: 10,
            eval_episodes: 10,
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        self.env.validate().map_err(ConfigError::Invalid)?;
        let p = &self.planner;
        if p.n_elite > p.n_candidate {
            return Err(ConfigError::Invalid(
                "planner.n_elite must be <= planner.n_candidate".into(),
            ));
        }
        for (name, v) in [
            ("planner.horizon", p.horizon),
            ("planner.n_particle", p.n_particle),
            ("planner.n_candidate", p.n_candidate),
            ("planner.n_elite", p.n_elite),
            ("planner.n_cem_iters", p.n_cem_iters),
        ] {
            if v < 1 {
                return Err(ConfigError::Invalid(format!("{name} must be >= 1")));
            }
        }
        if !(0.0..=1.0).contains(&p.p_random) {
            return Err(ConfigError::Invalid(
                "planner.p_random must be in [0, 1]".into(),
            ));
        }
        for (name, v) in [
            ("planner.delta_ss_init", p.delta_ss_init),
            ("planner.delta_c", p.delta_c),
        ] {
            if !(v > 0.0 && v <= 1.0) {
                return Err(ConfigError::Invalid(format!("{name} must be in (0, 1]")));
            }
        }
        if !(self.models.gamma > 0.0 && self.models.gamma < 1.0) {
            return Err(ConfigError::Invalid(
                "models.gamma must be in (0, 1)".into(),
            ));
        }
        if !(0.0..1.0).contains(&self.models.gamma_ss) {
            return Err(ConfigError::Invalid(
                "models.gamma_ss must be in [0, 1)".into(),
            ));
        }
        if self.latent.d < 1 {
            return Err(ConfigError::Invalid("latent.d must be >= 1".into()));
        }
        if self.rollouts_per_round < 1 {
            return Err(ConfigError::Invalid(
                "rollouts_per_round must be >= 1".into(),
            ));
        }
        Ok(())
    }
}

fn merge_value(base: &mut toml::Value, overlay: toml::Value) {
    match (base, overlay) {
        (toml::Value::Table(b), toml::Value::Table(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) => merge_value(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

fn has_key(table: &toml::Value, path: &[&str]) -> bool {
    let mut cur = table;
    for key in path {
        match cur.get(key) {
            Some(v) => cur = v,
            None => return false,
        }
    }
    true
}

/// Apply `PREFIX_SECTION__KEY=value` environment overrides. The double
/// underscore separates path segments; values are parsed as TOML scalars,
/// falling back to strings.
fn apply_env_overrides(
    merged: &mut toml::Value,
    vars: impl Iterator<Item = (String, String)>,
    prefix: &str,
) {
    for (name, value) in vars {
        let Some(path) = name.strip_prefix(prefix) else {
            continue;
        };
        let segments: Vec<String> = path.split("__").map(|s| s.to_lowercase()).collect();
        if segments.iter().any(|s| s.is_empty()) {
            continue;
        }
        // Interpret the value as a TOML scalar (`v = 0.125`), falling back
        // to a plain string when it does not parse as one.
        let parsed = format!("v = {value}")
            .parse::<toml::Value>()
            .ok()
            .and_then(|t| t.get("v").cloned())
            .unwrap_or(toml::Value::String(value.clone()));
        let mut overlay = parsed;
        for seg in segments.iter().rev() {
            let mut t = toml::map::Map::new();
            t.insert(seg.clone(), overlay);
            overlay = toml::Value::Table(t);
        }
        merge_value(merged, overlay);
    }
}

pub const ENV_OVERRIDE_PREFIX: &str = "LSS_";

/// Parse a config document, merging over defaults and applying process
/// environment overrides (`LSS_ENV__HORIZON=100` style).
pub fn parse_config(text: &str) -> Result<RunConfig, ConfigError> {
    parse_config_with_env(text, std::env::vars())
}

pub fn parse_config_with_env(
    text: &str,
    vars: impl Iterator<Item = (String, String)>,
) -> Result<RunConfig, ConfigError> {
    let vars: Vec<(String, String)> = vars.collect();
    let overlay: toml::Value = text.parse()?;
    // env.horizon must come from the file or an override, never silently
    // from the built-in defaults.
    let horizon_given = has_key(&overlay, &["env", "horizon"])
        || vars.iter().any(|(k, _)| k == "LSS_ENV__HORIZON");
    if !horizon_given {
        return Err(ConfigError::MissingKey("env.horizon".into()));
    }
    let mut merged = toml::Value::try_from(RunConfig::default())
        .expect("defaults always serialize");
    merge_value(&mut merged, overlay);
    apply_env_overrides(&mut merged, vars.into_iter(), ENV_OVERRIDE_PREFIX);
    let cfg: RunConfig = merged.try_into()?;
    cfg.validate()?;
    Ok(cfg)
}

pub fn load_config(path: &std::path::Path) -> Result<RunConfig, ConfigError> {
    let text = std::fs::read_to_string(path)?;
    parse_config(&text)
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = "[env]\nhorizon = 100\n";

    fn no_env() -> impl Iterator<Item = (String, String)> {
        std::iter::empty()
    }

    #[test]
    fn minimal_config_resolves_to_defaults() {
        let cfg = parse_config_with_env(MINIMAL, no_env()).unwrap();
        assert_eq!(cfg, RunConfig {
            ..RunConfig::default()
        });
        assert_eq!(cfg.planner.n_candidate, 1000);
        assert_eq!(cfg.latent.beta, 1e-6);
        assert_eq!(cfg.models.gamma_ss, 0.3);
    }

    #[test]
    fn missing_horizon_is_an_error_naming_the_key() {
        let err = parse_config_with_env("[planner]\nhorizon = 5\n", no_env()).unwrap_err();
        assert!(err.to_string().contains("env.horizon"), "{err}");
    }

    #[test]
    fn file_overrides_defaults() {
        let text = "[env]\nhorizon = 50\n[planner]\nn_candidate = 200\nuse_safe_set = false\n[models]\ngamma_ss = 0.0\n";
        let cfg = parse_config_with_env(text, no_env()).unwrap();
        assert_eq!(cfg.env.horizon, 50);
        assert_eq!(cfg.planner.n_candidate, 200);
        assert!(!cfg.planner.use_safe_set);
        assert_eq!(cfg.models.gamma_ss, 0.0);
        // untouched keys keep defaults
        assert_eq!(cfg.planner.n_elite, 100);
    }

    #[test]
    fn env_vars_override_file() {
        let vars = vec![
            ("LSS_PLANNER__N_ELITE".to_string(), "7".to_string()),
            ("LSS_ENV__NOISE_SIGMA".to_string(), "0.0".to_string()),
            ("HOME".to_string(), "/root".to_string()),
        ];
        let cfg = parse_config_with_env(MINIMAL, vars.into_iter()).unwrap();
        assert_eq!(cfg.planner.n_elite, 7);
        assert_eq!(cfg.env.noise_sigma, 0.0);
    }

    #[test]
    fn invalid_values_are_named() {
        let text = "[env]\nhorizon = 100\n[planner]\nn_elite = 5000\n";
        let err = parse_config_with_env(text, no_env()).unwrap_err();
        assert!(err.to_string().contains("n_elite"), "{err}");

        let text = "[env]\nhorizon = 100\n[planner]\np_random = 1.5\n";
        let err = parse_config_with_env(text, no_env()).unwrap_err();
        assert!(err.to_string().contains("p_random"), "{err}");
    }

    #[test]
    fn resolved_snapshot_roundtrips() {
        let cfg = parse_config_with_env(MINIMAL, no_env()).unwrap();
        let text = toml::to_string_pretty(&cfg).unwrap();
        // A snapshot is fully resolved: reparsing it alone reproduces the
        // config exactly.
        let back = parse_config_with_env(&text, no_env()).unwrap();
        assert_eq!(cfg, back);
    }
}
