//! TOML experiment configuration.
//!
//! A config file overrides any subset of the defaults; tables are merged key
//! by key, so `[engines.prefill] a_p = 100.0` keeps every other prefill
//! default. Unknown keys are rejected.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cluster::{AutoscaleSpec, ClusterSpec, SimError};
use crate::distflow::LinkDefaults;
use crate::dsched::{Heatmap, HeatmapAxes, NoisyOracle, Policy, DEFAULT_BALANCE_EPSILON};
use crate::engine::{EngineConfig, EngineMode};
use crate::experiments::{ProfileSpec, ScaleBenchSpec};
use crate::metrics::SloTargets;
use crate::simkernel::secs_to_us;
use crate::workload::WorkloadSpec;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("reading {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("parse error: {0}")]
    Parse(String),
    #[error("unknown config key `{0}`")]
    UnknownKey(String),
    #[error("invalid config: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ClusterSection {
    /// Scale-up domain per host. Empty means "as many hosts as the layout
    /// needs, all in one domain".
    pub host_domains: Vec<u32>,
    pub npus_per_host: usize,
    pub colocated: u32,
    pub pairs: u32,
    pub policy: Policy,
    pub balance_epsilon: f64,
    pub horizon_s: Option<f64>,
    pub failures: Vec<FailureSpec>,
    /// Heatmap JSON produced by `profile-heatmap`.
    pub heatmap: Option<PathBuf>,
}

impl Default for ClusterSection {
    fn default() -> Self {
        ClusterSection {
            host_domains: Vec::new(),
            npus_per_host: 8,
            colocated: 2,
            pairs: 1,
            policy: Policy::Combined,
            balance_epsilon: DEFAULT_BALANCE_EPSILON,
            horizon_s: None,
            failures: Vec::new(),
            heatmap: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FailureSpec {
    pub at_s: f64,
    pub te: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EngineSection {
    pub colocated: EngineConfig,
    pub prefill: EngineConfig,
    pub decode: EngineConfig,
}

impl Default for EngineSection {
    fn default() -> Self {
        EngineSection {
            colocated: EngineConfig::with_mode(EngineMode::Colocated),
            prefill: EngineConfig::with_mode(EngineMode::PrefillOnly),
            decode: EngineConfig::with_mode(EngineMode::DecodeOnly),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PredictorSection {
    pub bucket_size: u32,
    pub accuracy: f64,
}

impl Default for PredictorSection {
    fn default() -> Self {
        let o = NoisyOracle::default();
        PredictorSection {
            bucket_size: o.bucket_size,
            accuracy: o.accuracy,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ProfileSection {
    pub axes: HeatmapAxes,
    pub rps_grid: Vec<f64>,
    pub requests_per_cell: u32,
    pub colocated_share: f64,
    pub poisson: bool,
}

impl Default for ProfileSection {
    fn default() -> Self {
        let p = ProfileSpec::default();
        ProfileSection {
            axes: p.axes,
            rps_grid: p.rps_grid,
            requests_per_cell: p.requests_per_cell,
            colocated_share: p.colocated_share,
            poisson: p.poisson,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct Config {
    /// Seeds the workload, the predictor and the profiler.
    pub seed: u64,
    pub cluster: ClusterSection,
    pub links: LinkDefaults,
    pub engines: EngineSection,
    pub predictor: PredictorSection,
    pub slo: SloTargets,
    /// Present means autoscaling is on.
    pub autoscale: Option<AutoscaleSpec>,
    pub workload: Option<WorkloadSpec>,
    pub profile: ProfileSection,
    pub scale_bench: ScaleBenchSpec,
}

fn merge(base: &mut toml::Value, over: toml::Value) {
    match (base, over) {
        (toml::Value::Table(b), toml::Value::Table(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

/// Every key path in `user` must survive a parse/serialize round trip.
fn check_known(user: &toml::Table, parsed: &toml::Table, prefix: &str) -> Result<(), ConfigError> {
    for (k, v) in user {
        let path = if prefix.is_empty() {
            k.clone()
        } else {
            format!("{prefix}.{k}")
        };
        let Some(p) = parsed.get(k) else {
            return Err(ConfigError::UnknownKey(path));
        };
        if let (toml::Value::Table(u), toml::Value::Table(p)) = (v, p) {
            check_known(u, p, &path)?;
        }
    }
    Ok(())
}

impl Config {
    pub fn from_toml_str(text: &str) -> Result<Config, ConfigError> {
        let user: toml::Table = text
            .parse()
            .map_err(|e: toml::de::Error| ConfigError::Parse(e.to_string()))?;
        let mut merged = toml::Value::try_from(Config::default())
            .map_err(|e| ConfigError::Parse(e.to_string()))?;
        merge(&mut merged, toml::Value::Table(user.clone()));
        let cfg: Config = merged
            .try_into()
            .map_err(|e: toml::de::Error| ConfigError::Parse(e.to_string()))?;
        let round = toml::Table::try_from(&cfg).map_err(|e| ConfigError::Parse(e.to_string()))?;
        check_known(&user, &round, "")?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Config, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let mut cfg = Config::from_toml_str(&text)?;
        // Relative heatmap paths are relative to the config file.
        if let (Some(h), Some(dir)) = (&cfg.cluster.heatmap, path.parent()) {
            if h.is_relative() {
                cfg.cluster.heatmap = Some(dir.join(h));
            }
        }
        Ok(cfg)
    }

    fn validate(&self) -> Result<(), ConfigError> {
        let bad = |m: &str| Err(ConfigError::Invalid(m.to_string()));
        for (name, e, mode) in [
            ("colocated", &self.engines.colocated, EngineMode::Colocated),
            ("prefill", &self.engines.prefill, EngineMode::PrefillOnly),
            ("decode", &self.engines.decode, EngineMode::DecodeOnly),
        ] {
            if e.mode != mode {
                return Err(ConfigError::Invalid(format!(
                    "engines.{name}.mode must be {mode:?}"
                )));
            }
            e.validate()
                .map_err(|m| ConfigError::Invalid(format!("engines.{name}: {m}")))?;
        }
        if self.cluster.failures.iter().any(|f| !(f.at_s >= 0.0)) {
            return bad("failure times must be non-negative");
        }
        if self.cluster.horizon_s.is_some_and(|h| !(h > 0.0)) {
            return bad("horizon_s must be positive");
        }
        self.profile
            .axes
            .validate()
            .map_err(|e| ConfigError::Invalid(e.to_string()))?;
        if self.profile.rps_grid.is_empty() || self.profile.rps_grid.iter().any(|r| !(*r > 0.0)) {
            return bad("profile.rps_grid must be non-empty and positive");
        }
        self.scale_bench
            .model
            .validate()
            .map_err(|e| ConfigError::Invalid(e.to_string()))?;
        Ok(())
    }

    /// Cluster spec for `run`. `heatmap` overrides the configured file.
    pub fn cluster_spec(&self, heatmap: Option<Heatmap>) -> Result<ClusterSpec, ConfigError> {
        let c = &self.cluster;
        let heatmap = match heatmap {
            Some(h) => Some(h),
            None => match &c.heatmap {
                Some(p) => Some(read_heatmap(p)?),
                None => None,
            },
        };
        let mut spec = ClusterSpec {
            npus_per_host: c.npus_per_host,
            colocated_engine: self.engines.colocated.clone(),
            prefill_engine: self.engines.prefill.clone(),
            decode_engine: self.engines.decode.clone(),
            ..ClusterSpec::layout(c.colocated, c.pairs)
        };
        spec.host_domains = if c.host_domains.is_empty() {
            let tp = spec
                .colocated_engine
                .tp_degree
                .max(spec.prefill_engine.tp_degree) as usize;
            let engines = (c.colocated + 2 * c.pairs) as usize;
            vec![0; (engines * tp).div_ceil(c.npus_per_host.max(1)).max(1)]
        } else {
            c.host_domains.clone()
        };
        spec.links = self.links;
        spec.policy = c.policy;
        spec.heatmap = heatmap;
        spec.predictor = NoisyOracle {
            bucket_size: self.predictor.bucket_size,
            accuracy: self.predictor.accuracy,
            seed: self.seed,
        };
        spec.balance_epsilon = c.balance_epsilon;
        spec.slo = self.slo;
        spec.autoscale = self.autoscale.clone();
        spec.failures = c
            .failures
            .iter()
            .map(|f| (secs_to_us(f.at_s), f.te))
            .collect();
        spec.horizon_us = c.horizon_s.map(secs_to_us);
        spec.validate().map_err(|e| match e {
            SimError::Config(m) => ConfigError::Invalid(m),
            other => ConfigError::Invalid(other.to_string()),
        })?;
        Ok(spec)
    }

    pub fn profile_spec(&self) -> ProfileSpec {
        ProfileSpec {
            axes: self.profile.axes.clone(),
            rps_grid: self.profile.rps_grid.clone(),
            requests_per_cell: self.profile.requests_per_cell,
            colocated_share: self.profile.colocated_share,
            poisson: self.profile.poisson,
            colocated_engine: self.engines.colocated.clone(),
            prefill_engine: self.engines.prefill.clone(),
            decode_engine: self.engines.decode.clone(),
            links: self.links,
            seed: self.seed,
        }
    }

    /// The configured workload with its seed taken from the config seed.
    pub fn workload_spec(&self) -> Option<WorkloadSpec> {
        self.workload.clone().map(|mut w| {
            w.seed = self.seed;
            w
        })
    }
}

pub fn read_heatmap(path: &Path) -> Result<Heatmap, ConfigError> {
    let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    Heatmap::from_json(&text)
        .map_err(|e| ConfigError::Invalid(format!("heatmap {}: {e}", path.display())))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_is_all_defaults() {
        let c = Config::from_toml_str("").unwrap();
        assert_eq!(c, Config::default());
        assert_eq!(
            c.engines.prefill.chunk_size,
            c.engines.prefill.max_batch_tokens
        );
    }

    #[test]
    fn partial_tables_merge_over_defaults() {
        let c = Config::from_toml_str(
            "seed = 9\n[engines.prefill]\na_p = 100.0\n[cluster]\npolicy = \"rr\"\ncolocated = 1\n",
        )
        .unwrap();
        assert_eq!(c.engines.prefill.a_p, 100.0);
        assert_eq!(c.engines.prefill.mode, EngineMode::PrefillOnly);
        assert_eq!(c.engines.prefill.chunk_size, 8192);
        assert_eq!(c.cluster.policy, Policy::RoundRobin);
        let spec = c.cluster_spec(None).unwrap();
        assert_eq!(spec.colocated, 1);
        assert_eq!(spec.predictor.seed, 9);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let e = Config::from_toml_str("[engines.decode]\nspeed = 2.0\n").unwrap_err();
        assert!(matches!(e, ConfigError::UnknownKey(k) if k == "engines.decode.speed"));
        assert!(matches!(
            Config::from_toml_str("bogus = 1"),
            Err(ConfigError::UnknownKey(_))
        ));
    }

    #[test]
    fn optional_sections_parse() {
        let c = Config::from_toml_str(
            r#"
[autoscale]
prewarmed_tes = 2
[autoscale.thresholds]
max_tes = 8
[workload]
num_requests = 10
arrival = { poisson = { rate_rps = 2.0 } }
prompt_len = { constant = { tokens = 512 } }
decode_len = { constant = { tokens = 32 } }
"#,
        )
        .unwrap();
        let a = c.autoscale.as_ref().unwrap();
        assert_eq!(a.prewarmed_tes, 2);
        assert_eq!(a.thresholds.max_tes, 8);
        assert_eq!(a.window_us, AutoscaleSpec::default().window_us);
        assert_eq!(c.workload_spec().unwrap().num_requests, Some(10));
    }

    #[test]
    fn wrong_mode_and_bad_values_are_invalid() {
        assert!(matches!(
            Config::from_toml_str("[engines.decode]\nmode = \"colocated\"\n"),
            Err(ConfigError::Invalid(_))
        ));
        assert!(matches!(
            Config::from_toml_str("[profile]\nrps_grid = []\n"),
            Err(ConfigError::Invalid(_))
        ));
        assert!(matches!(
            Config::from_toml_str("seed = \"x\""),
            Err(ConfigError::Parse(_))
        ));
    }

    #[test]
    fn combined_policy_without_heatmap_fails_at_spec_time() {
        let c = Config::from_toml_str("").unwrap();
        assert!(c.cluster_spec(None).is_err());
    }
}
