//! Declarative run configuration shared by every subcommand.
//!
//! ```toml
//! [pipeline]
//! mode = "cloud_full"            # cloud_full | cloud_no_correction | local_chain | ablation_a | ablation_b
//! retries_on_malformed = 2
//! mask_dilate_radius = 8
//! segmenter_score_threshold = 0.3
//! max_parallel_requests = 4
//! self_correction = true
//! conservative_correction = false
//! conservative_margin = 16
//! clock = "wall"                 # wall | virtual; replayed runs default to virtual
//!
//! [backends]
//! kind = "oracle"                # oracle | http
//! scene = "scene.json"           # oracle: scene for single runs
//! faulty_object = 3              # oracle: first-pass remover spares this id
//! simulator_omits = [5]          # oracle: simulator leaves these out
//! instance_score = 0.9
//! reasoner_locality = "local"    # remote | local
//! max_reasoner_side = 1024       # http: images sent to reasoners are fit within this
//! replay_latency_ms = 0          # replay: per-call latency
//!
//! [backends.localities]          # http
//! vision = "remote"
//! text = "remote"
//! services = "local"
//!
//! [diversity]
//! perplexity = 30.0
//! iterations = 1000
//! early_exaggeration = 12.0
//! exaggeration_iters = 250
//! seed = 0
//! log_every = 50
//! ```
//!
//! Endpoint URLs and secrets come from `REMOVAL_*` environment variables
//! (see [`crate::backends::http::HttpEndpoints`]).

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backends::fixtures::{kind, replay_backends, FixtureStore, ReplayOptions};
use crate::backends::http::{http_backends, HttpEndpoints, Localities};
use crate::backends::{BackendError, BackendSet, Locality};
use crate::diversity::TsneParams;
use crate::oracle::{oracle_backends_with, ObjectId, OracleOptions, SceneGraph};
use crate::pipeline::{ClockMode, PipelineConfig};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("reading {path}: {msg}")]
    Read { path: PathBuf, msg: String },
    #[error("parsing {path}: {msg}")]
    Parse { path: PathBuf, msg: String },
    #[error("{0}")]
    Invalid(String),
    #[error(transparent)]
    Backend(#[from] BackendError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum BackendKind {
    #[default]
    Oracle,
    Http,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LocalityConfig {
    pub vision: Locality,
    pub text: Locality,
    pub services: Locality,
}

impl Default for LocalityConfig {
    fn default() -> Self {
        let d = Localities::default();
        Self {
            vision: d.vision,
            text: d.text,
            services: d.services,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackendConfig {
    pub kind: BackendKind,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub scene: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub faulty_object: Option<ObjectId>,
    pub simulator_omits: Vec<ObjectId>,
    pub instance_score: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub reasoner_locality: Option<Locality>,
    pub max_reasoner_side: usize,
    pub replay_latency_ms: u64,
    pub localities: LocalityConfig,
}

impl Default for BackendConfig {
    fn default() -> Self {
        Self {
            kind: BackendKind::Oracle,
            scene: None,
            faulty_object: None,
            simulator_omits: Vec::new(),
            instance_score: 0.9,
            reasoner_locality: None,
            max_reasoner_side: 1024,
            replay_latency_ms: 0,
            localities: LocalityConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub pipeline: PipelineConfig,
    pub backends: BackendConfig,
    pub diversity: TsneParams,
    /// Whether the file set `pipeline.clock` itself.
    #[serde(skip)]
    pub clock_explicit: bool,
}

impl Config {
    pub fn from_toml(text: &str, origin: &Path) -> Result<Config, ConfigError> {
        let parse = |msg: String| ConfigError::Parse {
            path: origin.to_path_buf(),
            msg,
        };
        let raw: toml::Table = text
            .parse()
            .map_err(|e: toml::de::Error| parse(e.to_string()))?;
        let clock_explicit = raw
            .get("pipeline")
            .and_then(|p| p.as_table())
            .is_some_and(|p| p.contains_key("clock"));
        let mut cfg: Config = toml::from_str(text).map_err(|e| parse(e.to_string()))?;
        cfg.clock_explicit = clock_explicit;
        let base = origin.parent().unwrap_or(Path::new("."));
        cfg.backends.scene = cfg.backends.scene.map(|s| base.join(s));
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Config, ConfigError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| ConfigError::Read {
            path: path.to_path_buf(),
            msg: e.to_string(),
        })?;
        Self::from_toml(&text, path)
    }

    /// Sets the clock to virtual for replayed runs unless chosen explicitly.
    pub fn prefer_virtual_clock(&mut self) {
        if !self.clock_explicit {
            self.pipeline.clock = ClockMode::Virtual;
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        self.pipeline
            .validate()
            .map_err(|e| ConfigError::Invalid(e.to_string()))?;
        if !(0.0..=1.0).contains(&self.backends.instance_score) {
            return Err(ConfigError::Invalid(format!(
                "backends.instance_score {} outside [0, 1]",
                self.backends.instance_score
            )));
        }
        if self.backends.max_reasoner_side == 0 {
            return Err(ConfigError::Invalid(
                "backends.max_reasoner_side must be positive".into(),
            ));
        }
        Ok(())
    }

    /// The effective configuration as JSON, for echoing into outputs.
    pub fn echo(&self) -> serde_json::Value {
        serde_json::to_value(self).expect("config serializes")
    }

    pub fn oracle_options(&self) -> OracleOptions {
        OracleOptions {
            instance_score: self.backends.instance_score,
            simulator_omits: self
                .backends
                .simulator_omits
                .iter()
                .copied()
                .collect::<BTreeSet<_>>(),
            faulty_object: self.backends.faulty_object,
            reasoner_locality: self.backends.reasoner_locality.unwrap_or(Locality::Local),
        }
    }

    /// Oracle backends for a scene file.
    pub fn oracle_backends_for(&self, scene: &Path) -> Result<BackendSet, ConfigError> {
        let scene = SceneGraph::load(scene).map_err(|e| ConfigError::Invalid(e.to_string()))?;
        Ok(oracle_backends_with(scene, self.oracle_options()))
    }

    /// Live HTTP backends with endpoints from the environment.
    pub fn http_backends(&self) -> Result<BackendSet, ConfigError> {
        let endpoints = HttpEndpoints::from_env()?;
        let l = self.backends.localities;
        Ok(http_backends(
            &endpoints,
            Localities {
                vision: l.vision,
                text: l.text,
                services: l.services,
            },
            self.backends.max_reasoner_side,
        )?)
    }

    /// Backends answered from a fixture file. Optional capabilities are
    /// exposed when the file holds traffic for them.
    pub fn replay_backends(&self, fixtures: &Path) -> Result<BackendSet, ConfigError> {
        let store = FixtureStore::replay_from(fixtures)?;
        let has = |k: &str| store.entries().iter().any(|e| e.kind == k);
        let opts = ReplayOptions {
            correction_remover: has(kind::CORRECTION_REMOVE),
            embedder: has(kind::EMBED),
            scorer: has(kind::SCORE_PAIR),
            latency: Duration::from_millis(self.backends.replay_latency_ms),
            reasoner_locality: self.backends.reasoner_locality.unwrap_or(Locality::Remote),
        };
        Ok(replay_backends(Arc::new(store), opts))
    }
}
