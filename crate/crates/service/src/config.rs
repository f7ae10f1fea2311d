//! Settings resolution. Command-line flags override `LAYERCRAFT_*`
//! environment variables, which override the TOML config file, which
//! overrides the built-in defaults.

use std::path::PathBuf;
use std::str::FromStr;
use std::sync::Arc;

use layercraft_core::image::{ImageBackend, MockImageBackend};
use layercraft_core::layout::{CanvasSpec, DEFAULT_CANVAS};
use layercraft_core::planner::{PlannerBackend, ReplayPlanner};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::remote::{RemoteConfig, RemoteImageBackend, RemotePlanner};

pub const ENV_PREFIX: &str = "LAYERCRAFT_";

#[derive(Debug, Error, PartialEq, Eq)]
pub enum ConfigError {
    #[error("config file: {0}")]
    File(String),
    #[error("{key}: {message}")]
    Value { key: String, message: String },
}

/// One source of settings; unset fields defer to lower layers.
#[derive(Debug, Clone, Default, PartialEq, Eq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Layer {
    pub store: Option<PathBuf>,
    pub listen: Option<String>,
    pub planner: Option<String>,
    pub backend: Option<String>,
    pub canvas: Option<String>,
    pub seed: Option<u64>,
    pub interactive: Option<bool>,
}

impl Layer {
    pub fn from_toml(text: &str) -> Result<Self, ConfigError> {
        toml::from_str(text).map_err(|e| ConfigError::File(e.to_string()))
    }

    /// Reads `LAYERCRAFT_*` variables from `vars`.
    pub fn from_env<I, K, V>(vars: I) -> Result<Self, ConfigError>
    where
        I: IntoIterator<Item = (K, V)>,
        K: AsRef<str>,
        V: AsRef<str>,
    {
        let mut layer = Layer::default();
        for (k, v) in vars {
            let Some(key) = k.as_ref().strip_prefix(ENV_PREFIX) else {
                continue;
            };
            let v = v.as_ref().to_string();
            let bad = |message: String| ConfigError::Value {
                key: k.as_ref().to_string(),
                message,
            };
            match key {
                "STORE" => layer.store = Some(v.into()),
                "LISTEN" => layer.listen = Some(v),
                "PLANNER" => layer.planner = Some(v),
                "BACKEND" => layer.backend = Some(v),
                "CANVAS" => layer.canvas = Some(v),
                "SEED" => layer.seed = Some(v.parse().map_err(|e| bad(format!("{e}")))?),
                "INTERACTIVE" => {
                    layer.interactive =
                        Some(parse_bool(&v).ok_or_else(|| bad(format!("not a boolean: {v}")))?)
                }
                _ => {}
            }
        }
        Ok(layer)
    }

    /// `self` wins over `lower` field by field.
    pub fn over(self, lower: Layer) -> Layer {
        Layer {
            store: self.store.or(lower.store),
            listen: self.listen.or(lower.listen),
            planner: self.planner.or(lower.planner),
            backend: self.backend.or(lower.backend),
            canvas: self.canvas.or(lower.canvas),
            seed: self.seed.or(lower.seed),
            interactive: self.interactive.or(lower.interactive),
        }
    }
}

fn parse_bool(v: &str) -> Option<bool> {
    match v.to_ascii_lowercase().as_str() {
        "1" | "true" | "yes" | "on" => Some(true),
        "0" | "false" | "no" | "off" => Some(false),
        _ => None,
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Settings {
    pub store: PathBuf,
    pub listen: String,
    pub planner: Option<PlannerSpec>,
    pub backend: ImageSpec,
    pub canvas: CanvasSpec,
    pub seed: u64,
    pub interactive: bool,
}

impl Settings {
    pub fn resolve(flags: Layer, env: Layer, file: Layer) -> Result<Self, ConfigError> {
        let merged = flags.over(env).over(file);
        let value_err = |key: &str, message: String| ConfigError::Value {
            key: key.into(),
            message,
        };
        Ok(Settings {
            store: merged
                .store
                .unwrap_or_else(|| PathBuf::from("layercraft-store")),
            listen: merged.listen.unwrap_or_else(|| "127.0.0.1:8080".into()),
            planner: merged
                .planner
                .map(|p| p.parse().map_err(|e| value_err("planner", e)))
                .transpose()?,
            backend: merged
                .backend
                .map(|b| b.parse().map_err(|e| value_err("backend", e)))
                .transpose()?
                .unwrap_or(ImageSpec::Mock),
            canvas: merged
                .canvas
                .map(|c| c.parse().map_err(|e: String| value_err("canvas", e)))
                .transpose()?
                .unwrap_or(DEFAULT_CANVAS),
            seed: merged.seed.unwrap_or(0),
            interactive: merged.interactive.unwrap_or(false),
        })
    }
}

/// `replay:FILE` or `remote:URL`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
#[serde(into = "String")]
pub enum PlannerSpec {
    Replay(PathBuf),
    Remote(String),
}

impl FromStr for PlannerSpec {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s.split_once(':') {
            Some(("replay", path)) if !path.is_empty() => Ok(Self::Replay(path.into())),
            Some(("remote", url)) if !url.is_empty() => Ok(Self::Remote(url.into())),
            _ => Err(format!("expected replay:FILE or remote:URL, found {s:?}")),
        }
    }
}

impl From<PlannerSpec> for String {
    fn from(spec: PlannerSpec) -> String {
        match spec {
            PlannerSpec::Replay(p) => format!("replay:{}", p.display()),
            PlannerSpec::Remote(u) => format!("remote:{u}"),
        }
    }
}

impl PlannerSpec {
    pub fn build(&self) -> std::io::Result<Arc<dyn PlannerBackend>> {
        Ok(match self {
            Self::Replay(path) => Arc::new(ReplayPlanner::from_file(path)?),
            Self::Remote(url) => Arc::new(RemotePlanner::new(RemoteConfig::new(url.clone()))),
        })
    }
}

/// `mock` or `remote:URL`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
#[serde(into = "String")]
pub enum ImageSpec {
    Mock,
    Remote(String),
}

impl FromStr for ImageSpec {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s.split_once(':') {
            None if s == "mock" => Ok(Self::Mock),
            Some(("remote", url)) if !url.is_empty() => Ok(Self::Remote(url.into())),
            _ => Err(format!("expected mock or remote:URL, found {s:?}")),
        }
    }
}

impl From<ImageSpec> for String {
    fn from(spec: ImageSpec) -> String {
        match spec {
            ImageSpec::Mock => "mock".into(),
            ImageSpec::Remote(u) => format!("remote:{u}"),
        }
    }
}

impl ImageSpec {
    pub fn build(&self) -> Arc<dyn ImageBackend> {
        match self {
            Self::Mock => Arc::new(MockImageBackend),
            Self::Remote(url) => Arc::new(RemoteImageBackend::new(RemoteConfig::new(url.clone()))),
        }
    }
}
