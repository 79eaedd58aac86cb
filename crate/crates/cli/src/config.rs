//! Flat `key = value` run configuration.
//!
//! ```text
//! # smooth tracking with Falcon on DDPM
//! env.name = smooth_track
//! diffusion.backend = ddpm
//! falcon.epsilon = 0.04
//! ```
//!
//! Keys use dotted section prefixes. Blank lines and `#` comments are ignored.
//! Unknown and repeated keys are errors.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use falcon_core::bench::RunConfig;
use falcon_core::envs::EnvKind;
use falcon_core::falcon::{DistanceMetric, SelectionMode};

pub const SEED_ENV: &str = "FALCON_SEED";

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Source {
    Line(usize),
    Override,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConfigError {
    pub key: Option<String>,
    pub source: Option<Source>,
    pub message: String,
}

impl ConfigError {
    fn new(key: Option<&str>, source: Option<Source>, message: impl Into<String>) -> Self {
        ConfigError {
            key: key.map(String::from),
            source,
            message: message.into(),
        }
    }
}

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match &self.source {
            Some(Source::Line(n)) => write!(f, "line {n}: ")?,
            Some(Source::Override) => write!(f, "--set: ")?,
            None => {}
        }
        if let Some(key) = &self.key {
            write!(f, "`{key}`: ")?;
        }
        f.write_str(&self.message)
    }
}

impl std::error::Error for ConfigError {}

/// Every accepted key.
pub const KEYS: &[&str] = &[
    "env.name",
    "env.obs_horizon",
    "env.execution_horizon",
    "env.prediction_horizon",
    "env.episode_length",
    "env.success_radius",
    "env.component_std",
    "env.world_scale",
    "env.gain",
    "env.speed_cap",
    "env.start_low",
    "env.start_high",
    "env.goal",
    "env.commit_distance",
    "env.switch_prob",
    "env.quiet_decisions",
    "diffusion.backend",
    "diffusion.schedule",
    "diffusion.levels",
    "diffusion.steps",
    "falcon.enabled",
    "falcon.epsilon",
    "falcon.delta",
    "falcon.kappa",
    "falcon.k_min",
    "falcon.capacity",
    "falcon.metric",
    "falcon.selection",
    "run.episodes",
    "run.seed",
    "run.output_dir",
    "ablation.epsilon_scale",
];

#[derive(Debug, Clone)]
struct Entry {
    value: String,
    source: Source,
}

/// A parsed run configuration plus the settings only the ablation verbs read.
#[derive(Debug, Clone, PartialEq)]
pub struct LoadedConfig {
    pub run: RunConfig,
    pub epsilon_scale: f64,
}

/// Parses `key = value` lines, rejecting unknown and duplicate keys.
fn parse_lines(text: &str) -> Result<BTreeMap<String, Entry>, ConfigError> {
    let mut out = BTreeMap::new();
    for (i, raw) in text.lines().enumerate() {
        let n = i + 1;
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let Some((key, value)) = line.split_once('=') else {
            return Err(ConfigError::new(None, Some(Source::Line(n)), format!("expected `key = value`, got `{line}`")));
        };
        let key = key.trim();
        insert(&mut out, key, value.trim(), Source::Line(n))?;
    }
    Ok(out)
}

fn insert(map: &mut BTreeMap<String, Entry>, key: &str, value: &str, source: Source) -> Result<(), ConfigError> {
    if !KEYS.contains(&key) {
        return Err(ConfigError::new(Some(key), Some(source), "unknown key"));
    }
    if let Some(prev) = map.get(key) {
        if source != Source::Override {
            let first = match prev.source {
                Source::Line(l) => format!("line {l}"),
                Source::Override => "--set".into(),
            };
            return Err(ConfigError::new(Some(key), Some(source), format!("duplicate key (first set on {first})")));
        }
    }
    map.insert(
        key.to_string(),
        Entry {
            value: value.to_string(),
            source,
        },
    );
    Ok(())
}

fn value<T: FromStr>(key: &str, entry: &Entry) -> Result<T, ConfigError>
where
    T::Err: fmt::Display,
{
    entry
        .value
        .parse()
        .map_err(|e| ConfigError::new(Some(key), Some(entry.source.clone()), format!("cannot parse `{}`: {e}", entry.value)))
}

fn pair(key: &str, entry: &Entry) -> Result<[f64; 2], ConfigError> {
    let parts: Vec<&str> = entry.value.split(',').map(str::trim).collect();
    let bad = || ConfigError::new(Some(key), Some(entry.source.clone()), format!("expected `x, y`, got `{}`", entry.value));
    if parts.len() != 2 {
        return Err(bad());
    }
    Ok([parts[0].parse().map_err(|_| bad())?, parts[1].parse().map_err(|_| bad())?])
}

fn selection(key: &str, entry: &Entry) -> Result<SelectionMode, ConfigError> {
    let v = entry.value.as_str();
    if v == "adaptive" {
        return Ok(SelectionMode::Adaptive);
    }
    if let Some(level) = v.strip_prefix("fixed:") {
        if let Ok(k) = level.trim().parse() {
            return Ok(SelectionMode::Fixed(k));
        }
    }
    Err(ConfigError::new(
        Some(key),
        Some(entry.source.clone()),
        format!("expected `adaptive` or `fixed:<level>`, got `{v}`"),
    ))
}

fn metric(key: &str, entry: &Entry) -> Result<DistanceMetric, ConfigError> {
    match entry.value.as_str() {
        "rms" => Ok(DistanceMetric::Rms),
        "l2" => Ok(DistanceMetric::L2),
        other => Err(ConfigError::new(
            Some(key),
            Some(entry.source.clone()),
            format!("expected `rms` or `l2`, got `{other}`"),
        )),
    }
}

fn build(map: &BTreeMap<String, Entry>) -> Result<LoadedConfig, ConfigError> {
    let name_entry = map
        .get("env.name")
        .ok_or_else(|| ConfigError::new(Some("env.name"), None, "missing required key"))?;
    let kind: EnvKind = value("env.name", name_entry)?;
    let mut cfg = RunConfig::new(kind);
    let mut epsilon_scale = 1.0;
    for (key, e) in map {
        let k = key.as_str();
        match k {
            "env.name" => {}
            "env.obs_horizon" => cfg.env.obs_horizon = value(k, e)?,
            "env.execution_horizon" => cfg.env.execution_horizon = value(k, e)?,
            "env.prediction_horizon" => cfg.env.prediction_horizon = value(k, e)?,
            "env.episode_length" => cfg.env.episode_length = value(k, e)?,
            "env.success_radius" => cfg.env.success_radius = value(k, e)?,
            "env.component_std" => cfg.env.component_std = value(k, e)?,
            "env.world_scale" => cfg.env.world_scale = value(k, e)?,
            "env.gain" => cfg.env.gain = value(k, e)?,
            "env.speed_cap" => cfg.env.speed_cap = value(k, e)?,
            "env.start_low" => cfg.env.start_low = pair(k, e)?,
            "env.start_high" => cfg.env.start_high = pair(k, e)?,
            "env.goal" => cfg.env.goal = pair(k, e)?,
            "env.commit_distance" => cfg.env.commit_distance = value(k, e)?,
            "env.switch_prob" => cfg.env.switch_prob = value(k, e)?,
            "env.quiet_decisions" => cfg.env.quiet_decisions = value(k, e)?,
            "diffusion.backend" => cfg.backend = value(k, e)?,
            "diffusion.schedule" => cfg.schedule = value(k, e)?,
            "diffusion.levels" => cfg.levels = value(k, e)?,
            "diffusion.steps" => cfg.steps = value(k, e)?,
            "falcon.enabled" => cfg.falcon_enabled = value(k, e)?,
            "falcon.epsilon" => cfg.falcon.epsilon = value(k, e)?,
            "falcon.delta" => cfg.falcon.delta = value(k, e)?,
            "falcon.kappa" => cfg.falcon.kappa = value(k, e)?,
            "falcon.k_min" => cfg.falcon.k_min = value(k, e)?,
            "falcon.capacity" => cfg.falcon.capacity = value(k, e)?,
            "falcon.metric" => cfg.falcon.metric = metric(k, e)?,
            "falcon.selection" => cfg.falcon.selection = selection(k, e)?,
            "run.episodes" => cfg.episodes = value(k, e)?,
            "run.seed" => cfg.seed = value(k, e)?,
            "run.output_dir" => cfg.output_dir = Some(PathBuf::from(&e.value)),
            "ablation.epsilon_scale" => {
                epsilon_scale = value(k, e)?;
                if !(epsilon_scale > 0.0 && f64::is_finite(epsilon_scale)) {
                    return Err(ConfigError::new(Some(k), Some(e.source.clone()), "must be positive"));
                }
            }
            _ => unreachable!("keys are checked on insert"),
        }
    }
    cfg.validate()
        .map_err(|err| ConfigError::new(None, None, format!("invalid configuration: {err}")))?;
    Ok(LoadedConfig {
        run: cfg,
        epsilon_scale,
    })
}

/// Parses config text and applies `KEY=VALUE` overrides on top.
pub fn parse_config(text: &str, overrides: &[String]) -> Result<LoadedConfig, ConfigError> {
    let mut map = parse_lines(text)?;
    for o in overrides {
        let Some((key, value)) = o.split_once('=') else {
            return Err(ConfigError::new(None, Some(Source::Override), format!("expected KEY=VALUE, got `{o}`")));
        };
        insert(&mut map, key.trim(), value.trim(), Source::Override)?;
    }
    build(&map)
}

#[derive(Debug)]
pub enum LoadError {
    Read { path: PathBuf, source: std::io::Error },
    Config { path: PathBuf, source: ConfigError },
}

impl fmt::Display for LoadError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            LoadError::Read { path, source } => write!(f, "{}: {source}", path.display()),
            LoadError::Config { path, source } => write!(f, "{}: {source}", path.display()),
        }
    }
}

impl std::error::Error for LoadError {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        match self {
            LoadError::Read { source, .. } => Some(source),
            LoadError::Config { source, .. } => Some(source),
        }
    }
}

pub fn load_config(path: &Path, overrides: &[String]) -> Result<LoadedConfig, LoadError> {
    let text = std::fs::read_to_string(path).map_err(|source| LoadError::Read {
        path: path.to_path_buf(),
        source,
    })?;
    parse_config(&text, overrides).map_err(|source| LoadError::Config {
        path: path.to_path_buf(),
        source,
    })
}

/// Flag, then environment variable, then config value.
pub fn resolve_seed(flag: Option<u64>, env: Option<&str>, config: u64) -> Result<u64, ConfigError> {
    if let Some(s) = flag {
        return Ok(s);
    }
    match env {
        Some(v) => v
            .trim()
            .parse()
            .map_err(|e| ConfigError::new(Some(SEED_ENV), None, format!("cannot parse `{v}`: {e}"))),
        None => Ok(config),
    }
}
