//! Fuse-pipeline configuration: one versioned TOML file holding every
//! threshold the fusion stages consume, plus references to the classifier
//! tables and decision rules. A content hash over the effective parameters
//! (including referenced file bytes) stamps every output for replay audits.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::align::AlignConfig;
use crate::features::{SkeletonConfig, TrackConfig, VadConfig, OCCUPANCY_THRESHOLD_N};
use crate::rules::{RuleError, RuleSet};
use crate::state::{Level2Tables, TableError, WindowConfig};

pub const CONFIG_VERSION: &str = "shf/1";

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("config parse error: {0}")]
    Parse(String),
    #[error("invalid config: {0}")]
    Invalid(String),
    #[error("classifier tables: {0}")]
    Tables(#[from] TableError),
    #[error("decision rules: {0}")]
    Rules(#[from] RuleError),
}

/// Level-1 cleaning and feature thresholds.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Level1Config {
    /// Floor force above which the room counts as physically occupied.
    pub occupied_threshold_n: f64,
    pub vad: VadConfig,
    pub skeleton: SkeletonConfig,
    pub track: TrackConfig,
    /// How far a floor centroid may sit from a camera fix and still be
    /// treated as the same person.
    pub floor_claim_m: f64,
    /// A silent stretch longer than this resets a resident's track state.
    pub track_reset_s: f64,
}

impl Default for Level1Config {
    fn default() -> Self {
        Level1Config {
            occupied_threshold_n: OCCUPANCY_THRESHOLD_N,
            vad: VadConfig::default(),
            skeleton: SkeletonConfig::default(),
            track: TrackConfig::default(),
            floor_claim_m: 1.5,
            track_reset_s: 2.0,
        }
    }
}

/// Level-2 windowing, smoothing, and the classifier table source.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Level2Config {
    pub window: WindowConfig,
    /// Label runs shorter than this get absorbed by their neighbors.
    pub min_dwell: usize,
    /// Classifier table file; the built-in defaults when absent.
    pub tables: Option<PathBuf>,
}

impl Default for Level2Config {
    fn default() -> Self {
        Level2Config { window: WindowConfig::default(), min_dwell: 2, tables: None }
    }
}

/// Level-3 decision rules and twin export cadence.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Level3Config {
    /// Decision rule file; the built-in defaults when absent.
    pub rules: Option<PathBuf>,
    pub twin_cadence_hz: f64,
}

impl Default for Level3Config {
    fn default() -> Self {
        Level3Config { rules: None, twin_cadence_hz: 1.0 }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FuseConfig {
    /// Format tag; must be `"shf/1"`.
    pub version: String,
    /// Level 1–2 iterations: passes beyond the first relax the
    /// unoccupied-drop rule inside spans the previous pass labelled
    /// `sleeping`.
    #[serde(default = "default_passes")]
    pub passes: u32,
    /// Reserved for stochastic stages; recorded in the hash either way.
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub align: AlignConfig,
    #[serde(default)]
    pub level1: Level1Config,
    #[serde(default)]
    pub level2: Level2Config,
    #[serde(default)]
    pub level3: Level3Config,
}

fn default_passes() -> u32 {
    1
}

impl Default for FuseConfig {
    fn default() -> Self {
        FuseConfig {
            version: CONFIG_VERSION.to_string(),
            passes: 1,
            seed: 0,
            align: AlignConfig::default(),
            level1: Level1Config::default(),
            level2: Level2Config::default(),
            level3: Level3Config::default(),
        }
    }
}

impl FuseConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        let fail = |m: String| Err(ConfigError::Invalid(m));
        if self.version != CONFIG_VERSION {
            return fail(format!("version {:?}, expected {CONFIG_VERSION:?}", self.version));
        }
        if self.passes == 0 {
            return fail("passes must be >= 1".into());
        }
        let w = &self.level2.window;
        if !(w.window_s > 0.0) || !(w.stride_s > 0.0) || w.stride_s > w.window_s {
            return fail(format!(
                "window_s {} / stride_s {} must be positive with stride <= window",
                w.window_s, w.stride_s
            ));
        }
        let l1 = &self.level1;
        if !(l1.occupied_threshold_n > 0.0) {
            return fail("occupied_threshold_n must be positive".into());
        }
        if !(l1.vad.on_threshold >= l1.vad.off_threshold && l1.vad.off_threshold >= 0.0) {
            return fail("vad thresholds must satisfy on >= off >= 0".into());
        }
        if !(l1.track.blend > 0.0 && l1.track.blend <= 1.0) {
            return fail(format!("track blend {} outside (0, 1]", l1.track.blend));
        }
        if l1.track.camera_weight < 0.0
            || l1.track.floor_weight < 0.0
            || l1.track.camera_weight + l1.track.floor_weight <= 0.0
        {
            return fail("track source weights must be non-negative and not all zero".into());
        }
        if !(l1.floor_claim_m > 0.0) || !(l1.track_reset_s > 0.0) {
            return fail("floor_claim_m and track_reset_s must be positive".into());
        }
        if !(self.level3.twin_cadence_hz > 0.0) {
            return fail("twin_cadence_hz must be positive".into());
        }
        for (name, ms) in [
            ("camera_ms", self.align.windows.camera_ms),
            ("microphone_ms", self.align.windows.microphone_ms),
            ("floor_ms", self.align.windows.floor_ms),
            ("environment_ms", self.align.windows.environment_ms),
            ("usage_ms", self.align.windows.usage_ms),
        ] {
            if !(ms >= 0.0) || !ms.is_finite() {
                return fail(format!("align window {name} = {ms} invalid"));
            }
        }
        Ok(())
    }
}

/// A parsed config with its referenced artifacts resolved and the content
/// hash computed. This is what the pipeline actually runs on.
#[derive(Debug, Clone)]
pub struct LoadedConfig {
    pub config: FuseConfig,
    pub tables: Level2Tables,
    pub rules: RuleSet,
    /// Hex SHA-256 over every effective parameter, including the bytes of
    /// the tables/rules files (built-in or referenced). Paths themselves do
    /// not participate, so relocating files never perturbs replay identity.
    pub hash: String,
}

fn read(path: &Path) -> Result<String, ConfigError> {
    std::fs::read_to_string(path)
        .map_err(|source| ConfigError::Io { path: path.to_path_buf(), source })
}

fn resolve(base: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

impl LoadedConfig {
    /// Resolves table/rule references against `base`, validates everything,
    /// and fixes the content hash.
    pub fn from_config(config: FuseConfig, base: &Path) -> Result<LoadedConfig, ConfigError> {
        config.validate()?;
        let tables_src = match &config.level2.tables {
            Some(p) => read(&resolve(base, p))?,
            None => include_str!("../../../fixtures/level2_default.toml").to_string(),
        };
        let rules_src = match &config.level3.rules {
            Some(p) => read(&resolve(base, p))?,
            None => include_str!("../../../fixtures/rules_default.shr").to_string(),
        };
        let tables = Level2Tables::parse(&tables_src)?;
        let rules = RuleSet::parse(&rules_src)?;
        let hash = content_hash(&config, &tables_src, &rules_src);
        Ok(LoadedConfig { config, tables, rules, hash })
    }

    /// Built-in defaults end-to-end; the hash still reflects the bundled
    /// table/rule bytes.
    pub fn default_loaded() -> LoadedConfig {
        LoadedConfig::from_config(FuseConfig::default(), Path::new("."))
            .expect("default config validates")
    }
}

/// Parse config text; relative table/rule paths resolve against `base`.
pub fn parse_config(text: &str, base: &Path) -> Result<LoadedConfig, ConfigError> {
    let config: FuseConfig =
        toml::from_str(text).map_err(|e| ConfigError::Parse(e.to_string()))?;
    LoadedConfig::from_config(config, base)
}

pub fn load_config(path: &Path) -> Result<LoadedConfig, ConfigError> {
    let text = read(path)?;
    let base = path.parent().unwrap_or_else(|| Path::new("."));
    parse_config(&text, base)
}

/// SHA-256 over the canonical JSON of the effective parameters plus the raw
/// bytes of the classifier tables and decision rules.
fn content_hash(config: &FuseConfig, tables_src: &str, rules_src: &str) -> String {
    let mut value = serde_json::to_value(config).expect("config serializes");
    // The file locations are plumbing, not parameters: their *contents* are
    // hashed below instead.
    value["level2"]["tables"] = serde_json::Value::Null;
    value["level3"]["rules"] = serde_json::Value::Null;
    let canonical = canonical_json(&value);
    let mut h = Sha256::new();
    h.update(canonical.as_bytes());
    h.update([0u8]);
    h.update(tables_src.as_bytes());
    h.update([0u8]);
    h.update(rules_src.as_bytes());
    let digest = h.finalize();
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

/// JSON with object keys sorted, so the hash never depends on serializer
/// field order.
fn canonical_json(v: &serde_json::Value) -> String {
    match v {
        serde_json::Value::Object(map) => {
            let sorted: BTreeMap<&String, &serde_json::Value> = map.iter().collect();
            let inner: Vec<String> = sorted
                .into_iter()
                .map(|(k, val)| {
                    format!("{}:{}", serde_json::to_string(k).unwrap(), canonical_json(val))
                })
                .collect();
            format!("{{{}}}", inner.join(","))
        }
        serde_json::Value::Array(items) => {
            let inner: Vec<String> = items.iter().map(canonical_json).collect();
            format!("[{}]", inner.join(","))
        }
        other => serde_json::to_string(other).unwrap(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate_and_hash_stays_put() {
        let a = LoadedConfig::default_loaded();
        let b = LoadedConfig::default_loaded();
        assert_eq!(a.hash, b.hash);
        assert_eq!(a.hash.len(), 64);
    }

    #[test]
    fn any_parameter_change_moves_the_hash() {
        let base = LoadedConfig::default_loaded();
        let mut cfg = FuseConfig::default();
        cfg.level1.floor_claim_m = 1.6;
        let moved = LoadedConfig::from_config(cfg, Path::new(".")).unwrap();
        assert_ne!(base.hash, moved.hash);

        let mut cfg = FuseConfig::default();
        cfg.passes = 2;
        let moved = LoadedConfig::from_config(cfg, Path::new(".")).unwrap();
        assert_ne!(base.hash, moved.hash);

        let mut cfg = FuseConfig::default();
        cfg.align.windows.floor_ms = 151.0;
        let moved = LoadedConfig::from_config(cfg, Path::new(".")).unwrap();
        assert_ne!(base.hash, moved.hash);
    }

    #[test]
    fn rule_file_bytes_feed_the_hash() {
        let dir = tempfile::tempdir().unwrap();
        let rules_a = dir.path().join("a.shr");
        let rules_b = dir.path().join("b.shr");
        let src = include_str!("../../../fixtures/rules_default.shr");
        std::fs::write(&rules_a, src).unwrap();
        std::fs::write(&rules_b, src.replace("cooldown_s = 60.0", "cooldown_s = 61.0")).unwrap();

        let mut cfg = FuseConfig::default();
        cfg.level3.rules = Some(rules_a.clone());
        let a = LoadedConfig::from_config(cfg, dir.path()).unwrap();
        // Same bytes as the builtin → same hash, regardless of location.
        assert_eq!(a.hash, LoadedConfig::default_loaded().hash);

        let mut cfg = FuseConfig::default();
        cfg.level3.rules = Some(rules_b);
        let b = LoadedConfig::from_config(cfg, dir.path()).unwrap();
        assert_ne!(a.hash, b.hash);
    }

    #[test]
    fn unknown_keys_and_bad_values_are_rejected() {
        let err = parse_config("version = \"shf/1\"\nbogus = 1\n", Path::new(".")).unwrap_err();
        assert!(matches!(err, ConfigError::Parse(_)), "{err}");

        let err =
            parse_config("version = \"shf/1\"\npasses = 0\n", Path::new(".")).unwrap_err();
        assert!(matches!(err, ConfigError::Invalid(_)), "{err}");

        let err = parse_config(
            "version = \"shf/1\"\n[level2.window]\nwindow_s = 1.0\nstride_s = 2.0\n",
            Path::new("."),
        )
        .unwrap_err();
        assert!(matches!(err, ConfigError::Invalid(_)), "{err}");
    }

    #[test]
    fn partial_toml_fills_defaults() {
        let loaded = parse_config(
            "version = \"shf/1\"\n[align]\npolicy = \"nearest\"\n[level1]\nfloor_claim_m = 2.0\n",
            Path::new("."),
        )
        .unwrap();
        assert_eq!(loaded.config.align.policy, crate::align::AlignPolicy::Nearest);
        assert_eq!(loaded.config.level1.floor_claim_m, 2.0);
        assert_eq!(loaded.config.level2.window.window_s, 5.0);
        assert_eq!(loaded.config.passes, 1);
    }
}
