//! Level 2: windowed behavioral state — posture, activity, emotion.
//!
//! Per-record physical features are aggregated into overlapping time
//! windows, each window is classified by an ordered, data-driven rule table
//! (the `shl2/1` format), and the resulting label sequences are smoothed so
//! one-window blips cannot leak downstream. The default tables ship
//! embedded; deployments can swap them without recompiling.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::features::{gait_features, GaitConfig, TrackPoint};
use crate::payload::{HEAD, L_ANKLE, L_HIP, R_ANKLE, R_HIP};
use crate::predicate::{Expr, Kind, PredicateError, Scope, Value, Vocabulary};
use crate::time::{time_of_day_s, Nanos, NS_PER_SEC};

#[derive(Debug, Error)]
pub enum TableError {
    #[error("table io: {0}")]
    Io(#[from] std::io::Error),
    #[error("table parse: {0}")]
    Parse(String),
    #[error("table invalid: {0}")]
    Invalid(String),
    #[error("rule `{rule}`: {source}")]
    Rule {
        rule: String,
        #[source]
        source: PredicateError,
    },
}

// ---------------------------------------------------------------------------
// Posture

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Posture {
    Standing,
    Sitting,
    Lying,
    Unknown,
}

impl Posture {
    pub fn name(&self) -> &'static str {
        match self {
            Posture::Standing => "standing",
            Posture::Sitting => "sitting",
            Posture::Lying => "lying",
            Posture::Unknown => "unknown",
        }
    }
}

/// Classifies a reconstructed skeleton by coarse body geometry. The floor
/// is assumed to be z = 0, but the lying test is height-independent (a bed
/// lifts every joint equally), keyed on the head-to-hip axis being within
/// 30 degrees of horizontal.
pub fn posture_code(skel: &crate::features::Skeleton3D) -> Posture {
    if skel.valid_count() < 6 {
        return Posture::Unknown;
    }
    let Some(head) = skel.joints[HEAD].map(|j| j.p) else {
        return Posture::Unknown;
    };
    let hips: Vec<[f64; 3]> =
        [L_HIP, R_HIP].iter().filter_map(|&i| skel.joints[i].map(|j| j.p)).collect();
    if hips.is_empty() {
        return Posture::Unknown;
    }
    let n = hips.len() as f64;
    let hip = [
        hips.iter().map(|p| p[0]).sum::<f64>() / n,
        hips.iter().map(|p| p[1]).sum::<f64>() / n,
        hips.iter().map(|p| p[2]).sum::<f64>() / n,
    ];
    let dz = head[2] - hip[2];
    let horizontal = ((head[0] - hip[0]).powi(2) + (head[1] - hip[1]).powi(2)).sqrt();
    if dz.atan2(horizontal).to_degrees() < 30.0 {
        return Posture::Lying;
    }
    let ankle_z = [L_ANKLE, R_ANKLE]
        .iter()
        .filter_map(|&i| skel.joints[i].map(|j| j.p[2]))
        .fold(f64::INFINITY, f64::min);
    let ankle_z = if ankle_z.is_finite() { ankle_z } else { 0.0 };
    let height = head[2] - ankle_z;
    if height < 0.2 {
        return Posture::Unknown;
    }
    if hip[2] < 0.55 * height {
        Posture::Sitting
    } else {
        Posture::Standing
    }
}

// ---------------------------------------------------------------------------
// Taxonomies

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Taxonomy {
    pub name: String,
    pub labels: Vec<String>,
}

impl Taxonomy {
    pub fn default_activity() -> Taxonomy {
        Taxonomy {
            name: "activity".into(),
            labels: [
                "standing",
                "walking",
                "sitting",
                "lying",
                "sleeping",
                "eating",
                "drinking",
                "cooking",
                "cleaning",
                "reading",
                "watching_tv",
                "exercising",
                "idle",
            ]
            .map(String::from)
            .to_vec(),
        }
    }

    pub fn default_emotion() -> Taxonomy {
        Taxonomy {
            name: "emotion".into(),
            labels: [
                "neutral",
                "happy",
                "sad",
                "angry",
                "fearful",
                "surprised",
                "disgusted",
                "tired",
                "excited",
            ]
            .map(String::from)
            .to_vec(),
        }
    }

    pub fn contains(&self, label: &str) -> bool {
        self.labels.iter().any(|l| l == label)
    }

    pub fn validate(&self) -> Result<(), TableError> {
        if self.labels.is_empty() {
            return Err(TableError::Invalid(format!("taxonomy {} has no labels", self.name)));
        }
        let mut seen = std::collections::BTreeSet::new();
        for l in &self.labels {
            if l.is_empty() || !seen.insert(l) {
                return Err(TableError::Invalid(format!(
                    "taxonomy {} label {l:?} empty or duplicate",
                    self.name
                )));
            }
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Feature windows

/// Everything the classifier may look at for one (resident, window) pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureWindow {
    pub resident: u8,
    pub start_ns: Nanos,
    pub end_ns: Nanos,
    /// Aligned records that fed this window.
    pub records: usize,
    pub mean_speed: f64,
    pub posture: Posture,
    /// Fraction of records with the voice detector active.
    pub voice_fraction: f64,
    pub cadence_spm: f64,
    pub cadence_cv: f64,
    pub energy_mean: f64,
    pub energy_max: f64,
    pub energy_std: f64,
    /// Fraction of floor-carrying records whose mat read as occupied.
    pub occupancy_fraction: f64,
    /// Latest appliance states visible by the end of the window.
    pub appliances: BTreeMap<u16, String>,
    pub temperature: Option<f64>,
    pub humidity: Option<f64>,
    /// Seconds since midnight at the window start.
    pub tod_s: f64,
}

/// Fields the activity table may reference, with their types.
pub const ACTIVITY_FIELDS: &[(&str, Kind)] = &[
    ("mean_speed", Kind::Num),
    ("posture", Kind::Str),
    ("voice_fraction", Kind::Num),
    ("cadence", Kind::Num),
    ("cadence_cv", Kind::Num),
    ("occupancy_fraction", Kind::Num),
    ("temperature", Kind::Num),
    ("humidity", Kind::Num),
    ("tod", Kind::Num),
];

/// The emotion table reads gait and voice only — no posture, no appliances.
pub const EMOTION_FIELDS: &[(&str, Kind)] = &[
    ("mean_speed", Kind::Num),
    ("cadence", Kind::Num),
    ("cadence_cv", Kind::Num),
    ("voice_fraction", Kind::Num),
    ("energy_mean", Kind::Num),
    ("energy_max", Kind::Num),
    ("energy_std", Kind::Num),
    ("tod", Kind::Num),
];

struct WindowScope<'a> {
    window: &'a FeatureWindow,
    devices_visible: bool,
}

impl Scope for WindowScope<'_> {
    fn field(&self, name: &str) -> Value {
        let w = self.window;
        match name {
            "mean_speed" => Value::Num(w.mean_speed),
            "posture" => Value::Str(w.posture.name().to_string()),
            "voice_fraction" => Value::Num(w.voice_fraction),
            "cadence" => Value::Num(w.cadence_spm),
            "cadence_cv" => Value::Num(w.cadence_cv),
            "energy_mean" => Value::Num(w.energy_mean),
            "energy_max" => Value::Num(w.energy_max),
            "energy_std" => Value::Num(w.energy_std),
            "occupancy_fraction" => Value::Num(w.occupancy_fraction),
            "temperature" => w.temperature.map_or(Value::Missing, Value::Num),
            "humidity" => w.humidity.map_or(Value::Missing, Value::Num),
            "tod" => Value::Num(w.tod_s),
            _ => Value::Missing,
        }
    }

    fn device(&self, id: u16) -> Value {
        if !self.devices_visible {
            return Value::Missing;
        }
        self.window.appliances.get(&id).cloned().map_or(Value::Missing, Value::Str)
    }
}

// ---------------------------------------------------------------------------
// Aggregation: per-record rows to windows

/// One aligned record reduced to the fields the window aggregator needs.
/// Rows are built per resident; room-level values (voice, floor, devices,
/// environment) repeat on every resident's rows.
#[derive(Debug, Clone, PartialEq)]
pub struct RecordRow {
    pub ref_ts: Nanos,
    pub posture: Posture,
    /// Blended track position, when the resident was seen this record.
    pub position: Option<(f64, f64)>,
    pub voice_active: bool,
    /// A microphone sample new to this record (dedup against staleness).
    pub mic_energy: Option<f64>,
    /// Floor occupancy, when a floor slot was present.
    pub occupied: Option<bool>,
    /// Appliance states as of this record.
    pub devices: BTreeMap<u16, String>,
    /// Environment sample carried by this record, if any.
    pub env: Option<(f64, f64)>,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct WindowConfig {
    pub window_s: f64,
    pub stride_s: f64,
    pub gait: GaitConfig,
}

impl Default for WindowConfig {
    fn default() -> Self {
        WindowConfig { window_s: 5.0, stride_s: 2.5, gait: GaitConfig::default() }
    }
}

/// Slices one resident's record rows into overlapping feature windows.
/// Windows start at `origin_ns` and step by the stride; spans with no
/// records (the resident away, sensors dark) produce no window at all.
pub fn window_features(
    resident: u8,
    rows: &[RecordRow],
    forces: &[(Nanos, f64)],
    origin_ns: Nanos,
    end_ns: Nanos,
    start_of_day_s: f64,
    cfg: &WindowConfig,
) -> Vec<FeatureWindow> {
    let window_ns = (cfg.window_s * NS_PER_SEC as f64) as Nanos;
    let stride_ns = (cfg.stride_s * NS_PER_SEC as f64) as Nanos;
    assert!(window_ns > 0 && stride_ns > 0, "window and stride must be positive");
    let mut out = Vec::new();
    let mut row_lo = 0usize;
    let mut force_lo = 0usize;
    let mut start = origin_ns;
    while start < end_ns {
        let end = start + window_ns;
        while row_lo < rows.len() && rows[row_lo].ref_ts < start {
            row_lo += 1;
        }
        while force_lo < forces.len() && forces[force_lo].0 < start {
            force_lo += 1;
        }
        let row_hi = rows[row_lo..].partition_point(|r| r.ref_ts < end) + row_lo;
        let force_hi = forces[force_lo..].partition_point(|f| f.0 < end) + force_lo;
        if row_hi > row_lo {
            out.push(build_window(
                resident,
                &rows[row_lo..row_hi],
                &forces[force_lo..force_hi],
                start,
                end,
                start_of_day_s,
                cfg,
            ));
        }
        start += stride_ns;
    }
    out
}

fn build_window(
    resident: u8,
    rows: &[RecordRow],
    forces: &[(Nanos, f64)],
    start: Nanos,
    end: Nanos,
    start_of_day_s: f64,
    cfg: &WindowConfig,
) -> FeatureWindow {
    let track: Vec<TrackPoint> = rows
        .iter()
        .filter_map(|r| {
            r.position.map(|(x, y)| TrackPoint { ts: r.ref_ts, x, y, speed_mps: 0.0 })
        })
        .collect();
    let gait = gait_features(&track, forces, &cfg.gait).unwrap_or(
        crate::features::GaitFeatures {
            mean_speed_mps: 0.0,
            step_count: 0,
            cadence_spm: 0.0,
            cadence_cv: 0.0,
        },
    );

    // Majority posture among known ones; ties prefer the more restful
    // reading (lying over sitting over standing), deterministically.
    let mut counts = [0usize; 3];
    for r in rows {
        match r.posture {
            Posture::Lying => counts[0] += 1,
            Posture::Sitting => counts[1] += 1,
            Posture::Standing => counts[2] += 1,
            Posture::Unknown => {}
        }
    }
    let posture = if counts == [0, 0, 0] {
        Posture::Unknown
    } else {
        let best = (0..3).max_by_key(|&i| (counts[i], 3 - i)).unwrap();
        [Posture::Lying, Posture::Sitting, Posture::Standing][best]
    };

    let voice_fraction =
        rows.iter().filter(|r| r.voice_active).count() as f64 / rows.len() as f64;

    let energies: Vec<f64> = rows.iter().filter_map(|r| r.mic_energy).collect();
    let (energy_mean, energy_max, energy_std) = if energies.is_empty() {
        (0.0, 0.0, 0.0)
    } else {
        let mean = energies.iter().sum::<f64>() / energies.len() as f64;
        let max = energies.iter().cloned().fold(f64::MIN, f64::max);
        let var =
            energies.iter().map(|e| (e - mean).powi(2)).sum::<f64>() / energies.len() as f64;
        (mean, max, var.sqrt())
    };

    let floor_rows = rows.iter().filter(|r| r.occupied.is_some()).count();
    let occupancy_fraction = if floor_rows == 0 {
        0.0
    } else {
        rows.iter().filter(|r| r.occupied == Some(true)).count() as f64 / floor_rows as f64
    };

    let envs: Vec<(f64, f64)> = rows.iter().filter_map(|r| r.env).collect();
    let (temperature, humidity) = if envs.is_empty() {
        (None, None)
    } else {
        let n = envs.len() as f64;
        (
            Some(envs.iter().map(|e| e.0).sum::<f64>() / n),
            Some(envs.iter().map(|e| e.1).sum::<f64>() / n),
        )
    };

    FeatureWindow {
        resident,
        start_ns: start,
        end_ns: end,
        records: rows.len(),
        mean_speed: gait.mean_speed_mps,
        posture,
        voice_fraction,
        cadence_spm: gait.cadence_spm,
        cadence_cv: gait.cadence_cv,
        energy_mean,
        energy_max,
        energy_std,
        occupancy_fraction,
        appliances: rows.last().unwrap().devices.clone(),
        temperature,
        humidity,
        tod_s: time_of_day_s(start, start_of_day_s),
    }
}

// ---------------------------------------------------------------------------
// Label tables (`shl2/1`)

pub const TABLES_VERSION: &str = "shl2/1";

#[derive(Debug, Clone)]
pub struct LabelRule {
    pub id: String,
    pub label: String,
    pub when: Expr,
    /// The original condition text, echoed into traces.
    pub source: String,
}

#[derive(Debug, Clone)]
pub struct ClassifierTable {
    pub taxonomy: Taxonomy,
    pub catch_all: String,
    pub rules: Vec<LabelRule>,
}

#[derive(Debug, Clone)]
pub struct Level2Tables {
    /// Appliance ids the conditions may reference.
    pub devices: Vec<u16>,
    pub activity: ClassifierTable,
    pub emotion: ClassifierTable,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawTables {
    version: String,
    #[serde(default)]
    devices: Vec<u16>,
    activity: RawTable,
    emotion: RawTable,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawTable {
    name: String,
    labels: Vec<String>,
    catch_all: String,
    #[serde(default)]
    rules: Vec<RawRule>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawRule {
    id: String,
    label: String,
    when: String,
}

impl ClassifierTable {
    fn from_raw(
        raw: RawTable,
        fields: &[(&str, Kind)],
        devices: &[u16],
    ) -> Result<ClassifierTable, TableError> {
        let taxonomy = Taxonomy { name: raw.name, labels: raw.labels };
        taxonomy.validate()?;
        if !taxonomy.contains(&raw.catch_all) {
            return Err(TableError::Invalid(format!(
                "catch_all {:?} not in taxonomy {}",
                raw.catch_all, taxonomy.name
            )));
        }
        let vocab = Vocabulary { fields, device_ids: devices, params: &[] };
        let mut ids = std::collections::BTreeSet::new();
        let mut rules = Vec::with_capacity(raw.rules.len());
        for r in raw.rules {
            if !ids.insert(r.id.clone()) {
                return Err(TableError::Invalid(format!("duplicate rule id {:?}", r.id)));
            }
            if !taxonomy.contains(&r.label) {
                return Err(TableError::Invalid(format!(
                    "rule {:?} labels {:?}, which is not in taxonomy {}",
                    r.id, r.label, taxonomy.name
                )));
            }
            let when = Expr::parse(&r.when)
                .and_then(|e| e.check(&vocab).map(|()| e))
                .map_err(|source| TableError::Rule { rule: r.id.clone(), source })?;
            rules.push(LabelRule { id: r.id, label: r.label, when, source: r.when });
        }
        Ok(ClassifierTable { taxonomy, catch_all: raw.catch_all, rules })
    }
}

impl Level2Tables {
    pub fn parse(text: &str) -> Result<Level2Tables, TableError> {
        let raw: RawTables =
            toml::from_str(text).map_err(|e| TableError::Parse(e.to_string()))?;
        if raw.version != TABLES_VERSION {
            return Err(TableError::Invalid(format!(
                "unsupported tables version {:?}",
                raw.version
            )));
        }
        Ok(Level2Tables {
            activity: ClassifierTable::from_raw(raw.activity, ACTIVITY_FIELDS, &raw.devices)?,
            emotion: ClassifierTable::from_raw(raw.emotion, EMOTION_FIELDS, &[])?,
            devices: raw.devices,
        })
    }

    pub fn load(path: &Path) -> Result<Level2Tables, TableError> {
        Level2Tables::parse(&std::fs::read_to_string(path)?)
    }

    /// The tables compiled into the binary; also the documented default.
    pub fn builtin() -> Level2Tables {
        Level2Tables::parse(include_str!("../../../fixtures/level2_default.toml"))
            .expect("embedded tables are valid")
    }

    /// Re-check the table's appliance references against the appliances a
    /// scenario actually declares.
    pub fn check_devices(&self, declared: &[u16]) -> Result<(), TableError> {
        for id in &self.devices {
            if !declared.contains(id) {
                return Err(TableError::Invalid(format!(
                    "tables reference appliance {id}, which the scenario does not declare"
                )));
            }
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Classification

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Labelled {
    pub label: String,
    /// How decisively the rule matched, in [0.05, 1]; the catch-all is a
    /// flat 0.5.
    pub confidence: f64,
    pub rule_id: String,
}

pub const CATCH_ALL_RULE: &str = "catch_all";
pub const SMOOTHED_RULE: &str = "smoothed";

fn classify(table: &ClassifierTable, scope: &dyn Scope) -> Labelled {
    for rule in &table.rules {
        if let Some(margin) = rule.when.margin(scope) {
            return Labelled {
                label: rule.label.clone(),
                confidence: margin.clamp(0.05, 1.0),
                rule_id: rule.id.clone(),
            };
        }
    }
    Labelled {
        label: table.catch_all.clone(),
        confidence: 0.5,
        rule_id: CATCH_ALL_RULE.to_string(),
    }
}

pub fn classify_activity(window: &FeatureWindow, tables: &Level2Tables) -> Labelled {
    classify(&tables.activity, &WindowScope { window, devices_visible: true })
}

pub fn classify_emotion(window: &FeatureWindow, tables: &Level2Tables) -> Labelled {
    classify(&tables.emotion, &WindowScope { window, devices_visible: false })
}

// ---------------------------------------------------------------------------
// Smoothing

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelledWindow {
    pub resident: u8,
    pub start_ns: Nanos,
    pub end_ns: Nanos,
    pub label: String,
    pub confidence: f64,
    pub rule_id: String,
}

/// Merges label runs shorter than `min_dwell` into the preceding run's
/// label (the leading run is exempt — there is nothing before it). Runs to
/// a fixpoint, so smoothing twice changes nothing; rewritten windows carry
/// the rule id [`SMOOTHED_RULE`].
pub fn smooth_labels(windows: &mut [LabelledWindow], min_dwell: usize) {
    if min_dwell < 2 || windows.is_empty() {
        return;
    }
    loop {
        // Runs as (start index, length).
        let mut runs: Vec<(usize, usize)> = Vec::new();
        for i in 0..windows.len() {
            match runs.last_mut() {
                Some((s, len)) if windows[*s].label == windows[i].label => *len += 1,
                _ => runs.push((i, 1)),
            }
        }
        let Some(&(start, len)) =
            runs.iter().skip(1).find(|&&(_, len)| len < min_dwell)
        else {
            return;
        };
        let prev_label = windows[start - 1].label.clone();
        for w in &mut windows[start..start + len] {
            w.label = prev_label.clone();
            w.rule_id = SMOOTHED_RULE.to_string();
        }
    }
}
