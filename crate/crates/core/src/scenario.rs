//! Scenario scripts: the `shs/1` file format and the ground truth it defines.
//!
//! A scenario is the complete, deterministic description of a run: room
//! geometry, scripted residents (waypoints, activity/emotion/speech/absence
//! timelines, gait), scripted appliance state changes, an environment
//! profile, and the sensor fleet that will observe it all. Everything the
//! simulator emits and everything evaluation scores against derives from
//! this one structure, so the loader validates it aggressively up front.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::clock::ClockModel;
use crate::state::{Posture, Taxonomy};
use crate::time::{parse_clock, secs_to_ns, Nanos};

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error("scenario io: {0}")]
    Io(#[from] std::io::Error),
    #[error("scenario parse: {0}")]
    Parse(String),
    #[error("scenario validation: {0}")]
    Validation(String),
}

/// Sensor channel kind. The discriminant doubles as the wire-level modality
/// byte.
#[derive(
    Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize,
)]
#[serde(rename_all = "snake_case")]
#[repr(u8)]
pub enum Modality {
    Camera = 0,
    Microphone = 1,
    FloorPressure = 2,
    Environment = 3,
    DeviceUsage = 4,
}

impl Modality {
    pub const ALL: [Modality; 5] = [
        Modality::Camera,
        Modality::Microphone,
        Modality::FloorPressure,
        Modality::Environment,
        Modality::DeviceUsage,
    ];

    pub fn from_wire(byte: u8) -> Option<Modality> {
        Modality::ALL.get(byte as usize).copied()
    }

    pub fn name(&self) -> &'static str {
        match self {
            Modality::Camera => "camera",
            Modality::Microphone => "microphone",
            Modality::FloorPressure => "floor_pressure",
            Modality::Environment => "environment",
            Modality::DeviceUsage => "device_usage",
        }
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Room {
    pub width_m: f64,
    pub height_m: f64,
}

/// A labelled half-open time span `[from, to)` in scenario seconds.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Span {
    pub from: f64,
    pub to: f64,
    pub label: String,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GaitProfile {
    /// Nominal walking speed; waypoints should be scripted consistently.
    pub speed_mps: f64,
    /// Steps per minute while moving, before emotion modulation.
    pub cadence_spm: f64,
}

impl Default for GaitProfile {
    fn default() -> Self {
        GaitProfile { speed_mps: 1.2, cadence_spm: 105.0 }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ResidentScript {
    pub id: u8,
    /// (t_s, x_m, y_m); position is piecewise-linear between waypoints and
    /// clamped outside their span.
    pub waypoints: Vec<(f64, f64, f64)>,
    #[serde(default)]
    pub activities: Vec<Span>,
    #[serde(default)]
    pub emotions: Vec<Span>,
    /// Intervals during which the resident speaks.
    #[serde(default)]
    pub speech: Vec<(f64, f64)>,
    /// Intervals during which the resident is out of the room entirely.
    #[serde(default)]
    pub away: Vec<(f64, f64)>,
    #[serde(default)]
    pub gait: GaitProfile,
}

/// Scripted appliance state change. A device's earliest event also declares
/// it; list one at `t_s = 0` to set an initial state.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DeviceEvent {
    pub t_s: f64,
    pub device: u16,
    pub state: String,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnvProfile {
    /// (t_s, degrees C) breakpoints, linearly interpolated.
    #[serde(default)]
    pub temperature: Vec<(f64, f64)>,
    /// (t_s, percent RH) breakpoints, linearly interpolated.
    #[serde(default)]
    pub humidity: Vec<(f64, f64)>,
}

/// Per-modality noise magnitudes, all defaulting to zero (noiseless).
#[derive(Debug, Clone, Copy, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NoiseSpec {
    /// Camera keypoint sigma in normalized image units.
    pub keypoint_sigma: f64,
    /// Microphone energy sigma (energies live in [0, 1]).
    pub energy_sigma: f64,
    /// Floor per-cell force sigma in Newtons.
    pub cell_sigma_n: f64,
    /// Environment temperature sigma in degrees C.
    pub temp_sigma_c: f64,
    /// Environment humidity sigma in percentage points.
    pub humidity_sigma: f64,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CameraConfig {
    pub position: [f64; 3],
    pub look_at: [f64; 3],
    #[serde(default = "default_up")]
    pub up: [f64; 3],
    /// Focal lengths and principal point in normalized image units
    /// (the full image spans [0, 1] on each axis).
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    #[serde(default = "default_near")]
    pub near_m: f64,
}

fn default_up() -> [f64; 3] {
    [0.0, 0.0, 1.0]
}

fn default_near() -> f64 {
    0.2
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FloorConfig {
    pub rows: u16,
    pub cols: u16,
    pub cell_m: f64,
    #[serde(default)]
    pub origin: [f64; 2],
}

/// Simulated network path between a sensor and the collector.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LatencyModel {
    pub base_ms: f64,
    pub jitter_ms: f64,
    /// Probability that a frame is lost in transit (seeded, deterministic).
    pub loss_rate: f64,
}

impl Default for LatencyModel {
    fn default() -> Self {
        LatencyModel { base_ms: 2.0, jitter_ms: 0.5, loss_rate: 0.0 }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SensorSpec {
    pub device_id: u16,
    pub modality: Modality,
    pub rate_hz: f64,
    #[serde(default = "ideal_clock")]
    pub clock: ClockModel,
    #[serde(default)]
    pub noise: NoiseSpec,
    #[serde(default)]
    pub camera: Option<CameraConfig>,
    #[serde(default)]
    pub floor: Option<FloorConfig>,
    /// For `device_usage` sensors: the appliance whose state is reported.
    #[serde(default)]
    pub watches: Option<u16>,
    /// Axis-aligned (x0, y0, x1, y1) region this camera refuses to observe.
    #[serde(default)]
    pub privacy_zone: Option<[f64; 4]>,
    #[serde(default)]
    pub latency: LatencyModel,
    /// Intervals during which the sensor is down: no samples, no heartbeats,
    /// a fresh HELLO (and sequence reset) on recovery.
    #[serde(default)]
    pub outages: Vec<(f64, f64)>,
    #[serde(default = "default_heartbeat")]
    pub heartbeat_s: f64,
}

fn ideal_clock() -> ClockModel {
    ClockModel::ideal()
}

fn default_heartbeat() -> f64 {
    1.0
}

/// Schedule for four-timestamp sync exchanges, shared by all sensors.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyncPlan {
    pub interval_s: f64,
    pub rounds_per_epoch: u32,
    pub path: LatencyModel,
}

impl Default for SyncPlan {
    fn default() -> Self {
        SyncPlan {
            interval_s: 10.0,
            rounds_per_epoch: 8,
            path: LatencyModel { base_ms: 2.0, jitter_ms: 0.0, loss_rate: 0.0 },
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    /// Format tag; must be `"shs/1"`.
    pub version: String,
    #[serde(default)]
    pub name: String,
    pub duration_s: f64,
    pub seed: u64,
    /// Wall-clock time of day at scenario start, `"HH:MM"` or `"HH:MM:SS"`.
    #[serde(default = "default_start_of_day")]
    pub start_of_day: String,
    pub room: Room,
    #[serde(default)]
    pub residents: Vec<ResidentScript>,
    #[serde(default)]
    pub devices: Vec<DeviceEvent>,
    #[serde(default)]
    pub environment: EnvProfile,
    #[serde(default)]
    pub sync: SyncPlan,
    pub sensors: Vec<SensorSpec>,
}

fn default_start_of_day() -> String {
    "08:00".to_string()
}

pub const SCENARIO_VERSION: &str = "shs/1";

/// Activity labels that put the body in each posture, used both to pose the
/// simulated skeleton and to derive ground-truth posture.
pub fn posture_for_activity(activity: &str) -> Posture {
    match activity {
        "lying" | "sleeping" => Posture::Lying,
        "sitting" | "reading" | "watching_tv" | "eating" => Posture::Sitting,
        _ => Posture::Standing,
    }
}

impl Scenario {
    pub fn duration_ns(&self) -> Nanos {
        secs_to_ns(self.duration_s)
    }

    pub fn start_of_day_s(&self) -> f64 {
        parse_clock(&self.start_of_day).expect("validated at load")
    }

    /// All appliance ids the scenario declares (the command target universe).
    pub fn device_ids(&self) -> BTreeSet<u16> {
        self.devices.iter().map(|e| e.device).collect()
    }

    pub fn sensor(&self, device_id: u16) -> Option<&SensorSpec> {
        self.sensors.iter().find(|s| s.device_id == device_id)
    }

    /// Stable 64-bit digest of the full scenario content.
    pub fn hash64(&self) -> u64 {
        let json = serde_json::to_vec(self).expect("scenario serializes");
        let digest = Sha256::digest(&json);
        u64::from_be_bytes(digest[..8].try_into().unwrap())
    }

    pub fn validate(&self) -> Result<(), ScenarioError> {
        self.validate_with(&Taxonomy::default_activity(), &Taxonomy::default_emotion())
    }

    pub fn validate_with(
        &self,
        activity_tax: &Taxonomy,
        emotion_tax: &Taxonomy,
    ) -> Result<(), ScenarioError> {
        let fail = |msg: String| Err(ScenarioError::Validation(msg));
        if self.version != SCENARIO_VERSION {
            return fail(format!("unsupported scenario version {:?}", self.version));
        }
        if !(self.duration_s > 0.0 && self.duration_s <= 86_400.0) {
            return fail(format!("duration_s {} out of (0, 86400]", self.duration_s));
        }
        if parse_clock(&self.start_of_day).is_none() {
            return fail(format!("start_of_day {:?} is not HH:MM[:SS]", self.start_of_day));
        }
        if !(self.room.width_m > 0.0 && self.room.height_m > 0.0) {
            return fail("room dimensions must be positive".into());
        }
        if !(self.sync.interval_s > 0.0) || self.sync.rounds_per_epoch == 0 {
            return fail("sync plan needs positive interval and rounds".into());
        }
        self.validate_residents(activity_tax, emotion_tax)?;
        for ev in &self.devices {
            if ev.t_s < 0.0 || ev.t_s > self.duration_s {
                return fail(format!("device event at {} s outside scenario", ev.t_s));
            }
            if ev.state.is_empty() {
                return fail(format!("device {} event has empty state", ev.device));
            }
        }
        for series in [&self.environment.temperature, &self.environment.humidity] {
            if series.windows(2).any(|w| w[1].0 < w[0].0) {
                return fail("environment breakpoints must be time-sorted".into());
            }
        }
        self.validate_sensors()
    }

    fn validate_residents(
        &self,
        activity_tax: &Taxonomy,
        emotion_tax: &Taxonomy,
    ) -> Result<(), ScenarioError> {
        let fail = |msg: String| Err(ScenarioError::Validation(msg));
        let mut ids = BTreeSet::new();
        for r in &self.residents {
            if !ids.insert(r.id) {
                return fail(format!("duplicate resident id {}", r.id));
            }
            if r.waypoints.is_empty() {
                return fail(format!("resident {} has no waypoints", r.id));
            }
            for pair in r.waypoints.windows(2) {
                if pair[1].0 < pair[0].0 {
                    return fail(format!("resident {} waypoints not time-sorted", r.id));
                }
            }
            for &(t, x, y) in &r.waypoints {
                if t < 0.0 || t > self.duration_s {
                    return fail(format!("resident {} waypoint at {} s outside scenario", r.id, t));
                }
                if x < 0.0 || x > self.room.width_m || y < 0.0 || y > self.room.height_m {
                    return fail(format!(
                        "resident {} waypoint ({x}, {y}) outside the {} x {} room",
                        r.id, self.room.width_m, self.room.height_m
                    ));
                }
            }
            for (what, spans, tax) in [
                ("activity", &r.activities, Some(activity_tax)),
                ("emotion", &r.emotions, Some(emotion_tax)),
            ] {
                let mut prev_end = f64::NEG_INFINITY;
                for s in spans.iter() {
                    if !(s.from < s.to) || s.from < 0.0 || s.to > self.duration_s {
                        return fail(format!(
                            "resident {} {what} span [{}, {}) invalid",
                            r.id, s.from, s.to
                        ));
                    }
                    if s.from < prev_end {
                        return fail(format!("resident {} {what} spans overlap", r.id));
                    }
                    prev_end = s.to;
                    if let Some(tax) = tax {
                        if !tax.contains(&s.label) {
                            return fail(format!(
                                "resident {} {what} label {:?} not in taxonomy {}",
                                r.id, s.label, tax.name
                            ));
                        }
                    }
                }
            }
            for (what, spans) in [("speech", &r.speech), ("away", &r.away)] {
                let mut prev_end = f64::NEG_INFINITY;
                for &(a, b) in spans.iter() {
                    if !(a < b) || a < 0.0 || b > self.duration_s {
                        return fail(format!("resident {} {what} span [{a}, {b}) invalid", r.id));
                    }
                    if a < prev_end {
                        return fail(format!("resident {} {what} spans overlap", r.id));
                    }
                    prev_end = b;
                }
            }
            if r.gait.speed_mps < 0.0 || !(0.0..=300.0).contains(&r.gait.cadence_spm) {
                return fail(format!("resident {} gait profile out of range", r.id));
            }
        }
        Ok(())
    }

    fn validate_sensors(&self) -> Result<(), ScenarioError> {
        let fail = |msg: String| Err(ScenarioError::Validation(msg));
        if self.sensors.is_empty() {
            return fail("scenario declares no sensors".into());
        }
        let declared_devices = self.device_ids();
        let mut ids = BTreeSet::new();
        for s in &self.sensors {
            if !ids.insert(s.device_id) {
                return fail(format!("duplicate sensor device_id {}", s.device_id));
            }
            if !(s.rate_hz > 0.0 && s.rate_hz <= 1000.0) {
                return fail(format!("sensor {} rate_hz {} out of (0, 1000]", s.device_id, s.rate_hz));
            }
            if let Err(e) = s.clock.validate() {
                return fail(format!("sensor {}: {e}", s.device_id));
            }
            match s.modality {
                Modality::Camera => {
                    let cam = s.camera.as_ref().ok_or_else(|| {
                        ScenarioError::Validation(format!(
                            "camera sensor {} missing [sensors.camera] geometry",
                            s.device_id
                        ))
                    })?;
                    if !(cam.fx != 0.0 && cam.fy != 0.0) {
                        return fail(format!("camera {} has zero focal length", s.device_id));
                    }
                    if cam.near_m <= 0.0 {
                        return fail(format!("camera {} near plane must be positive", s.device_id));
                    }
                    let d: f64 = (0..3)
                        .map(|i| (cam.look_at[i] - cam.position[i]).powi(2))
                        .sum::<f64>();
                    if d <= 1e-12 {
                        return fail(format!("camera {} look_at equals position", s.device_id));
                    }
                }
                Modality::FloorPressure => {
                    let f = s.floor.as_ref().ok_or_else(|| {
                        ScenarioError::Validation(format!(
                            "floor sensor {} missing [sensors.floor] geometry",
                            s.device_id
                        ))
                    })?;
                    if f.rows == 0 || f.cols == 0 || f.cell_m <= 0.0 {
                        return fail(format!("floor sensor {} grid invalid", s.device_id));
                    }
                }
                Modality::DeviceUsage => {
                    // `watches` pins the sensor to one appliance; without it
                    // the sensor is a hub that reports every declared one.
                    match s.watches {
                        Some(watched) if !declared_devices.contains(&watched) => {
                            return fail(format!(
                                "usage sensor {} watches undeclared device {}",
                                s.device_id, watched
                            ));
                        }
                        None if declared_devices.is_empty() => {
                            return fail(format!(
                                "usage sensor {} has no appliances to report: declare \
                                 devices or set `watches`",
                                s.device_id
                            ));
                        }
                        _ => {}
                    }
                }
                Modality::Microphone | Modality::Environment => {}
            }
            if let Some(z) = s.privacy_zone {
                if !(z[0] < z[2] && z[1] < z[3]) {
                    return fail(format!("sensor {} privacy_zone not a positive rect", s.device_id));
                }
            }
            let l = &s.latency;
            if l.base_ms < 0.0 || l.jitter_ms < 0.0 || !(0.0..1.0).contains(&l.loss_rate) {
                return fail(format!("sensor {} latency model invalid", s.device_id));
            }
            let mut prev_end = f64::NEG_INFINITY;
            for &(a, b) in &s.outages {
                if !(a < b) || a < 0.0 || b > self.duration_s {
                    return fail(format!("sensor {} outage [{a}, {b}) invalid", s.device_id));
                }
                if a < prev_end {
                    return fail(format!("sensor {} outages overlap", s.device_id));
                }
                prev_end = b;
            }
            if s.heartbeat_s <= 0.0 {
                return fail(format!("sensor {} heartbeat_s must be positive", s.device_id));
            }
        }
        Ok(())
    }

    /// Full ground truth at one instant.
    pub fn truth_at(&self, t_ns: Nanos) -> TruthSample {
        let t = t_ns as f64 / 1e9;
        let residents = self
            .residents
            .iter()
            .map(|r| {
                let away = r.away.iter().any(|&(a, b)| t >= a && t < b);
                let activity = label_at(&r.activities, t).unwrap_or("idle").to_string();
                let emotion = label_at(&r.emotions, t).unwrap_or("neutral").to_string();
                ResidentTruth {
                    id: r.id,
                    position: if away { None } else { Some(position_at(&r.waypoints, t)) },
                    posture: posture_for_activity(&activity),
                    activity,
                    emotion,
                    speaking: !away && r.speech.iter().any(|&(a, b)| t >= a && t < b),
                }
            })
            .collect();
        let mut devices = BTreeMap::new();
        for ev in &self.devices {
            match devices.entry(ev.device) {
                std::collections::btree_map::Entry::Vacant(v) => {
                    // Earliest event doubles as the declared initial state.
                    v.insert(ev.state.clone());
                }
                std::collections::btree_map::Entry::Occupied(mut o) => {
                    if ev.t_s <= t {
                        o.insert(ev.state.clone());
                    }
                }
            }
        }
        TruthSample {
            t_ns,
            residents,
            devices,
            temperature_c: interp(&self.environment.temperature, t, 20.0),
            humidity_pct: interp(&self.environment.humidity, t, 45.0),
        }
    }
}

fn label_at(spans: &[Span], t: f64) -> Option<&str> {
    spans.iter().find(|s| t >= s.from && t < s.to).map(|s| s.label.as_str())
}

fn position_at(waypoints: &[(f64, f64, f64)], t: f64) -> (f64, f64) {
    let first = waypoints[0];
    if t <= first.0 {
        return (first.1, first.2);
    }
    for pair in waypoints.windows(2) {
        let (t0, x0, y0) = pair[0];
        let (t1, x1, y1) = pair[1];
        if t >= t0 && t < t1 {
            if t1 == t0 {
                return (x1, y1);
            }
            let a = (t - t0) / (t1 - t0);
            return (x0 + a * (x1 - x0), y0 + a * (y1 - y0));
        }
    }
    let last = waypoints[waypoints.len() - 1];
    (last.1, last.2)
}

fn interp(series: &[(f64, f64)], t: f64, default: f64) -> f64 {
    if series.is_empty() {
        return default;
    }
    if t <= series[0].0 {
        return series[0].1;
    }
    for pair in series.windows(2) {
        let (t0, v0) = pair[0];
        let (t1, v1) = pair[1];
        if t >= t0 && t < t1 {
            if t1 == t0 {
                return v1;
            }
            return v0 + (t - t0) / (t1 - t0) * (v1 - v0);
        }
    }
    series[series.len() - 1].1
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ResidentTruth {
    pub id: u8,
    /// None while the resident is scripted away (out of the room).
    pub position: Option<(f64, f64)>,
    pub posture: Posture,
    pub activity: String,
    pub emotion: String,
    pub speaking: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TruthSample {
    pub t_ns: Nanos,
    pub residents: Vec<ResidentTruth>,
    pub devices: BTreeMap<u16, String>,
    pub temperature_c: f64,
    pub humidity_pct: f64,
}

impl TruthSample {
    /// True when no resident is physically present.
    pub fn room_empty(&self) -> bool {
        self.residents.iter().all(|r| r.position.is_none())
    }
}

pub fn load_scenario(path: &Path) -> Result<Scenario, ScenarioError> {
    let text = std::fs::read_to_string(path)?;
    parse_scenario(&text)
}

pub fn parse_scenario(text: &str) -> Result<Scenario, ScenarioError> {
    let scenario: Scenario =
        toml::from_str(text).map_err(|e| ScenarioError::Parse(e.to_string()))?;
    scenario.validate()?;
    Ok(scenario)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn minimal_toml() -> String {
        r#"
version = "shs/1"
name = "unit"
duration_s = 60.0
seed = 9
start_of_day = "10:00"

[room]
width_m = 10.0
height_m = 6.0

[[residents]]
id = 1
waypoints = [[0.0, 1.0, 1.0], [30.0, 8.0, 4.0]]
activities = [{ from = 0.0, to = 60.0, label = "walking" }]
emotions = [{ from = 0.0, to = 60.0, label = "neutral" }]
speech = [[5.0, 10.0]]

[[devices]]
t_s = 0.0
device = 20
state = "on"

[environment]
temperature = [[0.0, 21.0], [60.0, 22.0]]
humidity = [[0.0, 45.0]]

[[sensors]]
device_id = 1
modality = "camera"
rate_hz = 15.0
camera = { position = [0.2, 0.2, 2.4], look_at = [5.0, 3.0, 1.0], fx = 0.9, fy = 1.2, cx = 0.5, cy = 0.5 }

[[sensors]]
device_id = 5
modality = "environment"
rate_hz = 1.0
"#
        .to_string()
    }

    #[test]
    fn parses_and_validates_minimal_scenario() {
        let s = parse_scenario(&minimal_toml()).unwrap();
        assert_eq!(s.sensors.len(), 2);
        assert_eq!(s.sensors[0].modality, Modality::Camera);
        assert_eq!(s.device_ids().into_iter().collect::<Vec<_>>(), vec![20]);
        assert_eq!(s.start_of_day_s(), 36_000.0);
    }

    #[test]
    fn env_sensor_tick_budget() {
        // 1 Hz over the 60 s scenario means exactly 60 sample instants; the
        // emitter is tested against this in sim, the schedule math here.
        let s = parse_scenario(&minimal_toml()).unwrap();
        let rate = s.sensors[1].rate_hz;
        let ticks = (0..).map(|k| k as f64 / rate).take_while(|t| *t < s.duration_s).count();
        assert_eq!(ticks, 60);
    }

    #[test]
    fn truth_interpolates_position_and_env() {
        let s = parse_scenario(&minimal_toml()).unwrap();
        let t = s.truth_at(15 * crate::time::NS_PER_SEC);
        let pos = t.residents[0].position.unwrap();
        assert!((pos.0 - 4.5).abs() < 1e-9 && (pos.1 - 2.5).abs() < 1e-9);
        assert!((t.temperature_c - 21.25).abs() < 1e-9);
        assert_eq!(t.residents[0].activity, "walking");
        assert_eq!(t.residents[0].posture, Posture::Standing);
        assert!(t.residents[0].speaking == false);
        let t2 = s.truth_at(7 * crate::time::NS_PER_SEC);
        assert!(t2.residents[0].speaking);
    }

    #[test]
    fn away_interval_empties_the_room() {
        let mut s = parse_scenario(&minimal_toml()).unwrap();
        s.residents[0].away = vec![(20.0, 30.0)];
        s.validate().unwrap();
        assert!(!s.truth_at(19 * crate::time::NS_PER_SEC).room_empty());
        assert!(s.truth_at(20 * crate::time::NS_PER_SEC).room_empty());
        assert!(s.truth_at(29 * crate::time::NS_PER_SEC).room_empty());
        assert!(!s.truth_at(30 * crate::time::NS_PER_SEC).room_empty());
    }

    #[test]
    fn rejects_bad_version_and_geometry() {
        let bad_version = minimal_toml().replace("shs/1", "shs/2");
        assert!(matches!(
            parse_scenario(&bad_version),
            Err(ScenarioError::Validation(_))
        ));

        let outside_room = minimal_toml().replace("[30.0, 8.0, 4.0]", "[30.0, 80.0, 4.0]");
        assert!(matches!(parse_scenario(&outside_room), Err(ScenarioError::Validation(_))));

        let no_camera_block = minimal_toml().replace(
            "camera = { position = [0.2, 0.2, 2.4], look_at = [5.0, 3.0, 1.0], fx = 0.9, fy = 1.2, cx = 0.5, cy = 0.5 }",
            "",
        );
        assert!(matches!(parse_scenario(&no_camera_block), Err(ScenarioError::Validation(_))));
    }

    #[test]
    fn rejects_unknown_labels_and_overlaps() {
        let unknown_label = minimal_toml().replace("\"walking\"", "\"moonwalking\"");
        assert!(matches!(parse_scenario(&unknown_label), Err(ScenarioError::Validation(_))));

        let mut s = parse_scenario(&minimal_toml()).unwrap();
        s.residents[0].activities = vec![
            Span { from: 0.0, to: 40.0, label: "walking".into() },
            Span { from: 30.0, to: 60.0, label: "sitting".into() },
        ];
        assert!(s.validate().is_err());
    }

    #[test]
    fn rejects_unknown_keys() {
        let extra = minimal_toml() + "\nmystery_knob = 3\n";
        assert!(matches!(parse_scenario(&extra), Err(ScenarioError::Parse(_))));
    }

    #[test]
    fn usage_sensor_must_watch_declared_device() {
        let extra = minimal_toml()
            + r#"
[[sensors]]
device_id = 9
modality = "device_usage"
rate_hz = 1.0
watches = 99
"#;
        let err = parse_scenario(&extra).unwrap_err();
        assert!(matches!(err, ScenarioError::Validation(ref m) if m.contains("undeclared")));
    }

    #[test]
    fn hash_is_stable_and_content_sensitive() {
        let a = parse_scenario(&minimal_toml()).unwrap();
        let b = parse_scenario(&minimal_toml()).unwrap();
        assert_eq!(a.hash64(), b.hash64());
        let c = parse_scenario(&minimal_toml().replace("seed = 9", "seed = 10")).unwrap();
        assert_ne!(a.hash64(), c.hash64());
    }
}
