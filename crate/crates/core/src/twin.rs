//! World-state snapshots for a digital-twin consumer.
//!
//! A snapshot is the complete believed state of the room at one reference
//! instant: residents (position, posture, labels), appliance states, the
//! environment, and per-sensor health, stamped with the run that produced
//! it. Snapshots serialize as line-delimited JSON (`sht/1`), and pairs of
//! snapshots diff into path-level patches so a consumer can follow a stream
//! incrementally.
//!
//! "No data" is never silently dropped: a field with no value serializes as
//! an explicit `null`, and a *missing map entry* (a resident or device not
//! present at all) is distinct from an entry holding nulls. Diff entries
//! carry that distinction through the `absent` slot kind.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use serde_json::Value as Json;
use thiserror::Error;

use crate::features::TrackPoint;
use crate::state::LabelledWindow;
use crate::time::{Nanos, NS_PER_SEC};

pub const TWIN_VERSION: &str = "sht/1";

#[derive(Debug, Error)]
pub enum TwinError {
    #[error("snapshot ts {ts} outside the run span [{start}, {end}]")]
    OutOfRange { ts: Nanos, start: Nanos, end: Nanos },
    #[error("diff requires a.ts <= b.ts (got {a} > {b})")]
    OrderViolation { a: Nanos, b: Nanos },
    #[error("patch does not match the base snapshot at `{path}`")]
    PatchMismatch { path: String },
    #[error("snapshot parse: {0}")]
    Parse(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub run_id: String,
    pub config_hash: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoomBounds {
    pub width_m: f64,
    pub height_m: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TwinResident {
    pub position: Option<(f64, f64)>,
    pub posture: Option<String>,
    pub activity: Option<String>,
    pub activity_confidence: Option<f64>,
    pub emotion: Option<String>,
    pub emotion_confidence: Option<f64>,
}

impl TwinResident {
    pub fn empty() -> TwinResident {
        TwinResident {
            position: None,
            posture: None,
            activity: None,
            activity_confidence: None,
            emotion: None,
            emotion_confidence: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SensorHealth {
    /// Session lifecycle state as the collector last knew it.
    pub state: String,
    pub last_seen_ns: Option<Nanos>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Environment {
    pub temperature_c: Option<f64>,
    pub humidity_pct: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TwinSnapshot {
    pub version: String,
    pub ts: Nanos,
    pub room: RoomBounds,
    pub residents: BTreeMap<u8, TwinResident>,
    pub devices: BTreeMap<u16, String>,
    pub environment: Environment,
    pub sensor_health: BTreeMap<u16, SensorHealth>,
    pub provenance: Provenance,
}

impl TwinSnapshot {
    /// One JSON line, no trailing newline. Deterministic: maps are ordered.
    pub fn serialize(&self) -> String {
        serde_json::to_string(self).expect("snapshots always serialize")
    }

    pub fn parse(line: &str) -> Result<TwinSnapshot, TwinError> {
        let snap: TwinSnapshot =
            serde_json::from_str(line).map_err(|e| TwinError::Parse(e.to_string()))?;
        if snap.version != TWIN_VERSION {
            return Err(TwinError::Parse(format!(
                "unsupported snapshot version {:?}",
                snap.version
            )));
        }
        Ok(snap)
    }
}

// ---------------------------------------------------------------------------
// Building snapshots from fusion output series

/// Time-ordered fusion outputs a snapshot stream reads from. All series are
/// sorted by timestamp; lookups are last-value-at-or-before.
#[derive(Debug, Clone, Default)]
pub struct TwinInputs {
    pub run_id: String,
    pub config_hash: String,
    pub room_w: f64,
    pub room_h: f64,
    pub start_ns: Nanos,
    pub end_ns: Nanos,
    pub tracks: BTreeMap<u8, Vec<TrackPoint>>,
    pub postures: BTreeMap<u8, Vec<(Nanos, String)>>,
    pub activities: BTreeMap<u8, Vec<LabelledWindow>>,
    pub emotions: BTreeMap<u8, Vec<LabelledWindow>>,
    pub device_events: BTreeMap<u16, Vec<(Nanos, String)>>,
    pub env_series: Vec<(Nanos, f64, f64)>,
}

fn last_at<T>(series: &[T], ts: Nanos, key: impl Fn(&T) -> Nanos) -> Option<&T> {
    let idx = series.partition_point(|x| key(x) <= ts);
    if idx == 0 { None } else { Some(&series[idx - 1]) }
}

/// All residents that appear anywhere in the inputs; a resident with no data
/// yet at some ts still gets an (all-null) entry.
fn resident_ids(inputs: &TwinInputs) -> Vec<u8> {
    let mut ids: Vec<u8> = inputs
        .tracks
        .keys()
        .chain(inputs.postures.keys())
        .chain(inputs.activities.keys())
        .chain(inputs.emotions.keys())
        .copied()
        .collect();
    ids.sort_unstable();
    ids.dedup();
    ids
}

pub fn build_snapshot(
    inputs: &TwinInputs,
    health: &BTreeMap<u16, SensorHealth>,
    ts: Nanos,
) -> Result<TwinSnapshot, TwinError> {
    if ts < inputs.start_ns || ts > inputs.end_ns {
        return Err(TwinError::OutOfRange { ts, start: inputs.start_ns, end: inputs.end_ns });
    }
    let mut residents = BTreeMap::new();
    for id in resident_ids(inputs) {
        let mut r = TwinResident::empty();
        if let Some(track) = inputs.tracks.get(&id) {
            if let Some(p) = last_at(track, ts, |p| p.ts) {
                r.position = Some((p.x, p.y));
            }
        }
        if let Some(series) = inputs.postures.get(&id) {
            if let Some((_, posture)) = last_at(series, ts, |x| x.0) {
                r.posture = Some(posture.clone());
            }
        }
        if let Some(windows) = inputs.activities.get(&id) {
            if let Some(w) = last_at(windows, ts, |w| w.start_ns) {
                r.activity = Some(w.label.clone());
                r.activity_confidence = Some(w.confidence);
            }
        }
        if let Some(windows) = inputs.emotions.get(&id) {
            if let Some(w) = last_at(windows, ts, |w| w.start_ns) {
                r.emotion = Some(w.label.clone());
                r.emotion_confidence = Some(w.confidence);
            }
        }
        residents.insert(id, r);
    }
    let mut devices = BTreeMap::new();
    for (id, events) in &inputs.device_events {
        if let Some((_, state)) = last_at(events, ts, |x| x.0) {
            devices.insert(*id, state.clone());
        }
    }
    let env = last_at(&inputs.env_series, ts, |x| x.0);
    Ok(TwinSnapshot {
        version: TWIN_VERSION.to_string(),
        ts,
        room: RoomBounds { width_m: inputs.room_w, height_m: inputs.room_h },
        residents,
        devices,
        environment: Environment {
            temperature_c: env.map(|e| e.1),
            humidity_pct: env.map(|e| e.2),
        },
        sensor_health: health.clone(),
        provenance: Provenance {
            run_id: inputs.run_id.clone(),
            config_hash: inputs.config_hash.clone(),
        },
    })
}

/// Snapshots on a fixed cadence grid from the run start (exclusive of the
/// end instant): 1 Hz over a 600 s run yields 600 snapshots.
pub fn snapshot_stream(
    inputs: &TwinInputs,
    cadence_hz: f64,
    health_at: &dyn Fn(Nanos) -> BTreeMap<u16, SensorHealth>,
) -> Result<Vec<TwinSnapshot>, TwinError> {
    assert!(cadence_hz > 0.0, "cadence must be positive");
    let step = (NS_PER_SEC as f64 / cadence_hz).round() as Nanos;
    let mut out = Vec::new();
    let mut ts = inputs.start_ns;
    while ts < inputs.end_ns {
        out.push(build_snapshot(inputs, &health_at(ts), ts)?);
        ts += step;
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Diff / apply

/// A field's value on one side of a diff. `Absent` (the map entry does not
/// exist) is not the same thing as `Value(null)` (the entry exists and holds
/// no data).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "value", rename_all = "snake_case")]
pub enum Slot {
    Absent,
    Value(Json),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiffEntry {
    /// `/`-joined path into the snapshot object, e.g. `devices/13`.
    pub path: String,
    pub old: Slot,
    pub new: Slot,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SnapshotDiff {
    pub from_ts: Nanos,
    pub to_ts: Nanos,
    pub changes: Vec<DiffEntry>,
}

impl SnapshotDiff {
    pub fn is_empty(&self) -> bool {
        self.changes.is_empty()
    }
}

fn snapshot_value(snap: &TwinSnapshot) -> serde_json::Map<String, Json> {
    let Json::Object(mut map) = serde_json::to_value(snap).expect("snapshot to value") else {
        unreachable!("a snapshot serializes to an object")
    };
    // The timestamp rides in the diff header, not in the change list.
    map.remove("ts");
    map
}

fn walk(path: &str, a: &Json, b: &Json, out: &mut Vec<DiffEntry>) {
    if a == b {
        return;
    }
    match (a, b) {
        (Json::Object(ma), Json::Object(mb)) => {
            let mut keys: Vec<&String> = ma.keys().chain(mb.keys()).collect();
            keys.sort();
            keys.dedup();
            for key in keys {
                let child = if path.is_empty() {
                    key.clone()
                } else {
                    format!("{path}/{key}")
                };
                match (ma.get(key), mb.get(key)) {
                    (Some(x), Some(y)) => walk(&child, x, y, out),
                    (Some(x), None) => out.push(DiffEntry {
                        path: child,
                        old: Slot::Value(x.clone()),
                        new: Slot::Absent,
                    }),
                    (None, Some(y)) => out.push(DiffEntry {
                        path: child,
                        old: Slot::Absent,
                        new: Slot::Value(y.clone()),
                    }),
                    (None, None) => unreachable!(),
                }
            }
        }
        // Scalars, nulls and arrays (positions) replace atomically.
        _ => out.push(DiffEntry {
            path: path.to_string(),
            old: Slot::Value(a.clone()),
            new: Slot::Value(b.clone()),
        }),
    }
}

pub fn diff(a: &TwinSnapshot, b: &TwinSnapshot) -> Result<SnapshotDiff, TwinError> {
    if a.ts > b.ts {
        return Err(TwinError::OrderViolation { a: a.ts, b: b.ts });
    }
    let (va, vb) = (snapshot_value(a), snapshot_value(b));
    let mut changes = Vec::new();
    walk("", &Json::Object(va), &Json::Object(vb), &mut changes);
    Ok(SnapshotDiff { from_ts: a.ts, to_ts: b.ts, changes })
}

pub fn apply(base: &TwinSnapshot, patch: &SnapshotDiff) -> Result<TwinSnapshot, TwinError> {
    if base.ts != patch.from_ts {
        return Err(TwinError::PatchMismatch { path: "ts".to_string() });
    }
    let mut map = snapshot_value(base);
    for entry in &patch.changes {
        let mismatch = || TwinError::PatchMismatch { path: entry.path.clone() };
        let mut segments: Vec<&str> = entry.path.split('/').collect();
        let leaf = segments.pop().ok_or_else(mismatch)?;
        let mut parent = &mut map;
        for seg in segments {
            parent = match parent.get_mut(seg) {
                Some(Json::Object(obj)) => obj,
                _ => return Err(mismatch()),
            };
        }
        let current = parent.get(leaf);
        let matches = match &entry.old {
            Slot::Absent => current.is_none(),
            Slot::Value(v) => current == Some(v),
        };
        if !matches {
            return Err(mismatch());
        }
        match &entry.new {
            Slot::Absent => {
                parent.remove(leaf);
            }
            Slot::Value(v) => {
                parent.insert(leaf.to_string(), v.clone());
            }
        }
    }
    map.insert("ts".to_string(), Json::from(patch.to_ts));
    serde_json::from_value(Json::Object(map))
        .map_err(|e| TwinError::Parse(format!("patched snapshot is malformed: {e}")))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn sample_snapshot() -> TwinSnapshot {
        let mut residents = BTreeMap::new();
        residents.insert(
            1,
            TwinResident {
                position: Some((3.25, 2.0)),
                posture: Some("standing".into()),
                activity: Some("walking".into()),
                activity_confidence: Some(0.8),
                emotion: Some("happy".into()),
                emotion_confidence: Some(0.6),
            },
        );
        let mut devices = BTreeMap::new();
        devices.insert(13, "off".to_string());
        devices.insert(14, "on".to_string());
        let mut health = BTreeMap::new();
        health.insert(10, SensorHealth { state: "active".into(), last_seen_ns: Some(99) });
        TwinSnapshot {
            version: TWIN_VERSION.into(),
            ts: 1_000_000_000,
            room: RoomBounds { width_m: 8.0, height_m: 6.0 },
            residents,
            devices,
            environment: Environment { temperature_c: Some(21.0), humidity_pct: None },
            sensor_health: health,
            provenance: Provenance { run_id: "r1".into(), config_hash: "c1".into() },
        }
    }

    #[test]
    fn serialization_is_versioned_with_explicit_nulls() {
        let mut snap = sample_snapshot();
        snap.residents.get_mut(&1).unwrap().position = None;
        snap.environment.temperature_c = None;
        let line = snap.serialize();
        assert!(line.contains("\"version\":\"sht/1\""));
        assert!(line.contains("\"position\":null"));
        assert!(line.contains("\"temperature_c\":null"));
        assert!(line.contains("\"humidity_pct\":null"));
        assert!(!line.contains('\n'));
        assert_eq!(TwinSnapshot::parse(&line).unwrap(), snap);
    }

    #[test]
    fn parse_rejects_unknown_version() {
        let line = sample_snapshot().serialize().replace("sht/1", "sht/9");
        assert!(matches!(TwinSnapshot::parse(&line), Err(TwinError::Parse(_))));
    }

    #[test]
    fn identical_snapshots_diff_empty() {
        let a = sample_snapshot();
        let d = diff(&a, &a).unwrap();
        assert!(d.is_empty());
        assert_eq!(apply(&a, &d).unwrap(), a);
    }

    #[test]
    fn single_device_toggle_is_one_path() {
        let a = sample_snapshot();
        let mut b = a.clone();
        b.ts += NS_PER_SEC;
        b.devices.insert(13, "on".to_string());
        let d = diff(&a, &b).unwrap();
        assert_eq!(d.changes.len(), 1);
        assert_eq!(d.changes[0].path, "devices/13");
        assert_eq!(d.changes[0].old, Slot::Value(Json::from("off")));
        assert_eq!(d.changes[0].new, Slot::Value(Json::from("on")));
        assert_eq!(apply(&a, &d).unwrap(), b);
    }

    #[test]
    fn absent_entry_differs_from_null_field() {
        let a = sample_snapshot();

        // Same resident, position becomes null: a value-to-value change.
        let mut b = a.clone();
        b.residents.get_mut(&1).unwrap().position = None;
        let d = diff(&a, &b).unwrap();
        assert_eq!(d.changes.len(), 1);
        assert_eq!(d.changes[0].path, "residents/1/position");
        assert_eq!(d.changes[0].new, Slot::Value(Json::Null));

        // Resident disappears entirely: the whole entry goes absent.
        let mut c = a.clone();
        c.residents.remove(&1);
        let d = diff(&a, &c).unwrap();
        assert_eq!(d.changes.len(), 1);
        assert_eq!(d.changes[0].path, "residents/1");
        assert_eq!(d.changes[0].new, Slot::Absent);
        assert!(matches!(d.changes[0].old, Slot::Value(Json::Object(_))));
        assert_eq!(apply(&a, &d).unwrap(), c);

        // The two diff kinds serialize distinguishably.
        let absent = serde_json::to_string(&Slot::Absent).unwrap();
        let null = serde_json::to_string(&Slot::Value(Json::Null)).unwrap();
        assert_ne!(absent, null);
        assert_eq!(absent, "{\"kind\":\"absent\"}");
        assert_eq!(null, "{\"kind\":\"value\",\"value\":null}");
    }

    #[test]
    fn diff_rejects_backward_pairs_and_apply_rejects_wrong_base() {
        let a = sample_snapshot();
        let mut b = a.clone();
        b.ts -= 1;
        assert!(matches!(diff(&a, &b), Err(TwinError::OrderViolation { .. })));

        let mut c = a.clone();
        c.ts += NS_PER_SEC;
        c.devices.insert(13, "on".into());
        let d = diff(&a, &c).unwrap();
        let mut wrong = a.clone();
        wrong.devices.insert(13, "standby".into());
        assert!(matches!(apply(&wrong, &d), Err(TwinError::PatchMismatch { .. })));
        let mut wrong_ts = a.clone();
        wrong_ts.ts += 7;
        assert!(matches!(apply(&wrong_ts, &d), Err(TwinError::PatchMismatch { .. })));
    }

    // --- randomized suites -------------------------------------------------

    fn arb_string(rng: &mut ChaCha8Rng) -> String {
        let n = rng.gen_range(0..8);
        (0..n).map(|_| (b'a' + rng.gen_range(0..26)) as char).collect()
    }

    fn arb_resident(rng: &mut ChaCha8Rng) -> TwinResident {
        TwinResident {
            position: rng
                .gen_bool(0.7)
                .then(|| (rng.gen_range(-10.0..10.0), rng.gen_range(-10.0..10.0))),
            posture: rng.gen_bool(0.7).then(|| arb_string(rng)),
            activity: rng.gen_bool(0.7).then(|| arb_string(rng)),
            activity_confidence: rng.gen_bool(0.7).then(|| rng.gen_range(0.0..1.0)),
            emotion: rng.gen_bool(0.7).then(|| arb_string(rng)),
            emotion_confidence: rng.gen_bool(0.7).then(|| rng.gen_range(0.0..1.0)),
        }
    }

    fn arb_snapshot(rng: &mut ChaCha8Rng) -> TwinSnapshot {
        let mut residents = BTreeMap::new();
        for _ in 0..rng.gen_range(0..4) {
            residents.insert(rng.gen_range(0..6), arb_resident(rng));
        }
        let mut devices = BTreeMap::new();
        for _ in 0..rng.gen_range(0..5) {
            devices.insert(rng.gen_range(0..40), arb_string(rng));
        }
        let mut health = BTreeMap::new();
        for _ in 0..rng.gen_range(0..5) {
            health.insert(
                rng.gen_range(0..40),
                SensorHealth {
                    state: arb_string(rng),
                    last_seen_ns: rng.gen_bool(0.5).then(|| rng.gen_range(0..10_i64.pow(15))),
                },
            );
        }
        TwinSnapshot {
            version: TWIN_VERSION.into(),
            ts: rng.gen_range(0..10_i64.pow(15)),
            room: RoomBounds {
                width_m: rng.gen_range(1.0..20.0),
                height_m: rng.gen_range(1.0..20.0),
            },
            residents,
            devices,
            environment: Environment {
                temperature_c: rng.gen_bool(0.6).then(|| rng.gen_range(-30.0..50.0)),
                humidity_pct: rng.gen_bool(0.6).then(|| rng.gen_range(0.0..100.0)),
            },
            sensor_health: health,
            provenance: Provenance { run_id: arb_string(rng), config_hash: arb_string(rng) },
        }
    }

    /// Mutates a few fields so diffs exercise shallow and deep paths.
    fn mutate(rng: &mut ChaCha8Rng, snap: &mut TwinSnapshot) {
        for _ in 0..rng.gen_range(1..5) {
            match rng.gen_range(0..6) {
                0 => {
                    let id = rng.gen_range(0..6);
                    if rng.gen_bool(0.5) {
                        residents_toggle(rng, &mut snap.residents, id);
                    } else if let Some(r) = snap.residents.get_mut(&id) {
                        r.position = rng
                            .gen_bool(0.5)
                            .then(|| (rng.gen_range(-10.0..10.0), rng.gen_range(-10.0..10.0)));
                    }
                }
                1 => {
                    let id = rng.gen_range(0..40);
                    if snap.devices.contains_key(&id) && rng.gen_bool(0.4) {
                        snap.devices.remove(&id);
                    } else {
                        snap.devices.insert(id, arb_string(rng));
                    }
                }
                2 => {
                    snap.environment.temperature_c =
                        rng.gen_bool(0.5).then(|| rng.gen_range(-30.0..50.0));
                }
                3 => {
                    let id = rng.gen_range(0..40);
                    if snap.sensor_health.contains_key(&id) && rng.gen_bool(0.4) {
                        snap.sensor_health.remove(&id);
                    } else {
                        snap.sensor_health.insert(
                            id,
                            SensorHealth { state: arb_string(rng), last_seen_ns: None },
                        );
                    }
                }
                4 => snap.provenance.run_id = arb_string(rng),
                _ => {
                    if let Some(r) = snap.residents.values_mut().next() {
                        r.activity = rng.gen_bool(0.5).then(|| arb_string(rng));
                    }
                }
            }
        }
        snap.ts += rng.gen_range(0..NS_PER_SEC);
    }

    fn residents_toggle(
        rng: &mut ChaCha8Rng,
        residents: &mut BTreeMap<u8, TwinResident>,
        id: u8,
    ) {
        if residents.contains_key(&id) {
            residents.remove(&id);
        } else {
            residents.insert(id, arb_resident(rng));
        }
    }

    #[test]
    fn round_trip_fuzz() {
        let mut rng = ChaCha8Rng::seed_from_u64(0x7719_a301);
        for _ in 0..10_000 {
            let snap = arb_snapshot(&mut rng);
            let back = TwinSnapshot::parse(&snap.serialize()).unwrap();
            assert_eq!(back, snap);
        }
    }

    #[test]
    fn diff_apply_fuzz() {
        let mut rng = ChaCha8Rng::seed_from_u64(0x00c4_11f2);
        for trial in 0..10_000 {
            let a = arb_snapshot(&mut rng);
            let b = if trial % 3 == 0 {
                // Unrelated pair: stress wholesale replacement.
                let mut b = arb_snapshot(&mut rng);
                b.ts = a.ts + rng.gen_range(0..NS_PER_SEC);
                b
            } else {
                let mut b = a.clone();
                mutate(&mut rng, &mut b);
                b
            };
            let d = diff(&a, &b).unwrap();
            let patched = apply(&a, &d).unwrap();
            assert_eq!(patched, b, "trial {trial}");
            assert!(diff(&a, &a).unwrap().is_empty());
        }
    }

    #[test]
    fn diffs_serialize_round_trip() {
        let a = sample_snapshot();
        let mut b = a.clone();
        b.ts += NS_PER_SEC;
        b.devices.remove(&14);
        b.environment.humidity_pct = Some(47.5);
        let d = diff(&a, &b).unwrap();
        let line = serde_json::to_string(&d).unwrap();
        let back: SnapshotDiff = serde_json::from_str(&line).unwrap();
        assert_eq!(back, d);
    }

    // --- building from series ----------------------------------------------

    fn sample_inputs() -> TwinInputs {
        let track = vec![
            TrackPoint { ts: 0, x: 1.0, y: 1.0, speed_mps: 0.0 },
            TrackPoint { ts: NS_PER_SEC, x: 2.0, y: 1.0, speed_mps: 1.0 },
            TrackPoint { ts: 3 * NS_PER_SEC, x: 4.0, y: 1.0, speed_mps: 1.0 },
        ];
        let windows = vec![
            LabelledWindow {
                resident: 1,
                start_ns: 0,
                end_ns: 5 * NS_PER_SEC,
                label: "standing".into(),
                confidence: 0.9,
                rule_id: "standing".into(),
            },
            LabelledWindow {
                resident: 1,
                start_ns: 2_500_000_000,
                end_ns: 7_500_000_000,
                label: "walking".into(),
                confidence: 0.7,
                rule_id: "walking".into(),
            },
        ];
        TwinInputs {
            run_id: "run".into(),
            config_hash: "cfg".into(),
            room_w: 8.0,
            room_h: 6.0,
            start_ns: 0,
            end_ns: 10 * NS_PER_SEC,
            tracks: BTreeMap::from([(1, track)]),
            postures: BTreeMap::from([(1, vec![(0, "standing".to_string())])]),
            activities: BTreeMap::from([(1, windows.clone())]),
            emotions: BTreeMap::from([(1, vec![])]),
            device_events: BTreeMap::from([(13, vec![(NS_PER_SEC, "on".to_string())])]),
            env_series: vec![(0, 20.0, 45.0), (2 * NS_PER_SEC, 21.0, 46.0)],
        }
    }

    #[test]
    fn snapshots_take_last_value_at_or_before_ts() {
        let inputs = sample_inputs();
        let snap = build_snapshot(&inputs, &BTreeMap::new(), 2 * NS_PER_SEC).unwrap();
        let r = &snap.residents[&1];
        // Track point at 1 s is the latest <= 2 s.
        assert_eq!(r.position, Some((2.0, 1.0)));
        // The 2.5 s window hasn't started; the 0 s one is current.
        assert_eq!(r.activity.as_deref(), Some("standing"));
        assert_eq!(r.emotion, None);
        assert_eq!(snap.devices[&13], "on");
        assert_eq!(snap.environment.temperature_c, Some(21.0));

        let later = build_snapshot(&inputs, &BTreeMap::new(), 4 * NS_PER_SEC).unwrap();
        assert_eq!(later.residents[&1].activity.as_deref(), Some("walking"));
        assert_eq!(later.residents[&1].position, Some((4.0, 1.0)));
    }

    #[test]
    fn snapshot_before_any_data_is_all_null() {
        let mut inputs = sample_inputs();
        inputs.start_ns = -5 * NS_PER_SEC;
        let snap = build_snapshot(&inputs, &BTreeMap::new(), -NS_PER_SEC).unwrap();
        assert_eq!(snap.residents[&1], TwinResident::empty());
        assert!(snap.devices.is_empty());
        assert_eq!(snap.environment.temperature_c, None);
    }

    #[test]
    fn snapshot_outside_run_is_rejected() {
        let inputs = sample_inputs();
        assert!(matches!(
            build_snapshot(&inputs, &BTreeMap::new(), 11 * NS_PER_SEC),
            Err(TwinError::OutOfRange { .. })
        ));
    }

    #[test]
    fn stream_cadence_yields_one_snapshot_per_tick() {
        let inputs = sample_inputs();
        let snaps = snapshot_stream(&inputs, 1.0, &|_| BTreeMap::new()).unwrap();
        assert_eq!(snaps.len(), 10);
        for pair in snaps.windows(2) {
            assert!(pair[0].ts < pair[1].ts);
        }
        assert!(snaps.iter().all(|s| s.version == TWIN_VERSION));
    }
}
