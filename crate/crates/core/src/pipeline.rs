//! Offline fusion: replays a captured frame log up the processing ladder.
//!
//! Each level consumes the previous level's output plus, for level 1, the
//! payload bytes the aligned records point back into. Levels communicate
//! through plain serializable records so any level's output can be written
//! out, inspected, and fed back in without the levels below it.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::align::{
    self, AlignError, AlignWarnings, AlignedRecord, CoverageReport, SampleStream, SlotRef,
    StreamSample,
};
use crate::clock::{fit_mapping, ClockMapping, SyncEpoch};
use crate::config::LoadedConfig;
use crate::features::{
    detect_occupancy, filter_record, reconstruct_skeleton, CameraGeometry, FilterStats,
    TrackState, VoiceDetector,
};
use crate::payload::{CameraObservation, HelloPayload, SamplePayload, SyncReport};
use crate::rules::{DecisionEngine, DecisionRecord, WindowState};
use crate::scenario::{FloorConfig, Modality, Room};
use crate::session::{Counters, GapReport, LivenessConfig, SessionTable};
use crate::state::{
    classify_activity, classify_emotion, posture_code, smooth_labels, FeatureWindow, Labelled,
    LabelledWindow, Posture, RecordRow,
};
use crate::storage::{self, IntegrityReport, ReadRecord};
use crate::time::{Nanos, NS_PER_SEC};
use crate::twin::{snapshot_stream, SensorHealth, TwinInputs, TwinSnapshot};
use crate::wire::{DecodeError, Frame, MsgType};

/// Windows carrying this activity label relax the unoccupied-record drop on
/// the next pass: a sleeper who neither loads the floor nor moves still
/// deserves their records.
pub const SLEEP_LABEL: &str = "sleeping";

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Storage(#[from] storage::StorageError),
    #[error(transparent)]
    Align(#[from] AlignError),
    #[error(transparent)]
    Twin(#[from] crate::twin::TwinError),
    #[error("frame at {segment}:{offset} failed to decode: {source}")]
    Frame { segment: String, offset: u64, source: DecodeError },
    #[error("device {device} sent an unreadable hello: {detail}")]
    Hello { device: u16, detail: String },
    #[error("log contains no frames")]
    EmptyLog,
}

// ---------------------------------------------------------------------------
// Log ingestion

/// A fully decoded log: stored records plus their frames, indexed so an
/// aligned record's slot references resolve back to payload bytes.
pub struct LogData {
    pub records: Vec<ReadRecord>,
    /// Decoded 1:1 with `records`.
    pub frames: Vec<Frame>,
    pub integrity: IntegrityReport,
    /// First hello per device; a re-hello after an outage repeats it.
    pub hellos: BTreeMap<u16, HelloPayload>,
    /// Wall-clock anchor of the reference timeline, seconds past midnight.
    pub start_of_day_s: f64,
    pub room: Option<Room>,
    /// Content digest of every stored record, hex; names the log regardless
    /// of where it sits on disk.
    pub digest: String,
    segment_ids: HashMap<String, u32>,
    index: HashMap<(u32, u64), usize>,
}

impl LogData {
    pub fn frame_at(&self, source: &SlotRef) -> Option<&Frame> {
        let seg = self.segment_ids.get(&source.segment)?;
        self.index.get(&(*seg, source.offset)).map(|&i| &self.frames[i])
    }

    pub fn payload_at(&self, source: &SlotRef) -> Option<SamplePayload> {
        let f = self.frame_at(source)?;
        SamplePayload::decode(f.modality, &f.payload).ok()
    }
}

pub fn read_log(dir: &Path) -> Result<LogData, PipelineError> {
    let outcome = storage::iterate_all(dir)?;
    let records = outcome.records;
    if records.is_empty() {
        return Err(PipelineError::EmptyLog);
    }

    let mut frames = Vec::with_capacity(records.len());
    let mut hasher = Sha256::new();
    for r in &records {
        let frame = Frame::decode_exact(&r.frame).map_err(|e| PipelineError::Frame {
            segment: r.segment.clone(),
            offset: r.offset,
            source: e,
        })?;
        hasher.update(r.receive_time_ns.to_le_bytes());
        hasher.update(&r.frame);
        frames.push(frame);
    }
    let digest = hex(&hasher.finalize());

    let mut segment_ids = HashMap::new();
    let mut index = HashMap::with_capacity(records.len());
    for (i, r) in records.iter().enumerate() {
        let next = segment_ids.len() as u32;
        let seg = *segment_ids.entry(r.segment.clone()).or_insert(next);
        index.insert((seg, r.offset), i);
    }

    let mut hellos: BTreeMap<u16, HelloPayload> = BTreeMap::new();
    for f in &frames {
        if f.msg_type == MsgType::Hello && !hellos.contains_key(&f.device_id) {
            let hello = HelloPayload::decode(&f.payload).map_err(|e| PipelineError::Hello {
                device: f.device_id,
                detail: e.to_string(),
            })?;
            hellos.insert(f.device_id, hello);
        }
    }
    let start_of_day_s =
        hellos.values().next().map(|h| h.start_of_day_s).unwrap_or(8.0 * 3600.0);
    let room = hellos.values().next().map(|h| h.room.clone());

    Ok(LogData {
        records,
        frames,
        integrity: outcome.report,
        hellos,
        start_of_day_s,
        room,
        digest,
        segment_ids,
        index,
    })
}

fn hex(bytes: &[u8]) -> String {
    let mut s = String::with_capacity(bytes.len() * 2);
    for b in bytes {
        s.push_str(&format!("{b:02x}"));
    }
    s
}

// ---------------------------------------------------------------------------
// Level 0: clock fitting and alignment

/// How one device's clock mapping was obtained.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SyncSummary {
    pub device_id: u16,
    pub epochs: usize,
    /// True when fitting failed (or no sync traffic) and identity was used.
    pub fallback_identity: bool,
    pub offset_ns: Nanos,
    pub drift_ppm: f64,
}

#[derive(Debug)]
pub struct Level0Output {
    pub records: Vec<AlignedRecord>,
    pub primary: (Modality, u16),
    pub warnings: AlignWarnings,
    pub coverage: CoverageReport,
    pub mappings: BTreeMap<u16, ClockMapping>,
    pub sync: Vec<SyncSummary>,
    /// Sample frames from devices that never said hello (skipped).
    pub orphan_samples: u64,
}

fn build_streams(log: &LogData) -> (Vec<SampleStream>, u64) {
    let mut per: BTreeMap<u16, SampleStream> = BTreeMap::new();
    let mut orphans = 0u64;
    for (i, f) in log.frames.iter().enumerate() {
        if f.msg_type != MsgType::Sample {
            continue;
        }
        let (Some(hello), Some(modality)) =
            (log.hellos.get(&f.device_id), Modality::from_wire(f.modality))
        else {
            orphans += 1;
            continue;
        };
        let r = &log.records[i];
        per.entry(f.device_id)
            .or_insert_with(|| SampleStream {
                device_id: f.device_id,
                modality,
                rate_hz: hello.spec.rate_hz,
                samples: Vec::new(),
            })
            .samples
            .push(StreamSample {
                device_ts: f.device_ts,
                source: SlotRef {
                    segment: r.segment.clone(),
                    offset: r.offset,
                    sequence: f.sequence,
                },
            });
    }
    (per.into_values().collect(), orphans)
}

/// Fits a reference mapping per device from its sync exchanges; devices
/// without enough usable exchanges run on identity.
fn fit_mappings(
    log: &LogData,
    devices: impl IntoIterator<Item = u16>,
) -> (BTreeMap<u16, ClockMapping>, Vec<SyncSummary>) {
    let mut rounds: BTreeMap<u16, BTreeMap<u32, Vec<SyncReport>>> = BTreeMap::new();
    for f in &log.frames {
        if f.msg_type != MsgType::TimeResp {
            continue;
        }
        if let Ok(report) = SyncReport::decode(&f.payload) {
            rounds.entry(f.device_id).or_default().entry(report.epoch).or_default().push(report);
        }
    }

    let mut wanted: BTreeSet<u16> = devices.into_iter().collect();
    wanted.extend(rounds.keys().copied());

    let mut mappings = BTreeMap::new();
    let mut summaries = Vec::new();
    for device_id in wanted {
        let epochs: Vec<SyncEpoch> = rounds
            .get(&device_id)
            .map(|by_epoch| {
                by_epoch
                    .values()
                    .map(|reports| {
                        reports
                            .iter()
                            .map(|r| {
                                let round = r.sync_round();
                                let mid = round.reference_midpoint();
                                (round, mid)
                            })
                            .collect()
                    })
                    .collect()
            })
            .unwrap_or_default();
        let (mapping, fallback) = match fit_mapping(&epochs) {
            Ok(m) => (m, false),
            Err(_) => (ClockMapping::identity(), true),
        };
        summaries.push(SyncSummary {
            device_id,
            epochs: epochs.len(),
            fallback_identity: fallback,
            offset_ns: mapping.offset_ns,
            drift_ppm: mapping.drift_ppm,
        });
        mappings.insert(device_id, mapping);
    }
    (mappings, summaries)
}

pub fn run_level0(log: &LogData, cfg: &LoadedConfig) -> Result<Level0Output, PipelineError> {
    let (streams, orphan_samples) = build_streams(log);
    let (mappings, sync) = fit_mappings(log, streams.iter().map(|s| s.device_id));
    let out = align::align(&streams, &mappings, &cfg.config.align)?;
    let coverage = align::coverage_report(&out.records, &streams);
    Ok(Level0Output {
        records: out.records,
        primary: out.primary,
        warnings: out.warnings,
        coverage,
        mappings,
        sync,
        orphan_samples,
    })
}

// ---------------------------------------------------------------------------
// Session replay: continuity accounting over the stored log

#[derive(Debug, Serialize, Deserialize)]
pub struct SessionReplay {
    pub gaps: Vec<GapReport>,
    pub counters: Counters,
    pub final_health: BTreeMap<u16, SensorHealth>,
    /// Per-device state transitions at collector receive time.
    state_events: BTreeMap<u16, Vec<(Nanos, String)>>,
    /// Receive time of every frame per device, ascending.
    receives: BTreeMap<u16, Vec<Nanos>>,
}

impl SessionReplay {
    /// Session view as it stood at `ts`: last state transition and last
    /// frame at or before it. Devices first heard from later are absent.
    pub fn health_at(&self, ts: Nanos) -> BTreeMap<u16, SensorHealth> {
        let mut out = BTreeMap::new();
        for (device, events) in &self.state_events {
            let n = events.partition_point(|(t, _)| *t <= ts);
            if n == 0 {
                continue;
            }
            let state = events[n - 1].1.clone();
            let seen = self.receives.get(device).map(|r| r.partition_point(|&t| t <= ts));
            let last_seen_ns = match seen {
                Some(k) if k > 0 => Some(self.receives[device][k - 1]),
                _ => None,
            };
            out.insert(*device, SensorHealth { state, last_seen_ns });
        }
        out
    }
}

fn capture_states(
    table: &SessionTable,
    now: Nanos,
    shadow: &mut BTreeMap<u16, &'static str>,
    events: &mut BTreeMap<u16, Vec<(Nanos, String)>>,
) {
    for (device, (state, _)) in table.health() {
        if shadow.get(&device) != Some(&state) {
            shadow.insert(device, state);
            events.entry(device).or_default().push((now, state.to_string()));
        }
    }
}

pub fn replay_sessions(log: &LogData, liveness: LivenessConfig) -> SessionReplay {
    let mut table = SessionTable::new(liveness);
    let mut gaps = Vec::new();
    let mut state_events: BTreeMap<u16, Vec<(Nanos, String)>> = BTreeMap::new();
    let mut receives: BTreeMap<u16, Vec<Nanos>> = BTreeMap::new();
    let mut shadow: BTreeMap<u16, &'static str> = BTreeMap::new();

    for (i, frame) in log.frames.iter().enumerate() {
        let now = log.records[i].receive_time_ns as Nanos;
        // Timeouts are judged against the wall clock, which in replay only
        // advances when something arrives.
        let timed_out = table.monitor(now);
        if !timed_out.is_empty() {
            gaps.extend(timed_out);
            capture_states(&table, now, &mut shadow, &mut state_events);
        }
        let reports = table.ingest(frame, now);
        receives.entry(frame.device_id).or_default().push(now);
        let boundary = matches!(frame.msg_type, MsgType::Hello | MsgType::Bye);
        if !reports.is_empty() || boundary {
            gaps.extend(reports);
            capture_states(&table, now, &mut shadow, &mut state_events);
        }
    }

    let final_health = table
        .health()
        .into_iter()
        .map(|(d, (state, seen))| {
            (d, SensorHealth { state: state.to_string(), last_seen_ns: Some(seen) })
        })
        .collect();
    SessionReplay { gaps, counters: table.counters, final_health, state_events, receives }
}

// ---------------------------------------------------------------------------
// Level 1: per-record cleaning, reconstruction, tracking

/// One resident's physical estimate inside a single record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResidentObs {
    pub x: f64,
    pub y: f64,
    pub posture: Posture,
    /// Joints that survived triangulation, 0 when the fix came from the
    /// floor alone.
    pub joints: u32,
}

/// One kept record after cleaning: room-level readings plus whatever
/// residents were physically confirmed. This is the whole contract between
/// level 1 and level 2.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Level1Record {
    pub ref_ts: Nanos,
    pub voice_active: bool,
    /// Strongest microphone sample new to this record.
    pub mic_energy: Option<f64>,
    pub occupied: Option<bool>,
    /// Fresh floor sample backing this record, at its own mapped time.
    pub floor_ts: Option<Nanos>,
    pub floor_force: Option<f64>,
    /// Appliance states as of this record.
    pub devices: BTreeMap<u16, String>,
    /// Fresh environment reading carried by this record.
    pub env: Option<(f64, f64)>,
    pub residents: BTreeMap<u8, ResidentObs>,
}

#[derive(Debug)]
pub struct Level1Output {
    pub records: Vec<Level1Record>,
    pub stats: FilterStats,
    /// Slots whose payload bytes would not decode (counted, then skipped).
    pub payload_errors: u64,
}

pub fn run_level1(
    log: &LogData,
    aligned: &[AlignedRecord],
    cfg: &LoadedConfig,
    keep_intervals: &[(Nanos, Nanos)],
) -> Level1Output {
    let l1 = &cfg.config.level1;
    let mut cameras: BTreeMap<u16, CameraGeometry> = BTreeMap::new();
    let mut floors: BTreeMap<u16, FloorConfig> = BTreeMap::new();
    for (device, hello) in &log.hellos {
        if let Some(c) = &hello.spec.camera {
            if let Ok(g) = CameraGeometry::from_config(c) {
                cameras.insert(*device, g);
            }
        }
        if let Some(f) = &hello.spec.floor {
            floors.insert(*device, f.clone());
        }
    }

    let track_reset_ns = (l1.track_reset_s * NS_PER_SEC as f64) as Nanos;
    let mut vad = VoiceDetector::new(l1.vad);
    let mut stats = FilterStats::default();
    let mut payload_errors = 0u64;
    let mut devices_now: BTreeMap<u16, String> = BTreeMap::new();
    let mut last_source: BTreeMap<u16, SlotRef> = BTreeMap::new();
    let mut tracks: BTreeMap<u8, (TrackState, Nanos)> = BTreeMap::new();
    let mut known_residents: BTreeSet<u8> = BTreeSet::new();
    let mut out = Vec::new();

    for rec in aligned {
        let ref_ts = rec.ref_ts;
        let mut views: Vec<(u16, CameraObservation)> = Vec::new();
        let mut person_detected = false;
        let mut occupied = None;
        let mut centroid = None;
        let mut floor_ts = None;
        let mut floor_force = None;
        let mut mic_energy: Option<f64> = None;
        let mut env = None;

        for (device, slot) in &rec.slots {
            let fresh = last_source.get(device) != Some(&slot.source);
            let Some(payload) = log.payload_at(&slot.source) else {
                payload_errors += 1;
                continue;
            };
            match payload {
                SamplePayload::Camera(obs) => {
                    person_detected |= obs.any_person_detected();
                    if cameras.contains_key(device) {
                        views.push((*device, obs));
                    }
                }
                SamplePayload::Audio(a) => {
                    if fresh {
                        vad.update(slot.mapped_ts, a.voiced);
                        let e = f64::from(a.energy);
                        mic_energy = Some(mic_energy.map_or(e, |m: f64| m.max(e)));
                    }
                }
                SamplePayload::Floor(frame) => {
                    if let Some(geometry) = floors.get(device) {
                        match detect_occupancy(&frame, geometry, l1.occupied_threshold_n) {
                            Ok(occ) => {
                                occupied = Some(occ.occupied);
                                centroid = occ.centroid;
                                if fresh {
                                    floor_ts = Some(slot.mapped_ts);
                                    floor_force = Some(occ.total_force_n);
                                }
                            }
                            Err(_) => payload_errors += 1,
                        }
                    }
                }
                SamplePayload::Env(e) => {
                    if fresh {
                        env = Some((f64::from(e.temperature_c), f64::from(e.humidity_pct)));
                    }
                }
                SamplePayload::Usage(u) => {
                    if fresh {
                        devices_now.insert(u.device, u.state);
                    }
                }
            }
            if fresh {
                last_source.insert(*device, slot.source.clone());
            }
        }

        // Triangulate each resident any camera reported.
        let mut seen: BTreeSet<u8> = BTreeSet::new();
        for (_, obs) in &views {
            for r in &obs.residents {
                seen.insert(r.resident);
            }
        }
        known_residents.extend(seen.iter().copied());
        let mut fixes: BTreeMap<u8, (f64, f64, Posture, u32)> = BTreeMap::new();
        for &resident in &seen {
            let resident_views: Vec<(&CameraGeometry, &CameraObservation)> = views
                .iter()
                .filter(|(_, obs)| obs.residents.iter().any(|r| r.resident == resident))
                .map(|(device, obs)| (&cameras[device], obs))
                .collect();
            if let Ok(skel) = reconstruct_skeleton(&resident_views, resident, &l1.skeleton) {
                if let Some((x, y)) = skel.root_xy() {
                    fixes.insert(
                        resident,
                        (x, y, posture_code(&skel), skel.valid_count() as u32),
                    );
                }
            }
        }

        // The floor centroid corroborates a camera fix close enough to claim
        // it, or carries the track alone in a single-resident home.
        let mut floor_xy: BTreeMap<u8, (f64, f64)> = BTreeMap::new();
        if occupied == Some(true) {
            if let Some(c) = centroid {
                if fixes.len() == 1 {
                    let (&resident, &(x, y, ..)) = fixes.iter().next().unwrap();
                    if ((x - c.0).powi(2) + (y - c.1).powi(2)).sqrt() <= l1.floor_claim_m {
                        floor_xy.insert(resident, c);
                    }
                } else if fixes.is_empty() && known_residents.len() == 1 {
                    floor_xy.insert(*known_residents.iter().next().unwrap(), c);
                }
            }
        }

        let mut residents: BTreeMap<u8, ResidentObs> = BTreeMap::new();
        let mut ids: BTreeSet<u8> = fixes.keys().copied().collect();
        ids.extend(floor_xy.keys().copied());
        for resident in ids {
            let (track, last_ts) =
                tracks.entry(resident).or_insert_with(|| (TrackState::default(), Nanos::MIN));
            if *last_ts != Nanos::MIN && ref_ts - *last_ts > track_reset_ns {
                track.reset();
            }
            let camera_xy = fixes.get(&resident).map(|&(x, y, ..)| (x, y));
            let floor_fix = floor_xy.get(&resident).copied();
            if let Some(point) = track.update(ref_ts, camera_xy, floor_fix, &l1.track) {
                *last_ts = ref_ts;
                let (posture, joints) = fixes
                    .get(&resident)
                    .map(|&(.., p, j)| (p, j))
                    .unwrap_or((Posture::Unknown, 0));
                residents.insert(
                    resident,
                    ResidentObs { x: point.x, y: point.y, posture, joints },
                );
            }
        }

        let keep = filter_record(
            ref_ts,
            occupied == Some(true),
            person_detected,
            keep_intervals,
            &mut stats,
        );
        if keep {
            out.push(Level1Record {
                ref_ts,
                voice_active: vad.is_active(),
                mic_energy,
                occupied,
                floor_ts,
                floor_force,
                devices: devices_now.clone(),
                env,
                residents,
            });
        }
    }

    Level1Output { records: out, stats, payload_errors }
}

// ---------------------------------------------------------------------------
// Level 2: windowed features and labels

/// One classified feature window; activity and emotion sit side by side so
/// downstream rules see a single timeline.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Level2Record {
    pub features: FeatureWindow,
    pub activity: Labelled,
    pub emotion: Labelled,
}

#[derive(Debug)]
pub struct Level2Output {
    pub windows: Vec<Level2Record>,
}

pub fn run_level2(
    records: &[Level1Record],
    cfg: &LoadedConfig,
    start_of_day_s: f64,
) -> Level2Output {
    let wcfg = &cfg.config.level2.window;
    let mut windows = Vec::new();
    if records.is_empty() {
        return Level2Output { windows };
    }

    let forces: Vec<(Nanos, f64)> = records
        .iter()
        .filter_map(|r| r.floor_ts.and_then(|ts| r.floor_force.map(|f| (ts, f))))
        .collect();
    let resident_ids: BTreeSet<u8> =
        records.iter().flat_map(|r| r.residents.keys().copied()).collect();

    let stride_ns = (wcfg.stride_s * NS_PER_SEC as f64) as Nanos;
    let origin = records[0].ref_ts.div_euclid(stride_ns) * stride_ns;
    let end = records[records.len() - 1].ref_ts + 1;

    for resident in resident_ids {
        let rows: Vec<RecordRow> = records
            .iter()
            .map(|r| {
                let obs = r.residents.get(&resident);
                RecordRow {
                    ref_ts: r.ref_ts,
                    posture: obs.map(|o| o.posture).unwrap_or(Posture::Unknown),
                    position: obs.map(|o| (o.x, o.y)),
                    voice_active: r.voice_active,
                    mic_energy: r.mic_energy,
                    occupied: r.occupied,
                    devices: r.devices.clone(),
                    env: r.env,
                }
            })
            .collect();
        let features = crate::state::window_features(
            resident,
            &rows,
            &forces,
            origin,
            end,
            start_of_day_s,
            wcfg,
        );
        let mut activities: Vec<LabelledWindow> = Vec::with_capacity(features.len());
        let mut emotions: Vec<LabelledWindow> = Vec::with_capacity(features.len());
        for w in &features {
            let a = classify_activity(w, &cfg.tables);
            let e = classify_emotion(w, &cfg.tables);
            activities.push(LabelledWindow {
                resident,
                start_ns: w.start_ns,
                end_ns: w.end_ns,
                label: a.label,
                confidence: a.confidence,
                rule_id: a.rule_id,
            });
            emotions.push(LabelledWindow {
                resident,
                start_ns: w.start_ns,
                end_ns: w.end_ns,
                label: e.label,
                confidence: e.confidence,
                rule_id: e.rule_id,
            });
        }
        smooth_labels(&mut activities, cfg.config.level2.min_dwell);
        smooth_labels(&mut emotions, cfg.config.level2.min_dwell);
        for ((w, a), e) in features.into_iter().zip(activities).zip(emotions) {
            windows.push(Level2Record {
                features: w,
                activity: Labelled { label: a.label, confidence: a.confidence, rule_id: a.rule_id },
                emotion: Labelled { label: e.label, confidence: e.confidence, rule_id: e.rule_id },
            });
        }
    }
    // Single timeline across residents; ties break on resident id.
    windows.sort_by(|a, b| {
        (a.features.start_ns, a.features.resident).cmp(&(b.features.start_ns, b.features.resident))
    });
    Level2Output { windows }
}

/// Merged spans of windows the classifier called sleep; the next cleaning
/// pass keeps records inside them.
pub fn sleep_spans(windows: &[Level2Record]) -> Vec<(Nanos, Nanos)> {
    let mut spans: Vec<(Nanos, Nanos)> = windows
        .iter()
        .filter(|w| w.activity.label == SLEEP_LABEL)
        .map(|w| (w.features.start_ns, w.features.end_ns))
        .collect();
    spans.sort_unstable();
    let mut merged: Vec<(Nanos, Nanos)> = Vec::new();
    for (a, b) in spans {
        match merged.last_mut() {
            Some((_, end)) if a <= *end => *end = (*end).max(b),
            _ => merged.push((a, b)),
        }
    }
    merged
}

// ---------------------------------------------------------------------------
// Level 3: decisions

#[derive(Debug)]
pub struct Level3Output {
    pub decisions: Vec<DecisionRecord>,
}

pub fn run_level3(windows: &[Level2Record], cfg: &LoadedConfig) -> Level3Output {
    let mut engine = DecisionEngine::new(&cfg.rules);
    let mut decisions = Vec::new();
    for w in windows {
        let state = WindowState {
            start_ns: w.features.start_ns,
            end_ns: w.features.end_ns,
            activity: w.activity.label.clone(),
            activity_confidence: w.activity.confidence,
            emotion: w.emotion.label.clone(),
            emotion_confidence: w.emotion.confidence,
            temperature: w.features.temperature,
            humidity: w.features.humidity,
            tod_s: w.features.tod_s,
            devices: w.features.appliances.clone(),
        };
        if let Some(record) = engine.step(&state) {
            decisions.push(record);
        }
    }
    Level3Output { decisions }
}

// ---------------------------------------------------------------------------
// The whole ladder

#[derive(Debug)]
pub struct FusionOutput {
    /// Deterministic name for this (log, config) pairing.
    pub run_id: String,
    pub config_hash: String,
    pub start_of_day_s: f64,
    pub room: Option<Room>,
    pub level0: Level0Output,
    pub level1: Level1Output,
    /// Cleaning stats per pass, in pass order (last one equals
    /// `level1.stats`).
    pub pass_stats: Vec<FilterStats>,
    pub level2: Level2Output,
    pub level3: Level3Output,
    pub sessions: SessionReplay,
}

pub fn fuse(log: &LogData, cfg: &LoadedConfig) -> Result<FusionOutput, PipelineError> {
    let level0 = run_level0(log, cfg)?;
    let sessions = replay_sessions(log, LivenessConfig::default());

    let mut keep: Vec<(Nanos, Nanos)> = Vec::new();
    let mut pass_stats = Vec::new();
    let mut level1 = None;
    let mut level2 = None;
    for pass in 0..cfg.config.passes.max(1) {
        let l1 = run_level1(log, &level0.records, cfg, &keep);
        let l2 = run_level2(&l1.records, cfg, log.start_of_day_s);
        pass_stats.push(l1.stats);
        if pass + 1 < cfg.config.passes {
            keep = sleep_spans(&l2.windows);
        }
        level1 = Some(l1);
        level2 = Some(l2);
    }
    let level1 = level1.expect("at least one pass");
    let level2 = level2.expect("at least one pass");
    let level3 = run_level3(&level2.windows, cfg);

    let run_id = format!("{}-{}", &log.digest[..12], &cfg.hash[..12]);
    Ok(FusionOutput {
        run_id,
        config_hash: cfg.hash.clone(),
        start_of_day_s: log.start_of_day_s,
        room: log.room.clone(),
        level0,
        level1,
        pass_stats,
        level2,
        level3,
        sessions,
    })
}

// ---------------------------------------------------------------------------
// Digital twin export

fn posture_name(p: Posture) -> &'static str {
    match p {
        Posture::Standing => "standing",
        Posture::Sitting => "sitting",
        Posture::Lying => "lying",
        Posture::Unknown => "unknown",
    }
}

/// What the twin consumes, detached from any in-memory [`FusionOutput`] so
/// snapshots can also be produced from a persisted run directory.
pub struct TwinSource<'a> {
    pub run_id: &'a str,
    pub config_hash: &'a str,
    pub room: Option<&'a Room>,
    /// Reference timestamp of the last aligned record.
    pub end_ns: Nanos,
    pub level1: &'a [Level1Record],
    pub windows: &'a [Level2Record],
    pub sessions: &'a SessionReplay,
}

/// Snapshots the fused state on a fixed cadence, health taken from the
/// session replay as it stood at each instant.
pub fn twin_stream(
    out: &FusionOutput,
    cadence_hz: f64,
) -> Result<Vec<TwinSnapshot>, PipelineError> {
    twin_from_parts(
        &TwinSource {
            run_id: &out.run_id,
            config_hash: &out.config_hash,
            room: out.room.as_ref(),
            end_ns: out.level0.records.last().map(|r| r.ref_ts).unwrap_or(0),
            level1: &out.level1.records,
            windows: &out.level2.windows,
            sessions: &out.sessions,
        },
        cadence_hz,
    )
}

pub fn twin_from_parts(
    src: &TwinSource,
    cadence_hz: f64,
) -> Result<Vec<TwinSnapshot>, PipelineError> {
    let mut tracks: BTreeMap<u8, Vec<crate::features::TrackPoint>> = BTreeMap::new();
    let mut postures: BTreeMap<u8, Vec<(Nanos, String)>> = BTreeMap::new();
    let mut device_events: BTreeMap<u16, Vec<(Nanos, String)>> = BTreeMap::new();
    let mut env_series = Vec::new();
    let mut device_state: BTreeMap<u16, String> = BTreeMap::new();

    for rec in src.level1 {
        for (&resident, obs) in &rec.residents {
            tracks.entry(resident).or_default().push(crate::features::TrackPoint {
                ts: rec.ref_ts,
                x: obs.x,
                y: obs.y,
                speed_mps: 0.0,
            });
            let series = postures.entry(resident).or_default();
            if series.last().map(|(_, p)| p.as_str()) != Some(posture_name(obs.posture)) {
                series.push((rec.ref_ts, posture_name(obs.posture).to_string()));
            }
        }
        for (&device, state) in &rec.devices {
            if device_state.get(&device) != Some(state) {
                device_state.insert(device, state.clone());
                device_events.entry(device).or_default().push((rec.ref_ts, state.clone()));
            }
        }
        if let Some((t, h)) = rec.env {
            env_series.push((rec.ref_ts, t, h));
        }
    }

    let mut activities: BTreeMap<u8, Vec<LabelledWindow>> = BTreeMap::new();
    let mut emotions: BTreeMap<u8, Vec<LabelledWindow>> = BTreeMap::new();
    for w in src.windows {
        let resident = w.features.resident;
        activities.entry(resident).or_default().push(LabelledWindow {
            resident,
            start_ns: w.features.start_ns,
            end_ns: w.features.end_ns,
            label: w.activity.label.clone(),
            confidence: w.activity.confidence,
            rule_id: w.activity.rule_id.clone(),
        });
        emotions.entry(resident).or_default().push(LabelledWindow {
            resident,
            start_ns: w.features.start_ns,
            end_ns: w.features.end_ns,
            label: w.emotion.label.clone(),
            confidence: w.emotion.confidence,
            rule_id: w.emotion.rule_id.clone(),
        });
    }

    let (room_w, room_h) = src.room.map(|r| (r.width_m, r.height_m)).unwrap_or((0.0, 0.0));
    let inputs = TwinInputs {
        run_id: src.run_id.to_string(),
        config_hash: src.config_hash.to_string(),
        room_w,
        room_h,
        start_ns: 0,
        end_ns: src.end_ns,
        tracks,
        postures,
        activities,
        emotions,
        device_events,
        env_series,
    };
    let snaps = snapshot_stream(&inputs, cadence_hz, &|ts| src.sessions.health_at(ts))?;
    Ok(snaps)
}
