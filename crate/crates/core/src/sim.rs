//! Scenario-driven sensor fleet simulator.
//!
//! Turns a [`Scenario`](crate::scenario::Scenario) script into the exact byte
//! streams a fleet of real sensors would produce: per-modality samples at each
//! sensor's rate, heartbeats, hello/bye session markers, four-timestamp sync
//! exchanges, device-clock timestamps, transit latency and loss. Everything is
//! derived from `(scenario, seed)` — two runs produce identical bytes.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::clock::mix64;
use crate::payload::{
    AudioSample, CameraObservation, EnvSample, FloorFrame, HelloPayload, Keypoint,
    ResidentKeypoints, SamplePayload, SyncReport, UsageSample, JOINT_COUNT,
};
use crate::scenario::{Modality, Scenario, SensorSpec, TruthSample};
use crate::state::Posture;
use crate::storage::{LogWriter, RotatePolicy, StorageError};
use crate::time::{secs_to_ns, Nanos, NS_PER_SEC};
use crate::wire::{Frame, MsgType};

/// Sync responder turnaround between its two clock reads.
pub const PROC_DELAY_NS: Nanos = 30_000;

/// Gap between sync rounds inside one epoch.
const ROUND_SPACING_NS: Nanos = 50_000_000;

/// A resident's whole body weight lands on the floor grid.
const BODY_FORCE_N: f64 = 700.0;
/// Step impacts swing the instantaneous load by this much.
const STEP_FORCE_N: f64 = 250.0;
/// Residual load when the body weight rests on furniture instead.
const FURNITURE_FORCE_N: f64 = 150.0;
/// Footprint spread of a person standing on the grid / lying on furniture.
const BLOB_SIGMA_M: f64 = 0.12;
const LYING_SIGMA_M: f64 = 0.30;
/// Scripted speed above which the gait force oscillation kicks in.
const GAIT_SPEED_MPS: f64 = 0.3;

/// Microphone model: quiet-room floor plus a boost while anyone speaks.
const AMBIENT_ENERGY: f64 = 0.02;
const SPEECH_ENERGY: f64 = 0.55;

/// Chance per camera tick that a sleeping body is visible at all (bedding
/// hides it otherwise). One draw per resident+instant, shared by all cameras
/// so they agree on what was visible.
const SLEEP_VISIBLE_P: f64 = 0.75;

// Seed domains; each independent random stream mixes one of these in.
const D_CAMERA: u64 = 0xC1;
const D_AUDIO: u64 = 0xA0;
const D_FLOOR: u64 = 0xF1;
const D_ENV: u64 = 0xE0;
const D_BEDDING: u64 = 0xB0;
const D_TRANSIT: u64 = 0x70;
const D_SYNC: u64 = 0x5C;

fn stream_rng(seed: u64, domain: u64, a: u64, b: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(mix64(mix64(seed ^ domain.wrapping_mul(0x9E37_79B9_7F4A_7C15), a), b))
}

fn normal(rng: &mut ChaCha8Rng, sigma: f64) -> f64 {
    if sigma <= 0.0 {
        // Keep the stream advancing even when this sensor is noiseless.
        let _ = rng.gen::<f64>();
        return 0.0;
    }
    Normal::new(0.0, sigma).expect("finite sigma").sample(rng)
}

/// One frame leaving a sensor: `emit_ns` is the true (reference) instant the
/// device put it on the wire. Sync replies carry a forced arrival because
/// their return leg is part of the measured exchange, not the data path.
#[derive(Debug, Clone)]
pub struct EmittedFrame {
    pub emit_ns: Nanos,
    pub frame: Frame,
    pub forced_arrival_ns: Option<Nanos>,
}

#[derive(Debug, Clone)]
pub struct SensorStream {
    pub device_id: u16,
    pub frames: Vec<EmittedFrame>,
}

/// One frame as the collector would see it.
#[derive(Debug, Clone)]
pub struct Arrival {
    pub receive_ns: u64,
    pub frame: Frame,
}

/// Per-device conservation ledger for the transit model.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, serde::Serialize)]
pub struct DeviceStats {
    pub emitted: u64,
    pub lost_in_transit: u64,
}

#[derive(Debug, Clone)]
pub struct SimRun {
    /// Sorted by (receive_ns, device_id, sequence).
    pub arrivals: Vec<Arrival>,
    pub stats: BTreeMap<u16, DeviceStats>,
}

/// Reference-time sample grid: tick `k` of a sensor running at `rate_hz`.
fn tick_ns(rate_hz: f64, k: u64) -> Nanos {
    ((k as f64) * (NS_PER_SEC as f64) / rate_hz).round() as Nanos
}

fn spans_to_ns(spans: &[(f64, f64)]) -> Vec<(Nanos, Nanos)> {
    spans.iter().map(|&(a, b)| (secs_to_ns(a), secs_to_ns(b))).collect()
}

fn in_any(spans: &[(Nanos, Nanos)], t: Nanos) -> bool {
    spans.iter().any(|&(a, b)| t >= a && t < b)
}

/// Skeleton joint offsets in the body frame: (forward, lateral, up) metres.
/// Index order matches [`crate::payload::JOINT_NAMES`].
const STANDING_POSE: [[f64; 3]; JOINT_COUNT] = [
    [0.00, 0.00, 1.70],  // head
    [0.00, 0.20, 1.45],  // shoulders
    [0.00, -0.20, 1.45],
    [0.02, 0.25, 1.12],  // elbows
    [0.02, -0.25, 1.12],
    [0.05, 0.27, 0.85],  // wrists
    [0.05, -0.27, 0.85],
    [0.00, 0.12, 0.95],  // hips
    [0.00, -0.12, 0.95],
    [0.02, 0.12, 0.50],  // knees
    [0.02, -0.12, 0.50],
    [0.02, 0.12, 0.08],  // ankles
    [0.02, -0.12, 0.08],
];

const SITTING_POSE: [[f64; 3]; JOINT_COUNT] = [
    [0.05, 0.00, 1.22],
    [0.05, 0.20, 1.00],
    [0.05, -0.20, 1.00],
    [0.10, 0.24, 0.78],
    [0.10, -0.24, 0.78],
    [0.25, 0.25, 0.65],
    [0.25, -0.25, 0.65],
    [0.00, 0.14, 0.50],
    [0.00, -0.14, 0.50],
    [0.35, 0.14, 0.50],
    [0.35, -0.14, 0.50],
    [0.40, 0.14, 0.12],
    [0.40, -0.14, 0.12],
];

/// Horizontal body on raised furniture: long axis points along `facing`.
const LYING_POSE: [[f64; 3]; JOINT_COUNT] = [
    [0.80, 0.00, 0.63],
    [0.62, 0.18, 0.61],
    [0.62, -0.18, 0.61],
    [0.40, 0.22, 0.60],
    [0.40, -0.22, 0.60],
    [0.20, 0.24, 0.59],
    [0.20, -0.24, 0.59],
    [0.00, 0.12, 0.60],
    [0.00, -0.12, 0.60],
    [-0.38, 0.11, 0.61],
    [-0.38, -0.11, 0.61],
    [-0.75, 0.10, 0.59],
    [-0.75, -0.10, 0.59],
];

/// World-space joint positions for a body at `(x, y)` facing the unit-ish
/// direction `facing`.
pub fn synth_skeleton(
    position: (f64, f64),
    facing: (f64, f64),
    posture: Posture,
) -> [[f64; 3]; JOINT_COUNT] {
    let pose = match posture {
        Posture::Lying => &LYING_POSE,
        Posture::Sitting => &SITTING_POSE,
        _ => &STANDING_POSE,
    };
    let norm = (facing.0 * facing.0 + facing.1 * facing.1).sqrt();
    let (fx, fy) = if norm > 1e-9 { (facing.0 / norm, facing.1 / norm) } else { (1.0, 0.0) };
    // Lateral axis is the forward axis rotated +90° in the ground plane.
    let (lx, ly) = (-fy, fx);
    let mut out = [[0.0; 3]; JOINT_COUNT];
    for (i, [f, l, z]) in pose.iter().enumerate() {
        out[i] = [position.0 + f * fx + l * lx, position.1 + f * fy + l * ly, *z];
    }
    out
}

/// How a resident's emotional state scales their walking cadence.
pub fn gait_multiplier(emotion: &str) -> f64 {
    match emotion {
        "happy" => 1.12,
        "excited" => 1.3,
        "angry" => 1.2,
        "sad" => 0.88,
        "tired" => 0.85,
        _ => 1.0,
    }
}

/// Scripted ground velocity, central-differenced from the waypoint track.
fn resident_velocity(scenario: &Scenario, id: u8, t: Nanos) -> Option<(f64, f64)> {
    let h = 25_000_000i64; // 25 ms half-step
    let dur = scenario.duration_ns();
    let (a, b) = ((t - h).max(0), (t + h).min(dur));
    if b <= a {
        return None;
    }
    let find = |s: &TruthSample| s.residents.iter().find(|r| r.id == id).and_then(|r| r.position);
    let pa = find(&scenario.truth_at(a))?;
    let pb = find(&scenario.truth_at(b))?;
    let dt = (b - a) as f64 / NS_PER_SEC as f64;
    Some(((pb.0 - pa.0) / dt, (pb.1 - pa.1) / dt))
}

/// Whether a sleeping body is visible (not buried in bedding) at an instant.
/// Keyed on the instant itself so every camera sampling the same tick agrees.
fn sleeper_visible(seed: u64, resident: u8, t: Nanos) -> bool {
    stream_rng(seed, D_BEDDING, resident as u64, t as u64).gen::<f64>() < SLEEP_VISIBLE_P
}

struct FacingTracker {
    last: BTreeMap<u8, (f64, f64)>,
}

impl FacingTracker {
    fn new() -> FacingTracker {
        FacingTracker { last: BTreeMap::new() }
    }

    fn facing(&mut self, scenario: &Scenario, id: u8, t: Nanos) -> (f64, f64) {
        if let Some((vx, vy)) = resident_velocity(scenario, id, t) {
            let speed = (vx * vx + vy * vy).sqrt();
            if speed >= 0.15 {
                let f = (vx / speed, vy / speed);
                self.last.insert(id, f);
                return f;
            }
        }
        *self.last.get(&id).unwrap_or(&(1.0, 0.0))
    }
}

fn camera_payload(
    scenario: &Scenario,
    spec: &SensorSpec,
    truth: &TruthSample,
    facing: &mut FacingTracker,
    tick: u64,
    t: Nanos,
) -> SamplePayload {
    let geom = crate::features::CameraGeometry::from_config(
        spec.camera.as_ref().expect("validated camera geometry"),
    )
    .expect("validated camera geometry");
    let mut rng = stream_rng(scenario.seed, D_CAMERA, spec.device_id as u64, tick);
    let sigma = spec.noise.keypoint_sigma;
    let mut residents = Vec::new();
    for r in &truth.residents {
        let Some(pos) = r.position else { continue };
        if let Some(z) = spec.privacy_zone {
            if pos.0 >= z[0] && pos.0 < z[2] && pos.1 >= z[1] && pos.1 < z[3] {
                continue; // this camera refuses to see into the zone
            }
        }
        if r.activity == "sleeping" && !sleeper_visible(scenario.seed, r.id, t) {
            continue;
        }
        let skel = synth_skeleton(pos, facing.facing(scenario, r.id, t), r.posture);
        let mut joints = Vec::with_capacity(JOINT_COUNT);
        for p in skel {
            // Two draws per joint no matter what the geometry says, so the
            // noise stream is independent of viewpoint.
            let (du, dv) = (normal(&mut rng, sigma), normal(&mut rng, sigma));
            let kp = match geom.project(p) {
                Some((uv, depth)) if geom.in_frame(uv, depth) => {
                    let (u, v) = (uv.0 + du, uv.1 + dv);
                    if (0.0..=1.0).contains(&u) && (0.0..=1.0).contains(&v) {
                        Keypoint { u, v, confidence: 0.9, in_view: true }
                    } else {
                        Keypoint::out_of_view()
                    }
                }
                _ => Keypoint::out_of_view(),
            };
            joints.push(kp);
        }
        residents.push(ResidentKeypoints { resident: r.id, joints });
    }
    SamplePayload::Camera(CameraObservation { residents })
}

fn audio_payload(scenario: &Scenario, spec: &SensorSpec, truth: &TruthSample, tick: u64) -> SamplePayload {
    let mut rng = stream_rng(scenario.seed, D_AUDIO, spec.device_id as u64, tick);
    let speaking =
        truth.residents.iter().any(|r| r.speaking && r.position.is_some());
    let speech = if speaking { SPEECH_ENERGY } else { 0.0 };
    let sigma = spec.noise.energy_sigma;
    let energy = (AMBIENT_ENERGY + speech + normal(&mut rng, sigma)).clamp(0.0, 1.0);
    let voiced = (speech + normal(&mut rng, sigma * 0.5)).clamp(0.0, 1.0);
    SamplePayload::Audio(AudioSample { energy: energy as f32, voiced: voiced as f32 })
}

fn floor_payload(
    scenario: &Scenario,
    spec: &SensorSpec,
    truth: &TruthSample,
    tick: u64,
    t: Nanos,
) -> SamplePayload {
    let grid = spec.floor.as_ref().expect("validated floor geometry");
    let (rows, cols) = (grid.rows as usize, grid.cols as usize);
    let mut cells = vec![0.0f64; rows * cols];
    let t_s = t as f64 / NS_PER_SEC as f64;
    for r in &truth.residents {
        let Some(pos) = r.position else { continue };
        let script = scenario.residents.iter().find(|s| s.id == r.id);
        let (total, sigma) = if r.posture == Posture::Lying {
            (FURNITURE_FORCE_N, LYING_SIGMA_M)
        } else {
            let speed = resident_velocity(scenario, r.id, t)
                .map(|(vx, vy)| (vx * vx + vy * vy).sqrt())
                .unwrap_or(0.0);
            let mut total = BODY_FORCE_N;
            if speed >= GAIT_SPEED_MPS {
                let cadence = script.map(|s| s.gait.cadence_spm).unwrap_or(105.0);
                let steps_hz = cadence * gait_multiplier(&r.emotion) / 60.0;
                total += STEP_FORCE_N * (std::f64::consts::TAU * steps_hz * t_s).sin();
            }
            (total, BLOB_SIGMA_M)
        };
        // Gaussian footprint, renormalized over the grid so the cell sum is
        // exactly the body load.
        let mut weights = vec![0.0f64; rows * cols];
        let mut wsum = 0.0;
        for i in 0..rows {
            for j in 0..cols {
                let cx = grid.origin[0] + (j as f64 + 0.5) * grid.cell_m;
                let cy = grid.origin[1] + (i as f64 + 0.5) * grid.cell_m;
                let d2 = (cx - pos.0).powi(2) + (cy - pos.1).powi(2);
                let w = (-d2 / (2.0 * sigma * sigma)).exp();
                weights[i * cols + j] = w;
                wsum += w;
            }
        }
        if wsum > 0.0 {
            for (c, w) in cells.iter_mut().zip(&weights) {
                *c += total * w / wsum;
            }
        }
    }
    let mut rng = stream_rng(scenario.seed, D_FLOOR, spec.device_id as u64, tick);
    let sigma_n = spec.noise.cell_sigma_n;
    let out: Vec<f32> =
        cells.iter().map(|&c| (c + normal(&mut rng, sigma_n)).max(0.0) as f32).collect();
    SamplePayload::Floor(FloorFrame { rows: grid.rows, cols: grid.cols, cells: out })
}

fn env_payload(scenario: &Scenario, spec: &SensorSpec, truth: &TruthSample, tick: u64) -> SamplePayload {
    let mut rng = stream_rng(scenario.seed, D_ENV, spec.device_id as u64, tick);
    let t = truth.temperature_c + normal(&mut rng, spec.noise.temp_sigma_c);
    let h = (truth.humidity_pct + normal(&mut rng, spec.noise.humidity_sigma)).clamp(0.0, 100.0);
    SamplePayload::Env(EnvSample { temperature_c: t as f32, humidity_pct: h as f32 })
}

fn usage_payload(
    scenario: &Scenario,
    spec: &SensorSpec,
    truth: &TruthSample,
    tick: u64,
) -> SamplePayload {
    // A sensor with no fixed `watches` target is a hub on the appliance bus:
    // it cycles through every declared appliance, one report per sample.
    let device = match spec.watches {
        Some(d) => d,
        None => {
            let ids = scenario.device_ids();
            let idx = (tick % ids.len() as u64) as usize;
            *ids.iter().nth(idx).expect("hub validated against declared devices")
        }
    };
    let state = truth.devices.get(&device).cloned().unwrap_or_else(|| "unknown".into());
    SamplePayload::Usage(UsageSample { device, state })
}

enum Ev {
    Hello,
    Sample { tick: u64 },
    Heartbeat,
    /// A completed four-timestamp round; timestamps are filled in emission
    /// order so device clock reads stay sequential.
    Sync { epoch: u32, round: u16, t0: Nanos, up_ns: Nanos, down_ns: Nanos },
    Bye,
}

struct Timed {
    at: Nanos,
    rank: u8,
    aux: u64,
    ev: Ev,
}

/// All frames one sensor puts on the wire over `[from_ns, to_ns)`, in
/// emission order with device timestamps and sequence numbers assigned.
pub fn emit_sensor(
    scenario: &Scenario,
    spec: &SensorSpec,
    from_ns: Nanos,
    to_ns: Nanos,
) -> SensorStream {
    let outages = spans_to_ns(&spec.outages);
    let mut events: Vec<Timed> = Vec::new();

    events.push(Timed { at: from_ns, rank: 0, aux: 0, ev: Ev::Hello });
    for &(_, end) in &outages {
        if end > from_ns && end < to_ns {
            events.push(Timed { at: end, rank: 0, aux: 0, ev: Ev::Hello });
        }
    }

    let mut k = 0u64;
    loop {
        let t = tick_ns(spec.rate_hz, k);
        if t >= to_ns {
            break;
        }
        if t >= from_ns && !in_any(&outages, t) {
            events.push(Timed { at: t, rank: 2, aux: k, ev: Ev::Sample { tick: k } });
        }
        k += 1;
    }

    let hb_ns = secs_to_ns(spec.heartbeat_s);
    let mut h = 0i64;
    while h * hb_ns < to_ns {
        let t = h * hb_ns;
        if t >= from_ns && !in_any(&outages, t) {
            events.push(Timed { at: t, rank: 3, aux: h as u64, ev: Ev::Heartbeat });
        }
        h += 1;
    }

    let plan = &scenario.sync;
    let interval_ns = secs_to_ns(plan.interval_s);
    let mut epoch = 0u32;
    loop {
        let epoch_t = from_ns + epoch as i64 * interval_ns;
        if epoch_t >= to_ns || interval_ns <= 0 {
            break;
        }
        for round in 0..plan.rounds_per_epoch as u16 {
            let t0 = epoch_t + round as i64 * ROUND_SPACING_NS;
            let mut rng = stream_rng(
                scenario.seed,
                D_SYNC,
                spec.device_id as u64,
                (epoch as u64) << 16 | round as u64,
            );
            let base = plan.path.base_ms * 1e6;
            let up_ns = (base + normal(&mut rng, plan.path.jitter_ms * 1e6).abs()).round() as Nanos;
            let down_ns =
                (base + normal(&mut rng, plan.path.jitter_ms * 1e6).abs()).round() as Nanos;
            let reply = t0 + up_ns + PROC_DELAY_NS;
            if reply >= to_ns || in_any(&outages, t0) || in_any(&outages, reply) {
                continue;
            }
            events.push(Timed {
                at: reply,
                rank: 1,
                aux: (epoch as u64) << 16 | round as u64,
                ev: Ev::Sync { epoch, round, t0, up_ns, down_ns },
            });
        }
        epoch += 1;
    }

    if to_ns > from_ns && !in_any(&outages, to_ns - 1) {
        events.push(Timed { at: to_ns - 1, rank: 4, aux: 0, ev: Ev::Bye });
    }

    events.sort_by_key(|e| (e.at, e.rank, e.aux));

    let modality = spec.modality as u8;
    let mut facing = FacingTracker::new();
    let mut frames = Vec::with_capacity(events.len());
    let mut seq = 0u32;
    let mut reads = 0u64;
    let stamp = |t: Nanos, reads: &mut u64| {
        let ts = spec.clock.device_time(t, *reads);
        *reads += 1;
        ts
    };
    for ev in events {
        let (frame, forced) = match ev.ev {
            Ev::Hello => {
                seq = 0;
                let payload = HelloPayload {
                    spec: spec.clone(),
                    room: scenario.room.clone(),
                    start_of_day_s: scenario.start_of_day_s(),
                }
                .encode();
                let ts = stamp(ev.at, &mut reads);
                (
                    Frame {
                        msg_type: MsgType::Hello,
                        device_id: spec.device_id,
                        modality,
                        sequence: seq,
                        device_ts: ts,
                        payload,
                    },
                    None,
                )
            }
            Ev::Sample { tick } => {
                let truth = scenario.truth_at(ev.at);
                let payload = match spec.modality {
                    Modality::Camera => {
                        camera_payload(scenario, spec, &truth, &mut facing, tick, ev.at)
                    }
                    Modality::Microphone => audio_payload(scenario, spec, &truth, tick),
                    Modality::FloorPressure => {
                        floor_payload(scenario, spec, &truth, tick, ev.at)
                    }
                    Modality::Environment => env_payload(scenario, spec, &truth, tick),
                    Modality::DeviceUsage => usage_payload(scenario, spec, &truth, tick),
                };
                let ts = stamp(ev.at, &mut reads);
                (
                    Frame {
                        msg_type: MsgType::Sample,
                        device_id: spec.device_id,
                        modality,
                        sequence: seq,
                        device_ts: ts,
                        payload: payload.encode(),
                    },
                    None,
                )
            }
            Ev::Heartbeat => {
                let ts = stamp(ev.at, &mut reads);
                (Frame::empty(MsgType::Heartbeat, spec.device_id, modality, seq, ts), None)
            }
            Ev::Sync { epoch, round, t0, up_ns, down_ns } => {
                let t1 = stamp(t0 + up_ns, &mut reads);
                let t2 = stamp(t0 + up_ns + PROC_DELAY_NS, &mut reads);
                let t3 = ev.at + down_ns;
                let report = SyncReport { epoch, round, t0, t1, t2, t3 };
                (
                    Frame {
                        msg_type: MsgType::TimeResp,
                        device_id: spec.device_id,
                        modality,
                        sequence: seq,
                        device_ts: t2,
                        payload: report.encode(),
                    },
                    Some(t3),
                )
            }
            Ev::Bye => {
                let ts = stamp(ev.at, &mut reads);
                (Frame::empty(MsgType::Bye, spec.device_id, modality, seq, ts), None)
            }
        };
        seq = seq.wrapping_add(1);
        frames.push(EmittedFrame { emit_ns: ev.at, frame, forced_arrival_ns: forced });
    }
    SensorStream { device_id: spec.device_id, frames }
}

/// Every sensor's emissions over the window, one stream per sensor.
pub fn emit(scenario: &Scenario, from_ns: Nanos, to_ns: Nanos) -> Vec<SensorStream> {
    scenario.sensors.iter().map(|s| emit_sensor(scenario, s, from_ns, to_ns)).collect()
}

/// Push every stream through its transit path: per-frame latency and loss,
/// FIFO order preserved per device, then a global merge by arrival time.
pub fn deliver(scenario: &Scenario, streams: Vec<SensorStream>) -> SimRun {
    let mut arrivals = Vec::new();
    let mut stats = BTreeMap::new();
    for stream in streams {
        let spec = scenario.sensor(stream.device_id).expect("stream from scenario sensor");
        let mut rng = stream_rng(scenario.seed, D_TRANSIT, stream.device_id as u64, 0);
        let entry: &mut DeviceStats = stats.entry(stream.device_id).or_default();
        let mut last_arrival: u64 = 0;
        for ef in stream.frames {
            // Both draws happen for every frame so loss never shifts the
            // latency sequence of later frames.
            let loss_u: f64 = rng.gen();
            let jitter = normal(&mut rng, spec.latency.jitter_ms * 1e6).abs();
            entry.emitted += 1;
            let loss_rate = if ef.forced_arrival_ns.is_some() {
                scenario.sync.path.loss_rate
            } else {
                spec.latency.loss_rate
            };
            if loss_u < loss_rate {
                entry.lost_in_transit += 1;
                continue;
            }
            let at = match ef.forced_arrival_ns {
                Some(t3) => t3.max(0) as u64,
                None => {
                    let delay = spec.latency.base_ms * 1e6 + jitter;
                    (ef.emit_ns.max(0) as u64).saturating_add(delay.round() as u64)
                }
            };
            let at = at.max(last_arrival.saturating_add(1));
            last_arrival = at;
            arrivals.push(Arrival { receive_ns: at, frame: ef.frame });
        }
    }
    arrivals.sort_by_key(|a| (a.receive_ns, a.frame.device_id, a.frame.sequence));
    SimRun { arrivals, stats }
}

/// Full run over the scenario's whole duration.
pub fn simulate(scenario: &Scenario) -> SimRun {
    deliver(scenario, emit(scenario, 0, scenario.duration_ns()))
}

/// Simulate and persist to a segmented log under `dir`. Returns the sealed
/// segment paths plus the per-device conservation stats.
pub fn write_log(
    scenario: &Scenario,
    dir: &Path,
    policy: RotatePolicy,
) -> Result<(Vec<PathBuf>, BTreeMap<u16, DeviceStats>), StorageError> {
    let run = simulate(scenario);
    let mut writer = LogWriter::create(dir, scenario.hash64(), policy)?;
    for a in &run.arrivals {
        let bytes = a.frame.encode().expect("simulated frames respect wire limits");
        writer.append(a.receive_ns, &bytes)?;
    }
    let segments = writer.finish()?;
    Ok((segments, run.stats))
}

/// Ground truth sampled on a fixed grid, for evaluation exports.
pub fn truth_series(scenario: &Scenario, step_ns: Nanos) -> Vec<TruthSample> {
    assert!(step_ns > 0, "step must be positive");
    let mut out = Vec::new();
    let mut t = 0;
    let dur = scenario.duration_ns();
    while t < dur {
        out.push(scenario.truth_at(t));
        t += step_ns;
    }
    out
}
