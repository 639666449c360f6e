//! Typed payload encodings carried inside wire frames.
//!
//! The frame header's modality byte selects the payload codec, so payloads
//! carry no redundant tag. All numeric fields are big-endian like the frame
//! header. Two non-sample payloads exist: HELLO frames carry the announcing
//! sensor's full spec as JSON (the log is self-describing — fusion needs no
//! side channel for camera calibration or floor geometry), and TIMERESP
//! frames carry one completed four-timestamp sync round.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::clock::SyncRound;
use crate::scenario::{Modality, Room, SensorSpec};
use crate::time::Nanos;

pub const JOINT_COUNT: usize = 13;

/// Skeleton joint order used everywhere: wire payloads, triangulation,
/// posture analysis.
pub const JOINT_NAMES: [&str; JOINT_COUNT] = [
    "head",
    "l_shoulder",
    "r_shoulder",
    "l_elbow",
    "r_elbow",
    "l_wrist",
    "r_wrist",
    "l_hip",
    "r_hip",
    "l_knee",
    "r_knee",
    "l_ankle",
    "r_ankle",
];

pub const HEAD: usize = 0;
pub const L_HIP: usize = 7;
pub const R_HIP: usize = 8;
pub const L_ANKLE: usize = 11;
pub const R_ANKLE: usize = 12;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum PayloadError {
    #[error("payload truncated: need {needed} bytes, have {have}")]
    Truncated { needed: usize, have: usize },
    #[error("payload length {have} does not match structure ({expected})")]
    LengthMismatch { have: usize, expected: usize },
    #[error("modality byte {0} has no payload codec")]
    UnknownModality(u8),
    #[error("invalid utf-8 in state string")]
    BadString,
    #[error("bad hello payload: {0}")]
    BadHello(String),
}

/// One keypoint in normalized image coordinates ([0,1] spans the sensor).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Keypoint {
    pub u: f64,
    pub v: f64,
    pub confidence: f32,
    pub in_view: bool,
}

impl Keypoint {
    pub fn out_of_view() -> Keypoint {
        Keypoint { u: 0.0, v: 0.0, confidence: 0.0, in_view: false }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResidentKeypoints {
    pub resident: u8,
    pub joints: Vec<Keypoint>, // always JOINT_COUNT long
}

impl ResidentKeypoints {
    /// Detection rule: at least six joints actually in view.
    pub fn person_detected(&self) -> bool {
        self.joints.iter().filter(|k| k.in_view).count() >= 6
    }
}

/// What one camera saw in one frame. Residents inside a privacy zone (or out
/// of the room) simply have no entry.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct CameraObservation {
    pub residents: Vec<ResidentKeypoints>,
}

impl CameraObservation {
    pub fn any_person_detected(&self) -> bool {
        self.residents.iter().any(|r| r.person_detected())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AudioSample {
    /// Overall short-window energy in [0, 1]; the voice-activity input.
    pub energy: f32,
    /// Voiced-band portion of the energy.
    pub voiced: f32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FloorFrame {
    pub rows: u16,
    pub cols: u16,
    /// Row-major per-cell force in Newtons.
    pub cells: Vec<f32>,
}

impl FloorFrame {
    pub fn total_force(&self) -> f64 {
        self.cells.iter().map(|&c| c as f64).sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EnvSample {
    pub temperature_c: f32,
    pub humidity_pct: f32,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct UsageSample {
    pub device: u16,
    pub state: String,
}

#[derive(Debug, Clone, PartialEq)]
pub enum SamplePayload {
    Camera(CameraObservation),
    Audio(AudioSample),
    Floor(FloorFrame),
    Env(EnvSample),
    Usage(UsageSample),
}

impl SamplePayload {
    pub fn modality(&self) -> Modality {
        match self {
            SamplePayload::Camera(_) => Modality::Camera,
            SamplePayload::Audio(_) => Modality::Microphone,
            SamplePayload::Floor(_) => Modality::FloorPressure,
            SamplePayload::Env(_) => Modality::Environment,
            SamplePayload::Usage(_) => Modality::DeviceUsage,
        }
    }

    pub fn encode(&self) -> Vec<u8> {
        match self {
            SamplePayload::Camera(obs) => {
                let mut out = Vec::with_capacity(1 + obs.residents.len() * (1 + JOINT_COUNT * 21));
                out.push(obs.residents.len() as u8);
                for r in &obs.residents {
                    debug_assert_eq!(r.joints.len(), JOINT_COUNT);
                    out.push(r.resident);
                    for j in &r.joints {
                        out.extend_from_slice(&j.u.to_bits().to_be_bytes());
                        out.extend_from_slice(&j.v.to_bits().to_be_bytes());
                        out.extend_from_slice(&j.confidence.to_bits().to_be_bytes());
                        out.push(j.in_view as u8);
                    }
                }
                out
            }
            SamplePayload::Audio(a) => {
                let mut out = Vec::with_capacity(8);
                out.extend_from_slice(&a.energy.to_bits().to_be_bytes());
                out.extend_from_slice(&a.voiced.to_bits().to_be_bytes());
                out
            }
            SamplePayload::Floor(f) => {
                debug_assert_eq!(f.cells.len(), f.rows as usize * f.cols as usize);
                let mut out = Vec::with_capacity(4 + f.cells.len() * 4);
                out.extend_from_slice(&f.rows.to_be_bytes());
                out.extend_from_slice(&f.cols.to_be_bytes());
                for c in &f.cells {
                    out.extend_from_slice(&c.to_bits().to_be_bytes());
                }
                out
            }
            SamplePayload::Env(e) => {
                let mut out = Vec::with_capacity(8);
                out.extend_from_slice(&e.temperature_c.to_bits().to_be_bytes());
                out.extend_from_slice(&e.humidity_pct.to_bits().to_be_bytes());
                out
            }
            SamplePayload::Usage(u) => {
                let state = u.state.as_bytes();
                debug_assert!(state.len() <= 255);
                let mut out = Vec::with_capacity(3 + state.len());
                out.extend_from_slice(&u.device.to_be_bytes());
                out.push(state.len() as u8);
                out.extend_from_slice(state);
                out
            }
        }
    }

    pub fn decode(modality: u8, bytes: &[u8]) -> Result<SamplePayload, PayloadError> {
        let modality =
            Modality::from_wire(modality).ok_or(PayloadError::UnknownModality(modality))?;
        match modality {
            Modality::Camera => {
                let mut rd = Reader::new(bytes);
                let count = rd.u8()? as usize;
                let mut residents = Vec::with_capacity(count);
                for _ in 0..count {
                    let resident = rd.u8()?;
                    let mut joints = Vec::with_capacity(JOINT_COUNT);
                    for _ in 0..JOINT_COUNT {
                        let u = f64::from_bits(rd.u64()?);
                        let v = f64::from_bits(rd.u64()?);
                        let confidence = f32::from_bits(rd.u32()?);
                        let in_view = rd.u8()? != 0;
                        joints.push(Keypoint { u, v, confidence, in_view });
                    }
                    residents.push(ResidentKeypoints { resident, joints });
                }
                rd.finish()?;
                Ok(SamplePayload::Camera(CameraObservation { residents }))
            }
            Modality::Microphone => {
                let mut rd = Reader::new(bytes);
                let energy = f32::from_bits(rd.u32()?);
                let voiced = f32::from_bits(rd.u32()?);
                rd.finish()?;
                Ok(SamplePayload::Audio(AudioSample { energy, voiced }))
            }
            Modality::FloorPressure => {
                let mut rd = Reader::new(bytes);
                let rows = rd.u16()?;
                let cols = rd.u16()?;
                let n = rows as usize * cols as usize;
                let mut cells = Vec::with_capacity(n);
                for _ in 0..n {
                    cells.push(f32::from_bits(rd.u32()?));
                }
                rd.finish()?;
                Ok(SamplePayload::Floor(FloorFrame { rows, cols, cells }))
            }
            Modality::Environment => {
                let mut rd = Reader::new(bytes);
                let temperature_c = f32::from_bits(rd.u32()?);
                let humidity_pct = f32::from_bits(rd.u32()?);
                rd.finish()?;
                Ok(SamplePayload::Env(EnvSample { temperature_c, humidity_pct }))
            }
            Modality::DeviceUsage => {
                let mut rd = Reader::new(bytes);
                let device = rd.u16()?;
                let len = rd.u8()? as usize;
                let raw = rd.take(len)?;
                let state =
                    std::str::from_utf8(raw).map_err(|_| PayloadError::BadString)?.to_string();
                rd.finish()?;
                Ok(SamplePayload::Usage(UsageSample { device, state }))
            }
        }
    }
}

/// HELLO payload: the sensor announces its own spec plus the room it lives
/// in, making a captured log self-describing. `start_of_day_s` anchors the
/// deployment's reference timeline to wall-clock time so downstream stages
/// can evaluate time-of-day conditions without out-of-band metadata.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct HelloPayload {
    pub spec: SensorSpec,
    pub room: Room,
    #[serde(default = "default_start_of_day")]
    pub start_of_day_s: f64,
}

fn default_start_of_day() -> f64 {
    8.0 * 3600.0
}

impl HelloPayload {
    pub fn encode(&self) -> Vec<u8> {
        serde_json::to_vec(self).expect("hello payload serializes")
    }

    pub fn decode(bytes: &[u8]) -> Result<HelloPayload, PayloadError> {
        serde_json::from_slice(bytes).map_err(|e| PayloadError::BadHello(e.to_string()))
    }
}

/// TIMERESP payload: one finished sync exchange, tagged with its epoch so
/// fitting never has to guess the grouping.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SyncReport {
    pub epoch: u32,
    pub round: u16,
    pub t0: Nanos,
    pub t1: Nanos,
    pub t2: Nanos,
    pub t3: Nanos,
}

impl SyncReport {
    pub const ENCODED_LEN: usize = 4 + 2 + 8 * 4;

    pub fn sync_round(&self) -> SyncRound {
        SyncRound { t0: self.t0, t1: self.t1, t2: self.t2, t3: self.t3 }
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(Self::ENCODED_LEN);
        out.extend_from_slice(&self.epoch.to_be_bytes());
        out.extend_from_slice(&self.round.to_be_bytes());
        for t in [self.t0, self.t1, self.t2, self.t3] {
            out.extend_from_slice(&(t as u64).to_be_bytes());
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<SyncReport, PayloadError> {
        let mut rd = Reader::new(bytes);
        let epoch = rd.u32()?;
        let round = rd.u16()?;
        let t0 = rd.u64()? as i64;
        let t1 = rd.u64()? as i64;
        let t2 = rd.u64()? as i64;
        let t3 = rd.u64()? as i64;
        rd.finish()?;
        Ok(SyncReport { epoch, round, t0, t1, t2, t3 })
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn new(buf: &'a [u8]) -> Self {
        Reader { buf, pos: 0 }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8], PayloadError> {
        if self.pos + n > self.buf.len() {
            return Err(PayloadError::Truncated { needed: self.pos + n, have: self.buf.len() });
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8, PayloadError> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16, PayloadError> {
        Ok(u16::from_be_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32, PayloadError> {
        Ok(u32::from_be_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64, PayloadError> {
        Ok(u64::from_be_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn finish(self) -> Result<(), PayloadError> {
        if self.pos != self.buf.len() {
            return Err(PayloadError::LengthMismatch { have: self.buf.len(), expected: self.pos });
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn keypoint(u: f64, v: f64, conf: f32, in_view: bool) -> Keypoint {
        Keypoint { u, v, confidence: conf, in_view }
    }

    #[test]
    fn camera_observation_round_trip() {
        let obs = CameraObservation {
            residents: vec![
                ResidentKeypoints {
                    resident: 1,
                    joints: (0..JOINT_COUNT)
                        .map(|i| keypoint(0.01 * i as f64, 1.0 - 0.02 * i as f64, 0.9, i % 3 != 0))
                        .collect(),
                },
                ResidentKeypoints {
                    resident: 2,
                    joints: vec![Keypoint::out_of_view(); JOINT_COUNT],
                },
            ],
        };
        let p = SamplePayload::Camera(obs.clone());
        let decoded = SamplePayload::decode(0, &p.encode()).unwrap();
        assert_eq!(decoded, p);
        assert!(obs.residents[0].person_detected());
        assert!(!obs.residents[1].person_detected());
    }

    #[test]
    fn person_detection_needs_six_joints() {
        let mut joints = vec![Keypoint::out_of_view(); JOINT_COUNT];
        for j in joints.iter_mut().take(5) {
            j.in_view = true;
        }
        let mut r = ResidentKeypoints { resident: 1, joints };
        assert!(!r.person_detected());
        r.joints[5].in_view = true;
        assert!(r.person_detected());
    }

    #[test]
    fn scalar_payloads_round_trip() {
        for p in [
            SamplePayload::Audio(AudioSample { energy: 0.25, voiced: 0.125 }),
            SamplePayload::Env(EnvSample { temperature_c: 21.5, humidity_pct: 44.0 }),
            SamplePayload::Usage(UsageSample { device: 10, state: "eco".into() }),
        ] {
            let modality = p.modality() as u8;
            assert_eq!(SamplePayload::decode(modality, &p.encode()).unwrap(), p);
        }
    }

    #[test]
    fn floor_frame_round_trip_and_total() {
        let f = FloorFrame { rows: 2, cols: 3, cells: vec![0.0, 1.5, 2.5, 3.0, 4.0, 5.0] };
        let p = SamplePayload::Floor(f.clone());
        assert_eq!(SamplePayload::decode(2, &p.encode()).unwrap(), p);
        assert!((f.total_force() - 16.0).abs() < 1e-12);
    }

    #[test]
    fn rejects_malformed_payloads() {
        assert_eq!(
            SamplePayload::decode(9, &[]),
            Err(PayloadError::UnknownModality(9))
        );
        assert!(matches!(
            SamplePayload::decode(1, &[0, 0, 0]),
            Err(PayloadError::Truncated { .. })
        ));
        // floor header promising more cells than present
        let mut bytes = SamplePayload::Floor(FloorFrame { rows: 1, cols: 1, cells: vec![1.0] })
            .encode();
        bytes[3] = 2;
        assert!(matches!(
            SamplePayload::decode(2, &bytes),
            Err(PayloadError::Truncated { .. })
        ));
        // trailing garbage
        let mut audio = SamplePayload::Audio(AudioSample { energy: 0.0, voiced: 0.0 }).encode();
        audio.push(7);
        assert!(matches!(
            SamplePayload::decode(1, &audio),
            Err(PayloadError::LengthMismatch { .. })
        ));
        // invalid utf-8 state
        let mut usage = SamplePayload::Usage(UsageSample { device: 1, state: "on".into() }).encode();
        usage[3] = 0xFF;
        assert_eq!(SamplePayload::decode(4, &usage), Err(PayloadError::BadString));
    }

    #[test]
    fn sync_report_round_trip() {
        let r = SyncReport { epoch: 3, round: 7, t0: -10, t1: 20, t2: 30, t3: 50 };
        let bytes = r.encode();
        assert_eq!(bytes.len(), SyncReport::ENCODED_LEN);
        assert_eq!(SyncReport::decode(&bytes).unwrap(), r);
        assert_eq!(r.sync_round().estimate_offset_delay().unwrap().1, 50);
    }
}
