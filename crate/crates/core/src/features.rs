//! Level 1: turning raw per-sensor samples into physical quantities.
//!
//! Everything here is deterministic closed-form math: floor-mat occupancy
//! and centroid, hysteresis voice-activity detection, multi-camera ray
//! triangulation with a degeneracy guard, skeleton reconstruction,
//! cross-modality consistency filtering, position track blending, and gait
//! statistics from the floor force series.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::payload::{CameraObservation, FloorFrame, JOINT_COUNT};
use crate::scenario::{CameraConfig, FloorConfig};
use crate::time::{Nanos, NS_PER_MS, NS_PER_SEC};

#[derive(Debug, Error, PartialEq)]
pub enum FeatureError {
    #[error("triangulation needs at least {needed} cameras, got {got}")]
    TooFewCameras { needed: usize, got: usize },
    #[error("camera rays are (near-)parallel; no stable intersection")]
    DegenerateGeometry,
    #[error("skeleton reconstruction needs at least two camera views")]
    NoCameraPair,
    #[error("gait window needs at least two track points, got {got}")]
    WindowTooShort { got: usize },
    #[error("floor frame is {got_rows}x{got_cols}, geometry says {rows}x{cols}")]
    DimensionMismatch { rows: u16, cols: u16, got_rows: u16, got_cols: u16 },
    #[error("bad camera geometry: {0}")]
    BadCameraGeometry(String),
}

// ---------------------------------------------------------------------------
// Vector helpers (3-vectors as [f64; 3]; no linear-algebra crate needed for
// fixed 3x3 work).

fn sub(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

fn dot(a: [f64; 3], b: [f64; 3]) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

fn cross(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

fn norm(a: [f64; 3]) -> f64 {
    dot(a, a).sqrt()
}

fn normalize(a: [f64; 3]) -> Option<[f64; 3]> {
    let n = norm(a);
    (n > 1e-12).then(|| [a[0] / n, a[1] / n, a[2] / n])
}

// ---------------------------------------------------------------------------
// Camera model

/// A calibrated pinhole camera. Image coordinates are normalized: the full
/// frame spans [0, 1] on each axis, `v` grows downward.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CameraGeometry {
    pub origin: [f64; 3],
    right: [f64; 3],
    down: [f64; 3],
    forward: [f64; 3],
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub near_m: f64,
}

impl CameraGeometry {
    pub fn from_config(c: &CameraConfig) -> Result<CameraGeometry, FeatureError> {
        let forward = normalize(sub(c.look_at, c.position))
            .ok_or_else(|| FeatureError::BadCameraGeometry("look_at equals position".into()))?;
        let right = normalize(cross(forward, c.up)).ok_or_else(|| {
            FeatureError::BadCameraGeometry("view direction is parallel to up".into())
        })?;
        let up = cross(right, forward);
        if !(c.fx.is_finite() && c.fy.is_finite() && c.fx > 0.0 && c.fy > 0.0) {
            return Err(FeatureError::BadCameraGeometry("non-positive focal length".into()));
        }
        Ok(CameraGeometry {
            origin: c.position,
            right,
            down: [-up[0], -up[1], -up[2]],
            forward,
            fx: c.fx,
            fy: c.fy,
            cx: c.cx,
            cy: c.cy,
            near_m: c.near_m,
        })
    }

    /// Projects a world point; `None` when it sits behind the image plane.
    /// The depth lets callers apply their own near-plane / frame cut.
    pub fn project(&self, p: [f64; 3]) -> Option<((f64, f64), f64)> {
        let d = sub(p, self.origin);
        let z = dot(d, self.forward);
        if z <= 0.0 {
            return None;
        }
        let u = self.cx + self.fx * dot(d, self.right) / z;
        let v = self.cy + self.fy * dot(d, self.down) / z;
        Some(((u, v), z))
    }

    /// True when a projected point is inside the frame and past the near
    /// plane.
    pub fn in_frame(&self, uv: (f64, f64), depth: f64) -> bool {
        depth >= self.near_m
            && (0.0..=1.0).contains(&uv.0)
            && (0.0..=1.0).contains(&uv.1)
    }

    /// World-space unit ray through an image point.
    pub fn back_project(&self, u: f64, v: f64) -> Ray {
        let dx = (u - self.cx) / self.fx;
        let dy = (v - self.cy) / self.fy;
        let dir = [
            self.forward[0] + dx * self.right[0] + dy * self.down[0],
            self.forward[1] + dx * self.right[1] + dy * self.down[1],
            self.forward[2] + dx * self.right[2] + dy * self.down[2],
        ];
        Ray { origin: self.origin, dir: normalize(dir).expect("pinhole rays are non-zero") }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Ray {
    pub origin: [f64; 3],
    pub dir: [f64; 3],
}

impl Ray {
    pub fn distance_to(&self, p: [f64; 3]) -> f64 {
        let d = sub(p, self.origin);
        let along = dot(d, self.dir);
        let off = [
            d[0] - along * self.dir[0],
            d[1] - along * self.dir[1],
            d[2] - along * self.dir[2],
        ];
        norm(off)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Triangulated {
    pub point: [f64; 3],
    /// Root-mean-square point-to-ray distance across the contributing rays.
    pub rms_residual_m: f64,
}

/// Least-squares intersection of the image rays: minimizes the sum of
/// squared perpendicular distances, which reduces to the 3x3 system
/// `sum(I - d dT) p = sum(I - d dT) o`. Rays closer than ~1e-6 rad to
/// parallel are rejected rather than solved into garbage.
pub fn triangulate(
    views: &[(&CameraGeometry, (f64, f64))],
    min_cameras: usize,
) -> Result<Triangulated, FeatureError> {
    if views.len() < min_cameras.max(2) {
        return Err(FeatureError::TooFewCameras { needed: min_cameras.max(2), got: views.len() });
    }
    let rays: Vec<Ray> = views.iter().map(|(g, (u, v))| g.back_project(*u, *v)).collect();

    let mut a = [[0.0f64; 3]; 3];
    let mut b = [0.0f64; 3];
    for r in &rays {
        for i in 0..3 {
            for j in 0..3 {
                let m = if i == j { 1.0 } else { 0.0 } - r.dir[i] * r.dir[j];
                a[i][j] += m;
                b[i] += m * r.origin[j];
            }
        }
    }

    let det = a[0][0] * (a[1][1] * a[2][2] - a[1][2] * a[2][1])
        - a[0][1] * (a[1][0] * a[2][2] - a[1][2] * a[2][0])
        + a[0][2] * (a[1][0] * a[2][1] - a[1][1] * a[2][0]);
    // trace(A) = 2 * ray count; scale the guard so it is unit-free.
    let scale = (a[0][0] + a[1][1] + a[2][2]) / 3.0;
    if !(det.abs() > 1e-9 * scale * scale * scale) {
        return Err(FeatureError::DegenerateGeometry);
    }

    let inv = |r1: usize, c1: usize, r2: usize, c2: usize| a[r1][c1] * a[r2][c2] - a[r1][c2] * a[r2][c1];
    let point = [
        (inv(1, 1, 2, 2) * b[0] - inv(0, 1, 2, 2) * b[1] + inv(0, 1, 1, 2) * b[2]) / det,
        (-inv(1, 0, 2, 2) * b[0] + inv(0, 0, 2, 2) * b[1] - inv(0, 0, 1, 2) * b[2]) / det,
        (inv(1, 0, 2, 1) * b[0] - inv(0, 0, 2, 1) * b[1] + inv(0, 0, 1, 1) * b[2]) / det,
    ];
    let ss: f64 = rays.iter().map(|r| r.distance_to(point).powi(2)).sum();
    Ok(Triangulated { point, rms_residual_m: (ss / rays.len() as f64).sqrt() })
}

// ---------------------------------------------------------------------------
// Skeletons

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Joint3 {
    pub p: [f64; 3],
    pub residual_m: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Skeleton3D {
    pub resident: u8,
    pub joints: Vec<Option<Joint3>>, // JOINT_COUNT long
}

impl Skeleton3D {
    pub fn valid_count(&self) -> usize {
        self.joints.iter().filter(|j| j.is_some()).count()
    }

    /// Ground-plane anchor: hip midpoint when a hip is visible, otherwise
    /// the centroid of whatever joints exist.
    pub fn root_xy(&self) -> Option<(f64, f64)> {
        use crate::payload::{L_HIP, R_HIP};
        let hips: Vec<[f64; 3]> = [L_HIP, R_HIP]
            .iter()
            .filter_map(|&i| self.joints[i].map(|j| j.p))
            .collect();
        if !hips.is_empty() {
            let n = hips.len() as f64;
            return Some((
                hips.iter().map(|p| p[0]).sum::<f64>() / n,
                hips.iter().map(|p| p[1]).sum::<f64>() / n,
            ));
        }
        let valid: Vec<[f64; 3]> = self.joints.iter().flatten().map(|j| j.p).collect();
        if valid.is_empty() {
            return None;
        }
        let n = valid.len() as f64;
        Some((
            valid.iter().map(|p| p[0]).sum::<f64>() / n,
            valid.iter().map(|p| p[1]).sum::<f64>() / n,
        ))
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SkeletonConfig {
    /// Keypoints below this confidence do not vote.
    pub min_confidence: f32,
    pub min_cameras: usize,
}

impl Default for SkeletonConfig {
    fn default() -> Self {
        SkeletonConfig { min_confidence: 0.3, min_cameras: 2 }
    }
}

/// Triangulates one resident's skeleton from simultaneous camera views.
/// Joints seen by fewer than `min_cameras` views (or whose rays are
/// degenerate) come back as `None`.
pub fn reconstruct_skeleton(
    views: &[(&CameraGeometry, &CameraObservation)],
    resident: u8,
    cfg: &SkeletonConfig,
) -> Result<Skeleton3D, FeatureError> {
    if views.len() < 2 {
        return Err(FeatureError::NoCameraPair);
    }
    let mut joints = vec![None; JOINT_COUNT];
    for (idx, joint) in joints.iter_mut().enumerate() {
        let mut obs: Vec<(&CameraGeometry, (f64, f64))> = Vec::new();
        for (geom, cam_obs) in views {
            if let Some(r) = cam_obs.residents.iter().find(|r| r.resident == resident) {
                let k = &r.joints[idx];
                if k.in_view && k.confidence >= cfg.min_confidence {
                    obs.push((geom, (k.u, k.v)));
                }
            }
        }
        if obs.len() >= cfg.min_cameras.max(2) {
            if let Ok(t) = triangulate(&obs, cfg.min_cameras) {
                *joint = Some(Joint3 { p: t.point, residual_m: t.rms_residual_m });
            }
        }
    }
    Ok(Skeleton3D { resident, joints })
}

// ---------------------------------------------------------------------------
// Floor mat

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Occupancy {
    pub occupied: bool,
    pub total_force_n: f64,
    /// Force-weighted world-space centroid; only present when occupied.
    pub centroid: Option<(f64, f64)>,
}

pub const OCCUPANCY_THRESHOLD_N: f64 = 200.0;

pub fn detect_occupancy(
    frame: &FloorFrame,
    geometry: &FloorConfig,
    threshold_n: f64,
) -> Result<Occupancy, FeatureError> {
    if frame.rows != geometry.rows || frame.cols != geometry.cols {
        return Err(FeatureError::DimensionMismatch {
            rows: geometry.rows,
            cols: geometry.cols,
            got_rows: frame.rows,
            got_cols: frame.cols,
        });
    }
    let total: f64 = frame.total_force();
    if total < threshold_n {
        return Ok(Occupancy { occupied: false, total_force_n: total, centroid: None });
    }
    // Negative cells are sensor noise; they carry no weight.
    let mut w_sum = 0.0;
    let mut x_sum = 0.0;
    let mut y_sum = 0.0;
    for row in 0..frame.rows {
        for col in 0..frame.cols {
            let f = f64::from(frame.cells[row as usize * frame.cols as usize + col as usize]);
            if f > 0.0 {
                let x = geometry.origin[0] + (col as f64 + 0.5) * geometry.cell_m;
                let y = geometry.origin[1] + (row as f64 + 0.5) * geometry.cell_m;
                w_sum += f;
                x_sum += f * x;
                y_sum += f * y;
            }
        }
    }
    let centroid = (w_sum > 0.0).then(|| (x_sum / w_sum, y_sum / w_sum));
    Ok(Occupancy { occupied: true, total_force_n: total, centroid })
}

// ---------------------------------------------------------------------------
// Voice activity

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VadConfig {
    pub on_threshold: f32,
    pub off_threshold: f32,
    /// Activity persists until energy has stayed below the off threshold
    /// for this long.
    pub hangover_ms: f64,
}

impl Default for VadConfig {
    fn default() -> Self {
        VadConfig { on_threshold: 0.2, off_threshold: 0.1, hangover_ms: 300.0 }
    }
}

/// Two-threshold detector with hangover: crosses into "active" at the high
/// threshold, leaves only after a sustained spell under the low one, so
/// natural pauses inside speech do not flap the flag.
#[derive(Debug, Clone)]
pub struct VoiceDetector {
    cfg: VadConfig,
    active: bool,
    below_since: Option<Nanos>,
}

impl VoiceDetector {
    pub fn new(cfg: VadConfig) -> VoiceDetector {
        VoiceDetector { cfg, active: false, below_since: None }
    }

    pub fn update(&mut self, ts: Nanos, energy: f32) -> bool {
        if self.active {
            if energy < self.cfg.off_threshold {
                let since = *self.below_since.get_or_insert(ts);
                if (ts - since) as f64 >= self.cfg.hangover_ms * NS_PER_MS as f64 {
                    self.active = false;
                    self.below_since = None;
                }
            } else {
                self.below_since = None;
            }
        } else if energy >= self.cfg.on_threshold {
            self.active = true;
            self.below_since = None;
        }
        self.active
    }

    pub fn is_active(&self) -> bool {
        self.active
    }
}

// ---------------------------------------------------------------------------
// Consistency filter

#[derive(Debug, Clone, Copy, Default, Serialize, Deserialize)]
pub struct FilterStats {
    pub kept: u64,
    pub dropped_unoccupied: u64,
    /// Records where the mat said empty but a camera still saw a person:
    /// logged, never silently discarded.
    pub disagreements: u64,
}

/// Cross-modal sanity check for one aligned record: if the floor mat says
/// nobody is in the room and no camera detects a person, the record is
/// dropped (sensor-noise features would otherwise leak into level 2).
/// Camera-vs-mat disagreements are kept and counted. Records inside an
/// explicit keep-interval are always kept regardless.
pub fn filter_record(
    ref_ts: Nanos,
    occupied: bool,
    person_detected: bool,
    keep_intervals: &[(Nanos, Nanos)],
    stats: &mut FilterStats,
) -> bool {
    if occupied != person_detected {
        stats.disagreements += 1;
    }
    let keep = occupied
        || person_detected
        || keep_intervals.iter().any(|&(a, b)| ref_ts >= a && ref_ts < b);
    if keep {
        stats.kept += 1;
    } else {
        stats.dropped_unoccupied += 1;
    }
    keep
}

// ---------------------------------------------------------------------------
// Position track

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrackConfig {
    /// Source weights when both camera and floor positions are present.
    pub camera_weight: f64,
    pub floor_weight: f64,
    /// Exponential blend toward the new measurement.
    pub blend: f64,
}

impl Default for TrackConfig {
    fn default() -> Self {
        TrackConfig { camera_weight: 0.7, floor_weight: 0.3, blend: 0.6 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrackPoint {
    pub ts: Nanos,
    pub x: f64,
    pub y: f64,
    pub speed_mps: f64,
}

#[derive(Debug, Clone, Copy, Default)]
pub struct TrackState {
    last: Option<TrackPoint>,
}

impl TrackState {
    /// Folds one record's position evidence into the track. Returns `None`
    /// (track unchanged) when neither source saw the resident.
    pub fn update(
        &mut self,
        ts: Nanos,
        camera_xy: Option<(f64, f64)>,
        floor_xy: Option<(f64, f64)>,
        cfg: &TrackConfig,
    ) -> Option<TrackPoint> {
        let meas = match (camera_xy, floor_xy) {
            (Some(c), Some(f)) => {
                let w = cfg.camera_weight + cfg.floor_weight;
                (
                    (cfg.camera_weight * c.0 + cfg.floor_weight * f.0) / w,
                    (cfg.camera_weight * c.1 + cfg.floor_weight * f.1) / w,
                )
            }
            (Some(c), None) => c,
            (None, Some(f)) => f,
            (None, None) => return None,
        };
        let point = match self.last {
            None => TrackPoint { ts, x: meas.0, y: meas.1, speed_mps: 0.0 },
            Some(prev) => {
                let x = cfg.blend * meas.0 + (1.0 - cfg.blend) * prev.x;
                let y = cfg.blend * meas.1 + (1.0 - cfg.blend) * prev.y;
                let dt = (ts - prev.ts) as f64 / NS_PER_SEC as f64;
                let speed = if dt > 0.0 {
                    ((x - prev.x).powi(2) + (y - prev.y).powi(2)).sqrt() / dt
                } else {
                    prev.speed_mps
                };
                TrackPoint { ts, x, y, speed_mps: speed }
            }
        };
        self.last = Some(point);
        Some(point)
    }

    pub fn reset(&mut self) {
        self.last = None;
    }
}

// ---------------------------------------------------------------------------
// Gait

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GaitConfig {
    /// Total-force peaks must clear this to count as footfalls.
    pub step_threshold_n: f64,
    /// Two footfalls closer than this are one step (debounce).
    pub min_interpeak_ms: f64,
}

impl Default for GaitConfig {
    fn default() -> Self {
        GaitConfig { step_threshold_n: 750.0, min_interpeak_ms: 250.0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GaitFeatures {
    /// Path length over elapsed time across the window.
    pub mean_speed_mps: f64,
    pub step_count: usize,
    pub cadence_spm: f64,
    /// Coefficient of variation of inter-step intervals; low values mean a
    /// steady rhythm. Zero until three steps exist.
    pub cadence_cv: f64,
}

/// Windowed gait statistics from the blended track and the floor-mat total
/// force series.
pub fn gait_features(
    track: &[TrackPoint],
    forces: &[(Nanos, f64)],
    cfg: &GaitConfig,
) -> Result<GaitFeatures, FeatureError> {
    if track.len() < 2 {
        return Err(FeatureError::WindowTooShort { got: track.len() });
    }
    let mut path = 0.0;
    for w in track.windows(2) {
        path += ((w[1].x - w[0].x).powi(2) + (w[1].y - w[0].y).powi(2)).sqrt();
    }
    let span_s = (track.last().unwrap().ts - track[0].ts) as f64 / NS_PER_SEC as f64;
    let mean_speed = if span_s > 0.0 { path / span_s } else { 0.0 };

    let min_gap_ns = (cfg.min_interpeak_ms * NS_PER_MS as f64) as Nanos;
    let mut peaks: Vec<Nanos> = Vec::new();
    for i in 1..forces.len().saturating_sub(1) {
        let (t, f) = forces[i];
        if f >= cfg.step_threshold_n
            && f > forces[i - 1].1
            && f >= forces[i + 1].1
            && peaks.last().map_or(true, |&last| t - last >= min_gap_ns)
        {
            peaks.push(t);
        }
    }
    let (cadence, cv) = if peaks.len() >= 2 {
        let span = (peaks[peaks.len() - 1] - peaks[0]) as f64 / NS_PER_SEC as f64;
        let cadence = 60.0 * (peaks.len() - 1) as f64 / span;
        let cv = if peaks.len() >= 3 {
            let intervals: Vec<f64> =
                peaks.windows(2).map(|w| (w[1] - w[0]) as f64 / NS_PER_SEC as f64).collect();
            let mean = intervals.iter().sum::<f64>() / intervals.len() as f64;
            let var = intervals.iter().map(|x| (x - mean).powi(2)).sum::<f64>()
                / intervals.len() as f64;
            var.sqrt() / mean
        } else {
            0.0
        };
        (cadence, cv)
    } else {
        (0.0, 0.0)
    };
    Ok(GaitFeatures {
        mean_speed_mps: mean_speed,
        step_count: peaks.len(),
        cadence_spm: cadence,
        cadence_cv: cv,
    })
}
