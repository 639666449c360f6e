//! Level 0: multi-stream timestamp alignment.
//!
//! Input is one time-sorted sample stream per sensor plus a fitted clock
//! mapping per device. One stream is chosen as the *primary*; every mapped
//! primary sample becomes one output record, and each other stream
//! contributes at most one sample per record, chosen by the configured
//! policy and accepted only if it is fresh enough for its modality:
//!
//! * `causal_last` — newest sample at or before the record time (never reads
//!   the future; the right choice for online replay),
//! * `nearest` — closest sample on either side, ties to the earlier one.
//!
//! The output is the "one shared timestamp" view the rest of the ladder
//! consumes: every slot in a record is the stream's best sample for that one
//! reference instant, with its staleness recorded.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::clock::ClockMapping;
use crate::scenario::Modality;
use crate::time::{Nanos, NS_PER_MS};

#[derive(Debug, Error, PartialEq, Eq)]
pub enum AlignError {
    #[error("no non-empty streams to align")]
    NoStreams,
    #[error("stream for device {device_id} is not sorted by device timestamp")]
    UnsortedStream { device_id: u16 },
    #[error("no clock mapping for device {device_id}")]
    MissingMapping { device_id: u16 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AlignPolicy {
    CausalLast,
    Nearest,
}

/// Per-modality staleness windows: how old a slot sample may be relative to
/// the record timestamp before it counts as missing.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StalenessWindows {
    pub camera_ms: f64,
    pub microphone_ms: f64,
    pub floor_ms: f64,
    pub environment_ms: f64,
    pub usage_ms: f64,
}

impl Default for StalenessWindows {
    fn default() -> Self {
        StalenessWindows {
            camera_ms: 50.0,
            microphone_ms: 50.0,
            floor_ms: 150.0,
            environment_ms: 5_000.0,
            usage_ms: 5_000.0,
        }
    }
}

impl StalenessWindows {
    pub fn window_ns(&self, modality: Modality) -> Nanos {
        let ms = match modality {
            Modality::Camera => self.camera_ms,
            Modality::Microphone => self.microphone_ms,
            Modality::FloorPressure => self.floor_ms,
            Modality::Environment => self.environment_ms,
            Modality::DeviceUsage => self.usage_ms,
        };
        (ms * NS_PER_MS as f64).round() as Nanos
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AlignConfig {
    pub primary: Modality,
    pub policy: AlignPolicy,
    pub windows: StalenessWindows,
    /// When the primary stream goes silent for more than four of its median
    /// sample intervals, keep emitting records anchored on the best
    /// remaining stream instead of going dark.
    pub emit_when_primary_missing: bool,
}

impl Default for AlignConfig {
    fn default() -> Self {
        AlignConfig {
            primary: Modality::Camera,
            policy: AlignPolicy::CausalLast,
            windows: StalenessWindows::default(),
            emit_when_primary_missing: false,
        }
    }
}

/// Where a sample physically lives in the log (segment file + byte offset),
/// plus enough identity to be self-explanatory in exported records.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SlotRef {
    pub segment: String,
    pub offset: u64,
    pub sequence: u32,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StreamSample {
    pub device_ts: Nanos,
    pub source: SlotRef,
}

/// One sensor's worth of time-sorted samples.
#[derive(Debug, Clone)]
pub struct SampleStream {
    pub device_id: u16,
    pub modality: Modality,
    pub rate_hz: f64,
    pub samples: Vec<StreamSample>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Slot {
    pub device_id: u16,
    pub modality: Modality,
    pub mapped_ts: Nanos,
    /// `ref_ts - mapped_ts`; negative means the sample is from just after
    /// the record instant (possible only under the `nearest` policy).
    pub staleness_ns: Nanos,
    pub source: SlotRef,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AlignedRecord {
    pub ref_ts: Nanos,
    /// The stream that anchored this record (its slot has staleness 0).
    pub anchor_device: u16,
    /// Keyed by device id; devices are unique across modalities.
    pub slots: BTreeMap<u16, Slot>,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct AlignWarnings {
    /// Primary samples whose mapped timestamps collided; the later sample
    /// won and the earlier ones were dropped.
    pub duplicate_ticks_collapsed: u64,
}

#[derive(Debug, Clone)]
pub struct AlignOutput {
    pub records: Vec<AlignedRecord>,
    pub primary: (Modality, u16),
    pub warnings: AlignWarnings,
}

/// Chooses the stream whose samples become record timestamps: the
/// highest-rate stream of the configured primary modality when present,
/// otherwise the highest-rate stream overall. Ties break toward the lower
/// device id, so the choice is deterministic.
pub fn select_primary<'a>(
    config: &AlignConfig,
    streams: &[&'a SampleStream],
) -> Option<&'a SampleStream> {
    let pick = |candidates: &mut dyn Iterator<Item = &&'a SampleStream>| {
        candidates
            .max_by(|a, b| {
                a.rate_hz
                    .partial_cmp(&b.rate_hz)
                    .unwrap()
                    .then(b.device_id.cmp(&a.device_id))
            })
            .copied()
    };
    let mut of_primary = streams.iter().filter(|s| s.modality == config.primary);
    pick(&mut of_primary).or_else(|| pick(&mut streams.iter()))
}

struct Cursor<'a> {
    stream: &'a SampleStream,
    mapped: Vec<Nanos>,
    window_ns: Nanos,
    idx: usize, // index of first sample with mapped_ts > current tick
}

impl<'a> Cursor<'a> {
    /// Best slot for tick `t` under `policy`, or None if out of window.
    fn slot_at(&mut self, t: Nanos, policy: AlignPolicy) -> Option<Slot> {
        while self.idx < self.mapped.len() && self.mapped[self.idx] <= t {
            self.idx += 1;
        }
        let before = self.idx.checked_sub(1).map(|i| (i, t - self.mapped[i]));
        let chosen = match policy {
            AlignPolicy::CausalLast => before,
            AlignPolicy::Nearest => {
                let after = (self.idx < self.mapped.len())
                    .then(|| (self.idx, t - self.mapped[self.idx]));
                match (before, after) {
                    (Some(b), Some(a)) => {
                        // Ties go to the earlier sample.
                        if a.1.abs() < b.1.abs() {
                            Some(a)
                        } else {
                            Some(b)
                        }
                    }
                    (b, a) => b.or(a),
                }
            }
        };
        chosen.and_then(|(i, staleness)| {
            (staleness.abs() <= self.window_ns).then(|| Slot {
                device_id: self.stream.device_id,
                modality: self.stream.modality,
                mapped_ts: self.mapped[i],
                staleness_ns: staleness,
                source: self.stream.samples[i].source.clone(),
            })
        })
    }
}

/// Aligns every stream onto the primary stream's sample instants.
///
/// Runs in one pass over each stream. Every input stream must be sorted by
/// device timestamp and have a clock mapping; mapped record timestamps are
/// strictly increasing in the output (colliding primary instants collapse to
/// the later sample, counted in the warnings).
pub fn align(
    streams: &[SampleStream],
    mappings: &BTreeMap<u16, ClockMapping>,
    config: &AlignConfig,
) -> Result<AlignOutput, AlignError> {
    for s in streams {
        if s.samples.windows(2).any(|w| w[1].device_ts < w[0].device_ts) {
            return Err(AlignError::UnsortedStream { device_id: s.device_id });
        }
    }
    let non_empty: Vec<&SampleStream> = streams.iter().filter(|s| !s.samples.is_empty()).collect();
    let primary_stream = select_primary(config, &non_empty).ok_or(AlignError::NoStreams)?;

    let mut cursors: Vec<Cursor> = Vec::with_capacity(non_empty.len());
    for s in &non_empty {
        let mapping = mappings
            .get(&s.device_id)
            .ok_or(AlignError::MissingMapping { device_id: s.device_id })?;
        cursors.push(Cursor {
            stream: s,
            mapped: s.samples.iter().map(|x| mapping.to_reference(x.device_ts)).collect(),
            window_ns: config.windows.window_ns(s.modality),
            idx: 0,
        });
    }

    // Record instants: the primary stream's mapped samples, optionally
    // backfilled from the best fallback stream across long primary gaps.
    let primary_pos = cursors.iter().position(|c| c.stream.device_id == primary_stream.device_id).unwrap();
    let mut ticks: Vec<(Nanos, u16)> = cursors[primary_pos]
        .mapped
        .iter()
        .map(|&t| (t, primary_stream.device_id))
        .collect();
    let mut warnings = AlignWarnings::default();
    if config.emit_when_primary_missing {
        backfill_gaps(&cursors, primary_pos, &mut ticks);
    }
    ticks.sort();
    // Collapse duplicate instants, keeping the later (already-sorted last)
    // sample so records stay strictly increasing.
    let mut deduped: Vec<(Nanos, u16)> = Vec::with_capacity(ticks.len());
    for tick in ticks {
        match deduped.last() {
            Some(&(t, _)) if t == tick.0 => {
                warnings.duplicate_ticks_collapsed += 1;
                *deduped.last_mut().unwrap() = tick;
            }
            _ => deduped.push(tick),
        }
    }

    let mut records = Vec::with_capacity(deduped.len());
    for (ref_ts, anchor_device) in deduped {
        let mut slots = BTreeMap::new();
        for cursor in cursors.iter_mut() {
            if let Some(mut slot) = cursor.slot_at(ref_ts, config.policy) {
                if cursor.stream.device_id == anchor_device {
                    // The anchor stream contributed this very instant.
                    slot.staleness_ns = 0;
                    slot.mapped_ts = ref_ts;
                }
                slots.insert(slot.device_id, slot);
            }
        }
        records.push(AlignedRecord { ref_ts, anchor_device, slots });
    }
    Ok(AlignOutput {
        records,
        primary: (primary_stream.modality, primary_stream.device_id),
        warnings,
    })
}

/// Adds ticks from the best non-primary stream wherever the primary stream
/// is silent for more than four median intervals.
fn backfill_gaps(cursors: &[Cursor], primary_pos: usize, ticks: &mut Vec<(Nanos, u16)>) {
    let primary = &cursors[primary_pos];
    if primary.mapped.len() < 2 {
        return;
    }
    let mut intervals: Vec<Nanos> =
        primary.mapped.windows(2).map(|w| w[1] - w[0]).collect();
    intervals.sort();
    let median = intervals[intervals.len() / 2].max(1);
    let threshold = median * 4;
    let fallback = cursors
        .iter()
        .enumerate()
        .filter(|(i, _)| *i != primary_pos)
        .max_by(|(_, a), (_, b)| {
            a.stream
                .rate_hz
                .partial_cmp(&b.stream.rate_hz)
                .unwrap()
                .then(b.stream.device_id.cmp(&a.stream.device_id))
        });
    let Some((_, fb)) = fallback else { return };
    for gap in primary.mapped.windows(2) {
        if gap[1] - gap[0] > threshold {
            for &t in &fb.mapped {
                if t > gap[0] && t < gap[1] {
                    ticks.push((t, fb.stream.device_id));
                }
            }
        }
    }
}

pub const STALENESS_BUCKETS_MS: [f64; 7] = [1.0, 5.0, 10.0, 50.0, 150.0, 1_000.0, 5_000.0];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StreamCoverage {
    pub device_id: u16,
    pub modality: Modality,
    pub fill_rate: f64,
    /// Counts of |staleness| per bucket; edges are [`STALENESS_BUCKETS_MS`],
    /// with a final overflow bucket.
    pub staleness_histogram: [u64; STALENESS_BUCKETS_MS.len() + 1],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoverageReport {
    pub records: usize,
    pub input_samples: usize,
    /// Aligned records per input sample: the level-0 data reduction.
    pub size_ratio: f64,
    pub streams: Vec<StreamCoverage>,
}

pub fn coverage_report(records: &[AlignedRecord], streams: &[SampleStream]) -> CoverageReport {
    let input_samples: usize = streams.iter().map(|s| s.samples.len()).sum();
    let mut per_stream = Vec::with_capacity(streams.len());
    for s in streams {
        let mut histogram = [0u64; STALENESS_BUCKETS_MS.len() + 1];
        let mut present = 0usize;
        for r in records {
            if let Some(slot) = r.slots.get(&s.device_id) {
                present += 1;
                let ms = slot.staleness_ns.abs() as f64 / NS_PER_MS as f64;
                let bucket = STALENESS_BUCKETS_MS
                    .iter()
                    .position(|&edge| ms < edge)
                    .unwrap_or(STALENESS_BUCKETS_MS.len());
                histogram[bucket] += 1;
            }
        }
        per_stream.push(StreamCoverage {
            device_id: s.device_id,
            modality: s.modality,
            fill_rate: if records.is_empty() { 0.0 } else { present as f64 / records.len() as f64 },
            staleness_histogram: histogram,
        });
    }
    CoverageReport {
        records: records.len(),
        input_samples,
        size_ratio: if input_samples == 0 {
            0.0
        } else {
            records.len() as f64 / input_samples as f64
        },
        streams: per_stream,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn slot_ref(seq: u32) -> SlotRef {
        SlotRef { segment: "s".into(), offset: seq as u64 * 64, sequence: seq }
    }

    fn stream(device_id: u16, modality: Modality, rate_hz: f64, ts: &[Nanos]) -> SampleStream {
        SampleStream {
            device_id,
            modality,
            rate_hz,
            samples: ts
                .iter()
                .enumerate()
                .map(|(i, &t)| StreamSample { device_ts: t, source: slot_ref(i as u32) })
                .collect(),
        }
    }

    fn identity_mappings(ids: &[u16]) -> BTreeMap<u16, ClockMapping> {
        ids.iter().map(|&id| (id, ClockMapping::identity())).collect()
    }

    fn tight_config(policy: AlignPolicy) -> AlignConfig {
        AlignConfig {
            policy,
            windows: StalenessWindows {
                camera_ms: 5.0,
                microphone_ms: 5.0,
                floor_ms: 5.0,
                environment_ms: 5.0,
                usage_ms: 5.0,
            },
            ..AlignConfig::default()
        }
    }

    /// Primary at 0/10/20 ms, secondary at 3/12 ms, 5 ms window: causal_last
    /// finds nothing fresh enough, nearest matches the first two ticks.
    #[test]
    fn policy_semantics_on_offset_streams() {
        let ms = NS_PER_MS;
        let cam = stream(1, Modality::Camera, 100.0, &[0, 10 * ms, 20 * ms]);
        let mic = stream(2, Modality::Microphone, 80.0, &[3 * ms, 12 * ms]);
        let mappings = identity_mappings(&[1, 2]);

        let causal = align(
            &[cam.clone(), mic.clone()],
            &mappings,
            &tight_config(AlignPolicy::CausalLast),
        )
        .unwrap();
        assert_eq!(causal.records.len(), 3);
        for r in &causal.records {
            assert!(!r.slots.contains_key(&2), "tick {} matched under causal_last", r.ref_ts);
        }

        let nearest =
            align(&[cam, mic], &mappings, &tight_config(AlignPolicy::Nearest)).unwrap();
        let got: Vec<Option<Nanos>> = nearest
            .records
            .iter()
            .map(|r| r.slots.get(&2).map(|s| s.mapped_ts))
            .collect();
        assert_eq!(got, vec![Some(3 * ms), Some(12 * ms), None]);
        assert_eq!(nearest.records[0].slots[&2].staleness_ns, -3 * ms);
        assert_eq!(nearest.records[1].slots[&2].staleness_ns, -2 * ms);
    }

    #[test]
    fn anchor_slot_is_always_present_with_zero_staleness() {
        let cam = stream(1, Modality::Camera, 15.0, &[0, 66_666_667, 133_333_333]);
        let env = stream(9, Modality::Environment, 1.0, &[50_000_000]);
        let out = align(
            &[cam, env],
            &identity_mappings(&[1, 9]),
            &AlignConfig::default(),
        )
        .unwrap();
        assert_eq!(out.primary, (Modality::Camera, 1));
        for r in &out.records {
            let anchor = &r.slots[&r.anchor_device];
            assert_eq!(anchor.staleness_ns, 0);
            assert_eq!(anchor.mapped_ts, r.ref_ts);
        }
        let ts: Vec<Nanos> = out.records.iter().map(|r| r.ref_ts).collect();
        assert!(ts.windows(2).all(|w| w[1] > w[0]));
    }

    #[test]
    fn mapped_timestamps_drive_matching() {
        // Device 2 runs 500 us ahead; after mapping, its samples land
        // exactly on the camera ticks.
        let cam = stream(1, Modality::Camera, 100.0, &[0, 10_000_000]);
        let mic = stream(2, Modality::Microphone, 100.0, &[500_000, 10_500_000]);
        let mut mappings = identity_mappings(&[1]);
        mappings.insert(
            2,
            ClockMapping { offset_ns: 500_000, drift_ppm: 0.0, fitted_at: 0, validity_window_ns: 0 },
        );
        let out = align(&[cam, mic], &mappings, &tight_config(AlignPolicy::CausalLast)).unwrap();
        assert_eq!(out.records[0].slots[&2].staleness_ns, 0);
        assert_eq!(out.records[1].slots[&2].staleness_ns, 0);
    }

    #[test]
    fn duplicate_primary_instants_collapse_to_later_sample() {
        let cam = stream(1, Modality::Camera, 100.0, &[5, 5, 10]);
        let out =
            align(&[cam], &identity_mappings(&[1]), &AlignConfig::default()).unwrap();
        assert_eq!(out.records.len(), 2);
        assert_eq!(out.warnings.duplicate_ticks_collapsed, 1);
        // Later sample means the higher sequence number.
        assert_eq!(out.records[0].slots[&1].source.sequence, 1);
    }

    #[test]
    fn error_cases() {
        let empty: Vec<SampleStream> = vec![];
        assert_eq!(
            align(&empty, &BTreeMap::new(), &AlignConfig::default()).unwrap_err(),
            AlignError::NoStreams
        );

        let unsorted = stream(3, Modality::Camera, 10.0, &[10, 5]);
        assert_eq!(
            align(&[unsorted], &identity_mappings(&[3]), &AlignConfig::default()).unwrap_err(),
            AlignError::UnsortedStream { device_id: 3 }
        );

        let cam = stream(1, Modality::Camera, 10.0, &[0]);
        assert_eq!(
            align(&[cam], &BTreeMap::new(), &AlignConfig::default()).unwrap_err(),
            AlignError::MissingMapping { device_id: 1 }
        );
    }

    #[test]
    fn primary_fallback_prefers_rate_then_device_id() {
        let slow_cam = stream(7, Modality::Camera, 10.0, &[0]);
        let fast_cam = stream(3, Modality::Camera, 30.0, &[0]);
        let floor = stream(2, Modality::FloorPressure, 50.0, &[0]);
        let config = AlignConfig::default();
        let picked = select_primary(&config, &[&slow_cam, &fast_cam, &floor]).unwrap();
        assert_eq!(picked.device_id, 3, "highest-rate camera wins while cameras exist");
        let picked = select_primary(&config, &[&floor]).unwrap();
        assert_eq!(picked.device_id, 2, "falls back to best remaining modality");
        let tied_a = stream(5, Modality::Camera, 30.0, &[0]);
        let picked = select_primary(&config, &[&tied_a, &fast_cam]).unwrap();
        assert_eq!(picked.device_id, 3, "rate tie breaks to lower device id");
    }

    #[test]
    fn gap_backfill_keeps_records_flowing() {
        let ms = NS_PER_MS;
        // Camera dies between 30 ms and 200 ms; floor keeps sampling.
        let cam_ts: Vec<Nanos> = vec![0, 10 * ms, 20 * ms, 30 * ms, 200 * ms, 210 * ms];
        let floor_ts: Vec<Nanos> = (0..22).map(|i| i * 10 * ms + 5 * ms).collect();
        let cam = stream(1, Modality::Camera, 100.0, &cam_ts);
        let floor = stream(2, Modality::FloorPressure, 100.0, &floor_ts);
        let mappings = identity_mappings(&[1, 2]);

        let dark = align(&[cam.clone(), floor.clone()], &mappings, &AlignConfig::default()).unwrap();
        assert_eq!(dark.records.len(), cam_ts.len());

        let mut config = AlignConfig::default();
        config.emit_when_primary_missing = true;
        let bridged = align(&[cam, floor], &mappings, &config).unwrap();
        assert!(bridged.records.len() > cam_ts.len());
        let inside_gap: Vec<&AlignedRecord> = bridged
            .records
            .iter()
            .filter(|r| r.ref_ts > 30 * ms && r.ref_ts < 200 * ms)
            .collect();
        assert!(!inside_gap.is_empty());
        for r in inside_gap {
            assert_eq!(r.anchor_device, 2);
            assert_eq!(r.slots[&2].staleness_ns, 0);
        }
    }

    #[test]
    fn coverage_report_counts_fill_and_staleness() {
        let ms = NS_PER_MS;
        let cam = stream(1, Modality::Camera, 100.0, &[0, 10 * ms, 20 * ms]);
        let mic = stream(2, Modality::Microphone, 80.0, &[0, 18 * ms]);
        let streams = vec![cam, mic];
        let out = align(&streams, &identity_mappings(&[1, 2]), &AlignConfig::default()).unwrap();
        let cov = coverage_report(&out.records, &streams);
        assert_eq!(cov.records, 3);
        assert_eq!(cov.input_samples, 5);
        assert!((cov.size_ratio - 0.6).abs() < 1e-12);
        let mic_cov = &cov.streams[1];
        assert!((mic_cov.fill_rate - 1.0).abs() < 1e-12);
        // staleness 0, 10ms, 2ms -> buckets [0,1), [10,50), [1,5)
        assert_eq!(mic_cov.staleness_histogram[0], 1);
        assert_eq!(mic_cov.staleness_histogram[3], 1);
        assert_eq!(mic_cov.staleness_histogram[1], 1);
    }

    /// The single-pass cursor must agree exactly with a full scan of every
    /// stream at every tick, under both policies.
    #[test]
    fn matches_brute_force_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(40_104);
        for trial in 0..30 {
            let policy =
                if trial % 2 == 0 { AlignPolicy::CausalLast } else { AlignPolicy::Nearest };
            let config = tight_config(policy);
            let n_streams = rng.gen_range(2..5);
            let mut streams = Vec::new();
            for d in 0..n_streams {
                let modality = Modality::ALL[d as usize % 5];
                let mut t = 0i64;
                let samples: Vec<Nanos> = (0..rng.gen_range(5..120))
                    .map(|_| {
                        t += rng.gen_range(0..8_000_000);
                        t
                    })
                    .collect();
                streams.push(stream(d + 1, modality, rng.gen_range(1.0..100.0), &samples));
            }
            let mappings = identity_mappings(
                &streams.iter().map(|s| s.device_id).collect::<Vec<_>>(),
            );
            let out = align(&streams, &mappings, &config).unwrap();
            let oracle = brute_force(&streams, &config);
            assert_eq!(out.records, oracle, "policy {policy:?} trial {trial}");
        }
    }

    /// O(ticks x samples) reference implementation used only for testing.
    fn brute_force(streams: &[SampleStream], config: &AlignConfig) -> Vec<AlignedRecord> {
        let non_empty: Vec<&SampleStream> =
            streams.iter().filter(|s| !s.samples.is_empty()).collect();
        let primary = select_primary(config, &non_empty).unwrap();
        let mut ticks: Vec<Nanos> = primary.samples.iter().map(|s| s.device_ts).collect();
        ticks.dedup();
        let mut records = Vec::new();
        for t in ticks {
            let mut slots = BTreeMap::new();
            for s in &non_empty {
                let window = config.windows.window_ns(s.modality);
                let best = s
                    .samples
                    .iter()
                    .filter(|x| match config.policy {
                        AlignPolicy::CausalLast => x.device_ts <= t,
                        AlignPolicy::Nearest => true,
                    })
                    .min_by_key(|x| ((t - x.device_ts).abs(), x.device_ts));
                if let Some(b) = best {
                    // Among equal |delta| prefer earlier: min_by_key keeps the
                    // first minimum, and samples are time-sorted.
                    let staleness = t - b.device_ts;
                    if staleness.abs() <= window {
                        // Duplicated primary instants: latest sample wins.
                        let chosen = if s.device_id == primary.device_id {
                            s.samples.iter().rfind(|x| x.device_ts == b.device_ts).unwrap()
                        } else {
                            b
                        };
                        slots.insert(
                            s.device_id,
                            Slot {
                                device_id: s.device_id,
                                modality: s.modality,
                                mapped_ts: chosen.device_ts,
                                staleness_ns: staleness,
                                source: chosen.source.clone(),
                            },
                        );
                    }
                }
            }
            records.push(AlignedRecord { ref_ts: t, anchor_device: primary.device_id, slots });
        }
        records
    }
}
