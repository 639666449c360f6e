//! Device clocks and clock-sync estimation.
//!
//! Every simulated sensor owns a [`ClockModel`]: an affine skew (fixed offset
//! plus parts-per-million drift) and optional seeded read jitter on top of
//! the true reference timeline. The collector periodically runs four-
//! timestamp sync exchanges against each device; [`fit_mapping`] turns the
//! collected [`SyncRound`]s into a [`ClockMapping`] that inverts the skew, so
//! downstream fusion can place every device timestamp back on the shared
//! reference timeline.
//!
//! The exchange is the classic request/response shape:
//!
//! ```text
//! requester (reference)   t0 ----\            /---> t3
//!                                 \          /
//! device    (device clock)         t1 ---- t2
//! ```
//!
//! * `offset = ((t1 - t0) + (t2 - t3)) / 2`
//! * `delay  = (t3 - t0) - (t2 - t1)`
//!
//! The offset estimate is exact when the two path delays are equal and
//! absorbs half of any asymmetry (see `asymmetric_delay_bias` below). Within
//! an epoch the minimum-delay round is the least-distorted one, so
//! [`fit_mapping`] keeps only that round per epoch and fits offset-vs-time by
//! least squares, which recovers both offset and drift.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::time::Nanos;

/// Splits two 64-bit values into one well-mixed stream seed. Used wherever
/// the simulation needs an independent deterministic RNG per (seed, index).
pub(crate) fn mix64(seed: u64, index: u64) -> u64 {
    fn splitmix64(mut z: u64) -> u64 {
        z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^ (z >> 31)
    }
    splitmix64(seed ^ splitmix64(index))
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum SyncError {
    /// Round-trip arithmetic produced a negative path delay; the round's
    /// timestamps are causally impossible and must not be used.
    #[error("sync round has negative delay (causally impossible timestamps)")]
    NegativeDelay,
    /// Fitting needs at least two epochs with distinct reference times.
    #[error("clock fit needs >=2 usable sync epochs, got {usable}")]
    InsufficientData { usable: usize },
}

/// A simulated device clock: `device = true*(1 + drift_ppm*1e-6) + offset_ns
/// + jitter`, with jitter drawn per read index from a seeded Gaussian.
/// Unspecified fields deserialize as the ideal clock's values.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ClockModel {
    pub offset_ns: i64,
    pub drift_ppm: f64,
    pub jitter_sigma_ns: f64,
    pub seed: u64,
}

impl Default for ClockModel {
    fn default() -> Self {
        ClockModel::ideal()
    }
}

impl ClockModel {
    pub fn ideal() -> Self {
        ClockModel { offset_ns: 0, drift_ppm: 0.0, jitter_sigma_ns: 0.0, seed: 0 }
    }

    pub fn validate(&self) -> Result<(), String> {
        if !self.drift_ppm.is_finite() || self.drift_ppm.abs() > 1000.0 {
            return Err(format!("clock drift_ppm {} outside +/-1000", self.drift_ppm));
        }
        if !self.jitter_sigma_ns.is_finite() || self.jitter_sigma_ns < 0.0 {
            return Err(format!("clock jitter_sigma_ns {} invalid", self.jitter_sigma_ns));
        }
        Ok(())
    }

    /// What this device's clock reads at reference time `true_time`. The
    /// `read_index` selects the jitter draw: identical (model, time, index)
    /// always yields the identical timestamp.
    pub fn device_time(&self, true_time: Nanos, read_index: u64) -> Nanos {
        // The drift term is the only non-integer part; rounding it keeps the
        // inverse mapping within 1 ns of the identity (see round_trip test).
        let drift_term = (true_time as f64 * self.drift_ppm * 1e-6).round() as i64;
        let jitter = if self.jitter_sigma_ns > 0.0 {
            let mut rng = ChaCha8Rng::seed_from_u64(mix64(self.seed, read_index));
            let normal = Normal::new(0.0, self.jitter_sigma_ns).expect("sigma validated");
            normal.sample(&mut rng).round() as i64
        } else {
            0
        };
        true_time + drift_term + self.offset_ns + jitter
    }
}

/// One four-timestamp exchange. `t0`/`t3` are requester (reference) clock
/// reads, `t1`/`t2` are device clock reads.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SyncRound {
    pub t0: Nanos,
    pub t1: Nanos,
    pub t2: Nanos,
    pub t3: Nanos,
}

impl SyncRound {
    /// (offset estimate, round-trip path delay), both in ns.
    pub fn estimate_offset_delay(&self) -> Result<(Nanos, Nanos), SyncError> {
        if self.t2 < self.t1 || self.t3 < self.t0 {
            return Err(SyncError::NegativeDelay);
        }
        let offset = (((self.t1 - self.t0) as i128 + (self.t2 - self.t3) as i128) / 2) as i64;
        let delay = (self.t3 - self.t0) - (self.t2 - self.t1);
        if delay < 0 {
            return Err(SyncError::NegativeDelay);
        }
        Ok((offset, delay))
    }

    /// Reference-side midpoint of the exchange; the natural time to attach
    /// the offset estimate to when fitting offset-vs-time.
    pub fn reference_midpoint(&self) -> Nanos {
        ((self.t0 as i128 + self.t3 as i128) / 2) as i64
    }
}

/// Fitted inverse of a device clock, valid around the span it was fitted on.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClockMapping {
    pub offset_ns: i64,
    pub drift_ppm: f64,
    /// Reference time of the newest epoch that went into the fit.
    pub fitted_at: Nanos,
    /// Span between oldest and newest fitted epoch.
    pub validity_window_ns: i64,
}

impl ClockMapping {
    pub fn identity() -> Self {
        ClockMapping { offset_ns: 0, drift_ppm: 0.0, fitted_at: 0, validity_window_ns: 0 }
    }

    /// Maps a device timestamp back onto the reference timeline:
    /// `(device_ts - offset) / (1 + drift_ppm*1e-6)`, rounded to ns.
    ///
    /// Strictly order-preserving for device timestamps more than a few ns
    /// apart whenever |drift_ppm| < 10^6; at real sample spacings (>= 1 us)
    /// ordering is always preserved.
    pub fn to_reference(&self, device_ts: Nanos) -> Nanos {
        let x = device_ts - self.offset_ns;
        let d = self.drift_ppm * 1e-6;
        // x/(1+d) = x - x*d/(1+d); keeping the big term in integers avoids
        // f64 truncation for timestamps past 2^53 ns.
        let correction = x as f64 * (d / (1.0 + d));
        x - correction.round() as i64
    }
}

/// Rounds grouped by sync epoch; each round is paired with the reference
/// time its estimate is attached to (use [`SyncRound::reference_midpoint`]).
pub type SyncEpoch = Vec<(SyncRound, Nanos)>;

/// Fits offset and drift by least squares over per-epoch offset estimates,
/// keeping only the minimum-delay round of each epoch (first wins on ties).
/// Epochs whose rounds are all causally invalid are skipped; at least two
/// usable epochs with distinct reference times are required.
pub fn fit_mapping(epochs: &[SyncEpoch]) -> Result<ClockMapping, SyncError> {
    let mut points: Vec<(f64, f64)> = Vec::with_capacity(epochs.len());
    let mut newest: Nanos = i64::MIN;
    let mut oldest: Nanos = i64::MAX;
    for rounds in epochs {
        let mut best: Option<(Nanos, Nanos, Nanos)> = None; // (delay, offset, at)
        for (round, at) in rounds {
            if let Ok((offset, delay)) = round.estimate_offset_delay() {
                if best.map_or(true, |(d, _, _)| delay < d) {
                    best = Some((delay, offset, *at));
                }
            }
        }
        if let Some((_, offset, at)) = best {
            points.push((at as f64, offset as f64));
            newest = newest.max(at);
            oldest = oldest.min(at);
        }
    }
    if points.len() < 2 {
        return Err(SyncError::InsufficientData { usable: points.len() });
    }
    let n = points.len() as f64;
    let mean_t = points.iter().map(|p| p.0).sum::<f64>() / n;
    let mean_o = points.iter().map(|p| p.1).sum::<f64>() / n;
    let mut sxx = 0.0;
    let mut sxy = 0.0;
    for (t, o) in &points {
        sxx += (t - mean_t) * (t - mean_t);
        sxy += (t - mean_t) * (o - mean_o);
    }
    if sxx == 0.0 {
        return Err(SyncError::InsufficientData { usable: 1 });
    }
    let slope = sxy / sxx;
    let intercept = mean_o - slope * mean_t;
    Ok(ClockMapping {
        offset_ns: intercept.round() as i64,
        drift_ppm: slope * 1e6,
        fitted_at: newest,
        validity_window_ns: newest - oldest,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::time::NS_PER_MS;
    use proptest::prelude::*;
    use rand::RngCore;

    #[test]
    fn offset_and_delay_from_four_timestamps() {
        let round =
            SyncRound { t0: 0, t1: 45_000_000, t2: 46_000_000, t3: 11_000_000 };
        let (offset, delay) = round.estimate_offset_delay().unwrap();
        assert_eq!(offset, 40_000_000);
        assert_eq!(delay, 10_000_000);
    }

    #[test]
    fn asymmetric_delay_bias() {
        // 2 ms out, 8 ms back, zero processing, true offset zero: the
        // estimator absorbs half the asymmetry as bias.
        let round = SyncRound {
            t0: 0,
            t1: 2 * NS_PER_MS,
            t2: 2 * NS_PER_MS,
            t3: 10 * NS_PER_MS,
        };
        let (offset, delay) = round.estimate_offset_delay().unwrap();
        assert_eq!(offset, -3 * NS_PER_MS);
        assert_eq!(delay, 10 * NS_PER_MS);
    }

    #[test]
    fn negative_delay_rejected() {
        let round = SyncRound { t0: 0, t1: 50, t2: 90, t3: 20 };
        assert_eq!(round.estimate_offset_delay(), Err(SyncError::NegativeDelay));
        let backwards_processing = SyncRound { t0: 0, t1: 90, t2: 50, t3: 200 };
        assert_eq!(
            backwards_processing.estimate_offset_delay(),
            Err(SyncError::NegativeDelay)
        );
    }

    #[test]
    fn drift_term_at_one_second_scale() {
        let model =
            ClockModel { offset_ns: 0, drift_ppm: 100.0, jitter_sigma_ns: 0.0, seed: 0 };
        assert_eq!(model.device_time(1_000_000_000_000, 0), 1_000_000_000_000 + 100_000_000);
    }

    #[test]
    fn device_time_is_deterministic() {
        let model = ClockModel {
            offset_ns: 5_000,
            drift_ppm: -31.7,
            jitter_sigma_ns: 250_000.0,
            seed: 42,
        };
        for idx in [0u64, 1, 17, 9_999] {
            assert_eq!(model.device_time(123_456_789, idx), model.device_time(123_456_789, idx));
        }
        // Different read indices should draw different jitter essentially always.
        assert_ne!(model.device_time(123_456_789, 0), model.device_time(123_456_789, 1));
    }

    #[test]
    fn round_trip_within_one_ns_for_a_million_inputs() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..1_000_000 {
            let offset = (rng.next_u64() % 1_000_000_001) as i64 - 500_000_000;
            let drift = ((rng.next_u64() % 2_000_001) as f64 / 1000.0) - 1000.0;
            let t = (rng.next_u64() % 2_000_000_000_000_001) as i64 - 1_000_000_000_000_000;
            let model =
                ClockModel { offset_ns: offset, drift_ppm: drift, jitter_sigma_ns: 0.0, seed: 0 };
            let mapping = ClockMapping {
                offset_ns: offset,
                drift_ppm: drift,
                fitted_at: 0,
                validity_window_ns: 0,
            };
            let back = mapping.to_reference(model.device_time(t, 0));
            assert!(
                (back - t).abs() <= 1,
                "round trip off by {} ns (offset={offset} drift={drift} t={t})",
                back - t
            );
        }
    }

    /// Synthesizes noiseless sync epochs against a known clock and checks the
    /// fit recovers it: offset within 1 ns, drift within 0.01 ppm.
    #[test]
    fn fit_recovers_noiseless_clock() {
        let model =
            ClockModel { offset_ns: 10 * NS_PER_MS, drift_ppm: 50.0, jitter_sigma_ns: 0.0, seed: 0 };
        let one_way = 2_500_000i64; // symmetric 2.5 ms
        let processing = 1_000_000i64;
        let mut epochs: Vec<SyncEpoch> = Vec::new();
        for epoch in 0..12i64 {
            let mut rounds = SyncEpoch::new();
            for j in 0..4i64 {
                let t0 = epoch * 10_000_000_000 + j * 20_000_000;
                let arrive = t0 + one_way;
                let depart = arrive + processing;
                let round = SyncRound {
                    t0,
                    t1: model.device_time(arrive, 0),
                    t2: model.device_time(depart, 0),
                    t3: depart + one_way,
                };
                rounds.push((round, round.reference_midpoint()));
            }
            epochs.push(rounds);
        }
        let mapping = fit_mapping(&epochs).unwrap();
        assert!(
            (mapping.offset_ns - model.offset_ns).abs() <= 1,
            "offset recovered as {} ns",
            mapping.offset_ns
        );
        assert!(
            (mapping.drift_ppm - model.drift_ppm).abs() <= 0.01,
            "drift recovered as {} ppm",
            mapping.drift_ppm
        );
        // fitted_at is the chosen round of the newest epoch — which round
        // wins depends on delay ties, so only pin it to that epoch's span.
        let last = epochs.last().unwrap();
        assert!(mapping.fitted_at >= last.first().unwrap().1);
        assert!(mapping.fitted_at <= last.last().unwrap().1);
        assert!(mapping.validity_window_ns > 100_000_000_000);

        // And the mapping actually inverts the device clock across the span.
        for t in (0i64..=110_000_000_000).step_by(7_300_000_000) {
            let err = (mapping.to_reference(model.device_time(t, 0)) - t).abs();
            assert!(err <= 2, "mapping error {err} ns at t={t}");
        }
    }

    #[test]
    fn fit_selects_min_delay_round_per_epoch() {
        // Epoch 1 contains one clean round and one with a large asymmetric
        // spike; the spike inflates delay, so the clean round must win.
        let clean = SyncRound { t0: 0, t1: 5_000_000, t2: 5_000_000, t3: 4_000_000 };
        let spiked = SyncRound { t0: 0, t1: 35_000_000, t2: 35_000_000, t3: 64_000_000 };
        let later = SyncRound {
            t0: 10_000_000_000,
            t1: 10_005_000_000,
            t2: 10_005_000_000,
            t3: 10_004_000_000,
        };
        let epochs = vec![
            vec![(clean, clean.reference_midpoint()), (spiked, spiked.reference_midpoint())],
            vec![(later, later.reference_midpoint())],
        ];
        let mapping = fit_mapping(&epochs).unwrap();
        // Both kept rounds estimate the same 3 ms offset; a spike-kept fit
        // would be pulled far off.
        assert!((mapping.offset_ns - 3_000_000).abs() <= 1, "offset {}", mapping.offset_ns);
    }

    #[test]
    fn fit_requires_two_usable_epochs() {
        let round = SyncRound { t0: 0, t1: 10, t2: 10, t3: 20 };
        let one = vec![vec![(round, 10)]];
        assert_eq!(fit_mapping(&one), Err(SyncError::InsufficientData { usable: 1 }));
        let bad = SyncRound { t0: 100, t1: 0, t2: 0, t3: 0 };
        let with_dead_epoch = vec![vec![(round, 10)], vec![(bad, 50)]];
        assert_eq!(
            fit_mapping(&with_dead_epoch),
            Err(SyncError::InsufficientData { usable: 1 })
        );
        assert_eq!(fit_mapping(&[]), Err(SyncError::InsufficientData { usable: 0 }));
    }

    proptest! {
        /// Ordering of device timestamps at realistic sample spacings is
        /// preserved by the inverse mapping.
        #[test]
        fn to_reference_preserves_order(
            offset in -500_000_000i64..500_000_000,
            drift in -1000.0f64..1000.0,
            base in -1_000_000_000_000i64..1_000_000_000_000,
            gaps in proptest::collection::vec(1_000i64..1_000_000_000, 1..50),
        ) {
            let mapping = ClockMapping {
                offset_ns: offset,
                drift_ppm: drift,
                fitted_at: 0,
                validity_window_ns: 0,
            };
            let mut device_ts = base;
            let mut prev_ref = mapping.to_reference(device_ts);
            for gap in gaps {
                device_ts += gap * 1_000; // spacings of 1 us .. 1 ms steps
                let r = mapping.to_reference(device_ts);
                prop_assert!(r > prev_ref, "order lost: {} -> {}", prev_ref, r);
                prev_ref = r;
            }
        }

        /// Symmetric-delay rounds estimate the true offset exactly
        /// (zero drift, zero jitter).
        #[test]
        fn symmetric_rounds_are_exact(
            offset in -400_000_000i64..400_000_000,
            delay in 0i64..50_000_000,
            processing in 0i64..5_000_000,
            t0 in 0i64..1_000_000_000_000,
        ) {
            let model = ClockModel { offset_ns: offset, drift_ppm: 0.0, jitter_sigma_ns: 0.0, seed: 0 };
            let round = SyncRound {
                t0,
                t1: model.device_time(t0 + delay, 0),
                t2: model.device_time(t0 + delay + processing, 0),
                t3: t0 + delay + processing + delay,
            };
            let (est, d) = round.estimate_offset_delay().unwrap();
            prop_assert_eq!(est, offset);
            prop_assert_eq!(d, 2 * delay);
        }
    }
}
