//! Scores a fused run against the scripted ground truth it was simulated
//! from: label accuracy, drop precision/recall, coverage, decision diffs,
//! and the bookkeeping counters, all in one serializable report.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::align::{AlignedRecord, CoverageReport};
use crate::scenario::Modality;
use crate::pipeline::{Level1Record, Level2Record};
use crate::rules::DecisionRecord;
use crate::scenario::TruthSample;
use crate::session::Counters;
use crate::time::Nanos;

pub const REPORT_VERSION: &str = "she/1";

#[derive(Debug, Error)]
pub enum ReportError {
    #[error("truth line {line}: {detail}")]
    Truth { line: usize, detail: String },
    #[error("report: {0}")]
    Parse(String),
}

// ---------------------------------------------------------------------------
// Pieces

/// Per-taxonomy scoring. Windows whose resident was scripted out of the room
/// at the window's midpoint carry no truth label and are not scored.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelEval {
    pub scored: u64,
    pub correct: u64,
    /// `correct / scored`; vacuously 1.0 when nothing was scorable.
    pub accuracy: f64,
    /// `confusion[truth_label][predicted_label] = windows`.
    pub confusion: BTreeMap<String, BTreeMap<String, u64>>,
}

/// How the unoccupied-record filter did against the script: a record should
/// have been dropped exactly when the room was truly empty at its time.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FilterEval {
    pub kept: u64,
    pub dropped: u64,
    /// Records whose occupancy evidence straddles a scripted presence
    /// transition; they could honestly go either way, so precision/recall
    /// leave them out. Fractions below still count them.
    pub ambiguous: u64,
    pub truth_empty_fraction: f64,
    pub observed_drop_fraction: f64,
    pub drop_precision: f64,
    pub drop_recall: f64,
}

/// Line-level comparison of a decision log against a reference copy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GoldenDiff {
    pub matches: bool,
    pub our_lines: usize,
    pub golden_lines: usize,
    /// First line number (1-based) where the two logs differ.
    pub first_divergence: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecisionEval {
    pub records: usize,
    pub commands: usize,
    pub golden: Option<GoldenDiff>,
}

/// How much the ladder shrank the data: raw samples in, aligned records,
/// kept records, windows out.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Reduction {
    pub input_samples: u64,
    pub aligned_records: u64,
    pub kept_records: u64,
    pub windows: u64,
    /// Aligned records per input sample, straight from coverage.
    pub record_ratio: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub version: String,
    pub coverage: CoverageReport,
    pub filtering: FilterEval,
    pub activity: LabelEval,
    pub emotion: LabelEval,
    pub decisions: DecisionEval,
    pub counters: Counters,
    pub reduction: Reduction,
}

// ---------------------------------------------------------------------------
// Truth series on disk: one JSON sample per line

pub fn truth_to_jsonl(samples: &[TruthSample]) -> String {
    let mut out = String::new();
    for s in samples {
        out.push_str(&serde_json::to_string(s).expect("truth serializes"));
        out.push('\n');
    }
    out
}

pub fn truth_from_jsonl(text: &str) -> Result<Vec<TruthSample>, ReportError> {
    let mut samples = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let s: TruthSample = serde_json::from_str(line)
            .map_err(|e| ReportError::Truth { line: i + 1, detail: e.to_string() })?;
        samples.push(s);
    }
    Ok(samples)
}

/// Truth sample nearest to `ts`; ties go to the earlier sample.
fn truth_nearest<'a>(truth: &'a [TruthSample], ts: Nanos) -> Option<&'a TruthSample> {
    if truth.is_empty() {
        return None;
    }
    let idx = truth.partition_point(|s| s.t_ns <= ts);
    match idx {
        0 => Some(&truth[0]),
        i if i == truth.len() => Some(&truth[i - 1]),
        i => {
            let before = &truth[i - 1];
            let after = &truth[i];
            if ts - before.t_ns <= after.t_ns - ts {
                Some(before)
            } else {
                Some(after)
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Scoring

pub struct EvalInputs<'a> {
    pub coverage: &'a CoverageReport,
    /// Every aligned record, kept or not.
    pub aligned: &'a [AlignedRecord],
    pub kept: &'a [Level1Record],
    pub windows: &'a [Level2Record],
    /// Serialized decision log, one JSON record per line.
    pub decisions_text: &'a str,
    /// Reference decision log to diff against, if there is one.
    pub golden_text: Option<&'a str>,
    pub counters: Counters,
}

fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        1.0
    } else {
        num as f64 / den as f64
    }
}

/// The filter sees occupancy evidence — camera and floor samples — captured
/// up to a staleness window before the record instant, so its decisions are
/// judged against the script at those evidence timestamps, not at ref_ts.
/// Records whose evidence span (widened by one truth step on each side)
/// crosses a presence transition are counted but not judged.
fn score_filtering(inputs: &EvalInputs, truth: &[TruthSample]) -> FilterEval {
    let kept_ts: std::collections::BTreeSet<Nanos> =
        inputs.kept.iter().map(|r| r.ref_ts).collect();
    let guard =
        truth.windows(2).map(|w| w[1].t_ns - w[0].t_ns).max().unwrap_or(0);
    let (mut tp, mut fp, mut fn_, mut dropped, mut ambiguous) =
        (0u64, 0u64, 0u64, 0u64, 0u64);
    for rec in inputs.aligned {
        let was_dropped = !kept_ts.contains(&rec.ref_ts);
        if was_dropped {
            dropped += 1;
        }
        let evidence: Vec<Nanos> = rec
            .slots
            .values()
            .filter(|s| matches!(s.modality, Modality::Camera | Modality::FloorPressure))
            .map(|s| s.mapped_ts)
            .collect();
        let lo = evidence.iter().min().copied().unwrap_or(rec.ref_ts) - guard;
        let hi = evidence.iter().max().copied().unwrap_or(rec.ref_ts) + guard;
        let mut states: std::collections::BTreeSet<bool> =
            [truth_nearest(truth, lo), truth_nearest(truth, hi)]
                .into_iter()
                .flatten()
                .map(|s| s.room_empty())
                .collect();
        let i0 = truth.partition_point(|s| s.t_ns < lo);
        let i1 = truth.partition_point(|s| s.t_ns <= hi);
        for s in &truth[i0..i1] {
            states.insert(s.room_empty());
        }
        if states.len() != 1 {
            ambiguous += 1; // transition mid-span, or no truth at all
            continue;
        }
        let should_drop = states.into_iter().next().unwrap();
        if was_dropped {
            if should_drop {
                tp += 1;
            } else {
                fp += 1;
            }
        } else if should_drop {
            fn_ += 1;
        }
    }
    let empty = truth.iter().filter(|s| s.room_empty()).count() as u64;
    FilterEval {
        kept: (inputs.aligned.len() as u64) - dropped,
        dropped,
        ambiguous,
        truth_empty_fraction: ratio(empty, truth.len() as u64),
        observed_drop_fraction: ratio(dropped, inputs.aligned.len() as u64),
        drop_precision: ratio(tp, tp + fp),
        drop_recall: ratio(tp, tp + fn_),
    }
}

fn score_labels(
    windows: &[Level2Record],
    truth: &[TruthSample],
    pick: impl Fn(&Level2Record) -> &str,
    truth_pick: impl Fn(&crate::scenario::ResidentTruth) -> &str,
) -> LabelEval {
    let mut scored = 0u64;
    let mut correct = 0u64;
    let mut confusion: BTreeMap<String, BTreeMap<String, u64>> = BTreeMap::new();
    for w in windows {
        let center = w.features.start_ns + (w.features.end_ns - w.features.start_ns) / 2;
        let Some(sample) = truth_nearest(truth, center) else { continue };
        let Some(rt) = sample.residents.iter().find(|r| r.id == w.features.resident) else {
            continue;
        };
        if rt.position.is_none() {
            continue; // resident scripted out of the room: nothing to score
        }
        let truth_label = truth_pick(rt);
        let predicted = pick(w);
        scored += 1;
        if truth_label == predicted {
            correct += 1;
        }
        *confusion
            .entry(truth_label.to_string())
            .or_default()
            .entry(predicted.to_string())
            .or_default() += 1;
    }
    LabelEval { scored, correct, accuracy: ratio(correct, scored), confusion }
}

fn diff_lines(ours: &str, golden: &str) -> GoldenDiff {
    let a: Vec<&str> = ours.lines().collect();
    let b: Vec<&str> = golden.lines().collect();
    let mut first = None;
    for i in 0..a.len().max(b.len()) {
        if a.get(i) != b.get(i) {
            first = Some(i + 1);
            break;
        }
    }
    GoldenDiff {
        matches: first.is_none(),
        our_lines: a.len(),
        golden_lines: b.len(),
        first_divergence: first,
    }
}

pub fn evaluate(inputs: &EvalInputs, truth: &[TruthSample]) -> EvalReport {
    let mut commands = 0usize;
    let mut records = 0usize;
    for line in inputs.decisions_text.lines() {
        if line.trim().is_empty() {
            continue;
        }
        records += 1;
        if let Ok(d) = serde_json::from_str::<DecisionRecord>(line) {
            commands += d.commands.len();
        }
    }
    EvalReport {
        version: REPORT_VERSION.to_string(),
        coverage: inputs.coverage.clone(),
        filtering: score_filtering(inputs, truth),
        activity: score_labels(
            inputs.windows,
            truth,
            |w| &w.activity.label,
            |rt| &rt.activity,
        ),
        emotion: score_labels(inputs.windows, truth, |w| &w.emotion.label, |rt| &rt.emotion),
        decisions: DecisionEval {
            records,
            commands,
            golden: inputs.golden_text.map(|g| diff_lines(inputs.decisions_text, g)),
        },
        counters: inputs.counters,
        reduction: Reduction {
            input_samples: inputs.coverage.input_samples as u64,
            aligned_records: inputs.aligned.len() as u64,
            kept_records: inputs.kept.len() as u64,
            windows: inputs.windows.len() as u64,
            record_ratio: inputs.coverage.size_ratio,
        },
    }
}

pub fn report_to_json(report: &EvalReport) -> String {
    serde_json::to_string_pretty(report).expect("report serializes")
}

pub fn report_from_json(text: &str) -> Result<EvalReport, ReportError> {
    serde_json::from_str(text).map_err(|e| ReportError::Parse(e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::align::{Slot, SlotRef};
    use crate::scenario::ResidentTruth;
    use crate::state::{FeatureWindow, Labelled, Posture};
    use std::collections::BTreeMap;

    /// A record anchored by one camera sample taken exactly at `ts`.
    fn rec_at(ts: Nanos) -> AlignedRecord {
        let mut slots = BTreeMap::new();
        slots.insert(
            10u16,
            Slot {
                device_id: 10,
                modality: Modality::Camera,
                mapped_ts: ts,
                staleness_ns: 0,
                source: SlotRef { segment: "seg".into(), offset: 0, sequence: 0 },
            },
        );
        AlignedRecord { ref_ts: ts, anchor_device: 10, slots }
    }

    fn truth_at(t_s: f64, activity: &str, emotion: &str, present: bool) -> TruthSample {
        TruthSample {
            t_ns: (t_s * 1e9) as Nanos,
            residents: vec![ResidentTruth {
                id: 1,
                position: present.then_some((2.0, 2.0)),
                posture: Posture::Standing,
                activity: activity.into(),
                emotion: emotion.into(),
                speaking: false,
            }],
            devices: BTreeMap::new(),
            temperature_c: 21.0,
            humidity_pct: 40.0,
        }
    }

    fn window_at(start_s: f64, activity: &str, emotion: &str) -> Level2Record {
        let start_ns = (start_s * 1e9) as Nanos;
        let end_ns = start_ns + 5_000_000_000;
        Level2Record {
            features: FeatureWindow {
                resident: 1,
                start_ns,
                end_ns,
                records: 10,
                mean_speed: 0.0,
                posture: Posture::Standing,
                voice_fraction: 0.0,
                cadence_spm: 0.0,
                cadence_cv: 0.0,
                energy_mean: 0.0,
                energy_max: 0.0,
                energy_std: 0.0,
                occupancy_fraction: 1.0,
                appliances: BTreeMap::new(),
                temperature: None,
                humidity: None,
                tod_s: 0.0,
            },
            activity: Labelled {
                label: activity.into(),
                confidence: 0.9,
                rule_id: "t".into(),
            },
            emotion: Labelled { label: emotion.into(), confidence: 0.9, rule_id: "t".into() },
        }
    }

    fn empty_coverage() -> CoverageReport {
        CoverageReport { records: 0, input_samples: 0, size_ratio: 0.0, streams: vec![] }
    }

    #[test]
    fn accuracy_and_confusion_count_only_present_windows() {
        let truth: Vec<TruthSample> = (0..20)
            .map(|i| {
                let t = i as f64;
                if t < 10.0 {
                    truth_at(t, "standing", "neutral", true)
                } else if t < 15.0 {
                    truth_at(t, "walking", "happy", true)
                } else {
                    truth_at(t, "idle", "neutral", false) // away
                }
            })
            .collect();
        let windows = vec![
            window_at(0.0, "standing", "neutral"),  // center 2.5 -> standing: hit
            window_at(5.0, "walking", "neutral"),   // center 7.5 -> standing: miss
            window_at(10.0, "walking", "happy"),    // center 12.5 -> walking: hit
            window_at(15.0, "standing", "neutral"), // away: unscored
        ];
        let inputs = EvalInputs {
            coverage: &empty_coverage(),
            aligned: &[],
            kept: &[],
            windows: &windows,
            decisions_text: "",
            golden_text: None,
            counters: Counters::default(),
        };
        let report = evaluate(&inputs, &truth);
        assert_eq!(report.activity.scored, 3);
        assert_eq!(report.activity.correct, 2);
        assert!((report.activity.accuracy - 2.0 / 3.0).abs() < 1e-12);
        assert_eq!(report.activity.confusion["standing"]["walking"], 1);
        // All three scored window centers (2.5, 7.5, 12.5) land on truth that
        // agrees with the predicted emotion, so only activity takes the miss.
        assert_eq!(report.emotion.scored, 3);
        assert_eq!(report.emotion.correct, 3);
    }

    #[test]
    fn drop_precision_recall_against_scripted_absence() {
        // Truth at 1 Hz: room empty for t in [10, 20).
        let truth: Vec<TruthSample> = (0..30)
            .map(|i| {
                let t = i as f64;
                truth_at(t, "standing", "neutral", !(10.0..20.0).contains(&t))
            })
            .collect();
        let aligned: Vec<AlignedRecord> =
            (0..300).map(|i| rec_at(i * 100_000_000)).collect(); // 10 Hz
        // Perfect filter: keep exactly the occupied spans.
        let kept: Vec<Level1Record> = aligned
            .iter()
            .filter(|r| !(10_000_000_000..20_000_000_000).contains(&r.ref_ts))
            .map(|r| Level1Record {
                ref_ts: r.ref_ts,
                voice_active: false,
                mic_energy: None,
                occupied: Some(true),
                floor_ts: None,
                floor_force: None,
                devices: BTreeMap::new(),
                env: None,
                residents: BTreeMap::new(),
            })
            .collect();
        let inputs = EvalInputs {
            coverage: &empty_coverage(),
            aligned: &aligned,
            kept: &kept,
            windows: &[],
            decisions_text: "",
            golden_text: None,
            counters: Counters::default(),
        };
        let report = evaluate(&inputs, &truth);
        assert_eq!(report.filtering.drop_precision, 1.0);
        assert_eq!(report.filtering.drop_recall, 1.0);
        // One truth step of slack around each transition goes unjudged:
        // two transitions, ~2s of 10 Hz records each.
        assert!(report.filtering.ambiguous >= 38 && report.filtering.ambiguous <= 44);
        assert!((report.filtering.observed_drop_fraction - 1.0 / 3.0).abs() < 2e-2);
        assert!((report.filtering.truth_empty_fraction - 1.0 / 3.0).abs() < 4e-2);
    }

    #[test]
    fn golden_diff_reports_the_first_divergent_line() {
        let ours = "a\nb\nc\n";
        let same = diff_lines(ours, "a\nb\nc\n");
        assert!(same.matches && same.first_divergence.is_none());
        let edited = diff_lines(ours, "a\nX\nc\n");
        assert!(!edited.matches);
        assert_eq!(edited.first_divergence, Some(2));
        let longer = diff_lines(ours, "a\nb\nc\nd\n");
        assert!(!longer.matches);
        assert_eq!(longer.first_divergence, Some(4));
    }

    #[test]
    fn truth_series_round_trips_through_jsonl() {
        let truth = vec![
            truth_at(0.0, "standing", "neutral", true),
            truth_at(1.0, "walking", "happy", false),
        ];
        let text = truth_to_jsonl(&truth);
        let back = truth_from_jsonl(&text).unwrap();
        assert_eq!(back.len(), 2);
        assert_eq!(back[1].residents[0].activity, "walking");
        assert!(back[1].residents[0].position.is_none());
        assert_eq!(truth_to_jsonl(&back), text);
    }

    #[test]
    fn report_round_trips_through_json() {
        let aligned = [rec_at(0), rec_at(1), rec_at(2)];
        let inputs = EvalInputs {
            coverage: &empty_coverage(),
            aligned: &aligned,
            kept: &[],
            windows: &[],
            decisions_text: "{\"bad\":
true}",
            golden_text: Some(""),
            counters: Counters::default(),
        };
        let report = evaluate(&inputs, &[]);
        let text = report_to_json(&report);
        let back = report_from_json(&text).unwrap();
        assert_eq!(back, report);
    }
}
