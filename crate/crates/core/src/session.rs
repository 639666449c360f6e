//! Per-device session bookkeeping: sequence continuity, liveness, and gap
//! reporting for everything the collector ingests.
//!
//! The table answers two questions the raw log cannot: *which frames never
//! arrived* (sequence gaps, checksum rejects, queue drops) and *when a
//! sensor stopped talking* (heartbeat silence). Both surface as typed
//! `GapReport`s so downstream layers and the run report see every loss.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::time::Nanos;
use crate::wire::{Frame, MsgType};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum SessionState {
    Active,
    Suspect,
    Dead,
}

impl SessionState {
    pub fn name(self) -> &'static str {
        match self {
            SessionState::Active => "active",
            SessionState::Suspect => "suspect",
            SessionState::Dead => "dead",
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct Session {
    pub device_id: u16,
    pub modality: u8,
    pub last_sequence: u32,
    pub last_seen_ns: Nanos,
    pub state: SessionState,
    /// Dead already announced; cleared on revival.
    reported_dead: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GapKind {
    SequenceGap,
    HeartbeatTimeout,
    CrcFailure,
    Reconnect,
}

/// What was lost: a closed sequence range or a span of silence. Both ends
/// inclusive for sequences; never empty.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GapRange {
    Sequence { first: u32, last: u32 },
    Time { start_ns: Nanos, end_ns: Nanos },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GapReport {
    pub device_id: u16,
    pub kind: GapKind,
    pub range: GapRange,
    pub detected_at_ns: Nanos,
}

/// Collector-side frame accounting. Together with the sender's own emit
/// and loss counts these must balance: every frame a device emitted is
/// stored, rejected, dropped by backpressure, or lost in transit.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Counters {
    pub frames_stored: u64,
    pub frames_rejected: u64,
    pub frames_dropped_backpressure: u64,
    pub unknown_modality: u64,
    /// Sum of missing frames across all sequence-gap reports.
    pub sequence_gap_frames: u64,
    pub reconnects: u64,
    pub heartbeat_timeouts: u64,
}

#[derive(Debug, Clone, Copy, Serialize)]
pub struct LivenessConfig {
    pub heartbeat_interval_ns: Nanos,
    /// Silence beyond this many intervals turns a session suspect.
    pub suspect_after: u32,
    /// ... and beyond this many, dead (with a report).
    pub dead_after: u32,
}

impl Default for LivenessConfig {
    fn default() -> Self {
        LivenessConfig {
            heartbeat_interval_ns: 1_000_000_000,
            suspect_after: 2,
            dead_after: 3,
        }
    }
}

#[derive(Debug, Default)]
pub struct SessionTable {
    pub liveness: LivenessConfig,
    sessions: BTreeMap<u16, Session>,
    pub counters: Counters,
}

impl SessionTable {
    pub fn new(liveness: LivenessConfig) -> SessionTable {
        SessionTable { liveness, sessions: BTreeMap::new(), counters: Counters::default() }
    }

    pub fn session(&self, device_id: u16) -> Option<&Session> {
        self.sessions.get(&device_id)
    }

    pub fn sessions(&self) -> impl Iterator<Item = &Session> {
        self.sessions.values()
    }

    /// Records one decoded frame. The caller persists it afterwards; this
    /// updates continuity state and returns whatever gaps became visible.
    pub fn ingest(&mut self, frame: &Frame, receive_time_ns: Nanos) -> Vec<GapReport> {
        let mut reports = Vec::new();
        if frame.msg_type == MsgType::Sample && frame.modality > 4 {
            self.counters.unknown_modality += 1;
        }
        match self.sessions.get_mut(&frame.device_id) {
            None => {
                // Streams count from zero, so a first-contact frame already
                // mid-sequence means everything before it was lost. Hello is
                // exempt: it (re)declares the origin.
                if frame.msg_type != MsgType::Hello && frame.sequence > 0 {
                    self.counters.sequence_gap_frames += frame.sequence as u64;
                    reports.push(GapReport {
                        device_id: frame.device_id,
                        kind: GapKind::SequenceGap,
                        range: GapRange::Sequence { first: 0, last: frame.sequence - 1 },
                        detected_at_ns: receive_time_ns,
                    });
                }
                self.sessions.insert(
                    frame.device_id,
                    Session {
                        device_id: frame.device_id,
                        modality: frame.modality,
                        last_sequence: frame.sequence,
                        last_seen_ns: receive_time_ns,
                        state: SessionState::Active,
                        reported_dead: false,
                    },
                );
            }
            Some(session) => {
                let expected = session.last_sequence.wrapping_add(1);
                if frame.msg_type == MsgType::Hello {
                    // A device announcing itself again is a restart.
                    self.counters.reconnects += 1;
                    reports.push(GapReport {
                        device_id: frame.device_id,
                        kind: GapKind::Reconnect,
                        range: GapRange::Time {
                            start_ns: session.last_seen_ns,
                            end_ns: receive_time_ns,
                        },
                        detected_at_ns: receive_time_ns,
                    });
                } else if frame.sequence > expected {
                    let missing = frame.sequence - expected;
                    self.counters.sequence_gap_frames += missing as u64;
                    reports.push(GapReport {
                        device_id: frame.device_id,
                        kind: GapKind::SequenceGap,
                        range: GapRange::Sequence {
                            first: expected,
                            last: frame.sequence - 1,
                        },
                        detected_at_ns: receive_time_ns,
                    });
                } else if frame.sequence < expected {
                    // A regression without a HELLO still means the counter
                    // restarted somewhere; it is never silently accepted.
                    self.counters.reconnects += 1;
                    reports.push(GapReport {
                        device_id: frame.device_id,
                        kind: GapKind::Reconnect,
                        range: GapRange::Time {
                            start_ns: session.last_seen_ns,
                            end_ns: receive_time_ns,
                        },
                        detected_at_ns: receive_time_ns,
                    });
                }
                session.last_sequence = frame.sequence;
                session.last_seen_ns = receive_time_ns;
                session.state = SessionState::Active;
                session.reported_dead = false;
                if frame.msg_type == MsgType::Hello || frame.msg_type == MsgType::Sample {
                    session.modality = frame.modality;
                }
            }
        }
        self.counters.frames_stored += 1;
        reports
    }

    /// A connection delivered bytes that failed checksum or framing.
    /// Attributed to the device the connection last spoke for (0 if none).
    pub fn record_crc_failure(&mut self, device_id: u16, now: Nanos) -> GapReport {
        self.counters.frames_rejected += 1;
        GapReport {
            device_id,
            kind: GapKind::CrcFailure,
            range: GapRange::Time { start_ns: now, end_ns: now },
            detected_at_ns: now,
        }
    }

    pub fn record_backpressure_drops(&mut self, n: u64) {
        self.counters.frames_dropped_backpressure += n;
    }

    /// Sweeps liveness: sessions silent beyond the configured intervals go
    /// suspect, then dead (reported once per death).
    pub fn monitor(&mut self, now: Nanos) -> Vec<GapReport> {
        let mut reports = Vec::new();
        let interval = self.liveness.heartbeat_interval_ns;
        for session in self.sessions.values_mut() {
            let silence = now.saturating_sub(session.last_seen_ns);
            let new_state = if silence > self.liveness.dead_after as Nanos * interval {
                SessionState::Dead
            } else if silence > self.liveness.suspect_after as Nanos * interval {
                SessionState::Suspect
            } else {
                SessionState::Active
            };
            // Monitor only ever worsens a state; frames revive.
            if state_rank(new_state) > state_rank(session.state) {
                session.state = new_state;
            }
            if session.state == SessionState::Dead && !session.reported_dead {
                session.reported_dead = true;
                self.counters.heartbeat_timeouts += 1;
                reports.push(GapReport {
                    device_id: session.device_id,
                    kind: GapKind::HeartbeatTimeout,
                    range: GapRange::Time { start_ns: session.last_seen_ns, end_ns: now },
                    detected_at_ns: now,
                });
            }
        }
        reports
    }

    /// Per-device (state, last_seen) view for world-state export.
    pub fn health(&self) -> BTreeMap<u16, (&'static str, Nanos)> {
        self.sessions
            .iter()
            .map(|(&id, s)| (id, (s.state.name(), s.last_seen_ns)))
            .collect()
    }
}

fn state_rank(s: SessionState) -> u8 {
    match s {
        SessionState::Active => 0,
        SessionState::Suspect => 1,
        SessionState::Dead => 2,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn frame(device_id: u16, msg_type: MsgType, sequence: u32) -> Frame {
        Frame::empty(msg_type, device_id, 4, sequence, 0)
    }

    #[test]
    fn contiguous_sequences_report_nothing() {
        let mut table = SessionTable::new(LivenessConfig::default());
        for seq in 0..3 {
            let reports = table.ingest(&frame(7, MsgType::Sample, seq), seq as Nanos * 100);
            assert!(reports.is_empty(), "seq {seq}");
        }
        assert_eq!(table.counters.frames_stored, 3);
        assert_eq!(table.counters.sequence_gap_frames, 0);
        assert_eq!(table.session(7).unwrap().last_sequence, 2);
    }

    #[test]
    fn sequence_jump_reports_the_missing_range() {
        let mut table = SessionTable::new(LivenessConfig::default());
        table.ingest(&frame(7, MsgType::Sample, 0), 0);
        table.ingest(&frame(7, MsgType::Sample, 1), 10);
        let reports = table.ingest(&frame(7, MsgType::Sample, 5), 20);
        assert_eq!(reports.len(), 1);
        assert_eq!(reports[0].kind, GapKind::SequenceGap);
        assert_eq!(reports[0].range, GapRange::Sequence { first: 2, last: 4 });
        assert_eq!(reports[0].detected_at_ns, 20);
        assert_eq!(table.counters.sequence_gap_frames, 3);
    }

    #[test]
    fn hello_on_live_session_is_a_reconnect_and_resets_expectations() {
        let mut table = SessionTable::new(LivenessConfig::default());
        for seq in 0..100 {
            table.ingest(&frame(7, MsgType::Sample, seq), seq as Nanos);
        }
        let reports = table.ingest(&frame(7, MsgType::Hello, 0), 1_000);
        assert_eq!(reports.len(), 1);
        assert_eq!(reports[0].kind, GapKind::Reconnect);
        assert_eq!(reports[0].range, GapRange::Time { start_ns: 99, end_ns: 1_000 });
        assert_eq!(table.counters.reconnects, 1);
        // The restarted counter continues without a spurious gap.
        assert!(table.ingest(&frame(7, MsgType::Sample, 1), 1_001).is_empty());
        assert!(table.ingest(&frame(7, MsgType::Sample, 2), 1_002).is_empty());
    }

    #[test]
    fn regression_without_hello_is_still_flagged() {
        let mut table = SessionTable::new(LivenessConfig::default());
        table.ingest(&frame(7, MsgType::Sample, 50), 0);
        let reports = table.ingest(&frame(7, MsgType::Sample, 3), 10);
        assert_eq!(reports.len(), 1);
        assert_eq!(reports[0].kind, GapKind::Reconnect);
    }

    #[test]
    fn liveness_walks_active_suspect_dead_and_reports_once() {
        let mut table = SessionTable::new(LivenessConfig::default());
        let s = 1_000_000_000; // 1 s heartbeat interval
        table.ingest(&frame(7, MsgType::Heartbeat, 0), 0);

        assert!(table.monitor(s + s / 2).is_empty());
        assert_eq!(table.session(7).unwrap().state, SessionState::Active);

        assert!(table.monitor(2 * s + s / 2).is_empty());
        assert_eq!(table.session(7).unwrap().state, SessionState::Suspect);

        let reports = table.monitor(3 * s + s / 2);
        assert_eq!(table.session(7).unwrap().state, SessionState::Dead);
        assert_eq!(reports.len(), 1);
        assert_eq!(reports[0].kind, GapKind::HeartbeatTimeout);
        assert_eq!(reports[0].range, GapRange::Time { start_ns: 0, end_ns: 3 * s + s / 2 });

        // No duplicate reports while it stays dead.
        assert!(table.monitor(4 * s).is_empty());
        assert_eq!(table.counters.heartbeat_timeouts, 1);

        // Any frame revives it; a later death reports again.
        table.ingest(&frame(7, MsgType::Heartbeat, 1), 5 * s);
        assert_eq!(table.session(7).unwrap().state, SessionState::Active);
        assert_eq!(table.monitor(9 * s).len(), 1);
        assert_eq!(table.counters.heartbeat_timeouts, 2);
    }

    #[test]
    fn crc_failures_and_drops_feed_the_counters() {
        let mut table = SessionTable::new(LivenessConfig::default());
        let report = table.record_crc_failure(9, 42);
        assert_eq!(report.kind, GapKind::CrcFailure);
        table.record_backpressure_drops(5);
        assert_eq!(table.counters.frames_rejected, 1);
        assert_eq!(table.counters.frames_dropped_backpressure, 5);
    }

    #[test]
    fn unknown_modality_is_accepted_but_counted() {
        let mut table = SessionTable::new(LivenessConfig::default());
        let mut f = frame(7, MsgType::Sample, 0);
        f.modality = 9;
        let reports = table.ingest(&f, 0);
        assert!(reports.is_empty());
        assert_eq!(table.counters.unknown_modality, 1);
        assert_eq!(table.counters.frames_stored, 1);
        assert!(table.session(7).is_some());
    }

    #[test]
    fn health_view_tracks_state_names() {
        let mut table = SessionTable::new(LivenessConfig::default());
        table.ingest(&frame(7, MsgType::Sample, 0), 100);
        table.ingest(&frame(8, MsgType::Sample, 0), 200);
        table.monitor(10_000_000_000);
        let health = table.health();
        assert_eq!(health[&7], ("dead", 100));
        assert_eq!(health[&8], ("dead", 200));
    }
}
