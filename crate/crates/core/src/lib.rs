//! Desk-scale smart-home sensing, end to end and fully simulated: scripted
//! residents move through a virtual room, multi-modal sensors (cameras,
//! microphone, floor-pressure grid, environment probes, appliance monitors)
//! observe them on skewed device clocks, frames travel a binary wire protocol
//! into an append-only segment log, and a fusion ladder turns the log back
//! into aligned records, cleaned features, activity/emotion labels, actuator
//! decisions, and digital-twin snapshots that can be scored against the
//! script that generated them.
//!
//! The fusion ladder:
//!
//! * **Level 0** ([`align`]) — clock-sync fitting ([`clock`]) plus
//!   multi-stream timestamp alignment onto a primary sample grid.
//! * **Level 1** ([`features`]) — occupancy, voice activity, 3-D skeleton
//!   reconstruction, consistency filtering, position tracking.
//! * **Level 2** ([`state`]) — windowed features and rule-table
//!   classification into activity and emotion labels.
//! * **Level 3** ([`rules`]) — hysteresis decision rules that emit actuator
//!   commands with a replayable trace.
//! * **Twin** ([`twin`]) — last-value state snapshots with a diff/patch
//!   algebra.
//!
//! Everything upstream of the ladder lives in [`scenario`] (scripts),
//! [`sim`] (signal synthesis), [`wire`]/[`session`]/[`net`] (transport), and
//! [`storage`] (the segment log). [`pipeline`] strings the stages together
//! and [`report`] scores the result. All randomness is seeded; a given
//! scenario file produces the same log bytes and a given log produces the
//! same fusion output bytes, every run.

pub mod align;
pub mod artifacts;
pub mod clock;
pub mod config;
pub mod crc;
pub mod features;
pub mod net;
pub mod payload;
pub mod pipeline;
pub mod predicate;
pub mod report;
pub mod rules;
pub mod scenario;
pub mod session;
pub mod sim;
pub mod state;
pub mod storage;
pub mod time;
pub mod twin;
pub mod wire;

pub use align::{AlignConfig, AlignError, AlignPolicy, AlignedRecord, SlotRef};
pub use clock::{ClockMapping, ClockModel, SyncError, SyncRound};
pub use scenario::{Modality, Scenario, ScenarioError, SensorSpec};
pub use wire::{DecodeError, EncodeError, Frame, MsgType};
