//! On-disk layout of a fused run directory.
//!
//! Each ladder stage persists to its own file so a later stage can be re-run
//! from the previous stage's stored output alone. Record streams are JSON
//! Lines (one record per line, append-order = timeline order); the run
//! manifest and the session replay are single JSON documents.
//!
//! ```text
//! run.json        manifest: ids, hashes, alignment coverage, clock mappings
//! aligned.jsonl   level 0 — aligned records
//! level1.jsonl    level 1 — cleaned records with features
//! windows.jsonl   level 2 — classified feature windows
//! decisions.jsonl level 3 — decision records
//! sessions.json   connection/liveness replay of the source log
//! ```

use std::fs;
use std::io::{self, BufWriter, Write as _};
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use thiserror::Error;

use crate::align::{AlignWarnings, AlignedRecord, CoverageReport};
use crate::clock::ClockMapping;
use crate::features::FilterStats;
use crate::pipeline::{
    FusionOutput, Level0Output, Level1Record, Level2Record, SessionReplay, SyncSummary,
};
use crate::rules::DecisionRecord;
use crate::scenario::{Modality, Room};
use crate::time::Nanos;

pub const RUN_META_VERSION: &str = "shp/1";

#[derive(Debug, Error)]
pub enum ArtifactError {
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("{} is not a valid {what}: {detail}", path.display())]
    Json { path: PathBuf, what: &'static str, detail: String },
    #[error("{} line {line}: {detail}", path.display())]
    Line { path: PathBuf, line: usize, detail: String },
    #[error("missing {what} ({}); run the level that produces it first", path.display())]
    Missing { what: &'static str, path: PathBuf },
}

/// Everything about a run that is not a record stream: identity, the level-0
/// alignment report, and per-pass cleaning stats. Written when level 0 runs,
/// rewritten with `pass_stats`/`payload_errors` filled when level 1 runs.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunMeta {
    pub version: String,
    /// Deterministic name for this (log, config) pairing.
    pub run_id: String,
    pub config_hash: String,
    pub start_of_day_s: f64,
    pub room: Option<Room>,
    pub primary: (Modality, u16),
    /// Reference timestamp of the last aligned record (0 when none), so
    /// later stages know the covered span without re-reading alignment.
    pub end_ns: Nanos,
    pub orphan_samples: u64,
    pub warnings: AlignWarnings,
    pub coverage: CoverageReport,
    pub mappings: BTreeMap<u16, ClockMapping>,
    pub sync: Vec<SyncSummary>,
    /// Cleaning stats per pass, in pass order; empty until level 1 runs.
    pub pass_stats: Vec<FilterStats>,
    pub payload_errors: u64,
}

impl RunMeta {
    pub fn from_level0(
        run_id: &str,
        config_hash: &str,
        start_of_day_s: f64,
        room: Option<Room>,
        level0: &Level0Output,
    ) -> RunMeta {
        RunMeta {
            version: RUN_META_VERSION.to_string(),
            run_id: run_id.to_string(),
            config_hash: config_hash.to_string(),
            start_of_day_s,
            room,
            primary: level0.primary,
            end_ns: level0.records.last().map(|r| r.ref_ts).unwrap_or(0),
            orphan_samples: level0.orphan_samples,
            warnings: level0.warnings.clone(),
            coverage: level0.coverage.clone(),
            mappings: level0.mappings.clone(),
            sync: level0.sync.clone(),
            pass_stats: Vec::new(),
            payload_errors: 0,
        }
    }

    pub fn from_output(out: &FusionOutput) -> RunMeta {
        let mut meta = RunMeta::from_level0(
            &out.run_id,
            &out.config_hash,
            out.start_of_day_s,
            out.room.clone(),
            &out.level0,
        );
        meta.pass_stats = out.pass_stats.clone();
        meta.payload_errors = out.level1.payload_errors;
        meta
    }
}

/// Handle on one run directory; all reads and writes go through here so the
/// file names live in exactly one place.
#[derive(Debug, Clone)]
pub struct FusedDir {
    root: PathBuf,
}

impl FusedDir {
    pub fn new(root: impl Into<PathBuf>) -> FusedDir {
        FusedDir { root: root.into() }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn meta_path(&self) -> PathBuf {
        self.root.join("run.json")
    }
    pub fn aligned_path(&self) -> PathBuf {
        self.root.join("aligned.jsonl")
    }
    pub fn level1_path(&self) -> PathBuf {
        self.root.join("level1.jsonl")
    }
    pub fn windows_path(&self) -> PathBuf {
        self.root.join("windows.jsonl")
    }
    pub fn decisions_path(&self) -> PathBuf {
        self.root.join("decisions.jsonl")
    }
    pub fn sessions_path(&self) -> PathBuf {
        self.root.join("sessions.json")
    }

    fn ensure_root(&self) -> Result<(), ArtifactError> {
        fs::create_dir_all(&self.root)
            .map_err(|e| ArtifactError::Io { path: self.root.clone(), source: e })
    }

    pub fn write_meta(&self, meta: &RunMeta) -> Result<(), ArtifactError> {
        self.ensure_root()?;
        let path = self.meta_path();
        let mut text = serde_json::to_string_pretty(meta).expect("manifest serializes");
        text.push('\n');
        fs::write(&path, text).map_err(|e| ArtifactError::Io { path, source: e })
    }

    pub fn read_meta(&self) -> Result<RunMeta, ArtifactError> {
        let path = self.meta_path();
        let text = read_text(&path, "run manifest")?;
        let meta: RunMeta = serde_json::from_str(&text).map_err(|e| ArtifactError::Json {
            path: path.clone(),
            what: "run manifest",
            detail: e.to_string(),
        })?;
        if meta.version != RUN_META_VERSION {
            return Err(ArtifactError::Json {
                path,
                what: "run manifest",
                detail: format!("version {:?}, expected {RUN_META_VERSION:?}", meta.version),
            });
        }
        Ok(meta)
    }

    pub fn write_aligned(&self, records: &[AlignedRecord]) -> Result<(), ArtifactError> {
        self.ensure_root()?;
        write_jsonl(&self.aligned_path(), records)
    }
    pub fn read_aligned(&self) -> Result<Vec<AlignedRecord>, ArtifactError> {
        read_jsonl(&self.aligned_path(), "aligned records")
    }

    pub fn write_level1(&self, records: &[Level1Record]) -> Result<(), ArtifactError> {
        self.ensure_root()?;
        write_jsonl(&self.level1_path(), records)
    }
    pub fn read_level1(&self) -> Result<Vec<Level1Record>, ArtifactError> {
        read_jsonl(&self.level1_path(), "cleaned records")
    }

    pub fn write_windows(&self, windows: &[Level2Record]) -> Result<(), ArtifactError> {
        self.ensure_root()?;
        write_jsonl(&self.windows_path(), windows)
    }
    pub fn read_windows(&self) -> Result<Vec<Level2Record>, ArtifactError> {
        read_jsonl(&self.windows_path(), "classified windows")
    }

    pub fn write_decisions(&self, decisions: &[DecisionRecord]) -> Result<(), ArtifactError> {
        self.ensure_root()?;
        write_jsonl(&self.decisions_path(), decisions)
    }
    pub fn read_decisions(&self) -> Result<Vec<DecisionRecord>, ArtifactError> {
        read_jsonl(&self.decisions_path(), "decision records")
    }
    /// The decision log verbatim, for byte-level diffing against a reference.
    pub fn read_decisions_text(&self) -> Result<String, ArtifactError> {
        read_text(&self.decisions_path(), "decision records")
    }

    pub fn write_sessions(&self, sessions: &SessionReplay) -> Result<(), ArtifactError> {
        self.ensure_root()?;
        let path = self.sessions_path();
        let mut text = serde_json::to_string(sessions).expect("session replay serializes");
        text.push('\n');
        fs::write(&path, text).map_err(|e| ArtifactError::Io { path, source: e })
    }
    pub fn read_sessions(&self) -> Result<SessionReplay, ArtifactError> {
        let path = self.sessions_path();
        let text = read_text(&path, "session replay")?;
        serde_json::from_str(&text).map_err(|e| ArtifactError::Json {
            path,
            what: "session replay",
            detail: e.to_string(),
        })
    }

    /// Deletes artifacts for levels above `level`, so a partial re-run never
    /// leaves stale downstream output lying around.
    pub fn remove_above(&self, level: u8) -> Result<(), ArtifactError> {
        let mut stale = Vec::new();
        if level < 1 {
            stale.push(self.level1_path());
        }
        if level < 2 {
            stale.push(self.windows_path());
        }
        if level < 3 {
            stale.push(self.decisions_path());
        }
        for path in stale {
            match fs::remove_file(&path) {
                Ok(()) => {}
                Err(e) if e.kind() == io::ErrorKind::NotFound => {}
                Err(e) => return Err(ArtifactError::Io { path, source: e }),
            }
        }
        Ok(())
    }

    /// Persists a complete ladder run: manifest plus every stage's stream.
    pub fn write_all(&self, out: &FusionOutput) -> Result<(), ArtifactError> {
        self.write_meta(&RunMeta::from_output(out))?;
        self.write_aligned(&out.level0.records)?;
        self.write_level1(&out.level1.records)?;
        self.write_windows(&out.level2.windows)?;
        self.write_decisions(&out.level3.decisions)?;
        self.write_sessions(&out.sessions)
    }
}

fn read_text(path: &Path, what: &'static str) -> Result<String, ArtifactError> {
    match fs::read_to_string(path) {
        Ok(text) => Ok(text),
        Err(e) if e.kind() == io::ErrorKind::NotFound => {
            Err(ArtifactError::Missing { what, path: path.to_path_buf() })
        }
        Err(e) => Err(ArtifactError::Io { path: path.to_path_buf(), source: e }),
    }
}

fn write_jsonl<T: Serialize>(path: &Path, items: &[T]) -> Result<(), ArtifactError> {
    let wrap = |e: io::Error| ArtifactError::Io { path: path.to_path_buf(), source: e };
    let file = fs::File::create(path).map_err(wrap)?;
    let mut w = BufWriter::new(file);
    for item in items {
        let line = serde_json::to_string(item).expect("records serialize");
        w.write_all(line.as_bytes()).map_err(wrap)?;
        w.write_all(b"\n").map_err(wrap)?;
    }
    w.flush().map_err(wrap)
}

fn read_jsonl<T: DeserializeOwned>(path: &Path, what: &'static str) -> Result<Vec<T>, ArtifactError> {
    let text = read_text(path, what)?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let item: T = serde_json::from_str(line).map_err(|e| ArtifactError::Line {
            path: path.to_path_buf(),
            line: i + 1,
            detail: e.to_string(),
        })?;
        out.push(item);
    }
    Ok(out)
}
