//! Append-only segmented log of raw wire frames with receive stamps.
//!
//! Frames are stored verbatim — never re-encoded — so the fusion ladder can
//! be re-run over the same bytes with different configurations. Each segment
//! file is:
//!
//! ```text
//! header   "SHDL" magic, version u8, created_ns u64, scenario hash u64   (21 bytes)
//! records  [rec_len u32][receive_time_ns u64][frame bytes]...
//! footer   sentinel 0xFFFF_FFFF u32, record count u64, rolling CRC u32   (16 bytes)
//! ```
//!
//! All integers little-endian. `rec_len` counts the receive stamp plus the
//! frame, so a record occupies `4 + rec_len` bytes. The rolling CRC covers
//! every record byte between header and footer. The sentinel can never be a
//! real `rec_len` (frames are bounded far below it), so a reader walking
//! records recognizes the footer unambiguously.
//!
//! Segment files are named `segment-<created_ns>[-<n>].shdl`; the `-<n>`
//! suffix disambiguates rotations within one nanosecond. Creation stamps
//! come from record receive times, not the wall clock, so a re-run over the
//! same input produces byte-identical files.

use std::fs::{File, OpenOptions};
use std::io::{Read as _, Write as _};
use std::path::{Path, PathBuf};

use serde::Serialize;
use thiserror::Error;

use crate::crc::Crc32;
use crate::wire;

pub const SEGMENT_MAGIC: [u8; 4] = *b"SHDL";
pub const SEGMENT_VERSION: u8 = 1;
pub const SEGMENT_HEADER_LEN: u64 = 21;
pub const SEGMENT_FOOTER_LEN: u64 = 16;
pub const FOOTER_SENTINEL: u32 = 0xFFFF_FFFF;

const MIN_REC_LEN: u32 = 8 + (wire::HEADER_LEN + wire::TRAILER_LEN) as u32;
const MAX_REC_LEN: u32 =
    8 + (wire::HEADER_LEN + wire::MAX_PAYLOAD + wire::TRAILER_LEN) as u32;

#[derive(Debug, Error)]
pub enum StorageError {
    #[error("storage io at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("refusing to store an undecodable frame: {0}")]
    BadFrame(wire::DecodeError),
    #[error("receive times must be non-decreasing within a segment ({prev} then {got})")]
    TimeRegression { prev: u64, got: u64 },
    #[error("{path} is not a segment file: {reason}")]
    NotASegment { path: PathBuf, reason: String },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> StorageError + '_ {
    move |source| StorageError::Io { path: path.to_path_buf(), source }
}

// ---------------------------------------------------------------------------
// Writing

#[derive(Debug, Clone, Copy)]
pub struct RotatePolicy {
    pub max_bytes: u64,
    pub max_duration_ns: u64,
}

impl Default for RotatePolicy {
    fn default() -> Self {
        // Desk-scale defaults: whichever limit trips first.
        RotatePolicy { max_bytes: 256 << 20, max_duration_ns: 3_600 * 1_000_000_000 }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AppendInfo {
    pub segment: String,
    /// Byte offset of the record (its length prefix) within the segment.
    pub offset: u64,
}

#[derive(Debug)]
struct ActiveSegment {
    file: File,
    name: String,
    created_ns: u64,
    bytes: u64,
    records: u64,
    last_receive_ns: u64,
    crc: Crc32,
}

/// Single-writer appender over a directory of segments.
#[derive(Debug)]
pub struct LogWriter {
    dir: PathBuf,
    policy: RotatePolicy,
    scenario_hash: u64,
    active: Option<ActiveSegment>,
    sealed: Vec<PathBuf>,
}

impl LogWriter {
    pub fn create(
        dir: &Path,
        scenario_hash: u64,
        policy: RotatePolicy,
    ) -> Result<LogWriter, StorageError> {
        std::fs::create_dir_all(dir).map_err(io_err(dir))?;
        Ok(LogWriter {
            dir: dir.to_path_buf(),
            policy,
            scenario_hash,
            active: None,
            sealed: Vec::new(),
        })
    }

    fn open_segment(&mut self, created_ns: u64) -> Result<(), StorageError> {
        let mut name = format!("segment-{created_ns}.shdl");
        let mut n = 0;
        while self.dir.join(&name).exists() {
            n += 1;
            name = format!("segment-{created_ns}-{n}.shdl");
        }
        let path = self.dir.join(&name);
        let mut file = OpenOptions::new()
            .write(true)
            .create_new(true)
            .open(&path)
            .map_err(io_err(&path))?;
        let mut header = Vec::with_capacity(SEGMENT_HEADER_LEN as usize);
        header.extend_from_slice(&SEGMENT_MAGIC);
        header.push(SEGMENT_VERSION);
        header.extend_from_slice(&created_ns.to_le_bytes());
        header.extend_from_slice(&self.scenario_hash.to_le_bytes());
        file.write_all(&header).map_err(io_err(&path))?;
        self.active = Some(ActiveSegment {
            file,
            name,
            created_ns,
            bytes: SEGMENT_HEADER_LEN,
            records: 0,
            last_receive_ns: 0,
            crc: Crc32::new(),
        });
        Ok(())
    }

    /// Appends one frame. Rotation happens here when the active segment
    /// would exceed the policy.
    pub fn append(
        &mut self,
        receive_time_ns: u64,
        frame: &[u8],
    ) -> Result<AppendInfo, StorageError> {
        // Raw bytes are the archive of record; refuse anything unreadable.
        wire::Frame::decode_exact(frame).map_err(StorageError::BadFrame)?;

        let rec_len = 8 + frame.len() as u64;
        if let Some(active) = &self.active {
            let over_bytes = active.records > 0
                && active.bytes + 4 + rec_len + SEGMENT_FOOTER_LEN > self.policy.max_bytes;
            let over_time = active.records > 0
                && receive_time_ns.saturating_sub(active.created_ns)
                    >= self.policy.max_duration_ns;
            if over_bytes || over_time {
                self.rotate()?;
            }
        }
        if self.active.is_none() {
            self.open_segment(receive_time_ns)?;
        }
        let active = self.active.as_mut().expect("segment just opened");
        if active.records > 0 && receive_time_ns < active.last_receive_ns {
            return Err(StorageError::TimeRegression {
                prev: active.last_receive_ns,
                got: receive_time_ns,
            });
        }

        let mut buf = Vec::with_capacity(4 + rec_len as usize);
        buf.extend_from_slice(&(rec_len as u32).to_le_bytes());
        buf.extend_from_slice(&receive_time_ns.to_le_bytes());
        buf.extend_from_slice(frame);
        let path = self.dir.join(&active.name);
        active.file.write_all(&buf).map_err(io_err(&path))?;
        active.file.flush().map_err(io_err(&path))?;
        let offset = active.bytes;
        active.crc.update(&buf);
        active.bytes += buf.len() as u64;
        active.records += 1;
        active.last_receive_ns = receive_time_ns;
        Ok(AppendInfo { segment: active.name.clone(), offset })
    }

    /// Seals the active segment; the next append opens a fresh one.
    pub fn rotate(&mut self) -> Result<(), StorageError> {
        if let Some(active) = self.active.take() {
            let path = self.dir.join(&active.name);
            seal(active).map_err(io_err(&path))?;
            self.sealed.push(path);
        }
        Ok(())
    }

    /// Seals and returns every segment written, in creation order.
    pub fn finish(mut self) -> Result<Vec<PathBuf>, StorageError> {
        self.rotate()?;
        Ok(std::mem::take(&mut self.sealed))
    }
}

fn seal(mut active: ActiveSegment) -> std::io::Result<()> {
    let mut footer = Vec::with_capacity(SEGMENT_FOOTER_LEN as usize);
    footer.extend_from_slice(&FOOTER_SENTINEL.to_le_bytes());
    footer.extend_from_slice(&active.records.to_le_bytes());
    footer.extend_from_slice(&active.crc.finalize().to_le_bytes());
    active.file.write_all(&footer)?;
    active.file.flush()
}

// ---------------------------------------------------------------------------
// Reading

#[derive(Debug, Clone, PartialEq)]
pub struct ReadRecord {
    pub segment: String,
    pub offset: u64,
    pub receive_time_ns: u64,
    pub frame: Vec<u8>,
}

#[derive(Debug, Clone, Default, Serialize)]
pub struct SegmentReport {
    pub segment: String,
    pub created_ns: u64,
    pub scenario_hash: u64,
    pub sealed: bool,
    pub records: u64,
    /// Records whose frame bytes fail their own checksum.
    pub frame_crc_failures: u64,
    /// Sealed segment whose footer count or rolling CRC disagrees.
    pub footer_mismatch: bool,
    /// Trailing bytes that do not form a whole record.
    pub torn_tail_bytes: u64,
}

#[derive(Debug, Clone, Default, Serialize)]
pub struct IntegrityReport {
    pub segments: Vec<SegmentReport>,
    pub unreadable: Vec<String>,
    pub records: u64,
    pub frame_crc_failures: u64,
    pub footer_mismatches: u64,
    pub torn_tails: u64,
}

impl IntegrityReport {
    pub fn clean(&self) -> bool {
        self.unreadable.is_empty()
            && self.frame_crc_failures == 0
            && self.footer_mismatches == 0
            && self.torn_tails == 0
    }

    fn absorb(&mut self, seg: SegmentReport) {
        self.records += seg.records;
        self.frame_crc_failures += seg.frame_crc_failures;
        if seg.footer_mismatch {
            self.footer_mismatches += 1;
        }
        if seg.torn_tail_bytes > 0 {
            self.torn_tails += 1;
        }
        self.segments.push(seg);
    }
}

/// Segment files under `dir`, ordered by (created_ns, rotation suffix).
pub fn segment_paths(dir: &Path) -> Result<Vec<PathBuf>, StorageError> {
    let mut keyed: Vec<(u64, u32, PathBuf)> = Vec::new();
    for entry in std::fs::read_dir(dir).map_err(io_err(dir))? {
        let entry = entry.map_err(io_err(dir))?;
        let path = entry.path();
        let name = entry.file_name();
        let Some(name) = name.to_str() else { continue };
        let Some(stem) = name.strip_prefix("segment-").and_then(|s| s.strip_suffix(".shdl"))
        else {
            continue;
        };
        let (epoch, seq) = match stem.split_once('-') {
            Some((e, s)) => (e.parse::<u64>().ok(), s.parse::<u32>().ok()),
            None => (stem.parse::<u64>().ok(), Some(0)),
        };
        if let (Some(epoch), Some(seq)) = (epoch, seq) {
            keyed.push((epoch, seq, path));
        }
    }
    keyed.sort();
    Ok(keyed.into_iter().map(|(_, _, p)| p).collect())
}

struct ParsedSegment {
    report: SegmentReport,
    records: Vec<ReadRecord>,
    /// Offset just past the last whole record — where recovery truncates.
    whole_end: u64,
}

fn parse_segment(path: &Path) -> Result<ParsedSegment, StorageError> {
    let name = path
        .file_name()
        .and_then(|n| n.to_str())
        .unwrap_or_default()
        .to_string();
    let mut bytes = Vec::new();
    File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(io_err(path))?;
    let not_segment = |reason: &str| StorageError::NotASegment {
        path: path.to_path_buf(),
        reason: reason.to_string(),
    };
    if bytes.len() < SEGMENT_HEADER_LEN as usize {
        return Err(not_segment("shorter than a header"));
    }
    if bytes[..4] != SEGMENT_MAGIC {
        return Err(not_segment("bad magic"));
    }
    if bytes[4] != SEGMENT_VERSION {
        return Err(not_segment("unsupported version"));
    }
    let created_ns = u64::from_le_bytes(bytes[5..13].try_into().unwrap());
    let scenario_hash = u64::from_le_bytes(bytes[13..21].try_into().unwrap());
    let mut report = SegmentReport {
        segment: name.clone(),
        created_ns,
        scenario_hash,
        ..SegmentReport::default()
    };
    let mut records = Vec::new();
    let mut crc = Crc32::new();
    let mut pos = SEGMENT_HEADER_LEN as usize;
    let mut whole_end = pos as u64;
    loop {
        let remaining = bytes.len() - pos;
        if remaining == 0 {
            break; // unsealed but whole
        }
        if remaining < 4 {
            report.torn_tail_bytes = remaining as u64;
            break;
        }
        let rec_len = u32::from_le_bytes(bytes[pos..pos + 4].try_into().unwrap());
        if rec_len == FOOTER_SENTINEL {
            if remaining < SEGMENT_FOOTER_LEN as usize {
                report.torn_tail_bytes = remaining as u64;
                break;
            }
            let count = u64::from_le_bytes(bytes[pos + 4..pos + 12].try_into().unwrap());
            let footer_crc = u32::from_le_bytes(bytes[pos + 12..pos + 16].try_into().unwrap());
            report.sealed = true;
            report.footer_mismatch =
                count != report.records || footer_crc != crc.finalize();
            if remaining > SEGMENT_FOOTER_LEN as usize {
                // Bytes after the footer can only be debris.
                report.torn_tail_bytes = (remaining - SEGMENT_FOOTER_LEN as usize) as u64;
            }
            whole_end = (pos + SEGMENT_FOOTER_LEN as usize) as u64;
            break;
        }
        if !(MIN_REC_LEN..=MAX_REC_LEN).contains(&rec_len) {
            // Garbage length: everything from here on is unwalkable.
            report.torn_tail_bytes = remaining as u64;
            break;
        }
        let total = 4 + rec_len as usize;
        if remaining < total {
            report.torn_tail_bytes = remaining as u64;
            break;
        }
        let body = &bytes[pos..pos + total];
        crc.update(body);
        let receive_time_ns = u64::from_le_bytes(body[4..12].try_into().unwrap());
        let frame = &body[12..];
        if wire::Frame::decode_exact(frame).is_ok() {
            records.push(ReadRecord {
                segment: name.clone(),
                offset: pos as u64,
                receive_time_ns,
                frame: frame.to_vec(),
            });
        } else {
            report.frame_crc_failures += 1;
        }
        report.records += 1;
        pos += total;
        whole_end = pos as u64;
    }
    Ok(ParsedSegment { report, records, whole_end })
}

#[derive(Debug, Default)]
pub struct ReadOutcome {
    pub records: Vec<ReadRecord>,
    pub report: IntegrityReport,
}

/// Reads every decodable record with `receive_time_ns` in `[from, to)`, in
/// append order. Corrupt records and segments are reported, not fatal.
pub fn iterate(dir: &Path, from_ns: u64, to_ns: u64) -> Result<ReadOutcome, StorageError> {
    let mut out = ReadOutcome::default();
    for path in segment_paths(dir)? {
        match parse_segment(&path) {
            Ok(parsed) => {
                out.report.absorb(parsed.report);
                out.records.extend(
                    parsed
                        .records
                        .into_iter()
                        .filter(|r| r.receive_time_ns >= from_ns && r.receive_time_ns < to_ns),
                );
            }
            Err(e) => out.report.unreadable.push(e.to_string()),
        }
    }
    Ok(out)
}

pub fn iterate_all(dir: &Path) -> Result<ReadOutcome, StorageError> {
    iterate(dir, 0, u64::MAX)
}

/// Pure read-only health check of every segment under `dir`.
pub fn integrity_scan(dir: &Path) -> Result<IntegrityReport, StorageError> {
    Ok(iterate_all(dir)?.report)
}

#[derive(Debug, Clone, Default, Serialize)]
pub struct RecoveryReport {
    /// Segments whose torn tails were truncated.
    pub truncated: Vec<String>,
    /// Unsealed segments that received a footer.
    pub sealed: Vec<String>,
}

/// Crash recovery: truncate torn tails and seal any unsealed segment, so
/// the directory scans clean afterwards. Sealed-segment content is never
/// modified (footer mismatches and in-record corruption stay visible).
pub fn recover(dir: &Path) -> Result<RecoveryReport, StorageError> {
    let mut report = RecoveryReport::default();
    for path in segment_paths(dir)? {
        let parsed = match parse_segment(&path) {
            Ok(p) => p,
            Err(_) => continue,
        };
        let name = parsed.report.segment.clone();
        if parsed.report.sealed && parsed.report.torn_tail_bytes == 0 {
            continue;
        }
        if parsed.report.torn_tail_bytes > 0 {
            let file = OpenOptions::new().write(true).open(&path).map_err(io_err(&path))?;
            file.set_len(parsed.whole_end).map_err(io_err(&path))?;
            report.truncated.push(name.clone());
        }
        if !parsed.report.sealed {
            // Re-roll the CRC over the surviving records and stamp a footer.
            let mut crc = Crc32::new();
            let mut bytes = Vec::new();
            File::open(&path)
                .and_then(|mut f| f.read_to_end(&mut bytes))
                .map_err(io_err(&path))?;
            crc.update(&bytes[SEGMENT_HEADER_LEN as usize..]);
            let mut count = 0u64;
            let mut pos = SEGMENT_HEADER_LEN as usize;
            while pos < bytes.len() {
                let rec_len =
                    u32::from_le_bytes(bytes[pos..pos + 4].try_into().unwrap()) as usize;
                pos += 4 + rec_len;
                count += 1;
            }
            let mut file =
                OpenOptions::new().append(true).open(&path).map_err(io_err(&path))?;
            let mut footer = Vec::with_capacity(SEGMENT_FOOTER_LEN as usize);
            footer.extend_from_slice(&FOOTER_SENTINEL.to_le_bytes());
            footer.extend_from_slice(&count.to_le_bytes());
            footer.extend_from_slice(&crc.finalize().to_le_bytes());
            file.write_all(&footer).map_err(io_err(&path))?;
            file.flush().map_err(io_err(&path))?;
            report.sealed.push(name);
        }
    }
    Ok(report)
}
