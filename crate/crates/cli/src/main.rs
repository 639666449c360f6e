//! Pipeline orchestration binary. Subcommands cover the whole loop: script a
//! home and simulate its sensors, move frames over TCP, run the fusion
//! ladder over a stored log, score the result against exported ground truth,
//! and render twin snapshots.
//!
//! Exit codes: 0 success, 2 input error, 3 runtime error, 4 validation
//! failure.

mod levels;

use std::fs;
use std::net::{SocketAddr, ToSocketAddrs};
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use clap::{Parser, Subcommand};

use shdf_core::artifacts::{ArtifactError, FusedDir, RunMeta};
use shdf_core::config::{self, ConfigError, LoadedConfig};
use shdf_core::net::{start_collector, CollectorConfig, FrameSender};
use shdf_core::pipeline::{
    read_log, replay_sessions, run_level1, run_level2, run_level3, sleep_spans, PipelineError,
    TwinSource,
};
use shdf_core::report::{self, EvalInputs};
use shdf_core::scenario::{parse_scenario, ScenarioError};
use shdf_core::session::LivenessConfig;
use shdf_core::sim;
use shdf_core::storage::{self, LogWriter, RotatePolicy};
use shdf_core::time::NS_PER_SEC;

const EXIT_INPUT: i32 = 2;
const EXIT_RUNTIME: i32 = 3;
const EXIT_VALIDATION: i32 = 4;

/// Ground-truth export grid.
const TRUTH_STEP_NS: i64 = NS_PER_SEC / 10;

#[derive(Parser)]
#[command(name = "shdf", version, about = "Simulated smart-home sensing and hierarchical fusion")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a scripted scenario; write sensor frames to a log directory or
    /// stream them to a collector, plus a ground-truth export
    Simulate {
        /// Scenario script (shs/1 TOML)
        #[arg(long)]
        scenario: PathBuf,
        /// Override the scenario's RNG seed
        #[arg(long)]
        seed: Option<u64>,
        /// Output directory (log segments + truth.jsonl)
        #[arg(long)]
        out: PathBuf,
        /// Pace emission at wall-clock speed
        #[arg(long, conflicts_with = "fast")]
        realtime: bool,
        /// Emit as fast as possible (default)
        #[arg(long)]
        fast: bool,
        /// Stream frames to a collector at this address instead of writing
        /// segments locally
        #[arg(long)]
        to: Option<String>,
    },
    /// Listen for sensor connections and store everything as log segments
    Collect {
        /// Bind address, e.g. 127.0.0.1:7070
        #[arg(long)]
        listen: String,
        /// Segment output directory
        #[arg(long)]
        out: PathBuf,
        /// Stop after this many seconds (otherwise runs until Ctrl-C)
        #[arg(long)]
        duration: Option<f64>,
    },
    /// Re-emit a stored log over TCP, pacing by stored receive times
    Replay {
        /// Log directory to read
        #[arg(long)]
        log: PathBuf,
        /// Pacing multiple (2 = twice as fast; 0 = no pacing)
        #[arg(long, default_value_t = 1.0)]
        speed: f64,
        /// Collector address to stream to
        #[arg(long)]
        to: String,
    },
    /// Run the fusion ladder over a stored log, persisting each level
    Fuse {
        /// Log directory (needed when the range includes level 0 or 1)
        #[arg(long)]
        log: PathBuf,
        /// Fusion config (shf/1 TOML); defaults are used when omitted
        #[arg(long)]
        config: Option<PathBuf>,
        /// Inclusive level range, e.g. 0..3, 0..1 or a single level 2.
        /// Levels above the range start read their input from --out
        #[arg(long, default_value = "0..3")]
        levels: String,
        /// Run directory to write artifacts into
        #[arg(long)]
        out: PathBuf,
    },
    /// Score a fused run against a ground-truth export
    Eval {
        /// Fused run directory
        #[arg(long)]
        fused: PathBuf,
        /// Ground-truth JSONL from simulate
        #[arg(long)]
        truth: PathBuf,
        /// Where to write the she/1 report JSON
        #[arg(long)]
        report: PathBuf,
        /// Reference decision log; mismatches exit with code 4
        #[arg(long)]
        golden: Option<PathBuf>,
    },
    /// Emit sht/1 twin snapshots from a fused run
    Twin {
        /// Fused run directory
        #[arg(long)]
        fused: PathBuf,
        /// Snapshots per second
        #[arg(long, default_value_t = 1.0)]
        cadence: f64,
        /// Snapshot stream output file (one JSON snapshot per line)
        #[arg(long)]
        out: PathBuf,
    },
}

struct Failure {
    code: i32,
    msg: String,
}

fn fail(code: i32, msg: impl std::fmt::Display) -> Failure {
    Failure { code, msg: msg.to_string() }
}

fn main() {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Simulate { scenario, seed, out, realtime, fast: _, to } => {
            cmd_simulate(&scenario, seed, &out, realtime, to.as_deref())
        }
        Command::Collect { listen, out, duration } => cmd_collect(&listen, &out, duration),
        Command::Replay { log, speed, to } => cmd_replay(&log, speed, &to),
        Command::Fuse { log, config, levels, out } => {
            cmd_fuse(&log, config.as_deref(), &levels, &out)
        }
        Command::Eval { fused, truth, report, golden } => {
            cmd_eval(&fused, &truth, &report, golden.as_deref())
        }
        Command::Twin { fused, cadence, out } => cmd_twin(&fused, cadence, &out),
    };
    match result {
        Ok(()) => {}
        Err(f) => {
            eprintln!("error: {}", f.msg);
            std::process::exit(f.code);
        }
    }
}

// ---------------------------------------------------------------------------
// Error mapping

fn scenario_err(e: ScenarioError) -> Failure {
    match e {
        ScenarioError::Validation(_) => fail(EXIT_VALIDATION, e),
        _ => fail(EXIT_INPUT, e),
    }
}

fn config_err(e: ConfigError) -> Failure {
    match e {
        ConfigError::Io { .. } | ConfigError::Parse(_) => fail(EXIT_INPUT, e),
        _ => fail(EXIT_VALIDATION, e),
    }
}

fn pipeline_err(e: PipelineError) -> Failure {
    match e {
        PipelineError::EmptyLog => fail(EXIT_INPUT, e),
        _ => fail(EXIT_RUNTIME, e),
    }
}

fn artifact_err(e: ArtifactError) -> Failure {
    match e {
        ArtifactError::Missing { .. } => fail(EXIT_INPUT, e),
        _ => fail(EXIT_RUNTIME, e),
    }
}

fn require_dir(path: &Path, what: &str) -> Result<(), Failure> {
    if path.is_dir() {
        Ok(())
    } else {
        Err(fail(EXIT_INPUT, format!("{what} {} is not a directory", path.display())))
    }
}

fn resolve(addr: &str) -> Result<SocketAddr, Failure> {
    addr.to_socket_addrs()
        .map_err(|e| fail(EXIT_INPUT, format!("address {addr:?}: {e}")))?
        .next()
        .ok_or_else(|| fail(EXIT_INPUT, format!("address {addr:?} resolves to nothing")))
}

// ---------------------------------------------------------------------------
// simulate

fn cmd_simulate(
    scenario_path: &Path,
    seed: Option<u64>,
    out: &Path,
    realtime: bool,
    to: Option<&str>,
) -> Result<(), Failure> {
    let text = fs::read_to_string(scenario_path)
        .map_err(|e| fail(EXIT_INPUT, format!("{}: {e}", scenario_path.display())))?;
    let mut scenario = parse_scenario(&text).map_err(scenario_err)?;
    if let Some(seed) = seed {
        scenario.seed = seed;
    }
    fs::create_dir_all(out).map_err(|e| fail(EXIT_RUNTIME, e))?;

    let truth = sim::truth_series(&scenario, TRUTH_STEP_NS);
    fs::write(out.join("truth.jsonl"), report::truth_to_jsonl(&truth))
        .map_err(|e| fail(EXIT_RUNTIME, e))?;

    let run = sim::simulate(&scenario);
    let started = Instant::now();
    match to {
        Some(addr) => {
            let addr = resolve(addr)?;
            let mut sender = FrameSender::connect(addr).map_err(|e| fail(EXIT_RUNTIME, e))?;
            for a in &run.arrivals {
                pace(realtime, started, a.receive_ns);
                sender.send(&a.frame).map_err(|e| fail(EXIT_RUNTIME, e))?;
            }
            sender.finish().map_err(|e| fail(EXIT_RUNTIME, e))?;
        }
        None => {
            let mut writer = LogWriter::create(out, scenario.hash64(), RotatePolicy::default())
                .map_err(|e| fail(EXIT_RUNTIME, e))?;
            for a in &run.arrivals {
                pace(realtime, started, a.receive_ns);
                let bytes = a.frame.encode().map_err(|e| fail(EXIT_RUNTIME, e))?;
                writer.append(a.receive_ns, &bytes).map_err(|e| fail(EXIT_RUNTIME, e))?;
            }
            writer.finish().map_err(|e| fail(EXIT_RUNTIME, e))?;
        }
    }

    let emitted: u64 = run.stats.values().map(|s| s.emitted).sum();
    let lost: u64 = run.stats.values().map(|s| s.lost_in_transit).sum();
    println!(
        "{} frames ({} lost in transit), {} truth samples → {}",
        run.arrivals.len(),
        lost.min(emitted),
        truth.len(),
        out.display()
    );
    Ok(())
}

/// Realtime mode sleeps until the frame's receive instant, measured from run
/// start; fast mode returns immediately.
fn pace(realtime: bool, start: Instant, t_ns: u64) {
    if !realtime {
        return;
    }
    let target = Duration::from_nanos(t_ns);
    loop {
        let elapsed = start.elapsed();
        if elapsed >= target {
            return;
        }
        std::thread::sleep(target - elapsed);
    }
}

// ---------------------------------------------------------------------------
// collect / replay

fn cmd_collect(listen: &str, out: &Path, duration: Option<f64>) -> Result<(), Failure> {
    fs::create_dir_all(out).map_err(|e| fail(EXIT_RUNTIME, e))?;
    let config = CollectorConfig::new(out, 0);
    let handle = start_collector(listen, config)
        .map_err(|e| fail(EXIT_INPUT, format!("cannot listen on {listen:?}: {e}")))?;
    eprintln!("collecting on {} → {}", handle.addr, out.display());

    match duration {
        Some(secs) => std::thread::sleep(Duration::from_secs_f64(secs.max(0.0))),
        None => {
            let (tx, rx) = std::sync::mpsc::channel::<()>();
            ctrlc::set_handler(move || {
                let _ = tx.send(());
            })
            .map_err(|e| fail(EXIT_RUNTIME, e))?;
            let _ = rx.recv();
            eprintln!("interrupted; flushing");
        }
    }

    let report = handle.shutdown().map_err(|e| fail(EXIT_RUNTIME, e))?;
    let summary = serde_json::json!({
        "frames_received": report.frames_received,
        "counters": report.counters,
        "gap_reports": report.gap_reports.len(),
        "poisoned_connections": report.poisoned_connections,
        "segments": report.segments,
    });
    println!("{}", serde_json::to_string_pretty(&summary).expect("summary serializes"));
    Ok(())
}

fn cmd_replay(log: &Path, speed: f64, to: &str) -> Result<(), Failure> {
    if !speed.is_finite() || speed < 0.0 {
        return Err(fail(EXIT_INPUT, format!("speed must be finite and >= 0 (got {speed})")));
    }
    require_dir(log, "log directory")?;
    let addr = resolve(to)?;
    let outcome = storage::iterate_all(log).map_err(|e| fail(EXIT_RUNTIME, e))?;
    let report = &outcome.report;
    if !report.clean() {
        eprintln!(
            "warning: skipped {} unreadable segment(s), {} bad frame(s), {} torn tail(s)",
            report.unreadable.len(),
            report.frame_crc_failures,
            report.torn_tails
        );
    }
    let total = outcome.records.len();
    let sent = shdf_core::net::replay_frames(
        addr,
        outcome.records.into_iter().map(|r| (r.receive_time_ns, r.frame)),
        speed,
    )
    .map_err(|e| fail(EXIT_RUNTIME, e))?;
    println!("replayed {sent}/{total} frames to {addr} at {speed}x");
    Ok(())
}

// ---------------------------------------------------------------------------
// fuse

fn cmd_fuse(
    log_dir: &Path,
    config_path: Option<&Path>,
    levels_spec: &str,
    out: &Path,
) -> Result<(), Failure> {
    let (lo, hi) = levels::parse(levels_spec).map_err(|e| fail(EXIT_INPUT, e))?;
    let cfg = match config_path {
        Some(p) => config::load_config(p).map_err(config_err)?,
        None => LoadedConfig::default_loaded(),
    };
    let dir = FusedDir::new(out);

    // Levels 0 and 1 read raw frames; higher levels run purely from the
    // previous level's persisted output.
    let log = if lo <= 1 {
        require_dir(log_dir, "log directory")?;
        Some(read_log(log_dir).map_err(pipeline_err)?)
    } else {
        None
    };

    let mut meta;
    let mut aligned = Vec::new();
    if lo == 0 {
        let log = log.as_ref().expect("level 0 loads the log");
        let l0 = shdf_core::pipeline::run_level0(log, &cfg).map_err(pipeline_err)?;
        let sessions = replay_sessions(log, LivenessConfig::default());
        let run_id = format!("{}-{}", &log.digest[..12], &cfg.hash[..12]);
        meta = RunMeta::from_level0(&run_id, &cfg.hash, log.start_of_day_s, log.room.clone(), &l0);
        dir.write_aligned(&l0.records).map_err(artifact_err)?;
        dir.write_sessions(&sessions).map_err(artifact_err)?;
        println!("level 0: {} aligned records", l0.records.len());
        aligned = l0.records;
    } else {
        meta = dir.read_meta().map_err(artifact_err)?;
        meta.config_hash = cfg.hash.clone();
        if lo == 1 {
            aligned = dir.read_aligned().map_err(artifact_err)?;
        }
    }

    let run1 = lo <= 1 && hi >= 1;
    let run2 = lo <= 2 && hi >= 2;
    let mut windows = None;
    if run1 {
        let log = log.as_ref().expect("level 1 reads payload bytes");
        let passes = if run2 {
            cfg.config.passes.max(1)
        } else {
            // Feedback passes need level-2 labels; without level 2 in range
            // there is nothing to feed back.
            if cfg.config.passes > 1 {
                eprintln!("note: passes>1 requires level 2 in the range; running one pass");
            }
            1
        };
        let mut keep = Vec::new();
        let mut pass_stats = Vec::new();
        let mut kept_records = Vec::new();
        for pass in 0..passes {
            let l1 = run_level1(log, &aligned, &cfg, &keep);
            pass_stats.push(l1.stats);
            meta.payload_errors = l1.payload_errors;
            if run2 {
                let l2 = run_level2(&l1.records, &cfg, meta.start_of_day_s);
                if pass + 1 < passes {
                    keep = sleep_spans(&l2.windows);
                }
                windows = Some(l2.windows);
            }
            kept_records = l1.records;
        }
        meta.pass_stats = pass_stats;
        dir.write_level1(&kept_records).map_err(artifact_err)?;
        println!("level 1: {} kept records ({} passes)", kept_records.len(), passes);
        if let Some(w) = &windows {
            dir.write_windows(w).map_err(artifact_err)?;
            println!("level 2: {} windows", w.len());
        }
    } else if run2 {
        let records = dir.read_level1().map_err(artifact_err)?;
        let l2 = run_level2(&records, &cfg, meta.start_of_day_s);
        dir.write_windows(&l2.windows).map_err(artifact_err)?;
        println!("level 2: {} windows", l2.windows.len());
        windows = Some(l2.windows);
    }

    if hi >= 3 {
        let windows = match windows {
            Some(w) => w,
            None => dir.read_windows().map_err(artifact_err)?,
        };
        let l3 = run_level3(&windows, &cfg);
        dir.write_decisions(&l3.decisions).map_err(artifact_err)?;
        println!("level 3: {} decision records", l3.decisions.len());
    }

    dir.write_meta(&meta).map_err(artifact_err)?;
    dir.remove_above(hi).map_err(artifact_err)?;
    println!("run {} (config {}) → {}", meta.run_id, &cfg.hash[..12], out.display());
    Ok(())
}

// ---------------------------------------------------------------------------
// eval / twin

fn cmd_eval(
    fused: &Path,
    truth_path: &Path,
    report_path: &Path,
    golden: Option<&Path>,
) -> Result<(), Failure> {
    let dir = FusedDir::new(fused);
    let meta = dir.read_meta().map_err(artifact_err)?;
    let aligned = dir.read_aligned().map_err(artifact_err)?;
    let kept = dir.read_level1().map_err(artifact_err)?;
    let windows = dir.read_windows().map_err(artifact_err)?;
    let decisions_text = dir.read_decisions_text().map_err(artifact_err)?;
    let sessions = dir.read_sessions().map_err(artifact_err)?;

    let truth_text = fs::read_to_string(truth_path)
        .map_err(|e| fail(EXIT_INPUT, format!("{}: {e}", truth_path.display())))?;
    let truth = report::truth_from_jsonl(&truth_text).map_err(|e| fail(EXIT_INPUT, e))?;
    let golden_text = match golden {
        Some(p) => Some(
            fs::read_to_string(p)
                .map_err(|e| fail(EXIT_INPUT, format!("{}: {e}", p.display())))?,
        ),
        None => None,
    };

    let inputs = EvalInputs {
        coverage: &meta.coverage,
        aligned: &aligned,
        kept: &kept,
        windows: &windows,
        decisions_text: &decisions_text,
        golden_text: golden_text.as_deref(),
        counters: sessions.counters,
    };
    let rep = report::evaluate(&inputs, &truth);
    fs::write(report_path, report::report_to_json(&rep)).map_err(|e| fail(EXIT_RUNTIME, e))?;

    let f = &rep.filtering;
    println!(
        "filtering: precision {:.3} recall {:.3}, dropped {:.1}% (truth empty {:.1}%), {} ambiguous",
        f.drop_precision,
        f.drop_recall,
        100.0 * f.observed_drop_fraction,
        100.0 * f.truth_empty_fraction,
        f.ambiguous
    );
    println!(
        "activity: {:.3} ({}/{} windows); emotion: {:.3} ({}/{})",
        rep.activity.accuracy,
        rep.activity.correct,
        rep.activity.scored,
        rep.emotion.accuracy,
        rep.emotion.correct,
        rep.emotion.scored
    );
    println!("decisions: {} records, {} commands", rep.decisions.records, rep.decisions.commands);
    println!("report → {}", report_path.display());

    if let Some(diff) = &rep.decisions.golden {
        if !diff.matches {
            let at = diff
                .first_divergence
                .map(|n| format!("first divergence at line {n}"))
                .unwrap_or_default();
            return Err(fail(
                EXIT_VALIDATION,
                format!(
                    "decision log diverges from golden ({} vs {} lines; {at})",
                    diff.our_lines, diff.golden_lines
                ),
            ));
        }
        println!("golden: match");
    }
    Ok(())
}

fn cmd_twin(fused: &Path, cadence: f64, out: &Path) -> Result<(), Failure> {
    if !cadence.is_finite() || cadence <= 0.0 {
        return Err(fail(EXIT_INPUT, format!("cadence must be positive (got {cadence})")));
    }
    let dir = FusedDir::new(fused);
    let meta = dir.read_meta().map_err(artifact_err)?;
    let level1 = dir.read_level1().map_err(artifact_err)?;
    let windows = dir.read_windows().map_err(artifact_err)?;
    let sessions = dir.read_sessions().map_err(artifact_err)?;

    let src = TwinSource {
        run_id: &meta.run_id,
        config_hash: &meta.config_hash,
        room: meta.room.as_ref(),
        end_ns: meta.end_ns,
        level1: &level1,
        windows: &windows,
        sessions: &sessions,
    };
    let snaps =
        shdf_core::pipeline::twin_from_parts(&src, cadence).map_err(|e| fail(EXIT_RUNTIME, e))?;
    let mut text = String::new();
    for s in &snaps {
        text.push_str(&s.serialize());
        text.push('\n');
    }
    fs::write(out, text).map_err(|e| fail(EXIT_RUNTIME, e))?;
    println!("{} snapshots at {cadence} Hz → {}", snaps.len(), out.display());
    Ok(())
}
