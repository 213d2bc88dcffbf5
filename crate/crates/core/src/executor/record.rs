use std::fs::{File, OpenOptions};
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::fsm::FsmState;
use super::{ExecError, ExecutorConfig};
use crate::evaluation::ProcedureMetrics;
use crate::geometry::{BoundingBox2D, BoxSource};
use crate::phantom::{CutOutcome, PhantomSpec};

pub const EVENTS_FILE: &str = "events.jsonl";
pub const RUN_FILE: &str = "run.json";
pub const METRICS_FILE: &str = "metrics.json";

/// One line of `events.jsonl`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Event {
    pub seq: u64,
    pub t_sim_s: f64,
    pub kind: String,
    pub payload: Value,
}

pub type Listener = Box<dyn FnMut(&Event) + Send>;

/// Append-only event log. Each event is written as a single line and flushed
/// before `emit` returns, so a killed process leaves only whole lines.
pub struct EventLog {
    file: Option<File>,
    events: Vec<Event>,
    listeners: Vec<Listener>,
}

impl EventLog {
    pub fn in_memory() -> Self {
        EventLog { file: None, events: Vec::new(), listeners: Vec::new() }
    }

    pub fn create(path: &Path) -> std::io::Result<Self> {
        let file = OpenOptions::new().create(true).append(true).open(path)?;
        Ok(EventLog { file: Some(file), events: Vec::new(), listeners: Vec::new() })
    }

    pub fn subscribe(&mut self, listener: Listener) {
        self.listeners.push(listener);
    }

    pub fn events(&self) -> &[Event] {
        &self.events
    }

    /// Sequence numbers start at 1.
    pub fn emit(&mut self, t_sim_s: f64, kind: &str, payload: Value) -> Result<u64, ExecError> {
        let event = Event { seq: self.events.len() as u64 + 1, t_sim_s, kind: kind.to_string(), payload };
        if let Some(f) = self.file.as_mut() {
            let mut line = serde_json::to_vec(&event).map_err(|e| ExecError::Io(e.to_string()))?;
            line.push(b'\n');
            f.write_all(&line).and_then(|_| f.flush()).map_err(|e| ExecError::Io(e.to_string()))?;
        }
        for l in &mut self.listeners {
            l(&event);
        }
        let seq = event.seq;
        self.events.push(event);
        Ok(seq)
    }
}

/// Parses `events.jsonl`, ignoring a trailing line without a newline (a
/// write cut short by a crash). Malformed complete lines are an error.
pub fn parse_events(text: &str) -> Result<Vec<Event>, ExecError> {
    let complete = match text.rfind('\n') {
        Some(i) => &text[..=i],
        None => "",
    };
    let mut out = Vec::new();
    for (n, line) in complete.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let e: Event = serde_json::from_str(line)
            .map_err(|err| ExecError::Record(format!("events line {}: {err}", n + 1)))?;
        if e.seq != out.len() as u64 + 1 {
            return Err(ExecError::Record(format!("events line {}: seq {} out of order", n + 1, e.seq)));
        }
        out.push(e);
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    AutoApproved,
    SupervisorApproved,
    SupervisorRejected,
    Replanned,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DecidedBy {
    System,
    Human,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GateDecision {
    /// `None` when the plans could not be compared.
    pub rmse: Option<f64>,
    pub threshold: f64,
    pub verdict: Verdict,
    pub decided_by: DecidedBy,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunStatus {
    Detached,
    BudgetExhausted,
    AbortedBySupervisor,
    Perforated,
    /// Stopped by an error or never finished (e.g. the process died).
    Aborted,
}

impl RunStatus {
    /// Process exit code for the CLI.
    pub fn exit_code(self, perforated: bool) -> i32 {
        match self {
            RunStatus::AbortedBySupervisor => 2,
            _ if perforated || self == RunStatus::Perforated => 3,
            RunStatus::Aborted => 1,
            _ => 0,
        }
    }
}

/// Deterministic summary of one executed cycle. Wall-clock timings and
/// decision metadata live in the event log only.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CycleRecord {
    pub cycle: usize,
    pub cut_index: usize,
    pub snapshot_id: String,
    pub segmentation_id: String,
    pub surface_id: String,
    pub plan_id: String,
    pub predicted_cut_index: usize,
    pub segmentation_source: BoxSource,
    pub boxes: Vec<BoundingBox2D>,
    pub gate: Option<GateDecision>,
    pub cut: CutOutcome,
    pub states: Vec<FsmState>,
    pub peel_station_mm: f64,
    pub removed_total_mm3: f64,
    pub t_start_s: f64,
    pub t_end_s: f64,
}

impl CycleRecord {
    /// Copy with decision metadata cleared, for comparing runs that differ
    /// only in who approved what.
    pub fn without_decision_metadata(&self) -> CycleRecord {
        let mut c = self.clone();
        if let Some(g) = c.gate.as_mut() {
            g.decided_by = DecidedBy::System;
            if g.verdict == Verdict::SupervisorApproved {
                g.verdict = Verdict::AutoApproved;
            }
        }
        c
    }
}

/// Static description of a run, written to `run.json` before the first event.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunManifest {
    pub run_id: String,
    pub phantom: PhantomSpec,
    pub config: ExecutorConfig,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunRecord {
    pub manifest: Option<RunManifest>,
    pub events: Vec<Event>,
    pub cycles: Vec<CycleRecord>,
    pub status: RunStatus,
    pub metrics: Option<ProcedureMetrics>,
}

impl RunRecord {
    /// Rebuilds a record from its events. A log without `run_finished` reads
    /// back as aborted.
    pub fn from_events(manifest: Option<RunManifest>, events: Vec<Event>) -> Result<RunRecord, ExecError> {
        let mut cycles = Vec::new();
        let mut status = RunStatus::Aborted;
        let mut metrics = None;
        for e in &events {
            match e.kind.as_str() {
                "cycle_completed" => cycles.push(
                    serde_json::from_value(e.payload.clone()).map_err(|err| ExecError::Record(err.to_string()))?,
                ),
                "run_finished" => {
                    status = serde_json::from_value(e.payload["status"].clone())
                        .map_err(|err| ExecError::Record(err.to_string()))?;
                    metrics = match &e.payload["metrics"] {
                        Value::Null => None,
                        m => Some(serde_json::from_value(m.clone()).map_err(|err| ExecError::Record(err.to_string()))?),
                    };
                }
                _ => {}
            }
        }
        Ok(RunRecord { manifest, events, cycles, status, metrics })
    }

    pub fn load(dir: &Path) -> Result<RunRecord, ExecError> {
        let io = |e: std::io::Error| ExecError::Io(e.to_string());
        let manifest = match std::fs::read_to_string(dir.join(RUN_FILE)) {
            Ok(text) => Some(serde_json::from_str(&text).map_err(|e| ExecError::Record(e.to_string()))?),
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => None,
            Err(e) => return Err(io(e)),
        };
        let text = std::fs::read_to_string(dir.join(EVENTS_FILE)).map_err(io)?;
        RunRecord::from_events(manifest, parse_events(&text)?)
    }

    pub fn finished(&self) -> bool {
        self.events.iter().any(|e| e.kind == "run_finished")
    }

    /// Complete state trace across cycles.
    pub fn state_trace(&self) -> Vec<FsmState> {
        self.cycles.iter().flat_map(|c| c.states.iter().copied()).collect()
    }

    /// Detector boxes and ground truth per cycle, from `detection` events.
    pub fn detections(&self) -> Vec<(Vec<BoundingBox2D>, Vec<BoundingBox2D>)> {
        self.events
            .iter()
            .filter(|e| e.kind == "detection")
            .filter_map(|e| {
                let boxes = serde_json::from_value(e.payload["boxes"].clone()).ok()?;
                let truth = serde_json::from_value(e.payload["ground_truth"].clone()).ok()?;
                Some((boxes, truth))
            })
            .collect()
    }
}
