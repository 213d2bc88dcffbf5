//! Supervised resection workflow: image, segment, fit, plan, gate, cut and
//! retract, cycle after cycle until the tumor detaches or the cut budget runs
//! out.

mod fsm;
mod record;
mod supervisor;

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use thiserror::Error;

pub use fsm::{fsm_step, is_regular_trace, FsmEvent, FsmState, ProtocolError};
pub use record::{
    parse_events, CycleRecord, DecidedBy, Event, EventLog, GateDecision, Listener, RunManifest, RunRecord,
    RunStatus, Verdict, EVENTS_FILE, METRICS_FILE, RUN_FILE,
};
pub use supervisor::{
    AutoApprove, ChannelSupervisor, Decision, DecisionMessage, PendingRequest, RejectAll, ReplaySupervisor,
    RequestKind, RequestPayload, Supervisor, TerminalSupervisor, VerdictKind,
};

use crate::evaluation::{compute_metrics, ProcedureMetrics};
use crate::geometry::{bbox_iou, transform_cloud, BoundingBox2D, BoxSource, Label, PointCloud};
use crate::imageio::write_snapshot;
use crate::pcd::write_pcd;
use crate::phantom::{generate_phantom, CameraModel, CutTool, PhantomSpec, SceneState, Snapshot};
use crate::planner::{plan_consistency_rmse, plan_cuts, CutPlan, PlanConfig};
use crate::segmentation::{
    detect, ground_truth_box, ground_truth_boxes, segment, DetectorConfig, SegmentationError, SegmentationResult,
};
use crate::surface::{fit_with_report, PolySurface};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ExecError {
    #[error("invalid run configuration: {0}")]
    Config(String),
    #[error("io: {0}")]
    Io(String),
    #[error("run record: {0}")]
    Record(String),
    #[error("invalid decision: {0}")]
    Decision(String),
    #[error("supervisor disconnected")]
    SupervisorGone,
    #[error("timed out waiting for the supervisor")]
    SupervisionTimeout,
    #[error("replay diverged: {0}")]
    Replay(String),
    #[error(transparent)]
    Protocol(#[from] ProtocolError),
}

pub const DEFAULT_CUT_BUDGET: usize = 12;
pub const DEFAULT_GATE_THRESHOLD_MM: f64 = 1.0;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FitConfig {
    pub degree_x: u32,
    pub degree_y: u32,
    pub total_degree_cap: Option<u32>,
}

impl Default for FitConfig {
    fn default() -> Self {
        FitConfig { degree_x: 5, degree_y: 5, total_degree_cap: Some(5) }
    }
}

/// Faults deliberately introduced into a run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum Injection {
    /// The detector fails on `classes` in the first imaging attempt of `cycle`.
    DetectorFailure { cycle: usize, classes: Vec<Label> },
    /// The `class` box is displaced by `shift_mm` along +x in the first
    /// imaging attempt of `cycle`, with its score left untouched.
    BoxShift { cycle: usize, class: Label, shift_mm: f64 },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExecutorConfig {
    pub seed: u64,
    pub cut_budget: usize,
    pub gate_threshold_mm: f64,
    pub kerf_mm: f64,
    pub depth_noise_sigma_mm: f64,
    pub subtraction_radius_mm: f64,
    pub stop_on_perforation: bool,
    pub fit: FitConfig,
    pub plan: PlanConfig,
    pub detector: DetectorConfig,
    pub injections: Vec<Injection>,
}

impl Default for ExecutorConfig {
    fn default() -> Self {
        ExecutorConfig {
            seed: 0,
            cut_budget: DEFAULT_CUT_BUDGET,
            gate_threshold_mm: DEFAULT_GATE_THRESHOLD_MM,
            kerf_mm: crate::phantom::DEFAULT_KERF_MM,
            depth_noise_sigma_mm: 0.2,
            subtraction_radius_mm: crate::geometry::DEFAULT_SUBTRACTION_RADIUS_MM,
            stop_on_perforation: true,
            fit: FitConfig::default(),
            plan: PlanConfig::default(),
            detector: DetectorConfig::default(),
            injections: Vec::new(),
        }
    }
}

impl ExecutorConfig {
    pub fn validate(&self) -> Result<(), ExecError> {
        let cfg = |m: String| Err(ExecError::Config(m));
        if !(self.gate_threshold_mm >= 0.0 && self.gate_threshold_mm.is_finite()) {
            return cfg("gate threshold must be non-negative".into());
        }
        if !(self.kerf_mm > 0.0 && self.kerf_mm.is_finite()) {
            return cfg("kerf must be positive".into());
        }
        if !(self.depth_noise_sigma_mm >= 0.0 && self.depth_noise_sigma_mm.is_finite()) {
            return cfg("depth noise must be non-negative".into());
        }
        if !(self.subtraction_radius_mm > 0.0 && self.subtraction_radius_mm.is_finite()) {
            return cfg("subtraction radius must be positive".into());
        }
        self.plan.validate().map_err(|e| ExecError::Config(e.to_string()))?;
        self.detector.validate().map_err(|e| ExecError::Config(e.to_string()))?;
        for inj in &self.injections {
            if let Injection::BoxShift { shift_mm, class, .. } = inj {
                if !shift_mm.is_finite() || !matches!(class, Label::Trachea | Label::Tumor) {
                    return cfg(format!("bad injection {inj:?}"));
                }
            }
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<ExecutorConfig, ExecError> {
        let c: ExecutorConfig = serde_json::from_str(text).map_err(|e| ExecError::Config(e.to_string()))?;
        c.validate()?;
        Ok(c)
    }
}

/// Result of comparing the predicted path with the freshly planned one.
#[derive(Clone, Debug, PartialEq)]
pub enum GateOutcome {
    AutoApproved(GateDecision),
    /// Above threshold, or not comparable; a supervisor must decide.
    NeedsSupervisor { rmse: Option<f64> },
}

/// Self-supervision check on cut `cut_index`. Plans that cannot be compared
/// are escalated.
pub fn gate_check(predicted: &CutPlan, current: &CutPlan, cut_index: usize, threshold: f64) -> GateOutcome {
    match plan_consistency_rmse(predicted, current, cut_index) {
        Ok(rmse) if rmse <= threshold => GateOutcome::AutoApproved(GateDecision {
            rmse: Some(rmse),
            threshold,
            verdict: Verdict::AutoApproved,
            decided_by: DecidedBy::System,
        }),
        Ok(rmse) => GateOutcome::NeedsSupervisor { rmse: Some(rmse) },
        Err(_) => GateOutcome::NeedsSupervisor { rmse: None },
    }
}

/// SplitMix64 finalizer over a few stream coordinates.
pub fn derive_seed(seed: u64, parts: &[u64]) -> u64 {
    let mut z = seed;
    for p in parts {
        z = z.wrapping_add(0x9E37_79B9_7F4A_7C15).wrapping_add(p.wrapping_mul(0xD6E8_FEB8_6659_FD93));
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^= z >> 31;
    }
    z
}

#[derive(Clone, Debug)]
pub struct RunOutcome {
    pub status: RunStatus,
    pub reason: Option<String>,
    pub cycles: Vec<CycleRecord>,
    pub metrics: ProcedureMetrics,
    pub scene: SceneState,
}

enum Stop {
    Status(RunStatus, String),
    Fatal(ExecError),
}

impl From<ExecError> for Stop {
    fn from(e: ExecError) -> Self {
        match e {
            ExecError::Io(_) => Stop::Fatal(e),
            ExecError::SupervisorGone | ExecError::SupervisionTimeout => {
                Stop::Status(RunStatus::Aborted, e.to_string())
            }
            other => Stop::Status(RunStatus::Aborted, other.to_string()),
        }
    }
}

fn aborted(msg: impl std::fmt::Display) -> Stop {
    Stop::Status(RunStatus::Aborted, msg.to_string())
}

struct Perception {
    snapshot_id: String,
    seg: SegmentationResult,
    tumor_world: PointCloud,
    surface: PolySurface,
    plan: CutPlan,
}

struct Runner<'a> {
    config: &'a ExecutorConfig,
    scene: SceneState,
    supervisor: &'a mut dyn Supervisor,
    log: &'a mut EventLog,
    artifacts: Option<PathBuf>,
    t: f64,
    fsm: FsmState,
    last_tumor: Option<PointCloud>,
    plan_config: PlanConfig,
    goal_surface: Option<PolySurface>,
}

impl Runner<'_> {
    fn emit(&mut self, kind: &str, payload: Value) -> Result<u64, ExecError> {
        self.log.emit(self.t, kind, payload)
    }

    fn step(&mut self, cycle: usize, event: FsmEvent) -> Result<(), Stop> {
        let to = fsm_step(self.fsm, event).map_err(|e| aborted(format!("protocol error: {e}")))?;
        self.emit("fsm_transition", json!({"cycle": cycle, "from": self.fsm, "to": to, "event": event}))?;
        self.fsm = to;
        Ok(())
    }

    fn artifact<F>(&self, sub: &str, name: &str, write: F) -> Result<(), ExecError>
    where
        F: FnOnce(&Path) -> std::io::Result<()>,
    {
        if let Some(root) = &self.artifacts {
            let dir = root.join(sub);
            std::fs::create_dir_all(&dir).map_err(|e| ExecError::Io(e.to_string()))?;
            write(&dir.join(name)).map_err(|e| ExecError::Io(e.to_string()))?;
        }
        Ok(())
    }

    fn ask(&mut self, payload: RequestPayload) -> Result<(Decision, DecidedBy), Stop> {
        let seq = self.emit("supervision_requested", json!({ "request": payload }))?;
        let request = PendingRequest { request_seq: seq, payload };
        let decision = self.supervisor.decide(&request)?;
        if !decision.fits(request.payload.kind()) {
            return Err(aborted(format!("decision {:?} does not answer {:?}", decision.verdict(), request.payload.kind())));
        }
        let by = if self.supervisor.is_human() { DecidedBy::Human } else { DecidedBy::System };
        self.emit(
            "supervision_resolved",
            json!({"request_seq": seq, "decision": DecisionMessage::from_decision(seq, &decision), "decided_by": by}),
        )?;
        Ok((decision, by))
    }

    fn camera(&self, cycle: usize, attempt: usize) -> CameraModel {
        let mut cam = CameraModel::overhead(&self.scene);
        cam.depth_noise_sigma = self.config.depth_noise_sigma_mm;
        cam.noise_seed = derive_seed(self.config.seed, &[1, cycle as u64, attempt as u64]);
        cam
    }

    fn detector_boxes(&mut self, snap: &Snapshot, cycle: usize, attempt: usize) -> Result<Vec<BoundingBox2D>, Stop> {
        let mut det = self.config.detector.clone();
        det.seed = derive_seed(self.config.seed ^ det.seed, &[2, cycle as u64, attempt as u64]);
        for inj in &self.config.injections {
            if let Injection::DetectorFailure { cycle: c, classes } = inj {
                if *c == cycle && attempt == 0 {
                    det.forced_failures.extend(classes.iter().copied());
                }
            }
        }
        let mut boxes = detect(snap, &det).map_err(aborted)?;
        for inj in &self.config.injections {
            if let Injection::BoxShift { cycle: c, class, shift_mm } = inj {
                if *c == cycle && attempt == 0 {
                    shift_box(snap, &mut boxes, *class, *shift_mm);
                }
            }
        }
        let truth = ground_truth_boxes(&snap.labels);
        let iou = |class: Label| {
            let b = boxes.iter().find(|b| b.class == class)?;
            let t = truth.iter().find(|t| t.class == class)?;
            Some(bbox_iou(b, t))
        };
        let payload = json!({
            "cycle": cycle,
            "attempt": attempt,
            "boxes": boxes,
            "ground_truth": truth,
            "iou": {"trachea": iou(Label::Trachea), "tumor": iou(Label::Tumor)},
        });
        self.emit("detection", payload)?;
        Ok(boxes)
    }

    /// Image, segment, fit and plan. `Ok(None)` means the supervisor rejected
    /// the segmentation and asked for a new image.
    fn perceive(&mut self, cycle: usize, attempt: usize) -> Result<Option<Perception>, Stop> {
        let cam = self.camera(cycle, attempt);
        let snap = self.scene.render_snapshot(&cam).map_err(aborted)?;
        let id = format!("c{cycle:02}_a{attempt}");
        self.emit(
            "snapshot_captured",
            json!({
                "cycle": cycle,
                "attempt": attempt,
                "snapshot_id": id,
                "pixels": {
                    "trachea": snap.labels.count(Label::Trachea),
                    "tumor": snap.labels.count(Label::Tumor),
                    "char": snap.labels.count(Label::Char),
                },
            }),
        )?;
        if let Some(root) = &self.artifacts {
            write_snapshot(&root.join("snapshots"), &id, &snap).map_err(|e| Stop::Fatal(ExecError::Io(e.to_string())))?;
        }

        let boxes = self.detector_boxes(&snap, cycle, attempt)?;
        let threshold = self.config.detector.score_threshold;
        let radius = self.config.subtraction_radius_mm;
        let first = segment(&snap, &boxes, radius, threshold);
        let needs_human = match &first {
            Ok(s) => s.needs_human,
            Err(SegmentationError::MissingTrachea) => true,
            Err(e) => return Err(aborted(e)),
        };
        let seg = if needs_human {
            let reason = match &first {
                Ok(s) if s.boxes.len() < 2 => "class missing",
                Ok(_) => "classification score below threshold",
                Err(_) => "trachea not detected",
            };
            let payload = RequestPayload::SegmentationOverride {
                cycle,
                snapshot_id: id.clone(),
                reason: reason.into(),
                proposed_boxes: boxes.clone(),
                reference_boxes: ground_truth_boxes(&snap.labels),
            };
            match self.ask(payload)?.0 {
                Decision::Boxes(human) => segment(&snap, &human, radius, threshold).map_err(aborted)?,
                Decision::Approve => first.map_err(aborted)?,
                Decision::Reject => return Ok(None),
            }
        } else {
            first.map_err(aborted)?
        };

        let trachea_world = transform_cloud(&seg.trachea, &snap.pose).map_err(aborted)?;
        let mut tumor_world = transform_cloud(&seg.tumor, &snap.pose).map_err(aborted)?;
        self.emit(
            "segmentation",
            json!({
                "cycle": cycle,
                "segmentation_id": id,
                "source": seg.source,
                "needs_human": seg.needs_human,
                "boxes": seg.boxes,
                "trachea_points": trachea_world.len(),
                "tumor_points": tumor_world.len(),
            }),
        )?;
        self.artifact("clouds", &format!("{id}_trachea.pcd"), |p| {
            write_pcd(std::fs::File::create(p)?, &trachea_world).map_err(std::io::Error::other)
        })?;
        self.artifact("clouds", &format!("{id}_tumor.pcd"), |p| {
            write_pcd(std::fs::File::create(p)?, &tumor_world).map_err(std::io::Error::other)
        })?;

        let fit = self.config.fit;
        let (surface, report) = fit_with_report(&trachea_world, fit.degree_x, fit.degree_y, fit.total_degree_cap, 1);
        self.emit(
            "surface_fitted",
            json!({
                "cycle": cycle,
                "surface_id": id,
                "model_id": report.model_id,
                "coeff_count": report.coeff_count,
                "rmse_mm": report.rmse,
                "fit_time_s": report.fit_time_s,
                "condition": report.condition,
                "error": report.error,
            }),
        )?;
        let surface = surface.ok_or_else(|| aborted(report.error.unwrap_or_default()))?;
        self.artifact("surfaces", &format!("{id}.json"), |p| std::fs::write(p, surface.to_json()))?;

        if tumor_world.is_empty() {
            match &self.last_tumor {
                Some(prev) => tumor_world = prev.clone(),
                None => return Err(aborted("no tumor visible to plan against")),
            }
        }
        let plan = plan_cuts(&surface, &tumor_world, &self.plan_config).map_err(aborted)?;
        self.emit(
            "plan_created",
            json!({
                "cycle": cycle,
                "plan_id": id,
                "stations_mm": plan.stations_mm,
                "L_mm": plan.extent_mm,
            }),
        )?;
        self.artifact("plans", &format!("{id}.json"), |p| std::fs::write(p, plan.to_json()))?;
        Ok(Some(Perception { snapshot_id: id, seg, tumor_world, surface, plan }))
    }

    fn run(&mut self) -> Result<(RunStatus, Option<String>, Vec<CycleRecord>), Stop> {
        let mut cycles: Vec<CycleRecord> = Vec::new();
        let mut predicted: Option<(String, CutPlan)> = None;
        let count = self.plan_config.cut_count;
        for cycle in 0..self.config.cut_budget {
            let cut_index = cycle % count;
            let predicted_cut_index = (cycle + 1) % count;
            let t_start = self.t;
            if cycle > 0 {
                self.step(cycle, FsmEvent::Retracted)?;
            }
            let mut states = vec![self.fsm];
            self.emit("cycle_started", json!({"cycle": cycle, "cut_index": cut_index}))?;

            let mut attempt = 0;
            let mut rejected = false;
            let (perception, gate) = loop {
                let Some(p) = self.perceive(cycle, attempt)? else {
                    if rejected {
                        return Err(Stop::Status(RunStatus::AbortedBySupervisor, "segmentation rejected twice".into()));
                    }
                    rejected = true;
                    attempt += 1;
                    continue;
                };
                let Some((pred_id, pred)) = predicted.as_ref() else { break (p, None) };
                let threshold = self.config.gate_threshold_mm;
                let decision = match gate_check(pred, &p.plan, cut_index, threshold) {
                    GateOutcome::AutoApproved(d) => d,
                    GateOutcome::NeedsSupervisor { rmse } => {
                        let payload = RequestPayload::CutApproval {
                            cycle,
                            cut_index,
                            rmse_mm: rmse,
                            threshold_mm: threshold,
                            plan_id: p.snapshot_id.clone(),
                            predicted_plan_id: Some(pred_id.clone()),
                        };
                        match self.ask(payload)? {
                            (Decision::Reject, by) => {
                                let verdict = if rejected { Verdict::SupervisorRejected } else { Verdict::Replanned };
                                let d = GateDecision { rmse, threshold, verdict, decided_by: by };
                                self.emit("gate_decision", json!({"cycle": cycle, "cut_index": cut_index, "decision": d}))?;
                                if rejected {
                                    return Err(Stop::Status(
                                        RunStatus::AbortedBySupervisor,
                                        "cut rejected after re-plan".into(),
                                    ));
                                }
                                rejected = true;
                                attempt += 1;
                                continue;
                            }
                            (_, by) => GateDecision { rmse, threshold, verdict: Verdict::SupervisorApproved, decided_by: by },
                        }
                    }
                };
                self.emit("gate_decision", json!({"cycle": cycle, "cut_index": cut_index, "decision": decision}))?;
                break (p, Some(decision));
            };

            if cycle == 0 {
                self.plan_config.schedule = Some(perception.plan.schedule());
                self.goal_surface = Some(perception.surface.clone());
            }
            self.last_tumor = Some(perception.tumor_world.clone());

            self.step(cycle, FsmEvent::ToolAligned)?;
            states.push(self.fsm);
            let path = perception.plan.path(cut_index).map_err(aborted)?.to_vec();
            let tool = CutTool {
                kerf: self.config.kerf_mm,
                edge_length: perception.plan.extent_mm / count as f64 + self.config.kerf_mm,
            };
            let cut_start = self.t;
            let outcome = self.scene.apply_cut(&path, &tool).map_err(aborted)?;
            let last = path.last().expect("plans have waypoints");
            self.t += last.t_s + last.position.distance(&perception.plan.home) / perception.plan.speed_mm_s;
            self.emit(
                "cut_executed",
                json!({
                    "cycle": cycle,
                    "cut_index": cut_index,
                    "outcome": outcome,
                    "removed_total_mm3": self.scene.removed_volume(),
                    "t_start_s": cut_start,
                }),
            )?;
            self.step(cycle, FsmEvent::CutComplete)?;
            states.push(self.fsm);

            let delta = perception.plan.extent_mm / count as f64;
            self.scene.retract_tumor(delta).map_err(aborted)?;
            self.emit("retracted", json!({"cycle": cycle, "delta_mm": delta, "peel_station_mm": self.scene.peel_station()}))?;

            let record = CycleRecord {
                cycle,
                cut_index,
                snapshot_id: perception.snapshot_id.clone(),
                segmentation_id: perception.snapshot_id.clone(),
                surface_id: perception.snapshot_id.clone(),
                plan_id: perception.snapshot_id.clone(),
                predicted_cut_index,
                segmentation_source: perception.seg.source,
                boxes: perception.seg.boxes.clone(),
                gate,
                cut: outcome,
                states,
                peel_station_mm: self.scene.peel_station(),
                removed_total_mm3: self.scene.removed_volume(),
                t_start_s: t_start,
                t_end_s: self.t,
            };
            self.emit("cycle_completed", serde_json::to_value(&record).map_err(|e| aborted(e))?)?;
            cycles.push(record);
            predicted = Some((perception.snapshot_id, perception.plan));

            if outcome.perforated && self.config.stop_on_perforation {
                return Ok((RunStatus::Perforated, Some("trachea perforated".into()), cycles));
            }
            if self.scene.detached() {
                return Ok((RunStatus::Detached, None, cycles));
            }
        }
        Ok((RunStatus::BudgetExhausted, None, cycles))
    }
}

/// Displaces the `class` box by `shift_mm` along +u, converted to pixels at
/// the median valid depth, and clamps it into the image.
fn shift_box(snap: &Snapshot, boxes: &mut [BoundingBox2D], class: Label, shift_mm: f64) {
    let mut depths: Vec<f64> = snap.depth.values().iter().copied().filter(|d| *d > 0.0).collect();
    if depths.is_empty() {
        return;
    }
    depths.sort_by(|a, b| a.total_cmp(b));
    let px = shift_mm * snap.intrinsics.fx / depths[depths.len() / 2];
    let w = snap.depth.width() as f64;
    for b in boxes.iter_mut().filter(|b| b.class == class) {
        let width = b.u_max - b.u_min;
        b.u_min = (b.u_min + px).clamp(0.0, w - 1.0);
        b.u_max = (b.u_min + width).clamp(b.u_min + 1.0, w);
    }
}

/// Runs the procedure on `scene`. Every step is appended to `log`; when
/// `artifacts` is set, clouds, surfaces, plans, snapshots and the final
/// metrics are written beneath it.
pub fn run_procedure(
    scene: SceneState,
    config: &ExecutorConfig,
    supervisor: &mut dyn Supervisor,
    log: &mut EventLog,
    artifacts: Option<&Path>,
) -> Result<RunOutcome, ExecError> {
    config.validate()?;
    let mut runner = Runner {
        config,
        scene,
        supervisor,
        log,
        artifacts: artifacts.map(Path::to_path_buf),
        t: 0.0,
        fsm: FsmState::ReachIn,
        last_tumor: None,
        plan_config: config.plan.clone(),
        goal_surface: None,
    };
    runner.emit(
        "run_started",
        json!({
            "seed": config.seed,
            "cut_budget": config.cut_budget,
            "gate_threshold_mm": config.gate_threshold_mm,
            "initial_volume_mm3": runner.scene.initial_volume(),
            "power_w": config.plan.power_w,
        }),
    )?;
    let (status, reason, cycles) = match runner.run() {
        Ok(r) => r,
        Err(Stop::Fatal(e)) => return Err(e),
        Err(Stop::Status(s, why)) => {
            let cycles = RunRecord::from_events(None, runner.log.events().to_vec())?.cycles;
            (s, Some(why), cycles)
        }
    };
    let detections = RunRecord::from_events(None, runner.log.events().to_vec())?.detections();
    let metrics = compute_metrics(
        &runner.scene,
        runner.goal_surface.as_ref(),
        config.plan.clearance_mm,
        &detections,
        cycles.iter().any(|c| c.cut.perforated),
    );
    if let Some(root) = &runner.artifacts {
        let text = serde_json::to_string_pretty(&metrics).map_err(|e| ExecError::Io(e.to_string()))?;
        std::fs::write(root.join(METRICS_FILE), text).map_err(|e| ExecError::Io(e.to_string()))?;
    }
    runner.emit("run_finished", json!({"status": status, "reason": reason, "metrics": metrics}))?;
    Ok(RunOutcome { status, reason, cycles, metrics, scene: runner.scene })
}

/// Creates `dir`, writes `run.json` and opens the event log.
pub fn prepare_run_dir(dir: &Path, manifest: &RunManifest) -> Result<EventLog, ExecError> {
    let io = |e: std::io::Error| ExecError::Io(e.to_string());
    std::fs::create_dir_all(dir).map_err(io)?;
    if dir.join(EVENTS_FILE).exists() {
        return Err(ExecError::Config(format!("{} already holds a run", dir.display())));
    }
    let text = serde_json::to_string_pretty(manifest).map_err(|e| ExecError::Io(e.to_string()))?;
    std::fs::write(dir.join(RUN_FILE), text).map_err(io)?;
    EventLog::create(&dir.join(EVENTS_FILE)).map_err(io)
}

/// Generates the phantom and runs it end to end inside `dir`.
pub fn run_in_dir(
    dir: &Path,
    manifest: &RunManifest,
    supervisor: &mut dyn Supervisor,
    listeners: Vec<Listener>,
) -> Result<RunOutcome, ExecError> {
    manifest.config.validate()?;
    let scene = generate_phantom(&manifest.phantom).map_err(|e| ExecError::Config(e.to_string()))?;
    let mut log = prepare_run_dir(dir, manifest)?;
    for l in listeners {
        log.subscribe(l);
    }
    run_procedure(scene, &manifest.config, supervisor, &mut log, Some(dir))
}

/// Re-executes a recorded run in memory, feeding back its recorded
/// decisions.
pub fn replay(record: &RunRecord) -> Result<RunOutcome, ExecError> {
    let manifest = record.manifest.as_ref().ok_or_else(|| ExecError::Record("run.json missing".into()))?;
    let scene = generate_phantom(&manifest.phantom).map_err(|e| ExecError::Config(e.to_string()))?;
    let mut supervisor = ReplaySupervisor::from_events(&record.events)?;
    let mut log = EventLog::in_memory();
    run_procedure(scene, &manifest.config, &mut supervisor, &mut log, None)
}

/// Standard headless run setup for a seed: phantom variant and executor
/// config share the seed.
pub fn seeded_manifest(run_id: &str, base: &PhantomSpec, seed: u64, config: ExecutorConfig) -> RunManifest {
    RunManifest { run_id: run_id.to_string(), phantom: base.variant(seed), config: ExecutorConfig { seed, ..config } }
}

/// Ground-truth boxes of the scene as seen by the overhead camera.
pub fn reference_boxes(scene: &SceneState) -> Vec<BoundingBox2D> {
    let mut cam = CameraModel::overhead(scene);
    cam.depth_noise_sigma = 0.0;
    match scene.render_snapshot(&cam) {
        Ok(s) => [Label::Trachea, Label::Tumor]
            .iter()
            .filter_map(|c| ground_truth_box(&s.labels, *c))
            .map(|b| BoundingBox2D { source: BoxSource::Human, ..b })
            .collect(),
        Err(_) => Vec::new(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::Point3;
    use crate::planner::StationSchedule;
    use crate::surface::DomainBox;

    fn plan_at(z: f64) -> CutPlan {
        let surface = PolySurface::constant(z, DomainBox { x_min: -20.0, x_max: 20.0, y_min: 0.0, y_max: 75.0 });
        let tumor = PointCloud::new(vec![Point3::new(-5.0, 10.0, 0.0), Point3::new(5.0, 40.0, 0.0)]).unwrap();
        plan_cuts(&surface, &tumor, &PlanConfig::default()).unwrap()
    }

    #[test]
    fn gate_auto_approves_identical_plans() {
        match gate_check(&plan_at(0.0), &plan_at(0.0), 1, 0.5) {
            GateOutcome::AutoApproved(d) => {
                assert_eq!(d.rmse, Some(0.0));
                assert_eq!(d.verdict, Verdict::AutoApproved);
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn gate_escalates_large_differences() {
        assert_eq!(gate_check(&plan_at(0.0), &plan_at(10.0), 1, 1.0), GateOutcome::NeedsSupervisor { rmse: Some(10.0) });
    }

    #[test]
    fn zero_budget_ends_immediately() {
        let scene = generate_phantom(&PhantomSpec::default()).unwrap();
        let cfg = ExecutorConfig { cut_budget: 0, ..ExecutorConfig::default() };
        let mut log = EventLog::in_memory();
        let out = run_procedure(scene, &cfg, &mut AutoApprove, &mut log, None).unwrap();
        assert_eq!(out.status, RunStatus::BudgetExhausted);
        assert!(out.cycles.is_empty());
        assert_eq!(out.metrics.removal_pct, 0.0);
    }

    #[test]
    fn derive_seed_separates_streams() {
        assert_ne!(derive_seed(1, &[1, 0, 0]), derive_seed(1, &[2, 0, 0]));
        assert_ne!(derive_seed(1, &[1, 0, 0]), derive_seed(1, &[1, 1, 0]));
        assert_eq!(derive_seed(7, &[3]), derive_seed(7, &[3]));
    }

    #[test]
    fn config_json_round_trip() {
        let cfg = ExecutorConfig {
            injections: vec![Injection::BoxShift { cycle: 2, class: Label::Trachea, shift_mm: 10.0 }],
            plan: PlanConfig { schedule: Some(StationSchedule { y_min: 1.0, extent: 20.0 }), ..PlanConfig::default() },
            ..ExecutorConfig::default()
        };
        let text = serde_json::to_string(&cfg).unwrap();
        assert_eq!(ExecutorConfig::from_json(&text).unwrap(), cfg);
        assert!(ExecutorConfig::from_json(r#"{"kerf_mm": 0}"#).is_err());
        assert!(ExecutorConfig::from_json(r#"{"bogus": 1}"#).is_err());
    }
}
