use proptest::prelude::*;

use resectsim_core::executor::{
    gate_check, is_regular_trace, replay, run_in_dir, run_procedure, seeded_manifest, AutoApprove, DecidedBy,
    Decision, EventLog, ExecError, ExecutorConfig, GateOutcome, Injection, PendingRequest, RejectAll, RequestPayload,
    RunRecord, RunStatus, Supervisor, Verdict,
};
use resectsim_core::geometry::{BoundingBox2D, BoxSource, Label, Point3, PointCloud};
use resectsim_core::phantom::{generate_phantom, PhantomSpec};
use resectsim_core::planner::{plan_cuts, PlanConfig};
use resectsim_core::surface::{DomainBox, PolySurface};

/// Answers like a careful human and keeps every request it saw.
#[derive(Default)]
struct Recorder {
    requests: Vec<PendingRequest>,
    reject_cuts: usize,
}

impl Supervisor for Recorder {
    fn decide(&mut self, request: &PendingRequest) -> Result<Decision, ExecError> {
        self.requests.push(request.clone());
        Ok(match &request.payload {
            RequestPayload::SegmentationOverride { reference_boxes, .. } => Decision::Boxes(
                reference_boxes.iter().map(|b| BoundingBox2D { source: BoxSource::Human, ..*b }).collect(),
            ),
            RequestPayload::CutApproval { .. } if self.reject_cuts > 0 => {
                self.reject_cuts -= 1;
                Decision::Reject
            }
            RequestPayload::CutApproval { .. } => Decision::Approve,
        })
    }
}

fn run(seed: u64, config: ExecutorConfig, supervisor: &mut dyn Supervisor) -> (RunRecord, resectsim_core::executor::RunOutcome) {
    let m = seeded_manifest("t", &PhantomSpec::default(), seed, config);
    let scene = generate_phantom(&m.phantom).unwrap();
    let mut log = EventLog::in_memory();
    let out = run_procedure(scene, &m.config, supervisor, &mut log, None).unwrap();
    let record = RunRecord::from_events(Some(m), log.events().to_vec()).unwrap();
    (record, out)
}

/// Properties every finished run must satisfy.
fn check_run(record: &RunRecord) {
    assert!(record.finished());
    let seqs: Vec<u64> = record.events.iter().map(|e| e.seq).collect();
    assert_eq!(seqs, (1..=seqs.len() as u64).collect::<Vec<_>>());
    if !record.cycles.is_empty() {
        assert!(is_regular_trace(&record.state_trace()));
    }
    let mut removed = 0.0;
    for (i, c) in record.cycles.iter().enumerate() {
        assert_eq!(c.cycle, i);
        assert!(c.removed_total_mm3 >= removed);
        removed = c.removed_total_mm3;
        assert!(c.t_end_s >= c.t_start_s);
        match (&c.gate, i) {
            (None, 0) => {}
            (Some(g), i) if i > 0 => {
                assert_ne!(g.verdict, Verdict::SupervisorRejected);
                if g.verdict == Verdict::AutoApproved {
                    assert!(g.rmse.unwrap() <= g.threshold);
                    assert_eq!(g.decided_by, DecidedBy::System);
                }
            }
            other => panic!("cycle {i} gate {other:?}"),
        }
    }
    // No cut follows a rejected gate in the same cycle without a fresh approval.
    let mut last_verdict: Option<(u64, String)> = None;
    for e in &record.events {
        match e.kind.as_str() {
            "gate_decision" => {
                let v = e.payload["decision"]["verdict"].as_str().unwrap().to_string();
                last_verdict = Some((e.payload["cycle"].as_u64().unwrap(), v));
            }
            "cut_executed" => {
                let cycle = e.payload["cycle"].as_u64().unwrap();
                if cycle > 0 {
                    let (c, v) = last_verdict.clone().expect("gated cut");
                    assert_eq!(c, cycle);
                    assert_ne!(v, "supervisor_rejected");
                }
            }
            _ => {}
        }
    }
}

#[test]
fn default_phantom_runs_to_detachment() {
    let mut sup = AutoApprove;
    let (record, out) = run(0, ExecutorConfig::default(), &mut sup);
    check_run(&record);
    assert_eq!(out.status, RunStatus::Detached);
    assert!(out.scene.detached());
    assert!(out.metrics.removal_pct >= 90.0, "{}", out.metrics.removal_pct);
    assert!(!out.metrics.perforated);
    assert!(out.cycles.iter().all(|c| !c.cut.perforated));
    assert!(out.cycles.len() <= 12);
}

#[test]
fn detector_failure_pauses_for_boxes_then_resumes() {
    let config = ExecutorConfig {
        injections: vec![Injection::DetectorFailure { cycle: 2, classes: vec![Label::Tumor] }],
        ..ExecutorConfig::default()
    };
    let mut sup = Recorder::default();
    let (record, out) = run(1, config, &mut sup);
    check_run(&record);
    assert_eq!(out.status, RunStatus::Detached);
    let seg_requests: Vec<_> = sup
        .requests
        .iter()
        .filter_map(|r| match &r.payload {
            RequestPayload::SegmentationOverride { cycle, .. } => Some(*cycle),
            _ => None,
        })
        .collect();
    assert_eq!(seg_requests, vec![2]);
    assert_eq!(out.cycles[2].segmentation_source, BoxSource::Human);
    assert!(out.cycles.iter().filter(|c| c.cycle != 2).all(|c| c.segmentation_source == BoxSource::Auto));
    assert!(out.cycles.len() > 3, "run continued after the pause");
    let resolved: Vec<_> = record.events.iter().filter(|e| e.kind == "supervision_resolved").collect();
    assert_eq!(resolved.len(), sup.requests.len());
    assert!(resolved.iter().all(|e| e.payload["decided_by"] == "human"));
}

#[test]
fn corruption_trips_the_calibrated_gate() {
    let mut config = ExecutorConfig {
        gate_threshold_mm: 0.05,
        injections: vec![Injection::BoxShift { cycle: 2, class: Label::Trachea, shift_mm: 10.0 }],
        ..ExecutorConfig::default()
    };
    let mut sup = Recorder::default();
    let (record, _) = run(3, config.clone(), &mut sup);
    check_run(&record);
    let cycles: Vec<usize> = sup
        .requests
        .iter()
        .filter_map(|r| match &r.payload {
            RequestPayload::CutApproval { cycle, rmse_mm, threshold_mm, .. } => {
                assert!(rmse_mm.is_none_or(|r| r > *threshold_mm));
                Some(*cycle)
            }
            _ => None,
        })
        .collect();
    assert!(cycles.contains(&2), "{cycles:?}");

    config.injections.clear();
    let mut clean = Recorder::default();
    let (record, out) = run(3, config, &mut clean);
    check_run(&record);
    assert!(clean.requests.is_empty(), "{:?}", clean.requests);
    assert_eq!(out.status, RunStatus::Detached);
}

#[test]
fn one_rejection_replans_and_a_second_aborts() {
    let config = ExecutorConfig { gate_threshold_mm: 0.0, ..ExecutorConfig::default() };
    let mut once = Recorder { reject_cuts: 1, ..Recorder::default() };
    let (record, out) = run(2, config.clone(), &mut once);
    check_run(&record);
    assert_eq!(out.status, RunStatus::Detached);
    // The rejection is logged as a re-plan; the cycle keeps the approval that followed.
    let verdicts: Vec<(u64, String)> = record
        .events
        .iter()
        .filter(|e| e.kind == "gate_decision")
        .map(|e| (e.payload["cycle"].as_u64().unwrap(), e.payload["decision"]["verdict"].as_str().unwrap().to_string()))
        .collect();
    assert_eq!(verdicts[0], (1, "replanned".to_string()));
    assert_eq!(verdicts[1], (1, "supervisor_approved".to_string()));
    assert_eq!(out.cycles[1].gate.as_ref().unwrap().verdict, Verdict::SupervisorApproved);
    let attempts: Vec<&str> =
        out.cycles.iter().filter(|c| c.cycle == 1).map(|c| c.snapshot_id.as_str()).collect();
    assert_eq!(attempts, vec!["c01_a1"]);

    let (record, out) = run(2, config, &mut RejectAll);
    assert_eq!(out.status, RunStatus::AbortedBySupervisor);
    assert_eq!(out.cycles.len(), 1);
    assert!(record.events.iter().filter(|e| e.kind == "cut_executed").count() == 1);
}

#[test]
fn gate_on_constructed_plans() {
    let domain = DomainBox { x_min: -20.0, x_max: 20.0, y_min: 0.0, y_max: 75.0 };
    let tumor = PointCloud::new(vec![Point3::new(-5.0, 10.0, 0.0), Point3::new(5.0, 40.0, 0.0)]).unwrap();
    let a = plan_cuts(&PolySurface::constant(3.0, domain), &tumor, &PlanConfig::default()).unwrap();
    let b = plan_cuts(&PolySurface::constant(13.0, domain), &tumor, &PlanConfig::default()).unwrap();
    match gate_check(&a, &a, 1, 0.5) {
        GateOutcome::AutoApproved(d) => assert_eq!((d.rmse, d.verdict), (Some(0.0), Verdict::AutoApproved)),
        other => panic!("{other:?}"),
    }
    assert_eq!(gate_check(&a, &b, 1, 1.0), GateOutcome::NeedsSupervisor { rmse: Some(10.0) });
    assert_eq!(gate_check(&a, &b, 9, 1.0), GateOutcome::NeedsSupervisor { rmse: None });
}

#[test]
fn persisted_run_replays_identically() {
    let tmp = tempfile::tempdir().unwrap();
    let config = ExecutorConfig {
        gate_threshold_mm: 0.05,
        injections: vec![
            Injection::DetectorFailure { cycle: 1, classes: vec![Label::Trachea] },
            Injection::BoxShift { cycle: 3, class: Label::Tumor, shift_mm: 6.0 },
        ],
        ..ExecutorConfig::default()
    };
    let m = seeded_manifest("replay", &PhantomSpec::default(), 5, config);
    let mut sup = Recorder { reject_cuts: 1, ..Recorder::default() };
    let out = run_in_dir(tmp.path(), &m, &mut sup, Vec::new()).unwrap();
    let record = RunRecord::load(tmp.path()).unwrap();
    check_run(&record);
    assert_eq!(record.cycles, out.cycles);
    let again = replay(&record).unwrap();
    assert_eq!(again.cycles, record.cycles);
    assert_eq!(again.status, record.status);
    assert_eq!(Some(again.metrics), record.metrics);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(6))]

    #[test]
    fn runs_keep_their_invariants(
        seed in 0u64..1000,
        threshold in prop_oneof![Just(0.0), Just(0.05), Just(1.0)],
        fail_cycle in proptest::option::of(0usize..5),
        shift in proptest::option::of((0usize..5, -12.0f64..12.0)),
        rejections in 0usize..3,
    ) {
        let mut injections = Vec::new();
        if let Some(c) = fail_cycle {
            injections.push(Injection::DetectorFailure { cycle: c, classes: vec![Label::Tumor] });
        }
        if let Some((c, s)) = shift {
            injections.push(Injection::BoxShift { cycle: c, class: Label::Trachea, shift_mm: s });
        }
        let config = ExecutorConfig { gate_threshold_mm: threshold, injections, ..ExecutorConfig::default() };
        let mut sup = Recorder { reject_cuts: rejections, ..Recorder::default() };
        let (record, out) = run(seed, config, &mut sup);
        check_run(&record);
        prop_assert_eq!(&record.cycles, &out.cycles);
        let again = replay(&record).unwrap();
        prop_assert_eq!(again.cycles, record.cycles);
        prop_assert_eq!(again.status, out.status);
    }
}
