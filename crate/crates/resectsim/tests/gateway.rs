use std::time::{Duration, Instant};

use axum::body::{Body, Bytes};
use axum::http::{Request, StatusCode};
use axum::Router;
use http_body_util::BodyExt;
use serde_json::{json, Value};
use tower::ServiceExt;

use resectsim::server::{router, AppState, HandleStatus, RunHandle};
use resectsim_core::executor::{parse_events, CycleRecord, Event, RunRecord, EVENTS_FILE};
use resectsim_core::geometry::{BoxSource, Label};
use resectsim_core::surface::PolySurface;

struct Api {
    app: Router,
    dir: tempfile::TempDir,
}

impl Api {
    fn new() -> Api {
        let dir = tempfile::tempdir().unwrap();
        Api { app: router(AppState::new(dir.path().to_path_buf())), dir }
    }

    async fn send(&self, req: Request<Body>) -> (StatusCode, Bytes) {
        let resp = self.app.clone().oneshot(req).await.unwrap();
        let status = resp.status();
        (status, resp.into_body().collect().await.unwrap().to_bytes())
    }

    async fn get(&self, uri: &str) -> (StatusCode, Bytes) {
        self.send(Request::get(uri).body(Body::empty()).unwrap()).await
    }

    async fn post(&self, uri: &str, body: Value) -> (StatusCode, Bytes) {
        let req = Request::post(uri)
            .header("content-type", "application/json")
            .body(Body::from(body.to_string()))
            .unwrap();
        self.send(req).await
    }

    async fn handle(&self, id: &str) -> RunHandle {
        let (status, body) = self.get(&format!("/runs/{id}")).await;
        assert_eq!(status, StatusCode::OK);
        serde_json::from_slice(&body).unwrap()
    }

    async fn wait_for(&self, id: &str, pred: impl Fn(&RunHandle) -> bool) -> RunHandle {
        let start = Instant::now();
        loop {
            let h = self.handle(id).await;
            if pred(&h) {
                return h;
            }
            assert!(start.elapsed() < Duration::from_secs(120), "timed out waiting on {id}: {h:?}");
            tokio::time::sleep(Duration::from_millis(10)).await;
        }
    }

    async fn wait_done(&self, id: &str) -> RunHandle {
        self.wait_for(id, |h| matches!(h.status, HandleStatus::Completed | HandleStatus::Aborted)).await
    }

    async fn stream(&self, uri: &str, last_event_id: Option<u64>) -> Vec<Event> {
        let mut req = Request::get(uri);
        if let Some(id) = last_event_id {
            req = req.header("last-event-id", id.to_string());
        }
        let (status, body) = self.send(req.body(Body::empty()).unwrap()).await;
        assert_eq!(status, StatusCode::OK);
        parse_sse(&body)
    }

    fn file_events(&self, id: &str) -> Vec<Event> {
        parse_events(&std::fs::read_to_string(self.dir.path().join(id).join(EVENTS_FILE)).unwrap()).unwrap()
    }
}

/// Events carried in the `data:` lines of an SSE body; also checks that the
/// `id` and `event` fields agree with the payload.
fn parse_sse(body: &[u8]) -> Vec<Event> {
    let text = std::str::from_utf8(body).unwrap();
    let mut out = Vec::new();
    for block in text.split("\n\n") {
        let mut id = None;
        let mut kind = None;
        let mut data = String::new();
        for line in block.lines() {
            if let Some(v) = line.strip_prefix("id:") {
                id = Some(v.trim().parse::<u64>().unwrap());
            } else if let Some(v) = line.strip_prefix("event:") {
                kind = Some(v.trim().to_string());
            } else if let Some(v) = line.strip_prefix("data:") {
                data.push_str(v.trim_start());
            }
        }
        if data.is_empty() {
            continue;
        }
        let e: Event = serde_json::from_str(&data).unwrap();
        assert_eq!(id, Some(e.seq));
        assert_eq!(kind.as_deref(), Some(e.kind.as_str()));
        out.push(e);
    }
    out
}

fn cycles_of(events: &[Event]) -> Vec<CycleRecord> {
    RunRecord::from_events(None, events.to_vec()).unwrap().cycles
}

/// Config pausing twice for a human: a segmentation override in cycle 1 and
/// a cut approval in cycle 2.
fn interactive_config() -> Value {
    json!({
        "gate_threshold_mm": 0.05,
        "injections": [
            {"type": "detector_failure", "cycle": 1, "classes": ["tumor"]},
            {"type": "box_shift", "cycle": 2, "class": "trachea", "shift_mm": 10.0}
        ]
    })
}

#[tokio::test(flavor = "multi_thread")]
async fn create_validates_and_rejects_duplicates() {
    let api = Api::new();
    let (status, body) = api.post("/runs", json!({"run_id": "a", "seed": 1, "auto_approve": true})).await;
    assert_eq!(status, StatusCode::CREATED);
    let h: RunHandle = serde_json::from_slice(&body).unwrap();
    assert_eq!((h.run_id.as_str(), h.status), ("a", HandleStatus::Created));
    assert!(api.dir.path().join("a").is_dir());

    let (status, _) = api.post("/runs", json!({"run_id": "a", "seed": 1, "auto_approve": true})).await;
    assert_eq!(status, StatusCode::CONFLICT);
    api.wait_done("a").await;
    let (status, _) = api.post("/runs", json!({"run_id": "a", "seed": 2, "auto_approve": true})).await;
    assert_eq!(status, StatusCode::CONFLICT);

    let (status, _) = api.post("/runs", json!({"run_id": "bad/id"})).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    let (status, _) = api.post("/runs", json!({"config": {"gate_threshold_mm": -1.0}})).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    let (status, _) = api.post("/runs", json!({"surprise": 1})).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    let (status, _) = api.get("/runs/nope").await;
    assert_eq!(status, StatusCode::NOT_FOUND);
    let (status, _) = api.get("/runs/nope/events").await;
    assert_eq!(status, StatusCode::NOT_FOUND);
}

#[tokio::test(flavor = "multi_thread")]
async fn only_one_active_run() {
    let api = Api::new();
    let (status, _) = api.post("/runs", json!({"run_id": "first", "seed": 2, "config": interactive_config()})).await;
    assert_eq!(status, StatusCode::CREATED);
    api.wait_for("first", |h| h.pending_request.is_some()).await;
    let (status, _) = api.post("/runs", json!({"run_id": "second", "auto_approve": true})).await;
    assert_eq!(status, StatusCode::CONFLICT);
}

#[tokio::test(flavor = "multi_thread")]
async fn manifest_round_trips_through_persistence() {
    let api = Api::new();
    let phantom = resectsim_core::phantom::PhantomSpec::default().variant(7);
    let body = json!({"run_id": "m", "phantom": phantom, "seed": 7, "auto_approve": true});
    assert_eq!(api.post("/runs", body).await.0, StatusCode::CREATED);
    api.wait_done("m").await;
    let (status, bytes) = api.get("/runs/m/artifacts/run.json").await;
    assert_eq!(status, StatusCode::OK);
    let manifest: resectsim_core::executor::RunManifest = serde_json::from_slice(&bytes).unwrap();
    assert_eq!(manifest.phantom, phantom);
    assert_eq!(manifest.config.seed, 7);
}

#[tokio::test(flavor = "multi_thread")]
async fn completed_run_streams_every_event_once() {
    let api = Api::new();
    api.post("/runs", json!({"run_id": "s", "seed": 3, "auto_approve": true})).await;
    let h = api.wait_done("s").await;
    assert_eq!(h.status, HandleStatus::Completed);
    let file = api.file_events("s");
    assert_eq!(h.last_seq, file.len() as u64);

    let all = api.stream("/runs/s/events", None).await;
    assert_eq!(all, file);
    let seqs: Vec<u64> = all.iter().map(|e| e.seq).collect();
    assert_eq!(seqs, (1..=file.len() as u64).collect::<Vec<_>>());

    let k = 17;
    let tail = api.stream(&format!("/runs/s/events?from_seq={k}"), None).await;
    assert_eq!(tail, file[k as usize..].to_vec());
    let resumed = api.stream("/runs/s/events", Some(k)).await;
    assert_eq!(resumed, tail);
    let past_end = api.stream(&format!("/runs/s/events?from_seq={}", file.len()), None).await;
    assert!(past_end.is_empty());
}

#[tokio::test(flavor = "multi_thread")]
async fn supervised_run_over_http() {
    let api = Api::new();
    api.post("/runs", json!({"run_id": "h", "seed": 2, "config": interactive_config()})).await;

    // Two subscribers attached while the run is waiting on a human.
    let h = api.wait_for("h", |h| h.pending_request.is_some()).await;
    assert_eq!(h.status, HandleStatus::AwaitingDecision);
    let pending = h.pending_request.unwrap();
    let subs: Vec<_> = (0..2)
        .map(|_| {
            let app = api.app.clone();
            tokio::spawn(async move {
                let resp = app.oneshot(Request::get("/runs/h/events").body(Body::empty()).unwrap()).await.unwrap();
                parse_sse(&resp.into_body().collect().await.unwrap().to_bytes())
            })
        })
        .collect();

    let reference = match &pending.payload {
        resectsim_core::executor::RequestPayload::SegmentationOverride { cycle, reference_boxes, .. } => {
            assert_eq!(*cycle, 1);
            reference_boxes.clone()
        }
        other => panic!("expected a segmentation override first, got {other:?}"),
    };
    let mut drawn: Vec<Value> = reference.iter().map(|b| serde_json::to_value(b).unwrap()).collect();
    for b in &mut drawn {
        b["source"] = json!("auto");
    }

    // Wrong seq leaves the request pending.
    let (status, _) = api
        .post("/runs/h/decision", json!({"request_seq": pending.request_seq + 1, "verdict": "approve"}))
        .await;
    assert_eq!(status, StatusCode::CONFLICT);
    assert_eq!(api.handle("h").await.pending_request.as_ref(), Some(&pending));
    // Malformed payloads.
    let (status, _) = api.post("/runs/h/decision", json!({"request_seq": pending.request_seq, "verdict": "boxes"})).await;
    assert_eq!(status, StatusCode::UNPROCESSABLE_ENTITY);
    let (status, _) = api.post("/runs/h/decision", json!({"request_seq": pending.request_seq, "verdict": "maybe"})).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    let (status, _) = api
        .post("/runs/h/decision", json!({"run_id": "other", "request_seq": pending.request_seq, "verdict": "approve"}))
        .await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    assert_eq!(api.handle("h").await.pending_request.as_ref(), Some(&pending));

    let msg = json!({"run_id": "h", "request_seq": pending.request_seq, "verdict": "boxes", "boxes": drawn});
    let (status, _) = api.post("/runs/h/decision", msg.clone()).await;
    assert_eq!(status, StatusCode::OK);
    let (status, _) = api.post("/runs/h/decision", msg).await;
    assert_eq!(status, StatusCode::CONFLICT, "a decision is consumed once");

    let h = api.wait_for("h", |h| h.pending_request.is_some() && h.pending_request.as_ref() != Some(&pending)).await;
    let cut = h.pending_request.unwrap();
    let rmse = match &cut.payload {
        resectsim_core::executor::RequestPayload::CutApproval { cycle, rmse_mm, threshold_mm, .. } => {
            assert_eq!(*cycle, 2);
            assert!(rmse_mm.unwrap() > *threshold_mm);
            rmse_mm.unwrap()
        }
        other => panic!("expected a cut approval, got {other:?}"),
    };
    // Boxes do not answer a cut approval.
    let (status, _) = api
        .post("/runs/h/decision", json!({"request_seq": cut.request_seq, "verdict": "boxes", "boxes": drawn_box()}))
        .await;
    assert_eq!(status, StatusCode::UNPROCESSABLE_ENTITY);
    let (status, _) = api.post("/runs/h/decision", json!({"request_seq": cut.request_seq, "verdict": "approve"})).await;
    assert_eq!(status, StatusCode::OK);
    // The approved cut came from a shifted box, so the next cycle's plan also
    // departs from its prediction; approve whatever else is asked.
    let mut answered = 2;
    let h = loop {
        let h = api
            .wait_for("h", |h| {
                h.pending_request.as_ref().is_some_and(|p| p.request_seq != cut.request_seq)
                    || matches!(h.status, HandleStatus::Completed | HandleStatus::Aborted)
            })
            .await;
        let Some(p) = h.pending_request.clone() else { break h };
        let msg = json!({"request_seq": p.request_seq, "verdict": "approve"});
        assert_eq!(api.post("/runs/h/decision", msg).await.0, StatusCode::OK);
        answered += 1;
        api.wait_for("h", |h| h.pending_request.as_ref() != Some(&p)).await;
    };
    assert_eq!(h.status, HandleStatus::Completed);
    assert!(h.pending_request.is_none());
    let file = api.file_events("h");
    let mut streams = Vec::new();
    for s in subs {
        streams.push(tokio::time::timeout(Duration::from_secs(60), s).await.unwrap().unwrap());
    }
    assert_eq!(streams[0], streams[1]);
    assert_eq!(streams[0], file);

    // The hand-drawn boxes reach the cycle record as human boxes.
    let cycles = cycles_of(&file);
    let c1 = cycles.iter().find(|c| c.cycle == 1).unwrap();
    assert_eq!(c1.segmentation_source, BoxSource::Human);
    assert!(c1.boxes.iter().all(|b| b.source == BoxSource::Human));
    assert_eq!(c1.boxes.iter().map(|b| (b.class, b.u_min, b.v_max)).collect::<Vec<_>>(),
        reference.iter().map(|b| (b.class, b.u_min, b.v_max)).collect::<Vec<_>>());
    // The console shows the gate RMSE from the log.
    let gate = file.iter().find(|e| e.kind == "gate_decision" && e.payload["cycle"] == 2).unwrap();
    assert_eq!(gate.payload["decision"]["rmse"].as_f64(), Some(rmse));
    let resolved: Vec<&Event> = file.iter().filter(|e| e.kind == "supervision_resolved").collect();
    assert_eq!(resolved.len(), answered);
    assert!(resolved.iter().all(|e| e.payload["decided_by"] == "human"));
}

fn drawn_box() -> Value {
    json!([{"class": "tumor", "u_min": 10.0, "v_min": 10.0, "u_max": 50.0, "v_max": 60.0, "cls_score": 1.0, "source": "human"}])
}

#[tokio::test(flavor = "multi_thread")]
async fn human_approving_everything_matches_headless() {
    let api = Api::new();
    api.post("/runs", json!({"run_id": "auto", "seed": 4, "config": interactive_config(), "auto_approve": true})).await;
    api.wait_done("auto").await;
    api.post("/runs", json!({"run_id": "human", "seed": 4, "config": interactive_config()})).await;
    let mut answered = 0;
    loop {
        let h = api
            .wait_for("human", |h| h.pending_request.is_some() || matches!(h.status, HandleStatus::Completed | HandleStatus::Aborted))
            .await;
        let Some(p) = h.pending_request else { break };
        let msg = match &p.payload {
            resectsim_core::executor::RequestPayload::SegmentationOverride { reference_boxes, .. } => {
                json!({"request_seq": p.request_seq, "verdict": "boxes", "boxes": reference_boxes})
            }
            _ => json!({"request_seq": p.request_seq, "verdict": "approve"}),
        };
        assert_eq!(api.post("/runs/human/decision", msg).await.0, StatusCode::OK);
        answered += 1;
    }
    assert!(answered >= 2);
    let strip = |events: Vec<Event>| -> Vec<CycleRecord> {
        cycles_of(&events).iter().map(CycleRecord::without_decision_metadata).collect()
    };
    let auto = strip(api.file_events("auto"));
    let human = strip(api.file_events("human"));
    assert!(!auto.is_empty());
    assert_eq!(auto, human);
}

#[tokio::test(flavor = "multi_thread")]
async fn rejected_segmentation_is_reimaged() {
    let api = Api::new();
    let config = json!({"injections": [{"type": "detector_failure", "cycle": 0, "classes": ["tumor"]}]});
    api.post("/runs", json!({"run_id": "r", "seed": 1, "config": config})).await;
    let p = api.wait_for("r", |h| h.pending_request.is_some()).await.pending_request.unwrap();
    assert_eq!(api.post("/runs/r/decision", json!({"request_seq": p.request_seq, "verdict": "reject"})).await.0, StatusCode::OK);
    let h = api.wait_done("r").await;
    // The re-image is clean, so the run completes normally.
    assert_eq!(h.status, HandleStatus::Completed);
    let file = api.file_events("r");
    assert_eq!(file.iter().filter(|e| e.kind == "snapshot_captured" && e.payload["cycle"] == 0).count(), 2);
}

#[tokio::test(flavor = "multi_thread")]
async fn artifacts_are_served_without_traversal() {
    let api = Api::new();
    api.post("/runs", json!({"run_id": "art", "seed": 1, "auto_approve": true})).await;
    api.wait_done("art").await;
    let (status, body) = api.get("/runs/art/artifacts/plans/c00_a0.json").await;
    assert_eq!(status, StatusCode::OK);
    let plan = resectsim_core::planner::CutPlan::from_json(std::str::from_utf8(&body).unwrap()).unwrap();
    assert_eq!(plan.paths.len(), 6);
    let (status, body) = api.get("/runs/art/artifacts/metrics.json").await;
    assert_eq!(status, StatusCode::OK);
    let metrics: resectsim_core::evaluation::ProcedureMetrics = serde_json::from_slice(&body).unwrap();
    assert!(metrics.removal_pct > 90.0);
    assert_eq!(api.get("/runs/art/artifacts/snapshots/c00_a0_depth.pgm").await.0, StatusCode::OK);
    assert_eq!(api.get("/runs/art/artifacts/nope.json").await.0, StatusCode::NOT_FOUND);
    std::fs::write(api.dir.path().join("secret.txt"), "x").unwrap();
    assert_eq!(api.get("/runs/art/artifacts/..%2Fsecret.txt").await.0, StatusCode::BAD_REQUEST);
    assert_eq!(api.get("/runs/art/artifacts/plans/..%2F..%2Fsecret.txt").await.0, StatusCode::BAD_REQUEST);
    assert_eq!(api.get("/runs/art/artifacts/%2Fetc%2Fpasswd").await.0, StatusCode::BAD_REQUEST);
}

#[tokio::test(flavor = "multi_thread")]
async fn surface_grid_matches_evaluate() {
    let api = Api::new();
    api.post("/runs", json!({"run_id": "g", "seed": 1, "auto_approve": true})).await;
    api.wait_done("g").await;
    let (status, body) = api.get("/runs/g/surfaces/c00_a0/grid").await;
    assert_eq!(status, StatusCode::OK);
    let grid: Value = serde_json::from_slice(&body).unwrap();
    let surface =
        PolySurface::from_json(&std::fs::read_to_string(api.dir.path().join("g/surfaces/c00_a0.json")).unwrap()).unwrap();
    let xs: Vec<f64> = serde_json::from_value(grid["xs"].clone()).unwrap();
    let ys: Vec<f64> = serde_json::from_value(grid["ys"].clone()).unwrap();
    let z: Vec<Vec<f64>> = serde_json::from_value(grid["z"].clone()).unwrap();
    assert_eq!((xs.len(), ys.len(), z.len()), (41, 41, 41));
    let d = surface.domain();
    assert_eq!((xs[0], xs[40], ys[0], ys[40]), (d.x_min, d.x_max, d.y_min, d.y_max));
    for (j, &y) in ys.iter().enumerate() {
        for (i, &x) in xs.iter().enumerate() {
            assert_eq!(z[j][i], surface.evaluate(x, y));
        }
    }
    assert_eq!(api.get("/runs/g/surfaces/c00_a0/grid?n=1").await.0, StatusCode::BAD_REQUEST);
    assert_eq!(api.get("/runs/g/surfaces/zz/grid").await.0, StatusCode::NOT_FOUND);
}

#[tokio::test(flavor = "multi_thread")]
async fn runs_on_disk_are_listed_after_restart() {
    let api = Api::new();
    api.post("/runs", json!({"run_id": "done", "seed": 5, "auto_approve": true})).await;
    api.wait_done("done").await;
    // A run directory whose process died after two events.
    let dead = api.dir.path().join("dead");
    std::fs::create_dir(&dead).unwrap();
    let full = std::fs::read_to_string(api.dir.path().join("done").join(EVENTS_FILE)).unwrap();
    let prefix: String = full.split_inclusive('\n').take(2).collect();
    std::fs::write(dead.join(EVENTS_FILE), format!("{prefix}{{\"seq\":3,\"t_s")).unwrap();

    let restarted = Api { app: router(AppState::new(api.dir.path().to_path_buf())), dir: api.dir };
    let (status, body) = restarted.get("/runs").await;
    assert_eq!(status, StatusCode::OK);
    let list: Vec<RunHandle> = serde_json::from_slice(&body).unwrap();
    let ids: Vec<(&str, HandleStatus)> = list.iter().map(|h| (h.run_id.as_str(), h.status)).collect();
    assert_eq!(ids, [("dead", HandleStatus::Aborted), ("done", HandleStatus::Completed)]);
    let dead_events = restarted.stream("/runs/dead/events", None).await;
    assert_eq!(dead_events.len(), 2);
    assert_eq!(dead_events.last().unwrap().seq, 2);
    let done = restarted.handle("done").await;
    assert_eq!(done.outcome, Some(resectsim_core::executor::RunStatus::Detached));
    // Decisions on a finished run are refused.
    let (status, _) = restarted.post("/runs/done/decision", json!({"request_seq": 1, "verdict": "approve"})).await;
    assert_eq!(status, StatusCode::CONFLICT);
}

#[test]
fn label_wire_names() {
    assert_eq!(serde_json::to_value(Label::Tumor).unwrap(), json!("tumor"));
    assert_eq!(serde_json::to_value(HandleStatus::AwaitingDecision).unwrap(), json!("awaiting_decision"));
}
