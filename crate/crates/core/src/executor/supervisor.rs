use std::io::BufRead;
use std::sync::mpsc::{Receiver, RecvTimeoutError, Sender};
use std::time::Duration;

use serde::{Deserialize, Serialize};

use super::record::Event;
use super::ExecError;
use crate::geometry::{BoundingBox2D, BoxSource};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RequestKind {
    SegmentationOverride,
    CutApproval,
}

/// What the supervisor is asked to look at.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum RequestPayload {
    SegmentationOverride {
        cycle: usize,
        snapshot_id: String,
        reason: String,
        proposed_boxes: Vec<BoundingBox2D>,
        /// Simulator ground truth; what a careful human would draw.
        reference_boxes: Vec<BoundingBox2D>,
    },
    CutApproval {
        cycle: usize,
        cut_index: usize,
        rmse_mm: Option<f64>,
        threshold_mm: f64,
        plan_id: String,
        predicted_plan_id: Option<String>,
    },
}

impl RequestPayload {
    pub fn kind(&self) -> RequestKind {
        match self {
            RequestPayload::SegmentationOverride { .. } => RequestKind::SegmentationOverride,
            RequestPayload::CutApproval { .. } => RequestKind::CutApproval,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PendingRequest {
    /// Sequence number of the `supervision_requested` event.
    pub request_seq: u64,
    pub payload: RequestPayload,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VerdictKind {
    Approve,
    Reject,
    Boxes,
}

#[derive(Clone, Debug, PartialEq)]
pub enum Decision {
    Approve,
    Reject,
    /// Hand-drawn boxes replacing the detector output.
    Boxes(Vec<BoundingBox2D>),
}

impl Decision {
    pub fn verdict(&self) -> VerdictKind {
        match self {
            Decision::Approve => VerdictKind::Approve,
            Decision::Reject => VerdictKind::Reject,
            Decision::Boxes(_) => VerdictKind::Boxes,
        }
    }

    /// Whether this decision answers a request of `kind`.
    pub fn fits(&self, kind: RequestKind) -> bool {
        !matches!((self, kind), (Decision::Boxes(_), RequestKind::CutApproval))
    }
}

/// Wire form of a supervisor decision.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DecisionMessage {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub run_id: Option<String>,
    pub request_seq: u64,
    pub verdict: VerdictKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub boxes: Option<Vec<BoundingBox2D>>,
}

impl DecisionMessage {
    pub fn from_json(bytes: &[u8]) -> Result<DecisionMessage, ExecError> {
        serde_json::from_slice(bytes).map_err(|e| ExecError::Decision(e.to_string()))
    }

    /// Checks the payload shape. Boxes are forced to `source = human`.
    pub fn into_decision(self, width: usize, height: usize) -> Result<Decision, ExecError> {
        match (self.verdict, self.boxes) {
            (VerdictKind::Approve, None) => Ok(Decision::Approve),
            (VerdictKind::Reject, None) => Ok(Decision::Reject),
            (VerdictKind::Boxes, Some(boxes)) if !boxes.is_empty() => {
                let mut out = Vec::with_capacity(boxes.len());
                for mut b in boxes {
                    b.source = BoxSource::Human;
                    b.validate(width, height).map_err(|e| ExecError::Decision(e.to_string()))?;
                    out.push(b);
                }
                Ok(Decision::Boxes(out))
            }
            (VerdictKind::Boxes, _) => Err(ExecError::Decision("boxes verdict needs a non-empty box list".into())),
            (_, Some(_)) => Err(ExecError::Decision("only a boxes verdict may carry boxes".into())),
        }
    }

    pub fn from_decision(request_seq: u64, d: &Decision) -> DecisionMessage {
        DecisionMessage {
            run_id: None,
            request_seq,
            verdict: d.verdict(),
            boxes: match d {
                Decision::Boxes(b) => Some(b.clone()),
                _ => None,
            },
        }
    }
}

pub trait Supervisor {
    fn decide(&mut self, request: &PendingRequest) -> Result<Decision, ExecError>;

    /// Whether decisions come from a person rather than a fixed policy.
    fn is_human(&self) -> bool {
        true
    }
}

/// Headless policy: approve every cut and answer segmentation requests with
/// the reference boxes.
#[derive(Clone, Copy, Debug, Default)]
pub struct AutoApprove;

impl Supervisor for AutoApprove {
    fn decide(&mut self, request: &PendingRequest) -> Result<Decision, ExecError> {
        Ok(match &request.payload {
            RequestPayload::CutApproval { .. } => Decision::Approve,
            RequestPayload::SegmentationOverride { reference_boxes, .. } => Decision::Boxes(
                reference_boxes.iter().map(|b| BoundingBox2D { source: BoxSource::Human, ..*b }).collect(),
            ),
        })
    }

    fn is_human(&self) -> bool {
        false
    }
}

/// Rejects every request; useful for exercising the abort path.
#[derive(Clone, Copy, Debug, Default)]
pub struct RejectAll;

impl Supervisor for RejectAll {
    fn decide(&mut self, _: &PendingRequest) -> Result<Decision, ExecError> {
        Ok(Decision::Reject)
    }
}

/// Forwards requests over a channel and blocks on the reply.
pub struct ChannelSupervisor {
    pub requests: Sender<PendingRequest>,
    pub decisions: Receiver<(u64, Decision)>,
    /// `None` waits indefinitely.
    pub timeout: Option<Duration>,
}

impl Supervisor for ChannelSupervisor {
    fn decide(&mut self, request: &PendingRequest) -> Result<Decision, ExecError> {
        self.requests.send(request.clone()).map_err(|_| ExecError::SupervisorGone)?;
        loop {
            let (seq, decision) = match self.timeout {
                Some(t) => self.decisions.recv_timeout(t).map_err(|e| match e {
                    RecvTimeoutError::Timeout => ExecError::SupervisionTimeout,
                    RecvTimeoutError::Disconnected => ExecError::SupervisorGone,
                })?,
                None => self.decisions.recv().map_err(|_| ExecError::SupervisorGone)?,
            };
            // Stale answers to earlier requests are dropped.
            if seq == request.request_seq && decision.fits(request.payload.kind()) {
                return Ok(decision);
            }
        }
    }
}

/// Replays the decisions recorded in an event log, in order.
pub struct ReplaySupervisor {
    decisions: std::vec::IntoIter<(RequestKind, Decision)>,
}

impl ReplaySupervisor {
    pub fn from_events(events: &[Event]) -> Result<ReplaySupervisor, ExecError> {
        let mut kinds = std::collections::HashMap::new();
        let mut out = Vec::new();
        for e in events {
            match e.kind.as_str() {
                "supervision_requested" => {
                    let p: RequestPayload = serde_json::from_value(e.payload["request"].clone())
                        .map_err(|err| ExecError::Record(err.to_string()))?;
                    kinds.insert(e.seq, p.kind());
                }
                "supervision_resolved" => {
                    let m: DecisionMessage = serde_json::from_value(e.payload["decision"].clone())
                        .map_err(|err| ExecError::Record(err.to_string()))?;
                    let kind = *kinds
                        .get(&m.request_seq)
                        .ok_or_else(|| ExecError::Record(format!("decision for unknown request {}", m.request_seq)))?;
                    let d = match (m.verdict, m.boxes) {
                        (VerdictKind::Approve, _) => Decision::Approve,
                        (VerdictKind::Reject, _) => Decision::Reject,
                        (VerdictKind::Boxes, b) => Decision::Boxes(b.unwrap_or_default()),
                    };
                    out.push((kind, d));
                }
                _ => {}
            }
        }
        Ok(ReplaySupervisor { decisions: out.into_iter() })
    }
}

impl Supervisor for ReplaySupervisor {
    fn decide(&mut self, request: &PendingRequest) -> Result<Decision, ExecError> {
        match self.decisions.next() {
            Some((kind, d)) if kind == request.payload.kind() => Ok(d),
            Some((kind, _)) => Err(ExecError::Replay(format!(
                "recorded {kind:?} decision but run asked for {:?}",
                request.payload.kind()
            ))),
            None => Err(ExecError::Replay("run asked for more decisions than were recorded".into())),
        }
    }
}

/// Interactive prompt on a terminal: `a` approves, `r` rejects. Segmentation
/// requests can also be answered with `g` to accept the reference boxes.
pub struct TerminalSupervisor<R: BufRead> {
    input: R,
}

impl<R: BufRead> TerminalSupervisor<R> {
    pub fn new(input: R) -> Self {
        TerminalSupervisor { input }
    }
}

impl<R: BufRead> Supervisor for TerminalSupervisor<R> {
    fn decide(&mut self, request: &PendingRequest) -> Result<Decision, ExecError> {
        loop {
            match &request.payload {
                RequestPayload::CutApproval { cycle, cut_index, rmse_mm, threshold_mm, .. } => eprintln!(
                    "cycle {cycle}: cut {cut_index} plan differs from prediction (rmse {} mm, threshold {threshold_mm} mm). approve? [a/r]",
                    rmse_mm.map_or("n/a".to_string(), |r| format!("{r:.3}"))
                ),
                RequestPayload::SegmentationOverride { cycle, reason, .. } => {
                    eprintln!("cycle {cycle}: segmentation needs review ({reason}). [a]ccept / [r]eject / [g]round-truth boxes")
                }
            }
            let mut line = String::new();
            if self.input.read_line(&mut line).map_err(|e| ExecError::Io(e.to_string()))? == 0 {
                return Err(ExecError::SupervisorGone);
            }
            match (line.trim(), &request.payload) {
                ("a", _) => return Ok(Decision::Approve),
                ("r", _) => return Ok(Decision::Reject),
                ("g", RequestPayload::SegmentationOverride { reference_boxes, .. }) => {
                    return Ok(Decision::Boxes(
                        reference_boxes.iter().map(|b| BoundingBox2D { source: BoxSource::Human, ..*b }).collect(),
                    ))
                }
                _ => continue,
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::Label;

    fn bx() -> BoundingBox2D {
        BoundingBox2D {
            class: Label::Tumor,
            u_min: 1.0,
            v_min: 1.0,
            u_max: 5.0,
            v_max: 6.0,
            cls_score: 0.3,
            source: BoxSource::Auto,
        }
    }

    #[test]
    fn decision_message_validation() {
        let m = DecisionMessage::from_json(br#"{"request_seq":4,"verdict":"approve"}"#).unwrap();
        assert_eq!(m.into_decision(10, 10).unwrap(), Decision::Approve);
        let m = DecisionMessage { run_id: None, request_seq: 1, verdict: VerdictKind::Boxes, boxes: Some(vec![bx()]) };
        match m.into_decision(10, 10).unwrap() {
            Decision::Boxes(b) => assert_eq!(b[0].source, BoxSource::Human),
            d => panic!("{d:?}"),
        }
        let empty = DecisionMessage { run_id: None, request_seq: 1, verdict: VerdictKind::Boxes, boxes: None };
        assert!(empty.into_decision(10, 10).is_err());
        let outside = DecisionMessage { run_id: None, request_seq: 1, verdict: VerdictKind::Boxes, boxes: Some(vec![bx()]) };
        assert!(outside.into_decision(4, 4).is_err());
        assert!(DecisionMessage::from_json(br#"{"request_seq":4,"verdict":"maybe"}"#).is_err());
    }

    #[test]
    fn boxes_do_not_answer_cut_approval() {
        assert!(!Decision::Boxes(vec![]).fits(RequestKind::CutApproval));
        assert!(Decision::Approve.fits(RequestKind::CutApproval));
        assert!(Decision::Boxes(vec![]).fits(RequestKind::SegmentationOverride));
    }

    #[test]
    fn terminal_prompt_reads_answers() {
        let req = PendingRequest {
            request_seq: 3,
            payload: RequestPayload::CutApproval {
                cycle: 1,
                cut_index: 1,
                rmse_mm: Some(2.0),
                threshold_mm: 1.0,
                plan_id: "p".into(),
                predicted_plan_id: None,
            },
        };
        let mut s = TerminalSupervisor::new(&b"x\nr\n"[..]);
        assert_eq!(s.decide(&req).unwrap(), Decision::Reject);
        let mut eof = TerminalSupervisor::new(&b""[..]);
        assert!(matches!(eof.decide(&req), Err(ExecError::SupervisorGone)));
    }
}
