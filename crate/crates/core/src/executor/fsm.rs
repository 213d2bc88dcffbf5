use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Robot subtask state within one cut cycle.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum FsmState {
    ReachIn,
    Resect,
    Retract,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FsmEvent {
    ToolAligned,
    CutComplete,
    Retracted,
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
#[error("illegal transition: {event:?} in state {state}")]
pub struct ProtocolError {
    pub state: FsmState,
    pub event: FsmEvent,
}

impl fmt::Display for FsmState {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            FsmState::ReachIn => "ReachIn",
            FsmState::Resect => "Resect",
            FsmState::Retract => "Retract",
        })
    }
}

/// The only legal moves are ReachIn -> Resect -> Retract -> ReachIn.
pub fn fsm_step(state: FsmState, event: FsmEvent) -> Result<FsmState, ProtocolError> {
    match (state, event) {
        (FsmState::ReachIn, FsmEvent::ToolAligned) => Ok(FsmState::Resect),
        (FsmState::Resect, FsmEvent::CutComplete) => Ok(FsmState::Retract),
        (FsmState::Retract, FsmEvent::Retracted) => Ok(FsmState::ReachIn),
        _ => Err(ProtocolError { state, event }),
    }
}

/// True when `trace` is one or more repetitions of ReachIn, Resect, Retract.
pub fn is_regular_trace(trace: &[FsmState]) -> bool {
    const CYCLE: [FsmState; 3] = [FsmState::ReachIn, FsmState::Resect, FsmState::Retract];
    !trace.is_empty() && trace.len() % 3 == 0 && trace.chunks(3).all(|c| c == CYCLE)
}
