use std::collections::VecDeque;

use super::codec::{TraceFile, TraceHeader};
use super::{Cursor, Session, SessionInfo};
use crate::engine::StepTrace;
use crate::error::{Error, Result};
use crate::TokenId;

/// Replays a recorded trace, one step per position.
///
/// The recorded logits do not depend on the tokens the caller feeds back, so
/// a replay is only faithful while the caller follows the recorded path.
/// Steps recorded with a forced token reject any other forced token.
#[derive(Debug, Clone)]
pub struct TraceSession {
    info: SessionInfo,
    meta: serde_json::Map<String, serde_json::Value>,
    recorded_forced: Vec<Option<TokenId>>,
    steps: VecDeque<super::TraceStep>,
    cursor: Cursor,
}

impl TraceSession {
    pub fn new(file: TraceFile) -> Self {
        let TraceFile {
            header: TraceHeader { info, meta },
            steps,
        } = file;
        let recorded_forced = steps.iter().map(|s| s.forced).collect();
        let cursor = Cursor::new(&info.prompt);
        TraceSession {
            info,
            meta,
            recorded_forced,
            steps: steps.into(),
            cursor,
        }
    }

    pub fn open(path: impl AsRef<std::path::Path>) -> Result<Self> {
        Ok(TraceSession::new(TraceFile::read_path(path)?))
    }

    pub fn meta(&self) -> &serde_json::Map<String, serde_json::Value> {
        &self.meta
    }

    /// Forced token of every recorded step, `None` where it ran free.
    pub fn recorded_forced(&self) -> &[Option<TokenId>] {
        &self.recorded_forced
    }

    pub fn total_steps(&self) -> usize {
        self.recorded_forced.len()
    }
}

impl Session for TraceSession {
    fn info(&self) -> &SessionInfo {
        &self.info
    }

    fn position(&self) -> usize {
        self.cursor.position()
    }

    fn next_step(&mut self, forced: Option<TokenId>) -> Result<StepTrace> {
        self.cursor.begin(&self.info, forced)?;
        let position = self.cursor.position();
        let step = self
            .steps
            .front()
            .ok_or(Error::EndOfTrace { position })?;
        if let (Some(want), Some(got)) = (step.forced, forced) {
            if want != got {
                return Err(Error::Protocol(format!(
                    "step {position} was recorded with forced token {want}, replay requested {got}"
                )));
            }
        }
        let step = self.steps.pop_front().expect("front checked above");
        let trace = StepTrace::new(
            self.cursor.context().to_vec(),
            self.info.source_span,
            step.logits,
            step.attention,
        )?;
        self.cursor.finish(forced);
        Ok(trace)
    }

    fn advance(&mut self, token: TokenId) -> Result<()> {
        self.cursor.advance(&self.info, token)
    }
}
