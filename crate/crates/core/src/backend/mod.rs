//! The model-access boundary.
//!
//! A [`Session`] hands out one [`StepTrace`] per position, strictly in order.
//! Two implementations ship here: [`TraceSession`] replays a recorded
//! `.pigtrace` file and [`SyntheticSession`] fabricates seeded traces with a
//! controlled layer-divergence profile.

pub mod codec;
mod replay;
mod synthetic;

use serde::{Deserialize, Serialize};

pub use codec::{read_trace, write_trace, TraceError, TraceFile, TraceHeader, TraceStep, FORMAT_VERSION};
pub use replay::TraceSession;
pub use synthetic::{StepKind, SyntheticSession, SyntheticSpec};

use crate::engine::{SourceSpan, StepTrace};
use crate::error::{Error, Result};
use crate::TokenId;

/// What a session can deliver.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SessionInfo {
    pub vocab_size: usize,
    /// Layers whose logits every step carries, ascending.
    pub layers: Vec<usize>,
    pub anchor_layer: usize,
    pub attention_layer: usize,
    pub prompt: Vec<TokenId>,
    pub source_span: SourceSpan,
}

impl SessionInfo {
    pub fn check_token(&self, token: TokenId) -> Result<()> {
        if (token as usize) < self.vocab_size {
            Ok(())
        } else {
            Err(Error::invalid(format!(
                "token {token} outside vocabulary of {}",
                self.vocab_size
            )))
        }
    }
}

/// Sequential step provider for one prompt.
///
/// After `next_step(None)` the caller must `advance` with the token it chose
/// before asking for the next step. `next_step(Some(t))` teacher-forces `t`
/// and moves on immediately.
pub trait Session {
    fn info(&self) -> &SessionInfo;

    /// Number of tokens appended after the prompt so far.
    fn position(&self) -> usize;

    fn next_step(&mut self, forced: Option<TokenId>) -> Result<StepTrace>;

    fn advance(&mut self, token: TokenId) -> Result<()>;

    /// `next_step`, asserting the caller's idea of the position.
    fn step_at(&mut self, position: usize, forced: Option<TokenId>) -> Result<StepTrace> {
        let expected = self.position();
        if position != expected {
            return Err(Error::OutOfOrder {
                expected,
                requested: position,
            });
        }
        self.next_step(forced)
    }
}

impl<S: Session + ?Sized> Session for &mut S {
    fn info(&self) -> &SessionInfo {
        (**self).info()
    }

    fn position(&self) -> usize {
        (**self).position()
    }

    fn next_step(&mut self, forced: Option<TokenId>) -> Result<StepTrace> {
        (**self).next_step(forced)
    }

    fn advance(&mut self, token: TokenId) -> Result<()> {
        (**self).advance(token)
    }
}

impl<S: Session + ?Sized> Session for Box<S> {
    fn info(&self) -> &SessionInfo {
        (**self).info()
    }

    fn position(&self) -> usize {
        (**self).position()
    }

    fn next_step(&mut self, forced: Option<TokenId>) -> Result<StepTrace> {
        (**self).next_step(forced)
    }

    fn advance(&mut self, token: TokenId) -> Result<()> {
        (**self).advance(token)
    }
}

/// Context bookkeeping shared by the session implementations.
#[derive(Debug, Clone)]
pub(crate) struct Cursor {
    context: Vec<TokenId>,
    prompt_len: usize,
    awaiting_advance: bool,
}

impl Cursor {
    pub(crate) fn new(prompt: &[TokenId]) -> Self {
        Cursor {
            context: prompt.to_vec(),
            prompt_len: prompt.len(),
            awaiting_advance: false,
        }
    }

    pub(crate) fn position(&self) -> usize {
        self.context.len() - self.prompt_len
    }

    pub(crate) fn context(&self) -> &[TokenId] {
        &self.context
    }

    pub(crate) fn begin(&self, info: &SessionInfo, forced: Option<TokenId>) -> Result<()> {
        if self.awaiting_advance {
            return Err(Error::Protocol(format!(
                "step {} already emitted; advance() with the chosen token first",
                self.position()
            )));
        }
        if let Some(t) = forced {
            info.check_token(t)?;
        }
        Ok(())
    }

    pub(crate) fn finish(&mut self, forced: Option<TokenId>) {
        match forced {
            Some(t) => self.context.push(t),
            None => self.awaiting_advance = true,
        }
    }

    pub(crate) fn advance(&mut self, info: &SessionInfo, token: TokenId) -> Result<()> {
        if !self.awaiting_advance {
            return Err(Error::Protocol(
                "advance() called without a pending free-running step".into(),
            ));
        }
        info.check_token(token)?;
        self.context.push(token);
        self.awaiting_advance = false;
        Ok(())
    }
}
