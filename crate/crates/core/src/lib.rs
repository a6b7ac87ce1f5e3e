//! Pointer-generator decoding over recorded or synthetic model traces.
//!
//! At each step the next-token distribution is a mixture of the anchor-layer
//! softmax and a copy distribution built from attention over a source span.
//! The mixing weight grows with the divergence between the anchor layer and
//! a set of earlier layers, so tokens still being revised late in the network
//! lean on the source document.
//!
//! ```
//! use ptrmix::backend::{StepKind, SyntheticSession, SyntheticSpec};
//! use ptrmix::decoder::{generate, SamplingParams};
//! use ptrmix::engine::PigConfig;
//!
//! let spec = SyntheticSpec::new(7, 16, 8, StepKind::parse_plan("f,c,f").unwrap());
//! let session = SyntheticSession::new(spec).unwrap();
//! let config = PigConfig::new(7, (0..7).collect());
//! let out = generate(session, &config, &SamplingParams::greedy()).unwrap();
//! assert_eq!(out.tokens.len(), 3);
//! ```

pub mod backend;
pub mod decoder;
pub mod engine;
pub mod error;
pub mod eval;
pub mod kernels;
pub mod prob;

pub use error::{Error, Result};

pub type TokenId = u32;
