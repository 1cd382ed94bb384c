//! Joint speech/text translation multitask training and analysis on a
//! synthetic paired-modality corpus.
//!
//! The crate is organized bottom-up: a tape autodiff engine ([`graph`]),
//! the dual-encoder shared-decoder transformer ([`model`]), the training
//! objectives ([`losses`]), corpus synthesis ([`data`]), the training
//! loop with checkpoint I/O ([`trainer`], [`checkpoint`], [`optim`]),
//! decoding and scoring ([`eval`]), and the two model-analysis
//! instruments ([`analysis`]).

pub mod analysis;
pub mod checkpoint;
pub mod data;
pub mod error;
pub mod eval;
pub mod graph;
pub mod losses;
pub mod model;
pub mod optim;
pub mod rng;
pub mod tensor;
pub mod trainer;
