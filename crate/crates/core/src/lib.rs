//! Context-aware auxiliary guidance (CAAG) for attention-based image captioning.
//!
//! The crate is layered bottom-up:
//!
//! - [`diffcore`]: dense `f64` tensors, a tape-based reverse-mode graph and Adam.
//! - [`nn`]: embedding, linear, LSTM cell and additive attention blocks.
//! - [`updown`]: the primary Up-Down decoder (visual attention + two LSTMs).
//! - [`auxiliary`]: masked semantic attention over a generated sentence, LSTM3
//!   and the inference-time mixture of the two output distributions.
//! - [`metrics`]: BLEU-4, ROUGE-L and CIDEr-D, plus the self-critical advantage.
//! - [`train`]: cross-entropy, self-critical and auxiliary objectives.
//! - [`decode`]: greedy, beam and two-stage joint decoding.
//! - [`corpus`]: tokenizer, vocabulary, FVEC features and the synthetic toy world.
//! - [`config`], [`checkpoint`], [`gradcheck`]: run plumbing used by the CLI.

pub mod auxiliary;
pub mod checkpoint;
pub mod config;
pub mod corpus;
pub mod decode;
pub mod diffcore;
pub mod error;
pub mod gradcheck;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod train;
pub mod updown;

pub use error::{Error, Result};
pub use model::{CaptionModel, ModelDims};

/// Index into the vocabulary.
pub type TokenId = usize;

pub const BOS: TokenId = 0;
pub const EOS: TokenId = 1;
pub const PAD: TokenId = 2;
pub const UNK: TokenId = 3;

/// Maximum caption length in tokens, EOS included.
pub const MAX_LEN: usize = 16;
