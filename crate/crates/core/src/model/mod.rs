// SPDX-License-Identifier: MIT OR Apache-2.0

//! Toy multimodal decoder.
//!
//! Grid-image cells are linearly projected into the residual stream, text
//! tokens are looked up in an embedding table, and both share one learned
//! positional table. Visual positions always precede textual ones and the
//! whole sequence is causally masked. Each pre-norm block contributes
//!
//! ```text
//! h(l) = h(l-1) + a(l) + m(l)
//! a(l) = MHSA(LN1(h(l-1)))
//! m(l) = FFN(LN2(h(l-1) + a(l)))
//! ```
//!
//! and every `a(l)`, `m(l)`, `h(l)` (plus the post-embedding `h(-1)`) is a
//! hook point that observers can read and interveners can rewrite.

mod config;
mod decode;
mod forward;
mod hooks;
mod sequence;
mod weights;

pub use config::ModelConfig;
pub use decode::{argmax, greedy_decode};
pub use forward::{
    embed, final_logits, forward, forward_resume, layer_forward, token_prob, ActivationTrace,
    ForwardOutput, LayerOutput, LayerTrace,
};
pub(crate) use forward::{forward_cached, ForwardCache, LayerCache};
pub use hooks::{Component, Edit, EditKind, HookPoint, HookSet, Intervener, Observer};
pub use sequence::{Category, Modality, MultimodalSequence, SequenceInput, Token};
pub use weights::{LayerWeights, Weights};
