// SPDX-License-Identifier: MIT OR Apache-2.0

use alloc::vec::Vec;

use super::{forward, HookSet, ModelConfig, MultimodalSequence, Weights};
use crate::error::{invalid, Result};

/// Index of the largest value; ties go to the lowest index.
pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if *x > v[best] {
            best = i;
        }
    }
    best
}

/// Greedy decoding without a KV cache: each step re-runs the full sequence
/// with the same hooks attached. Stops after emitting `stop`, after
/// `max_new` tokens, or when the positional table is exhausted.
pub fn greedy_decode(
    config: &ModelConfig,
    weights: &Weights,
    seq: &MultimodalSequence,
    hooks: &mut HookSet<'_>,
    max_new: usize,
    stop: usize,
) -> Result<Vec<usize>> {
    if max_new == 0 {
        return Err(invalid("max_new", "must be at least 1"));
    }
    let mut seq = seq.clone();
    let mut out = Vec::with_capacity(max_new);
    loop {
        let fwd = forward(config, weights, &seq, hooks)?;
        let next = argmax(fwd.last_logits());
        out.push(next);
        if next == stop || out.len() == max_new || seq.len() == config.max_seq {
            return Ok(out);
        }
        seq.push_text(config, weights, next)?;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn argmax_first_index_tie_break() {
        assert_eq!(argmax(&[1.0, 3.0, 3.0, 2.0]), 1);
        assert_eq!(argmax(&[0.0; 4]), 0);
    }
}
