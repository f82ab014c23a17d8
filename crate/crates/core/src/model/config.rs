// SPDX-License-Identifier: MIT OR Apache-2.0

use alloc::format;

use crate::error::{invalid, Result};
use crate::synth;

/// Architecture hyper-parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    /// Number of decoder blocks `L`.
    pub n_layers: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub vocab_size: usize,
    /// Image grid as `(rows, cols)`; one visual token per cell.
    pub patch_grid: (usize, usize),
    /// Length of each cell's feature vector.
    pub cell_features: usize,
    pub max_seq: usize,
    pub ln_eps: f64,
    /// Reuse the token embedding table as the output head.
    pub tied_head: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            n_layers: 8,
            d_model: 64,
            n_heads: 4,
            d_ff: 256,
            vocab_size: synth::Vocab::standard().len(),
            patch_grid: (6, 6),
            cell_features: synth::CELL_FEATURES,
            max_seq: 64,
            ln_eps: 1e-5,
            tied_head: false,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_layers < 3 {
            return Err(invalid("n_layers", format!("need at least 3, got {}", self.n_layers)));
        }
        if self.d_model == 0 || self.n_heads == 0 || self.d_model % self.n_heads != 0 {
            return Err(invalid(
                "n_heads",
                format!("d_model {} not divisible by n_heads {}", self.d_model, self.n_heads),
            ));
        }
        if self.d_ff == 0 {
            return Err(invalid("d_ff", "must be positive"));
        }
        if self.vocab_size == 0 {
            return Err(invalid("vocab_size", "must be positive"));
        }
        if self.cell_features == 0 {
            return Err(invalid("cell_features", "must be positive"));
        }
        if self.patch_grid.0 * self.patch_grid.1 > self.max_seq {
            return Err(invalid(
                "max_seq",
                format!("{} cannot hold {} visual tokens", self.max_seq, self.n_cells()),
            ));
        }
        if !(self.ln_eps > 0.0) {
            return Err(invalid("ln_eps", "must be positive"));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn n_cells(&self) -> usize {
        self.patch_grid.0 * self.patch_grid.1
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_is_valid() {
        ModelConfig::default().validate().unwrap();
    }

    #[test]
    fn rejects_indivisible_heads_and_shallow_models() {
        let c = ModelConfig {
            n_heads: 5,
            ..ModelConfig::default()
        };
        assert!(c.validate().is_err());
        let c = ModelConfig {
            n_layers: 2,
            ..ModelConfig::default()
        };
        assert!(c.validate().is_err());
    }
}
