// SPDX-License-Identifier: MIT OR Apache-2.0

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use super::ModelConfig;
use crate::error::{shape, Result};
use crate::numerics::{Matrix, Rng};

/// Parameters of one decoder block. Vectors are stored as `1 x n` matrices.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerWeights {
    pub ln1_gain: Matrix,
    pub ln1_bias: Matrix,
    pub wq: Matrix,
    pub wk: Matrix,
    pub wv: Matrix,
    pub wo: Matrix,
    pub ln2_gain: Matrix,
    pub ln2_bias: Matrix,
    pub w1: Matrix,
    pub b1: Matrix,
    pub w2: Matrix,
    pub b2: Matrix,
}

/// All model parameters.
///
/// The same type doubles as the gradient container (see
/// [`crate::train::GradientSet`]), so shapes always mirror one another.
#[derive(Debug, Clone, PartialEq)]
pub struct Weights {
    pub patch_proj: Matrix,
    pub patch_bias: Matrix,
    pub tok_emb: Matrix,
    pub pos_emb: Matrix,
    pub layers: Vec<LayerWeights>,
    pub lnf_gain: Matrix,
    pub lnf_bias: Matrix,
    /// Untied output head `d_model x vocab`; `None` when tied to `tok_emb`.
    pub head: Option<Matrix>,
}

impl LayerWeights {
    fn zeros(c: &ModelConfig) -> Self {
        let d = c.d_model;
        Self {
            ln1_gain: Matrix::zeros(1, d),
            ln1_bias: Matrix::zeros(1, d),
            wq: Matrix::zeros(d, d),
            wk: Matrix::zeros(d, d),
            wv: Matrix::zeros(d, d),
            wo: Matrix::zeros(d, d),
            ln2_gain: Matrix::zeros(1, d),
            ln2_bias: Matrix::zeros(1, d),
            w1: Matrix::zeros(d, c.d_ff),
            b1: Matrix::zeros(1, c.d_ff),
            w2: Matrix::zeros(c.d_ff, d),
            b2: Matrix::zeros(1, d),
        }
    }

    fn named(&self) -> [(&'static str, &Matrix); 12] {
        [
            ("ln1_gain", &self.ln1_gain),
            ("ln1_bias", &self.ln1_bias),
            ("wq", &self.wq),
            ("wk", &self.wk),
            ("wv", &self.wv),
            ("wo", &self.wo),
            ("ln2_gain", &self.ln2_gain),
            ("ln2_bias", &self.ln2_bias),
            ("w1", &self.w1),
            ("b1", &self.b1),
            ("w2", &self.w2),
            ("b2", &self.b2),
        ]
    }

    fn named_mut(&mut self) -> [(&'static str, &mut Matrix); 12] {
        [
            ("ln1_gain", &mut self.ln1_gain),
            ("ln1_bias", &mut self.ln1_bias),
            ("wq", &mut self.wq),
            ("wk", &mut self.wk),
            ("wv", &mut self.wv),
            ("wo", &mut self.wo),
            ("ln2_gain", &mut self.ln2_gain),
            ("ln2_bias", &mut self.ln2_bias),
            ("w1", &mut self.w1),
            ("b1", &mut self.b1),
            ("w2", &mut self.w2),
            ("b2", &mut self.b2),
        ]
    }
}

impl Weights {
    /// Zero-filled parameters with the shapes implied by `config`.
    pub fn zeros(config: &ModelConfig) -> Self {
        let d = config.d_model;
        Self {
            patch_proj: Matrix::zeros(config.cell_features, d),
            patch_bias: Matrix::zeros(1, d),
            tok_emb: Matrix::zeros(config.vocab_size, d),
            pos_emb: Matrix::zeros(config.max_seq, d),
            layers: (0..config.n_layers).map(|_| LayerWeights::zeros(config)).collect(),
            lnf_gain: Matrix::zeros(1, d),
            lnf_bias: Matrix::zeros(1, d),
            head: (!config.tied_head).then(|| Matrix::zeros(d, config.vocab_size)),
        }
    }

    /// Normal(0, `std`) matrices, unit layer-norm gains, zero biases.
    pub fn init(config: &ModelConfig, rng: &mut Rng, std: f64) -> Self {
        let mut w = Self::zeros(config);
        for (name, m) in w.tensors_mut() {
            if name.ends_with("gain") {
                m.data_mut().iter_mut().for_each(|v| *v = 1.0);
            } else if !is_bias(&name) {
                m.data_mut().iter_mut().for_each(|v| *v = std * rng.normal());
            }
        }
        w
    }

    /// Parameters in canonical (checkpoint) order with dotted names.
    pub fn tensors(&self) -> Vec<(String, &Matrix)> {
        let mut out: Vec<(String, &Matrix)> = vec![
            ("patch_proj".into(), &self.patch_proj),
            ("patch_bias".into(), &self.patch_bias),
            ("tok_emb".into(), &self.tok_emb),
            ("pos_emb".into(), &self.pos_emb),
        ];
        for (i, layer) in self.layers.iter().enumerate() {
            for (n, m) in layer.named() {
                out.push((format!("layers.{i}.{n}"), m));
            }
        }
        out.push(("lnf_gain".into(), &self.lnf_gain));
        out.push(("lnf_bias".into(), &self.lnf_bias));
        if let Some(h) = &self.head {
            out.push(("head".into(), h));
        }
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<(String, &mut Matrix)> {
        let mut out: Vec<(String, &mut Matrix)> = vec![
            ("patch_proj".into(), &mut self.patch_proj),
            ("patch_bias".into(), &mut self.patch_bias),
            ("tok_emb".into(), &mut self.tok_emb),
            ("pos_emb".into(), &mut self.pos_emb),
        ];
        for (i, layer) in self.layers.iter_mut().enumerate() {
            for (n, m) in layer.named_mut() {
                out.push((format!("layers.{i}.{n}"), m));
            }
        }
        out.push(("lnf_gain".into(), &mut self.lnf_gain));
        out.push(("lnf_bias".into(), &mut self.lnf_bias));
        if let Some(h) = &mut self.head {
            out.push(("head".into(), h));
        }
        out
    }

    /// Total number of scalar parameters.
    pub fn n_params(&self) -> usize {
        self.tensors().iter().map(|(_, m)| m.data().len()).sum()
    }

    /// Checks every tensor against the shapes `config` implies.
    pub fn check_shapes(&self, config: &ModelConfig) -> Result<()> {
        let expected = Weights::zeros(config);
        let ours = self.tensors();
        let theirs = expected.tensors();
        if ours.len() != theirs.len() {
            return Err(shape(
                "Weights",
                format!("{} tensors, config implies {}", ours.len(), theirs.len()),
            ));
        }
        for ((n, a), (_, b)) in ours.iter().zip(&theirs) {
            if a.shape() != b.shape() {
                return Err(shape("Weights", format!("{n}: {:?} vs {:?}", a.shape(), b.shape())));
            }
        }
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|(_, m)| m.is_finite())
    }

    /// Output projection as `d_model x vocab`, materialising the transpose
    /// of the embedding table when tied.
    pub(crate) fn head_matrix(&self) -> HeadRef<'_> {
        match &self.head {
            Some(h) => HeadRef::Untied(h),
            None => HeadRef::Tied(&self.tok_emb),
        }
    }
}

fn is_bias(name: &str) -> bool {
    name.ends_with("bias") || name.ends_with(".b1") || name.ends_with(".b2")
}

#[derive(Debug, Clone, Copy)]
pub(crate) enum HeadRef<'a> {
    Untied(&'a Matrix),
    /// `vocab x d_model` table used transposed.
    Tied(&'a Matrix),
}
