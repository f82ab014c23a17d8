// SPDX-License-Identifier: MIT OR Apache-2.0

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use super::weights::HeadRef;
use super::{
    Category, Component, HookPoint, HookSet, LayerWeights, Modality, ModelConfig,
    MultimodalSequence, SequenceInput, Token, Weights,
};
use crate::error::{invalid, shape, Error, Result};
use crate::numerics::{gelu_tanh, softmax, softmax_in_place, Matrix};

/// Embeds image cells and text ids into the residual stream.
pub fn embed(config: &ModelConfig, weights: &Weights, input: &SequenceInput) -> Result<MultimodalSequence> {
    let m = input.cells.rows();
    let len = input.len();
    if len > config.max_seq {
        return Err(Error::SequenceOverflow {
            len,
            max: config.max_seq,
        });
    }
    if m > 0 && input.cells.cols() != config.cell_features {
        return Err(shape(
            "embed",
            format!("cells have {} features, model expects {}", input.cells.cols(), config.cell_features),
        ));
    }
    if input.categories.len() != len {
        return Err(invalid(
            "categories",
            format!("{} annotations for {len} positions", input.categories.len()),
        ));
    }
    if let Some(&id) = input.text.iter().find(|&&id| id >= config.vocab_size) {
        return Err(Error::UnknownToken {
            id,
            vocab: config.vocab_size,
        });
    }
    let tokens: Vec<Token> = (0..len)
        .map(|i| Token {
            modality: if i < m { Modality::Visual } else { Modality::Textual },
            id: if i < m { i } else { input.text[i - m] },
            category: input.categories[i],
        })
        .collect();
    MultimodalSequence::check_annotation(&tokens)?;

    let d = config.d_model;
    let mut emb = Matrix::zeros(len, d);
    if m > 0 {
        let mut vis = input.cells.matmul(&weights.patch_proj)?;
        vis.add_row_bias(&weights.patch_bias);
        for i in 0..m {
            emb.row_mut(i).copy_from_slice(vis.row(i));
        }
    }
    for (i, &id) in input.text.iter().enumerate() {
        emb.row_mut(m + i).copy_from_slice(weights.tok_emb.row(id));
    }
    for i in 0..len {
        let pos = weights.pos_emb.row(i);
        emb.row_mut(i).iter_mut().zip(pos).for_each(|(e, p)| *e += p);
    }
    let cells = if m > 0 {
        input.cells.clone()
    } else {
        Matrix::zeros(0, config.cell_features)
    };
    Ok(MultimodalSequence {
        tokens,
        visual_len: m,
        embeddings: emb,
        cells,
    })
}

impl MultimodalSequence {
    /// Appends one generated text token, moving the `Last` annotation onto it.
    pub fn push_text(&mut self, config: &ModelConfig, weights: &Weights, id: usize) -> Result<()> {
        if id >= config.vocab_size {
            return Err(Error::UnknownToken {
                id,
                vocab: config.vocab_size,
            });
        }
        let pos = self.tokens.len();
        if pos + 1 > config.max_seq {
            return Err(Error::SequenceOverflow {
                len: pos + 1,
                max: config.max_seq,
            });
        }
        if let Some(t) = self.tokens.last_mut() {
            if t.category == Category::Last {
                t.category = Category::Other;
            }
        }
        self.tokens.push(Token {
            modality: Modality::Textual,
            id,
            category: Category::Last,
        });
        let d = config.d_model;
        let mut data = core::mem::replace(&mut self.embeddings, Matrix::zeros(0, 0)).into_vec();
        data.extend(
            weights
                .tok_emb
                .row(id)
                .iter()
                .zip(weights.pos_emb.row(pos))
                .map(|(t, p)| t + p),
        );
        self.embeddings = Matrix::from_vec(pos + 1, d, data)?;
        Ok(())
    }
}

/// Activations of one block, post-intervention.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerTrace {
    pub attn: Matrix,
    pub ffn: Matrix,
    pub hidden: Matrix,
    /// Per-head `seq x seq` attention probabilities (zero above the diagonal).
    pub attn_weights: Vec<Matrix>,
}

/// Output of [`layer_forward`].
pub type LayerOutput = LayerTrace;

/// Every hook-point activation of one forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct ActivationTrace {
    /// `h(-1)`, the post-embedding residual stream.
    pub embed: Matrix,
    pub layers: Vec<LayerTrace>,
}

impl ActivationTrace {
    pub fn n_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn seq_len(&self) -> usize {
        self.embed.rows()
    }

    /// `h(l)` for `l` in `-1..L`.
    pub fn hidden(&self, layer: isize) -> &Matrix {
        if layer < 0 {
            &self.embed
        } else {
            &self.layers[layer as usize].hidden
        }
    }

    pub fn get(&self, point: HookPoint) -> Option<&Matrix> {
        match point {
            HookPoint::Embed => Some(&self.embed),
            HookPoint::Block { layer, component } => self.layers.get(layer).map(|l| match component {
                Component::Attn => &l.attn,
                Component::Ffn => &l.ffn,
                Component::Hidden => &l.hidden,
            }),
        }
    }

    /// Largest element-wise deviation from `h(l) = h(l-1) + a(l) + m(l)`.
    pub fn residual_defect(&self) -> f64 {
        let mut worst = 0.0f64;
        for (l, layer) in self.layers.iter().enumerate() {
            let prev = self.hidden(l as isize - 1);
            for i in 0..layer.hidden.data().len() {
                let sum = prev.data()[i] + layer.attn.data()[i] + layer.ffn.data()[i];
                worst = worst.max(libm::fabs(layer.hidden.data()[i] - sum));
            }
        }
        worst
    }
}

/// Logits for every position plus the full activation trace.
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardOutput {
    /// `seq x vocab`.
    pub logits: Matrix,
    pub trace: ActivationTrace,
}

impl ForwardOutput {
    pub fn last_logits(&self) -> &[f64] {
        self.logits.row(self.logits.rows() - 1)
    }
}

#[derive(Debug, Clone)]
pub(crate) struct LayerCache {
    pub x1hat: Matrix,
    pub inv1: Vec<f64>,
    pub x1: Matrix,
    pub q: Matrix,
    pub k: Matrix,
    pub v: Matrix,
    pub concat: Matrix,
    pub x2hat: Matrix,
    pub inv2: Vec<f64>,
    pub x2: Matrix,
    pub u: Matrix,
    /// Inner GELU tanh at `u`.
    pub t: Matrix,
    pub g: Matrix,
}

#[derive(Debug, Clone)]
pub(crate) struct ForwardCache {
    pub layers: Vec<LayerCache>,
    pub xfhat: Matrix,
    pub invf: Vec<f64>,
    pub xf: Matrix,
}

/// Row-wise layer norm returning `(y, xhat, inv_std)`.
pub(crate) fn ln_rows(x: &Matrix, gain: &Matrix, bias: &Matrix, eps: f64) -> (Matrix, Matrix, Vec<f64>) {
    let (rows, cols) = x.shape();
    let mut y = Matrix::zeros(rows, cols);
    let mut xhat = Matrix::zeros(rows, cols);
    let mut inv = vec![0.0; rows];
    let n = cols as f64;
    for r in 0..rows {
        let row = x.row(r);
        let mean = row.iter().sum::<f64>() / n;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        let is = 1.0 / libm::sqrt(var + eps);
        inv[r] = is;
        let xh = xhat.row_mut(r);
        for c in 0..cols {
            xh[c] = (row[c] - mean) * is;
        }
        let yr = y.row_mut(r);
        for c in 0..cols {
            yr[c] = xhat.get(r, c) * gain.data()[c] + bias.data()[c];
        }
    }
    (y, xhat, inv)
}

/// Causal multi-head attention over `x1`; returns `(concat_heads, probs)`.
fn attention(
    q: &Matrix,
    k: &Matrix,
    v: &Matrix,
    n_heads: usize,
) -> (Matrix, Vec<Matrix>) {
    let (seq, d) = q.shape();
    let dh = d / n_heads;
    let scale = 1.0 / libm::sqrt(dh as f64);
    let mut out = Matrix::zeros(seq, d);
    let mut probs = Vec::with_capacity(n_heads);
    let mut scores = vec![0.0; seq];
    for h in 0..n_heads {
        let lo = h * dh;
        let hi = lo + dh;
        let mut p = Matrix::zeros(seq, seq);
        for i in 0..seq {
            let qi = &q.row(i)[lo..hi];
            for j in 0..=i {
                let kj = &k.row(j)[lo..hi];
                scores[j] = qi.iter().zip(kj).map(|(a, b)| a * b).sum::<f64>() * scale;
            }
            softmax_in_place(&mut scores[..=i]);
            p.row_mut(i)[..=i].copy_from_slice(&scores[..=i]);
            let oi = &mut out.row_mut(i)[lo..hi];
            for j in 0..=i {
                let pij = scores[j];
                let vj = &v.row(j)[lo..hi];
                for (o, vv) in oi.iter_mut().zip(vj) {
                    *o += pij * vv;
                }
            }
        }
        probs.push(p);
    }
    (out, probs)
}

fn layer_impl(
    config: &ModelConfig,
    layer: usize,
    lw: &LayerWeights,
    h_prev: &Matrix,
    hooks: &mut HookSet<'_>,
    cache: Option<&mut Vec<LayerCache>>,
) -> Result<LayerTrace> {
    if h_prev.cols() != config.d_model {
        return Err(shape(
            "layer_forward",
            format!("h_prev has {} columns, d_model is {}", h_prev.cols(), config.d_model),
        ));
    }
    let (x1, x1hat, inv1) = ln_rows(h_prev, &lw.ln1_gain, &lw.ln1_bias, config.ln_eps);
    let q = x1.matmul(&lw.wq)?;
    let k = x1.matmul(&lw.wk)?;
    let v = x1.matmul(&lw.wv)?;
    let (concat, probs) = attention(&q, &k, &v, config.n_heads);
    let mut attn = concat.matmul(&lw.wo)?;
    hooks.fire(HookPoint::block(layer, Component::Attn), &mut attn)?;

    let mut resid = h_prev.clone();
    resid.add_assign(&attn)?;
    let (x2, x2hat, inv2) = ln_rows(&resid, &lw.ln2_gain, &lw.ln2_bias, config.ln_eps);
    let mut u = x2.matmul(&lw.w1)?;
    u.add_row_bias(&lw.b1);
    let mut t = u.clone();
    t.data_mut().iter_mut().for_each(|x| *x = gelu_tanh(*x));
    let mut g = u.clone();
    for (y, t) in g.data_mut().iter_mut().zip(t.data()) {
        *y = 0.5 * *y * (1.0 + t);
    }
    let mut ffn = g.matmul(&lw.w2)?;
    ffn.add_row_bias(&lw.b2);
    hooks.fire(HookPoint::block(layer, Component::Ffn), &mut ffn)?;

    // h = h_prev + a + m, summed left to right.
    let mut hidden = h_prev.clone();
    for ((h, a), m) in hidden.data_mut().iter_mut().zip(attn.data()).zip(ffn.data()) {
        *h = *h + *a + *m;
    }
    hooks.fire(HookPoint::block(layer, Component::Hidden), &mut hidden)?;
    hooks.fire_attention(layer, &probs);

    if let Some(c) = cache {
        c.push(LayerCache {
            x1hat,
            inv1,
            x1,
            q,
            k,
            v,
            concat,
            x2hat,
            inv2,
            x2,
            u,
            t,
            g,
        });
    }
    Ok(LayerTrace {
        attn,
        ffn,
        hidden,
        attn_weights: probs,
    })
}

/// One decoder block: pre-norm MHSA, pre-norm FFN, additive residual, with
/// interveners applied at the attn, ffn and hidden sites in that order.
pub fn layer_forward(
    config: &ModelConfig,
    layer: usize,
    h_prev: &Matrix,
    weights: &Weights,
    hooks: &mut HookSet<'_>,
) -> Result<LayerOutput> {
    let lw = weights
        .layers
        .get(layer)
        .ok_or_else(|| invalid("layer", format!("{layer} out of range")))?;
    layer_impl(config, layer, lw, h_prev, hooks, None)
}

/// Final layer norm and output head applied to the last hidden state.
pub fn final_logits(config: &ModelConfig, weights: &Weights, h_last: &Matrix) -> Result<Matrix> {
    Ok(final_impl(config, weights, h_last)?.0)
}

fn final_impl(config: &ModelConfig, weights: &Weights, h_last: &Matrix) -> Result<(Matrix, Matrix, Matrix, Vec<f64>)> {
    let (xf, xfhat, invf) = ln_rows(h_last, &weights.lnf_gain, &weights.lnf_bias, config.ln_eps);
    let logits = match weights.head_matrix() {
        HeadRef::Untied(h) => xf.matmul(h)?,
        HeadRef::Tied(t) => xf.matmul_t(t)?,
    };
    Ok((logits, xf, xfhat, invf))
}

fn run(
    config: &ModelConfig,
    weights: &Weights,
    seq: &MultimodalSequence,
    hooks: &mut HookSet<'_>,
    resume: Option<(&ActivationTrace, usize)>,
    mut cache: Option<&mut ForwardCache>,
) -> Result<ForwardOutput> {
    if weights.layers.len() != config.n_layers {
        return Err(shape(
            "forward",
            format!("{} layers of weights, config has {}", weights.layers.len(), config.n_layers),
        ));
    }
    let (embed, mut layers, start) = match resume {
        None => {
            let mut h = seq.embeddings.clone();
            hooks.fire(HookPoint::Embed, &mut h)?;
            (h, Vec::with_capacity(config.n_layers), 0)
        }
        Some((base, start)) => {
            if base.seq_len() != seq.len() || base.n_layers() != config.n_layers || start > config.n_layers {
                return Err(Error::ForeignTrace(format!(
                    "resume trace covers {} positions x {} layers",
                    base.seq_len(),
                    base.n_layers()
                )));
            }
            (base.embed.clone(), base.layers[..start].to_vec(), start)
        }
    };
    for l in start..config.n_layers {
        let prev = if l == 0 { &embed } else { &layers[l - 1].hidden };
        let out = layer_impl(
            config,
            l,
            &weights.layers[l],
            prev,
            hooks,
            cache.as_deref_mut().map(|c| &mut c.layers),
        )?;
        layers.push(out);
    }
    let last = layers.last().map_or(&embed, |t| &t.hidden);
    let (logits, xf, xfhat, invf) = final_impl(config, weights, last)?;
    if let Some(c) = cache {
        c.xf = xf;
        c.xfhat = xfhat;
        c.invf = invf;
    }
    Ok(ForwardOutput {
        logits,
        trace: ActivationTrace { embed, layers },
    })
}

/// Full forward pass over an embedded sequence.
pub fn forward(
    config: &ModelConfig,
    weights: &Weights,
    seq: &MultimodalSequence,
    hooks: &mut HookSet<'_>,
) -> Result<ForwardOutput> {
    run(config, weights, seq, hooks, None, None)
}

/// Forward pass that reuses layers `< start_layer` (and `h(-1)`) from `base`
/// and recomputes from `start_layer` on. Hooks only fire for recomputed
/// layers, so this is equivalent to [`forward`] whenever the hooks do not
/// touch anything below `start_layer` and `base` came from the same input.
pub fn forward_resume(
    config: &ModelConfig,
    weights: &Weights,
    seq: &MultimodalSequence,
    hooks: &mut HookSet<'_>,
    base: &ActivationTrace,
    start_layer: usize,
) -> Result<ForwardOutput> {
    run(config, weights, seq, hooks, Some((base, start_layer)), None)
}

pub(crate) fn forward_cached(
    config: &ModelConfig,
    weights: &Weights,
    seq: &MultimodalSequence,
) -> Result<(ForwardOutput, ForwardCache)> {
    let mut cache = ForwardCache {
        layers: Vec::with_capacity(config.n_layers),
        xfhat: Matrix::zeros(0, 0),
        invf: Vec::new(),
        xf: Matrix::zeros(0, 0),
    };
    let out = run(config, weights, seq, &mut HookSet::new(), None, Some(&mut cache))?;
    Ok((out, cache))
}

/// Probability of `token` under the softmax of one row of logits.
pub fn token_prob(logits: &[f64], token: usize) -> Result<f64> {
    if token >= logits.len() {
        return Err(Error::UnknownToken {
            id: token,
            vocab: logits.len(),
        });
    }
    Ok(softmax(logits)?[token])
}
