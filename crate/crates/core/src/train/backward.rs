// SPDX-License-Identifier: MIT OR Apache-2.0

//! Reverse-mode pass for the fixed architecture.

use alloc::vec;

use crate::model::{ActivationTrace, ForwardCache, LayerCache, LayerWeights, ModelConfig, MultimodalSequence, Weights};
use crate::numerics::{gelu_grad_with, Matrix};

fn ln_backward(dy: &Matrix, xhat: &Matrix, inv: &[f64], gain: &Matrix, dgain: &mut Matrix, dbias: &mut Matrix) -> Matrix {
    let (rows, cols) = dy.shape();
    let n = cols as f64;
    let g = gain.data();
    let mut dx = Matrix::zeros(rows, cols);
    let mut dxhat = vec![0.0; cols];
    for r in 0..rows {
        let dyr = dy.row(r);
        let xh = xhat.row(r);
        let (mut s1, mut s2) = (0.0, 0.0);
        for c in 0..cols {
            dxhat[c] = dyr[c] * g[c];
            s1 += dxhat[c];
            s2 += dxhat[c] * xh[c];
        }
        {
            let dg = dgain.data_mut();
            for c in 0..cols {
                dg[c] += dyr[c] * xh[c];
            }
        }
        {
            let db = dbias.data_mut();
            for c in 0..cols {
                db[c] += dyr[c];
            }
        }
        let (m1, m2) = (s1 / n, s2 / n);
        let out = dx.row_mut(r);
        for c in 0..cols {
            out[c] = inv[r] * (dxhat[c] - m1 - xh[c] * m2);
        }
    }
    dx
}

/// Backpropagates one block. `dh` is the gradient w.r.t. `h(l)`; returns the
/// gradient w.r.t. `h(l-1)`.
fn layer_backward(
    config: &ModelConfig,
    lw: &LayerWeights,
    cache: &LayerCache,
    probs: &[Matrix],
    dh: &Matrix,
    g: &mut LayerWeights,
) -> Matrix {
    // FFN: m = gelu(x2 W1 + b1) W2 + b2
    let dm = dh;
    cache.g.t_matmul_acc(dm, &mut g.w2);
    dm.col_sums_acc(&mut g.b2);
    let mut du = dm.matmul_t(&lw.w2).expect("shape");
    for ((d, u), t) in du.data_mut().iter_mut().zip(cache.u.data()).zip(cache.t.data()) {
        *d *= gelu_grad_with(*u, *t);
    }
    cache.x2.t_matmul_acc(&du, &mut g.w1);
    du.col_sums_acc(&mut g.b1);
    let dx2 = du.matmul_t(&lw.w1).expect("shape");
    let dresid_ln = ln_backward(&dx2, &cache.x2hat, &cache.inv2, &lw.ln2_gain, &mut g.ln2_gain, &mut g.ln2_bias);

    // resid = h_prev + a; h = resid + m
    let mut dresid = dh.clone();
    dresid.axpy(1.0, &dresid_ln);
    let da = &dresid;

    // a = concat Wo
    cache.concat.t_matmul_acc(da, &mut g.wo);
    let dconcat = da.matmul_t(&lw.wo).expect("shape");

    let (seq, d) = cache.q.shape();
    let nh = config.n_heads;
    let dh_ = d / nh;
    let scale = 1.0 / libm::sqrt(dh_ as f64);
    let mut dq = Matrix::zeros(seq, d);
    let mut dk = Matrix::zeros(seq, d);
    let mut dv = Matrix::zeros(seq, d);
    let mut dp = vec![0.0; seq];
    for h in 0..nh {
        let lo = h * dh_;
        let hi = lo + dh_;
        let p = &probs[h];
        for i in 0..seq {
            let doi = &dconcat.row(i)[lo..hi];
            let pi = p.row(i);
            let mut dot = 0.0;
            for j in 0..=i {
                let vj = &cache.v.row(j)[lo..hi];
                dp[j] = doi.iter().zip(vj).map(|(a, b)| a * b).sum();
                dot += pi[j] * dp[j];
                let dvj = &mut dv.row_mut(j)[lo..hi];
                for (x, y) in dvj.iter_mut().zip(doi) {
                    *x += pi[j] * y;
                }
            }
            for j in 0..=i {
                let ds = pi[j] * (dp[j] - dot) * scale;
                if ds == 0.0 {
                    continue;
                }
                {
                    let kj = &cache.k.row(j)[lo..hi];
                    let dqi = &mut dq.row_mut(i)[lo..hi];
                    for (x, y) in dqi.iter_mut().zip(kj) {
                        *x += ds * y;
                    }
                }
                let qi = &cache.q.row(i)[lo..hi];
                let dkj = &mut dk.row_mut(j)[lo..hi];
                for (x, y) in dkj.iter_mut().zip(qi) {
                    *x += ds * y;
                }
            }
        }
    }
    cache.x1.t_matmul_acc(&dq, &mut g.wq);
    cache.x1.t_matmul_acc(&dk, &mut g.wk);
    cache.x1.t_matmul_acc(&dv, &mut g.wv);
    let mut dx1 = dq.matmul_t(&lw.wq).expect("shape");
    dx1.axpy(1.0, &dk.matmul_t(&lw.wk).expect("shape"));
    dx1.axpy(1.0, &dv.matmul_t(&lw.wv).expect("shape"));
    let dprev_ln = ln_backward(&dx1, &cache.x1hat, &cache.inv1, &lw.ln1_gain, &mut g.ln1_gain, &mut g.ln1_bias);
    dresid.axpy(1.0, &dprev_ln);
    dresid
}

/// Accumulates into `grads` the gradient of `sum(dlogits * logits)`.
pub(crate) fn backward(
    config: &ModelConfig,
    weights: &Weights,
    seq: &MultimodalSequence,
    trace: &ActivationTrace,
    cache: &ForwardCache,
    dlogits: &Matrix,
    grads: &mut Weights,
) {
    let dxf = match (&weights.head, &mut grads.head) {
        (Some(head), Some(dhead)) => {
            cache.xf.t_matmul_acc(dlogits, dhead);
            dlogits.matmul_t(head).expect("shape")
        }
        _ => {
            dlogits.t_matmul_acc(&cache.xf, &mut grads.tok_emb);
            dlogits.matmul(&weights.tok_emb).expect("shape")
        }
    };
    let mut dh = ln_backward(&dxf, &cache.xfhat, &cache.invf, &weights.lnf_gain, &mut grads.lnf_gain, &mut grads.lnf_bias);
    for l in (0..config.n_layers).rev() {
        dh = layer_backward(
            config,
            &weights.layers[l],
            &cache.layers[l],
            &trace.layers[l].attn_weights,
            &dh,
            &mut grads.layers[l],
        );
    }
    let m = seq.visual_len;
    let d = config.d_model;
    for i in 0..seq.len() {
        let row = dh.row(i);
        for (a, b) in grads.pos_emb.row_mut(i).iter_mut().zip(row) {
            *a += b;
        }
        if i >= m {
            let id = seq.tokens[i].id;
            for (a, b) in grads.tok_emb.row_mut(id).iter_mut().zip(row) {
                *a += b;
            }
        }
    }
    if m > 0 {
        let dvis = Matrix::from_vec(m, d, dh.data()[..m * d].to_vec()).expect("finite");
        seq.cells.t_matmul_acc(&dvis, &mut grads.patch_proj);
        dvis.col_sums_acc(&mut grads.patch_bias);
    }
}
