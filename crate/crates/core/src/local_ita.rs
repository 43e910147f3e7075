//! Token-knowledge-patch alignment: cross-modal attention from local features
//! onto knowledge rows, attention-derived position weights, and the weighted
//! symmetric InfoNCE over positions.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, shape, Result};
use crate::global_ita::check_tau;
use crate::numerics::{AttnSpec, Mat, Tape, Tensor, Var};
use crate::params::ParamStore;

/// Cross-attention parameter prefixes for the image and text sides.
pub const IMAGE_XATTN: &str = "xv.";
pub const TEXT_XATTN: &str = "xt.";

/// `xv.{q,k,v}`, `xt.{q,k,v}` and the local projection attention
/// `local.{v,t}.sa.{wq,wk,wv}`. With `shared` the text side reuses `xv.*`.
pub fn init_local_params(dim: usize, shared: bool, rng: &mut impl Rng) -> ParamStore {
    let std = 1.0 / (dim as f64).sqrt();
    let mut p = ParamStore::new();
    let sides: &[&str] = if shared { &[IMAGE_XATTN] } else { &[IMAGE_XATTN, TEXT_XATTN] };
    for side in sides {
        for m in ["q", "k", "v"] {
            p.insert(format!("{side}{m}"), Tensor::randn(vec![dim, dim], std, rng));
        }
    }
    for side in ["local.v.sa.", "local.t.sa."] {
        for m in ["wq", "wk", "wv"] {
            p.insert(format!("{side}{m}"), Tensor::randn(vec![dim, dim], std, rng));
        }
    }
    p
}

/// Per block of `n` feature rows: `attn = softmax((F·Q)(E·K)ᵀ/√d)`, `Z = attn·(E·V)`.
/// `know` is a single block shared by every sample. The returned node also
/// carries the attention matrices (see [`Tape::attention_probs`]).
pub fn cross_modal_attend_on(t: &mut Tape, feats: Var, know: Var, wq: Var, wk: Var, wv: Var, n: usize) -> Var {
    let d = t.shape(feats).1;
    let q = t.matmul(feats, wq);
    let k = t.matmul(know, wk);
    let v = t.matmul(know, wv);
    let k_len = t.shape(know).0;
    t.attention(q, k, v, AttnSpec { heads: 1, q_len: n, k_len, shared_kv: true, scale: 1.0 / (d as f64).sqrt() })
}

/// Single-sample cross-modal attention; returns `(Z, attn)`.
pub fn cross_modal_attend(feats: &Mat, know: &Mat, wq: &Mat, wk: &Mat, wv: &Mat) -> Result<(Mat, Mat)> {
    let d = feats.ncols();
    if feats.nrows() == 0 || know.nrows() == 0 {
        return Err(invalid("cross-modal attention needs at least one row"));
    }
    if know.ncols() != d || [wq, wk, wv].iter().any(|w| w.dim() != (d, d)) {
        return Err(shape(format!("features {:?}, knowledge {:?}, projections must be {d}×{d}", feats.dim(), know.dim())));
    }
    let mut t = Tape::new();
    let f = t.constant(feats.clone());
    let e = t.constant(know.clone());
    let (q, k, v) = (t.constant(wq.clone()), t.constant(wk.clone()), t.constant(wv.clone()));
    let z = cross_modal_attend_on(&mut t, f, e, q, k, v, feats.nrows());
    let attn = t.attention_probs(z).expect("attention node")[0].clone();
    Ok((t.value(z).clone(), attn))
}

fn head_mean_cls_row(attn: &[Mat]) -> Result<Vec<f64>> {
    let first = attn.first().ok_or_else(|| invalid("no attention heads"))?;
    if attn.iter().any(|a| a.dim() != first.dim()) {
        return Err(shape("attention heads disagree in shape"));
    }
    let n = first.ncols();
    let mut w = vec![0.0; n];
    for a in attn {
        for (j, wj) in w.iter_mut().enumerate() {
            *wj += a[[0, j]] / attn.len() as f64;
        }
    }
    Ok(w)
}

fn renormalize(mut w: Vec<f64>) -> Vec<f64> {
    let total: f64 = w.iter().sum();
    if total > 0.0 {
        w.iter_mut().for_each(|x| *x /= total);
    } else {
        let n = w.len() as f64;
        w.iter_mut().for_each(|x| *x = 1.0 / n);
    }
    w
}

/// Head-mean `[CLS]`→patch attention with the `[CLS]` column dropped,
/// renormalized to sum 1.
pub fn patch_weights(attn: &[Mat]) -> Result<Vec<f64>> {
    let w = head_mean_cls_row(attn)?;
    if w.len() < 2 {
        return Err(shape("attention must include the [CLS] row and at least one patch"));
    }
    Ok(renormalize(w[1..].to_vec()))
}

/// Token-side counterpart: head-mean attention from position 0 over every
/// token (the text local features include the `[CLS]` row).
pub fn token_weights(attn: &[Mat]) -> Result<Vec<f64>> {
    Ok(renormalize(head_mean_cls_row(attn)?))
}

/// Weighted symmetric InfoNCE over positions, averaged over the blocks of
/// `n` rows. `weights` is `blocks × n`, each row summing to 1.
pub fn local_loss_side_on(t: &mut Tape, z: Var, feats: Var, weights: &Mat, tau2: f64, n: usize) -> Var {
    let blocks = t.shape(feats).0 / n;
    let zn = t.l2_normalize_rows(z);
    let fnorm = t.l2_normalize_rows(feats);
    let sim = t.block_matmul_t(fnorm, zn, n);
    let logits = t.scale(sim, 1.0 / tau2);
    let forward = t.log_softmax_rows(logits);
    let flipped = t.block_transpose(logits, n);
    let backward = t.log_softmax_rows(flipped);
    let mut w = Mat::zeros((blocks * n, n));
    for b in 0..blocks {
        for j in 0..n {
            w[[b * n + j, j]] = -weights[[b, j]] / (2.0 * blocks as f64);
        }
    }
    let a = t.weighted_sum(forward, w.clone());
    let bsum = t.weighted_sum(backward, w);
    t.add(a, bsum)
}

/// `½ Σ_j w_j (a_j + b_j)` for one sample, where `a_j`/`b_j` are the
/// features→knowledge and knowledge→features InfoNCE terms at position `j`.
/// `None` weights mean uniform `1/n`.
pub fn local_loss_side(z: &Mat, feats: &Mat, weights: Option<&[f64]>, tau2: f64) -> Result<f64> {
    check_tau(tau2)?;
    let n = feats.nrows();
    if n == 0 || z.dim() != feats.dim() {
        return Err(shape(format!("knowledge {:?} vs features {:?}", z.dim(), feats.dim())));
    }
    let w = match weights {
        Some(w) if w.len() != n => return Err(shape(format!("{} weights for {n} positions", w.len()))),
        Some(w) if w.iter().any(|x| !(*x >= 0.0)) => return Err(invalid("weights must be non-negative")),
        Some(w) => Mat::from_shape_vec((1, n), w.to_vec()).expect("sized"),
        None => Mat::from_elem((1, n), 1.0 / n as f64),
    };
    let mut t = Tape::new();
    let zv = t.constant(z.clone());
    let fv = t.constant(feats.clone());
    let l = local_loss_side_on(&mut t, zv, fv, &w, tau2, n);
    Ok(t.scalar(l))
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LocalLosses {
    pub tl: f64,
    pub v2t: f64,
    pub t2v: f64,
}

/// `L_tl = ½(L_v2t^tl + L_t2v^tl)`
pub fn local_loss(image_side: f64, text_side: f64) -> LocalLosses {
    LocalLosses { tl: 0.5 * (image_side + text_side), v2t: image_side, t2v: text_side }
}
