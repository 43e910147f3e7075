//! Knowledge-guided category-level contrast: topic extraction, Tucker fusion,
//! attention over knowledge entities, Sinkhorn-Knopp codes against trainable
//! prototypes, and the cross-entropy to those codes.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, shape, MlipError, Result};
use crate::global_ita::check_tau;
use crate::numerics::{AttnSpec, Mat, Tape, Tensor, Var};
use crate::params::ParamStore;

pub const CORE: &str = "cat.core";
pub const OUTPUT_MAP: &str = "cat.wo";
pub const FUSE_SA: &str = "cat.sa.";
pub const PROTOTYPES: &str = "cat.proto";

/// Floor applied to probabilities before taking logs in the category loss.
pub const PROB_FLOOR: f64 = 1e-12;

/// How a softmax over a single pair of vectors is read.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
pub enum FeatureForm {
    /// Softmax of one scalar, which is 1.
    #[default]
    Degenerate,
    /// Split each `d`-vector into `groups` rows and attend across them.
    Sequence { groups: usize },
}

impl fmt::Display for FeatureForm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            FeatureForm::Degenerate => write!(f, "degenerate"),
            FeatureForm::Sequence { groups } => write!(f, "sequence:{groups}"),
        }
    }
}

impl FromStr for FeatureForm {
    type Err = MlipError;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "degenerate" => Ok(FeatureForm::Degenerate),
            other => {
                let groups = other
                    .strip_prefix("sequence:")
                    .and_then(|g| g.parse::<usize>().ok())
                    .filter(|&g| g > 0)
                    .ok_or_else(|| MlipError::Config(format!("feature form {s:?}: expected degenerate or sequence:<groups>")))?;
                Ok(FeatureForm::Sequence { groups })
            }
        }
    }
}

impl FeatureForm {
    pub fn validate(&self, dim: usize) -> Result<()> {
        match *self {
            FeatureForm::Sequence { groups } if groups == 0 || dim % groups != 0 => {
                Err(MlipError::Config(format!("{groups} groups do not divide width {dim}")))
            }
            _ => Ok(()),
        }
    }
}

/// `CA(x, y; val) = softmax(x yᵀ/√d) · val` under `form`, row-wise over a batch.
pub fn cross_attend_on(t: &mut Tape, x: Var, y: Var, val: Var, form: FeatureForm) -> Var {
    match form {
        FeatureForm::Degenerate => val,
        FeatureForm::Sequence { groups } => {
            let (b, d) = t.shape(x);
            let w = d / groups;
            let xr = t.reshape(x, b * groups, w);
            let yr = t.reshape(y, b * groups, w);
            let vr = t.reshape(val, b * groups, w);
            let spec = AttnSpec { heads: 1, q_len: groups, k_len: groups, shared_kv: false, scale: 1.0 / (w as f64).sqrt() };
            let o = t.attention(xr, yr, vr, spec);
            t.reshape(o, b, d)
        }
    }
}

/// `(v̇, ṫ)` with `ṫ = LN(CA(v*, t*; t*))`, `v̇ = LN(CA(v*, v*; ṫ))`.
pub fn topic_extract_on(t: &mut Tape, v_star: Var, t_star: Var, form: FeatureForm, eps: f64) -> (Var, Var) {
    let tt = cross_attend_on(t, v_star, t_star, t_star, form);
    let t_dot = t.layer_norm_rows(tt, eps);
    let vv = cross_attend_on(t, v_star, v_star, t_dot, form);
    let v_dot = t.layer_norm_rows(vv, eps);
    (v_dot, t_dot)
}

#[derive(Debug, Clone, PartialEq)]
pub struct TopicPair {
    pub t_dot: Vec<f64>,
    pub v_dot: Vec<f64>,
}

pub fn topic_extract(v_star: &[f64], t_star: &[f64], form: FeatureForm, eps: f64) -> Result<TopicPair> {
    if v_star.len() != t_star.len() || v_star.is_empty() {
        return Err(shape(format!("topic inputs of lengths {} and {}", v_star.len(), t_star.len())));
    }
    form.validate(v_star.len())?;
    let mut t = Tape::new();
    let v = t.constant(Mat::from_shape_vec((1, v_star.len()), v_star.to_vec()).expect("row"));
    let s = t.constant(Mat::from_shape_vec((1, t_star.len()), t_star.to_vec()).expect("row"));
    let (vd, td) = topic_extract_on(&mut t, v, s, form, eps);
    Ok(TopicPair { t_dot: t.value(td).iter().cloned().collect(), v_dot: t.value(vd).iter().cloned().collect() })
}

/// Tucker core `d × d × d_q`, output map `d_q × d_q` and the knowledge
/// attention temperature.
#[derive(Debug, Clone, PartialEq)]
pub struct FusionParams {
    pub core: Tensor,
    pub w_o: Mat,
    pub tau3: f64,
}

/// `Q = ((T_c ×₁ v̇) ×₂ ṫ) ×₃ W_o` row-wise. `core` is the core flattened to
/// `d × (d·d_q)`.
pub fn tucker_fuse_on(t: &mut Tape, v_dot: Var, t_dot: Var, core: Var, w_o: Var) -> Var {
    let dq = t.shape(w_o).1;
    let x = t.matmul(v_dot, core);
    let y = t.row_bilinear(x, t_dot, dq);
    t.matmul_t(y, w_o)
}

pub fn tucker_fuse(v_dot: &[f64], t_dot: &[f64], fusion: &FusionParams) -> Result<Vec<f64>> {
    let dims = fusion.core.shape();
    if dims.len() != 3 || dims[0] != v_dot.len() || dims[1] != t_dot.len() || fusion.w_o.dim() != (dims[2], dims[2]) {
        return Err(shape(format!(
            "core {:?}, output map {:?} against inputs of length {} and {}",
            dims,
            fusion.w_o.dim(),
            v_dot.len(),
            t_dot.len()
        )));
    }
    let mut t = Tape::new();
    let v = t.constant(Mat::from_shape_vec((1, v_dot.len()), v_dot.to_vec()).expect("row"));
    let s = t.constant(Mat::from_shape_vec((1, t_dot.len()), t_dot.to_vec()).expect("row"));
    let c = t.constant(fusion.core.to_matrix());
    let w = t.constant(fusion.w_o.clone());
    let q = tucker_fuse_on(&mut t, v, s, c, w);
    Ok(t.value(q).iter().cloned().collect())
}

/// Self-attention weights used to refine the knowledge-attended feature.
#[derive(Debug, Clone, PartialEq)]
pub struct SaWeights {
    pub wq: Mat,
    pub wk: Mat,
    pub wv: Mat,
}

/// `vkt = SA(softmax(Q eᵀ/τ3) · e)` per row of `q`. `entities` stacks one
/// `k_len × d_q` block of knowledge rows per row of `q`.
pub fn knowledge_fuse_on(t: &mut Tape, q: Var, entities: Var, k_len: usize, tau3: f64, wq: Var, wk: Var, wv: Var) -> Var {
    let dq = t.shape(q).1;
    let attended = t.attention(q, entities, entities, AttnSpec { heads: 1, q_len: 1, k_len, shared_kv: false, scale: 1.0 / tau3 });
    let sq = t.matmul(attended, wq);
    let sk = t.matmul(attended, wk);
    let sv = t.matmul(attended, wv);
    t.attention(sq, sk, sv, AttnSpec { heads: 1, q_len: 1, k_len: 1, shared_kv: false, scale: 1.0 / (dq as f64).sqrt() })
}

pub fn knowledge_fuse(q: &[f64], entities: &Mat, tau3: f64, sa: &SaWeights) -> Result<Vec<f64>> {
    check_tau(tau3)?;
    let dq = q.len();
    if entities.nrows() == 0 || entities.ncols() != dq || [&sa.wq, &sa.wk, &sa.wv].iter().any(|w| w.dim() != (dq, dq)) {
        return Err(shape(format!("fused width {dq} against entities {:?}", entities.dim())));
    }
    let mut t = Tape::new();
    let qv = t.constant(Mat::from_shape_vec((1, dq), q.to_vec()).expect("row"));
    let e = t.constant(entities.clone());
    let (a, b, c) = (t.constant(sa.wq.clone()), t.constant(sa.wk.clone()), t.constant(sa.wv.clone()));
    let out = knowledge_fuse_on(&mut t, qv, e, entities.nrows(), tau3, a, b, c);
    Ok(t.value(out).iter().cloned().collect())
}

#[derive(Debug, Clone, PartialEq)]
pub struct PrototypeBank {
    /// `C × d`, unit-norm rows.
    pub j: Mat,
    pub tau4: f64,
    pub trainable: bool,
}

impl PrototypeBank {
    /// Unit-Gaussian rows, normalized.
    pub fn init(count: usize, dim: usize, tau4: f64, rng: &mut impl Rng) -> Self {
        let mut j = Tensor::randn(vec![count, dim], 1.0, rng).to_matrix();
        normalize_rows(&mut j);
        Self { j, tau4, trainable: true }
    }

    pub fn renormalize(&mut self) {
        normalize_rows(&mut self.j);
    }

    pub fn count(&self) -> usize {
        self.j.nrows()
    }
}

/// Rescale each row of `m` to unit norm; zero rows are left alone.
pub fn normalize_rows(m: &mut Mat) {
    for mut row in m.rows_mut() {
        let n = row.dot(&row).sqrt();
        if n > 0.0 {
            row /= n;
        }
    }
}

/// Soft assignment of a batch to prototypes. Rows sum to 1; columns sum to
/// `B/C` at convergence.
#[derive(Debug, Clone, PartialEq)]
pub struct ClusterCode {
    pub u: Mat,
}

impl ClusterCode {
    pub fn row_error(&self) -> f64 {
        self.u.rows().into_iter().map(|r| (r.sum() - 1.0).abs()).fold(0.0, f64::max)
    }

    pub fn col_error(&self) -> f64 {
        let target = self.u.nrows() as f64 / self.u.ncols() as f64;
        self.u.columns().into_iter().map(|c| (c.sum() - target).abs()).fold(0.0, f64::max)
    }

    /// Hard cluster per row (first maximum wins).
    pub fn argmax(&self) -> Vec<usize> {
        self.u
            .rows()
            .into_iter()
            .map(|r| {
                let mut best = 0;
                for (i, &v) in r.iter().enumerate() {
                    if v > r[best] {
                        best = i;
                    }
                }
                best
            })
            .collect()
    }
}

fn log_sum_exp<'a>(xs: impl Iterator<Item = &'a f64> + Clone) -> f64 {
    let m = xs.clone().cloned().fold(f64::NEG_INFINITY, f64::max);
    m + xs.map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// Log-domain Sinkhorn-Knopp on raw scores: each iteration scales columns to
/// mass `1/C`, then rows to mass `1/B`. Output rows are multiplied by `B`.
pub fn sinkhorn(scores: &Mat, eps: f64, iters: usize) -> Result<ClusterCode> {
    if !(eps > 0.0 && eps.is_finite()) {
        return Err(invalid(format!("epsilon must be > 0, got {eps}")));
    }
    if iters < 1 {
        return Err(invalid("Sinkhorn needs at least one iteration"));
    }
    let (b, c) = scores.dim();
    if b == 0 || c == 0 {
        return Err(shape("empty score matrix"));
    }
    if scores.iter().any(|v| !v.is_finite()) {
        return Err(MlipError::NonFinite("Sinkhorn scores".into()));
    }
    let mut l = scores / eps;
    let (log_b, log_c) = ((b as f64).ln(), (c as f64).ln());
    for _ in 0..iters {
        for mut col in l.columns_mut() {
            let lse = log_sum_exp(col.iter());
            col.mapv_inplace(|v| v - lse - log_c);
        }
        for mut row in l.rows_mut() {
            let lse = log_sum_exp(row.iter());
            row.mapv_inplace(|v| v - lse - log_b);
        }
    }
    Ok(ClusterCode { u: l.mapv(|v| (v + log_b).exp()) })
}

/// Codes for fused features against the prototypes, scored by cosine
/// similarity; no gradient flows here.
pub fn sinkhorn_assign(features: &Mat, bank: &PrototypeBank, eps: f64, iters: usize) -> Result<ClusterCode> {
    if features.ncols() != bank.j.ncols() {
        return Err(shape(format!("features {:?} vs prototypes {:?}", features.dim(), bank.j.dim())));
    }
    let mut x = features.clone();
    normalize_rows(&mut x);
    sinkhorn(&x.dot(&bank.j.t()), eps, iters)
}

/// `log softmax(x̂ Jᵀ / τ4)` per row, `x̂` the L2-normalized row.
pub fn prototype_log_probs_on(t: &mut Tape, x: Var, protos: Var, tau4: f64) -> Var {
    let xn = t.l2_normalize_rows(x);
    let s = t.matmul_t(xn, protos);
    let s = t.scale(s, 1.0 / tau4);
    t.log_softmax_rows(s)
}

pub fn prototype_probs(x: &[f64], bank: &PrototypeBank) -> Result<Vec<f64>> {
    check_tau(bank.tau4)?;
    if x.len() != bank.j.ncols() {
        return Err(shape(format!("feature of length {} vs prototype width {}", x.len(), bank.j.ncols())));
    }
    if x.iter().all(|v| *v == 0.0) {
        return Err(invalid("prototype probabilities of a zero vector"));
    }
    let mut t = Tape::new();
    let xv = t.constant(Mat::from_shape_vec((1, x.len()), x.to_vec()).expect("row"));
    let j = t.constant(bank.j.clone());
    let lp = prototype_log_probs_on(&mut t, xv, j, bank.tau4);
    Ok(t.value(lp).iter().map(|v| v.exp()).collect())
}

/// `−(1/2B) Σ_i Σ_c u_ic (log p^v_ic + log p^t_ic)`, log-probabilities
/// floored at `log 1e-12`.
pub fn category_loss_on(t: &mut Tape, u: &Mat, logp_v: Var, logp_t: Var) -> Var {
    let b = u.nrows() as f64;
    let w = u * (-1.0 / (2.0 * b));
    let floor = PROB_FLOOR.ln();
    let lv = t.clamp_min(logp_v, floor);
    let lt = t.clamp_min(logp_t, floor);
    let a = t.weighted_sum(lv, w.clone());
    let c = t.weighted_sum(lt, w);
    t.add(a, c)
}

pub fn category_loss(codes: &ClusterCode, p_v: &Mat, p_t: &Mat) -> Result<f64> {
    if codes.u.dim() != p_v.dim() || codes.u.dim() != p_t.dim() || codes.u.nrows() == 0 {
        return Err(shape(format!("codes {:?}, P_v {:?}, P_t {:?}", codes.u.dim(), p_v.dim(), p_t.dim())));
    }
    let mut t = Tape::new();
    let lv = t.constant(p_v.mapv(|p| p.max(PROB_FLOOR).ln()));
    let lt = t.constant(p_t.mapv(|p| p.max(PROB_FLOOR).ln()));
    let l = category_loss_on(&mut t, &codes.u, lv, lt);
    Ok(t.scalar(l))
}

/// Entropy (nats) of the batch-mean prototype distribution.
pub fn prototype_entropy(probs: &Mat) -> f64 {
    let mean = probs.mean_axis(ndarray::Axis(0)).expect("non-empty batch");
    -mean.iter().filter(|p| **p > 0.0).map(|p| p * p.ln()).sum::<f64>()
}

/// `cat.core`, `cat.wo`, `cat.sa.*` and `cat.proto`.
pub fn init_category_params(dim: usize, fused_dim: usize, prototypes: usize, rng: &mut impl Rng) -> ParamStore {
    let mut p = ParamStore::new();
    p.insert(CORE, Tensor::randn(vec![dim, dim, fused_dim], 1.0 / dim as f64, rng));
    p.insert(OUTPUT_MAP, Tensor::randn(vec![fused_dim, fused_dim], 1.0 / (fused_dim as f64).sqrt(), rng));
    for m in ["wq", "wk", "wv"] {
        p.insert(format!("{FUSE_SA}{m}"), Tensor::randn(vec![fused_dim, fused_dim], 1.0 / (fused_dim as f64).sqrt(), rng));
    }
    let bank = PrototypeBank::init(prototypes, fused_dim, 0.1, rng);
    p.insert(PROTOTYPES, Tensor::from_matrix(&bank.j));
    p
}
