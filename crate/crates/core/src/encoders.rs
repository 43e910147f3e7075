//! Micro image/text encoders and the shared-space projection heads.
//!
//! Both encoders are a token embedder, a `[CLS]` slot, optional sinusoidal
//! position encodings and one pre-norm multi-head self-attention block with a
//! residual connection. The global feature is a linear read-out of the `[CLS]`
//! row; local features are the remaining rows (image) or every row (text).

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, shape, Result};
use crate::numerics::{AttnSpec, Mat, Tape, Tensor, Var};
use crate::params::{ParamStore, VarMap};

/// Token id reserved for `[CLS]` at position 0 of every text.
pub const CLS_TOKEN: usize = 0;

/// Bumped whenever parameter names or shapes change.
pub const ENCODER_LAYOUT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    /// Shared feature width `d`.
    pub dim: usize,
    /// Raw patch vector width.
    pub patch_dim: usize,
    /// Patches per image (a perfect square).
    pub patches: usize,
    /// Tokens per text, `[CLS]` included.
    pub seq_len: usize,
    pub vocab: usize,
    pub heads: usize,
    pub position_encoding: bool,
    pub ln_eps: f64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self { dim: 64, patch_dim: 8, patches: 16, seq_len: 12, vocab: 64, heads: 4, position_encoding: true, ln_eps: 1e-5 }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        let side = (self.patches as f64).sqrt().round() as usize;
        if self.patches == 0 || side * side != self.patches {
            return Err(invalid(format!("patch count {} is not a perfect square", self.patches)));
        }
        if self.seq_len < 2 {
            return Err(invalid("text length must be at least 2"));
        }
        if self.vocab < 2 {
            return Err(invalid("vocabulary must hold [CLS] and at least one token"));
        }
        if self.dim == 0 || self.patch_dim == 0 {
            return Err(invalid("feature widths must be positive"));
        }
        if self.heads == 0 || self.dim % self.heads != 0 {
            return Err(invalid(format!("{} heads do not divide width {}", self.heads, self.dim)));
        }
        Ok(())
    }

    pub fn grid_side(&self) -> usize {
        (self.patches as f64).sqrt().round() as usize
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ImageSample {
    /// `patches × patch_dim`, grid row-major.
    pub patches: Mat,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TextSample {
    pub tokens: Vec<usize>,
}

impl ImageSample {
    pub fn validate(&self, cfg: &EncoderConfig) -> Result<()> {
        if self.patches.dim() != (cfg.patches, cfg.patch_dim) {
            return Err(shape(format!(
                "image is {:?}, expected ({}, {})",
                self.patches.dim(),
                cfg.patches,
                cfg.patch_dim
            )));
        }
        if self.patches.iter().any(|v| !v.is_finite()) {
            return Err(crate::error::MlipError::NonFinite("image patch".into()));
        }
        Ok(())
    }
}

impl TextSample {
    pub fn validate(&self, cfg: &EncoderConfig) -> Result<()> {
        if self.tokens.len() != cfg.seq_len {
            return Err(shape(format!("text has {} tokens, expected {}", self.tokens.len(), cfg.seq_len)));
        }
        if let Some(t) = self.tokens.iter().find(|&&t| t >= cfg.vocab) {
            return Err(invalid(format!("token id {t} outside vocabulary of {}", cfg.vocab)));
        }
        if self.tokens[0] != CLS_TOKEN {
            return Err(invalid("position 0 must hold the [CLS] token"));
        }
        Ok(())
    }
}

/// Which encoder a parameter prefix belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Modality {
    Image,
    Text,
}

impl Modality {
    pub fn prefix(self) -> &'static str {
        match self {
            Modality::Image => "img.",
            Modality::Text => "txt.",
        }
    }
}

fn lin(rng: &mut impl Rng, fan_in: usize, fan_out: usize) -> Tensor {
    Tensor::randn(vec![fan_in, fan_out], 1.0 / (fan_in as f64).sqrt(), rng)
}

fn attn_params(store: &mut ParamStore, prefix: &str, d: usize, rng: &mut impl Rng, with_out: bool) {
    for w in ["wq", "wk", "wv"] {
        store.insert(format!("{prefix}{w}"), lin(rng, d, d));
    }
    if with_out {
        store.insert(format!("{prefix}wo"), lin(rng, d, d));
    }
}

/// Parameters of `f_v` (`img.*`) and `f_t` (`txt.*`).
pub fn init_encoder_params(cfg: &EncoderConfig, rng: &mut impl Rng) -> ParamStore {
    let d = cfg.dim;
    let mut s = ParamStore::new();
    s.insert("img.embed.w", lin(rng, cfg.patch_dim, d));
    s.insert("img.embed.b", Tensor::zeros(vec![d]));
    s.insert("img.cls", Tensor::randn(vec![d], 1.0, rng));
    attn_params(&mut s, "img.attn.", d, rng, true);
    s.insert("img.pool.w", lin(rng, d, d));
    s.insert("img.pool.b", Tensor::zeros(vec![d]));
    s.insert("txt.embed", Tensor::randn(vec![cfg.vocab, d], 1.0, rng));
    attn_params(&mut s, "txt.attn.", d, rng, true);
    s.insert("txt.pool.w", lin(rng, d, d));
    s.insert("txt.pool.b", Tensor::zeros(vec![d]));
    s
}

/// Projection heads `h_v`, `h_t` and the self-attention that follows them.
pub fn init_projection_params(cfg: &EncoderConfig, rng: &mut impl Rng) -> ParamStore {
    let d = cfg.dim;
    let mut s = ParamStore::new();
    for m in ["v", "t"] {
        s.insert(format!("proj.{m}.w"), lin(rng, d, d));
        s.insert(format!("proj.{m}.b"), Tensor::zeros(vec![d]));
        attn_params(&mut s, &format!("proj.{m}.sa."), d, rng, false);
    }
    s
}

/// Standard transformer sinusoidal table, `len × dim`.
pub fn sinusoidal_positions(len: usize, dim: usize) -> Mat {
    Mat::from_shape_fn((len, dim), |(pos, i)| {
        let freq = 1.0 / 10000f64.powf((2 * (i / 2)) as f64 / dim as f64);
        let angle = pos as f64 * freq;
        if i % 2 == 0 {
            angle.sin()
        } else {
            angle.cos()
        }
    })
}

/// Encoder outputs recorded on a tape for a whole batch.
#[derive(Debug)]
pub struct EncodedBatch {
    /// `B × d` global features.
    pub global: Var,
    /// Local features stacked per sample: `(B·L) × d`.
    pub local: Var,
    /// Rows per sample in `local`.
    pub local_len: usize,
    /// Last-layer attention, one `(L+1)×(L+1)` (image) or `L×L` (text)
    /// matrix per sample and head, sample-major.
    pub attn: Vec<Mat>,
    pub heads: usize,
}

impl EncodedBatch {
    /// Head-stacked attention for sample `i`.
    pub fn sample_attn(&self, i: usize) -> &[Mat] {
        &self.attn[i * self.heads..(i + 1) * self.heads]
    }
}

/// Pre-norm self-attention block with residual; returns `(output, attention node)`.
fn attention_block(t: &mut Tape, vars: &VarMap, prefix: &str, x: Var, seq: usize, cfg: &EncoderConfig) -> (Var, Var) {
    let a = t.layer_norm_rows(x, cfg.ln_eps);
    let q = t.matmul(a, vars.get(&format!("{prefix}wq")));
    let k = t.matmul(a, vars.get(&format!("{prefix}wk")));
    let v = t.matmul(a, vars.get(&format!("{prefix}wv")));
    let scale = 1.0 / ((cfg.dim / cfg.heads) as f64).sqrt();
    let o = t.attention(q, k, v, AttnSpec { heads: cfg.heads, q_len: seq, k_len: seq, shared_kv: false, scale });
    let o2 = t.matmul(o, vars.get(&format!("{prefix}wo")));
    (t.add(x, o2), o)
}

fn add_positions(t: &mut Tape, x: Var, batch: usize, seq: usize, cfg: &EncoderConfig) -> Var {
    if !cfg.position_encoding {
        return x;
    }
    let pe = sinusoidal_positions(seq, cfg.dim);
    let mut tiled = Mat::zeros((batch * seq, cfg.dim));
    for b in 0..batch {
        tiled.slice_mut(ndarray::s![b * seq..(b + 1) * seq, ..]).assign(&pe);
    }
    let pe = t.constant(tiled);
    t.add(x, pe)
}

/// Image encoder over a batch. Parameter names are looked up with the
/// `img.` prefix inside `vars`, which may be a namespaced view.
pub fn encode_images_on(
    t: &mut Tape,
    vars: &VarMap,
    prefix: &str,
    images: &[&ImageSample],
    cfg: &EncoderConfig,
) -> Result<EncodedBatch> {
    let n = cfg.patches;
    let batch = images.len();
    if batch == 0 {
        return Err(invalid("empty image batch"));
    }
    let mut raw = Mat::zeros((batch * n, cfg.patch_dim));
    for (b, img) in images.iter().enumerate() {
        img.validate(cfg)?;
        raw.slice_mut(ndarray::s![b * n..(b + 1) * n, ..]).assign(&img.patches);
    }
    let raw = t.constant(raw);
    let e = t.matmul(raw, vars.get(&format!("{prefix}embed.w")));
    let e = t.add_row(e, vars.get(&format!("{prefix}embed.b")));
    let cls = vars.get(&format!("{prefix}cls"));
    let mut parts = Vec::with_capacity(2 * batch);
    for b in 0..batch {
        parts.push(cls);
        parts.push(t.rows(e, b * n, n));
    }
    let seq = n + 1;
    let x = t.concat_rows(&parts);
    let x = add_positions(t, x, batch, seq, cfg);
    let (h, attn_node) = attention_block(t, vars, &format!("{prefix}attn."), x, seq, cfg);
    let cls_rows: Vec<usize> = (0..batch).map(|b| b * seq).collect();
    let patch_rows: Vec<usize> = (0..batch).flat_map(|b| (b * seq + 1)..((b + 1) * seq)).collect();
    let pooled = t.gather_rows(h, &cls_rows);
    let g = t.matmul(pooled, vars.get(&format!("{prefix}pool.w")));
    let global = t.add_row(g, vars.get(&format!("{prefix}pool.b")));
    let local = t.gather_rows(h, &patch_rows);
    let attn = t.attention_probs(attn_node).expect("attention node").to_vec();
    Ok(EncodedBatch { global, local, local_len: n, attn, heads: cfg.heads })
}

/// Text encoder over a batch; `[CLS]` pooling at position 0.
pub fn encode_texts_on(
    t: &mut Tape,
    vars: &VarMap,
    prefix: &str,
    texts: &[&TextSample],
    cfg: &EncoderConfig,
) -> Result<EncodedBatch> {
    let batch = texts.len();
    if batch == 0 {
        return Err(invalid("empty text batch"));
    }
    let seq = cfg.seq_len;
    let mut ids = Vec::with_capacity(batch * seq);
    for y in texts {
        y.validate(cfg)?;
        ids.extend_from_slice(&y.tokens);
    }
    let x = t.gather_rows(vars.get(&format!("{prefix}embed")), &ids);
    let x = add_positions(t, x, batch, seq, cfg);
    let (h, attn_node) = attention_block(t, vars, &format!("{prefix}attn."), x, seq, cfg);
    let cls_rows: Vec<usize> = (0..batch).map(|b| b * seq).collect();
    let pooled = t.gather_rows(h, &cls_rows);
    let g = t.matmul(pooled, vars.get(&format!("{prefix}pool.w")));
    let global = t.add_row(g, vars.get(&format!("{prefix}pool.b")));
    let attn = t.attention_probs(attn_node).expect("attention node").to_vec();
    Ok(EncodedBatch { global, local: h, local_len: seq, attn, heads: cfg.heads })
}

/// `LN(SA(h(x)))` over sequences of `seq` rows; `seq = 1` for global features.
pub fn project_on(t: &mut Tape, vars: &VarMap, which: Modality, x: Var, seq: usize, sa_prefix: &str, cfg: &EncoderConfig) -> Var {
    let m = match which {
        Modality::Image => "v",
        Modality::Text => "t",
    };
    let h = t.matmul(x, vars.get(&format!("proj.{m}.w")));
    let h = t.add_row(h, vars.get(&format!("proj.{m}.b")));
    let q = t.matmul(h, vars.get(&format!("{sa_prefix}wq")));
    let k = t.matmul(h, vars.get(&format!("{sa_prefix}wk")));
    let v = t.matmul(h, vars.get(&format!("{sa_prefix}wv")));
    let scale = 1.0 / (cfg.dim as f64).sqrt();
    let sa = t.attention(q, k, v, AttnSpec { heads: 1, q_len: seq, k_len: seq, shared_kv: false, scale });
    t.layer_norm_rows(sa, cfg.ln_eps)
}

/// Projected, unit-norm global features `v*` / `t*`.
pub fn project_global_on(t: &mut Tape, vars: &VarMap, which: Modality, x: Var, cfg: &EncoderConfig) -> Var {
    let sa = match which {
        Modality::Image => "proj.v.sa.",
        Modality::Text => "proj.t.sa.",
    };
    let ln = project_on(t, vars, which, x, 1, sa, cfg);
    t.l2_normalize_rows(ln)
}

/// Single-sample image encoding.
#[derive(Debug, Clone)]
pub struct ImageEncoding {
    pub v: Vec<f64>,
    /// `patches × d`
    pub patches: Mat,
    /// `heads` matrices of `(patches+1) × (patches+1)`.
    pub attn: Vec<Mat>,
}

#[derive(Debug, Clone)]
pub struct TextEncoding {
    pub t: Vec<f64>,
    /// `seq_len × d`
    pub tokens: Mat,
    pub attn: Vec<Mat>,
}

pub fn encode_image(x: &ImageSample, params: &ParamStore, cfg: &EncoderConfig) -> Result<ImageEncoding> {
    let mut t = Tape::new();
    let vars = VarMap::bind(&mut t, params, false);
    let out = encode_images_on(&mut t, &vars, "img.", &[x], cfg)?;
    Ok(ImageEncoding {
        v: t.value(out.global).row(0).to_vec(),
        patches: t.value(out.local).clone(),
        attn: out.attn,
    })
}

pub fn encode_text(y: &TextSample, params: &ParamStore, cfg: &EncoderConfig) -> Result<TextEncoding> {
    let mut t = Tape::new();
    let vars = VarMap::bind(&mut t, params, false);
    let out = encode_texts_on(&mut t, &vars, "txt.", &[y], cfg)?;
    Ok(TextEncoding { t: t.value(out.global).row(0).to_vec(), tokens: t.value(out.local).clone(), attn: out.attn })
}

/// `(v*, t*)` for one pair of global features.
pub fn project_global(v: &[f64], tv: &[f64], params: &ParamStore, cfg: &EncoderConfig) -> Result<(Vec<f64>, Vec<f64>)> {
    if v.len() != cfg.dim || tv.len() != cfg.dim {
        return Err(shape(format!("global features must have width {}", cfg.dim)));
    }
    if v.iter().chain(tv).any(|x| !x.is_finite()) {
        return Err(crate::error::MlipError::NonFinite("global feature".into()));
    }
    let mut t = Tape::new();
    let vars = VarMap::bind(&mut t, params, false);
    let vx = t.constant(Mat::from_shape_vec((1, cfg.dim), v.to_vec()).expect("width checked"));
    let tx = t.constant(Mat::from_shape_vec((1, cfg.dim), tv.to_vec()).expect("width checked"));
    let vs = project_global_on(&mut t, &vars, Modality::Image, vx, cfg);
    let ts = project_global_on(&mut t, &vars, Modality::Text, tx, cfg);
    Ok((t.value(vs).row(0).to_vec(), t.value(ts).row(0).to_vec()))
}

/// Augmentation settings for [`random_transform`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TransformConfig {
    pub flip_prob: f64,
    pub noise_sigma: f64,
    pub scale_min: f64,
    pub scale_max: f64,
}

impl Default for TransformConfig {
    fn default() -> Self {
        Self { flip_prob: 0.5, noise_sigma: 0.1, scale_min: 0.8, scale_max: 1.2 }
    }
}

/// The random draws behind one transform, so it can be replayed.
#[derive(Debug, Clone, PartialEq)]
pub struct TransformDraw {
    pub flip: bool,
    /// Per-patch intensity factor.
    pub scales: Vec<f64>,
    /// Additive noise, same shape as the patches.
    pub noise: Mat,
}

impl TransformDraw {
    pub fn sample(x: &ImageSample, cfg: &TransformConfig, rng: &mut impl Rng) -> Self {
        let flip = cfg.flip_prob > 0.0 && rng.random::<f64>() < cfg.flip_prob;
        let scales = (0..x.patches.nrows())
            .map(|_| if cfg.scale_max > cfg.scale_min { rng.random_range(cfg.scale_min..cfg.scale_max) } else { cfg.scale_min })
            .collect();
        let noise = Mat::from_shape_fn(x.patches.dim(), |_| {
            let z: f64 = StandardNormal.sample(rng);
            z * cfg.noise_sigma
        });
        Self { flip, scales, noise }
    }

    pub fn apply(&self, x: &ImageSample) -> ImageSample {
        let out = if self.flip { flip_horizontal(x) } else { x.clone() };
        let mut patches = out.patches;
        for (mut row, s) in patches.rows_mut().into_iter().zip(&self.scales) {
            row *= *s;
        }
        patches += &self.noise;
        ImageSample { patches }
    }
}

/// Mirror the patch grid left-to-right.
pub fn flip_horizontal(x: &ImageSample) -> ImageSample {
    let n = x.patches.nrows();
    let side = (n as f64).sqrt().round() as usize;
    let mut patches = x.patches.clone();
    for r in 0..side {
        for c in 0..side {
            patches.row_mut(r * side + c).assign(&x.patches.row(r * side + (side - 1 - c)));
        }
    }
    ImageSample { patches }
}

/// Flip (p), per-patch intensity scaling and additive Gaussian noise.
pub fn random_transform(x: &ImageSample, cfg: &TransformConfig, rng: &mut impl Rng) -> ImageSample {
    TransformDraw::sample(x, cfg, rng).apply(x)
}
