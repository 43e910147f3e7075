//! The full model: parameters, frozen knowledge, divergence encoders and the
//! joint forward pass recorded on a tape.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::category_cl::{
    category_loss_on, init_category_params, knowledge_fuse_on, prototype_entropy, prototype_log_probs_on, sinkhorn_assign,
    topic_extract_on, tucker_fuse_on, ClusterCode, PrototypeBank, CORE, FUSE_SA, OUTPUT_MAP, PROTOTYPES,
};
use crate::divergence::{Augmented, DivergenceState};
use crate::encoders::{
    encode_images_on, encode_texts_on, init_encoder_params, init_projection_params, project_global_on, project_on, ImageSample,
    Modality, TextSample,
};
use crate::error::{invalid, Result};
use crate::global_ita::global_loss_on;
use crate::harness::config::TrainConfig;
use crate::knowledge::{entity_selection, gat_layer, transe_train, GatParams, KnowledgeGraph};
use crate::local_ita::{
    cross_modal_attend_on, init_local_params, local_loss_side_on, patch_weights, token_weights, IMAGE_XATTN, TEXT_XATTN,
};
use crate::numerics::{Mat, Precision, Tape, Tensor, Var};
use crate::params::{ParamStore, VarMap};
use crate::proxy::{itm_loss_on, ts_loss_on, SwapPlan};

pub const CONTEXTUAL: &str = "knowledge.contextual";
pub const IMAGE_SELECTION: &str = "knowledge.sel_v";
pub const TEXT_SELECTION: &str = "knowledge.sel_t";
pub const LEXICON: &str = "knowledge.lexicon";
pub const KMAP_IMAGE: &str = "kmap.v";
pub const KMAP_TEXT: &str = "kmap.t";
pub const KMAP_CATEGORY: &str = "kmap.c";

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    /// Every gradient-trained tensor.
    pub params: ParamStore,
    /// Contextual entity embeddings `N_e × d_e`.
    pub knowledge: Mat,
    pub divergence: DivergenceState,
    /// Entity rows feeding the image (`M²`) and text (`V`) local paths.
    pub image_selection: Vec<usize>,
    pub text_selection: Vec<usize>,
    /// Entity linked from each token id; a sample's category-level
    /// knowledge is the entities of its report tokens.
    pub lexicon: Vec<usize>,
}

/// Per-batch inputs that a forward pass treats as constants: the
/// divergence-encoder features, the ITM negatives, the text swaps, and
/// optionally frozen codes and local weights (gradient checking).
#[derive(Debug, Clone)]
pub struct BatchContext {
    pub aug: Augmented,
    pub negatives: Option<Vec<usize>>,
    pub swap: SwapPlan,
    pub codes: Option<Mat>,
    pub image_weights: Option<Mat>,
    pub text_weights: Option<Mat>,
}

/// Scalar outputs of one forward pass.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossValues {
    pub v2t: f64,
    pub t2v: f64,
    pub v2a: f64,
    pub avt: f64,
    pub ita: f64,
    pub tl: f64,
    pub v2t_tl: f64,
    pub t2v_tl: f64,
    pub cl: f64,
    pub sinkhorn_row_err: f64,
    pub sinkhorn_col_err: f64,
    pub prototype_entropy: f64,
    pub itm: f64,
    pub ts: f64,
    pub swap_fraction: f64,
    pub total: f64,
}

/// Tape handles for the five losses and the total.
#[derive(Debug, Clone, Copy)]
pub struct LossVars {
    pub ita: Var,
    pub tl: Var,
    pub cl: Var,
    pub itm: Var,
    pub ts: Var,
    pub total: Var,
}

impl LossVars {
    pub fn components(&self) -> [Var; 5] {
        [self.ita, self.tl, self.cl, self.itm, self.ts]
    }
}

#[derive(Debug)]
pub struct Forward {
    pub tape: Tape,
    pub vars: VarMap,
    pub knowledge_var: Var,
    pub losses: LossVars,
    pub values: LossValues,
    /// Raw common-encoder globals, for the blend coefficients.
    pub v_raw: Mat,
    pub t_raw: Mat,
    pub codes: Mat,
    pub image_weights: Mat,
    pub text_weights: Mat,
}

/// `L = Σ_k λ_k L_k` over `(L_ita, L_tl, L_cl, L_itm, L_ts)`.
pub fn total_loss(components: [f64; 5], lambdas: [f64; 5]) -> f64 {
    components.iter().zip(&lambdas).map(|(l, w)| l * w).sum()
}

fn index_tensor(ids: &[usize]) -> Tensor {
    Tensor::new(vec![ids.len()], ids.iter().map(|&i| i as f64).collect()).expect("index vector")
}

fn tensor_indices(t: &Tensor) -> Vec<usize> {
    t.data().iter().map(|v| *v as usize).collect()
}

impl Model {
    /// Fresh parameters; `knowledge` is the contextual embedding matrix.
    pub fn init(cfg: &TrainConfig, graph: &KnowledgeGraph, knowledge: Mat, rng: &mut impl Rng) -> Result<Self> {
        let enc = cfg.encoder();
        if knowledge.nrows() != graph.num_entities() || knowledge.ncols() != cfg.entity_dim {
            return Err(invalid(format!(
                "knowledge is {:?}, expected ({}, {})",
                knowledge.dim(),
                graph.num_entities(),
                cfg.entity_dim
            )));
        }
        let mut params = init_encoder_params(&enc, rng);
        for (n, t) in init_projection_params(&enc, rng).iter() {
            params.insert(n, t.clone());
        }
        for (n, t) in init_local_params(cfg.dim, cfg.share_local_attention, rng).iter() {
            params.insert(n, t.clone());
        }
        let std = 1.0 / (cfg.entity_dim as f64).sqrt();
        params.insert(KMAP_IMAGE, Tensor::randn(vec![cfg.entity_dim, cfg.dim], std, rng));
        params.insert(KMAP_TEXT, Tensor::randn(vec![cfg.entity_dim, cfg.dim], std, rng));
        params.insert(KMAP_CATEGORY, Tensor::randn(vec![cfg.entity_dim, cfg.fused_dim], std, rng));
        for (n, t) in init_category_params(cfg.dim, cfg.fused_dim, cfg.prototypes, rng).iter() {
            params.insert(n, t.clone());
        }
        let divergence = DivergenceState::init(&params);
        let mut model = Self {
            params,
            knowledge,
            divergence,
            image_selection: entity_selection(graph, cfg.patches),
            text_selection: entity_selection(graph, cfg.seq_len),
            lexicon: cfg.dataset_spec().token_lexicon(cfg.relations_per_class),
        };
        model.round_to(cfg.precision);
        Ok(model)
    }

    /// TransE, one graph-attention layer, then [`Model::init`].
    pub fn build(cfg: &TrainConfig, graph: &KnowledgeGraph, rng: &mut impl Rng) -> Result<Self> {
        let fit = transe_train(graph, &cfg.transe())?;
        let gat = gat_layer(&fit.embeddings.entities, graph, &GatParams::init(cfg.entity_dim, cfg.seed))?;
        Self::init(cfg, graph, gat.contextual, rng)
    }

    pub fn round_to(&mut self, precision: Precision) {
        self.params.round_to(precision);
        self.divergence.theta_ov.round_to(precision);
        self.divergence.theta_ot.round_to(precision);
        self.knowledge.mapv_inplace(|v| precision.round(v));
    }

    /// Trainable tensors, with the contextual embeddings appended when
    /// `with_knowledge`.
    pub fn trainable(&self, with_knowledge: bool) -> ParamStore {
        let mut s = self.params.clone();
        if with_knowledge {
            s.insert(CONTEXTUAL, Tensor::from_matrix(&self.knowledge));
        }
        s
    }

    /// Inverse of [`Model::trainable`].
    pub fn set_trainable(&mut self, store: &ParamStore) {
        for (n, t) in store.iter() {
            if n == CONTEXTUAL {
                self.knowledge = t.to_matrix();
            } else if let Some(p) = self.params.get_mut(n) {
                *p = t.clone();
            }
        }
    }

    /// Mutable entries of one [`Model::trainable`] tensor.
    pub fn trainable_data_mut(&mut self, name: &str) -> Option<&mut [f64]> {
        if name == CONTEXTUAL {
            return self.knowledge.as_slice_mut();
        }
        self.params.get_mut(name).map(|t| t.data_mut())
    }

    /// Projection-head tensors shared with the divergence encoders.
    pub fn projection(&self) -> ParamStore {
        let mut s = ParamStore::new();
        for (n, t) in self.params.iter().filter(|(n, _)| n.starts_with("proj.")) {
            s.insert(n, t.clone());
        }
        s
    }

    pub fn prototypes(&self, tau4: f64) -> PrototypeBank {
        PrototypeBank { j: self.params.get(PROTOTYPES).expect("prototypes").to_matrix(), tau4, trainable: true }
    }

    /// Unit-norm prototype rows after an update.
    pub fn renormalize_prototypes(&mut self) {
        let mut j = self.params.get(PROTOTYPES).expect("prototypes").to_matrix();
        crate::category_cl::normalize_rows(&mut j);
        self.params.insert(PROTOTYPES, Tensor::from_matrix(&j));
    }

    /// Parameters, divergence copies, knowledge and selections in one store.
    pub fn to_checkpoint(&self) -> ParamStore {
        let mut s = self.params.clone();
        for (n, t) in self.divergence.to_store().iter() {
            s.insert(n, t.clone());
        }
        s.insert(CONTEXTUAL, Tensor::from_matrix(&self.knowledge));
        s.insert(IMAGE_SELECTION, index_tensor(&self.image_selection));
        s.insert(TEXT_SELECTION, index_tensor(&self.text_selection));
        s.insert(LEXICON, index_tensor(&self.lexicon));
        s
    }

    pub fn from_checkpoint(store: &ParamStore) -> Result<Self> {
        let need = |n: &str| store.get(n).ok_or_else(|| crate::error::MlipError::Format(format!("checkpoint lacks {n}")));
        let knowledge = need(CONTEXTUAL)?.to_matrix();
        let image_selection = tensor_indices(need(IMAGE_SELECTION)?);
        let text_selection = tensor_indices(need(TEXT_SELECTION)?);
        let lexicon = tensor_indices(need(LEXICON)?);
        let mut params = ParamStore::new();
        for (n, t) in store.iter().filter(|(n, _)| !n.starts_with("div.") && !n.starts_with("knowledge.")) {
            params.insert(n, t.clone());
        }
        Ok(Self { params, knowledge, divergence: DivergenceState::from_store(store), image_selection, text_selection, lexicon })
    }

    /// Entities linked from each text's tokens after [CLS], stacked, and the
    /// per-sample count.
    pub fn linked_entities(&self, texts: &[&TextSample]) -> Result<(Vec<usize>, usize)> {
        let n = texts.first().map_or(0, |t| t.tokens.len().saturating_sub(1));
        if n == 0 {
            return Err(invalid("texts need at least one token after [CLS]"));
        }
        let mut ids = Vec::with_capacity(n * texts.len());
        for text in texts {
            if text.tokens.len() != n + 1 {
                return Err(invalid("texts of unequal length"));
            }
            for &tok in &text.tokens[1..] {
                ids.push(*self.lexicon.get(tok).ok_or_else(|| invalid(format!("token {tok} outside the lexicon")))?);
            }
        }
        Ok((ids, n))
    }

    /// Divergence-encoder features for a batch (`x_rt` already transformed).
    pub fn augment(&self, x_rt: &[&ImageSample], texts: &[&TextSample], cfg: &TrainConfig) -> Result<Augmented> {
        self.divergence.augment(x_rt, texts, &self.projection(), &cfg.encoder())
    }

    /// Record every module on a fresh tape. With `with_knowledge` the
    /// contextual embeddings are differentiable leaves.
    pub fn forward(
        &self,
        images: &[&ImageSample],
        texts: &[&TextSample],
        ctx: &BatchContext,
        cfg: &TrainConfig,
        with_knowledge: bool,
    ) -> Result<Forward> {
        let enc = cfg.encoder();
        let b = images.len();
        if b == 0 || texts.len() != b {
            return Err(invalid(format!("{} images and {} texts", images.len(), texts.len())));
        }
        let mut t = Tape::new();
        let vars = VarMap::bind(&mut t, &self.params, true);
        let know = if with_knowledge { t.param(self.knowledge.clone()) } else { t.constant(self.knowledge.clone()) };

        let img = encode_images_on(&mut t, &vars, "img.", images, &enc)?;
        let txt = encode_texts_on(&mut t, &vars, "txt.", texts, &enc)?;
        let v_star = project_global_on(&mut t, &vars, Modality::Image, img.global, &enc);
        let t_star = project_global_on(&mut t, &vars, Modality::Text, txt.global, &enc);

        // global
        let va = t.constant(ctx.aug.v_aug.clone());
        let ta = t.constant(ctx.aug.t_aug.clone());
        let g = global_loss_on(&mut t, v_star, t_star, va, ta, cfg.tau1, cfg.lambda0);
        let gv = g.values(&t);

        // local
        let m = img.local_len;
        let v_len = txt.local_len;
        let p = project_on(&mut t, &vars, Modality::Image, img.local, m, "local.v.sa.", &enc);
        let s = project_on(&mut t, &vars, Modality::Text, txt.local, v_len, "local.t.sa.", &enc);
        let kv = t.gather_rows(know, &self.image_selection);
        let kv = t.matmul(kv, vars.get(KMAP_IMAGE));
        let kt = t.gather_rows(know, &self.text_selection);
        let kt = t.matmul(kt, vars.get(KMAP_TEXT));
        let text_side = if cfg.share_local_attention { IMAGE_XATTN } else { TEXT_XATTN };
        let x = |side: &str, w: &str| vars.get(&format!("{side}{w}"));
        let zv = cross_modal_attend_on(&mut t, p, kv, x(IMAGE_XATTN, "q"), x(IMAGE_XATTN, "k"), x(IMAGE_XATTN, "v"), m);
        let zt = cross_modal_attend_on(&mut t, s, kt, x(text_side, "q"), x(text_side, "k"), x(text_side, "v"), v_len);
        let image_weights = match &ctx.image_weights {
            Some(w) => w.clone(),
            None => weight_matrix(b, m, |i| patch_weights(img.sample_attn(i)))?,
        };
        let text_weights = match &ctx.text_weights {
            Some(w) => w.clone(),
            None => weight_matrix(b, v_len, |i| token_weights(txt.sample_attn(i)))?,
        };
        let lv = local_loss_side_on(&mut t, zv, p, &image_weights, cfg.tau2, m);
        let lt = local_loss_side_on(&mut t, zt, s, &text_weights, cfg.tau2, v_len);
        let tl_sum = t.add(lv, lt);
        let tl = t.scale(tl_sum, 0.5);

        // category
        let (v_dot, t_dot) = topic_extract_on(&mut t, v_star, t_star, cfg.topic_form, cfg.ln_eps);
        let d = cfg.dim;
        let core = t.reshape(vars.get(CORE), d, d * cfg.fused_dim);
        let q = tucker_fuse_on(&mut t, v_dot, t_dot, core, vars.get(OUTPUT_MAP));
        let (linked, k_len) = self.linked_entities(texts)?;
        let ent = t.gather_rows(know, &linked);
        let ent = t.matmul(ent, vars.get(KMAP_CATEGORY));
        let sa = |w: &str| vars.get(&format!("{FUSE_SA}{w}"));
        let vkt = knowledge_fuse_on(&mut t, q, ent, k_len, cfg.tau3, sa("wq"), sa("wk"), sa("wv"));
        let bank = self.prototypes(cfg.tau4);
        let code = match &ctx.codes {
            Some(u) => ClusterCode { u: u.clone() },
            None => sinkhorn_assign(t.value(vkt), &bank, cfg.sinkhorn_eps, cfg.sinkhorn_iters)?,
        };
        let protos = vars.get(PROTOTYPES);
        let logp_v = prototype_log_probs_on(&mut t, v_dot, protos, cfg.tau4);
        let logp_t = prototype_log_probs_on(&mut t, t_dot, protos, cfg.tau4);
        let cl = category_loss_on(&mut t, &code.u, logp_v, logp_t);
        let entropy = prototype_entropy(&t.value(logp_v).mapv(f64::exp));

        // proxy
        let pcfg = cfg.proxy();
        let itm = match &ctx.negatives {
            Some(neg) => itm_loss_on(&mut t, v_star, t_star, neg, cfg.margin_g),
            None => t.constant(Mat::zeros((1, 1))),
        };
        let ts = match ts_loss_on(&mut t, v_star, t_star, &ctx.swap, &pcfg) {
            Some(v) => v,
            None => t.constant(Mat::zeros((1, 1))),
        };

        let comps = [g.ita, tl, cl, itm, ts];
        let lambdas = cfg.lambdas();
        let mut total = t.scale(comps[0], lambdas[0]);
        for (c, w) in comps.iter().zip(&lambdas).skip(1) {
            let term = t.scale(*c, *w);
            total = t.add(total, term);
        }
        let vals: Vec<f64> = comps.iter().map(|c| t.scalar(*c)).collect();
        let values = LossValues {
            v2t: gv.v2t,
            t2v: gv.t2v,
            v2a: gv.v2a,
            avt: gv.avt,
            ita: vals[0],
            tl: vals[1],
            v2t_tl: t.scalar(lv),
            t2v_tl: t.scalar(lt),
            cl: vals[2],
            sinkhorn_row_err: code.row_error(),
            sinkhorn_col_err: code.col_error(),
            prototype_entropy: entropy,
            itm: vals[3],
            ts: vals[4],
            swap_fraction: ctx.swap.fraction(),
            total: t.scalar(total),
        };
        Ok(Forward {
            v_raw: t.value(img.global).clone(),
            t_raw: t.value(txt.global).clone(),
            codes: code.u,
            image_weights,
            text_weights,
            knowledge_var: know,
            losses: LossVars { ita: g.ita, tl, cl, itm, ts, total },
            values,
            vars,
            tape: t,
        })
    }

    /// Gradients of `root` for [`Model::trainable`] tensors.
    pub fn gradients(&self, fwd: &Forward, root: Var, with_knowledge: bool) -> ParamStore {
        let grads = fwd.tape.backward(root);
        let mut out = fwd.vars.gradients(&fwd.tape, &grads, &self.params);
        if with_knowledge {
            let g = grads.get_or_zeros(fwd.knowledge_var, self.knowledge.dim());
            out.insert(CONTEXTUAL, Tensor::from_matrix(&g));
        }
        out
    }
}

fn weight_matrix(b: usize, n: usize, f: impl Fn(usize) -> Result<Vec<f64>>) -> Result<Mat> {
    let mut w = Mat::zeros((b, n));
    for i in 0..b {
        let row = f(i)?;
        if row.len() != n {
            return Err(invalid(format!("{} weights for {n} positions", row.len())));
        }
        for (j, x) in row.into_iter().enumerate() {
            w[[i, j]] = x;
        }
    }
    Ok(w)
}

/// Global features `v*`/`t*` and fused `vkt` rows for evaluation, in chunks
/// of `chunk` samples.
#[derive(Debug, Clone)]
pub struct Embeddings {
    pub v_star: Mat,
    pub t_star: Mat,
    pub vkt: Mat,
}

impl Model {
    pub fn embed(&self, images: &[&ImageSample], texts: &[&TextSample], cfg: &TrainConfig, chunk: usize) -> Result<Embeddings> {
        let enc = cfg.encoder();
        let n = images.len();
        if n == 0 || texts.len() != n {
            return Err(invalid("embedding needs matching, non-empty image and text lists"));
        }
        let d = cfg.dim;
        let mut v_star = Mat::zeros((n, d));
        let mut t_star = Mat::zeros((n, d));
        let mut vkt = Mat::zeros((n, cfg.fused_dim));
        let mut start = 0;
        while start < n {
            let end = (start + chunk.max(1)).min(n);
            let mut t = Tape::new();
            let vars = VarMap::bind(&mut t, &self.params, false);
            let know = t.constant(self.knowledge.clone());
            let img = encode_images_on(&mut t, &vars, "img.", &images[start..end], &enc)?;
            let txt = encode_texts_on(&mut t, &vars, "txt.", &texts[start..end], &enc)?;
            let vs = project_global_on(&mut t, &vars, Modality::Image, img.global, &enc);
            let ts = project_global_on(&mut t, &vars, Modality::Text, txt.global, &enc);
            let (v_dot, t_dot) = topic_extract_on(&mut t, vs, ts, cfg.topic_form, cfg.ln_eps);
            let core = t.reshape(vars.get(CORE), d, d * cfg.fused_dim);
            let q = tucker_fuse_on(&mut t, v_dot, t_dot, core, vars.get(OUTPUT_MAP));
            let (linked, k_len) = self.linked_entities(&texts[start..end])?;
            let ent = t.gather_rows(know, &linked);
            let ent = t.matmul(ent, vars.get(KMAP_CATEGORY));
            let sa = |w: &str| vars.get(&format!("{FUSE_SA}{w}"));
            let fused = knowledge_fuse_on(&mut t, q, ent, k_len, cfg.tau3, sa("wq"), sa("wk"), sa("wv"));
            v_star.slice_mut(ndarray::s![start..end, ..]).assign(t.value(vs));
            t_star.slice_mut(ndarray::s![start..end, ..]).assign(t.value(ts));
            vkt.slice_mut(ndarray::s![start..end, ..]).assign(t.value(fused));
            start = end;
        }
        Ok(Embeddings { v_star, t_star, vkt })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::train::graph_for;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn linked_entities_follow_the_lexicon() {
        let cfg = crate::harness::gradcheck::check_config(0);
        let model = Model::build(&cfg, &graph_for(&cfg).unwrap(), &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let a = TextSample { tokens: vec![0, 1, 2, 5] };
        let b = TextSample { tokens: vec![0, 6, 6, 1] };
        let (ids, n) = model.linked_entities(&[&a, &b]).unwrap();
        assert_eq!(n, 3);
        let lex = cfg.dataset_spec().token_lexicon(cfg.relations_per_class);
        let want: Vec<usize> = [1, 2, 5, 6, 6, 1].iter().map(|&k| lex[k]).collect();
        assert_eq!(ids, want);
        let short = TextSample { tokens: vec![0, 1] };
        assert!(model.linked_entities(&[&a, &short]).is_err());
        let outside = TextSample { tokens: vec![0, 1, 2, 99] };
        assert!(model.linked_entities(&[&outside]).is_err());
        assert!(model.linked_entities(&[&TextSample { tokens: vec![0] }]).is_err());
    }
}
