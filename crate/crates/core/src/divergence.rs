//! Divergence encoders: gradient-free copies of the common encoders that are
//! blended toward them by a cosine-similarity coefficient.

use crate::encoders::{encode_images_on, encode_texts_on, project_global_on, EncoderConfig, ImageSample, Modality, TextSample};
use crate::error::{shape, Result};
use crate::numerics::{cosine, Mat, Tape};
use crate::params::{ParamStore, VarMap};

/// Checkpoint namespace for divergence parameters.
pub const DIVERGENCE_PREFIX: &str = "div.";

#[derive(Debug, Clone, PartialEq)]
pub struct DivergenceState {
    /// Copy of the image encoder, `img.*` names.
    pub theta_ov: ParamStore,
    /// Copy of the text encoder, `txt.*` names.
    pub theta_ot: ParamStore,
    pub last_s_v: f64,
    pub last_s_t: f64,
}

/// Divergence-encoder features for one batch.
#[derive(Debug, Clone)]
pub struct Augmented {
    /// Raw `o_v(x_rt)` global features, `B × d`.
    pub v_raw: Mat,
    pub t_raw: Mat,
    /// Projected and unit-normalized, `B × d`.
    pub v_aug: Mat,
    pub t_aug: Mat,
}

fn split(f_params: &ParamStore, prefix: &str) -> ParamStore {
    let mut out = ParamStore::new();
    for (name, t) in f_params.iter().filter(|(n, _)| n.starts_with(prefix)) {
        out.insert(name, t.clone());
    }
    out
}

/// Mean batch cosine between paired rows, clamped to `[0, 1]`.
pub fn blend_coefficient(common: &Mat, aug: &Mat) -> Result<f64> {
    if common.dim() != aug.dim() || common.nrows() == 0 {
        return Err(shape(format!("cannot pair {:?} with {:?}", common.dim(), aug.dim())));
    }
    let mut total = 0.0;
    for (a, b) in common.rows().into_iter().zip(aug.rows()) {
        total += cosine(a.as_slice().expect("row-major"), b.as_slice().expect("row-major"))?.value;
    }
    Ok((total / common.nrows() as f64).clamp(0.0, 1.0))
}

impl DivergenceState {
    /// Exact copies of `f_v` / `f_t`; both similarities start at 0.
    pub fn init(f_params: &ParamStore) -> Self {
        Self {
            theta_ov: split(f_params, "img."),
            theta_ot: split(f_params, "txt."),
            last_s_v: 0.0,
            last_s_t: 0.0,
        }
    }

    /// Features of the transformed images and the texts through the
    /// divergence encoders, then through the (shared) projection heads.
    /// Nothing here is recorded for backpropagation.
    pub fn augment(
        &self,
        x_rt: &[&ImageSample],
        y: &[&TextSample],
        projection: &ParamStore,
        cfg: &EncoderConfig,
    ) -> Result<Augmented> {
        let mut t = Tape::new();
        let mut vars = VarMap::bind(&mut t, &self.theta_ov, false);
        vars.merge(VarMap::bind(&mut t, &self.theta_ot, false));
        vars.merge(VarMap::bind(&mut t, projection, false));
        let img = encode_images_on(&mut t, &vars, "img.", x_rt, cfg)?;
        let txt = encode_texts_on(&mut t, &vars, "txt.", y, cfg)?;
        let v_aug = project_global_on(&mut t, &vars, Modality::Image, img.global, cfg);
        let t_aug = project_global_on(&mut t, &vars, Modality::Text, txt.global, cfg);
        Ok(Augmented {
            v_raw: t.value(img.global).clone(),
            t_raw: t.value(txt.global).clone(),
            v_aug: t.value(v_aug).clone(),
            t_aug: t.value(t_aug).clone(),
        })
    }

    /// Batch-mean cosine of `(v, v_aug)` and `(t, t_aug)` raw features; stores
    /// and returns `(s_v, s_t)`.
    pub fn record_similarity(&mut self, v: &Mat, t: &Mat, aug: &Augmented) -> Result<(f64, f64)> {
        self.last_s_v = blend_coefficient(v, &aug.v_raw)?;
        self.last_s_t = blend_coefficient(t, &aug.t_raw)?;
        Ok((self.last_s_v, self.last_s_t))
    }

    /// `θ_o ← s·θ_f + (1−s)·θ_o` per modality. Coefficients are clamped to
    /// `[0, 1]`.
    pub fn blend_update(&mut self, f_params: &ParamStore, s_v: f64, s_t: f64) -> Result<()> {
        let s_v = s_v.clamp(0.0, 1.0);
        let s_t = s_t.clamp(0.0, 1.0);
        blend(&mut self.theta_ov, f_params, s_v)?;
        blend(&mut self.theta_ot, f_params, s_t)
    }

    /// `div.img.*` / `div.txt.*` tensors for a checkpoint.
    pub fn to_store(&self) -> ParamStore {
        let mut s = ParamStore::new();
        s.extend_prefixed(DIVERGENCE_PREFIX, &self.theta_ov);
        s.extend_prefixed(DIVERGENCE_PREFIX, &self.theta_ot);
        s
    }

    pub fn from_store(store: &ParamStore) -> Self {
        let inner = store.strip_prefix(DIVERGENCE_PREFIX);
        Self { theta_ov: split(&inner, "img."), theta_ot: split(&inner, "txt."), last_s_v: 0.0, last_s_t: 0.0 }
    }
}

fn blend(target: &mut ParamStore, f_params: &ParamStore, s: f64) -> Result<()> {
    for (name, theta_o) in target.iter_mut() {
        let theta_f = f_params.get(name).ok_or_else(|| shape(format!("common encoder lacks {name}")))?;
        if theta_f.shape() != theta_o.shape() {
            return Err(shape(format!("{name}: {:?} vs {:?}", theta_f.shape(), theta_o.shape())));
        }
        for (o, f) in theta_o.data_mut().iter_mut().zip(theta_f.data()) {
            *o = s * f + (1.0 - s) * *o;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoders::{init_encoder_params, init_projection_params};
    use crate::numerics::Tensor;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn scalar_store(v: f64) -> ParamStore {
        let mut s = ParamStore::new();
        s.insert("img.w", Tensor::new(vec![1], vec![v]).unwrap());
        s.insert("txt.w", Tensor::new(vec![1], vec![v]).unwrap());
        s
    }

    #[test]
    fn blend_endpoints_and_midpoint() {
        let f = scalar_store(1.0);
        let mut st = DivergenceState::init(&scalar_store(0.0));
        st.blend_update(&f, 0.5, 0.0).unwrap();
        assert_eq!(st.theta_ov.get("img.w").unwrap().data()[0], 0.5);
        assert_eq!(st.theta_ot.get("txt.w").unwrap().data()[0], 0.0);
        st.blend_update(&f, 1.0, 1.0).unwrap();
        assert_eq!(st.theta_ov.get("img.w").unwrap().data()[0], 1.0);
        assert_eq!(st.theta_ot.get("txt.w").unwrap().data()[0], 1.0);
    }

    #[test]
    fn negative_similarity_is_clamped_to_zero() {
        let f = scalar_store(1.0);
        let mut st = DivergenceState::init(&scalar_store(0.25));
        st.blend_update(&f, -0.7, -0.1).unwrap();
        assert_eq!(st.theta_ov.get("img.w").unwrap().data()[0], 0.25);
    }

    #[test]
    fn shape_mismatch_rejected() {
        let mut st = DivergenceState::init(&scalar_store(0.0));
        let mut f = ParamStore::new();
        f.insert("img.w", Tensor::zeros(vec![2]));
        f.insert("txt.w", Tensor::zeros(vec![1]));
        assert!(st.blend_update(&f, 0.5, 0.5).is_err());
    }

    #[test]
    fn init_copies_by_value() {
        let cfg = EncoderConfig { dim: 8, heads: 2, patches: 4, seq_len: 4, vocab: 8, patch_dim: 3, ..Default::default() };
        let mut f = init_encoder_params(&cfg, &mut ChaCha8Rng::seed_from_u64(0));
        let st = DivergenceState::init(&f);
        assert_eq!(st.theta_ov.get("img.attn.wq"), f.get("img.attn.wq"));
        assert_eq!(st.theta_ot.get("txt.embed"), f.get("txt.embed"));
        assert_eq!((st.last_s_v, st.last_s_t), (0.0, 0.0));
        f.get_mut("img.attn.wq").unwrap().data_mut()[0] += 1.0;
        assert_ne!(st.theta_ov.get("img.attn.wq"), f.get("img.attn.wq"));
        let back = DivergenceState::from_store(&st.to_store());
        assert_eq!(back.theta_ov, st.theta_ov);
        assert_eq!(back.theta_ot, st.theta_ot);
    }

    #[test]
    fn augment_matches_common_path_right_after_init() {
        let cfg = EncoderConfig { dim: 8, heads: 2, patches: 4, seq_len: 4, vocab: 8, patch_dim: 3, ..Default::default() };
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let f = init_encoder_params(&cfg, &mut rng);
        let proj = init_projection_params(&cfg, &mut rng);
        let x = ImageSample { patches: Tensor::randn(vec![4, 3], 1.0, &mut rng).to_matrix() };
        let y = TextSample { tokens: vec![0, 3, 5, 1] };
        let st = DivergenceState::init(&f);
        let aug = st.augment(&[&x], &[&y], &proj, &cfg).unwrap();
        let mut t = Tape::new();
        let mut vars = VarMap::bind(&mut t, &f, false);
        vars.merge(VarMap::bind(&mut t, &proj, false));
        let img = encode_images_on(&mut t, &vars, "img.", &[&x], &cfg).unwrap();
        let vs = project_global_on(&mut t, &vars, Modality::Image, img.global, &cfg);
        assert_eq!(t.value(vs), &aug.v_aug);
        let again = st.augment(&[&x], &[&y], &proj, &cfg).unwrap();
        assert_eq!(again.t_aug, aug.t_aug);
        let mut st = st;
        let (s_v, s_t) = st.record_similarity(t.value(img.global), &aug.t_raw, &aug).unwrap();
        assert!((s_v - 1.0).abs() < 1e-12 && (s_t - 1.0).abs() < 1e-12);
        assert_eq!(st.last_s_v, s_v);
    }

    proptest! {
        #[test]
        fn blend_stays_between_endpoints(o in prop::collection::vec(-5f64..5.0, 6), f in prop::collection::vec(-5f64..5.0, 6), s in 0f64..=1.0) {
            let mut fs = ParamStore::new();
            fs.insert("img.w", Tensor::new(vec![6], f.clone()).unwrap());
            let mut st = DivergenceState { theta_ov: ParamStore::new(), theta_ot: ParamStore::new(), last_s_v: 0.0, last_s_t: 0.0 };
            st.theta_ov.insert("img.w", Tensor::new(vec![6], o.clone()).unwrap());
            st.blend_update(&fs, s, s).unwrap();
            for ((new, old), target) in st.theta_ov.get("img.w").unwrap().data().iter().zip(&o).zip(&f) {
                let (lo, hi) = if old < target { (old, target) } else { (target, old) };
                prop_assert!(*new >= lo - 1e-12 && *new <= hi + 1e-12);
            }
        }

        #[test]
        fn repeated_blends_converge_geometrically(o in prop::collection::vec(-5f64..5.0, 4), f in prop::collection::vec(-5f64..5.0, 4), s in 0.05f64..=1.0) {
            let mut fs = ParamStore::new();
            fs.insert("img.w", Tensor::new(vec![4], f).unwrap());
            let mut st = DivergenceState { theta_ov: ParamStore::new(), theta_ot: ParamStore::new(), last_s_v: 0.0, last_s_t: 0.0 };
            st.theta_ov.insert("img.w", Tensor::new(vec![4], o).unwrap());
            let mut prev = st.theta_ov.distance(&fs);
            for _ in 0..20 {
                st.blend_update(&fs, s, s).unwrap();
                let now = st.theta_ov.distance(&fs);
                prop_assert!((now - (1.0 - s) * prev).abs() < 1e-9);
                prev = now;
            }
        }
    }
}
