//! Training configuration: line-oriented `key = value` text.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::category_cl::FeatureForm;
use crate::encoders::{EncoderConfig, TransformConfig};
use crate::error::{MlipError, Result};
use crate::harness::data::DatasetSpec;
use crate::knowledge::TransEConfig;
use crate::numerics::Precision;
use crate::proxy::ProxyConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
pub enum Optimizer {
    #[default]
    Sgd,
    Adam,
}

impl FromStr for Optimizer {
    type Err = MlipError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sgd" => Ok(Optimizer::Sgd),
            "adam" => Ok(Optimizer::Adam),
            other => Err(MlipError::Config(format!("unknown optimizer {other:?} (expected sgd or adam)"))),
        }
    }
}

impl fmt::Display for Optimizer {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Optimizer::Sgd => "sgd",
            Optimizer::Adam => "adam",
        })
    }
}

/// A seed that defaults to the run seed when left as `auto`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
pub struct AutoSeed(pub Option<u64>);

impl FromStr for AutoSeed {
    type Err = MlipError;
    fn from_str(s: &str) -> Result<Self> {
        if s == "auto" {
            return Ok(AutoSeed(None));
        }
        s.parse().map(|v| AutoSeed(Some(v))).map_err(|_| MlipError::Config(format!("bad seed {s:?}")))
    }
}

impl fmt::Display for AutoSeed {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.0 {
            Some(v) => write!(f, "{v}"),
            None => f.write_str("auto"),
        }
    }
}

/// An optional path; `none` when unset.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize, Default)]
pub struct OptPath(pub Option<String>);

impl FromStr for OptPath {
    type Err = MlipError;
    fn from_str(s: &str) -> Result<Self> {
        Ok(OptPath(if s == "none" || s.is_empty() { None } else { Some(s.to_string()) }))
    }
}

impl fmt::Display for OptPath {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.0.as_deref().unwrap_or("none"))
    }
}

fn parse_value<T: FromStr>(key: &str, raw: &str) -> Result<T> {
    raw.parse().map_err(|_| MlipError::Config(format!("{key}: cannot parse {raw:?}")))
}

macro_rules! train_config {
    ($($field:ident : $ty:ty = $default:expr, $doc:literal;)*) => {
        /// Every tunable of a training run.
        #[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
        pub struct TrainConfig {
            $(#[doc = $doc] pub $field: $ty,)*
        }

        impl Default for TrainConfig {
            fn default() -> Self {
                Self { $($field: $default,)* }
            }
        }

        impl TrainConfig {
            /// Set one key from its text form.
            pub fn set(&mut self, key: &str, raw: &str) -> Result<()> {
                match key {
                    $(stringify!($field) => self.$field = parse_value(key, raw)?,)*
                    other => return Err(MlipError::Config(format!("unknown key {other:?}"))),
                }
                Ok(())
            }

            /// `(key, current value, description)` for every key.
            pub fn entries(&self) -> Vec<(&'static str, String, &'static str)> {
                vec![$((stringify!($field), self.$field.to_string(), $doc),)*]
            }
        }
    };
}

train_config! {
    seed: u64 = 0, "run seed (initialization, batches, transforms, negatives, swaps)";
    data_seed: AutoSeed = AutoSeed(None), "dataset seed; auto uses `seed`";
    data_dir: OptPath = OptPath(None), "directory written by gen-data; none generates from the data keys";
    precision: Precision = Precision::F32, "parameter precision between steps (f32 or f64)";
    classes: usize = 4, "latent classes K";
    samples_per_class: usize = 200, "samples per class";
    patch_noise: f64 = 0.1, "image noise standard deviation";
    token_signal: f64 = 1.0, "weight of the caption-dependent image component";
    class_vocab: usize = 16, "tokens per class vocabulary";
    overlap: f64 = 0.25, "fraction of a class vocabulary shared with the next class";
    vocab: usize = 64, "vocabulary size W ([CLS] included)";
    seq_len: usize = 12, "text length V ([CLS] included)";
    patches: usize = 16, "patches per image M^2";
    patch_dim: usize = 8, "raw patch width";
    train_frac: f64 = 0.8, "stratified training fraction";
    dim: usize = 64, "feature width d";
    heads: usize = 4, "encoder attention heads";
    position_encoding: bool = true, "sinusoidal position encodings";
    ln_eps: f64 = 1e-5, "layer-norm epsilon";
    fused_dim: usize = 64, "Tucker output width d_q (must equal dim)";
    prototypes: usize = 8, "prototype count C";
    entity_dim: usize = 32, "knowledge embedding width d_e";
    relations_per_class: usize = 4, "findings per class in the toy graph";
    transe_epochs: usize = 100, "TransE epochs";
    transe_margin: f64 = 1.0, "TransE margin";
    transe_lr: f64 = 0.01, "TransE learning rate";
    unfreeze_knowledge: bool = false, "train the contextual entity embeddings";
    share_local_attention: bool = false, "share cross-attention Q/K/V between image and text sides";
    topic_form: FeatureForm = FeatureForm::Degenerate, "topic extraction: degenerate or sequence:<groups>";
    ts_form: FeatureForm = FeatureForm::Degenerate, "text-swap cross attention: degenerate or sequence:<groups>";
    lambda0: f64 = 0.5, "weight of the augmented global terms";
    lambda1: f64 = 1.0, "weight of L_ita";
    lambda2: f64 = 1.0, "weight of L_tl";
    lambda3: f64 = 1.0, "weight of L_cl";
    lambda4: f64 = 1.0, "weight of L_itm";
    lambda5: f64 = 1.0, "weight of L_ts";
    tau1: f64 = 0.07, "global temperature";
    tau2: f64 = 0.1, "local temperature";
    tau3: f64 = 1.0, "knowledge attention temperature";
    tau4: f64 = 0.1, "prototype temperature";
    sinkhorn_eps: f64 = 0.05, "Sinkhorn epsilon";
    sinkhorn_iters: usize = 3, "Sinkhorn iterations during training";
    sinkhorn_eval_iters: usize = 50, "Sinkhorn iterations for evaluation";
    margin_g: f64 = 0.5, "ITM margin G";
    margin_gp: f64 = 0.5, "text-swap margin G'";
    alpha: f64 = 0.5, "cross-attention weight in the text-swap relevance";
    gamma: f64 = 0.15, "text swap probability";
    flip_prob: f64 = 0.5, "augmentation flip probability";
    aug_noise: f64 = 0.1, "augmentation noise standard deviation";
    scale_min: f64 = 0.8, "augmentation minimum patch scale";
    scale_max: f64 = 1.2, "augmentation maximum patch scale";
    optimizer: Optimizer = Optimizer::Adam, "sgd (with momentum) or adam";
    lr: f64 = 0.001, "peak learning rate";
    momentum: f64 = 0.9, "SGD momentum";
    adam_beta1: f64 = 0.9, "Adam beta1";
    adam_beta2: f64 = 0.999, "Adam beta2";
    adam_eps: f64 = 1e-8, "Adam epsilon";
    cosine_decay: bool = true, "cosine learning-rate decay to zero";
    steps: usize = 500, "optimizer steps";
    batch_size: usize = 16, "batch size B";
    log_every: usize = 1, "metrics row interval";
    eval_every: usize = 0, "evaluation interval (0: final step only)";
    checkpoint_every: usize = 0, "checkpoint interval (0: final step only)";
}

impl TrainConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        cfg.apply(text)?;
        Ok(cfg)
    }

    /// Apply `key = value` lines on top of the current values. `#` starts a
    /// comment.
    pub fn apply(&mut self, text: &str) -> Result<()> {
        for (n, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| MlipError::Config(format!("line {}: expected key = value", n + 1)))?;
            self.set(k.trim(), v.trim()).map_err(|e| MlipError::Config(format!("line {}: {e}", n + 1)))?;
        }
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let cfg = Self::parse(&std::fs::read_to_string(path)?)?;
        Ok(cfg)
    }

    /// Canonical text form; parses back to the same config.
    pub fn to_text(&self) -> String {
        self.entries().into_iter().map(|(k, v, _)| format!("{k} = {v}\n")).collect()
    }

    /// Defaults with descriptions, for `--help`.
    pub fn describe_defaults() -> String {
        Self::default().entries().into_iter().map(|(k, v, d)| format!("  {k} = {v}\n      {d}\n")).collect()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(MlipError::Config(m));
        let lambdas = [self.lambda0, self.lambda1, self.lambda2, self.lambda3, self.lambda4, self.lambda5];
        if lambdas.iter().any(|l| !(*l >= 0.0)) {
            return bad("loss weights must be >= 0".into());
        }
        if [self.lambda1, self.lambda2, self.lambda3, self.lambda4, self.lambda5].iter().all(|l| *l == 0.0) {
            return bad("at least one of lambda1..lambda5 must be positive".into());
        }
        for (name, t) in [("tau1", self.tau1), ("tau2", self.tau2), ("tau3", self.tau3), ("tau4", self.tau4), ("sinkhorn_eps", self.sinkhorn_eps)] {
            if !(t > 0.0) {
                return bad(format!("{name} must be > 0"));
            }
        }
        if self.fused_dim != self.dim {
            return bad(format!("fused_dim ({}) must equal dim ({}): prototypes score both", self.fused_dim, self.dim));
        }
        if self.batch_size == 0 || self.prototypes == 0 || self.sinkhorn_iters == 0 || self.sinkhorn_eval_iters == 0 {
            return bad("batch_size, prototypes and Sinkhorn iterations must be positive".into());
        }
        if !(self.lr >= 0.0) || !(0.0..1.0).contains(&self.momentum) {
            return bad("lr must be >= 0 and momentum in [0, 1)".into());
        }
        if !(self.train_frac > 0.0 && self.train_frac < 1.0) {
            return bad("train_frac must lie in (0, 1)".into());
        }
        if self.scale_min > self.scale_max {
            return bad("scale_min exceeds scale_max".into());
        }
        self.topic_form.validate(self.dim)?;
        self.ts_form.validate(self.dim)?;
        self.encoder().validate()?;
        self.proxy().validate()?;
        self.dataset_spec().validate()
    }

    pub fn effective_data_seed(&self) -> u64 {
        self.data_seed.0.unwrap_or(self.seed)
    }

    pub fn dataset_spec(&self) -> DatasetSpec {
        DatasetSpec {
            classes: self.classes,
            samples_per_class: self.samples_per_class,
            patch_noise: self.patch_noise,
            token_signal: self.token_signal,
            class_vocab: self.class_vocab,
            overlap: self.overlap,
            vocab: self.vocab,
            seq_len: self.seq_len,
            patches: self.patches,
            patch_dim: self.patch_dim,
            seed: self.effective_data_seed(),
        }
    }

    /// Copy the data-shape keys from a loaded dataset.
    pub fn adopt_dataset(&mut self, spec: &DatasetSpec) {
        self.classes = spec.classes;
        self.samples_per_class = spec.samples_per_class;
        self.patch_noise = spec.patch_noise;
        self.token_signal = spec.token_signal;
        self.class_vocab = spec.class_vocab;
        self.overlap = spec.overlap;
        self.vocab = spec.vocab;
        self.seq_len = spec.seq_len;
        self.patches = spec.patches;
        self.patch_dim = spec.patch_dim;
        self.data_seed = AutoSeed(Some(spec.seed));
    }

    pub fn encoder(&self) -> EncoderConfig {
        EncoderConfig {
            dim: self.dim,
            patch_dim: self.patch_dim,
            patches: self.patches,
            seq_len: self.seq_len,
            vocab: self.vocab,
            heads: self.heads,
            position_encoding: self.position_encoding,
            ln_eps: self.ln_eps,
        }
    }

    pub fn transform(&self) -> TransformConfig {
        TransformConfig { flip_prob: self.flip_prob, noise_sigma: self.aug_noise, scale_min: self.scale_min, scale_max: self.scale_max }
    }

    pub fn proxy(&self) -> ProxyConfig {
        ProxyConfig { margin_g: self.margin_g, margin_gp: self.margin_gp, alpha: self.alpha, gamma: self.gamma, form: self.ts_form }
    }

    pub fn transe(&self) -> TransEConfig {
        TransEConfig { dim: self.entity_dim, margin: self.transe_margin, epochs: self.transe_epochs, lr: self.transe_lr, seed: self.seed }
    }

    pub fn lambdas(&self) -> [f64; 5] {
        [self.lambda1, self.lambda2, self.lambda3, self.lambda4, self.lambda5]
    }
}
