//! Synthetic paired image/text data with hidden class labels.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::encoders::{EncoderConfig, ImageSample, TextSample, CLS_TOKEN};
use crate::error::{invalid, MlipError, Result};
use crate::knowledge::finding_entity;
use crate::numerics::{Mat, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DatasetSpec {
    pub classes: usize,
    pub samples_per_class: usize,
    /// Standard deviation of the per-sample patch noise.
    pub patch_noise: f64,
    /// Weight of the caption-dependent image component.
    pub token_signal: f64,
    /// Tokens in each class vocabulary.
    pub class_vocab: usize,
    /// Fraction of a class vocabulary shared with the next class.
    pub overlap: f64,
    pub vocab: usize,
    pub seq_len: usize,
    pub patches: usize,
    pub patch_dim: usize,
    pub seed: u64,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        Self {
            classes: 4,
            samples_per_class: 200,
            patch_noise: 0.1,
            token_signal: 1.0,
            class_vocab: 16,
            overlap: 0.25,
            vocab: 64,
            seq_len: 12,
            patches: 16,
            patch_dim: 8,
            seed: 0,
        }
    }
}

impl DatasetSpec {
    /// Offset between the first tokens of consecutive class vocabularies.
    pub fn vocab_stride(&self) -> usize {
        self.class_vocab - (self.overlap * self.class_vocab as f64).round() as usize
    }

    /// Entity linking for report tokens against the toy graph: token `k`
    /// falls in the vocabulary block `c = (k − 1) / stride` (clamped to the
    /// last class) and links to finding `(k − 1 − c·stride) mod r` of `c`.
    /// Shared tokens thus link to the later class. Index 0 ([CLS]) links to
    /// nothing and maps to entity 0.
    pub fn token_lexicon(&self, relations_per_class: usize) -> Vec<usize> {
        let stride = self.vocab_stride().max(1);
        (0..self.vocab)
            .map(|k| match k {
                0 => 0,
                _ => {
                    let c = ((k - 1) / stride).min(self.classes - 1);
                    finding_entity(self.classes, relations_per_class, c, (k - 1 - c * stride) % relations_per_class)
                }
            })
            .collect()
    }

    /// Token ids of class `c`.
    pub fn class_tokens(&self, c: usize) -> std::ops::Range<usize> {
        let start = 1 + c * self.vocab_stride();
        start..start + self.class_vocab
    }

    pub fn validate(&self) -> Result<()> {
        if self.classes < 2 {
            return Err(invalid("need at least two classes"));
        }
        if self.samples_per_class == 0 || self.class_vocab == 0 {
            return Err(invalid("samples_per_class and class_vocab must be positive"));
        }
        if !(0.0..1.0).contains(&self.overlap) {
            return Err(invalid(format!("overlap {} outside [0, 1)", self.overlap)));
        }
        if !(self.patch_noise >= 0.0 && self.token_signal >= 0.0) {
            return Err(invalid("noise and signal scales must be >= 0"));
        }
        let last = self.class_tokens(self.classes - 1).end;
        if last > self.vocab {
            return Err(invalid(format!("class vocabularies need {last} token ids, vocabulary has {}", self.vocab)));
        }
        if self.seq_len < 2 {
            return Err(invalid("texts need [CLS] plus at least one token"));
        }
        Ok(())
    }

    pub fn encoder_shape(&self, base: &EncoderConfig) -> EncoderConfig {
        EncoderConfig { patches: self.patches, patch_dim: self.patch_dim, seq_len: self.seq_len, vocab: self.vocab, ..*base }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PairedSample {
    pub image: ImageSample,
    pub text: TextSample,
    /// Hidden; used only by evaluation.
    pub label: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub spec: DatasetSpec,
    pub samples: Vec<PairedSample>,
}

/// Each image is its class template plus `token_signal/√(V−1)` times the
/// sum of per-token patch codes of its caption, plus Gaussian noise.
pub fn generate_dataset(spec: &DatasetSpec) -> Result<Dataset> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let shape = vec![spec.patches, spec.patch_dim];
    let templates: Vec<Mat> = (0..spec.classes).map(|_| Tensor::randn(shape.clone(), 1.0, &mut rng).to_matrix()).collect();
    let codes: Vec<Mat> = (0..spec.vocab).map(|_| Tensor::randn(shape.clone(), 1.0, &mut rng).to_matrix()).collect();
    let words = spec.seq_len - 1;
    let mut samples = Vec::with_capacity(spec.classes * spec.samples_per_class);
    for c in 0..spec.classes {
        let range = spec.class_tokens(c);
        for _ in 0..spec.samples_per_class {
            let mut tokens = Vec::with_capacity(spec.seq_len);
            tokens.push(CLS_TOKEN);
            for _ in 0..words {
                tokens.push(rng.random_range(range.clone()));
            }
            let mut patches = templates[c].clone();
            let w = spec.token_signal / (words as f64).sqrt();
            for &tok in &tokens[1..] {
                patches.scaled_add(w, &codes[tok]);
            }
            if spec.patch_noise > 0.0 {
                patches += &(Tensor::randn(shape.clone(), spec.patch_noise, &mut rng).to_matrix());
            }
            samples.push(PairedSample { image: ImageSample { patches }, text: TextSample { tokens }, label: c });
        }
    }
    Ok(Dataset { spec: *spec, samples })
}

/// Stratified split: within each class, a seeded shuffle sends the first
/// `round(train_frac·n)` samples to training.
pub fn stratified_split(labels: &[usize], train_frac: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let classes = labels.iter().max().map_or(0, |m| m + 1);
    let mut train = Vec::new();
    let mut eval = Vec::new();
    for c in 0..classes {
        let mut idx: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == c).collect();
        idx.shuffle(&mut rng);
        let k = (train_frac * idx.len() as f64).round() as usize;
        train.extend_from_slice(&idx[..k]);
        eval.extend_from_slice(&idx[k..]);
    }
    train.sort_unstable();
    eval.sort_unstable();
    (train, eval)
}

#[derive(Serialize, Deserialize)]
struct SampleRecord {
    label: usize,
    tokens: Vec<usize>,
    patches: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct DatasetFile {
    spec: DatasetSpec,
    samples: Vec<SampleRecord>,
}

pub const DATASET_FILE: &str = "dataset.json";

impl Dataset {
    pub fn labels(&self) -> Vec<usize> {
        self.samples.iter().map(|s| s.label).collect()
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let file = DatasetFile {
            spec: self.spec,
            samples: self
                .samples
                .iter()
                .map(|s| SampleRecord { label: s.label, tokens: s.text.tokens.clone(), patches: s.image.patches.iter().cloned().collect() })
                .collect(),
        };
        let w = std::io::BufWriter::new(std::fs::File::create(path)?);
        serde_json::to_writer(w, &file).map_err(|e| MlipError::Format(e.to_string()))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let r = std::io::BufReader::new(std::fs::File::open(path)?);
        let file: DatasetFile = serde_json::from_reader(r).map_err(|e| MlipError::Format(e.to_string()))?;
        file.spec.validate()?;
        let mut samples = Vec::with_capacity(file.samples.len());
        for rec in file.samples {
            let patches = Mat::from_shape_vec((file.spec.patches, file.spec.patch_dim), rec.patches)
                .map_err(|_| MlipError::Format("patch data does not match the dataset shape".into()))?;
            samples.push(PairedSample { image: ImageSample { patches }, text: TextSample { tokens: rec.tokens }, label: rec.label });
        }
        Ok(Self { spec: file.spec, samples })
    }
}
