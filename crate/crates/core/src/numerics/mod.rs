//! Dense numerics: the tensor carrier, stabilized primitives and the
//! finite-difference gradient checker.

pub mod gradcheck;
pub mod tape;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, shape, MlipError, Result};
pub use gradcheck::{finite_diff_gradcheck, GradCheckOptions, GradReport, ParamReport};
pub use tape::{AttnSpec, Grads, Mat, Tape, Var};

/// Dense row-major array with an explicit shape.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.is_empty() || shape.iter().any(|&d| d == 0) {
            return Err(shape_err(&shape));
        }
        if shape.iter().product::<usize>() != data.len() {
            return Err(crate::error::shape(format!("shape {:?} does not hold {} values", shape, data.len())));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Self { shape, data: vec![0.0; n] }
    }

    pub fn from_matrix(m: &Mat) -> Self {
        let (r, c) = m.dim();
        Self { shape: vec![r, c], data: m.iter().cloned().collect() }
    }

    /// Entries drawn i.i.d. from `N(0, std²)`.
    pub fn randn<R: rand::Rng + ?Sized>(shape: Vec<usize>, std: f64, rng: &mut R) -> Self {
        use rand_distr::{Distribution, StandardNormal};
        let n = shape.iter().product();
        let data = (0..n)
            .map(|_| {
                let z: f64 = StandardNormal.sample(rng);
                z * std
            })
            .collect();
        Self { shape, data }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// First axis as rows, the remaining axes flattened into columns.
    pub fn matrix_dims(&self) -> (usize, usize) {
        if self.shape.len() == 1 {
            (1, self.shape[0])
        } else {
            (self.shape[0], self.shape[1..].iter().product())
        }
    }

    pub fn to_matrix(&self) -> Mat {
        Array2::from_shape_vec(self.matrix_dims(), self.data.clone()).expect("tensor invariant")
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

fn shape_err(s: &[usize]) -> MlipError {
    shape(format!("invalid shape {s:?}"))
}

/// Numeric mode for parameter storage during training.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    /// Parameters are rounded to single precision after every update.
    #[default]
    F32,
    F64,
}

impl Precision {
    pub fn round(self, x: f64) -> f64 {
        match self {
            Precision::F32 => x as f32 as f64,
            Precision::F64 => x,
        }
    }
}

impl std::str::FromStr for Precision {
    type Err = MlipError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "f32" => Ok(Precision::F32),
            "f64" => Ok(Precision::F64),
            other => Err(MlipError::Config(format!("unknown precision {other:?} (expected f32 or f64)"))),
        }
    }
}

impl std::fmt::Display for Precision {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Precision::F32 => "f32",
            Precision::F64 => "f64",
        })
    }
}

fn check_finite(x: &[f64], what: &str) -> Result<()> {
    match x.iter().position(|v| !v.is_finite()) {
        Some(i) => Err(MlipError::NonFinite(format!("{what}[{i}] = {}", x[i]))),
        None => Ok(()),
    }
}

/// Temperature-scaled softmax in log-sum-exp form.
pub fn softmax(x: &[f64], temperature: f64) -> Result<Vec<f64>> {
    if x.is_empty() {
        return Err(invalid("softmax of an empty vector"));
    }
    check_finite(x, "softmax input")?;
    if !(temperature > 0.0 && temperature.is_finite()) {
        return Err(invalid(format!("softmax temperature must be > 0, got {temperature}")));
    }
    let max = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = x.iter().map(|v| ((v - max) / temperature).exp()).collect();
    let sum: f64 = exps.iter().sum();
    Ok(exps.into_iter().map(|e| e / sum).collect())
}

/// Zero-mean, unit-variance normalization (population variance, no affine).
pub fn layer_norm(x: &[f64], epsilon: f64) -> Result<Vec<f64>> {
    if x.is_empty() {
        return Err(invalid("layer_norm of an empty vector"));
    }
    if epsilon <= 0.0 {
        return Err(invalid("layer_norm epsilon must be > 0"));
    }
    check_finite(x, "layer_norm input")?;
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let inv = 1.0 / (var + epsilon).sqrt();
    Ok(x.iter().map(|v| (v - mean) * inv).collect())
}

/// Single-head self-attention `softmax(XWq (XWk)ᵀ · scale) · XWv`.
///
/// Returns the output rows and the attention matrix.
pub fn self_attention(x: &Mat, wq: &Mat, wk: &Mat, wv: &Mat, scale: f64) -> Result<(Mat, Mat)> {
    let d = x.ncols();
    for (name, w) in [("Wq", wq), ("Wk", wk), ("Wv", wv)] {
        if w.dim() != (d, d) {
            return Err(shape(format!("{name} is {:?}, expected ({d}, {d})", w.dim())));
        }
    }
    if x.nrows() == 0 {
        return Err(invalid("self_attention needs at least one row"));
    }
    let mut t = Tape::new();
    let xv = t.constant(x.clone());
    let (q, k, v) = (t.constant(wq.clone()), t.constant(wk.clone()), t.constant(wv.clone()));
    let (q, k, v) = (t.matmul(xv, q), t.matmul(xv, k), t.matmul(xv, v));
    let n = x.nrows();
    let out = t.attention(q, k, v, AttnSpec { heads: 1, q_len: n, k_len: n, shared_kv: false, scale });
    let attn = t.attention_probs(out).expect("attention node")[0].clone();
    Ok((t.value(out).clone(), attn))
}

/// Cosine similarity, clamped to [-1, 1].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Cosine {
    pub value: f64,
    /// One of the inputs had zero norm; `value` is then 0.
    pub degenerate: bool,
}

pub fn cosine(a: &[f64], b: &[f64]) -> Result<Cosine> {
    if a.len() != b.len() {
        return Err(shape(format!("cosine of lengths {} and {}", a.len(), b.len())));
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>();
    let nb = b.iter().map(|x| x * x).sum::<f64>();
    if na == 0.0 || nb == 0.0 {
        return Ok(Cosine { value: 0.0, degenerate: true });
    }
    Ok(Cosine { value: (dot / (na * nb).sqrt()).clamp(-1.0, 1.0), degenerate: false })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use proptest::prelude::*;

    #[test]
    fn softmax_examples() {
        assert_eq!(softmax(&[0.0, 0.0], 1.0).unwrap(), vec![0.5, 0.5]);
        // exp(k) / (e + e^2 + e^3)
        let z: f64 = [1f64, 2.0, 3.0].iter().map(|v| v.exp()).sum();
        let expect: Vec<f64> = [1f64, 2.0, 3.0].iter().map(|v| v.exp() / z).collect();
        let got = softmax(&[1.0, 2.0, 3.0], 1.0).unwrap();
        for (g, e) in got.iter().zip(&expect) {
            assert!((g - e).abs() < 1e-12);
        }
        assert!((got[0] - 0.0900).abs() < 1e-4 && (got[1] - 0.2447).abs() < 1e-4 && (got[2] - 0.6652).abs() < 1e-4);
        for p in softmax(&[5.0, 5.0, 5.0], 0.01).unwrap() {
            assert!((p - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn softmax_rejects_bad_input() {
        assert!(matches!(softmax(&[1.0, f64::NAN], 1.0), Err(MlipError::NonFinite(_))));
        assert!(softmax(&[1.0], 0.0).is_err());
        assert!(softmax(&[1.0], -1.0).is_err());
    }

    #[test]
    fn layer_norm_examples() {
        assert_eq!(layer_norm(&[3.0, 3.0, 3.0], 1e-5).unwrap(), vec![0.0, 0.0, 0.0]);
        let eps = 1e-5;
        let got = layer_norm(&[1.0, -1.0], eps).unwrap();
        let expect = 1.0 / (1.0f64 + eps).sqrt();
        assert!((got[0] - expect).abs() < 1e-15 && (got[1] + expect).abs() < 1e-15);
        let got = layer_norm(&[2.0, 4.0], 1e-12).unwrap();
        assert!((got[0] + 1.0).abs() < 1e-9 && (got[1] - 1.0).abs() < 1e-9);
        assert!(layer_norm(&[], 1e-5).is_err());
    }

    #[test]
    fn self_attention_examples() {
        let wq = array![[1.0, 0.5], [0.0, 1.0]];
        let wk = array![[0.3, 0.0], [1.0, -1.0]];
        let wv = array![[2.0, 1.0], [0.0, 1.0]];
        // single row: attention forced to [1]
        let x1 = array![[0.4, -1.2]];
        let (out, attn) = self_attention(&x1, &wq, &wk, &wv, 0.7).unwrap();
        assert_eq!(attn, array![[1.0]]);
        assert_eq!(out, x1.dot(&wv));
        // identical rows
        let xs = array![[1.0, 2.0], [1.0, 2.0], [1.0, 2.0]];
        let (out, _) = self_attention(&xs, &wq, &wk, &wv, 0.7).unwrap();
        for r in 1..3 {
            assert_eq!(out.row(r), out.row(0));
        }
        // 2×2 instance against an explicit product oracle
        let x = array![[1.0, 0.0], [0.5, -1.0]];
        let q = x.dot(&wq);
        let k = x.dot(&wk);
        let v = x.dot(&wv);
        let mut expect = Mat::zeros((2, 2));
        for i in 0..2 {
            let s: Vec<f64> = (0..2).map(|j| 0.7 * (q[[i, 0]] * k[[j, 0]] + q[[i, 1]] * k[[j, 1]])).collect();
            let z: f64 = s.iter().map(|x| x.exp()).sum();
            for j in 0..2 {
                for c in 0..2 {
                    expect[[i, c]] += s[j].exp() / z * v[[j, c]];
                }
            }
        }
        let (out, attn) = self_attention(&x, &wq, &wk, &wv, 0.7).unwrap();
        for (a, b) in out.iter().zip(expect.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
        for row in attn.rows() {
            assert!((row.sum() - 1.0).abs() < 1e-12);
        }
        assert!(self_attention(&x, &array![[1.0]], &wk, &wv, 1.0).is_err());
    }

    #[test]
    fn cosine_examples() {
        assert_eq!(cosine(&[1.0, 2.0], &[1.0, 2.0]).unwrap().value, 1.0);
        assert_eq!(cosine(&[1.0, 0.0], &[0.0, 3.0]).unwrap().value, 0.0);
        assert!((cosine(&[1.0, 0.0], &[1.0, 1.0]).unwrap().value - 0.5f64.sqrt()).abs() < 1e-15);
        let c = cosine(&[0.0, 0.0], &[1.0, 1.0]).unwrap();
        assert!(c.degenerate && c.value == 0.0);
    }

    proptest! {
        #[test]
        fn softmax_sums_to_one(x in prop::collection::vec(-1e3f64..1e3, 1..200), log_tau in -3.0f64..3.0) {
            let p = softmax(&x, 10f64.powf(log_tau)).unwrap();
            prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            prop_assert!(p.iter().all(|v| (0.0..=1.0).contains(v)));
        }

        #[test]
        fn layer_norm_shift_invariant(x in prop::collection::vec(-10f64..10.0, 2..64), c in -100f64..100.0) {
            let shifted: Vec<f64> = x.iter().map(|v| v + c).collect();
            let a = layer_norm(&x, 1e-5).unwrap();
            let b = layer_norm(&shifted, 1e-5).unwrap();
            for (u, v) in a.iter().zip(&b) {
                prop_assert!((u - v).abs() < 1e-9);
            }
        }

        #[test]
        fn attention_rows_are_distributions(vals in prop::collection::vec(-2f64..2.0, 4 * 3 + 3 * 9)) {
            let x = Mat::from_shape_vec((4, 3), vals[..12].to_vec()).unwrap();
            let w = |k: usize| Mat::from_shape_vec((3, 3), vals[12 + 9 * k..21 + 9 * k].to_vec()).unwrap();
            let (_, attn) = self_attention(&x, &w(0), &w(1), &w(2), 0.5).unwrap();
            for row in attn.rows() {
                prop_assert!((row.sum() - 1.0).abs() < 1e-9);
            }
        }
    }
}
