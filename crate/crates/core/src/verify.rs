//! Brute-force reference computations. Nothing here calls into the loss,
//! fusion or clustering code; inputs and outputs are plain [`Tensor`]s.

use crate::error::{shape, Result};
use crate::numerics::Tensor;

/// Oracle vs main-path comparison.
#[derive(Debug, Clone, PartialEq)]
pub struct OracleResult {
    pub oracle: Vec<f64>,
    pub main: Vec<f64>,
    pub max_abs: f64,
    pub max_rel: f64,
    pub tolerance: f64,
    pub pass: bool,
}

impl OracleResult {
    /// Passes when every entry agrees within `tolerance` (absolute).
    pub fn compare(oracle: Vec<f64>, main: Vec<f64>, tolerance: f64) -> Self {
        let mut max_abs: f64 = 0.0;
        let mut max_rel: f64 = 0.0;
        let mut pass = oracle.len() == main.len();
        for (a, b) in oracle.iter().zip(&main) {
            let d = (a - b).abs();
            if !d.is_finite() {
                pass = false;
            }
            max_abs = max_abs.max(d);
            max_rel = max_rel.max(d / a.abs().max(b.abs()).max(1e-12));
        }
        pass &= max_abs <= tolerance;
        Self { oracle, main, max_abs, max_rel, tolerance, pass }
    }
}

fn dims2(t: &Tensor) -> Result<(usize, usize)> {
    match t.shape() {
        [r, c] => Ok((*r, *c)),
        other => Err(shape(format!("expected a matrix, got shape {other:?}"))),
    }
}

/// Plain `exp`/`log` InfoNCE on a similarity matrix; the denominator runs
/// along rows when `row_anchored`, else along columns. May overflow for
/// extreme `sim/τ`, in which case the result is non-finite.
pub fn oracle_info_nce(sim: &Tensor, tau: f64, row_anchored: bool) -> Result<f64> {
    let (b, c) = dims2(sim)?;
    if b != c {
        return Err(shape("similarity matrix must be square"));
    }
    let s = sim.data();
    let at = |i: usize, k: usize| if row_anchored { s[i * b + k] } else { s[k * b + i] };
    let mut total = 0.0;
    for i in 0..b {
        let mut denom = 0.0;
        for k in 0..b {
            denom += (at(i, k) / tau).exp();
        }
        total += -((at(i, i) / tau).exp() / denom).ln();
    }
    Ok(total / b as f64)
}

#[derive(Debug, Clone, PartialEq)]
pub struct OracleSinkhorn {
    /// `B × C` plan with rows summing to 1.
    pub plan: Tensor,
    pub iterations: usize,
    /// Largest marginal violation of the final plan (in plan units).
    pub marginal_error: f64,
    pub converged: bool,
}

/// Alternating column/row scaling of `exp(scores/ε)` in the linear domain
/// until both marginals match within 1e-10 or 10⁴ iterations. Targets are
/// row masses `row_target` (per row) and column masses `col_target`.
pub fn oracle_sinkhorn(scores: &Tensor, eps: f64, row_target: &[f64], col_target: &[f64]) -> Result<OracleSinkhorn> {
    let (b, c) = dims2(scores)?;
    if row_target.len() != b || col_target.len() != c {
        return Err(shape("marginal targets do not match the score matrix"));
    }
    let s = scores.data();
    let max = s.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut k: Vec<f64> = s.iter().map(|v| ((v - max) / eps).exp()).collect();
    let mut iterations = 0;
    let mut err = f64::INFINITY;
    while iterations < 10_000 {
        for j in 0..c {
            let col: f64 = (0..b).map(|i| k[i * c + j]).sum();
            for i in 0..b {
                k[i * c + j] *= col_target[j] / col;
            }
        }
        for i in 0..b {
            let row: f64 = k[i * c..(i + 1) * c].iter().sum();
            for v in &mut k[i * c..(i + 1) * c] {
                *v *= row_target[i] / row;
            }
        }
        iterations += 1;
        let col_err = (0..c)
            .map(|j| ((0..b).map(|i| k[i * c + j]).sum::<f64>() - col_target[j]).abs())
            .fold(0.0, f64::max);
        err = col_err;
        if err < 1e-10 {
            break;
        }
    }
    let mut plan = k;
    for i in 0..b {
        for v in &mut plan[i * c..(i + 1) * c] {
            *v /= row_target[i];
        }
    }
    Ok(OracleSinkhorn {
        plan: Tensor::new(vec![b, c], plan)?,
        iterations,
        marginal_error: err,
        converged: err < 1e-10,
    })
}

/// Uniform targets `1/B` per row and `1/C` per column.
pub fn oracle_sinkhorn_uniform(scores: &Tensor, eps: f64) -> Result<OracleSinkhorn> {
    let (b, c) = dims2(scores)?;
    oracle_sinkhorn(scores, eps, &vec![1.0 / b as f64; b], &vec![1.0 / c as f64; c])
}

/// `out_p = Σ_{i,j,k} core[i,j,k] · a[i] · b[j] · m[p,k]`.
pub fn oracle_mode_product(core: &Tensor, a: &[f64], b: &[f64], m: &Tensor) -> Result<Vec<f64>> {
    let (d1, d2, d3) = match core.shape() {
        [x, y, z] => (*x, *y, *z),
        other => return Err(shape(format!("core must be rank 3, got {other:?}"))),
    };
    let (p, q) = dims2(m)?;
    if a.len() != d1 || b.len() != d2 || q != d3 {
        return Err(shape("mode-product operands do not match the core"));
    }
    let c = core.data();
    let md = m.data();
    let mut out = vec![0.0; p];
    for (o, slot) in out.iter_mut().enumerate() {
        for i in 0..d1 {
            for j in 0..d2 {
                for k in 0..d3 {
                    *slot += c[(i * d2 + j) * d3 + k] * a[i] * b[j] * md[o * q + k];
                }
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn info_nce_oracle_examples() {
        let one = Tensor::new(vec![1, 1], vec![0.4]).unwrap();
        assert_eq!(oracle_info_nce(&one, 0.07, true).unwrap(), 0.0);
        let eye = Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        assert!((oracle_info_nce(&eye, 1.0, false).unwrap() - 0.3133).abs() < 1e-4);
    }

    #[test]
    fn sinkhorn_oracle_examples() {
        let flat = Tensor::new(vec![2, 3], vec![0.5; 6]).unwrap();
        let r = oracle_sinkhorn_uniform(&flat, 0.1).unwrap();
        assert!(r.converged);
        assert!(r.plan.data().iter().all(|v| (v - 1.0 / 3.0).abs() < 1e-12));
        let diag = Tensor::new(vec![2, 2], vec![10.0, 0.0, 0.0, 10.0]).unwrap();
        let r = oracle_sinkhorn_uniform(&diag, 0.5).unwrap();
        assert!(r.plan.data()[0] > 0.999 && r.plan.data()[1] < 1e-3);
    }

    #[test]
    fn mode_product_examples() {
        let zero = Tensor::zeros(vec![2, 3, 2]);
        let m = Tensor::new(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(oracle_mode_product(&zero, &[1.0, 1.0], &[1.0, 2.0, 3.0], &m).unwrap(), vec![0.0, 0.0]);
        // core[i,j,k] = δ_jk: reduces to (Σ_i a_i) · M · b
        let mut data = vec![0.0; 2 * 2 * 2];
        for i in 0..2 {
            for j in 0..2 {
                data[(i * 2 + j) * 2 + j] = 1.0;
            }
        }
        let core = Tensor::new(vec![2, 2, 2], data).unwrap();
        let out = oracle_mode_product(&core, &[0.5, 1.5], &[1.0, -1.0], &m).unwrap();
        assert_eq!(out, vec![2.0 * (1.0 - 2.0), 2.0 * (3.0 - 4.0)]);
    }

    #[test]
    fn compare_flags_deviation() {
        assert!(OracleResult::compare(vec![1.0], vec![1.0 + 1e-12], 1e-10).pass);
        assert!(!OracleResult::compare(vec![1.0], vec![1.1], 1e-10).pass);
        assert!(!OracleResult::compare(vec![1.0], vec![], 1e-10).pass);
    }
}
