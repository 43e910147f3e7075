//! Global image-text InfoNCE losses and the combined objective with the
//! divergence-augmented pairs.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, shape, Result};
use crate::numerics::{Mat, Tape, Var};

/// Which side supplies the softmax denominator.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Direction {
    /// Each anchor row against all candidates (image-to-text).
    RowAnchored,
    /// Each candidate against all anchors (text-to-image).
    ColumnAnchored,
}

pub(crate) fn check_tau(tau: f64) -> Result<()> {
    if tau > 0.0 && tau.is_finite() {
        Ok(())
    } else {
        Err(invalid(format!("temperature must be > 0, got {tau}")))
    }
}

/// Mean InfoNCE over the batch, recorded on `t`.
pub fn info_nce_on(t: &mut Tape, anchors: Var, candidates: Var, tau: f64, dir: Direction) -> Var {
    let b = t.shape(anchors).0;
    let sim = t.matmul_t(anchors, candidates);
    let logits = t.scale(sim, 1.0 / tau);
    let oriented = match dir {
        Direction::RowAnchored => logits,
        Direction::ColumnAnchored => t.transpose(logits),
    };
    let logp = t.log_softmax_rows(oriented);
    let w = Mat::from_diag_elem(b, -1.0 / b as f64);
    t.weighted_sum(logp, w)
}

fn check_pair(anchors: &Mat, candidates: &Mat) -> Result<()> {
    if anchors.nrows() == 0 {
        return Err(invalid("InfoNCE needs a non-empty batch"));
    }
    if anchors.dim() != candidates.dim() {
        return Err(shape(format!("anchors {:?} vs candidates {:?}", anchors.dim(), candidates.dim())));
    }
    Ok(())
}

/// `mean_i −log( exp(sim_ii/τ) / Σ_k exp(sim_ik/τ) )` with `sim = anchors·candidatesᵀ`;
/// column-anchored sums over `sim_ki` instead.
pub fn info_nce(anchors: &Mat, candidates: &Mat, tau: f64, dir: Direction) -> Result<f64> {
    check_pair(anchors, candidates)?;
    check_tau(tau)?;
    let mut t = Tape::new();
    let a = t.constant(anchors.clone());
    let c = t.constant(candidates.clone());
    let l = info_nce_on(&mut t, a, c, tau, dir);
    Ok(t.scalar(l))
}

/// Inputs to [`global_loss`].
#[derive(Debug, Clone)]
pub struct GlobalBatch {
    pub v_star: Mat,
    pub t_star: Mat,
    pub v_aug: Mat,
    pub t_aug: Mat,
    pub tau1: f64,
    pub lambda0: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct GlobalLosses {
    pub v2t: f64,
    pub t2v: f64,
    pub v2a: f64,
    pub avt: f64,
    pub ita: f64,
}

#[derive(Debug, Clone, Copy)]
pub struct GlobalVars {
    pub v2t: Var,
    pub t2v: Var,
    pub v2a: Var,
    pub avt: Var,
    pub ita: Var,
}

impl GlobalVars {
    pub fn values(&self, t: &Tape) -> GlobalLosses {
        GlobalLosses {
            v2t: t.scalar(self.v2t),
            t2v: t.scalar(self.t2v),
            v2a: t.scalar(self.v2a),
            avt: t.scalar(self.avt),
            ita: t.scalar(self.ita),
        }
    }
}

/// `½(L_v2t + L_t2v) + (λ0/2)(L_v2a + L_avt)`.
pub fn global_loss_on(t: &mut Tape, v_star: Var, t_star: Var, v_aug: Var, t_aug: Var, tau1: f64, lambda0: f64) -> GlobalVars {
    let v2t = info_nce_on(t, v_star, t_star, tau1, Direction::RowAnchored);
    let t2v = info_nce_on(t, v_star, t_star, tau1, Direction::ColumnAnchored);
    let v2a = info_nce_on(t, v_star, t_aug, tau1, Direction::RowAnchored);
    let avt = info_nce_on(t, v_aug, t_star, tau1, Direction::ColumnAnchored);
    let common = t.add(v2t, t2v);
    let common = t.scale(common, 0.5);
    let aug = t.add(v2a, avt);
    let aug = t.scale(aug, 0.5 * lambda0);
    let ita = t.add(common, aug);
    GlobalVars { v2t, t2v, v2a, avt, ita }
}

pub fn global_loss(batch: &GlobalBatch) -> Result<GlobalLosses> {
    check_pair(&batch.v_star, &batch.t_star)?;
    check_pair(&batch.v_star, &batch.t_aug)?;
    check_pair(&batch.v_aug, &batch.t_star)?;
    check_tau(batch.tau1)?;
    if !(batch.lambda0 >= 0.0) {
        return Err(invalid("lambda0 must be >= 0"));
    }
    let mut t = Tape::new();
    let vs = t.constant(batch.v_star.clone());
    let ts = t.constant(batch.t_star.clone());
    let va = t.constant(batch.v_aug.clone());
    let ta = t.constant(batch.t_aug.clone());
    Ok(global_loss_on(&mut t, vs, ts, va, ta, batch.tau1, batch.lambda0).values(&t))
}

/// Paired binary latents: `x` uniform on {0, 1}, `y` equal to `x` except
/// flipped with probability `flip`. Views are one-hot rows in ℝ².
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TwoClassChannel {
    pub flip: f64,
}

impl TwoClassChannel {
    /// `I(x; y) = ln 2 − H(flip)` in nats.
    pub fn mutual_information(&self) -> f64 {
        let h = |p: f64| if p <= 0.0 || p >= 1.0 { 0.0 } else { -p * p.ln() - (1.0 - p) * (1.0 - p).ln() };
        std::f64::consts::LN_2 - h(self.flip)
    }

    /// One batch of `b` paired views.
    pub fn sample(&self, b: usize, rng: &mut impl Rng) -> (Mat, Mat) {
        let mut v = Mat::zeros((b, 2));
        let mut t = Mat::zeros((b, 2));
        for i in 0..b {
            let x = rng.random_range(0..2usize);
            let y = if rng.random::<f64>() < self.flip { 1 - x } else { x };
            v[[i, x]] = 1.0;
            t[[i, y]] = 1.0;
        }
        (v, t)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{array, Axis};
    use proptest::prelude::*;

    fn unit_rows(vals: &[f64], b: usize, d: usize) -> Mat {
        let mut m = Mat::from_shape_vec((b, d), vals.to_vec()).unwrap();
        for mut r in m.rows_mut() {
            let n = r.dot(&r).sqrt().max(1e-9);
            r /= n;
        }
        m
    }

    #[test]
    fn single_sample_is_zero() {
        let v = array![[0.6, 0.8]];
        assert_eq!(info_nce(&v, &v, 0.07, Direction::RowAnchored).unwrap(), 0.0);
        let l = global_loss(&GlobalBatch { v_star: v.clone(), t_star: v.clone(), v_aug: v.clone(), t_aug: v, tau1: 0.07, lambda0: 0.5 }).unwrap();
        assert_eq!(l.ita, 0.0);
    }

    #[test]
    fn two_sample_diagonal() {
        let e = Mat::eye(2);
        let expect = -(1f64.exp() / (1f64.exp() + 1.0)).ln();
        assert!((expect - 0.3133).abs() < 1e-4);
        for dir in [Direction::RowAnchored, Direction::ColumnAnchored] {
            assert!((info_nce(&e, &e, 1.0, dir).unwrap() - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn lambda_zero_drops_augmented_terms() {
        let v = unit_rows(&[1.0, 0.2, -0.3, 0.5, 0.9, 0.1], 3, 2);
        let t = unit_rows(&[0.4, 1.0, 0.3, -0.5, 0.2, 0.7], 3, 2);
        let l = global_loss(&GlobalBatch { v_star: v.clone(), t_star: t.clone(), v_aug: t.clone(), t_aug: v.clone(), tau1: 0.1, lambda0: 0.0 }).unwrap();
        assert_eq!(l.ita, 0.5 * (l.v2t + l.t2v));
    }

    #[test]
    fn rejects_bad_arguments() {
        let e = Mat::eye(2);
        assert!(info_nce(&e, &e, 0.0, Direction::RowAnchored).is_err());
        assert!(info_nce(&Mat::zeros((0, 2)), &Mat::zeros((0, 2)), 1.0, Direction::RowAnchored).is_err());
        assert!(info_nce(&e, &Mat::eye(3), 1.0, Direction::RowAnchored).is_err());
    }

    #[test]
    fn low_temperature_does_not_overflow() {
        let v = unit_rows(&[1.0, 0.0, 0.0, 1.0, 0.7, 0.7], 3, 2);
        let l = info_nce(&v, &v, 1e-3, Direction::RowAnchored).unwrap();
        assert!(l.is_finite());
    }

    proptest! {
        #[test]
        fn swapping_modalities_swaps_directions(vals in prop::collection::vec(-1f64..1.0, 24)) {
            let v = unit_rows(&vals[..12], 4, 3);
            let t = unit_rows(&vals[12..], 4, 3);
            let a = info_nce(&v, &t, 0.2, Direction::RowAnchored).unwrap();
            let b = info_nce(&t, &v, 0.2, Direction::ColumnAnchored).unwrap();
            prop_assert!((a - b).abs() < 1e-12);
        }

        #[test]
        fn row_permutation_invariant(vals in prop::collection::vec(-1f64..1.0, 24)) {
            let v = unit_rows(&vals[..12], 4, 3);
            let t = unit_rows(&vals[12..], 4, 3);
            let perm = [2usize, 0, 3, 1];
            let (vp, tp) = (v.select(Axis(0), &perm), t.select(Axis(0), &perm));
            for dir in [Direction::RowAnchored, Direction::ColumnAnchored] {
                let a = info_nce(&v, &t, 0.07, dir).unwrap();
                let b = info_nce(&vp, &tp, 0.07, dir).unwrap();
                prop_assert!((a - b).abs() < 1e-9);
            }
        }

        #[test]
        fn raising_positive_similarity_never_hurts(vals in prop::collection::vec(-1f64..1.0, 16), bump in 0f64..2.0) {
            // direct logits: anchors = I, candidates = sim matrix rows
            let sim = Mat::from_shape_vec((4, 4), vals).unwrap();
            let mut raised = sim.clone();
            raised[[1, 1]] += bump;
            let eye = Mat::eye(4);
            for dir in [Direction::RowAnchored, Direction::ColumnAnchored] {
                let a = info_nce(&eye, &sim.t().to_owned(), 0.5, dir).unwrap();
                let b = info_nce(&eye, &raised.t().to_owned(), 0.5, dir).unwrap();
                prop_assert!(b <= a + 1e-12);
            }
        }
    }

    #[test]
    fn channel_information() {
        assert!((TwoClassChannel { flip: 0.0 }.mutual_information() - 2.0f64.ln()).abs() < 1e-15);
        assert_eq!(TwoClassChannel { flip: 0.5 }.mutual_information(), 0.0);
        // ln 2 + 0.1 ln 0.1 + 0.9 ln 0.9
        let direct = 2.0f64.ln() + 0.1 * 0.1f64.ln() + 0.9 * 0.9f64.ln();
        assert!((TwoClassChannel { flip: 0.1 }.mutual_information() - direct).abs() < 1e-15);
    }

    #[test]
    fn infonce_bounds_channel_information() {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        let ch = TwoClassChannel { flip: 0.1 };
        let n = 2000;
        let losses: Vec<f64> = (0..n)
            .map(|_| {
                let (v, t) = ch.sample(4, &mut rng);
                info_nce(&v, &t, 0.1, Direction::RowAnchored).unwrap()
            })
            .collect();
        let mean = losses.iter().sum::<f64>() / n as f64;
        let sd = (losses.iter().map(|l| (l - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt();
        assert!(3.0f64.ln() - mean <= ch.mutual_information() + 3.0 * sd / (n as f64).sqrt());
    }
}
