//! Image-text matching and text-swapping hinge losses.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::category_cl::{cross_attend_on, FeatureForm};
use crate::error::{invalid, shape, Result};
use crate::numerics::{Mat, Tape, Var};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProxyConfig {
    /// ITM margin `G`.
    pub margin_g: f64,
    /// Text-swapping margin `G′`.
    pub margin_gp: f64,
    pub alpha: f64,
    /// Swap probability `γ`.
    pub gamma: f64,
    pub form: FeatureForm,
}

impl Default for ProxyConfig {
    fn default() -> Self {
        Self { margin_g: 0.5, margin_gp: 0.5, alpha: 0.5, gamma: 0.15, form: FeatureForm::Degenerate }
    }
}

impl ProxyConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.margin_g >= 0.0 && self.margin_gp >= 0.0 && self.alpha >= 0.0) {
            return Err(invalid("margins and alpha must be >= 0"));
        }
        if !(0.0..=1.0).contains(&self.gamma) {
            return Err(invalid(format!("swap probability {} outside [0, 1]", self.gamma)));
        }
        Ok(())
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `r = vᵀt`
pub fn relevance(v: &[f64], t: &[f64]) -> f64 {
    dot(v, t)
}

/// `max(0, G − r(v, t) + r(v_neg, t))`
pub fn itm_loss(v: &[f64], t: &[f64], v_neg: &[f64], cfg: &ProxyConfig) -> f64 {
    (cfg.margin_g - relevance(v, t) + relevance(v_neg, t)).max(0.0)
}

/// Uniformly chosen index different from `i` in a batch of `b ≥ 2`.
pub fn other_index(i: usize, b: usize, rng: &mut impl Rng) -> usize {
    let k = rng.random_range(0..b - 1);
    if k >= i {
        k + 1
    } else {
        k
    }
}

/// One uniformly drawn negative image per sample; `None` for a batch of one.
pub fn sample_negatives(b: usize, rng: &mut impl Rng) -> Option<Vec<usize>> {
    (b >= 2).then(|| (0..b).map(|i| other_index(i, b, rng)).collect())
}

/// Batch-mean ITM hinge on the tape; `neg[i]` indexes the negative image for
/// text `i`.
pub fn itm_loss_on(t: &mut Tape, v: Var, txt: Var, neg: &[usize], margin: f64) -> Var {
    let pos = t.mul(v, txt);
    let pos = t.row_sum(pos);
    let vn = t.gather_rows(v, neg);
    let negs = t.mul(vn, txt);
    let negs = t.row_sum(negs);
    let gap = t.sub(negs, pos);
    let gap = t.add_scalar(gap, margin);
    let h = t.relu(gap);
    t.mean(h)
}

/// Result of [`swap_texts`]: `partner[i]` is the sample whose text now sits
/// at position `i` (itself when not swapped).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SwapPlan {
    pub partner: Vec<usize>,
    pub mask: Vec<bool>,
}

impl SwapPlan {
    pub fn swapped(&self) -> usize {
        self.mask.iter().filter(|m| **m).count()
    }

    pub fn fraction(&self) -> f64 {
        if self.mask.is_empty() {
            0.0
        } else {
            self.swapped() as f64 / self.mask.len() as f64
        }
    }
}

/// Each position takes a different sample's text with probability `gamma`.
pub fn swap_plan(b: usize, gamma: f64, rng: &mut impl Rng) -> SwapPlan {
    let mut partner: Vec<usize> = (0..b).collect();
    let mut mask = vec![false; b];
    if b >= 2 && gamma > 0.0 {
        for i in 0..b {
            if rng.random_bool(gamma) {
                partner[i] = other_index(i, b, rng);
                mask[i] = true;
            }
        }
    }
    SwapPlan { partner, mask }
}

pub fn swap_texts<T: Clone>(texts: &[T], gamma: f64, rng: &mut impl Rng) -> (Vec<T>, SwapPlan) {
    let plan = swap_plan(texts.len(), gamma, rng);
    (plan.partner.iter().map(|&j| texts[j].clone()).collect(), plan)
}

/// `r_ts(v, t) = vᵀt + α CA(v, t)ᵀ CA(t, v)` per row, `B × 1`.
pub fn ts_relevance_on(t: &mut Tape, v: Var, txt: Var, alpha: f64, form: FeatureForm) -> Var {
    let base = t.mul(v, txt);
    let base = t.row_sum(base);
    if alpha == 0.0 {
        return base;
    }
    let a = cross_attend_on(t, v, txt, txt, form);
    let b = cross_attend_on(t, txt, v, v, form);
    let cross = t.mul(a, b);
    let cross = t.row_sum(cross);
    let cross = t.scale(cross, alpha);
    t.add(base, cross)
}

pub fn ts_relevance(v: &[f64], txt: &[f64], cfg: &ProxyConfig) -> Result<f64> {
    if v.len() != txt.len() || v.is_empty() {
        return Err(shape(format!("relevance of lengths {} and {}", v.len(), txt.len())));
    }
    cfg.form.validate(v.len())?;
    let mut t = Tape::new();
    let a = t.constant(Mat::from_shape_vec((1, v.len()), v.to_vec()).expect("row"));
    let b = t.constant(Mat::from_shape_vec((1, txt.len()), txt.to_vec()).expect("row"));
    let r = ts_relevance_on(&mut t, a, b, cfg.alpha, cfg.form);
    Ok(t.scalar(r))
}

/// `max(0, G′ − r_ts(v, t) + r_ts(v, t_swapped))`
pub fn ts_loss(v: &[f64], t_orig: &[f64], t_swapped: &[f64], cfg: &ProxyConfig) -> Result<f64> {
    Ok((cfg.margin_gp - ts_relevance(v, t_orig, cfg)? + ts_relevance(v, t_swapped, cfg)?).max(0.0))
}

/// Mean text-swapping hinge over the swapped positions of `plan`; `None`
/// when nothing was swapped.
pub fn ts_loss_on(t: &mut Tape, v: Var, txt: Var, plan: &SwapPlan, cfg: &ProxyConfig) -> Option<Var> {
    let rows: Vec<usize> = (0..plan.mask.len()).filter(|&i| plan.mask[i]).collect();
    if rows.is_empty() {
        return None;
    }
    let partners: Vec<usize> = rows.iter().map(|&i| plan.partner[i]).collect();
    let vs = t.gather_rows(v, &rows);
    let orig = t.gather_rows(txt, &rows);
    let swapped = t.gather_rows(txt, &partners);
    let pos = ts_relevance_on(t, vs, orig, cfg.alpha, cfg.form);
    let neg = ts_relevance_on(t, vs, swapped, cfg.alpha, cfg.form);
    let gap = t.sub(neg, pos);
    let gap = t.add_scalar(gap, cfg.margin_gp);
    let h = t.relu(gap);
    Some(t.mean(h))
}
