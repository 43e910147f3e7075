//! Central finite-difference gradient checking.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{MlipError, Result};
use crate::params::ParamStore;

#[derive(Debug, Clone, Copy)]
pub struct GradCheckOptions {
    /// Probe step relative to `max(1, |θ|)`.
    pub step: f64,
    pub tolerance: f64,
    /// Absolute error below which a tensor passes regardless of relative error.
    pub abs_floor: f64,
    /// Entries probed per tensor; `0` probes all of them.
    pub max_entries: usize,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self { step: 1e-5, tolerance: 1e-4, abs_floor: 1e-8, max_entries: 0, seed: 0 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamReport {
    pub name: String,
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    pub checked: usize,
    pub pass: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradReport {
    pub params: Vec<ParamReport>,
    pub pass: bool,
}

impl GradReport {
    pub fn worst_rel_error(&self) -> f64 {
        self.params.iter().map(|p| p.max_rel_error).fold(0.0, f64::max)
    }

    pub fn failures(&self) -> impl Iterator<Item = &ParamReport> {
        self.params.iter().filter(|p| !p.pass)
    }
}

/// Relative error with the denominator floored at `1e-6` so that vanishing
/// gradients are compared on an absolute scale.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6)
}

/// Compare `analytic` against `(f(θ+h) − f(θ−h)) / 2h` for every tensor in
/// `params` (or a seeded subset of each tensor's entries).
pub fn finite_diff_gradcheck<F>(
    mut loss: F,
    params: &ParamStore,
    analytic: &ParamStore,
    opts: GradCheckOptions,
) -> Result<GradReport>
where
    F: FnMut(&ParamStore) -> Result<f64>,
{
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut probe = params.clone();
    let mut reports = Vec::new();
    for (name, tensor) in params.iter() {
        let grad = analytic
            .get(name)
            .ok_or_else(|| MlipError::InvalidInput(format!("no analytic gradient for {name}")))?;
        if grad.shape() != tensor.shape() {
            return Err(MlipError::Shape(format!("gradient for {name} has shape {:?}", grad.shape())));
        }
        let n = tensor.len();
        let entries: Vec<usize> = if opts.max_entries == 0 || n <= opts.max_entries {
            (0..n).collect()
        } else {
            let mut idx = rand::seq::index::sample(&mut rng, n, opts.max_entries).into_vec();
            idx.sort_unstable();
            idx
        };
        let (mut max_rel, mut max_abs) = (0.0f64, 0.0f64);
        for &i in &entries {
            let theta = tensor.data()[i];
            let h = opts.step * theta.abs().max(1.0);
            let mut eval = |value: f64, probe: &mut ParamStore| -> Result<f64> {
                probe.get_mut(name).expect("probe clone").data_mut()[i] = value;
                let f = loss(probe)?;
                if !f.is_finite() {
                    return Err(MlipError::NonFinite(format!("loss at {name}[{i}] = {value}")));
                }
                Ok(f)
            };
            let plus = eval(theta + h, &mut probe)?;
            let minus = eval(theta - h, &mut probe)?;
            probe.get_mut(name).expect("probe clone").data_mut()[i] = theta;
            let numeric = (plus - minus) / (2.0 * h);
            let a = grad.data()[i];
            max_rel = max_rel.max(relative_error(a, numeric));
            max_abs = max_abs.max((a - numeric).abs());
        }
        let pass = max_rel < opts.tolerance || max_abs < opts.abs_floor;
        reports.push(ParamReport {
            name: name.to_string(),
            max_rel_error: max_rel,
            max_abs_error: max_abs,
            checked: entries.len(),
            pass,
        });
    }
    let pass = reports.iter().all(|r| r.pass);
    Ok(GradReport { params: reports, pass })
}
