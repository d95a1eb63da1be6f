//! Central-difference gradient verification.
//!
//! The checker perturbs sampled parameter coordinates by `±step`, forms the
//! central difference, and compares it against the analytic gradient with the
//! relative error `|analytic - numeric| / max(1, |numeric|)`.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// A parameter under verification. `frozen_prefix` leading coordinates are
/// structurally fixed (e.g. a padding row) and are excluded from both
/// perturbation and comparison.
pub struct CheckedParam {
    pub name: String,
    pub tensor: Tensor,
    pub frozen_prefix: usize,
}

impl CheckedParam {
    pub fn new(name: impl Into<String>, tensor: Tensor) -> Self {
        CheckedParam { name: name.into(), tensor, frozen_prefix: 0 }
    }

    pub fn with_frozen_prefix(name: impl Into<String>, tensor: Tensor, frozen_prefix: usize) -> Self {
        CheckedParam { name: name.into(), tensor, frozen_prefix }
    }
}

#[derive(Debug, Clone)]
pub struct GradCheckConfig {
    /// Central-difference step.
    pub step: f64,
    /// Maximum accepted relative error.
    pub tolerance: f64,
    /// Coordinates sampled per parameter tensor (all, if the tensor is smaller).
    pub max_coords_per_param: usize,
    /// Seed for coordinate sampling.
    pub seed: u64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        GradCheckConfig { step: 1e-4, tolerance: 1e-4, max_coords_per_param: 16, seed: 0 }
    }
}

#[derive(Debug, Clone)]
pub struct ParamCheck {
    pub name: String,
    pub coords_checked: usize,
    pub max_rel_err: f64,
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub params: Vec<ParamCheck>,
    pub max_rel_err: f64,
    pub tolerance: f64,
    pub passed: bool,
}

impl GradCheckReport {
    pub fn print_lines(&self) -> Vec<String> {
        let mut out = Vec::new();
        for p in &self.params {
            out.push(format!(
                "{:<28} coords={:<4} max_rel_err={:.3e}",
                p.name, p.coords_checked, p.max_rel_err
            ));
        }
        out.push(format!(
            "overall max_rel_err={:.3e} tolerance={:.1e} => {}",
            self.max_rel_err,
            self.tolerance,
            if self.passed { "PASS" } else { "FAIL" }
        ));
        out
    }
}

/// Verifies analytic gradients against central differences.
///
/// `loss` must be deterministic (dropout disabled, fixed inputs); this is
/// enforced by evaluating it twice up front and rejecting any disagreement.
/// `grads` returns one gradient buffer per parameter, aligned with `params`.
pub fn finite_diff_check<F, G>(
    params: &mut Vec<CheckedParam>,
    mut loss: F,
    mut grads: G,
    cfg: &GradCheckConfig,
) -> Result<GradCheckReport>
where
    F: FnMut(&[CheckedParam]) -> Result<f64>,
    G: FnMut(&[CheckedParam]) -> Result<Vec<Vec<f64>>>,
{
    let first = loss(params)?;
    let second = loss(params)?;
    if first.to_bits() != second.to_bits() {
        return Err(Error::NondeterministicClosure { first, second });
    }

    let analytic = grads(params)?;
    if analytic.len() != params.len() {
        return Err(Error::invalid(
            "finite_diff_check",
            format!("{} gradient buffers for {} params", analytic.len(), params.len()),
        ));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut report = GradCheckReport {
        params: Vec::new(),
        max_rel_err: 0.0,
        tolerance: cfg.tolerance,
        passed: true,
    };

    for pi in 0..params.len() {
        let numel = params[pi].tensor.numel();
        let frozen = params[pi].frozen_prefix;
        if analytic[pi].len() != numel {
            return Err(Error::shape(
                "finite_diff_check",
                format!("{} gradient elements for {}", numel, params[pi].name),
                format!("{}", analytic[pi].len()),
            ));
        }
        let mut coords: Vec<usize> = (frozen..numel).collect();
        if coords.len() > cfg.max_coords_per_param {
            coords.shuffle(&mut rng);
            coords.truncate(cfg.max_coords_per_param);
            coords.sort_unstable();
        }

        let mut max_rel = 0.0_f64;
        for &c in &coords {
            let original = params[pi].tensor.data()[c];
            params[pi].tensor.data_mut()[c] = original + cfg.step;
            let plus = loss(params)?;
            params[pi].tensor.data_mut()[c] = original - cfg.step;
            let minus = loss(params)?;
            params[pi].tensor.data_mut()[c] = original;
            let numeric = (plus - minus) / (2.0 * cfg.step);
            let rel = (analytic[pi][c] - numeric).abs() / numeric.abs().max(1.0);
            if rel > max_rel {
                max_rel = rel;
            }
        }
        if max_rel > report.max_rel_err {
            report.max_rel_err = max_rel;
        }
        report.params.push(ParamCheck {
            name: params[pi].name.clone(),
            coords_checked: coords.len(),
            max_rel_err: max_rel,
        });
    }
    report.passed = report.max_rel_err <= cfg.tolerance;
    Ok(report)
}
