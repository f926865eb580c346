//! Central finite-difference checks for tape gradients.
//!
//! The numeric side evaluates the function on untracked constants only, so it
//! never touches the backward closures it is checking.

use super::{Result, Tape, Tensor};
use std::sync::Arc;

#[derive(Debug, Clone, Copy)]
pub struct GradCheckConfig {
    pub step: f64,
    pub rel_tol: f64,
    /// Denominator floor for the relative error, so coordinates whose true
    /// gradient is zero are judged on absolute error below this scale.
    pub floor: f64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        GradCheckConfig {
            step: 1e-5,
            rel_tol: 1e-4,
            floor: 1e-6,
        }
    }
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    /// (input index, coordinate, analytic, numeric) for the worst coordinate
    pub worst: Option<(usize, usize, f64, f64)>,
    pub coordinates: usize,
    pub passed: bool,
}

pub fn rel_err(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Compares tape gradients of scalar `f` against central differences.
///
/// `inputs` are the evaluation point; each becomes a tracked leaf for the
/// analytic pass. Only the inputs flagged in `check` are perturbed.
pub fn check_gradients<F>(
    inputs: &[Tensor],
    check: &[bool],
    f: F,
    cfg: GradCheckConfig,
) -> Result<GradCheckReport>
where
    F: Fn(&[Tensor]) -> Result<Tensor>,
{
    let tape = Tape::new();
    let leaves: Vec<Tensor> = inputs
        .iter()
        .map(|t| tape.leaf(t.shape(), Arc::new(t.to_vec())))
        .collect::<Result<_>>()?;
    let out = f(&leaves)?;
    let grads = out.backward()?;

    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        worst: None,
        coordinates: 0,
        passed: true,
    };
    for (idx, input) in inputs.iter().enumerate() {
        if !check.get(idx).copied().unwrap_or(true) {
            continue;
        }
        let analytic = grads.get_or_zeros(&leaves[idx]);
        for coord in 0..input.numel() {
            let eval = |delta: f64| -> Result<f64> {
                let mut point: Vec<Tensor> = inputs.iter().map(Tensor::detach).collect();
                let mut data = input.to_vec();
                data[coord] += delta;
                point[idx] = Tensor::new(input.shape(), data)?;
                f(&point)?.item()
            };
            let numeric = (eval(cfg.step)? - eval(-cfg.step)?) / (2.0 * cfg.step);
            let err = rel_err(analytic[coord], numeric, cfg.floor);
            report.coordinates += 1;
            if err > report.max_rel_err || report.worst.is_none() {
                report.max_rel_err = err;
                report.worst = Some((idx, coord, analytic[coord], numeric));
            }
        }
    }
    report.passed = report.max_rel_err <= cfg.rel_tol;
    Ok(report)
}
