use serde::Serialize;

use super::{backward, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug)]
pub struct GradCheckOptions {
    /// Central-difference step.
    pub eps: f64,
    /// Pass threshold on the maximum relative error.
    pub tolerance: f64,
    /// Denominator floor: `|a - n| / max(|a|, |n|, floor)`.
    pub floor: f64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions { eps: 1e-5, tolerance: 1e-4, floor: 1e-5 }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct ParamCheck {
    pub max_rel_error: f64,
    /// Multi-index of the worst coordinate within this parameter.
    pub worst_index: Vec<usize>,
    pub analytic: f64,
    pub numeric: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct GradReport {
    pub params: Vec<ParamCheck>,
    pub max_rel_error: f64,
    /// (parameter position, coordinate multi-index) of the worst mismatch.
    pub worst: (usize, Vec<usize>),
    pub tolerance: f64,
    pub pass: bool,
}

/// Compares [`backward`] against central differences on every coordinate of
/// every parameter. `build` must rebuild the loss from the given parameters
/// with all randomness fixed.
pub fn grad_check<F>(build: F, params: &[Tensor], opts: GradCheckOptions) -> Result<GradReport>
where
    F: Fn(&[Tensor]) -> Result<Tensor>,
{
    let loss = build(params)?;
    let grads = backward(&loss)?;
    let analytic: Vec<Vec<f64>> = params.iter().map(|p| grads.wrt(p)).collect();
    grad_check_against(&analytic, build, params, opts)
}

/// Same comparison with caller-supplied analytic gradients.
pub fn grad_check_against<F>(
    analytic: &[Vec<f64>],
    build: F,
    params: &[Tensor],
    opts: GradCheckOptions,
) -> Result<GradReport>
where
    F: Fn(&[Tensor]) -> Result<Tensor>,
{
    if opts.eps.is_nan() || opts.eps <= 0.0 {
        return Err(Error::Invalid(format!("eps must be positive, got {}", opts.eps)));
    }
    if analytic.len() != params.len() {
        return Err(Error::Invalid("one analytic gradient per parameter required".into()));
    }
    let first = build(params)?.item()?;
    let second = build(params)?.item()?;
    if first.to_bits() != second.to_bits() {
        return Err(Error::NonDeterministic { first, second });
    }

    let mut report = GradReport {
        params: Vec::with_capacity(params.len()),
        max_rel_error: 0.0,
        worst: (0, vec![]),
        tolerance: opts.tolerance,
        pass: true,
    };
    let mut working: Vec<Tensor> = params.to_vec();
    for (pi, p) in params.iter().enumerate() {
        if analytic[pi].len() != p.numel() {
            return Err(Error::shape("grad_check", format!("analytic gradient {pi} has wrong length")));
        }
        let mut check = ParamCheck { max_rel_error: 0.0, worst_index: vec![0; p.rank()], analytic: 0.0, numeric: 0.0 };
        let mut worst_flat = 0;
        for i in 0..p.numel() {
            let mut eval = |delta: f64| -> Result<f64> {
                let mut data = p.to_vec();
                data[i] += delta;
                working[pi] = Tensor::parameter(p.shape(), data)?;
                build(&working)?.item()
            };
            let plus = eval(opts.eps)?;
            let minus = eval(-opts.eps)?;
            let numeric = (plus - minus) / (2.0 * opts.eps);
            let a = analytic[pi][i];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(opts.floor);
            if rel > check.max_rel_error || i == 0 {
                check.max_rel_error = rel;
                check.analytic = a;
                check.numeric = numeric;
                worst_flat = i;
            }
        }
        working[pi] = p.clone();
        check.worst_index = unflatten(worst_flat, p.shape());
        if check.max_rel_error > report.max_rel_error || pi == 0 {
            report.max_rel_error = check.max_rel_error;
            report.worst = (pi, check.worst_index.clone());
        }
        report.params.push(check);
    }
    report.pass = report.max_rel_error <= opts.tolerance;
    Ok(report)
}

fn unflatten(mut flat: usize, shape: &[usize]) -> Vec<usize> {
    let mut idx = vec![0; shape.len()];
    for (k, &e) in shape.iter().enumerate().rev() {
        idx[k] = flat % e;
        flat /= e;
    }
    idx
}
