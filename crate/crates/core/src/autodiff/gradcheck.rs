//! Central finite-difference verification of analytic gradients.
//!
//! Uses the fourth-order stencil
//! `(8(f(x+h) - f(x-h)) - (f(x+2h) - f(x-2h))) / 12h`.

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy)]
pub struct GradCheckConfig {
    /// Stencil spacing `h`.
    pub fd_step: f64,
    /// Largest acceptable relative error.
    pub tolerance: f64,
    /// Denominator floor of the relative error, so near-zero gradients are
    /// judged on absolute error instead of amplified round-off.
    pub abs_floor: f64,
    /// Check at most this many evenly spaced coordinates per parameter.
    pub max_coords_per_param: Option<usize>,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        GradCheckConfig {
            fd_step: 1e-5,
            tolerance: 1e-6,
            abs_floor: 1e-4,
            max_coords_per_param: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Coordinate {
    pub param: usize,
    pub index: usize,
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// Coordinate where `max_rel_error` was observed.
    pub worst: Option<Coordinate>,
    pub analytic_at_worst: f64,
    pub numeric_at_worst: f64,
    pub checked: usize,
    /// Coordinates whose perturbation crossed a relu kink; not scored.
    pub unreliable: Vec<Coordinate>,
    pub tolerance: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.checked > 0 && self.max_rel_error < self.tolerance
    }
}

/// Compares the gradient of `f` at `params` against central differences.
///
/// `f` must rebuild the same computation on every call; it receives a fresh
/// graph and one leaf per entry of `params`.
pub fn grad_check<F>(
    f: F,
    params: &[Tensor<f64>],
    config: GradCheckConfig,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let eval = |values: &[Tensor<f64>]| -> Result<(f64, Option<(u64, usize)>)> {
        let mut g = Graph::with_kink_probe();
        let vars: Vec<Var> = values.iter().map(|p| g.param(p.clone())).collect();
        let out = f(&mut g, &vars)?;
        Ok((g.value(out).item(), g.kink_signature()))
    };

    let mut g = Graph::with_kink_probe();
    let vars: Vec<Var> = params.iter().map(|p| g.param(p.clone())).collect();
    let loss = f(&mut g, &vars)?;
    let base_signature = g.kink_signature();
    let grads = g.backward(loss)?;
    let analytic: Vec<Tensor<f64>> = vars.iter().map(|&v| grads.get_or_zeros(&g, v)).collect();

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: None,
        analytic_at_worst: 0.0,
        numeric_at_worst: 0.0,
        checked: 0,
        unreliable: Vec::new(),
        tolerance: config.tolerance,
    };
    let mut work: Vec<Tensor<f64>> = params.to_vec();
    for (p, param) in params.iter().enumerate() {
        let n = param.numel();
        let stride = match config.max_coords_per_param {
            Some(limit) if limit > 0 && n > limit => n.div_ceil(limit),
            _ => 1,
        };
        for index in (0..n).step_by(stride) {
            let coord = Coordinate { param: p, index };
            let original = param.data()[index];
            let h = config.fd_step;
            let mut values = [0.0; 4];
            let mut crossed = false;
            for (slot, offset) in values.iter_mut().zip([h, -h, 2.0 * h, -2.0 * h]) {
                work[p].data_mut()[index] = original + offset;
                let (v, sig) = eval(&work)?;
                if !v.is_finite() {
                    work[p].data_mut()[index] = original;
                    return Err(Error::NonFinite(format!(
                        "objective is non-finite when perturbing parameter {p} coordinate {index}"
                    )));
                }
                crossed |= sig != base_signature;
                *slot = v;
            }
            work[p].data_mut()[index] = original;
            if crossed {
                report.unreliable.push(coord);
                continue;
            }
            let [plus, minus, plus2, minus2] = values;
            let numeric = (8.0 * (plus - minus) - (plus2 - minus2)) / (12.0 * h);
            let exact = analytic[p].data()[index];
            let denom = exact.abs().max(numeric.abs()).max(config.abs_floor);
            let rel = (exact - numeric).abs() / denom;
            report.checked += 1;
            if rel > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = rel;
                report.worst = Some(coord);
                report.analytic_at_worst = exact;
                report.numeric_at_worst = numeric;
            }
        }
    }
    Ok(report)
}
