//! Central finite-difference gradient checking.
//!
//! The checker only ever evaluates the forward pass, so it stays independent of
//! the backward rules it validates.

use super::{AutodiffError, Graph, Tensor, Var};

/// Step used by the acceptance gradient suite.
pub const DEFAULT_STEP: f64 = 1e-6;

/// Denominator floor of the relative error, so near-zero gradients are compared absolutely.
pub const RELATIVE_ERROR_FLOOR: f64 = 1e-6;

/// Per unit of `|f|`, the gradient size below which central differences at [`DEFAULT_STEP`]
/// cannot resolve a relative error of 1e-5: round-off in `f(x+h) − f(x−h)` is about
/// `k·ε·|f| / h`, and `ε / h / 1e-5 ≈ 1.1e-5`; `k = 10` covers accumulated summation error.
pub const ROUNDOFF_FLOOR_SCALE: f64 = 1e-4;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheck {
    pub max_rel_error: f64,
    /// `(input, element, analytic, numeric)` at the worst element.
    pub worst: Option<(usize, usize, f64, f64)>,
    pub checked: usize,
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    relative_error_with_floor(analytic, numeric, RELATIVE_ERROR_FLOOR)
}

/// Relative error whose denominator never drops below `floor`.
pub fn relative_error_with_floor(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

fn evaluate<F>(inputs: &[Tensor], f: &F) -> Result<f64, AutodiffError>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var, AutodiffError>,
{
    let mut g = Graph::new();
    let vars = inputs
        .iter()
        .map(|t| g.constant(t.clone()))
        .collect::<Result<Vec<_>, _>>()?;
    let out = f(&mut g, &vars)?;
    g.value(out)
        .item()
        .ok_or_else(|| AutodiffError::NotScalar(g.shape(out).to_vec()))
}

/// Compares reverse-mode gradients of the scalar `f(inputs)` with central differences
/// of step `step`, for every element of every input.
pub fn check_gradients<F>(inputs: &[Tensor], step: f64, f: F) -> Result<GradCheck, AutodiffError>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var, AutodiffError>,
{
    let mut g = Graph::new();
    let vars = inputs
        .iter()
        .map(|t| g.param(t.clone()))
        .collect::<Result<Vec<_>, _>>()?;
    let out = f(&mut g, &vars)?;
    let grads = g.backward(out)?;
    let value = g.value(out).item().ok_or_else(|| AutodiffError::NotScalar(g.shape(out).to_vec()))?;
    let floor = RELATIVE_ERROR_FLOOR.max(ROUNDOFF_FLOOR_SCALE * (DEFAULT_STEP / step) * value.abs());

    let mut report = GradCheck {
        max_rel_error: 0.0,
        worst: None,
        checked: 0,
    };
    let mut probe: Vec<Tensor> = inputs.to_vec();
    for (which, var) in vars.iter().enumerate() {
        let zeros;
        let analytic = match grads.get(*var) {
            Some(a) => a,
            None => {
                zeros = vec![0.0; inputs[which].numel()];
                &zeros
            }
        };
        for (e, &a) in analytic.iter().enumerate() {
            let orig = inputs[which].data()[e];
            probe[which].data_mut()[e] = orig + step;
            let plus = evaluate(&probe, &f)?;
            probe[which].data_mut()[e] = orig - step;
            let minus = evaluate(&probe, &f)?;
            probe[which].data_mut()[e] = orig;
            let numeric = (plus - minus) / (2.0 * step);
            let err = relative_error_with_floor(a, numeric, floor);
            report.checked += 1;
            if err > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = report.max_rel_error.max(err);
                report.worst = Some((which, e, a, numeric));
            }
        }
    }
    Ok(report)
}
