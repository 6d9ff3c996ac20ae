//! Central finite-difference checking of analytic gradients.

use crate::error::Result;
use crate::graph::{Graph, Var};
use crate::tensor::Tensor;

/// Default finite-difference step.
pub const FD_STEP: f64 = 1e-6;

/// Smallest magnitude used in the relative-error denominator, so that
/// gradients which are zero analytically compare on an absolute scale.
pub const DENOM_FLOOR: f64 = 1e-3;

/// `|a - n| / max(|a|, |n|, DENOM_FLOOR)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(DENOM_FLOOR)
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// (input index, flat element index) of the worst coordinate.
    pub worst: (usize, usize),
    pub coordinates: usize,
}

impl GradCheckReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_error <= tol
    }

    pub fn merge(self, other: Self) -> Self {
        let coordinates = self.coordinates + other.coordinates;
        let mut best = if other.max_rel_error > self.max_rel_error {
            other
        } else {
            self
        };
        best.coordinates = coordinates;
        best
    }
}

fn evaluate<F>(f: &F, inputs: &[Tensor]) -> Result<f64>
where
    F: Fn(&Graph, &[Var]) -> Result<Var>,
{
    let g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.constant(t.clone())).collect();
    let out = f(&g, &vars)?;
    Ok(g.value(out).data().iter().sum())
}

/// Compares the gradient of `sum(f(inputs))` against central differences
/// at every element of every input.
pub fn check_gradients<F>(inputs: &[Tensor], f: F) -> Result<GradCheckReport>
where
    F: Fn(&Graph, &[Var]) -> Result<Var>,
{
    let coords = inputs
        .iter()
        .enumerate()
        .flat_map(|(i, t)| (0..t.len()).map(move |e| (i, e)))
        .collect::<Vec<_>>();
    check_gradients_at(inputs, &coords, FD_STEP, f)
}

/// Like [`check_gradients`] but only at the listed (input, element)
/// coordinates, with an explicit step.
pub fn check_gradients_at<F>(
    inputs: &[Tensor],
    coords: &[(usize, usize)],
    step: f64,
    f: F,
) -> Result<GradCheckReport>
where
    F: Fn(&Graph, &[Var]) -> Result<Var>,
{
    let g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let out = f(&g, &vars)?;
    let root = if g.value(out).len() == 1 { out } else { g.sum(out) };
    let grads = g.backward(root)?;

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: (0, 0),
        coordinates: 0,
    };
    let mut probe = inputs.to_vec();
    for &(i, e) in coords {
        let analytic = grads.get(vars[i]).map_or(0.0, |t| t.data()[e]);
        let x0 = probe[i].data()[e];
        probe[i].data_mut()[e] = x0 + step;
        let plus = evaluate(&f, &probe)?;
        probe[i].data_mut()[e] = x0 - step;
        let minus = evaluate(&f, &probe)?;
        probe[i].data_mut()[e] = x0;
        let numeric = (plus - minus) / (2.0 * step);
        let err = relative_error(analytic, numeric);
        if err > report.max_rel_error || err.is_nan() {
            report.max_rel_error = if err.is_nan() { f64::INFINITY } else { err };
            report.worst = (i, e);
        }
        report.coordinates += 1;
    }
    Ok(report)
}
