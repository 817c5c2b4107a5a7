//! Central finite-difference gradient checker.
//!
//! Uses only forward evaluations, so it is independent of every backward rule
//! it is used to verify.

use super::{Graph, ShapeError, Tensor, Var};

/// Worst element-wise disagreement found by [`check`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckReport {
    /// `max |g_a − g_fd| / (|g_a| + |g_fd| + 1e-8)` over all checked elements.
    pub max_rel_error: f64,
    pub checked: usize,
    /// `(input, element, analytic, numeric)` at the worst element.
    pub worst: Option<(usize, usize, f64, f64)>,
}

/// Relative error measure shared by all gradient criteria.
pub fn rel_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs() + 1e-8)
}

/// Compare analytic and finite-difference gradients of a scalar function.
///
/// `f` builds the scalar root from parameter leaves. Every element of every
/// input is perturbed by `±h` unless `max_per_input` limits the count, in
/// which case a deterministic stride through the elements is used.
pub fn check<F, E>(inputs: &[Tensor], h: f64, max_per_input: Option<usize>, f: F) -> Result<GradCheckReport, E>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var, E>,
    E: From<ShapeError>,
{
    let eval = |values: &[Tensor]| -> Result<f64, E> {
        let mut g = Graph::new();
        let vars: Vec<Var> = values.iter().map(|t| g.constant(t.clone())).collect();
        let root = f(&mut g, &vars)?;
        Ok(g.value(root).item().expect("scalar root"))
    };

    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let root = f(&mut g, &vars)?;
    let grads = g.backward(root)?;

    let mut worst: f64 = 0.0;
    let mut worst_at = None;
    let mut checked = 0;
    let mut values = inputs.to_vec();
    for (i, v) in vars.iter().enumerate() {
        let analytic = grads
            .get(*v)
            .unwrap_or_else(|| Tensor::zeros(inputs[i].shape()));
        let n = inputs[i].numel();
        let step = match max_per_input {
            Some(m) if m < n => n.div_ceil(m),
            _ => 1,
        };
        for j in (0..n).step_by(step) {
            let orig = values[i].data()[j];
            values[i].data_mut()[j] = orig + h;
            let plus = eval(&values)?;
            values[i].data_mut()[j] = orig - h;
            let minus = eval(&values)?;
            values[i].data_mut()[j] = orig;
            let numeric = (plus - minus) / (2.0 * h);
            let e = rel_error(analytic.data()[j], numeric);
            if e > worst || worst_at.is_none() {
                worst = e;
                worst_at = Some((i, j, analytic.data()[j], numeric));
            }
            checked += 1;
        }
    }
    Ok(GradCheckReport {
        max_rel_error: worst,
        checked,
        worst: worst_at,
    })
}
