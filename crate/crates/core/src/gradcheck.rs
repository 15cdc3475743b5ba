//! Central finite-difference gradient checking.
//!
//! Numerical gradients here only ever evaluate forward passes; they never
//! consult [`Graph::backward`], so they serve as an independent oracle for it.

use crate::autograd::{Graph, Var};
use crate::error::Result;
use crate::tensor::Tensor;

/// Denominator floor for relative error. Gradients smaller than this are
/// effectively compared in absolute terms. Parameters whose exact gradient is
/// zero (a bias feeding straight into batch norm) still show central-difference
/// round-off of about `ε·|f|/h`, near 1e-10 at `h = 1e-5`; the floor keeps that
/// noise well under a 1e-4 relative tolerance.
pub const REL_ERR_FLOOR: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheck {
    pub max_rel_err: f64,
    pub max_abs_err: f64,
    /// (tensor, element) of the worst relative error.
    pub worst: (usize, usize),
    pub checked: usize,
}

pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERR_FLOOR)
}

/// Central differences `(f(x + h) - f(x - h)) / 2h` for every element of every
/// tensor in `values`. The tensors are restored before returning.
pub fn numeric_gradients(
    values: &mut [Tensor],
    h: f64,
    mut f: impl FnMut(&[Tensor]) -> Result<f64>,
) -> Result<Vec<Vec<f64>>> {
    let mut out = Vec::with_capacity(values.len());
    for ti in 0..values.len() {
        let mut grad = vec![0.0; values[ti].numel()];
        for (i, slot) in grad.iter_mut().enumerate() {
            let orig = values[ti].data()[i];
            values[ti].data_mut()[i] = orig + h;
            let plus = f(values);
            values[ti].data_mut()[i] = orig - h;
            let minus = f(values);
            values[ti].data_mut()[i] = orig;
            *slot = (plus? - minus?) / (2.0 * h);
        }
        out.push(grad);
    }
    Ok(out)
}

/// Compares analytic and numeric gradients element by element.
pub fn compare(analytic: &[Vec<f64>], numeric: &[Vec<f64>]) -> GradCheck {
    let mut report = GradCheck {
        max_rel_err: 0.0,
        max_abs_err: 0.0,
        worst: (0, 0),
        checked: 0,
    };
    for (ti, (a, n)) in analytic.iter().zip(numeric).enumerate() {
        assert_eq!(a.len(), n.len(), "gradient length mismatch for tensor {ti}");
        for (i, (&av, &nv)) in a.iter().zip(n).enumerate() {
            let r = rel_err(av, nv);
            if r > report.max_rel_err || r.is_nan() {
                report.max_rel_err = r;
                report.worst = (ti, i);
            }
            report.max_abs_err = report.max_abs_err.max((av - nv).abs());
            report.checked += 1;
        }
    }
    report
}

/// Checks `build`, a scalar function of `inputs` recorded on a graph, against
/// finite differences with step `h`.
pub fn check_gradients(
    inputs: &[Tensor],
    h: f64,
    build: impl Fn(&mut Graph<'_>, &[Var]) -> Result<Var>,
) -> Result<GradCheck> {
    let analytic = {
        let mut g = Graph::new(&[]);
        let vars: Vec<Var> = inputs.iter().map(|t| g.variable(t.clone())).collect();
        let loss = build(&mut g, &vars)?;
        let grads = g.backward(loss)?;
        vars.iter()
            .zip(inputs)
            .map(|(&v, t)| {
                grads
                    .wrt(v)
                    .map(<[f64]>::to_vec)
                    .unwrap_or_else(|| vec![0.0; t.numel()])
            })
            .collect::<Vec<_>>()
    };
    let mut values = inputs.to_vec();
    let numeric = numeric_gradients(&mut values, h, |vals| {
        let mut g = Graph::new(&[]);
        let vars: Vec<Var> = vals.iter().map(|t| g.constant(t.clone())).collect();
        let loss = build(&mut g, &vars)?;
        Ok(g.value(loss).item())
    })?;
    Ok(compare(&analytic, &numeric))
}
