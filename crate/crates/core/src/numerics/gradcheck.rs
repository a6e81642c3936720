//! Central finite-difference verification of tape gradients.

use super::tape::{Tape, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Magnitudes below this are compared in absolute rather than relative terms.
pub const REL_FLOOR: f64 = 1e-8;

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    /// Flat indices that were checked.
    pub indices: Vec<usize>,
    pub analytic: Vec<f64>,
    pub numeric: Vec<f64>,
    pub rel_errors: Vec<f64>,
    pub max_rel_error: f64,
    /// Flat indices whose relative error exceeded `tol`.
    pub violations: Vec<usize>,
    pub tol: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.violations.is_empty()
    }
}

pub fn relative_error(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(REL_FLOOR)
}

/// Compares a claimed gradient against central differences of `f`.
///
/// `indices` restricts the check to a subset of flat positions; `None` checks
/// every element.
pub fn check_gradient<F>(
    analytic: &[f64],
    params: &Tensor,
    mut f: F,
    h: f64,
    tol: f64,
    indices: Option<&[usize]>,
) -> Result<GradCheckReport>
where
    F: FnMut(&Tensor) -> Result<f64>,
{
    if analytic.len() != params.len() {
        return Err(Error::dim(format!("gradient has {} entries for {} parameters", analytic.len(), params.len())));
    }
    let all: Vec<usize>;
    let idx = match indices {
        Some(i) => i,
        None => {
            all = (0..params.len()).collect();
            &all
        }
    };
    let mut probe = params.clone();
    let mut report = GradCheckReport {
        indices: idx.to_vec(),
        analytic: Vec::with_capacity(idx.len()),
        numeric: Vec::with_capacity(idx.len()),
        rel_errors: Vec::with_capacity(idx.len()),
        max_rel_error: 0.0,
        violations: Vec::new(),
        tol,
    };
    for &i in idx {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + h;
        let up = f(&probe)?;
        probe.data_mut()[i] = orig - h;
        let down = f(&probe)?;
        probe.data_mut()[i] = orig;
        if !up.is_finite() || !down.is_finite() {
            return Err(Error::Evaluation(format!("non-finite objective while perturbing element {i}")));
        }
        let numeric = (up - down) / (2.0 * h);
        let rel = relative_error(analytic[i], numeric);
        if rel > tol {
            report.violations.push(i);
        }
        report.max_rel_error = report.max_rel_error.max(rel);
        report.analytic.push(analytic[i]);
        report.numeric.push(numeric);
        report.rel_errors.push(rel);
    }
    Ok(report)
}

/// Builds `f` on a fresh tape with `params` as its only leaf, differentiates
/// it, and compares against central differences with step `h`.
pub fn grad_check<F>(f: F, params: &Tensor, h: f64, tol: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    let eval = |p: &Tensor| -> Result<(Tape, Var, Var)> {
        let mut tape = Tape::new();
        let x = tape.leaf(p.clone());
        let y = f(&mut tape, x)?;
        if tape.value(y).len() != 1 {
            return Err(Error::dim("grad_check objective must be scalar"));
        }
        Ok((tape, x, y))
    };
    let (tape, x, y) = eval(params)?;
    if !tape.value(y).item().is_finite() {
        return Err(Error::Evaluation("objective is not finite at the base point".into()));
    }
    let analytic = tape.backward(y)?.tensor(x).into_data();
    check_gradient(
        &analytic,
        params,
        |p| {
            let (t, _, y) = eval(p)?;
            Ok(t.value(y).item())
        },
        h,
        tol,
        None,
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn square_at_three() {
        let x = Tensor::vector(vec![3.0]);
        let r = grad_check(|t, x| t.mul_row(x, x), &x, 1e-5, 1e-4).unwrap();
        assert!(r.passed());
        assert!((r.analytic[0] - 6.0).abs() < 1e-12);
        assert!((r.numeric[0] - 6.0).abs() < 1e-8);
    }

    #[test]
    fn corrupted_gradient_is_flagged() {
        // f(x) = sum x^3 but the claimed rule says 2x.
        let x = Tensor::vector(vec![0.5, -1.5, 2.0]);
        let wrong: Vec<f64> = x.data().iter().map(|v| 2.0 * v).collect();
        let r = check_gradient(&wrong, &x, |p| Ok(p.data().iter().map(|v| v * v * v).sum()), 1e-5, 1e-4, None).unwrap();
        assert!(!r.passed());
        assert_eq!(r.violations.len(), 3);
    }

    #[test]
    fn nonfinite_objective_is_an_error() {
        let x = Tensor::vector(vec![0.0]);
        let r = check_gradient(&[0.0], &x, |p| Ok(1.0 / p.data()[0].abs().min(0.0)), 1e-5, 1e-4, None);
        assert!(matches!(r, Err(Error::Evaluation(_))));
    }
}
