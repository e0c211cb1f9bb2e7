//! Reverse-mode gradients compared against central finite differences.

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::var::{backward, no_grad, Var};

#[derive(Clone, Debug)]
pub struct GradCheckOptions {
    /// Central-difference half step.
    pub eps: f64,
    /// Denominator floor of the relative error, so that coordinates whose
    /// gradient is (numerically) zero are compared in absolute terms.
    pub abs_floor: f64,
    /// Coordinates to probe; all of them when `None`.
    pub indices: Option<Vec<usize>>,
    /// Use the fourth-order central stencil instead of the two-point one.
    pub fourth_order: bool,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            eps: 1e-6,
            abs_floor: 1e-8,
            indices: None,
            fourth_order: false,
        }
    }
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    /// Coordinate with the largest relative error.
    pub worst_index: usize,
    pub analytic: Vec<f64>,
    pub numeric: Vec<f64>,
    pub tolerance: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_err < self.tolerance
    }
}

pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    let den = analytic.abs().max(numeric.abs()).max(floor);
    (analytic - numeric).abs() / den
}

/// Checks `f` (scalar valued) at `input` with default options.
pub fn grad_check(
    f: impl Fn(&Var<f64>) -> Var<f64>,
    input: &Tensor<f64>,
    tolerance: f64,
) -> Result<GradCheckReport> {
    grad_check_with(f, input, tolerance, &GradCheckOptions::default())
}

pub fn grad_check_with(
    f: impl Fn(&Var<f64>) -> Var<f64>,
    input: &Tensor<f64>,
    tolerance: f64,
    opts: &GradCheckOptions,
) -> Result<GradCheckReport> {
    let x = Var::leaf(input.clone(), true);
    let y = f(&x);
    if y.len() != 1 {
        return Err(Error::Shape(format!(
            "grad_check needs a scalar output, got shape {:?}",
            y.shape()
        )));
    }
    y.check_finite()?;
    let grads = backward(&y);
    let full = grads.get_or_zeros(&x);
    drop(y);

    let _ng = no_grad();
    let eval = |t: Tensor<f64>| -> Result<f64> {
        let out = f(&Var::constant(t));
        out.check_finite()?;
        Ok(out.item())
    };
    let indices: Vec<usize> = match &opts.indices {
        Some(ix) => ix.clone(),
        None => (0..input.len()).collect(),
    };
    let mut analytic = Vec::with_capacity(indices.len());
    let mut numeric = Vec::with_capacity(indices.len());
    let (mut max_rel_err, mut worst_index) = (0.0f64, 0usize);
    for &i in &indices {
        let at = |offset: f64| {
            let mut t = input.clone();
            t.data_mut()[i] += offset;
            eval(t)
        };
        let h = opts.eps;
        let n = if opts.fourth_order {
            (8.0 * (at(h)? - at(-h)?) - (at(2.0 * h)? - at(-2.0 * h)?)) / (12.0 * h)
        } else {
            (at(h)? - at(-h)?) / (2.0 * h)
        };
        let a = full.data()[i];
        let e = relative_error(a, n, opts.abs_floor);
        if e > max_rel_err || analytic.is_empty() {
            max_rel_err = max_rel_err.max(e);
            worst_index = i;
        }
        analytic.push(a);
        numeric.push(n);
    }
    Ok(GradCheckReport {
        max_rel_err,
        worst_index,
        analytic,
        numeric,
        tolerance,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_function_has_zero_gradient() {
        let x = Tensor::new(&[3], vec![0.3, -1.0, 2.0]).unwrap();
        let r = grad_check(|_| Var::scalar(4.0), &x, 1e-6).unwrap();
        assert!(r.analytic.iter().all(|&g| g == 0.0));
        assert!(r.passed());
    }

    #[test]
    fn non_finite_names_primitive() {
        let x = Tensor::new(&[2], vec![-1.0, 4.0]).unwrap();
        let err = grad_check(|v| v.sqrt().sum_all(), &x, 1e-6).unwrap_err();
        assert!(matches!(err, Error::NonFinite("sqrt")), "{err}");
    }

    #[test]
    fn vector_output_rejected() {
        let x = Tensor::new(&[2], vec![1.0, 2.0]).unwrap();
        assert!(grad_check(|v| v.square(), &x, 1e-6).is_err());
    }
}
