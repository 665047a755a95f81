use super::{no_grad, Tensor};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy)]
pub struct GradCheckOptions {
    /// Central-difference step.
    pub eps: f64,
    /// Bound on the relative error.
    pub tol: f64,
    /// Bound on the absolute error; either bound passing is enough.
    pub absolute_floor: f64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            eps: 1e-5,
            tol: 1e-4,
            absolute_floor: 1e-8,
        }
    }
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub op_name: String,
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    pub passed: bool,
    /// Coordinate with the largest relative error, or the first NaN.
    pub worst_coordinate: Option<usize>,
    pub diagnostic: Option<String>,
}

impl std::fmt::Display for GradCheckReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "{:<24} {}  max_rel={:.3e} max_abs={:.3e}",
            self.op_name,
            if self.passed { "PASS" } else { "FAIL" },
            self.max_rel_error,
            self.max_abs_error
        )?;
        if let Some(d) = &self.diagnostic {
            write!(f, "  ({d})")?;
        }
        Ok(())
    }
}

/// [`grad_check_with`] using the default step and tolerances.
pub fn grad_check<F>(name: &str, f: F, x: &Tensor) -> Result<GradCheckReport>
where
    F: Fn(&Tensor) -> Result<Tensor>,
{
    grad_check_with(name, f, x, GradCheckOptions::default())
}

/// Compares the reverse-mode gradient of a scalar function against central
/// differences `(f(x+εe) − f(x−εe)) / 2ε`, one coordinate at a time.
///
/// The relative error of a coordinate is `|a − n| / max(|a|, |n|, 1e-3)`; the
/// floor keeps near-zero gradients from amplifying finite-difference noise.
pub fn grad_check_with<F>(name: &str, f: F, x: &Tensor, opts: GradCheckOptions) -> Result<GradCheckReport>
where
    F: Fn(&Tensor) -> Result<Tensor>,
{
    let leaf = x.detach().to_param();
    let y = f(&leaf)?;
    if y.numel() != 1 {
        return Err(Error::Contract(format!(
            "grad_check({name}): function must be scalar, got {:?}",
            y.shape()
        )));
    }
    y.backward()?;
    let analytic = leaf.grad().unwrap_or_else(|| vec![0.0; x.numel()]);

    let base = x.to_vec();
    let eval = |data: Vec<f64>| -> Result<f64> {
        let t = Tensor::new(data, x.shape())?;
        Ok(no_grad(|| f(&t))?.item())
    };

    let mut report = GradCheckReport {
        op_name: name.to_string(),
        max_rel_error: 0.0,
        max_abs_error: 0.0,
        passed: true,
        worst_coordinate: None,
        diagnostic: None,
    };
    for (i, &a) in analytic.iter().enumerate() {
        let mut plus = base.clone();
        plus[i] += opts.eps;
        let mut minus = base.clone();
        minus[i] -= opts.eps;
        let numeric = (eval(plus)? - eval(minus)?) / (2.0 * opts.eps);
        if numeric.is_nan() || a.is_nan() {
            report.passed = false;
            report.max_rel_error = f64::NAN;
            report.max_abs_error = f64::NAN;
            report.worst_coordinate = Some(i);
            report.diagnostic = Some(format!("NaN at coordinate {i} (analytic {a}, numeric {numeric})"));
            return Ok(report);
        }
        let abs = (a - numeric).abs();
        let rel = abs / a.abs().max(numeric.abs()).max(1e-3);
        report.max_abs_error = report.max_abs_error.max(abs);
        if rel > report.max_rel_error || report.worst_coordinate.is_none() {
            report.max_rel_error = report.max_rel_error.max(rel);
            report.worst_coordinate = Some(i);
        }
    }
    report.passed = report.max_rel_error <= opts.tol || report.max_abs_error <= opts.absolute_floor;
    if !report.passed {
        report.diagnostic = report.worst_coordinate.map(|i| format!("worst coordinate {i}"));
    }
    Ok(report)
}
