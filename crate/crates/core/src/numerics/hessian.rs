//! Central-difference Hessians and Wald intervals.

use nalgebra::DMatrix;

use crate::error::{Error, Result};

/// Central-difference Hessian of `f` at `x`, step `rel_step * max(|x_k|, 1)`.
pub fn numerical_hessian<F>(mut f: F, x: &[f64], rel_step: f64) -> DMatrix<f64>
where
    F: FnMut(&[f64]) -> f64,
{
    let n = x.len();
    let h: Vec<f64> = x.iter().map(|v| rel_step * v.abs().max(1.0)).collect();
    let f0 = f(x);
    let mut hess = DMatrix::zeros(n, n);
    let mut p = x.to_vec();
    for i in 0..n {
        p[i] = x[i] + h[i];
        let fp = f(&p);
        p[i] = x[i] - h[i];
        let fm = f(&p);
        p[i] = x[i];
        hess[(i, i)] = (fp - 2.0 * f0 + fm) / (h[i] * h[i]);
        for j in 0..i {
            let mut eval = |si: f64, sj: f64| {
                p[i] = x[i] + si * h[i];
                p[j] = x[j] + sj * h[j];
                let v = f(&p);
                p[i] = x[i];
                p[j] = x[j];
                v
            };
            let v = (eval(1.0, 1.0) - eval(1.0, -1.0) - eval(-1.0, 1.0) + eval(-1.0, -1.0)) / (4.0 * h[i] * h[j]);
            hess[(i, j)] = v;
            hess[(j, i)] = v;
        }
    }
    hess
}

/// Standard errors from the Hessian of a negative log-likelihood.
pub fn standard_errors(neg_loglik_hessian: &DMatrix<f64>) -> Result<Vec<f64>> {
    let cov = neg_loglik_hessian
        .clone()
        .try_inverse()
        .ok_or_else(|| Error::Estimator("observed information matrix is singular".into()))?;
    (0..cov.nrows())
        .map(|k| {
            let v = cov[(k, k)];
            if v > 0.0 && v.is_finite() {
                Ok(v.sqrt())
            } else {
                Err(Error::Estimator("observed information matrix is not positive definite".into()))
            }
        })
        .collect()
}

/// One row of a parameter table with a Wald interval.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamEstimate {
    pub name: String,
    pub estimate: f64,
    pub se: f64,
    pub lo: f64,
    pub hi: f64,
}

pub const PARAM_HEADER: [&str; 5] = ["parameter", "estimate", "se", "lo", "hi"];

/// Writes a parameter table as CSV.
pub fn write_param_csv<W: std::io::Write>(rows: &[ParamEstimate], writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(PARAM_HEADER)?;
    for r in rows {
        w.write_record([
            r.name.clone(),
            format!("{}", r.estimate),
            format!("{}", r.se),
            format!("{}", r.lo),
            format!("{}", r.hi),
        ])?;
    }
    w.flush()?;
    Ok(())
}
