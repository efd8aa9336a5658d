//! Bracketed root finding for monotone functions.

use crate::error::{Error, Result};

pub const ROOT_FTOL: f64 = 1e-10;
pub const ROOT_XTOL: f64 = 1e-12;
const MAX_ITER: usize = 400;

#[inline]
fn width_ok(lo: f64, hi: f64, xtol: f64) -> bool {
    hi - lo <= xtol.max(4.0 * f64::EPSILON * lo.abs().max(hi.abs()))
}

/// Solve `f(x) = target` for nondecreasing `f` on `[lo, hi]`.
///
/// Illinois-modified regula falsi; a plain bisection step replaces the secant
/// whenever two consecutive steps fail to halve the bracket. Stops when
/// `|f(x) - target| <= 1e-10` or the bracket is narrower than `1e-12`.
pub fn find_root_increasing<F>(f: F, target: f64, lo: f64, hi: f64) -> Result<f64>
where
    F: FnMut(f64) -> f64,
{
    find_root_increasing_tol(f, target, lo, hi, ROOT_FTOL, ROOT_XTOL)
}

pub fn find_root_increasing_tol<F>(
    mut f: F,
    target: f64,
    mut lo: f64,
    mut hi: f64,
    ftol: f64,
    xtol: f64,
) -> Result<f64>
where
    F: FnMut(f64) -> f64,
{
    if !(lo <= hi) {
        return Err(Error::Domain(format!("empty bracket [{lo}, {hi}]")));
    }
    let mut glo = f(lo) - target;
    let mut ghi = f(hi) - target;
    if !(glo <= 0.0 && ghi >= 0.0) {
        return Err(Error::Bracket {
            lo,
            hi,
            f_lo: glo + target,
            f_hi: ghi + target,
        });
    }
    if glo.abs() <= ftol {
        return Ok(lo);
    }
    if ghi.abs() <= ftol {
        return Ok(hi);
    }

    // Scaled endpoint values for the Illinois modification.
    let (mut slo, mut shi) = (glo, ghi);
    let mut last_side = 0i8;
    let mut slow_steps = 0;
    for _ in 0..MAX_ITER {
        if width_ok(lo, hi, xtol) {
            break;
        }
        let width = hi - lo;
        let mut x = if slow_steps >= 2 || shi == slo {
            0.5 * (lo + hi)
        } else {
            lo - slo * (hi - lo) / (shi - slo)
        };
        if !(x > lo && x < hi) {
            x = 0.5 * (lo + hi);
        }
        let g = f(x) - target;
        if g.abs() <= ftol {
            return Ok(x);
        }
        if g < 0.0 {
            lo = x;
            glo = g;
            slo = g;
            if last_side == -1 {
                shi *= 0.5;
            }
            last_side = -1;
        } else {
            hi = x;
            ghi = g;
            shi = g;
            if last_side == 1 {
                slo *= 0.5;
            }
            last_side = 1;
        }
        if hi - lo > 0.5 * width {
            slow_steps += 1;
        } else {
            slow_steps = 0;
        }
    }
    Ok(if -glo < ghi { lo } else { hi })
}

/// Invert a CDF with a safeguarded Newton iteration.
///
/// `cdf_pdf(x)` returns `(F(x), f(x))`. Requires `F(lo) <= q <= F(hi)`;
/// steps that leave the bracket or meet a non-positive density fall back to
/// bisection, as does a run of steps that fail to halve the bracket.
pub fn invert_cdf<F>(mut cdf_pdf: F, q: f64, mut lo: f64, mut hi: f64, x0: f64, ftol: f64) -> Result<f64>
where
    F: FnMut(f64) -> (f64, f64),
{
    let mut x = if x0 > lo && x0 < hi { x0 } else { 0.5 * (lo + hi) };
    let mut slow_steps = 0;
    for _ in 0..MAX_ITER {
        let width = hi - lo;
        let (fx, dens) = cdf_pdf(x);
        let g = fx - q;
        if g.abs() <= ftol {
            return Ok(x);
        }
        if g < 0.0 {
            lo = x;
        } else {
            hi = x;
        }
        if width_ok(lo, hi, ROOT_XTOL) {
            return Ok(x);
        }
        if hi - lo > 0.5 * width {
            slow_steps += 1;
        } else {
            slow_steps = 0;
        }
        let newton = x - g / dens;
        x = if slow_steps < 3 && dens > 0.0 && newton > lo && newton < hi {
            newton
        } else {
            0.5 * (lo + hi)
        };
    }
    Err(Error::Sampler(format!(
        "CDF inversion did not converge for q={q} within [{lo}, {hi}]"
    )))
}
