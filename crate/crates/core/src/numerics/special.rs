//! Special functions and distribution helpers.

use rand::Rng;
use rand_distr::{Distribution, Gamma};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::error::{Error, Result};

const EPS: f64 = 1e-16;
const TINY: f64 = 1e-300;
const MAX_TERMS: usize = 100_000;

/// `ln Γ(x)` for positive finite `x`.
pub fn log_gamma_fn(x: f64) -> Result<f64> {
    if !(x.is_finite() && x > 0.0) {
        return Err(Error::Domain(format!("log-gamma needs a positive finite argument, got {x}")));
    }
    Ok(statrs::function::gamma::ln_gamma(x))
}

#[inline]
pub(crate) fn ln_gamma(x: f64) -> f64 {
    statrs::function::gamma::ln_gamma(x)
}

/// Stirling remainder ln Γ(z) − [(z − ½) ln z − z + ½ ln 2π], for z ≥ 10.
fn stirling_tail(z: f64) -> f64 {
    let r = 1.0 / (z * z);
    (1.0 / 12.0 - r * (1.0 / 360.0 - r * (1.0 / 1260.0 - r / 1680.0))) / z
}

/// ln Γ(z + a) − ln Γ(z) − a ln z without cancellation at large z.
pub(crate) fn ln_gamma_ratio(z: f64, a: f64) -> f64 {
    if z < 1e3 {
        return ln_gamma(z + a) - ln_gamma(z) - a * z.ln();
    }
    let t = a / z;
    let l1p = t.ln_1p();
    // z (ln(1 + t) − t), by series when t is small enough to cancel.
    let head = if t.abs() < 1e-3 {
        -z * t * t * (0.5 - t * (1.0 / 3.0 - t * (0.25 - t * (0.2 - t / 6.0))))
    } else {
        z * (l1p - t)
    };
    head + (a - 0.5) * l1p + stirling_tail(z + a) - stirling_tail(z)
}

/// Regularized lower incomplete gamma `P(a, x) = γ(a, x) / Γ(a)`.
pub fn reg_incomplete_gamma(a: f64, x: f64) -> Result<f64> {
    if !(a.is_finite() && a > 0.0) {
        return Err(Error::Domain(format!("incomplete gamma shape must be positive, got {a}")));
    }
    if x.is_nan() || x < 0.0 {
        return Err(Error::Domain(format!("incomplete gamma argument must be >= 0, got {x}")));
    }
    Ok(RegGammaP::new(a).eval(x))
}

/// `P(a, ·)` with `ln Γ(a)` cached, for repeated evaluation at one shape.
#[derive(Debug, Clone, Copy)]
pub struct RegGammaP {
    a: f64,
    ln_gamma_a: f64,
}

impl RegGammaP {
    pub fn new(a: f64) -> Self {
        Self {
            a,
            ln_gamma_a: ln_gamma(a),
        }
    }

    pub fn shape(&self) -> f64 {
        self.a
    }

    pub(crate) fn ln_gamma_a(&self) -> f64 {
        self.ln_gamma_a
    }

    /// Evaluates `P(a, x)`; `x <= 0` gives 0 and `x = ∞` gives 1.
    pub fn eval(&self, x: f64) -> f64 {
        if x <= 0.0 {
            return 0.0;
        }
        if x == f64::INFINITY {
            return 1.0;
        }
        let a = self.a;
        if a == 1.0 {
            return -(-x).exp_m1();
        }
        let log_prefactor = -x + a * x.ln() - self.ln_gamma_a;
        if x < a + 1.0 {
            // Series: sum_{k>=0} x^k / (a (a+1) ... (a+k)).
            let mut ap = a;
            let mut del = 1.0 / a;
            let mut sum = del;
            for _ in 0..MAX_TERMS {
                ap += 1.0;
                del *= x / ap;
                sum += del;
                if del.abs() < sum.abs() * EPS {
                    break;
                }
            }
            (sum.ln() + log_prefactor).exp().min(1.0)
        } else {
            // Continued fraction for Q(a, x), modified Lentz.
            let mut b = x + 1.0 - a;
            let mut c = 1.0 / TINY;
            let mut d = 1.0 / b;
            let mut h = d;
            for i in 1..MAX_TERMS {
                let an = -(i as f64) * (i as f64 - a);
                b += 2.0;
                d = an * d + b;
                if d.abs() < TINY {
                    d = TINY;
                }
                c = b + an / c;
                if c.abs() < TINY {
                    c = TINY;
                }
                d = 1.0 / d;
                let del = d * c;
                h *= del;
                if (del - 1.0).abs() < EPS {
                    break;
                }
            }
            let q = (h.ln() + log_prefactor).exp();
            (1.0 - q).clamp(0.0, 1.0)
        }
    }
}

/// Gamma CDF at shape `shape`, rate `rate`.
pub fn gamma_cdf(shape: f64, rate: f64, y: f64) -> Result<f64> {
    if !(rate.is_finite() && rate > 0.0) {
        return Err(Error::Domain(format!("gamma rate must be positive, got {rate}")));
    }
    reg_incomplete_gamma(shape, rate * y.max(0.0))
}

/// Log density of Gamma(shape, rate) at `y > 0`.
#[inline]
pub fn gamma_ln_pdf(shape: f64, rate: f64, y: f64) -> f64 {
    shape * rate.ln() - ln_gamma(shape) + (shape - 1.0) * y.ln() - rate * y
}

/// Sampler for Gamma(shape, rate) draws at a fixed shape and varying rate.
///
/// Marsaglia–Tsang squeeze for shape ≥ 1; shape < 1 uses the `U^{1/shape}`
/// boost. Both branches come from `rand_distr`.
#[derive(Debug, Clone, Copy)]
pub struct GammaSampler {
    unit: Gamma<f64>,
}

impl GammaSampler {
    pub fn new(shape: f64) -> Result<Self> {
        if !(shape.is_finite() && shape > 0.0) {
            return Err(Error::Domain(format!("gamma shape must be positive, got {shape}")));
        }
        let unit = Gamma::new(shape, 1.0).map_err(|e| Error::Domain(e.to_string()))?;
        Ok(Self { unit })
    }

    /// One draw at the given rate (rate is not validated).
    #[inline]
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R, rate: f64) -> f64 {
        self.unit.sample(rng) / rate
    }
}

/// Single Gamma(shape, rate) draw.
pub fn draw_gamma<R: Rng + ?Sized>(rng: &mut R, shape: f64, rate: f64) -> Result<f64> {
    if !(rate.is_finite() && rate > 0.0) {
        return Err(Error::Domain(format!("gamma rate must be positive, got {rate}")));
    }
    Ok(GammaSampler::new(shape)?.sample(rng, rate))
}

/// Standard normal CDF.
pub fn norm_cdf(z: f64) -> f64 {
    Normal::standard().cdf(z)
}

/// Standard normal quantile.
pub fn norm_quantile(p: f64) -> f64 {
    Normal::standard().inverse_cdf(p)
}
