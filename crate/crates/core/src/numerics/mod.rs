//! Special functions, random streams, optimization and root finding.

pub mod gauss_hermite;
pub mod hessian;
pub mod optimize;
pub mod rng;
pub mod root;
pub mod special;

pub use gauss_hermite::GaussHermite;
pub use hessian::{numerical_hessian, standard_errors, write_param_csv, ParamEstimate, PARAM_HEADER};
pub use optimize::{minimize, Minimum, OptimizerConfig};
pub use rng::{RngStream, SaeRng};
pub use root::{find_root_increasing, invert_cdf};
pub use special::{
    draw_gamma, gamma_cdf, gamma_ln_pdf, log_gamma_fn, norm_cdf, norm_quantile, reg_incomplete_gamma,
    GammaSampler, RegGammaP,
};

/// Log of `sum(exp(xs))`, stable for large magnitudes.
pub fn log_sum_exp(xs: &[f64]) -> f64 {
    let m = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !m.is_finite() {
        return m;
    }
    m + xs.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}
