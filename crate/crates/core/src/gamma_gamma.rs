//! The gamma-gamma unit-level model.
//!
//! y_ij | u_i ~ Gamma(α, exp(x_ij'γ) u_i) with u_i ~ Gamma(δ, δ), all in the
//! shape/rate parametrization. The area effect has a conjugate gamma
//! posterior, which gives a closed-form likelihood, a closed-form predictor of
//! the mean and a cheap Monte Carlo empirical best predictor for any target.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{AreaFrame, SurveyData};
use crate::error::{Error, Result};
use crate::numerics::special::{ln_gamma, ln_gamma_ratio};
use crate::numerics::{
    minimize, norm_quantile, numerical_hessian, standard_errors, GammaSampler, OptimizerConfig, ParamEstimate,
    RngStream,
};
use crate::table::{Method, PredictionRow, PredictionTable};
use crate::targets::{monte_carlo, McPrediction, TargetParameter};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GammaGammaParams {
    pub alpha: f64,
    pub delta: f64,
    /// Coefficients including the intercept, length p + 1.
    pub gamma_coef: Vec<f64>,
}

impl GammaGammaParams {
    pub fn new(alpha: f64, delta: f64, gamma_coef: Vec<f64>) -> Result<Self> {
        let p = Self {
            alpha,
            delta,
            gamma_coef,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0 && self.alpha.is_finite()) {
            return Err(Error::Domain(format!("alpha must be positive, got {}", self.alpha)));
        }
        if !(self.delta > 0.0 && self.delta.is_finite()) {
            return Err(Error::Domain(format!("delta must be positive, got {}", self.delta)));
        }
        if self.gamma_coef.is_empty() || self.gamma_coef.iter().any(|g| !g.is_finite()) {
            return Err(Error::Domain("gamma coefficients must be finite and include the intercept".into()));
        }
        Ok(())
    }

    fn check_dim(&self, data: &SurveyData) -> Result<()> {
        if self.gamma_coef.len() != data.p + 1 {
            return Err(Error::Domain(format!(
                "gamma has {} coefficients but the data have {} covariates plus intercept",
                self.gamma_coef.len(),
                data.p
            )));
        }
        Ok(())
    }

    /// x'γ.
    #[inline]
    pub fn linpred(&self, x: &[f64]) -> f64 {
        x.iter().zip(&self.gamma_coef).map(|(a, b)| a * b).sum()
    }

    /// Unconstrained coordinates (ln α, ln δ, γ).
    pub fn to_unconstrained(&self) -> Vec<f64> {
        let mut t = Vec::with_capacity(self.gamma_coef.len() + 2);
        t.push(self.alpha.ln());
        t.push(self.delta.ln());
        t.extend_from_slice(&self.gamma_coef);
        t
    }

    pub fn from_unconstrained(t: &[f64]) -> Self {
        Self {
            alpha: t[0].exp(),
            delta: t[1].exp(),
            gamma_coef: t[2..].to_vec(),
        }
    }

    /// Names of the estimated parameters, in table order.
    pub fn names(p: usize) -> Vec<String> {
        let mut v = vec!["alpha".to_string(), "delta".to_string()];
        v.extend((0..=p).map(|k| format!("gamma_{k}")));
        v
    }
}

/// Posterior of u_i given the sample: Gamma(shape, rate).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PosteriorU {
    pub shape: f64,
    pub rate: f64,
}

impl PosteriorU {
    pub fn mean(&self) -> f64 {
        self.shape / self.rate
    }

    /// E[1/u], defined when shape > 1.
    pub fn mean_inverse(&self) -> Option<f64> {
        (self.shape > 1.0).then(|| self.rate / (self.shape - 1.0))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitResult {
    pub params: GammaGammaParams,
    pub loglik: f64,
    pub converged: bool,
    pub iterations: usize,
}

/// Per-area sufficient pieces of the likelihood.
#[derive(Debug, Clone)]
struct AreaSuff {
    n: f64,
    sum_ln_y: f64,
    sum_x: Vec<f64>,
    y: Vec<f64>,
    /// Row-major covariates, stride p + 1.
    x: Vec<f64>,
}

/// The sample in the layout the likelihood needs.
#[derive(Debug, Clone)]
pub(crate) struct Likelihood {
    areas: Vec<(String, AreaSuff)>,
    k: usize,
}

impl Likelihood {
    pub(crate) fn new(data: &SurveyData) -> Self {
        let k = data.p + 1;
        let areas = data
            .areas
            .iter()
            .filter(|a| a.n() > 0)
            .map(|a| {
                let mut sum_x = vec![0.0; k];
                let mut x = Vec::with_capacity(a.n() * k);
                for u in &a.sampled_units {
                    for (s, v) in sum_x.iter_mut().zip(&u.x) {
                        *s += v;
                    }
                    x.extend_from_slice(&u.x);
                }
                let suff = AreaSuff {
                    n: a.n() as f64,
                    sum_ln_y: a.ys().map(f64::ln).sum(),
                    sum_x,
                    y: a.sampled_y(),
                    x,
                };
                (a.area_id.clone(), suff)
            })
            .collect();
        Self { areas, k }
    }

    /// Log-likelihood; `Err(area)` names the first area with a non-finite term.
    fn eval(&self, alpha: f64, delta: f64, gamma: &[f64]) -> std::result::Result<f64, String> {
        let lg_alpha = ln_gamma(alpha);
        let mut total = 0.0;
        for (id, a) in &self.areas {
            let mut s = 0.0;
            for (y, x) in a.y.iter().zip(a.x.chunks_exact(self.k)) {
                let eta: f64 = x.iter().zip(gamma).map(|(p, q)| p * q).sum();
                s += y * eta.exp();
            }
            let shape = a.n * alpha + delta;
            let sx: f64 = a.sum_x.iter().zip(gamma).map(|(p, q)| p * q).sum();
            // δ ln δ − ln Γ(δ) + ln Γ(nα + δ) − (nα + δ) ln(S + δ), arranged to
            // stay accurate as δ grows without bound.
            let delta_part = ln_gamma_ratio(delta, a.n * alpha) - shape * (s / delta).ln_1p();
            let v = delta_part - a.n * lg_alpha + (alpha - 1.0) * a.sum_ln_y + alpha * sx;
            if !v.is_finite() {
                return Err(id.clone());
            }
            total += v;
        }
        Ok(total)
    }

    fn eval_unconstrained(&self, t: &[f64]) -> f64 {
        let (alpha, delta) = (t[0].exp(), t[1].exp());
        if !(alpha > 0.0 && delta > 0.0 && alpha.is_finite() && delta.is_finite()) {
            return f64::NEG_INFINITY;
        }
        self.eval(alpha, delta, &t[2..]).unwrap_or(f64::NEG_INFINITY)
    }
}

/// Log-likelihood of the sample, summed over areas. Areas without sampled
/// units contribute zero.
pub fn loglik(params: &GammaGammaParams, data: &SurveyData) -> Result<f64> {
    params.validate()?;
    params.check_dim(data)?;
    Likelihood::new(data)
        .eval(params.alpha, params.delta, &params.gamma_coef)
        .map_err(|area| Error::Evaluation {
            area,
            message: "log-likelihood is not finite (exp(x'γ) overflow?)".into(),
        })
}

/// Least squares of `ys` on the rows of `xs`; slopes of rank-deficient
/// directions are set to zero.
pub(crate) fn least_squares(xs: &[&[f64]], ys: &[f64]) -> Vec<f64> {
    let k = xs[0].len();
    let x = DMatrix::from_fn(xs.len(), k, |i, j| xs[i][j]);
    let y = DVector::from_column_slice(ys);
    let xtx = x.transpose() * &x;
    let xty = x.transpose() * y;
    match xtx.clone().svd(true, true).solve(&xty, 1e-10 * xtx.norm().max(1.0)) {
        Ok(b) if b.iter().all(|v| v.is_finite()) => b.iter().copied().collect(),
        _ => {
            let mut b = vec![0.0; k];
            b[0] = ys.iter().sum::<f64>() / ys.len() as f64;
            b
        }
    }
}

/// Starting point: γ from least squares of ln y on x (negated, since the
/// rate is exp(x'γ)), α = δ = 1.
pub fn initial_params(data: &SurveyData) -> Result<GammaGammaParams> {
    let units: Vec<_> = data.areas.iter().flat_map(|a| &a.sampled_units).collect();
    if units.is_empty() {
        return Err(Error::Data("no sampled units to fit".into()));
    }
    let xs: Vec<&[f64]> = units.iter().map(|u| u.x.as_slice()).collect();
    let ly: Vec<f64> = units.iter().map(|u| u.y.ln()).collect();
    let beta = least_squares(&xs, &ly);
    GammaGammaParams::new(1.0, 1.0, beta.iter().map(|b| -b).collect())
}

fn check_fittable(data: &SurveyData) -> Result<()> {
    let n = data.total_sample_size();
    if n <= data.p + 3 {
        return Err(Error::Data(format!(
            "total sample size {n} must exceed the {} model parameters",
            data.p + 3
        )));
    }
    Ok(())
}

fn responses_constant(data: &SurveyData) -> bool {
    let mut ys = data.areas.iter().flat_map(|a| a.ys());
    match ys.next() {
        Some(first) => ys.all(|y| y == first),
        None => true,
    }
}

/// Maximum-likelihood fit from the default start.
pub fn fit(data: &SurveyData, config: &OptimizerConfig) -> Result<FitResult> {
    check_fittable(data)?;
    let start = initial_params(data)?;
    fit_from(data, &start, config)
}

/// Maximum-likelihood fit from a given start. Optimizer failure and
/// degenerate data (all responses equal) are reported through `converged`.
pub fn fit_from(data: &SurveyData, start: &GammaGammaParams, config: &OptimizerConfig) -> Result<FitResult> {
    check_fittable(data)?;
    start.validate()?;
    start.check_dim(data)?;
    config.validate()?;
    let lik = Likelihood::new(data);
    let t0 = start.to_unconstrained();
    if responses_constant(data) {
        // The likelihood increases without bound as α grows.
        return Ok(FitResult {
            params: start.clone(),
            loglik: lik.eval_unconstrained(&t0),
            converged: false,
            iterations: 0,
        });
    }
    match minimize(|t| -lik.eval_unconstrained(t), &t0, config) {
        Ok(m) => Ok(FitResult {
            params: GammaGammaParams::from_unconstrained(&m.argmin),
            loglik: -m.value,
            converged: m.converged,
            iterations: m.iterations,
        }),
        Err(Error::Convergence { best, .. }) => Ok(FitResult {
            params: GammaGammaParams::from_unconstrained(&best),
            loglik: f64::NEG_INFINITY,
            converged: false,
            iterations: config.max_iterations,
        }),
        Err(e) => Err(e),
    }
}

/// Wald intervals from the observed information on (ln α, ln δ, γ); the
/// intervals for α and δ are mapped back through exp.
pub fn parameter_table(fit: &FitResult, data: &SurveyData, level: f64) -> Result<Vec<ParamEstimate>> {
    if !(level > 0.0 && level < 1.0) {
        return Err(Error::Domain(format!("confidence level {level} must lie in (0, 1)")));
    }
    let lik = Likelihood::new(data);
    let t = fit.params.to_unconstrained();
    let hess = numerical_hessian(|v| -lik.eval_unconstrained(v), &t, 1e-4);
    let se = standard_errors(&hess)?;
    let z = norm_quantile(0.5 + level / 2.0);
    let names = GammaGammaParams::names(data.p);
    Ok(names
        .into_iter()
        .enumerate()
        .map(|(k, name)| {
            if k < 2 {
                let est = t[k].exp();
                ParamEstimate {
                    name,
                    estimate: est,
                    se: est * se[k],
                    lo: (t[k] - z * se[k]).exp(),
                    hi: (t[k] + z * se[k]).exp(),
                }
            } else {
                ParamEstimate {
                    name,
                    estimate: t[k],
                    se: se[k],
                    lo: t[k] - z * se[k],
                    hi: t[k] + z * se[k],
                }
            }
        })
        .collect())
}

/// Posterior of u_i: Gamma(nα + δ, Σ y e^{x'γ} + δ).
pub fn posterior_u(params: &GammaGammaParams, area: &AreaFrame) -> PosteriorU {
    let s: f64 = area
        .sampled_units
        .iter()
        .map(|u| u.y * params.linpred(&u.x).exp())
        .sum();
    PosteriorU {
        shape: area.n() as f64 * params.alpha + params.delta,
        rate: s + params.delta,
    }
}

/// Closed-form best predictor of the area mean.
pub fn predict_mean_closed(params: &GammaGammaParams, area: &AreaFrame) -> Result<f64> {
    params.validate()?;
    area.require_covariates()?;
    let n_pop = area.population_size();
    if n_pop == 0 {
        return Err(Error::Data(format!("area {} has no units", area.area_id)));
    }
    let sum_s: f64 = area.ys().sum();
    if area.nonsampled_covariates.is_empty() {
        return Ok(sum_s / n_pop as f64);
    }
    let post = posterior_u(params, area);
    let inv_u = post.mean_inverse().ok_or_else(|| Error::UndefinedMoment {
        area: area.area_id.clone(),
        shape: post.shape,
    })?;
    let sum_r: f64 = area
        .nonsampled_covariates
        .iter()
        .map(|x| params.alpha * (-params.linpred(x)).exp())
        .sum();
    Ok((sum_s + sum_r * inv_u) / n_pop as f64)
}

/// Monte Carlo empirical best predictor of one target.
pub fn eb_predict(
    params: &GammaGammaParams,
    area: &AreaFrame,
    target: &TargetParameter,
    l: usize,
    stream: &RngStream,
) -> Result<McPrediction> {
    Ok(eb_predict_many(params, area, std::slice::from_ref(target), l, stream)?.remove(0))
}

/// Monte Carlo empirical best predictor of several targets from one set of
/// draws: per draw, u ~ posterior and then each non-sampled
/// y ~ Gamma(α, e^{x'γ} u).
pub fn eb_predict_many(
    params: &GammaGammaParams,
    area: &AreaFrame,
    targets: &[TargetParameter],
    l: usize,
    stream: &RngStream,
) -> Result<Vec<McPrediction>> {
    params.validate()?;
    area.require_covariates()?;
    let post = posterior_u(params, area);
    if !(post.rate.is_finite() && post.rate > 0.0) {
        return Err(Error::Evaluation {
            area: area.area_id.clone(),
            message: format!("posterior rate {} is not finite", post.rate),
        });
    }
    let inv_e: Vec<f64> = area
        .nonsampled_covariates
        .iter()
        .map(|x| (-params.linpred(x)).exp())
        .collect();
    let g_alpha = GammaSampler::new(params.alpha)?;
    let g_u = GammaSampler::new(post.shape)?;
    let mut rng = stream.rng();
    monte_carlo(area, targets, l, |rest| {
        let inv_u = 1.0 / g_u.sample(&mut rng, post.rate);
        for (y, ie) in rest.iter_mut().zip(&inv_e) {
            *y = g_alpha.sample(&mut rng, 1.0) * ie * inv_u;
        }
        Ok(())
    })
    .map_err(|e| e.in_area(&area.area_id))
}

/// Stream for area `index` under `seed`.
pub fn area_stream(seed: u64, index: usize) -> RngStream {
    RngStream::new(seed, index as u64)
}

/// EB predictions for every area and target at fixed parameters; area i
/// uses stream id i.
pub fn eb_table(
    params: &GammaGammaParams,
    data: &SurveyData,
    targets: &[TargetParameter],
    l: usize,
    seed: u64,
) -> Result<PredictionTable> {
    params.check_dim(data)?;
    let per_area: Vec<Vec<PredictionRow>> = data
        .areas
        .par_iter()
        .enumerate()
        .map(|(i, area)| {
            let preds = eb_predict_many(params, area, targets, l, &area_stream(seed, i))?;
            Ok(targets
                .iter()
                .zip(preds)
                .map(|(t, p)| PredictionRow {
                    area: area.area_id.clone(),
                    target: t.label.clone(),
                    method: Method::Eb,
                    estimate: p.point,
                    n: area.n(),
                    population_size: area.population_size(),
                    l,
                    seed,
                    fallback_count: 0,
                })
                .collect())
        })
        .collect::<Result<_>>()?;
    Ok(PredictionTable {
        rows: per_area.into_iter().flatten().collect(),
    })
}

/// Closed-form mean predictions for every area.
pub fn closed_table(params: &GammaGammaParams, data: &SurveyData, seed: u64) -> Result<PredictionTable> {
    params.check_dim(data)?;
    let rows = data
        .areas
        .iter()
        .map(|area| {
            Ok(PredictionRow {
                area: area.area_id.clone(),
                target: TargetParameter::mean().label,
                method: Method::EbClsd,
                estimate: predict_mean_closed(params, area).map_err(|e| e.in_area(&area.area_id))?,
                n: area.n(),
                population_size: area.population_size(),
                l: 0,
                seed,
                fallback_count: 0,
            })
        })
        .collect::<Result<_>>()?;
    Ok(PredictionTable { rows })
}

/// Fit once, then predict every target for every area.
pub fn eb_pipeline(
    data: &SurveyData,
    targets: &[TargetParameter],
    l: usize,
    seed: u64,
    config: &OptimizerConfig,
) -> Result<(FitResult, PredictionTable)> {
    let fit = fit(data, config)?;
    if !fit.converged {
        return Err(Error::Estimator(format!(
            "gamma-gamma fit did not converge after {} iterations",
            fit.iterations
        )));
    }
    let table = eb_table(&fit.params, data, targets, l, seed)?;
    Ok((fit, table))
}

/// Draw a full response vector for units with covariates `xs` given the area
/// effect u.
pub(crate) fn draw_responses<R: rand::Rng + ?Sized>(
    params: &GammaGammaParams,
    sampler: &GammaSampler,
    xs: &[Vec<f64>],
    u: f64,
    rng: &mut R,
) -> Vec<f64> {
    xs.iter()
        .map(|x| sampler.sample(rng, params.linpred(x).exp() * u))
        .collect()
}
