//! Gamma GLMM with log link and normal area intercepts, fitted by adaptive
//! Gauss–Hermite quadrature, plus its three predictors (EB_HZ, PI, M).
//!
//! y_ij | v_i ~ Gamma(ν, ν/μ_ij), ln μ_ij = x_ij'β + v_i, v_i ~ N(0, φ²).

use std::f64::consts::PI;

use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::data::{AreaFrame, SurveyData};
use crate::error::{Error, Result};
use crate::gamma_gamma::least_squares;
use crate::numerics::special::ln_gamma;
use crate::numerics::{
    log_sum_exp, minimize, norm_quantile, numerical_hessian, standard_errors, GammaSampler, GaussHermite,
    OptimizerConfig, ParamEstimate, RngStream,
};
use crate::table::{Method, PredictionRow, PredictionTable};
use crate::targets::{monte_carlo, TargetParameter};

/// Default quadrature size; 1 node is the Laplace approximation.
pub const DEFAULT_NODES: usize = 25;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GlmmParams {
    pub beta: Vec<f64>,
    pub phi: f64,
    pub nu: f64,
}

impl GlmmParams {
    pub fn new(beta: Vec<f64>, phi: f64, nu: f64) -> Result<Self> {
        let p = Self { beta, phi, nu };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.phi > 0.0 && self.phi.is_finite()) {
            return Err(Error::Domain(format!("phi must be positive, got {}", self.phi)));
        }
        if !(self.nu > 0.0 && self.nu.is_finite()) {
            return Err(Error::Domain(format!("nu must be positive, got {}", self.nu)));
        }
        if self.beta.is_empty() || self.beta.iter().any(|b| !b.is_finite()) {
            return Err(Error::Domain("beta must be finite and include the intercept".into()));
        }
        Ok(())
    }

    #[inline]
    pub fn linpred(&self, x: &[f64]) -> f64 {
        x.iter().zip(&self.beta).map(|(a, b)| a * b).sum()
    }

    /// Unconstrained coordinates (β, ln φ, ln ν).
    pub fn to_unconstrained(&self) -> Vec<f64> {
        let mut t = self.beta.clone();
        t.push(self.phi.ln());
        t.push(self.nu.ln());
        t
    }

    pub fn from_unconstrained(t: &[f64]) -> Self {
        let k = t.len() - 2;
        Self {
            beta: t[..k].to_vec(),
            phi: t[k].exp(),
            nu: t[k + 1].exp(),
        }
    }

    pub fn names(p: usize) -> Vec<String> {
        let mut v: Vec<String> = (0..=p).map(|k| format!("beta_{k}")).collect();
        v.push("phi".into());
        v.push("nu".into());
        v
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GlmmFit {
    pub params: GlmmParams,
    pub area_ids: Vec<String>,
    /// Conditional modes of v_i at the estimates, in area order.
    pub vhat: Vec<f64>,
    pub loglik: f64,
    pub converged: bool,
    pub iterations: usize,
    pub nodes: usize,
}

impl GlmmFit {
    /// v̂ for an area: the stored value when the area was fitted, otherwise
    /// the conditional mode computed from its sample.
    pub fn vhat_for(&self, area: &AreaFrame) -> Result<f64> {
        match self.area_ids.iter().position(|id| *id == area.area_id) {
            Some(i) => Ok(self.vhat[i]),
            None => {
                let a = AreaTerms::new(&self.params, area);
                a.mode(&self.params).map_err(|m| Error::Evaluation {
                    area: area.area_id.clone(),
                    message: m,
                })
            }
        }
    }
}

/// Per-area pieces of ln Π g(y_j | v) = c - nνv - νS e^{-v}.
#[derive(Debug, Clone, Copy)]
struct AreaTerms {
    n: f64,
    c: f64,
    s: f64,
}

impl AreaTerms {
    fn new(params: &GlmmParams, area: &AreaFrame) -> Self {
        let nu = params.nu;
        let n = area.n() as f64;
        let mut s = 0.0;
        let mut lin = 0.0;
        let mut lny = 0.0;
        for u in &area.sampled_units {
            let eta = params.linpred(&u.x);
            s += u.y * (-eta).exp();
            lin += eta;
            lny += u.y.ln();
        }
        let c = n * (nu * nu.ln() - ln_gamma(nu)) + (nu - 1.0) * lny - nu * lin;
        Self { n, c, s }
    }

    /// ln f(y_s | v).
    #[inline]
    fn log_lik(&self, nu: f64, v: f64) -> f64 {
        if self.n == 0.0 {
            return 0.0;
        }
        self.c - self.n * nu * v - nu * self.s * (-v).exp()
    }

    /// Conditional mode of v: root of -nν + νS e^{-v} - v/φ² = 0.
    fn mode(&self, params: &GlmmParams) -> std::result::Result<f64, String> {
        if self.n == 0.0 {
            return Ok(0.0);
        }
        let (nu, inv_var) = (params.nu, 1.0 / (params.phi * params.phi));
        let grad = |v: f64| -self.n * nu + nu * self.s * (-v).exp() - v * inv_var;
        let free = (self.s / self.n).ln();
        if !free.is_finite() {
            return Err(format!("random-effect mode undefined (S = {})", self.s));
        }
        // The prior pulls the mode from the no-prior root toward zero.
        let (mut lo, mut hi) = if free < 0.0 { (free, 0.0) } else { (0.0, free) };
        let mut v = 0.5 * (lo + hi);
        for _ in 0..200 {
            let g = grad(v);
            if g == 0.0 {
                return Ok(v);
            }
            if g > 0.0 {
                lo = v;
            } else {
                hi = v;
            }
            let h = -nu * self.s * (-v).exp() - inv_var;
            let mut next = v - g / h;
            if !(next > lo && next < hi) {
                next = 0.5 * (lo + hi);
            }
            if (next - v).abs() <= 1e-13 * (1.0 + v.abs()) || hi - lo <= 1e-14 * (1.0 + v.abs()) {
                return Ok(next);
            }
            v = next;
        }
        Err("random-effect mode search did not converge".into())
    }

    /// ln ∫ f(y_s | v) N(v; 0, φ²) dv by adaptive Gauss–Hermite quadrature.
    fn log_marginal(&self, params: &GlmmParams, gh: &GaussHermite) -> std::result::Result<f64, String> {
        if self.n == 0.0 {
            return Ok(0.0);
        }
        let (nu, phi) = (params.nu, params.phi);
        let vhat = self.mode(params)?;
        let curv = nu * self.s * (-vhat).exp() + 1.0 / (phi * phi);
        let sigma = curv.sqrt().recip();
        let log_prior_norm = -(phi * (2.0 * PI).sqrt()).ln();
        let terms: Vec<f64> = gh
            .nodes
            .iter()
            .zip(&gh.weights)
            .map(|(&z, &w)| {
                let v = vhat + std::f64::consts::SQRT_2 * sigma * z;
                w.ln() + z * z + self.log_lik(nu, v) - v * v / (2.0 * phi * phi)
            })
            .collect();
        let out = (std::f64::consts::SQRT_2 * sigma).ln() + log_prior_norm + log_sum_exp(&terms);
        if out.is_finite() {
            Ok(out)
        } else {
            Err("marginal likelihood is not finite".into())
        }
    }
}

/// Marginal log-likelihood with `quad_nodes` adaptive Gauss–Hermite nodes.
pub fn glmm_loglik(params: &GlmmParams, data: &SurveyData, quad_nodes: usize) -> Result<f64> {
    params.validate()?;
    if params.beta.len() != data.p + 1 {
        return Err(Error::Domain("beta length must equal covariates plus intercept".into()));
    }
    if quad_nodes == 0 {
        return Err(Error::Domain("quadrature needs at least one node".into()));
    }
    let gh = GaussHermite::new(quad_nodes);
    let mut total = 0.0;
    for a in &data.areas {
        total += AreaTerms::new(params, a)
            .log_marginal(params, &gh)
            .map_err(|message| Error::Evaluation {
                area: a.area_id.clone(),
                message,
            })?;
    }
    Ok(total)
}

fn objective(data: &SurveyData, gh: &GaussHermite, t: &[f64]) -> f64 {
    let params = GlmmParams::from_unconstrained(t);
    if params.validate().is_err() {
        return f64::INFINITY;
    }
    let mut total = 0.0;
    for a in &data.areas {
        match AreaTerms::new(&params, a).log_marginal(&params, gh) {
            Ok(v) => total += v,
            Err(_) => return f64::INFINITY,
        }
    }
    -total
}

/// Moment-based start: β from least squares of ln y, ν from the spread of
/// y/μ̂, φ from the spread of area-mean log residuals.
pub fn initial_params(data: &SurveyData) -> Result<GlmmParams> {
    let units: Vec<_> = data.areas.iter().flat_map(|a| &a.sampled_units).collect();
    if units.is_empty() {
        return Err(Error::Data("no sampled units to fit".into()));
    }
    let xs: Vec<&[f64]> = units.iter().map(|u| u.x.as_slice()).collect();
    let ly: Vec<f64> = units.iter().map(|u| u.y.ln()).collect();
    let mut beta = least_squares(&xs, &ly);
    let ratio: Vec<f64> = units
        .iter()
        .map(|u| u.y / u.x.iter().zip(&beta).map(|(a, b)| a * b).sum::<f64>().exp())
        .collect();
    let m = ratio.iter().sum::<f64>() / ratio.len() as f64;
    beta[0] += m.ln();
    let var = ratio.iter().map(|r| (r / m - 1.0).powi(2)).sum::<f64>() / ratio.len() as f64;
    let nu = if var > 0.0 { (1.0 / var).clamp(0.05, 1e3) } else { 1.0 };
    let area_means: Vec<f64> = data
        .areas
        .iter()
        .filter(|a| a.n() > 0)
        .map(|a| {
            a.sampled_units
                .iter()
                .map(|u| u.y.ln() - u.x.iter().zip(&beta).map(|(p, q)| p * q).sum::<f64>())
                .sum::<f64>()
                / a.n() as f64
        })
        .collect();
    let am = area_means.iter().sum::<f64>() / area_means.len() as f64;
    let sd = (area_means.iter().map(|v| (v - am).powi(2)).sum::<f64>() / area_means.len() as f64).sqrt();
    GlmmParams::new(beta, sd.max(0.05), nu)
}

/// Maximum-likelihood fit with the default quadrature size.
pub fn glmm_fit(data: &SurveyData, config: &OptimizerConfig) -> Result<GlmmFit> {
    glmm_fit_with(data, config, DEFAULT_NODES)
}

pub fn glmm_fit_with(data: &SurveyData, config: &OptimizerConfig, quad_nodes: usize) -> Result<GlmmFit> {
    let start = initial_params(data)?;
    glmm_fit_from(data, &start, config, quad_nodes)
}

/// Fit from a given start; optimizer failure is reported via `converged`.
pub fn glmm_fit_from(data: &SurveyData, start: &GlmmParams, config: &OptimizerConfig, quad_nodes: usize) -> Result<GlmmFit> {
    let n = data.total_sample_size();
    if n <= data.p + 3 {
        return Err(Error::Data(format!(
            "total sample size {n} must exceed the {} model parameters",
            data.p + 3
        )));
    }
    if quad_nodes == 0 {
        return Err(Error::Domain("quadrature needs at least one node".into()));
    }
    start.validate()?;
    let gh = GaussHermite::new(quad_nodes);
    let (params, loglik, converged, iterations) =
        match minimize(|t| objective(data, &gh, t), &start.to_unconstrained(), config) {
            Ok(m) => (GlmmParams::from_unconstrained(&m.argmin), -m.value, m.converged, m.iterations),
            Err(Error::Convergence { best, .. }) => (
                GlmmParams::from_unconstrained(&best),
                f64::NEG_INFINITY,
                false,
                config.max_iterations,
            ),
            Err(e) => return Err(e),
        };
    let vhat = data
        .areas
        .iter()
        .map(|a| {
            AreaTerms::new(&params, a).mode(&params).map_err(|message| Error::Evaluation {
                area: a.area_id.clone(),
                message,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(GlmmFit {
        params,
        area_ids: data.areas.iter().map(|a| a.area_id.clone()).collect(),
        vhat,
        loglik,
        converged,
        iterations,
        nodes: quad_nodes,
    })
}

/// Wald intervals on (β, ln φ, ln ν), mapped back through exp for φ and ν.
pub fn parameter_table(fit: &GlmmFit, data: &SurveyData, level: f64) -> Result<Vec<ParamEstimate>> {
    if !(level > 0.0 && level < 1.0) {
        return Err(Error::Domain(format!("confidence level {level} must lie in (0, 1)")));
    }
    let gh = GaussHermite::new(fit.nodes);
    let t = fit.params.to_unconstrained();
    let hess = numerical_hessian(|v| objective(data, &gh, v), &t, 1e-4);
    let se = standard_errors(&hess)?;
    let z = norm_quantile(0.5 + level / 2.0);
    let k = data.p + 1;
    Ok(GlmmParams::names(data.p)
        .into_iter()
        .enumerate()
        .map(|(j, name)| {
            if j < k {
                ParamEstimate {
                    name,
                    estimate: t[j],
                    se: se[j],
                    lo: t[j] - z * se[j],
                    hi: t[j] + z * se[j],
                }
            } else {
                let est = t[j].exp();
                ParamEstimate {
                    name,
                    estimate: est,
                    se: est * se[j],
                    lo: (t[j] - z * se[j]).exp(),
                    hi: (t[j] + z * se[j]).exp(),
                }
            }
        })
        .collect())
}

/// Self-normalized ratio Σ e^{lw} a / Σ e^{lw}, shifted by the largest log
/// weight.
pub fn weighted_ratio(log_weights: &[f64], values: &[f64]) -> Option<f64> {
    let m = log_weights.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !m.is_finite() {
        return None;
    }
    let mut num = 0.0;
    let mut den = 0.0;
    for (&lw, &a) in log_weights.iter().zip(values) {
        let w = (lw - m).exp();
        num += w * a;
        den += w;
    }
    (den > 0.0 && den.is_finite()).then(|| num / den)
}

/// EB_HZ predictor: v^(ℓ1) from the prior, L2 completions per v, weighted by
/// f(y_s | v).
pub fn predict_ebp_hz(
    fit: &GlmmFit,
    area: &AreaFrame,
    target: &TargetParameter,
    l1: usize,
    l2: usize,
    stream: &RngStream,
) -> Result<f64> {
    Ok(predict_ebp_hz_many(fit, area, std::slice::from_ref(target), l1, l2, stream)?[0])
}

pub fn predict_ebp_hz_many(
    fit: &GlmmFit,
    area: &AreaFrame,
    targets: &[TargetParameter],
    l1: usize,
    l2: usize,
    stream: &RngStream,
) -> Result<Vec<f64>> {
    let params = &fit.params;
    params.validate()?;
    area.require_covariates()?;
    if l1 == 0 || l2 == 0 {
        return Err(Error::Domain("L1 and L2 must be at least 1".into()));
    }
    let terms = AreaTerms::new(params, area);
    let mean_base: Vec<f64> = area.nonsampled_covariates.iter().map(|x| params.linpred(x).exp()).collect();
    let g = GammaSampler::new(params.nu)?;
    let mut rng = stream.rng();
    let mut log_w = Vec::with_capacity(l1);
    let mut a_vals: Vec<Vec<f64>> = targets.iter().map(|_| Vec::with_capacity(l1)).collect();
    for _ in 0..l1 {
        let z: f64 = StandardNormal.sample(&mut rng);
        let v = params.phi * z;
        log_w.push(terms.log_lik(params.nu, v));
        let scale = v.exp() / params.nu;
        let inner = monte_carlo(area, targets, l2, |rest| {
            for (y, m) in rest.iter_mut().zip(&mean_base) {
                *y = g.sample(&mut rng, 1.0) * m * scale;
            }
            Ok(())
        })?;
        for (acc, p) in a_vals.iter_mut().zip(inner) {
            acc.push(p.point);
        }
    }
    a_vals
        .iter()
        .map(|a| {
            weighted_ratio(&log_w, a).ok_or_else(|| Error::DegenerateWeights {
                area: area.area_id.clone(),
            })
        })
        .collect()
}

/// Plug-in predictor: non-sampled units replaced by exp(x'β̂ + v̂).
pub fn predict_plugin(fit: &GlmmFit, area: &AreaFrame, target: &TargetParameter) -> Result<f64> {
    Ok(predict_plugin_many(fit, area, std::slice::from_ref(target))?[0])
}

pub fn predict_plugin_many(fit: &GlmmFit, area: &AreaFrame, targets: &[TargetParameter]) -> Result<Vec<f64>> {
    area.require_covariates()?;
    let v = fit.vhat_for(area)?;
    let mut values = area.sampled_y();
    values.extend(area.nonsampled_covariates.iter().map(|x| (fit.params.linpred(x) + v).exp()));
    targets.iter().map(|t| t.evaluate(&values)).collect()
}

/// Marginal predictor: completions drawn at v = v̂.
pub fn predict_marginal(
    fit: &GlmmFit,
    area: &AreaFrame,
    target: &TargetParameter,
    l: usize,
    stream: &RngStream,
) -> Result<f64> {
    Ok(predict_marginal_many(fit, area, std::slice::from_ref(target), l, stream)?[0])
}

pub fn predict_marginal_many(
    fit: &GlmmFit,
    area: &AreaFrame,
    targets: &[TargetParameter],
    l: usize,
    stream: &RngStream,
) -> Result<Vec<f64>> {
    let params = &fit.params;
    params.validate()?;
    area.require_covariates()?;
    let v = fit.vhat_for(area)?;
    let scale: Vec<f64> = area
        .nonsampled_covariates
        .iter()
        .map(|x| (params.linpred(x) + v).exp() / params.nu)
        .collect();
    let g = GammaSampler::new(params.nu)?;
    let mut rng = stream.rng();
    let preds = monte_carlo(area, targets, l, |rest| {
        for (y, s) in rest.iter_mut().zip(&scale) {
            *y = g.sample(&mut rng, 1.0) * s;
        }
        Ok(())
    })?;
    Ok(preds.into_iter().map(|p| p.point).collect())
}

/// EB_HZ, PI or M predictions for every area and target. EB_HZ uses `l`
/// area-effect draws with `l_inner` completions each; M uses `l` draws.
/// Area i uses stream id i.
pub fn glmm_table(
    fit: &GlmmFit,
    data: &SurveyData,
    targets: &[TargetParameter],
    method: Method,
    l: usize,
    l_inner: usize,
    seed: u64,
) -> Result<PredictionTable> {
    let mc_size = match method {
        Method::EbHz => l * l_inner,
        Method::M => l,
        Method::Pi => 0,
        other => return Err(Error::Domain(format!("{other} is not a GLMM predictor"))),
    };
    let mut rows = Vec::with_capacity(data.num_areas() * targets.len());
    for (i, area) in data.areas.iter().enumerate() {
        let stream = RngStream::new(seed, i as u64);
        let values = match method {
            Method::EbHz => predict_ebp_hz_many(fit, area, targets, l, l_inner, &stream),
            Method::M => predict_marginal_many(fit, area, targets, l, &stream),
            _ => predict_plugin_many(fit, area, targets),
        }
        .map_err(|e| e.in_area(&area.area_id))?;
        rows.extend(targets.iter().zip(values).map(|(t, v)| PredictionRow {
            area: area.area_id.clone(),
            target: t.label.clone(),
            method,
            estimate: v,
            n: area.n(),
            population_size: area.population_size(),
            l: mc_size,
            seed,
            fallback_count: 0,
        }));
    }
    Ok(PredictionTable { rows })
}

/// Draw responses under the GLMM for covariates `xs` and effect v.
pub(crate) fn draw_responses<R: rand::Rng + ?Sized>(
    params: &GlmmParams,
    sampler: &GammaSampler,
    xs: &[Vec<f64>],
    v: f64,
    rng: &mut R,
) -> Vec<f64> {
    xs.iter()
        .map(|x| sampler.sample(rng, 1.0) * (params.linpred(x) + v).exp() / params.nu)
        .collect()
}
