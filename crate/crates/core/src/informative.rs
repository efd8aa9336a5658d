//! Informative within-area sampling: exponential weight model, the
//! sample-complement distribution of non-sampled responses, and the EB_INFO
//! predictor built on inversion sampling from it.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{AreaFrame, SurveyData};
use crate::error::{Error, Result};
use crate::gamma_gamma::{area_stream, posterior_u, GammaGammaParams};
use crate::numerics::special::{ln_gamma, norm_quantile};
use crate::numerics::{invert_cdf, minimize, GammaSampler, OptimizerConfig, RegGammaP, RngStream};
use crate::table::{Method, PredictionRow, PredictionTable};
use crate::targets::{monte_carlo, McPrediction, TargetParameter};

/// λ at or below 1 + this value triggers the population-distribution fallback.
pub const LAMBDA_EPS: f64 = 1e-6;

/// E(w | x, y, sampled) = κ_i exp(x'a − b y). The intercept of `a` is fixed
/// at zero because κ_i absorbs it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightModelParams {
    pub a: Vec<f64>,
    pub b: f64,
    pub kappa: Vec<f64>,
}

impl WeightModelParams {
    pub fn validate(&self) -> Result<()> {
        if !self.b.is_finite() || self.a.iter().any(|v| !v.is_finite()) {
            return Err(Error::Domain("weight-model coefficients must be finite".into()));
        }
        if let Some(k) = self.kappa.iter().find(|k| !(**k > 0.0 && k.is_finite())) {
            return Err(Error::Domain(format!("kappa must be positive, got {k}")));
        }
        Ok(())
    }

    #[inline]
    fn ax(&self, x: &[f64]) -> f64 {
        x.iter().zip(&self.a).map(|(p, q)| p * q).sum()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct WeightModelFit {
    pub params: WeightModelParams,
    pub sse: f64,
    /// Weights carry no information on b (all equal); b is reported as 0.
    pub degenerate: bool,
}

/// Sample-model parameters plus the weight model; `area_ids` aligns κ.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InformativeModel {
    pub sample_params: GammaGammaParams,
    pub weights: WeightModelParams,
    pub area_ids: Vec<String>,
}

impl InformativeModel {
    pub fn validate(&self) -> Result<()> {
        self.sample_params.validate()?;
        self.weights.validate()?;
        if self.weights.kappa.len() != self.area_ids.len() {
            return Err(Error::Domain("one kappa per area is required".into()));
        }
        if self.weights.a.len() != self.sample_params.gamma_coef.len() {
            return Err(Error::Domain("weight-model a must match the covariate dimension".into()));
        }
        Ok(())
    }

    pub fn area_index(&self, area_id: &str) -> Result<usize> {
        self.area_ids
            .iter()
            .position(|id| id == area_id)
            .ok_or_else(|| Error::Data(format!("area {area_id} has no weight-model kappa")))
    }

    /// λ_ij = κ_i exp(a'x) (1 + b/η)^{−α_s} with η = exp(x'γ_s) u.
    pub fn lambda_factor(&self, x: &[f64], area: usize, u: f64) -> Result<f64> {
        let eta = self.sample_params.linpred(x).exp() * u;
        lambda_from(self.weights.kappa[area], self.weights.ax(x), self.weights.b, eta, self.sample_params.alpha)
    }

    /// Complement distribution of one non-sampled unit given u.
    pub fn unit(&self, x: &[f64], area: usize, u: f64) -> Result<UnitComplement> {
        let eta = self.sample_params.linpred(x).exp() * u;
        let alpha = self.sample_params.alpha;
        let lambda = lambda_from(self.weights.kappa[area], self.weights.ax(x), self.weights.b, eta, alpha)?;
        Ok(UnitComplement {
            alpha,
            eta,
            b: self.weights.b,
            lambda,
        })
    }
}

fn lambda_from(kappa: f64, ax: f64, b: f64, eta: f64, alpha: f64) -> Result<f64> {
    let base = 1.0 + b / eta;
    if !(base > 0.0) {
        return Err(Error::Domain(format!("1 + b/eta = {base} is not positive")));
    }
    Ok(kappa * ax.exp() * base.powf(-alpha))
}

/// Complement distribution for one unit: a signed mixture of the population
/// law Gamma(α, η + b) and the sample law Gamma(α, η).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct UnitComplement {
    pub alpha: f64,
    pub eta: f64,
    pub b: f64,
    pub lambda: f64,
}

fn gamma_pdf(alpha: f64, rate: f64, y: f64) -> f64 {
    gamma_pdf_lg(alpha, ln_gamma(alpha), rate, y)
}

fn gamma_pdf_lg(alpha: f64, lg: f64, rate: f64, y: f64) -> f64 {
    if y < 0.0 {
        return 0.0;
    }
    if y == 0.0 {
        return match alpha {
            a if a < 1.0 => f64::INFINITY,
            a if a == 1.0 => rate,
            _ => 0.0,
        };
    }
    (alpha * rate.ln() - lg + (alpha - 1.0) * y.ln() - rate * y).exp()
}

impl UnitComplement {
    /// False when λ is too close to 1 for the mixture to be defined.
    pub fn is_defined(&self) -> bool {
        self.lambda > 1.0 + LAMBDA_EPS
    }

    /// Population density, Gamma(α, η + b).
    pub fn population_density(&self, y: f64) -> f64 {
        gamma_pdf(self.alpha, self.eta + self.b, y)
    }

    /// Signed mixture density λ/(λ−1) f_p − 1/(λ−1) f_s.
    pub fn density(&self, y: f64) -> f64 {
        self.density_lg(ln_gamma(self.alpha), y)
    }

    fn density_lg(&self, lg: f64, y: f64) -> f64 {
        let l = self.lambda;
        let fp = gamma_pdf_lg(self.alpha, lg, self.eta + self.b, y);
        (l * fp - gamma_pdf_lg(self.alpha, lg, self.eta, y)) / (l - 1.0)
    }

    fn cdf_with(&self, p: &RegGammaP, y: f64) -> f64 {
        if y <= 0.0 {
            return 0.0;
        }
        let l = self.lambda;
        let f = (l * p.eval((self.eta + self.b) * y) - p.eval(self.eta * y)) / (l - 1.0);
        f.clamp(0.0, 1.0)
    }

    /// Complement CDF, clamped to [0, 1]. For b > 0 the mixture density is
    /// negative beyond the point where the weight model drops below one, so
    /// the raw expression can exceed 1 there; the clamped form is the law
    /// that inversion on the increasing branch samples from.
    pub fn cdf(&self, y: f64) -> Result<f64> {
        if !self.is_defined() {
            return Err(Error::Domain(format!(
                "complement distribution undefined for lambda = {}",
                self.lambda
            )));
        }
        Ok(self.cdf_with(&RegGammaP::new(self.alpha), y))
    }

    /// Upper end of the inversion bracket: about the 1 − 1e-12 quantile of
    /// the sample law, doubled until F reaches q.
    fn bracket(&self, p: &RegGammaP, q: f64) -> Result<f64> {
        let a = self.alpha;
        let mut hi = (a + (55.4 * a).sqrt() + 27.7) / self.eta;
        for _ in 0..60 {
            if self.cdf_with(p, hi) >= q {
                return Ok(hi);
            }
            hi *= 2.0;
        }
        Err(Error::Sampler(format!(
            "complement bracket did not reach q = {q} (alpha {a}, eta {})",
            self.eta
        )))
    }

    /// Newton start: Wilson–Hilferty quantile of the population law.
    fn start(&self, q: f64) -> f64 {
        let a = self.alpha;
        let z = norm_quantile(q);
        let c = 1.0 - 1.0 / (9.0 * a) + z / (3.0 * a.sqrt());
        a * c.max(0.05).powi(3) / (self.eta + self.b)
    }

    /// F⁻¹(q).
    pub fn quantile(&self, q: f64) -> Result<f64> {
        self.quantile_with(&RegGammaP::new(self.alpha), q)
    }

    fn quantile_with(&self, p: &RegGammaP, q: f64) -> Result<f64> {
        if !self.is_defined() {
            return Err(Error::Domain(format!(
                "complement distribution undefined for lambda = {}",
                self.lambda
            )));
        }
        if !(q > 0.0 && q < 1.0) {
            return Err(Error::Domain(format!("quantile level {q} must lie in (0, 1)")));
        }
        let hi = self.bracket(p, q)?;
        let lg = p.ln_gamma_a();
        let y = invert_cdf(|y| (self.cdf_with(p, y), self.density_lg(lg, y)), q, 0.0, hi, self.start(q), 1e-13)?;
        if self.density_lg(lg, y) < 0.0 {
            return Err(Error::Sampler(format!(
                "complement density negative at y = {y}; weight model inconsistent with sample model"
            )));
        }
        Ok(y)
    }
}

/// κ_i given (a, b): κ_i = Σ w e^{z} / Σ e^{2z}, z = x'a − b y.
fn profile_kappa(data: &SurveyData, a: &[f64], b: f64) -> Vec<f64> {
    data.areas
        .iter()
        .map(|area| {
            let (mut num, mut den) = (0.0, 0.0);
            for u in &area.sampled_units {
                let e = (dot(&u.x, a) - b * u.y).exp();
                num += u.weight.unwrap_or(f64::NAN) * e;
                den += e * e;
            }
            if den > 0.0 {
                num / den
            } else {
                1.0
            }
        })
        .collect()
}

fn dot(x: &[f64], a: &[f64]) -> f64 {
    x.iter().zip(a).map(|(p, q)| p * q).sum()
}

/// Search vector t = (a_1..a_p, b) → full a with zero intercept.
fn unpack(t: &[f64]) -> (Vec<f64>, f64) {
    let mut a = vec![0.0];
    a.extend_from_slice(&t[..t.len() - 1]);
    (a, t[t.len() - 1])
}

fn residuals(data: &SurveyData, t: &[f64]) -> Vec<f64> {
    let (a, b) = unpack(t);
    let kappa = profile_kappa(data, &a, b);
    data.areas
        .iter()
        .zip(&kappa)
        .flat_map(|(area, &k)| {
            let a = &a;
            area.sampled_units
                .iter()
                .map(move |u| u.weight.unwrap_or(f64::NAN) - k * (dot(&u.x, a) - b * u.y).exp())
        })
        .collect()
}

fn sse(r: &[f64]) -> f64 {
    let s: f64 = r.iter().map(|v| v * v).sum();
    if s.is_finite() {
        s
    } else {
        f64::INFINITY
    }
}

/// Levenberg–Marquardt on the profiled residuals.
fn polish(data: &SurveyData, mut t: Vec<f64>) -> Vec<f64> {
    let k = t.len();
    let mut r = residuals(data, &t);
    let mut cur = sse(&r);
    let mut mu = 1e-3;
    for _ in 0..100 {
        let m = r.len();
        let mut jac = DMatrix::zeros(m, k);
        for c in 0..k {
            let h = 1e-6 * t[c].abs().max(1.0);
            let mut tp = t.clone();
            tp[c] += h;
            let rp = residuals(data, &tp);
            tp[c] -= 2.0 * h;
            let rm = residuals(data, &tp);
            for row in 0..m {
                jac[(row, c)] = (rp[row] - rm[row]) / (2.0 * h);
            }
        }
        let jt = jac.transpose();
        let g = &jt * DVector::from_vec(r.clone());
        let jtj = &jt * &jac;
        let mut improved = false;
        for _ in 0..20 {
            let mut a = jtj.clone();
            for d in 0..k {
                a[(d, d)] += mu * jtj[(d, d)].max(1e-12);
            }
            let Some(step) = a.lu().solve(&(-&g)) else { break };
            let cand: Vec<f64> = t.iter().zip(step.iter()).map(|(x, s)| x + s).collect();
            let rc = residuals(data, &cand);
            let v = sse(&rc);
            if v < cur {
                let rel = (cur - v) / cur.max(f64::MIN_POSITIVE);
                t = cand;
                r = rc;
                cur = v;
                mu = (mu * 0.3).max(1e-12);
                improved = rel > 1e-15;
                break;
            }
            mu *= 10.0;
        }
        if !improved {
            break;
        }
    }
    t
}

/// Least-squares fit of the weight model with κ profiled out.
pub fn fit_weight_model(data: &SurveyData, config: &OptimizerConfig) -> Result<WeightModelFit> {
    if !data.all_weighted() {
        return Err(Error::Data("weight model needs a design weight on every sampled unit".into()));
    }
    if data.total_sample_size() == 0 {
        return Err(Error::Data("weight model needs sampled units".into()));
    }
    let first = data
        .areas
        .iter()
        .flat_map(|a| &a.sampled_units)
        .map(|u| u.weight.unwrap_or(f64::NAN))
        .next()
        .unwrap_or(f64::NAN);
    let constant = data
        .areas
        .iter()
        .flat_map(|a| &a.sampled_units)
        .all(|u| u.weight == Some(first));
    let k = data.p + 1;
    if constant {
        let a = vec![0.0; k];
        let kappa = profile_kappa(data, &a, 0.0);
        return Ok(WeightModelFit {
            params: WeightModelParams { a, b: 0.0, kappa },
            sse: 0.0,
            degenerate: true,
        });
    }
    let start = vec![0.0; k];
    let nm = minimize(|t| sse(&residuals(data, t)), &start, config)?;
    let t = polish(data, nm.argmin);
    let r = residuals(data, &t);
    let (a, b) = unpack(&t);
    let kappa = profile_kappa(data, &a, b);
    let params = WeightModelParams { a, b, kappa };
    params.validate()?;
    Ok(WeightModelFit {
        params,
        sse: sse(&r),
        degenerate: false,
    })
}

/// EB_INFO output for one area.
#[derive(Debug, Clone, PartialEq)]
pub struct InfoPrediction {
    pub predictions: Vec<McPrediction>,
    /// Unit draws that used the population distribution instead of the
    /// complement (λ too close to 1, or the approximation was requested).
    pub fallback_count: usize,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct InfoOptions {
    /// Draw every non-sampled unit from the population distribution.
    pub population_approximation: bool,
}

pub fn eb_predict_info(
    model: &InformativeModel,
    area: &AreaFrame,
    target: &TargetParameter,
    l: usize,
    stream: &RngStream,
) -> Result<(McPrediction, usize)> {
    let mut out = eb_predict_info_many(model, area, std::slice::from_ref(target), l, stream, InfoOptions::default())?;
    Ok((out.predictions.remove(0), out.fallback_count))
}

/// Per draw: u ~ sample-model posterior, then each non-sampled y from the
/// complement distribution given u. At b = 0 the draw path is the one of
/// the gamma-gamma EB predictor.
pub fn eb_predict_info_many(
    model: &InformativeModel,
    area: &AreaFrame,
    targets: &[TargetParameter],
    l: usize,
    stream: &RngStream,
    opts: InfoOptions,
) -> Result<InfoPrediction> {
    model.validate()?;
    area.require_covariates()?;
    let idx = model.area_index(&area.area_id)?;
    let sp = &model.sample_params;
    let post = posterior_u(sp, area);
    if !(post.rate.is_finite() && post.rate > 0.0) {
        return Err(Error::Evaluation {
            area: area.area_id.clone(),
            message: format!("posterior rate {} is not finite", post.rate),
        });
    }
    let e: Vec<f64> = area.nonsampled_covariates.iter().map(|x| sp.linpred(x).exp()).collect();
    let ax: Vec<f64> = area.nonsampled_covariates.iter().map(|x| model.weights.ax(x)).collect();
    let kappa = model.weights.kappa[idx];
    let b = model.weights.b;
    let g_alpha = GammaSampler::new(sp.alpha)?;
    let g_u = GammaSampler::new(post.shape)?;
    let p = RegGammaP::new(sp.alpha);
    let mut rng = stream.rng();
    let mut fallback = 0usize;
    let predictions = monte_carlo(area, targets, l, |rest| {
        let u = g_u.sample(&mut rng, post.rate);
        if b == 0.0 {
            let inv_u = 1.0 / u;
            for (y, ei) in rest.iter_mut().zip(&e) {
                *y = g_alpha.sample(&mut rng, 1.0) / ei * inv_u;
            }
            return Ok(());
        }
        for ((y, ei), axi) in rest.iter_mut().zip(&e).zip(&ax) {
            let eta = ei * u;
            let unit = UnitComplement {
                alpha: sp.alpha,
                eta,
                b,
                lambda: lambda_from(kappa, *axi, b, eta, sp.alpha)?,
            };
            if opts.population_approximation || !unit.is_defined() {
                if !opts.population_approximation {
                    fallback += 1;
                }
                *y = g_alpha.sample(&mut rng, eta + b);
            } else {
                let q: f64 = rand::Rng::random(&mut rng);
                *y = unit.quantile_with(&p, q.max(f64::MIN_POSITIVE))?;
            }
        }
        Ok(())
    })
    .map_err(|e| e.in_area(&area.area_id))?;
    Ok(InfoPrediction {
        predictions,
        fallback_count: fallback,
    })
}

/// EB_INFO rows for every area and target; area i uses stream id i.
pub fn eb_info_table(
    model: &InformativeModel,
    data: &SurveyData,
    targets: &[TargetParameter],
    l: usize,
    seed: u64,
    opts: InfoOptions,
) -> Result<PredictionTable> {
    let per_area: Vec<Vec<PredictionRow>> = data
        .areas
        .par_iter()
        .enumerate()
        .map(|(i, area)| {
            let out = eb_predict_info_many(model, area, targets, l, &area_stream(seed, i), opts)?;
            Ok(targets
                .iter()
                .zip(out.predictions)
                .map(|(t, p)| PredictionRow {
                    area: area.area_id.clone(),
                    target: t.label.clone(),
                    method: Method::EbInfo,
                    estimate: p.point,
                    n: area.n(),
                    population_size: area.population_size(),
                    l,
                    seed,
                    fallback_count: out.fallback_count,
                })
                .collect())
        })
        .collect::<Result<_>>()?;
    Ok(PredictionTable {
        rows: per_area.into_iter().flatten().collect(),
    })
}

/// Fit the sample model and the weight model on weighted data.
pub fn fit_informative(data: &SurveyData, config: &OptimizerConfig) -> Result<(InformativeModel, WeightModelFit)> {
    let sample = crate::gamma_gamma::fit(data, config)?;
    if !sample.converged {
        return Err(Error::Estimator("sample-model fit did not converge".into()));
    }
    let w = fit_weight_model(data, config)?;
    let model = InformativeModel {
        sample_params: sample.params,
        weights: w.params.clone(),
        area_ids: data.areas.iter().map(|a| a.area_id.clone()).collect(),
    };
    Ok((model, w))
}
