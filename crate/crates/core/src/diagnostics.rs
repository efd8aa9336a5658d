//! Generalized (PIT) residuals for both models and normal-theory intervals.

use std::fmt;
use std::io::Write;
use std::str::FromStr;

use crate::data::SurveyData;
use crate::error::{Error, Result};
use crate::gamma_gamma::{posterior_u, FitResult};
use crate::glmm::GlmmFit;
use crate::numerics::{norm_quantile, RegGammaP};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ModelTag {
    GammaGamma,
    Glmm,
}

impl ModelTag {
    pub fn label(self) -> &'static str {
        match self {
            ModelTag::GammaGamma => "gamma-gamma",
            ModelTag::Glmm => "glmm",
        }
    }
}

/// Plug-in area effect used by the gamma-gamma residuals.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub enum UhatRule {
    /// (α̂ + δ̂) / (Σ y e^{x'γ̂} + δ̂).
    #[default]
    Literal,
    /// Posterior mean (n α̂ + δ̂) / (Σ y e^{x'γ̂} + δ̂).
    PosteriorMean,
}

impl FromStr for UhatRule {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "literal" => Ok(UhatRule::Literal),
            "posterior-mean" => Ok(UhatRule::PosteriorMean),
            _ => Err(Error::Domain(format!("unknown uhat rule `{s}` (literal, posterior-mean)"))),
        }
    }
}

impl fmt::Display for UhatRule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            UhatRule::Literal => "literal",
            UhatRule::PosteriorMean => "posterior-mean",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Residual {
    pub area: String,
    /// Position of the unit within the area's sample.
    pub unit: usize,
    pub r: f64,
    pub normal_score: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ResidualSet {
    pub residuals: Vec<Residual>,
    pub model: ModelTag,
    /// Residuals that hit 0 or 1 and were pulled inside (0, 1).
    pub clamped: usize,
}

impl ResidualSet {
    /// Least-squares slope through the origin of sorted normal scores on
    /// standard normal plotting positions.
    pub fn qq_slope(&self) -> f64 {
        let mut z: Vec<f64> = self.residuals.iter().map(|r| r.normal_score).collect();
        z.sort_by(f64::total_cmp);
        let n = z.len() as f64;
        let (mut sxy, mut sxx) = (0.0, 0.0);
        for (i, v) in z.iter().enumerate() {
            let q = norm_quantile((i as f64 + 0.5) / n);
            sxy += q * v;
            sxx += q * q;
        }
        sxy / sxx
    }

    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["area", "unit", "r", "normal_score", "model"])?;
        for r in &self.residuals {
            w.write_record([
                r.area.clone(),
                r.unit.to_string(),
                format!("{}", r.r),
                format!("{}", r.normal_score),
                self.model.label().to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

struct Builder {
    out: Vec<Residual>,
    clamped: usize,
}

impl Builder {
    fn push(&mut self, area: &str, unit: usize, r: f64) {
        let lo = f64::EPSILON;
        let hi = 1.0 - f64::EPSILON;
        let r = if r < lo || r > hi {
            self.clamped += 1;
            r.clamp(lo, hi)
        } else {
            r
        };
        self.out.push(Residual {
            area: area.to_string(),
            unit,
            r,
            normal_score: norm_quantile(r),
        });
    }
}

/// r_ij = P(α̂, e^{x'γ̂} û_i y_ij).
pub fn residuals_gamma_gamma(fit: &FitResult, data: &SurveyData, rule: UhatRule) -> Result<ResidualSet> {
    let p = &fit.params;
    p.validate()?;
    let cdf = RegGammaP::new(p.alpha);
    let mut b = Builder {
        out: Vec::with_capacity(data.total_sample_size()),
        clamped: 0,
    };
    for area in &data.areas {
        let post = posterior_u(p, area);
        let shape = match rule {
            UhatRule::Literal => p.alpha + p.delta,
            UhatRule::PosteriorMean => post.shape,
        };
        let uhat = shape / post.rate;
        for (j, u) in area.sampled_units.iter().enumerate() {
            b.push(&area.area_id, j, cdf.eval(p.linpred(&u.x).exp() * uhat * u.y));
        }
    }
    Ok(ResidualSet {
        residuals: b.out,
        model: ModelTag::GammaGamma,
        clamped: b.clamped,
    })
}

/// r_ij = P(ν̂, ν̂ y_ij / exp(x'β̂ + v̂_i)).
pub fn residuals_glmm(fit: &GlmmFit, data: &SurveyData) -> Result<ResidualSet> {
    let p = &fit.params;
    p.validate()?;
    let cdf = RegGammaP::new(p.nu);
    let mut b = Builder {
        out: Vec::with_capacity(data.total_sample_size()),
        clamped: 0,
    };
    for area in &data.areas {
        let v = fit.vhat_for(area)?;
        for (j, u) in area.sampled_units.iter().enumerate() {
            b.push(&area.area_id, j, cdf.eval(p.nu * u.y / (p.linpred(&u.x) + v).exp()));
        }
    }
    Ok(ResidualSet {
        residuals: b.out,
        model: ModelTag::Glmm,
        clamped: b.clamped,
    })
}

/// point ± z_{(1+level)/2} √mse. Negative MSE is refused.
pub fn normal_ci(point: f64, mse: f64, level: f64) -> Result<(f64, f64)> {
    if !(level > 0.0 && level < 1.0) {
        return Err(Error::Domain(format!("confidence level {level} must lie in (0, 1)")));
    }
    if !(mse >= 0.0) {
        return Err(Error::Domain(format!("negative MSE {mse} cannot form an interval")));
    }
    let half = norm_quantile(0.5 + level / 2.0) * mse.sqrt();
    Ok((point - half, point + half))
}

/// One row of the interval table; `lo`/`hi` are absent when refused.
#[derive(Debug, Clone, PartialEq)]
pub struct CiRow {
    pub area: String,
    pub target: String,
    pub variant: String,
    pub lo: Option<f64>,
    pub hi: Option<f64>,
    pub flag: String,
}

impl CiRow {
    pub fn new(area: &str, target: &str, variant: &str, point: f64, mse: f64, level: f64) -> Self {
        let (lo, hi, flag) = match normal_ci(point, mse, level) {
            Ok((l, h)) => (Some(l), Some(h), String::new()),
            Err(_) => (None, None, "negative-mse".to_string()),
        };
        Self {
            area: area.into(),
            target: target.into(),
            variant: variant.into(),
            lo,
            hi,
            flag,
        }
    }
}

pub fn write_ci_csv<W: Write>(rows: &[CiRow], writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["area", "target", "variant", "lo", "hi", "flag"])?;
    let fmt = |v: Option<f64>| v.map(|x| format!("{x}")).unwrap_or_default();
    for r in rows {
        w.write_record([
            r.area.clone(),
            r.target.clone(),
            r.variant.clone(),
            fmt(r.lo),
            fmt(r.hi),
            r.flag.clone(),
        ])?;
    }
    w.flush()?;
    Ok(())
}
