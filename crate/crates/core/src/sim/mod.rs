//! Monte Carlo simulation studies: designs, named presets, population and
//! sample generation, and the study runner with its metrics.

mod demo;
mod population;
mod study;

pub use demo::{demo_dataset, DemoOptions};
pub use population::{draw_sample, generate_covariates, generate_population, Covariates, Population, Sample};
pub use study::{run_study, MetricRow, MetricTable, MseMetricRow, MseReplicate, Replicate, StudyAccumulator};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gamma_gamma::GammaGammaParams;
use crate::glmm::GlmmParams;
use crate::mse::MseVariant;
use crate::table::Method;
use crate::targets::TargetParameter;

/// Population model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Generator {
    GammaGamma { alpha: f64, delta: f64, gamma: Vec<f64> },
    Glmm { nu: f64, beta: Vec<f64>, phi: f64 },
}

impl Generator {
    pub fn validate(&self) -> Result<()> {
        match self {
            Generator::GammaGamma { .. } => self.gamma_gamma().map(|_| ()),
            Generator::Glmm { .. } => self.glmm().map(|_| ()),
        }
    }

    pub fn gamma_gamma(&self) -> Result<GammaGammaParams> {
        match self {
            Generator::GammaGamma { alpha, delta, gamma } => GammaGammaParams::new(*alpha, *delta, gamma.clone()),
            _ => Err(Error::Config("generator is not gamma-gamma".into())),
        }
    }

    pub fn glmm(&self) -> Result<GlmmParams> {
        match self {
            Generator::Glmm { nu, beta, phi } => GlmmParams::new(beta.clone(), *phi, *nu),
            _ => Err(Error::Config("generator is not the GLMM".into())),
        }
    }

    fn coef_len(&self) -> usize {
        match self {
            Generator::GammaGamma { gamma, .. } => gamma.len(),
            Generator::Glmm { beta, .. } => beta.len(),
        }
    }
}

/// Within-area selection.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Sampling {
    Srswor,
    /// Randomized systematic PPS with π ∝ exp(a x + b y + τ/20),
    /// τ ~ Gamma(tau_delta, tau_delta).
    InformativeSystematic { a: f64, b: f64, tau_delta: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimDesign {
    pub name: String,
    /// Number of areas; the first half gets `n_small` units.
    pub d: usize,
    pub n_pop: usize,
    pub n_small: usize,
    pub n_large: usize,
    pub generator: Generator,
    pub sampling: Sampling,
    /// Monte Carlo replicates.
    pub m: usize,
    /// Monte Carlo size of the EB, EB_INFO and M predictors.
    pub l: usize,
    /// EB_HZ draws of the area effect and completions per draw.
    pub l_hz_outer: usize,
    pub l_hz_inner: usize,
    /// Bootstrap sizes for the MSE study.
    pub b: usize,
    pub b1: usize,
    pub b2: usize,
    pub seed: u64,
    pub methods: Vec<Method>,
    pub targets: Vec<TargetParameter>,
    /// MSE variants evaluated each replicate (empty: no MSE study).
    pub mse_variants: Vec<MseVariant>,
}

impl SimDesign {
    pub const PRESETS: [&'static str; 4] = ["sim1-gg", "sim1-glmm", "sim2-mse", "sim3-informative"];

    fn base(name: &str, generator: Generator, sampling: Sampling, methods: Vec<Method>) -> Self {
        Self {
            name: name.to_string(),
            d: 100,
            n_pop: 100,
            n_small: 10,
            n_large: 20,
            generator,
            sampling,
            m: 500,
            l: 100,
            l_hz_outer: 100,
            l_hz_inner: 10,
            b: 100,
            b1: 100,
            b2: 1,
            seed: 1,
            methods,
            targets: TargetParameter::study_set(),
            mse_variants: Vec::new(),
        }
    }

    fn gg(alpha: f64) -> Generator {
        Generator::GammaGamma {
            alpha,
            delta: 4.0,
            gamma: vec![1.0, 0.5],
        }
    }

    /// Gamma-gamma population, SRSWOR, all predictors.
    pub fn sim1_gg(alpha: f64) -> Self {
        use Method::*;
        Self::base("sim1-gg", Self::gg(alpha), Sampling::Srswor, vec![Eb, EbClsd, EbHz, M, Pi, Dir])
    }

    /// GLMM population with β = (0.5, 0.05), φ = 0.1.
    pub fn sim1_glmm(nu: f64) -> Self {
        use Method::*;
        let g = Generator::Glmm {
            nu,
            beta: vec![0.5, 0.05],
            phi: 0.1,
        };
        Self::base("sim1-glmm", g, Sampling::Srswor, vec![Eb, EbClsd, EbHz, M, Pi, Dir])
    }

    /// MSE estimators of the gamma-gamma EB predictor.
    pub fn sim2_mse(alpha: f64) -> Self {
        let mut d = Self::base("sim2-mse", Self::gg(alpha), Sampling::Srswor, vec![Method::Eb]);
        d.m = 2000;
        d.mse_variants = MseVariant::ALL.to_vec();
        d
    }

    /// Informative systematic sampling with a = 0.05.
    pub fn sim3_informative(alpha: f64, b: f64) -> Self {
        use Method::*;
        let s = Sampling::InformativeSystematic {
            a: 0.05,
            b,
            tau_delta: 4.0,
        };
        let mut d = Self::base("sim3-informative", Self::gg(alpha), s, vec![EbInfo, Eb, EbHz, M, Pi, Dir]);
        d.m = 300;
        d
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "sim1-gg" => Ok(Self::sim1_gg(1.0)),
            "sim1-glmm" => Ok(Self::sim1_glmm(1.0)),
            "sim2-mse" => Ok(Self::sim2_mse(1.0)),
            "sim3-informative" => Ok(Self::sim3_informative(1.0, 0.2)),
            _ => Err(Error::Config(format!(
                "unknown preset `{name}` (available: {})",
                Self::PRESETS.join(", ")
            ))),
        }
    }

    /// Sample size of area `i` (0-based).
    pub fn sample_size(&self, i: usize) -> usize {
        if i < self.d / 2 {
            self.n_small
        } else {
            self.n_large
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.generator.validate()?;
        if self.generator.coef_len() != 2 {
            return Err(Error::Config("simulation designs use one covariate plus intercept".into()));
        }
        if self.d == 0 || self.m == 0 || self.l < 2 {
            return Err(Error::Config("need D >= 1, M >= 1 and L >= 2".into()));
        }
        if self.n_small == 0 || self.n_large == 0 || self.n_small > self.n_pop || self.n_large > self.n_pop {
            return Err(Error::Config(format!(
                "area sample sizes {} and {} must lie in 1..={}",
                self.n_small, self.n_large, self.n_pop
            )));
        }
        if self.methods.is_empty() || self.targets.is_empty() {
            return Err(Error::Config("a study needs at least one method and one target".into()));
        }
        if self.methods.contains(&Method::EbInfo) && !matches!(self.sampling, Sampling::InformativeSystematic { .. }) {
            return Err(Error::Config("EB_INFO needs informative sampling (design weights)".into()));
        }
        if !self.mse_variants.is_empty() {
            if !matches!(self.generator, Generator::GammaGamma { .. }) {
                return Err(Error::Config("the MSE study needs a gamma-gamma generator".into()));
            }
            if self.b < 2 || (self.mse_variants.iter().any(|v| v.needs_direct()) && (self.b1 < 2 || self.b2 == 0)) {
                return Err(Error::Config("bootstrap sizes need B >= 2, B1 >= 2, B2 >= 1".into()));
            }
        }
        if let Sampling::InformativeSystematic { tau_delta, .. } = self.sampling {
            if !(tau_delta > 0.0) {
                return Err(Error::Config("tau_delta must be positive".into()));
            }
        }
        if self.l_hz_outer == 0 || self.l_hz_inner == 0 {
            return Err(Error::Config("EB_HZ Monte Carlo sizes must be positive".into()));
        }
        Ok(())
    }
}

/// Study configuration file: a preset plus optional overrides.
#[derive(Debug, Clone, Default, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StudyConfig {
    pub preset: Option<String>,
    pub d: Option<usize>,
    pub n_pop: Option<usize>,
    pub n_small: Option<usize>,
    pub n_large: Option<usize>,
    pub generator: Option<Generator>,
    pub sampling: Option<Sampling>,
    pub m: Option<usize>,
    pub l: Option<usize>,
    pub l_hz_outer: Option<usize>,
    pub l_hz_inner: Option<usize>,
    pub b: Option<usize>,
    pub b1: Option<usize>,
    pub b2: Option<usize>,
    pub seed: Option<u64>,
    pub methods: Option<Vec<String>>,
    pub targets: Option<Vec<String>>,
    pub mse_variants: Option<Vec<String>>,
}

impl StudyConfig {
    pub fn from_toml_str(s: &str) -> Result<Self> {
        toml::from_str(s).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn resolve(&self) -> Result<SimDesign> {
        let mut des = SimDesign::preset(self.preset.as_deref().unwrap_or("sim1-gg"))?;
        macro_rules! set {
            ($($f:ident),*) => { $( if let Some(v) = &self.$f { des.$f = v.clone(); } )* };
        }
        set!(d, n_pop, n_small, n_large, generator, sampling, m, l, l_hz_outer, l_hz_inner, b, b1, b2, seed);
        if let Some(ms) = &self.methods {
            des.methods = ms.iter().map(|s| s.parse()).collect::<Result<_>>()?;
        }
        if let Some(ts) = &self.targets {
            des.targets = ts.iter().map(|s| s.parse()).collect::<Result<_>>()?;
        }
        if let Some(vs) = &self.mse_variants {
            des.mse_variants = vs.iter().map(|s| s.parse()).collect::<Result<_>>()?;
        }
        des.validate()?;
        Ok(des)
    }
}

impl Serialize for Method {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(self.label())
    }
}

impl<'de> Deserialize<'de> for Method {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        String::deserialize(d)?.parse().map_err(serde::de::Error::custom)
    }
}

impl Serialize for TargetParameter {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(&self.label)
    }
}

impl<'de> Deserialize<'de> for TargetParameter {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        String::deserialize(d)?.parse().map_err(serde::de::Error::custom)
    }
}

impl Serialize for MseVariant {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(self.label())
    }
}

impl<'de> Deserialize<'de> for MseVariant {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        String::deserialize(d)?.parse().map_err(serde::de::Error::custom)
    }
}
