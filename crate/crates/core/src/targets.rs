//! Area parameters h(y_1, ..., y_N) and the direct estimator.

use std::fmt;
use std::str::FromStr;

use crate::data::{AreaFrame, SurveyData};
use crate::error::{Error, Result};
use crate::table::{Method, PredictionRow, PredictionTable};

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum TargetKind {
    Mean,
    Quantile(f64),
    Gini,
    /// Proportion strictly greater than the threshold.
    ExceedProportion(f64),
}

#[derive(Debug, Clone, PartialEq)]
pub struct TargetParameter {
    pub kind: TargetKind,
    pub label: String,
}

impl TargetParameter {
    pub fn mean() -> Self {
        Self {
            kind: TargetKind::Mean,
            label: "mean".into(),
        }
    }

    pub fn quantile(p: f64) -> Result<Self> {
        if !(p > 0.0 && p < 1.0) {
            return Err(Error::Domain(format!("quantile probability {p} must lie in (0, 1)")));
        }
        Ok(Self {
            kind: TargetKind::Quantile(p),
            label: format!("q:{p}"),
        })
    }

    pub fn gini() -> Self {
        Self {
            kind: TargetKind::Gini,
            label: "gini".into(),
        }
    }

    pub fn exceed(t: f64) -> Result<Self> {
        if !(t > 0.0 && t.is_finite()) {
            return Err(Error::Domain(format!("exceedance threshold {t} must be positive")));
        }
        Ok(Self {
            kind: TargetKind::ExceedProportion(t),
            label: format!("exceed:{t}"),
        })
    }

    /// The four targets of the simulation studies: mean, Q.25, Q.75, Gini.
    pub fn study_set() -> Vec<Self> {
        vec![
            Self::mean(),
            Self::quantile(0.25).unwrap(),
            Self::quantile(0.75).unwrap(),
            Self::gini(),
        ]
    }

    pub fn is_mean(&self) -> bool {
        self.kind == TargetKind::Mean
    }

    /// Whether evaluation needs the values sorted.
    pub fn needs_sorted(&self) -> bool {
        matches!(self.kind, TargetKind::Quantile(_) | TargetKind::Gini)
    }

    pub fn evaluate(&self, values: &[f64]) -> Result<f64> {
        if values.is_empty() {
            return Err(Error::Domain("target evaluated on an empty vector".into()));
        }
        if self.needs_sorted() {
            let mut v = values.to_vec();
            v.sort_unstable_by(f64::total_cmp);
            Ok(self.evaluate_sorted(&v))
        } else {
            Ok(self.evaluate_sorted(values))
        }
    }

    /// Evaluate on nonempty values already sorted ascending (order is
    /// irrelevant for mean and exceedance).
    pub fn evaluate_sorted(&self, sorted: &[f64]) -> f64 {
        match self.kind {
            TargetKind::Mean => sorted.iter().sum::<f64>() / sorted.len() as f64,
            TargetKind::Quantile(p) => quantile_type7(sorted, p),
            TargetKind::Gini => gini_sorted(sorted),
            TargetKind::ExceedProportion(t) => {
                sorted.iter().filter(|&&v| v > t).count() as f64 / sorted.len() as f64
            }
        }
    }
}

impl fmt::Display for TargetParameter {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.label)
    }
}

impl FromStr for TargetParameter {
    type Err = Error;

    /// Grammar: `mean`, `q:<p>`, `gini`, `exceed:<t>`.
    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        let num = |v: &str| -> Result<f64> {
            v.trim()
                .parse::<f64>()
                .map_err(|_| Error::Domain(format!("cannot parse target argument in `{s}`")))
        };
        match s.split_once(':') {
            None if s == "mean" => Ok(Self::mean()),
            None if s == "gini" => Ok(Self::gini()),
            Some(("q", v)) => Self::quantile(num(v)?),
            Some(("exceed", v)) => Self::exceed(num(v)?),
            _ => Err(Error::Domain(format!("unknown target `{s}` (expected mean, q:<p>, gini, exceed:<t>)"))),
        }
    }
}

/// Type-7 quantile of ascending values, p in [0, 1].
pub fn quantile_type7(sorted: &[f64], p: f64) -> f64 {
    let n = sorted.len();
    let h = (n - 1) as f64 * p;
    let lo = h.floor() as usize;
    if lo + 1 >= n {
        return sorted[n - 1];
    }
    sorted[lo] + (h - lo as f64) * (sorted[lo + 1] - sorted[lo])
}

/// Gini with the n² normalization, via sum (2i - n - 1) v_(i) / (n sum v).
pub fn gini_sorted(sorted: &[f64]) -> f64 {
    let n = sorted.len() as f64;
    let mut weighted = 0.0;
    let mut total = 0.0;
    for (i, &v) in sorted.iter().enumerate() {
        weighted += (2.0 * (i as f64 + 1.0) - n - 1.0) * v;
        total += v;
    }
    if total == 0.0 {
        return 0.0;
    }
    (weighted / (n * total)).max(0.0)
}

/// Monte Carlo predictions sharing one set of draws across targets.
#[derive(Debug, Clone, PartialEq)]
pub struct McPrediction {
    /// Average of the draws.
    pub point: f64,
    /// θ^(ℓ) for ℓ = 1..L.
    pub draws: Vec<f64>,
}

/// Run `l` Monte Carlo completions of an area: `fill` writes the
/// non-sampled values for one draw, and every target is evaluated on the
/// completed population. When the area is fully sampled nothing is drawn
/// and every draw equals h(y_s).
pub(crate) fn monte_carlo<G>(
    area: &AreaFrame,
    targets: &[TargetParameter],
    l: usize,
    mut fill: G,
) -> Result<Vec<McPrediction>>
where
    G: FnMut(&mut [f64]) -> Result<()>,
{
    if l == 0 {
        return Err(Error::Domain("Monte Carlo size L must be at least 1".into()));
    }
    let n = area.n();
    let total = n + area.nonsampled_covariates.len();
    if total == 0 {
        return Err(Error::Data(format!("area {} has no units", area.area_id)));
    }
    let mut values = Vec::with_capacity(total);
    values.extend(area.ys());
    values.resize(total, 0.0);
    if total == n {
        return targets
            .iter()
            .map(|t| {
                let v = t.evaluate(&values)?;
                Ok(McPrediction {
                    point: v,
                    draws: vec![v; l],
                })
            })
            .collect();
    }
    let sort = targets.iter().any(|t| t.needs_sorted());
    let mut sorted = if sort { values.clone() } else { Vec::new() };
    let mut draws: Vec<Vec<f64>> = targets.iter().map(|_| Vec::with_capacity(l)).collect();
    for _ in 0..l {
        fill(&mut values[n..])?;
        if sort {
            sorted.copy_from_slice(&values);
            sorted.sort_unstable_by(f64::total_cmp);
        }
        for (t, d) in targets.iter().zip(draws.iter_mut()) {
            d.push(if t.needs_sorted() { t.evaluate_sorted(&sorted) } else { t.evaluate_sorted(&values) });
        }
    }
    Ok(draws
        .into_iter()
        .map(|d| McPrediction {
            point: d.iter().sum::<f64>() / l as f64,
            draws: d,
        })
        .collect())
}

/// The target evaluated on the area's sample alone.
pub fn direct_estimate(target: &TargetParameter, area: &AreaFrame) -> Result<f64> {
    if area.n() == 0 {
        return Err(Error::Unavailable(format!(
            "area {}: direct estimate needs at least one sampled unit",
            area.area_id
        )));
    }
    target.evaluate(&area.sampled_y())
}

/// Direct estimates for every area and target.
pub fn direct_table(data: &SurveyData, targets: &[TargetParameter]) -> Result<PredictionTable> {
    let mut rows = Vec::with_capacity(data.num_areas() * targets.len());
    for area in &data.areas {
        for t in targets {
            rows.push(PredictionRow {
                area: area.area_id.clone(),
                target: t.label.clone(),
                method: Method::Dir,
                estimate: direct_estimate(t, area)?,
                n: area.n(),
                population_size: area.population_size(),
                l: 0,
                seed: 0,
                fallback_count: 0,
            });
        }
    }
    Ok(PredictionTable { rows })
}
