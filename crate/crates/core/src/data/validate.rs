use std::fmt;

use super::SurveyData;

#[derive(Debug, Clone, PartialEq)]
pub enum Issue {
    /// Area has no sample; only model-based prediction is possible.
    PredictionOnlyArea(String),
    /// Covariate column (1-based, intercept excluded) is constant.
    ConstantCovariate(usize),
    /// Some but not all sampled units carry weights.
    PartialWeights { coverage: f64 },
    /// Non-sampled covariates are missing for an area.
    MissingCovariates(String),
}

impl fmt::Display for Issue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Issue::PredictionOnlyArea(a) => write!(f, "area {a}: no sampled units (prediction-only area)"),
            Issue::ConstantCovariate(k) => write!(f, "covariate x{k} is constant"),
            Issue::PartialWeights { coverage } => write!(
                f,
                "weights present for {:.1}% of sampled units: informative analysis unavailable",
                100.0 * coverage
            ),
            Issue::MissingCovariates(a) => write!(f, "area {a}: non-sampled covariates incomplete"),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ValidationReport {
    pub issues: Vec<Issue>,
    /// Fraction of sampled units with a design weight.
    pub weight_coverage: f64,
}

impl ValidationReport {
    pub fn informative_available(&self) -> bool {
        self.weight_coverage == 1.0
    }
}

/// Inspect the data without modifying it.
pub fn validate(data: &SurveyData) -> ValidationReport {
    let mut issues = Vec::new();
    for a in &data.areas {
        if a.n() == 0 {
            issues.push(Issue::PredictionOnlyArea(a.area_id.clone()));
        }
        if !a.has_complete_covariates() {
            issues.push(Issue::MissingCovariates(a.area_id.clone()));
        }
    }
    for k in 1..=data.p {
        let mut vals = data
            .areas
            .iter()
            .flat_map(|a| a.sampled_units.iter().map(|u| &u.x).chain(a.nonsampled_covariates.iter()))
            .map(|x| x[k]);
        if let Some(first) = vals.next() {
            if vals.all(|v| v == first) {
                issues.push(Issue::ConstantCovariate(k));
            }
        }
    }
    let total = data.total_sample_size();
    let weighted = data
        .areas
        .iter()
        .flat_map(|a| &a.sampled_units)
        .filter(|u| u.weight.is_some())
        .count();
    let weight_coverage = if total == 0 { 0.0 } else { weighted as f64 / total as f64 };
    if weighted > 0 && weighted < total {
        issues.push(Issue::PartialWeights {
            coverage: weight_coverage,
        });
    }
    ValidationReport {
        issues,
        weight_coverage,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{AreaFrame, UnitRecord};

    fn u(y: f64, x: f64, w: Option<f64>) -> UnitRecord {
        UnitRecord::new(y, vec![1.0, x], w)
    }

    #[test]
    fn clean_data_has_no_issues() {
        let d = SurveyData::new(vec![
            AreaFrame::new("a", vec![u(1.0, 0.1, None)], vec![vec![1.0, 0.4]]),
            AreaFrame::new("b", vec![u(2.0, 0.3, None)], vec![]),
        ])
        .unwrap();
        let r = validate(&d);
        assert!(r.issues.is_empty(), "{:?}", r.issues);
    }

    #[test]
    fn empty_area_flagged() {
        let d = SurveyData::new(vec![
            AreaFrame::new("a", vec![u(1.0, 0.1, None)], vec![]),
            AreaFrame::new("b", vec![], vec![vec![1.0, 0.2]]),
        ])
        .unwrap();
        let r = validate(&d);
        assert_eq!(r.issues, vec![Issue::PredictionOnlyArea("b".into())]);
    }

    #[test]
    fn half_weighted_flagged() {
        let d = SurveyData::new(vec![AreaFrame::new(
            "a",
            vec![u(1.0, 0.1, Some(2.0)), u(1.5, 0.2, None)],
            vec![],
        )])
        .unwrap();
        let r = validate(&d);
        assert_eq!(r.weight_coverage, 0.5);
        assert!(!r.informative_available());
        assert!(r.issues.iter().any(|i| i.to_string().contains("informative analysis unavailable")));
    }

    #[test]
    fn constant_covariate_flagged() {
        let d = SurveyData::new(vec![AreaFrame::new("a", vec![u(1.0, 0.5, None), u(2.0, 0.5, None)], vec![])]).unwrap();
        assert_eq!(validate(&d).issues, vec![Issue::ConstantCovariate(1)]);
    }
}
