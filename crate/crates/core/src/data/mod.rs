//! Population/sample containers shared by every estimator.

mod io;
mod validate;

pub use io::{load_csv, load_csv_with, read_csv, write_csv, ColumnMap, DataConfig};
pub use validate::{validate, Issue, ValidationReport};

use std::cmp::Ordering;

use crate::error::{Error, Result};

/// One sampled unit: positive response, covariates with leading intercept,
/// optional design weight.
#[derive(Debug, Clone, PartialEq)]
pub struct UnitRecord {
    pub y: f64,
    pub x: Vec<f64>,
    pub weight: Option<f64>,
}

impl UnitRecord {
    pub fn new(y: f64, x: Vec<f64>, weight: Option<f64>) -> Self {
        Self { y, x, weight }
    }
}

/// Sampled units and non-sampled covariates of one area.
#[derive(Debug, Clone, PartialEq)]
pub struct AreaFrame {
    pub area_id: String,
    pub sampled_units: Vec<UnitRecord>,
    pub nonsampled_covariates: Vec<Vec<f64>>,
    population_size: usize,
}

impl AreaFrame {
    /// Frame whose population is exactly the sampled plus listed non-sampled units.
    pub fn new(area_id: impl Into<String>, sampled_units: Vec<UnitRecord>, nonsampled_covariates: Vec<Vec<f64>>) -> Self {
        let population_size = sampled_units.len() + nonsampled_covariates.len();
        Self {
            area_id: area_id.into(),
            sampled_units,
            nonsampled_covariates,
            population_size,
        }
    }

    /// Frame with a declared population size. A size larger than the listed
    /// units leaves the non-sampled covariates incomplete.
    pub fn with_population_size(mut self, population_size: usize) -> Result<Self> {
        let listed = self.sampled_units.len() + self.nonsampled_covariates.len();
        if population_size < listed {
            return Err(Error::Data(format!(
                "area {}: population size {population_size} is smaller than the {listed} listed units",
                self.area_id
            )));
        }
        self.population_size = population_size;
        Ok(self)
    }

    pub fn n(&self) -> usize {
        self.sampled_units.len()
    }

    pub fn population_size(&self) -> usize {
        self.population_size
    }

    pub fn ys(&self) -> impl Iterator<Item = f64> + '_ {
        self.sampled_units.iter().map(|u| u.y)
    }

    pub fn sampled_y(&self) -> Vec<f64> {
        self.ys().collect()
    }

    /// True when covariates are known for every non-sampled unit.
    pub fn has_complete_covariates(&self) -> bool {
        self.n() + self.nonsampled_covariates.len() == self.population_size
    }

    /// Refuses prediction when non-sampled covariates are missing.
    pub fn require_covariates(&self) -> Result<()> {
        if self.has_complete_covariates() {
            Ok(())
        } else {
            Err(Error::Data(format!(
                "area {}: covariates known for {} of {} non-sampled units; prediction needs all of them",
                self.area_id,
                self.nonsampled_covariates.len(),
                self.population_size - self.n()
            )))
        }
    }

    /// Same frame with the sampled responses replaced (covariates and
    /// weights kept).
    pub fn with_sampled_y(&self, ys: &[f64]) -> AreaFrame {
        assert_eq!(ys.len(), self.n(), "response count mismatch");
        let mut out = self.clone();
        for (u, &y) in out.sampled_units.iter_mut().zip(ys) {
            u.y = y;
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SurveyData {
    pub areas: Vec<AreaFrame>,
    /// Covariate dimension excluding the intercept.
    pub p: usize,
}

impl SurveyData {
    /// Checks the shared invariants: at least one area, a common covariate
    /// dimension with leading intercept, positive sampled responses and
    /// weights at least one.
    pub fn new(areas: Vec<AreaFrame>) -> Result<Self> {
        let first = areas
            .iter()
            .flat_map(|a| a.sampled_units.iter().map(|u| u.x.len()).chain(a.nonsampled_covariates.iter().map(|x| x.len())))
            .next()
            .ok_or_else(|| Error::Data("survey data needs at least one area with units".into()))?;
        if first == 0 {
            return Err(Error::Data("covariate vectors must include the intercept".into()));
        }
        for a in &areas {
            let xs = a.sampled_units.iter().map(|u| &u.x).chain(a.nonsampled_covariates.iter());
            for x in xs {
                if x.len() != first {
                    return Err(Error::Data(format!(
                        "area {}: covariate length {} differs from {first}",
                        a.area_id,
                        x.len()
                    )));
                }
                if x[0] != 1.0 {
                    return Err(Error::Data(format!("area {}: intercept column must equal 1", a.area_id)));
                }
                if x.iter().any(|v| !v.is_finite()) {
                    return Err(Error::Data(format!("area {}: non-finite covariate", a.area_id)));
                }
            }
            for u in &a.sampled_units {
                if !(u.y > 0.0 && u.y.is_finite()) {
                    return Err(Error::Data(format!("area {}: sampled response {} is not positive", a.area_id, u.y)));
                }
                if let Some(w) = u.weight {
                    if !(w >= 1.0 && w.is_finite()) {
                        return Err(Error::Data(format!("area {}: design weight {w} is below 1", a.area_id)));
                    }
                }
            }
        }
        Ok(Self { areas, p: first - 1 })
    }

    pub fn num_areas(&self) -> usize {
        self.areas.len()
    }

    pub fn total_sample_size(&self) -> usize {
        self.areas.iter().map(|a| a.n()).sum()
    }

    pub fn area(&self, id: &str) -> Option<&AreaFrame> {
        self.areas.iter().find(|a| a.area_id == id)
    }

    /// Copy with every area's sampled responses replaced, in area order.
    pub fn with_sampled_y(&self, ys: &[Vec<f64>]) -> SurveyData {
        assert_eq!(ys.len(), self.areas.len());
        SurveyData {
            areas: self.areas.iter().zip(ys).map(|(a, y)| a.with_sampled_y(y)).collect(),
            p: self.p,
        }
    }

    pub fn all_weighted(&self) -> bool {
        self.areas.iter().flat_map(|a| &a.sampled_units).all(|u| u.weight.is_some())
    }
}

/// Area-id ordering: numeric when both ids parse as integers, otherwise
/// lexicographic.
pub fn compare_area_ids(a: &str, b: &str) -> Ordering {
    match (a.parse::<i64>(), b.parse::<i64>()) {
        (Ok(x), Ok(y)) => x.cmp(&y),
        (Ok(_), Err(_)) => Ordering::Less,
        (Err(_), Ok(_)) => Ordering::Greater,
        _ => a.cmp(b),
    }
}
