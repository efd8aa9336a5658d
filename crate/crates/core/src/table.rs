//! Prediction tables shared by every predictor.

use std::fmt;
use std::io::Write;
use std::str::FromStr;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Method {
    Eb,
    EbClsd,
    EbHz,
    Pi,
    M,
    Dir,
    EbInfo,
}

impl Method {
    pub const ALL: [Method; 7] = [
        Method::Eb,
        Method::EbClsd,
        Method::EbHz,
        Method::Pi,
        Method::M,
        Method::Dir,
        Method::EbInfo,
    ];

    /// Label used in tables.
    pub fn label(self) -> &'static str {
        match self {
            Method::Eb => "EB",
            Method::EbClsd => "EB_clsd",
            Method::EbHz => "EB_HZ",
            Method::Pi => "PI",
            Method::M => "M",
            Method::Dir => "Dir",
            Method::EbInfo => "EB_INFO",
        }
    }

    /// Spelling accepted on the command line.
    pub fn cli_name(self) -> &'static str {
        match self {
            Method::Eb => "eb",
            Method::EbClsd => "eb-clsd",
            Method::EbHz => "eb-hz",
            Method::Pi => "pi",
            Method::M => "m",
            Method::Dir => "dir",
            Method::EbInfo => "eb-info",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let t = s.trim();
        Method::ALL
            .into_iter()
            .find(|m| m.cli_name().eq_ignore_ascii_case(t) || m.label().eq_ignore_ascii_case(t))
            .ok_or_else(|| Error::Domain(format!("unknown method `{s}`")))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PredictionRow {
    pub area: String,
    pub target: String,
    pub method: Method,
    pub estimate: f64,
    pub n: usize,
    pub population_size: usize,
    /// Monte Carlo size, 0 for non-simulated predictors.
    pub l: usize,
    pub seed: u64,
    /// Units that fell back to the population distribution (EB_INFO only).
    pub fallback_count: usize,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct PredictionTable {
    pub rows: Vec<PredictionRow>,
}

impl PredictionTable {
    pub const HEADER: [&'static str; 9] = ["area", "target", "method", "estimate", "n", "N", "L", "seed", "fallback_count"];

    pub fn get(&self, area: &str, target: &str, method: Method) -> Option<&PredictionRow> {
        self.rows
            .iter()
            .find(|r| r.area == area && r.target == target && r.method == method)
    }

    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(Self::HEADER)?;
        for r in &self.rows {
            w.write_record([
                r.area.clone(),
                r.target.clone(),
                r.method.label().to_string(),
                format!("{}", r.estimate),
                r.n.to_string(),
                r.population_size.to_string(),
                r.l.to_string(),
                r.seed.to_string(),
                r.fallback_count.to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}
