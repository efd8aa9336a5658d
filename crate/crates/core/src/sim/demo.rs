//! Synthetic erosion-style demo data: 73 areas drawn from the gamma-gamma
//! model at parameter values of the magnitude fitted to field survey data.

use rand::Rng;

use super::population::{cap_probabilities, systematic_pps};
use crate::data::{AreaFrame, SurveyData, UnitRecord};
use crate::error::Result;
use crate::gamma_gamma::{draw_responses, GammaGammaParams};
use crate::numerics::{GammaSampler, RngStream};

#[derive(Debug, Clone, PartialEq)]
pub struct DemoOptions {
    pub seed: u64,
    pub areas: usize,
    pub alpha: f64,
    pub delta: f64,
    pub gamma: Vec<f64>,
    /// Strength of the response in the selection probabilities.
    pub selection_b: f64,
}

impl Default for DemoOptions {
    fn default() -> Self {
        Self {
            seed: 20240611,
            areas: 73,
            alpha: 1.659,
            delta: 4.922,
            gamma: vec![2.183, -0.156],
            selection_b: 1.0,
        }
    }
}

/// Builds the demo data. The covariate is Gamma(2, 1) distributed, area
/// populations hold 100 to 400 units and samples 2 to 30 units, selected by
/// systematic PPS with π ∝ exp(0.05 x + b y); weights are 1/π.
pub fn demo_dataset(opts: &DemoOptions) -> Result<SurveyData> {
    let params = GammaGammaParams::new(opts.alpha, opts.delta, opts.gamma.clone())?;
    let gx = GammaSampler::new(2.0)?;
    let gy = GammaSampler::new(params.alpha)?;
    let gu = GammaSampler::new(params.delta)?;
    let mut areas = Vec::with_capacity(opts.areas);
    for i in 0..opts.areas {
        let mut rng = RngStream::new(opts.seed, i as u64).rng();
        let big_n = rng.random_range(100..=400usize);
        let n = rng.random_range(2..=30usize);
        let xs: Vec<Vec<f64>> = (0..big_n).map(|_| vec![1.0, gx.sample(&mut rng, 1.0)]).collect();
        let u = gu.sample(&mut rng, params.delta);
        let ys = draw_responses(&params, &gy, &xs, u, &mut rng);
        let e: Vec<f64> = xs
            .iter()
            .zip(&ys)
            .map(|(x, y)| (0.05 * x[1] + opts.selection_b * y.min(20.0)).exp())
            .collect();
        let total: f64 = e.iter().sum();
        let mut pi: Vec<f64> = e.iter().map(|v| n as f64 * v / total).collect();
        cap_probabilities(&mut pi, n);
        let mut idx = systematic_pps(&pi, n, &mut rng);
        idx.sort_unstable();
        let mut in_sample = vec![false; big_n];
        for &j in &idx {
            in_sample[j] = true;
        }
        let units = idx
            .iter()
            .map(|&j| UnitRecord::new(ys[j], xs[j].clone(), Some(1.0 / pi[j])))
            .collect();
        let rest = (0..big_n).filter(|&j| !in_sample[j]).map(|j| xs[j].clone()).collect();
        areas.push(AreaFrame::new(format!("{:03}", i + 1), units, rest));
    }
    SurveyData::new(areas)
}
