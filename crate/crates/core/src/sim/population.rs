//! Finite populations and within-area samples for the simulation studies.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use super::{Generator, Sampling, SimDesign};
use crate::data::{AreaFrame, SurveyData, UnitRecord};
use crate::error::Result;
use crate::numerics::{GammaSampler, RngStream};

const TAG_COVARIATES: u64 = 0x636f76;
const TAG_POPULATION: u64 = 0x706f70;
const TAG_SAMPLE: u64 = 0x736d70;

/// Covariate rows (intercept first) for every unit, fixed across replicates.
#[derive(Debug, Clone, PartialEq)]
pub struct Covariates {
    pub x: Vec<Vec<Vec<f64>>>,
}

/// One replicate's responses, aligned with [`Covariates`].
#[derive(Debug, Clone, PartialEq)]
pub struct Population {
    pub y: Vec<Vec<f64>>,
}

/// A drawn sample: the survey data plus the selected unit indices.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub data: SurveyData,
    /// Selected population indices per area, in the order of the frame.
    pub selected: Vec<Vec<usize>>,
    /// Inclusion probabilities capped at 1 across all areas.
    pub capped: usize,
}

/// x ~ U(0, 2) for every unit.
pub fn generate_covariates(design: &SimDesign) -> Covariates {
    let mut rng = RngStream::new(design.seed, TAG_COVARIATES).rng();
    let x = (0..design.d)
        .map(|_| (0..design.n_pop).map(|_| vec![1.0, rng.random_range(0.0..2.0)]).collect())
        .collect();
    Covariates { x }
}

/// Responses for replicate `m` under the design's generator.
pub fn generate_population(design: &SimDesign, cov: &Covariates, m: usize) -> Result<Population> {
    let mut rng = RngStream::new(design.seed, TAG_POPULATION).substream(m as u64).rng();
    let y = match &design.generator {
        g @ Generator::GammaGamma { .. } => {
            let p = g.gamma_gamma()?;
            let gy = GammaSampler::new(p.alpha)?;
            let gu = GammaSampler::new(p.delta)?;
            cov.x
                .iter()
                .map(|xs| {
                    let u = gu.sample(&mut rng, p.delta);
                    crate::gamma_gamma::draw_responses(&p, &gy, xs, u, &mut rng)
                })
                .collect()
        }
        g @ Generator::Glmm { .. } => {
            let p = g.glmm()?;
            let gy = GammaSampler::new(p.nu)?;
            cov.x
                .iter()
                .map(|xs| {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    crate::glmm::draw_responses(&p, &gy, xs, p.phi * z, &mut rng)
                })
                .collect()
        }
    };
    Ok(Population { y })
}

/// Caps inclusion probabilities at 1, spreading the excess over the rest
/// so the total stays at n. Returns the number of capped units.
pub(crate) fn cap_probabilities(pi: &mut [f64], n: usize) -> usize {
    let mut fixed = vec![false; pi.len()];
    loop {
        let over: Vec<usize> = (0..pi.len()).filter(|&j| !fixed[j] && pi[j] > 1.0).collect();
        if over.is_empty() {
            break;
        }
        for &j in &over {
            fixed[j] = true;
            pi[j] = 1.0;
        }
        let n_fixed = fixed.iter().filter(|f| **f).count() as f64;
        let rest: f64 = (0..pi.len()).filter(|&j| !fixed[j]).map(|j| pi[j]).sum();
        if rest <= 0.0 {
            break;
        }
        let scale = (n as f64 - n_fixed) / rest;
        for j in 0..pi.len() {
            if !fixed[j] {
                pi[j] *= scale;
            }
        }
    }
    fixed.iter().filter(|f| **f).count()
}

/// Randomized systematic PPS: shuffle the units, cumulate π and select at
/// r, r + 1, ..., r + n − 1 on the scale rescaled to total n.
pub(crate) fn systematic_pps<R: Rng + ?Sized>(pi: &[f64], n: usize, rng: &mut R) -> Vec<usize> {
    let mut order: Vec<usize> = (0..pi.len()).collect();
    order.shuffle(rng);
    let total: f64 = pi.iter().sum();
    let scale = n as f64 / total;
    let r: f64 = rng.random();
    let mut out = Vec::with_capacity(n);
    let mut cum = 0.0;
    let mut k = 0usize;
    for &j in &order {
        cum += pi[j] * scale;
        while k < n && r + (k as f64) < cum {
            out.push(j);
            k += 1;
        }
    }
    // Rounding can leave the last point just past the total.
    if k < n {
        if let Some(&j) = order.iter().rev().find(|j| !out.contains(j)) {
            out.push(j);
        }
    }
    out.dedup();
    out
}

/// Select the replicate-`m` sample.
pub fn draw_sample(design: &SimDesign, cov: &Covariates, pop: &Population, m: usize) -> Result<Sample> {
    let root = RngStream::new(design.seed, TAG_SAMPLE).substream(m as u64);
    let mut rng = root.rng();
    let mut capped = 0;
    let mut areas = Vec::with_capacity(design.d);
    let mut selected = Vec::with_capacity(design.d);
    let tau_sampler = match design.sampling {
        Sampling::InformativeSystematic { tau_delta, .. } => Some(GammaSampler::new(tau_delta)?),
        Sampling::Srswor => None,
    };
    for i in 0..design.d {
        let n = design.sample_size(i);
        let (xs, ys) = (&cov.x[i], &pop.y[i]);
        let big_n = ys.len();
        let (mut idx, weights): (Vec<usize>, Option<Vec<f64>>) = match design.sampling {
            Sampling::Srswor => (rand::seq::index::sample(&mut rng, big_n, n).into_vec(), None),
            Sampling::InformativeSystematic { a, b, tau_delta } => {
                let g = tau_sampler.as_ref().expect("tau sampler");
                let score: Vec<f64> = (0..big_n)
                    .map(|j| {
                        let tau = g.sample(&mut rng, tau_delta);
                        a * xs[j][1] + b * ys[j] + tau / 20.0
                    })
                    .collect();
                // Shift by the max before exponentiating.
                let top = score.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let e: Vec<f64> = score.iter().map(|s| (s - top).exp()).collect();
                let total: f64 = e.iter().sum();
                let mut pi: Vec<f64> = e.iter().map(|v| n as f64 * v / total).collect();
                capped += cap_probabilities(&mut pi, n);
                let idx = systematic_pps(&pi, n, &mut rng);
                let w = idx.iter().map(|&j| 1.0 / pi[j]).collect();
                (idx, Some(w))
            }
        };
        let mut order: Vec<usize> = (0..idx.len()).collect();
        order.sort_by_key(|&k| idx[k]);
        let w_sorted = weights.map(|w| order.iter().map(|&k| w[k]).collect::<Vec<f64>>());
        idx.sort_unstable();
        let mut in_sample = vec![false; big_n];
        for &j in &idx {
            in_sample[j] = true;
        }
        let units = idx
            .iter()
            .enumerate()
            .map(|(k, &j)| UnitRecord::new(ys[j], xs[j].clone(), w_sorted.as_ref().map(|w| w[k])))
            .collect();
        let rest = (0..big_n).filter(|&j| !in_sample[j]).map(|j| xs[j].clone()).collect();
        areas.push(AreaFrame::new((i + 1).to_string(), units, rest));
        selected.push(idx);
    }
    Ok(Sample {
        data: SurveyData::new(areas)?,
        selected,
        capped,
    })
}
