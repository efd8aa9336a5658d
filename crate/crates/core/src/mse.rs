//! MSE estimation for the gamma-gamma EB predictor: leading term plus
//! bootstrap parameter-uncertainty term with bias corrections, and the
//! single and simplified double parametric bootstrap.

use std::collections::BTreeMap;
use std::fmt;
use std::io::Write;
use std::str::FromStr;

use rayon::prelude::*;

use crate::data::SurveyData;
use crate::error::{Error, Result};
use crate::gamma_gamma::{area_stream, draw_responses, eb_predict_many, fit_from, FitResult, GammaGammaParams};
use crate::numerics::{GammaSampler, OptimizerConfig, RngStream};
use crate::targets::TargetParameter;

/// Stream tags keeping bootstrap data generation apart from prediction draws.
const TAG_M2: u64 = 0x6d32;
const TAG_DIRECT: u64 = 0x6462;

/// Largest fraction of bootstrap replicates allowed to fail refitting.
pub const MAX_DROP_FRACTION: f64 = 0.2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum MseVariant {
    NoBc,
    Add,
    Mult,
    Hm,
    Comp,
    S,
    D,
}

impl MseVariant {
    pub const ALL: [MseVariant; 7] = [
        MseVariant::NoBc,
        MseVariant::Add,
        MseVariant::Mult,
        MseVariant::Hm,
        MseVariant::Comp,
        MseVariant::S,
        MseVariant::D,
    ];

    pub fn label(self) -> &'static str {
        match self {
            MseVariant::NoBc => "noBC",
            MseVariant::Add => "Add",
            MseVariant::Mult => "Mult",
            MseVariant::Hm => "HM",
            MseVariant::Comp => "Comp",
            MseVariant::S => "S",
            MseVariant::D => "D",
        }
    }

    /// Variants that need the full-population bootstrap.
    pub fn needs_direct(self) -> bool {
        matches!(self, MseVariant::S | MseVariant::D)
    }

    /// Variants whose value can be negative.
    pub fn may_be_negative(self) -> bool {
        matches!(self, MseVariant::Add | MseVariant::D)
    }
}

impl fmt::Display for MseVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

impl FromStr for MseVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let t = s.trim();
        MseVariant::ALL
            .into_iter()
            .find(|v| v.label().eq_ignore_ascii_case(t))
            .ok_or_else(|| Error::Domain(format!("unknown MSE variant `{s}`")))
    }
}

/// (L − 1)⁻¹ Σ (θ^(ℓ) − point)².
pub fn leading_term(draws: &[f64], point: f64) -> Result<f64> {
    if draws.len() < 2 {
        return Err(Error::Domain(format!(
            "leading term needs at least 2 Monte Carlo draws, got {}",
            draws.len()
        )));
    }
    let ss: f64 = draws.iter().map(|d| (d - point).powi(2)).sum();
    Ok(ss / (draws.len() - 1) as f64)
}

/// Mean of (v − center)².
pub fn mean_squared_deviation(values: &[f64], center: f64) -> f64 {
    values.iter().map(|v| (v - center).powi(2)).sum::<f64>() / values.len() as f64
}

/// The four corrections of the raw leading term.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Corrections {
    pub add: f64,
    pub mult: f64,
    pub hm: f64,
    pub comp: f64,
}

pub fn bias_corrections(m1_raw: f64, m1_boot_mean: f64) -> Result<Corrections> {
    if m1_boot_mean == 0.0 {
        if m1_raw > 0.0 {
            return Err(Error::Correction { m1_raw });
        }
        return Ok(Corrections {
            add: 0.0,
            mult: 0.0,
            hm: 0.0,
            comp: 0.0,
        });
    }
    let add = 2.0 * m1_raw - m1_boot_mean;
    let mult = m1_raw * m1_raw / m1_boot_mean;
    let (hm, comp) = if m1_raw >= m1_boot_mean {
        (add, add)
    } else {
        (m1_raw * (-(m1_boot_mean - m1_raw) / m1_boot_mean).exp(), mult)
    };
    Ok(Corrections { add, mult, hm, comp })
}

/// Bootstrap pieces for one area and target.
#[derive(Debug, Clone, PartialEq)]
pub struct M2Piece {
    pub m2: f64,
    pub m1_boot_mean: f64,
    pub m1_boot: Vec<f64>,
}

/// Output of the parameter-uncertainty bootstrap, indexed `[area][target]`.
#[derive(Debug, Clone, PartialEq)]
pub struct BootstrapM2 {
    pub pieces: Vec<Vec<M2Piece>>,
    pub replicates: usize,
    pub dropped: usize,
}

/// S and D for one area and target.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DirectPiece {
    pub s: f64,
    pub d: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BootstrapDirect {
    pub pieces: Vec<Vec<DirectPiece>>,
    pub replicates: usize,
    pub dropped: usize,
}

fn check_drops(dropped: usize, total: usize) -> Result<()> {
    if dropped as f64 > MAX_DROP_FRACTION * total as f64 || dropped == total {
        return Err(Error::Estimator(format!(
            "{dropped} of {total} bootstrap replicates failed to refit (cap {:.0}%)",
            100.0 * MAX_DROP_FRACTION
        )));
    }
    Ok(())
}

/// Draws y for every sampled unit from the model (one u per area).
fn simulate_sample(params: &GammaGammaParams, data: &SurveyData, stream: &RngStream) -> Result<SurveyData> {
    let g = GammaSampler::new(params.alpha)?;
    let gu = GammaSampler::new(params.delta)?;
    let mut rng = stream.rng();
    let ys: Vec<Vec<f64>> = data
        .areas
        .iter()
        .map(|a| {
            let u = gu.sample(&mut rng, params.delta);
            let xs: Vec<Vec<f64>> = a.sampled_units.iter().map(|s| s.x.clone()).collect();
            draw_responses(params, &g, &xs, u, &mut rng)
        })
        .collect();
    Ok(data.with_sampled_y(&ys))
}

/// Draws a full population per area (sampled positions first); returns the
/// bootstrap sample and each area's population values.
fn simulate_population(
    params: &GammaGammaParams,
    data: &SurveyData,
    stream: &RngStream,
) -> Result<(SurveyData, Vec<Vec<f64>>)> {
    let g = GammaSampler::new(params.alpha)?;
    let gu = GammaSampler::new(params.delta)?;
    let mut rng = stream.rng();
    let pops: Vec<Vec<f64>> = data
        .areas
        .iter()
        .map(|a| {
            let u = gu.sample(&mut rng, params.delta);
            let xs: Vec<Vec<f64>> = a
                .sampled_units
                .iter()
                .map(|s| s.x.clone())
                .chain(a.nonsampled_covariates.iter().cloned())
                .collect();
            draw_responses(params, &g, &xs, u, &mut rng)
        })
        .collect();
    let ys: Vec<Vec<f64>> = data.areas.iter().zip(&pops).map(|(a, p)| p[..a.n()].to_vec()).collect();
    Ok((data.with_sampled_y(&ys), pops))
}

/// Warm-started refit; `None` when the refit fails or does not converge.
pub fn default_refit(config: &OptimizerConfig) -> impl Fn(&SurveyData, &GammaGammaParams) -> Option<GammaGammaParams> + Sync + '_ {
    move |d, start| match fit_from(d, start, config) {
        Ok(f) if f.converged => Some(f.params),
        _ => None,
    }
}

/// EB points and leading terms for all areas and targets at `params`, using
/// the prediction streams of `seed`.
fn eb_points(
    params: &GammaGammaParams,
    data: &SurveyData,
    targets: &[TargetParameter],
    l: usize,
    seed: u64,
) -> Result<Vec<Vec<(f64, f64)>>> {
    data.areas
        .iter()
        .enumerate()
        .map(|(i, a)| {
            eb_predict_many(params, a, targets, l, &area_stream(seed, i))?
                .into_iter()
                .map(|p| Ok((p.point, leading_term(&p.draws, p.point)?)))
                .collect()
        })
        .collect()
}

/// Parameter-uncertainty bootstrap with the default warm-started refit.
pub fn bootstrap_m2(
    data: &SurveyData,
    fit: &FitResult,
    targets: &[TargetParameter],
    b: usize,
    l: usize,
    seed: u64,
    config: &OptimizerConfig,
) -> Result<BootstrapM2> {
    bootstrap_m2_with(data, fit, targets, b, l, seed, default_refit(config))
}

/// Replicate b simulates the sampled responses at ψ̂, refits with `refit`,
/// and re-predicts on the original data at ψ̂*^(b). Prediction draws reuse
/// the streams of the original predictor.
pub fn bootstrap_m2_with<F>(
    data: &SurveyData,
    fit: &FitResult,
    targets: &[TargetParameter],
    b: usize,
    l: usize,
    seed: u64,
    refit: F,
) -> Result<BootstrapM2>
where
    F: Fn(&SurveyData, &GammaGammaParams) -> Option<GammaGammaParams> + Sync,
{
    if b < 2 {
        return Err(Error::Domain(format!("bootstrap size B must be at least 2, got {b}")));
    }
    let psi = &fit.params;
    let base = eb_points(psi, data, targets, l, seed)?;
    let root = RngStream::new(seed, TAG_M2);
    let reps: Vec<Option<Vec<Vec<(f64, f64)>>>> = (0..b)
        .into_par_iter()
        .map(|r| {
            let boot = simulate_sample(psi, data, &root.substream(r as u64))?;
            match refit(&boot, psi) {
                Some(p) => eb_points(&p, data, targets, l, seed).map(Some),
                None => Ok(None),
            }
        })
        .collect::<Result<_>>()?;
    let ok: Vec<&Vec<Vec<(f64, f64)>>> = reps.iter().flatten().collect();
    let dropped = b - ok.len();
    check_drops(dropped, b)?;
    let pieces = base
        .iter()
        .enumerate()
        .map(|(i, row)| {
            row.iter()
                .enumerate()
                .map(|(k, &(point, _))| {
                    let thetas: Vec<f64> = ok.iter().map(|r| r[i][k].0).collect();
                    let m1_boot: Vec<f64> = ok.iter().map(|r| r[i][k].1).collect();
                    M2Piece {
                        m2: mean_squared_deviation(&thetas, point),
                        m1_boot_mean: m1_boot.iter().sum::<f64>() / m1_boot.len() as f64,
                        m1_boot,
                    }
                })
                .collect()
        })
        .collect();
    Ok(BootstrapM2 {
        pieces,
        replicates: ok.len(),
        dropped,
    })
}

/// S = mean of first-stage squared errors; D = 2S − mean of second-stage ones.
pub fn single_and_double(first: &[f64], second: &[f64]) -> DirectPiece {
    let s = first.iter().sum::<f64>() / first.len() as f64;
    let m2 = second.iter().sum::<f64>() / second.len() as f64;
    DirectPiece { s, d: 2.0 * s - m2 }
}

/// One bootstrap world: population at `params`, sample, refit, EB on the
/// bootstrap sample. Returns squared errors `[area][target]` and the refitted
/// parameters, or `None` when the refit fails.
fn bootstrap_world<F>(
    params: &GammaGammaParams,
    data: &SurveyData,
    targets: &[TargetParameter],
    l: usize,
    seed: u64,
    stream: &RngStream,
    refit: &F,
) -> Result<Option<(Vec<Vec<f64>>, GammaGammaParams)>>
where
    F: Fn(&SurveyData, &GammaGammaParams) -> Option<GammaGammaParams> + Sync,
{
    let (boot, pops) = simulate_population(params, data, stream)?;
    let Some(p) = refit(&boot, params) else {
        return Ok(None);
    };
    let pred_seed = stream.substream(u64::MAX).seed ^ seed;
    let preds = eb_points(&p, &boot, targets, l, pred_seed)?;
    let errs = preds
        .iter()
        .zip(&pops)
        .map(|(row, pop)| {
            row.iter()
                .zip(targets)
                .map(|(&(est, _), t)| Ok((est - t.evaluate(pop)?).powi(2)))
                .collect::<Result<Vec<f64>>>()
        })
        .collect::<Result<_>>()?;
    Ok(Some((errs, p)))
}

/// Single (S) and simplified double (D) bootstrap MSE: B1 first-stage
/// populations at ψ̂, each followed by B2 second-stage populations at ψ̂*.
#[allow(clippy::too_many_arguments)]
pub fn bootstrap_direct(
    data: &SurveyData,
    fit: &FitResult,
    targets: &[TargetParameter],
    b1: usize,
    b2: usize,
    l: usize,
    seed: u64,
    config: &OptimizerConfig,
) -> Result<BootstrapDirect> {
    bootstrap_direct_with(data, fit, targets, b1, b2, l, seed, default_refit(config))
}

#[allow(clippy::too_many_arguments)]
pub fn bootstrap_direct_with<F>(
    data: &SurveyData,
    fit: &FitResult,
    targets: &[TargetParameter],
    b1: usize,
    b2: usize,
    l: usize,
    seed: u64,
    refit: F,
) -> Result<BootstrapDirect>
where
    F: Fn(&SurveyData, &GammaGammaParams) -> Option<GammaGammaParams> + Sync,
{
    if b1 < 2 || b2 == 0 {
        return Err(Error::Domain(format!("bootstrap sizes need B1 >= 2 and B2 >= 1, got {b1}, {b2}")));
    }
    let root = RngStream::new(seed, TAG_DIRECT);
    type Stage = (Vec<Vec<f64>>, Vec<Vec<f64>>);
    let reps: Vec<Option<Stage>> = (0..b1)
        .into_par_iter()
        .map(|r| {
            let s1 = root.path(&[r as u64, 0]);
            let Some((first, p)) = bootstrap_world(&fit.params, data, targets, l, seed, &s1, &refit)? else {
                return Ok(None);
            };
            let mut acc = vec![vec![0.0; targets.len()]; data.num_areas()];
            let mut got = 0usize;
            for k in 0..b2 {
                let s2 = root.path(&[r as u64, 1 + k as u64]);
                if let Some((second, _)) = bootstrap_world(&p, data, targets, l, seed, &s2, &refit)? {
                    for (a, s) in acc.iter_mut().zip(second) {
                        for (x, v) in a.iter_mut().zip(s) {
                            *x += v;
                        }
                    }
                    got += 1;
                }
            }
            if got == 0 {
                return Ok(None);
            }
            for a in acc.iter_mut() {
                for x in a.iter_mut() {
                    *x /= got as f64;
                }
            }
            Ok(Some((first, acc)))
        })
        .collect::<Result<_>>()?;
    let ok: Vec<&Stage> = reps.iter().flatten().collect();
    let dropped = b1 - ok.len();
    check_drops(dropped, b1)?;
    let pieces = (0..data.num_areas())
        .map(|i| {
            (0..targets.len())
                .map(|k| {
                    let first: Vec<f64> = ok.iter().map(|s| s.0[i][k]).collect();
                    let second: Vec<f64> = ok.iter().map(|s| s.1[i][k]).collect();
                    single_and_double(&first, &second)
                })
                .collect()
        })
        .collect();
    Ok(BootstrapDirect {
        pieces,
        replicates: ok.len(),
        dropped,
    })
}

/// MSE estimates for one area and target.
#[derive(Debug, Clone, PartialEq)]
pub struct MseEstimate {
    pub area: String,
    pub target: String,
    pub point: f64,
    pub m1_raw: f64,
    pub m2: f64,
    pub m1_boot_mean: f64,
    pub variants: BTreeMap<MseVariant, f64>,
}

impl MseEstimate {
    pub fn get(&self, v: MseVariant) -> Option<f64> {
        self.variants.get(&v).copied()
    }
}

/// Combine the pieces: noBC = M̂₁ + M̂₂ and each corrected M̂₁ plus M̂₂.
pub fn assemble(
    area: &str,
    target: &str,
    point: f64,
    m1_raw: f64,
    m2: &M2Piece,
    direct: Option<DirectPiece>,
) -> Result<MseEstimate> {
    let c = bias_corrections(m1_raw, m2.m1_boot_mean)?;
    let mut variants = BTreeMap::new();
    variants.insert(MseVariant::NoBc, m1_raw + m2.m2);
    variants.insert(MseVariant::Add, c.add + m2.m2);
    variants.insert(MseVariant::Mult, c.mult + m2.m2);
    variants.insert(MseVariant::Hm, c.hm + m2.m2);
    variants.insert(MseVariant::Comp, c.comp + m2.m2);
    if let Some(d) = direct {
        variants.insert(MseVariant::S, d.s);
        variants.insert(MseVariant::D, d.d);
    }
    Ok(MseEstimate {
        area: area.to_string(),
        target: target.to_string(),
        point,
        m1_raw,
        m2: m2.m2,
        m1_boot_mean: m2.m1_boot_mean,
        variants,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MseConfig {
    pub b: usize,
    pub b1: usize,
    pub b2: usize,
    pub l: usize,
    pub seed: u64,
    /// Run the full-population bootstrap for S and D.
    pub direct: bool,
}

impl Default for MseConfig {
    fn default() -> Self {
        Self {
            b: 100,
            b1: 100,
            b2: 1,
            l: 100,
            seed: 1,
            direct: false,
        }
    }
}

/// Full MSE table for every area and target. The EB points use the same
/// streams as [`crate::gamma_gamma::eb_table`] with `cfg.seed`.
pub fn mse_table(
    data: &SurveyData,
    fit: &FitResult,
    targets: &[TargetParameter],
    cfg: &MseConfig,
    optimizer: &OptimizerConfig,
) -> Result<Vec<MseEstimate>> {
    let base = eb_points(&fit.params, data, targets, cfg.l, cfg.seed)?;
    let m2 = bootstrap_m2(data, fit, targets, cfg.b, cfg.l, cfg.seed, optimizer)?;
    let direct = if cfg.direct {
        Some(bootstrap_direct(data, fit, targets, cfg.b1, cfg.b2, cfg.l, cfg.seed, optimizer)?)
    } else {
        None
    };
    let mut out = Vec::with_capacity(data.num_areas() * targets.len());
    for (i, a) in data.areas.iter().enumerate() {
        for (k, t) in targets.iter().enumerate() {
            let (point, m1) = base[i][k];
            let d = direct.as_ref().map(|d| d.pieces[i][k]);
            out.push(assemble(&a.area_id, &t.label, point, m1, &m2.pieces[i][k], d).map_err(|e| e.in_area(&a.area_id))?);
        }
    }
    Ok(out)
}

pub const MSE_HEADER: [&str; 8] = ["area", "target", "variant", "estimate", "m1_raw", "m1_boot_mean", "m2", "flag"];

/// Writes the requested variants; negative values are kept and flagged.
pub fn write_mse_csv<W: Write>(estimates: &[MseEstimate], variants: &[MseVariant], writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(MSE_HEADER)?;
    for e in estimates {
        for v in variants {
            let Some(val) = e.get(*v) else { continue };
            w.write_record([
                e.area.clone(),
                e.target.clone(),
                v.label().to_string(),
                format!("{val}"),
                format!("{}", e.m1_raw),
                format!("{}", e.m1_boot_mean),
                format!("{}", e.m2),
                if val < 0.0 { "negative".into() } else { String::new() },
            ])?;
        }
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{AreaFrame, UnitRecord};
    use crate::gamma_gamma::{eb_predict, fit, posterior_u};
    use crate::testutil::mean_se;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};

    #[test]
    fn leading_term_arithmetic() {
        assert_eq!(leading_term(&[1.0, 3.0], 2.0).unwrap(), 2.0);
        assert_eq!(leading_term(&[4.0; 5], 4.0).unwrap(), 0.0);
        assert!(leading_term(&[1.0], 1.0).is_err());
    }

    #[test]
    fn m2_arithmetic() {
        assert_eq!(mean_squared_deviation(&[4.0, 2.0], 3.0), 1.0);
    }

    #[test]
    fn correction_branches() {
        let up = bias_corrections(2.0, 1.5).unwrap();
        assert_eq!(up.add, 2.5);
        assert_eq!(up.hm, 2.5);
        assert_eq!(up.comp, 2.5);
        assert!((up.mult - 8.0 / 3.0).abs() < 1e-15);
        let lo = bias_corrections(1.0, 2.0).unwrap();
        assert_eq!(lo.add, 0.0);
        assert_eq!(lo.mult, 0.5);
        assert!((lo.hm - (-0.5f64).exp()).abs() < 1e-15);
        assert!((lo.hm - 0.6065306597).abs() < 1e-9);
        assert_eq!(lo.comp, 0.5);
        let eq = bias_corrections(1.7, 1.7).unwrap();
        for v in [eq.add, eq.mult, eq.hm, eq.comp] {
            assert!((v - 1.7).abs() < 1e-15);
        }
        assert!(matches!(bias_corrections(1.0, 0.0), Err(Error::Correction { .. })));
    }

    #[test]
    fn direct_arithmetic() {
        let p = single_and_double(&[4.0, 2.0], &[2.0, 2.0]);
        assert_eq!(p.s, 3.0);
        assert_eq!(p.d, 4.0);
    }

    #[test]
    fn assembly() {
        let piece = |m1b: f64| M2Piece {
            m2: 1.0,
            m1_boot_mean: m1b,
            m1_boot: vec![],
        };
        let e = assemble("a", "mean", 0.0, 2.0, &piece(2.0), None).unwrap();
        assert_eq!(e.get(MseVariant::NoBc), Some(3.0));
        assert_eq!(e.get(MseVariant::S), None);
        let lo = assemble("a", "mean", 0.0, 1.0, &piece(2.0), Some(DirectPiece { s: 3.0, d: -1.0 })).unwrap();
        assert!((lo.get(MseVariant::Hm).unwrap() - 1.6065306597).abs() < 1e-9);
        assert_eq!(lo.get(MseVariant::Comp), Some(1.5));
        assert_eq!(lo.get(MseVariant::D), Some(-1.0));
        let mut buf = Vec::new();
        write_mse_csv(&[lo], &[MseVariant::NoBc, MseVariant::D], &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(
            text,
            "area,target,variant,estimate,m1_raw,m1_boot_mean,m2,flag\na,mean,noBC,2,1,2,1,\na,mean,D,-1,1,2,1,negative\n"
        );
    }

    proptest! {
        #[test]
        fn corrections_nonnegative(m1 in 0.0f64..10.0, m1b in 1e-6f64..10.0, m2 in 0.0f64..5.0) {
            let c = bias_corrections(m1, m1b).unwrap();
            prop_assert!(c.hm >= 0.0 && c.comp >= 0.0 && c.mult >= 0.0);
            if m1 >= m1b {
                prop_assert_eq!(c.hm, c.comp);
            }
            let e = assemble("a", "t", 0.0, m1, &M2Piece { m2, m1_boot_mean: m1b, m1_boot: vec![] }, None).unwrap();
            prop_assert_eq!(e.get(MseVariant::NoBc).unwrap(), m1 + m2);
            prop_assert!(e.get(MseVariant::NoBc).unwrap() >= m2);
        }
    }

    fn sample_data(params: &GammaGammaParams, d: usize, n: usize, n_pop: usize, seed: u64) -> SurveyData {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let g = GammaSampler::new(params.alpha).unwrap();
        let gu = GammaSampler::new(params.delta).unwrap();
        let areas = (0..d)
            .map(|i| {
                let u = gu.sample(&mut rng, params.delta);
                let xs: Vec<Vec<f64>> = (0..n_pop).map(|_| vec![1.0, rng.random_range(0.0..2.0)]).collect();
                let ys = draw_responses(params, &g, &xs, u, &mut rng);
                let s = (0..n).map(|j| UnitRecord::new(ys[j], xs[j].clone(), None)).collect();
                AreaFrame::new(i.to_string(), s, xs[n..].to_vec())
            })
            .collect();
        SurveyData::new(areas).unwrap()
    }

    #[test]
    fn leading_term_matches_posterior_variance_of_mean() {
        let params = GammaGammaParams::new(1.3, 4.0, vec![1.0, 0.5]).unwrap();
        let data = sample_data(&params, 1, 6, 20, 4);
        let area = &data.areas[0];
        let post = posterior_u(&params, area);
        let (a, r) = (post.shape, post.rate);
        let e_inv = r / (a - 1.0);
        let e_inv2 = r * r / ((a - 1.0) * (a - 2.0));
        let e: Vec<f64> = area.nonsampled_covariates.iter().map(|x| params.linpred(x).exp()).collect();
        let sum_mean: f64 = e.iter().map(|v| params.alpha / v).sum();
        let sum_var: f64 = e.iter().map(|v| params.alpha / (v * v)).sum();
        let n_pop = area.population_size() as f64;
        let exact = (sum_mean * sum_mean * (e_inv2 - e_inv * e_inv) + sum_var * e_inv2) / (n_pop * n_pop);
        let l = 200_000;
        let p = eb_predict(&params, area, &TargetParameter::mean(), l, &RngStream::new(9, 0)).unwrap();
        let m1 = leading_term(&p.draws, p.point).unwrap();
        // SE of a sample variance from the fourth central moment.
        let m4 = p.draws.iter().map(|d| (d - p.point).powi(4)).sum::<f64>() / l as f64;
        let se = ((m4 - m1 * m1) / l as f64).sqrt();
        assert!((m1 - exact).abs() < 3.0 * se, "{m1} vs {exact} (se {se})");
    }

    #[test]
    fn leading_term_stable_in_l() {
        let params = GammaGammaParams::new(1.0, 4.0, vec![1.0, 0.5]).unwrap();
        let data = sample_data(&params, 1, 10, 100, 5);
        let area = &data.areas[0];
        let t = TargetParameter::mean();
        let reps = |l: usize, base: u64| -> Vec<f64> {
            (0..30)
                .map(|k| {
                    let p = eb_predict(&params, area, &t, l, &RngStream::new(base, k)).unwrap();
                    leading_term(&p.draws, p.point).unwrap()
                })
                .collect()
        };
        let (a, sa) = mean_se(&reps(500, 1));
        let (b, sb) = mean_se(&reps(1000, 2));
        assert!((a - b).abs() < 3.0 * (sa * sa + sb * sb).sqrt());
    }

    #[test]
    fn frozen_parameters_give_zero_m2() {
        let params = GammaGammaParams::new(1.0, 4.0, vec![1.0, 0.5]).unwrap();
        let data = sample_data(&params, 4, 5, 20, 6);
        let f = FitResult {
            params: params.clone(),
            loglik: 0.0,
            converged: true,
            iterations: 0,
        };
        let targets = TargetParameter::study_set();
        let out = bootstrap_m2_with(&data, &f, &targets, 5, 50, 3, |_, p| Some(p.clone())).unwrap();
        assert_eq!(out.replicates, 5);
        for area in &out.pieces {
            for piece in area {
                assert_eq!(piece.m2, 0.0);
                assert_eq!(piece.m1_boot.len(), 5);
            }
        }
    }

    #[test]
    fn too_many_failed_refits_is_an_error() {
        let params = GammaGammaParams::new(1.0, 4.0, vec![1.0, 0.5]).unwrap();
        let data = sample_data(&params, 3, 5, 10, 7);
        let f = FitResult {
            params,
            loglik: 0.0,
            converged: true,
            iterations: 0,
        };
        let t = [TargetParameter::mean()];
        let calls = std::sync::atomic::AtomicUsize::new(0);
        // One failure in ten is tolerated.
        let r = bootstrap_m2_with(&data, &f, &t, 10, 10, 1, |_, p| {
            (calls.fetch_add(1, std::sync::atomic::Ordering::SeqCst) != 0).then(|| p.clone())
        })
        .unwrap();
        assert_eq!(r.dropped, 1);
        assert!(bootstrap_m2_with(&data, &f, &t, 10, 10, 1, |_, _| None).is_err());
        assert!(bootstrap_m2_with(&data, &f, &t, 1, 10, 1, |_, p| Some(p.clone())).is_err());
    }

    #[test]
    fn bootstrap_is_reproducible_and_thread_invariant() {
        let params = GammaGammaParams::new(1.0, 4.0, vec![1.0, 0.5]).unwrap();
        let data = sample_data(&params, 6, 6, 15, 8);
        let cfg = OptimizerConfig::default();
        let f = fit(&data, &cfg).unwrap();
        let t = TargetParameter::study_set();
        let run = |threads: usize| {
            let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap();
            pool.install(|| {
                let m = bootstrap_m2(&data, &f, &t, 4, 20, 11, &cfg).unwrap();
                let d = bootstrap_direct(&data, &f, &t, 3, 1, 20, 11, &cfg).unwrap();
                (m, d)
            })
        };
        let a = run(1);
        let b = run(3);
        assert_eq!(a, b);
        for row in &a.1.pieces {
            for p in row {
                assert!(p.s >= 0.0 && p.s.is_finite() && p.d.is_finite());
            }
        }
    }

    #[test]
    fn full_table_has_every_variant() {
        let params = GammaGammaParams::new(1.0, 4.0, vec![1.0, 0.5]).unwrap();
        let data = sample_data(&params, 5, 6, 12, 9);
        let opt = OptimizerConfig::default();
        let f = fit(&data, &opt).unwrap();
        let cfg = MseConfig {
            b: 4,
            b1: 3,
            b2: 1,
            l: 20,
            seed: 2,
            direct: true,
        };
        let t = [TargetParameter::mean(), TargetParameter::gini()];
        let est = mse_table(&data, &f, &t, &cfg, &opt).unwrap();
        assert_eq!(est.len(), 10);
        let table = crate::gamma_gamma::eb_table(&f.params, &data, &t, 20, 2).unwrap();
        for e in &est {
            assert_eq!(e.variants.len(), 7);
            assert!(e.get(MseVariant::Hm).unwrap() >= 0.0);
            let row = table.get(&e.area, &e.target, crate::table::Method::Eb).unwrap();
            assert_eq!(row.estimate, e.point);
        }
    }
}
