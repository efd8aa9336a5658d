//! The replicate loop and the evaluation metrics.

use std::collections::BTreeMap;
use std::io::Write;

use rayon::prelude::*;

use super::population::{draw_sample, generate_covariates, generate_population};
use super::SimDesign;
use crate::data::SurveyData;
use crate::error::{Error, Result};
use crate::gamma_gamma::{self, area_stream, eb_predict_many, predict_mean_closed, FitResult};
use crate::glmm::{self, GlmmFit};
use crate::informative::{eb_predict_info_many, fit_informative, InfoOptions, InformativeModel};
use crate::mse::{leading_term, mse_table, MseConfig, MseVariant};
use crate::numerics::{OptimizerConfig, RngStream};
use crate::table::Method;
use crate::targets::direct_estimate;

const TAG_PREDICT: u64 = 0x707264;
const TAG_BP: u64 = 0x6270;
/// Replicates evaluated together before folding into the accumulator.
const CHUNK: usize = 32;
/// Share of failed replicates that aborts a study.
pub const MAX_FAILURE_FRACTION: f64 = 0.05;

/// MSE quantities of one replicate, indexed `[area][target]`.
#[derive(Debug, Clone, PartialEq)]
pub struct MseReplicate {
    pub estimates: BTreeMap<MseVariant, Vec<Vec<f64>>>,
    /// EB point the MSE estimates refer to.
    pub eb: Vec<Vec<f64>>,
    /// Best predictor at the true parameters.
    pub bp: Vec<Vec<f64>>,
    pub m1_hat: Vec<Vec<f64>>,
    pub m1_true: Vec<Vec<f64>>,
}

/// Everything one replicate contributes, indexed `[area][target]`. A NaN
/// estimate marks a method that does not apply to that target.
#[derive(Debug, Clone, PartialEq)]
pub struct Replicate {
    pub truth: Vec<Vec<f64>>,
    pub estimates: BTreeMap<Method, Vec<Vec<f64>>>,
    pub mse: Option<MseReplicate>,
    pub capped: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricRow {
    /// Sample size of the stratum, or "all".
    pub stratum_n: String,
    pub target: String,
    pub method: Method,
    pub rb_pct: f64,
    pub rrmse_pct: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MseMetricRow {
    pub target: String,
    pub variant: MseVariant,
    pub rb_uncond_pct: f64,
    pub rb_cond_pct: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct MetricTable {
    pub rows: Vec<MetricRow>,
    pub mse_rows: Vec<MseMetricRow>,
    /// (target, T^Bias).
    pub t_bias: Vec<(String, f64)>,
    pub replicates: usize,
    pub failures: Vec<String>,
    /// Inclusion probabilities capped at 1, summed over replicates.
    pub capped: usize,
}

impl MetricTable {
    pub fn get(&self, stratum_n: &str, target: &str, method: Method) -> Option<&MetricRow> {
        self.rows
            .iter()
            .find(|r| r.stratum_n == stratum_n && r.target == target && r.method == method)
    }

    pub fn mse(&self, target: &str, variant: MseVariant) -> Option<&MseMetricRow> {
        self.mse_rows.iter().find(|r| r.target == target && r.variant == variant)
    }

    pub fn t_bias_for(&self, target: &str) -> Option<f64> {
        self.t_bias.iter().find(|(t, _)| t == target).map(|(_, v)| *v)
    }

    pub fn write_metrics_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["stratum_n", "target", "method", "rb_pct", "rrmse_pct"])?;
        for r in &self.rows {
            w.write_record([
                r.stratum_n.clone(),
                r.target.clone(),
                r.method.label().to_string(),
                r.rb_pct.to_string(),
                r.rrmse_pct.to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn write_mse_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["target", "variant", "rb_uncond_pct", "rb_cond_pct"])?;
        for r in &self.mse_rows {
            w.write_record([
                r.target.clone(),
                r.variant.label().to_string(),
                r.rb_uncond_pct.to_string(),
                r.rb_cond_pct.to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn write_t_bias_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["target", "t_bias"])?;
        for (t, v) in &self.t_bias {
            w.write_record([t.clone(), v.to_string()])?;
        }
        w.flush()?;
        Ok(())
    }
}

#[derive(Debug, Clone, Default)]
struct Cell {
    err: f64,
    sq: f64,
    truth: f64,
    count: usize,
}

#[derive(Debug, Clone, Default)]
struct MseSums {
    est: BTreeMap<MseVariant, f64>,
    /// Σ (EB − θ)², Σ (BP − θ)², Σ (EB − BP)².
    eb_sq: f64,
    bp_sq: f64,
    gap_sq: f64,
    count: usize,
    /// ω^(m) per replicate.
    omega: Vec<f64>,
}

/// Running sums for the metrics, fed one replicate at a time in order.
#[derive(Debug, Clone)]
pub struct StudyAccumulator {
    targets: Vec<String>,
    sample_sizes: Vec<usize>,
    cells: BTreeMap<Method, Vec<Vec<Cell>>>,
    mse: Vec<MseSums>,
    replicates: usize,
    capped: usize,
}

impl StudyAccumulator {
    pub fn new(design: &SimDesign) -> Self {
        Self {
            targets: design.targets.iter().map(|t| t.label.clone()).collect(),
            sample_sizes: (0..design.d).map(|i| design.sample_size(i)).collect(),
            cells: BTreeMap::new(),
            mse: vec![MseSums::default(); design.targets.len()],
            replicates: 0,
            capped: 0,
        }
    }

    pub fn add(&mut self, rep: &Replicate) {
        let (d, k) = (self.sample_sizes.len(), self.targets.len());
        for (method, est) in &rep.estimates {
            let cells = self
                .cells
                .entry(*method)
                .or_insert_with(|| vec![vec![Cell::default(); k]; d]);
            for i in 0..d {
                for t in 0..k {
                    let e = est[i][t];
                    if e.is_nan() {
                        continue;
                    }
                    let c = &mut cells[i][t];
                    let diff = e - rep.truth[i][t];
                    c.err += diff;
                    c.sq += diff * diff;
                    c.truth += rep.truth[i][t];
                    c.count += 1;
                }
            }
        }
        if let Some(m) = &rep.mse {
            for t in 0..k {
                let s = &mut self.mse[t];
                let mut omega = 0.0;
                for i in 0..d {
                    for (v, vals) in &m.estimates {
                        *s.est.entry(*v).or_insert(0.0) += vals[i][t];
                    }
                    let theta = rep.truth[i][t];
                    s.eb_sq += (m.eb[i][t] - theta).powi(2);
                    s.bp_sq += (m.bp[i][t] - theta).powi(2);
                    s.gap_sq += (m.eb[i][t] - m.bp[i][t]).powi(2);
                    omega += m.m1_hat[i][t] - m.m1_true[i][t];
                }
                s.count += d;
                s.omega.push(omega / d as f64);
            }
        }
        self.capped += rep.capped;
        self.replicates += 1;
    }

    pub fn finish(&self) -> MetricTable {
        let mut strata: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
        for (i, n) in self.sample_sizes.iter().enumerate() {
            strata.entry(*n).or_default().push(i);
        }
        let mut groups: Vec<(String, Vec<usize>)> = strata.into_iter().map(|(n, v)| (n.to_string(), v)).collect();
        groups.push(("all".into(), (0..self.sample_sizes.len()).collect()));

        let mut rows = Vec::new();
        for (method, cells) in &self.cells {
            for (t, label) in self.targets.iter().enumerate() {
                for (name, areas) in &groups {
                    let per_area: Vec<(f64, f64)> = areas
                        .iter()
                        .map(|&i| &cells[i][t])
                        .filter(|c| c.count > 0)
                        .map(|c| {
                            let n = c.count as f64;
                            let mean_truth = c.truth / n;
                            (c.err / n / mean_truth, (c.sq / n).sqrt() / mean_truth)
                        })
                        .collect();
                    if per_area.is_empty() {
                        continue;
                    }
                    let a = per_area.len() as f64;
                    rows.push(MetricRow {
                        stratum_n: name.clone(),
                        target: label.clone(),
                        method: *method,
                        rb_pct: 100.0 * per_area.iter().map(|p| p.0).sum::<f64>() / a,
                        rrmse_pct: 100.0 * per_area.iter().map(|p| p.1).sum::<f64>() / a,
                    });
                }
            }
        }

        let mut mse_rows = Vec::new();
        let mut t_bias = Vec::new();
        for (t, label) in self.targets.iter().enumerate() {
            let s = &self.mse[t];
            if s.count == 0 {
                continue;
            }
            let n = s.count as f64;
            let uncond = s.eb_sq / n;
            let cond = (s.bp_sq + s.gap_sq) / n;
            for (v, sum) in &s.est {
                let mean = sum / n;
                mse_rows.push(MseMetricRow {
                    target: label.clone(),
                    variant: *v,
                    rb_uncond_pct: 100.0 * (mean - uncond) / uncond,
                    rb_cond_pct: 100.0 * (mean - cond) / cond,
                });
            }
            let m = s.omega.len() as f64;
            let bar = s.omega.iter().sum::<f64>() / m;
            let sd = if m > 1.0 {
                (s.omega.iter().map(|w| (w - bar).powi(2)).sum::<f64>() / (m - 1.0)).sqrt()
            } else {
                f64::NAN
            };
            t_bias.push((label.clone(), bar / (sd / m.sqrt())));
        }
        MetricTable {
            rows,
            mse_rows,
            t_bias,
            replicates: self.replicates,
            failures: Vec::new(),
            capped: self.capped,
        }
    }
}

/// Key of the prediction streams of replicate `m`.
fn prediction_seed(design: &SimDesign, m: usize) -> u64 {
    RngStream::new(design.seed, TAG_PREDICT).substream(m as u64).seed
}

fn method_stream(pred_seed: u64, area: usize, method: Method) -> RngStream {
    RngStream::new(pred_seed, area as u64).substream(1 + method as u64)
}

fn grid<F>(data: &SurveyData, k: usize, mut f: F) -> Result<Vec<Vec<f64>>>
where
    F: FnMut(usize) -> Result<Vec<f64>>,
{
    (0..data.num_areas())
        .map(|i| {
            let v = f(i).map_err(|e| e.in_area(&data.areas[i].area_id))?;
            debug_assert_eq!(v.len(), k);
            Ok(v)
        })
        .collect()
}

fn fit_gg(data: &SurveyData, opt: &OptimizerConfig) -> Result<FitResult> {
    let fit = gamma_gamma::fit(data, opt)?;
    if !fit.converged {
        return Err(Error::Estimator("gamma-gamma fit did not converge".into()));
    }
    Ok(fit)
}

fn fit_glmm(data: &SurveyData, opt: &OptimizerConfig) -> Result<GlmmFit> {
    let fit = glmm::glmm_fit(data, opt)?;
    if !fit.converged {
        return Err(Error::Estimator("GLMM fit did not converge".into()));
    }
    Ok(fit)
}

/// Runs one replicate on a given population and sample.
fn replicate(
    design: &SimDesign,
    cov: &super::Covariates,
    m: usize,
    opt: &OptimizerConfig,
) -> Result<Replicate> {
    let pop = generate_population(design, cov, m)?;
    let sample = draw_sample(design, cov, &pop, m)?;
    let data = &sample.data;
    let targets = &design.targets;
    let k = targets.len();
    let truth = pop
        .y
        .iter()
        .map(|ys| targets.iter().map(|t| t.evaluate(ys)).collect::<Result<Vec<f64>>>())
        .collect::<Result<Vec<_>>>()?;

    let pred_seed = prediction_seed(design, m);
    let uses = |ms: &[Method]| design.methods.iter().any(|x| ms.contains(x));
    let need_mse = !design.mse_variants.is_empty();
    let gg = if uses(&[Method::Eb, Method::EbClsd]) || need_mse {
        Some(fit_gg(data, opt)?)
    } else {
        None
    };
    let gl = if uses(&[Method::EbHz, Method::Pi, Method::M]) {
        Some(fit_glmm(data, opt)?)
    } else {
        None
    };
    let info: Option<InformativeModel> = if uses(&[Method::EbInfo]) {
        Some(fit_informative(data, opt)?.0)
    } else {
        None
    };

    let mut estimates = BTreeMap::new();
    for &method in &design.methods {
        let est = match method {
            Method::Eb => {
                let p = &gg.as_ref().expect("fit").params;
                grid(data, k, |i| {
                    Ok(eb_predict_many(p, &data.areas[i], targets, design.l, &area_stream(pred_seed, i))?
                        .into_iter()
                        .map(|x| x.point)
                        .collect())
                })?
            }
            Method::EbClsd => {
                let p = &gg.as_ref().expect("fit").params;
                grid(data, k, |i| {
                    targets
                        .iter()
                        .map(|t| {
                            if t.is_mean() {
                                predict_mean_closed(p, &data.areas[i])
                            } else {
                                Ok(f64::NAN)
                            }
                        })
                        .collect()
                })?
            }
            Method::EbHz => {
                let f = gl.as_ref().expect("fit");
                grid(data, k, |i| {
                    glmm::predict_ebp_hz_many(
                        f,
                        &data.areas[i],
                        targets,
                        design.l_hz_outer,
                        design.l_hz_inner,
                        &method_stream(pred_seed, i, method),
                    )
                })?
            }
            Method::M => {
                let f = gl.as_ref().expect("fit");
                grid(data, k, |i| {
                    glmm::predict_marginal_many(f, &data.areas[i], targets, design.l, &method_stream(pred_seed, i, method))
                })?
            }
            Method::Pi => {
                let f = gl.as_ref().expect("fit");
                grid(data, k, |i| glmm::predict_plugin_many(f, &data.areas[i], targets))?
            }
            Method::Dir => grid(data, k, |i| targets.iter().map(|t| direct_estimate(t, &data.areas[i])).collect())?,
            Method::EbInfo => {
                let model = info.as_ref().expect("fit");
                grid(data, k, |i| {
                    Ok(eb_predict_info_many(
                        model,
                        &data.areas[i],
                        targets,
                        design.l,
                        &method_stream(pred_seed, i, method),
                        InfoOptions::default(),
                    )?
                    .predictions
                    .into_iter()
                    .map(|x| x.point)
                    .collect())
                })?
            }
        };
        estimates.insert(method, est);
    }

    let mse = if need_mse {
        let fit = gg.as_ref().expect("fit");
        let cfg = MseConfig {
            b: design.b,
            b1: design.b1,
            b2: design.b2,
            l: design.l,
            seed: pred_seed,
            direct: design.mse_variants.iter().any(|v| v.needs_direct()),
        };
        let table = mse_table(data, fit, targets, &cfg, opt)?;
        let cell = |i: usize, t: usize| &table[i * k + t];
        let mut est = BTreeMap::new();
        for &v in &design.mse_variants {
            let vals = (0..data.num_areas())
                .map(|i| {
                    (0..k)
                        .map(|t| cell(i, t).get(v).ok_or_else(|| Error::Estimator(format!("MSE variant {v} missing"))))
                        .collect::<Result<Vec<f64>>>()
                })
                .collect::<Result<Vec<_>>>()?;
            est.insert(v, vals);
        }
        let eb = (0..data.num_areas()).map(|i| (0..k).map(|t| cell(i, t).point).collect()).collect();
        let m1_hat = (0..data.num_areas()).map(|i| (0..k).map(|t| cell(i, t).m1_raw).collect()).collect();
        let truth_params = design.generator.gamma_gamma()?;
        let mut bp = Vec::with_capacity(data.num_areas());
        let mut m1_true = Vec::with_capacity(data.num_areas());
        for (i, area) in data.areas.iter().enumerate() {
            let s = RngStream::new(pred_seed, i as u64).substream(TAG_BP);
            let preds = eb_predict_many(&truth_params, area, targets, 4 * design.l, &s)?;
            bp.push(preds.iter().map(|p| p.point).collect());
            m1_true.push(preds.iter().map(|p| leading_term(&p.draws, p.point)).collect::<Result<Vec<_>>>()?);
        }
        Some(MseReplicate {
            estimates: est,
            eb,
            bp,
            m1_hat,
            m1_true,
        })
    } else {
        None
    };

    Ok(Replicate {
        truth,
        estimates,
        mse,
        capped: sample.capped,
    })
}

/// Runs the study. Replicates run in parallel and are folded in index order,
/// so the result does not depend on the thread count. Failed replicates are
/// recorded and excluded; more than 5% failures abort the study.
pub fn run_study(design: &SimDesign, opt: &OptimizerConfig) -> Result<MetricTable> {
    design.validate()?;
    let cov = generate_covariates(design);
    let mut acc = StudyAccumulator::new(design);
    let mut failures = Vec::new();
    let limit = (MAX_FAILURE_FRACTION * design.m as f64).floor() as usize;
    let mut start = 0;
    while start < design.m {
        let end = (start + CHUNK).min(design.m);
        let reps: Vec<Result<Replicate>> = (start..end)
            .into_par_iter()
            .map(|m| replicate(design, &cov, m, opt))
            .collect();
        for (m, r) in (start..end).zip(reps) {
            match r {
                Ok(rep) => acc.add(&rep),
                Err(e) => {
                    failures.push(format!("replicate {m}: {e}"));
                    if failures.len() > limit {
                        return Err(Error::Estimator(format!(
                            "{} of {} replicates failed (limit {:.0}%); last: {}",
                            failures.len(),
                            design.m,
                            100.0 * MAX_FAILURE_FRACTION,
                            failures.last().expect("failure")
                        )));
                    }
                }
            }
        }
        start = end;
    }
    let mut table = acc.finish();
    table.failures = failures;
    Ok(table)
}
