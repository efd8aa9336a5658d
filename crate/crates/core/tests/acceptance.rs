//! Acceptance checks, run by a plain `main` so that every criterion prints
//! one line `criterion <k>: PASS|FAIL <summary>` even when the run passes.
//! The process fails when a criterion that was run fails.
//!
//! The MSE study at M = 2000 is in the slow suite:
//! `cargo test -p gamma-sae --test acceptance -- --ignored`.

mod common;

use std::sync::OnceLock;
use std::time::Instant;

use common::{gini_double_sum, integrate_half_line, ks_statistic, KS_CRIT_1PCT};
use gamma_sae::data::{AreaFrame, SurveyData, UnitRecord};
use gamma_sae::diagnostics::{residuals_gamma_gamma, UhatRule};
use gamma_sae::gamma_gamma::{self, eb_predict, loglik, posterior_u, predict_mean_closed, GammaGammaParams};
use gamma_sae::informative::UnitComplement;
use gamma_sae::mse::{bias_corrections, MseVariant};
use gamma_sae::numerics::{gamma_cdf, reg_incomplete_gamma, GammaSampler, OptimizerConfig, RngStream};
use gamma_sae::sim::{draw_sample, generate_covariates, generate_population, run_study, MetricTable, SimDesign};
use gamma_sae::table::Method;
use gamma_sae::targets::{gini_sorted, quantile_type7, TargetParameter};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use statrs::function::gamma::ln_gamma;

fn report(k: usize, ok: bool, summary: &str) {
    println!("criterion {k}: {} {summary}", if ok { "PASS" } else { "FAIL" });
}

fn random_area(rng: &mut ChaCha8Rng, id: &str, n: usize, rest: usize, p: &GammaGammaParams) -> AreaFrame {
    let gy = GammaSampler::new(p.alpha).unwrap();
    let gu = GammaSampler::new(p.delta).unwrap();
    let u = gu.sample(rng, p.delta);
    let units = (0..n)
        .map(|_| {
            let x = vec![1.0, rng.random_range(0.0..2.0)];
            let y = gy.sample(rng, p.linpred(&x).exp() * u);
            UnitRecord::new(y, x, None)
        })
        .collect();
    let rest = (0..rest).map(|_| vec![1.0, rng.random_range(0.0..2.0)]).collect();
    AreaFrame::new(id, units, rest)
}

fn random_params(rng: &mut ChaCha8Rng) -> GammaGammaParams {
    GammaGammaParams::new(
        rng.random_range(0.5..6.0),
        rng.random_range(1.0..10.0),
        vec![rng.random_range(-1.0..1.5), rng.random_range(-0.8..0.8)],
    )
    .unwrap()
}

/// ln ∫ Π_j Gamma(y_j; α, e^{x'γ}u) Gamma(u; δ, δ) du by adaptive quadrature,
/// scaled at the integrand's mode.
fn quadrature_loglik(p: &GammaGammaParams, area: &AreaFrame) -> f64 {
    let (a, d) = (p.alpha, p.delta);
    let terms: Vec<(f64, f64)> = area.sampled_units.iter().map(|u| (u.y, p.linpred(&u.x).exp())).collect();
    let log_f = |u: f64| {
        let mut s = d * d.ln() - ln_gamma(d) + (d - 1.0) * u.ln() - d * u;
        for &(y, e) in &terms {
            let rate = e * u;
            s += a * rate.ln() - ln_gamma(a) + (a - 1.0) * y.ln() - rate * y;
        }
        s
    };
    let n = terms.len() as f64;
    let s: f64 = terms.iter().map(|(y, e)| y * e).sum();
    let mode = (n * a + d - 1.0).max(1e-3) / (s + d);
    let peak = log_f(mode);
    let v = integrate_half_line(|u| if u <= 0.0 { 0.0 } else { (log_f(u) - peak).exp() }, 1e-14);
    v.ln() + peak
}

fn criterion_1_loglik_matches_quadrature() -> bool {
    let t0 = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let mut worst: f64 = 0.0;
    for f in 0..100 {
        let p = random_params(&mut rng);
        let d = rng.random_range(1..=4usize);
        let areas = (0..d)
            .map(|i| {
                let n = rng.random_range(1..=8usize);
                random_area(&mut rng, &format!("{f}-{i}"), n, 0, &p)
            })
            .collect();
        let data = SurveyData::new(areas).unwrap();
        let closed = loglik(&p, &data).unwrap();
        let quad: f64 = data.areas.iter().map(|a| quadrature_loglik(&p, a)).sum();
        worst = worst.max(((closed - quad) / quad.abs().max(1e-300)).abs());
    }
    let ok = worst <= 1e-6 && t0.elapsed().as_secs() < 60;
    report(
        1,
        ok,
        &format!("100 fixtures, worst relative difference {worst:.2e} (tol 1e-6), {:.1}s", t0.elapsed().as_secs_f64()),
    );
    ok
}

fn criterion_2_monte_carlo_mean_matches_closed_form() -> bool {
    let t0 = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(202);
    let mean = TargetParameter::mean();
    let mut worst: f64 = 0.0;
    for f in 0..50 {
        let p = random_params(&mut rng);
        let n = rng.random_range(1..=8usize);
        let rest = rng.random_range(5..=40usize);
        let area = random_area(&mut rng, "a", n, rest, &p);
        // E[1/u | y] must exist.
        if posterior_u(&p, &area).shape <= 2.0 {
            continue;
        }
        let closed = predict_mean_closed(&p, &area).unwrap();
        let mc = eb_predict(&p, &area, &mean, 100_000, &RngStream::new(202, f)).unwrap();
        let l = mc.draws.len() as f64;
        let sd = (mc.draws.iter().map(|v| (v - mc.point).powi(2)).sum::<f64>() / (l - 1.0)).sqrt();
        worst = worst.max((mc.point - closed).abs() / (sd / l.sqrt()));
    }
    let ok = worst <= 3.0 && t0.elapsed().as_secs() < 120;
    report(
        2,
        ok,
        &format!("50 fixtures, worst |MC - closed| = {worst:.2} SE (tol 3), {:.1}s", t0.elapsed().as_secs_f64()),
    );
    ok
}

fn sim1_gg() -> &'static (MetricTable, f64) {
    static RUN: OnceLock<(MetricTable, f64)> = OnceLock::new();
    RUN.get_or_init(|| {
        let mut d = SimDesign::sim1_gg(1.0);
        d.m = 500;
        d.methods = vec![Method::Eb, Method::EbClsd, Method::M, Method::Pi, Method::Dir];
        let t0 = Instant::now();
        let t = run_study(&d, &OptimizerConfig::default()).unwrap();
        (t, t0.elapsed().as_secs_f64())
    })
}

fn criterion_3_gamma_gamma_design_ordering() -> bool {
    let (t, secs) = sim1_gg();
    let r = |m| t.get("10", "mean", m).unwrap().rrmse_pct;
    let (eb, m, dir) = (r(Method::Eb), r(Method::M), r(Method::Dir));
    let ok = eb < m && m < dir && (eb - 33.48).abs() <= 3.0 && (dir - 40.21).abs() <= 4.0 && *secs < 1200.0;
    report(
        3,
        ok,
        &format!(
            "n=10 mean RRMSE: EB {eb:.2} (33.48 +/- 3), M {m:.2}, Dir {dir:.2} (40.21 +/- 4); M=500, {secs:.0}s, {} failed replicates",
            t.failures.len()
        ),
    );
    ok
}

fn criterion_4_glmm_robustness() -> bool {
    let t0 = Instant::now();
    let mut d = SimDesign::sim1_glmm(1.0);
    d.m = 300;
    d.methods = vec![Method::Eb, Method::EbHz];
    d.targets = vec![TargetParameter::mean()];
    let t = run_study(&d, &OptimizerConfig::default()).unwrap();
    let secs = t0.elapsed().as_secs_f64();
    let mut ok = secs < 1800.0;
    let mut parts = Vec::new();
    for s in ["10", "20"] {
        let eb = t.get(s, "mean", Method::Eb).unwrap().rrmse_pct;
        let hz = t.get(s, "mean", Method::EbHz).unwrap().rrmse_pct;
        ok &= eb <= hz + 1.0;
        parts.push(format!("n={s}: EB {eb:.2} vs EB_HZ {hz:.2}"));
    }
    report(4, ok, &format!("mean RRMSE {} (EB <= EB_HZ + 1); M=300, {secs:.0}s", parts.join(", ")));
    ok
}

fn criterion_5_plugin_bias_signs() -> bool {
    let (t, _) = sim1_gg();
    let q = t.get("10", "q:0.25", Method::Pi).unwrap().rb_pct;
    let g = t.get("10", "gini", Method::Pi).unwrap().rb_pct;
    let within = |v: f64, r: f64| (v - r).abs() <= 0.25 * r.abs();
    let ok = q > 0.0 && g < 0.0 && within(q, 142.96) && within(g, -59.85);
    report(
        5,
        ok,
        &format!("n=10 RB(PI): Q0.25 {q:+.2} (reference +142.96), Gini {g:+.2} (reference -59.85), tolerance 25% relative"),
    );
    ok
}

fn criterion_6_run() -> (bool, String) {
    let t0 = Instant::now();
    let mut d = SimDesign::sim2_mse(1.0);
    d.m = 2000;
    d.targets = vec![TargetParameter::mean(), TargetParameter::gini()];
    let t = run_study(&d, &OptimizerConfig::default()).unwrap();
    let secs = t0.elapsed().as_secs_f64();
    let nobc = t.mse("mean", MseVariant::NoBc).unwrap().rb_uncond_pct;
    let s = t.mse("mean", MseVariant::S).unwrap().rb_uncond_pct;
    let dd = t.mse("mean", MseVariant::D).unwrap().rb_uncond_pct;
    let tb = t.t_bias_for("gini").unwrap();
    let ok = nobc.abs() <= 10.0 && s > 0.0 && dd < s && tb < -2.0 && secs < 7200.0;
    (
        ok,
        format!("mean RB_uncond: noBC {nobc:+.2} (+/-10), S {s:+.2} (>0), D {dd:+.2} (<S); T_bias(Gini) {tb:.2} (< -2); M=2000, {secs:.0}s"),
    )
}

fn criterion_6_mse_estimator_biases() -> bool {
    let (ok, msg) = criterion_6_run();
    report(6, ok, &msg);
    ok
}

fn criterion_6_not_run() {
    // Not demonstrated in the default run: the study needs hours on one core.
    report(
        6,
        false,
        "not run: the M=2000 MSE study exceeds the default-suite budget here; run the slow suite with --ignored",
    );
}

fn criterion_7_informative_sampling() -> bool {
    let t0 = Instant::now();
    let mut d = SimDesign::sim3_informative(1.0, 0.2);
    d.m = 300;
    d.methods = vec![Method::EbInfo, Method::Eb];
    d.targets = vec![TargetParameter::mean()];
    let t = run_study(&d, &OptimizerConfig::default()).unwrap();
    let secs = t0.elapsed().as_secs_f64();
    let info = t.get("all", "mean", Method::EbInfo).unwrap().rb_pct;
    let eb = t.get("all", "mean", Method::Eb).unwrap().rb_pct;

    // At b = 0 the complement law is the population law.
    let mut rng = ChaCha8Rng::seed_from_u64(707);
    let mut worst: f64 = 0.0;
    for _ in 0..200 {
        let alpha = rng.random_range(0.3..8.0);
        let eta = rng.random_range(0.05..20.0);
        let unit = UnitComplement {
            alpha,
            eta,
            b: 0.0,
            lambda: rng.random_range(1.01..50.0),
        };
        for k in 1..20 {
            let y = k as f64 * 0.3 * alpha / eta;
            worst = worst.max((unit.cdf(y).unwrap() - gamma_cdf(alpha, eta, y).unwrap()).abs());
        }
    }
    let ok = info.abs() < 2.0 && eb > 7.0 && worst <= 1e-10 && secs < 2400.0;
    report(
        7,
        ok,
        &format!(
            "mean RB: EB_INFO {info:+.2} (|.| < 2), EB {eb:+.2} (> 7); b=0 identity worst {worst:.1e} (tol 1e-10); M=300, {secs:.0}s"
        ),
    );
    ok
}

fn ks_ok(xs: &mut [f64], cdf: impl Fn(f64) -> f64) -> bool {
    let n = xs.len() as f64;
    ks_statistic(xs, cdf) * n.sqrt() < KS_CRIT_1PCT
}

fn criterion_8_property_suites() -> bool {
    let t0 = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(808);
    let mut checks: Vec<(&str, bool)> = Vec::new();

    let sampler_ok = [0.3, 1.0, 2.5, 7.0].iter().all(|&a| {
        let g = GammaSampler::new(a).unwrap();
        let mut xs: Vec<f64> = (0..4000).map(|_| g.sample(&mut rng, 2.0)).collect();
        ks_ok(&mut xs, |x| gamma_cdf(a, 2.0, x).unwrap())
    });
    checks.push(("gamma-sampler KS", sampler_ok));

    // P(a + 1, x) = P(a, x) − x^a e^{−x} / Γ(a + 1).
    let recur_ok = (0..500).all(|_| {
        let a: f64 = rng.random_range(0.1..30.0);
        let x: f64 = rng.random_range(0.01..60.0);
        let lhs = reg_incomplete_gamma(a + 1.0, x).unwrap();
        let rhs = reg_incomplete_gamma(a, x).unwrap() - (a * x.ln() - x - ln_gamma(a + 1.0)).exp();
        (lhs - rhs).abs() < 1e-12
    });
    checks.push(("incomplete-gamma recurrence", recur_ok));

    // Posterior of u against the normalized prior × likelihood.
    let post_ok = (0..20).all(|f| {
        let p = random_params(&mut rng);
        let n = rng.random_range(1..=6usize);
        let area = random_area(&mut rng, &f.to_string(), n, 0, &p);
        let post = posterior_u(&p, &area);
        let data = SurveyData::new(vec![area.clone()]).unwrap();
        let marg = loglik(&p, &data).unwrap();
        [0.3, 0.8, 1.5].iter().all(|&u: &f64| {
            let mut lj = p.delta * p.delta.ln() - ln_gamma(p.delta) + (p.delta - 1.0) * u.ln() - p.delta * u;
            for unit in &area.sampled_units {
                let rate = p.linpred(&unit.x).exp() * u;
                lj += p.alpha * rate.ln() - ln_gamma(p.alpha) + (p.alpha - 1.0) * unit.y.ln() - rate * unit.y;
            }
            let lp = post.shape * post.rate.ln() - ln_gamma(post.shape) + (post.shape - 1.0) * u.ln() - post.rate * u;
            (lj - marg - lp).abs() < 1e-8
        })
    });
    checks.push(("posterior conjugacy", post_ok));

    let gini_ok = (0..200).all(|_| {
        let n = rng.random_range(1..60usize);
        let mut v: Vec<f64> = (0..n).map(|_| rng.random_range(0.01..10.0)).collect();
        let brute = gini_double_sum(&v);
        v.sort_by(f64::total_cmp);
        (gini_sorted(&v) - brute).abs() < 1e-12
    });
    checks.push(("Gini double sum", gini_ok));

    let q = [1.0, 2.0, 3.0, 4.0];
    let q_ok = quantile_type7(&q, 0.25) == 1.75
        && quantile_type7(&q, 0.75) == 3.25
        && quantile_type7(&q, 0.5) == 2.5
        && quantile_type7(&[5.0], 0.3) == 5.0;
    checks.push(("quantile type-7", q_ok));

    let up = bias_corrections(2.0, 1.0).unwrap();
    let down = bias_corrections(1.0, 2.0).unwrap();
    let bc_ok = up.add == 3.0
        && up.mult == 4.0
        && up.hm == 3.0
        && up.comp == 3.0
        && down.add == 0.0
        && down.mult == 0.5
        && (down.hm - (-0.5f64).exp()).abs() < 1e-15
        && down.comp == 0.5;
    checks.push(("bias-correction branches", bc_ok));

    let inv_ok = [(1.0, 3.0, 0.2, 6.0), (2.5, 1.5, 0.4, 3.0), (0.7, 5.0, 0.1, 20.0)]
        .iter()
        .all(|&(alpha, eta, b, lambda)| {
            let unit = UnitComplement { alpha, eta, b, lambda };
            let mut xs: Vec<f64> = (0..3000)
                .map(|_| unit.quantile(rng.random_range(f64::EPSILON..1.0)).unwrap())
                .collect();
            ks_ok(&mut xs, |y| unit.cdf(y).unwrap())
        });
    checks.push(("inversion-sampler KS", inv_ok));

    let mut design = SimDesign::sim1_gg(2.0);
    design.d = 50;
    design.n_small = 30;
    design.n_large = 30;
    let cov = generate_covariates(&design);
    let pop = generate_population(&design, &cov, 0).unwrap();
    let sample = draw_sample(&design, &cov, &pop, 0).unwrap();
    let fit = gamma_gamma::fit(&sample.data, &OptimizerConfig::default()).unwrap();
    let res = residuals_gamma_gamma(&fit, &sample.data, UhatRule::PosteriorMean).unwrap();
    let mut rs: Vec<f64> = res.residuals.iter().map(|r| r.r).collect();
    checks.push(("PIT-residual uniformity", ks_ok(&mut rs, |x| x.clamp(0.0, 1.0))));

    let mut small = SimDesign::sim1_gg(1.0);
    small.d = 10;
    small.m = 6;
    small.methods = vec![Method::Eb, Method::Pi, Method::Dir];
    let run = |threads| {
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .unwrap()
            .install(|| run_study(&small, &OptimizerConfig::default()).unwrap())
    };
    checks.push(("thread-count invariance", run(1) == run(4)));

    let secs = t0.elapsed().as_secs_f64();
    let ok = checks.iter().all(|c| c.1) && secs < 300.0;
    let failed: Vec<&str> = checks.iter().filter(|c| !c.1).map(|c| c.0).collect();
    report(
        8,
        ok,
        &format!(
            "{} of {} property checks hold{}; {secs:.1}s",
            checks.len() - failed.len(),
            checks.len(),
            if failed.is_empty() { String::new() } else { format!(" (failed: {})", failed.join(", ")) }
        ),
    );
    ok
}

/// Runs one criterion; a panic counts as a failure.
fn run(k: usize, f: fn() -> bool) -> bool {
    match std::panic::catch_unwind(f) {
        Ok(ok) => ok,
        Err(_) => {
            report(k, false, "panicked");
            false
        }
    }
}

fn main() {
    let args: Vec<String> = std::env::args().skip(1).collect();
    if args.iter().any(|a| a == "--list") {
        return;
    }
    let slow = args.iter().any(|a| a == "--ignored" || a == "--include-ignored");
    let mut failed = Vec::new();
    let mut check = |k: usize, f: fn() -> bool| {
        if !run(k, f) {
            failed.push(k);
        }
    };
    if slow {
        check(6, criterion_6_mse_estimator_biases);
    } else {
        check(1, criterion_1_loglik_matches_quadrature);
        check(2, criterion_2_monte_carlo_mean_matches_closed_form);
        check(3, criterion_3_gamma_gamma_design_ordering);
        check(4, criterion_4_glmm_robustness);
        check(5, criterion_5_plugin_bias_signs);
        criterion_6_not_run();
        check(7, criterion_7_informative_sampling);
        check(8, criterion_8_property_suites);
    }
    if !failed.is_empty() {
        eprintln!("failed criteria: {failed:?}");
        std::process::exit(1);
    }
}
