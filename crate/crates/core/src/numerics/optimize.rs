//! Derivative-free minimization (Nelder–Mead with deterministic restarts).

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OptimizerConfig {
    /// Iteration cap for each simplex run.
    pub max_iterations: usize,
    /// Relative change in objective value that counts as converged.
    pub tolerance: f64,
    /// Extra runs restarted from the incumbent with a fresh simplex.
    pub restarts: usize,
    /// Initial simplex edge, scaled by `max(|x_k|, 1)`.
    pub initial_step: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            max_iterations: 5000,
            tolerance: 1e-10,
            restarts: 3,
            initial_step: 0.25,
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tolerance > 0.0) || self.max_iterations == 0 {
            return Err(Error::Config(format!(
                "optimizer needs tolerance > 0 and max_iterations >= 1, got {:?}",
                self
            )));
        }
        if !(self.initial_step > 0.0) {
            return Err(Error::Config("optimizer initial_step must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct Minimum {
    pub argmin: Vec<f64>,
    pub value: f64,
    pub iterations: usize,
    pub evaluations: usize,
    pub converged: bool,
}

struct Counted<F> {
    f: F,
    evals: usize,
}

impl<F: FnMut(&[f64]) -> f64> Counted<F> {
    fn call(&mut self, x: &[f64]) -> f64 {
        self.evals += 1;
        let v = (self.f)(x);
        if v.is_nan() {
            f64::INFINITY
        } else {
            v
        }
    }
}

/// Minimize `objective` starting from `start`.
///
/// The returned value is never worse than `objective(start)`. NaN values are
/// treated as `+∞`, so the search can recover from regions where the
/// objective is undefined.
pub fn minimize<F>(objective: F, start: &[f64], config: &OptimizerConfig) -> Result<Minimum>
where
    F: FnMut(&[f64]) -> f64,
{
    config.validate()?;
    if start.is_empty() {
        return Err(Error::Domain("cannot minimize over an empty vector".into()));
    }
    let mut f = Counted { f: objective, evals: 0 };
    let mut best_x = start.to_vec();
    let mut best_v = f.call(start);
    let mut iterations = 0;
    let mut converged = false;

    for run in 0..=config.restarts {
        let (x, v, iters, ok) = nelder_mead_run(&mut f, &best_x, best_v, config);
        iterations += iters;
        let improvement = best_v - v;
        if v < best_v || !best_v.is_finite() {
            best_x = x;
            best_v = v;
        }
        converged = ok;
        if run > 0 && ok && improvement <= config.tolerance * (1.0 + best_v.abs()) {
            break;
        }
    }

    if !best_v.is_finite() {
        return Err(Error::Convergence {
            best: best_x,
            value: best_v,
        });
    }
    Ok(Minimum {
        argmin: best_x,
        value: best_v,
        iterations,
        evaluations: f.evals,
        converged,
    })
}

fn nelder_mead_run<F>(
    f: &mut Counted<F>,
    start: &[f64],
    start_value: f64,
    config: &OptimizerConfig,
) -> (Vec<f64>, f64, usize, bool)
where
    F: FnMut(&[f64]) -> f64,
{
    let n = start.len();
    let (alpha, gamma, rho, sigma) = (1.0, 2.0, 0.5, 0.5);

    let mut simplex: Vec<Vec<f64>> = Vec::with_capacity(n + 1);
    let mut values: Vec<f64> = Vec::with_capacity(n + 1);
    simplex.push(start.to_vec());
    values.push(start_value);
    for k in 0..n {
        let mut p = start.to_vec();
        p[k] += config.initial_step * start[k].abs().max(1.0);
        values.push(f.call(&p));
        simplex.push(p);
    }

    let mut order: Vec<usize> = (0..=n).collect();
    let mut centroid = vec![0.0; n];
    let mut trial = vec![0.0; n];
    let mut trial2 = vec![0.0; n];
    let mut iter = 0;
    let mut converged = false;

    while iter < config.max_iterations {
        order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
        let best = order[0];
        let worst = order[n];
        let second = order[n - 1];
        let (fb, fw) = (values[best], values[worst]);
        if fb.is_finite() && fw - fb <= config.tolerance * (1.0 + fb.abs()) {
            converged = true;
            break;
        }
        iter += 1;

        centroid.iter_mut().for_each(|c| *c = 0.0);
        for &i in &order[..n] {
            for (c, x) in centroid.iter_mut().zip(&simplex[i]) {
                *c += x;
            }
        }
        centroid.iter_mut().for_each(|c| *c /= n as f64);

        for k in 0..n {
            trial[k] = centroid[k] + alpha * (centroid[k] - simplex[worst][k]);
        }
        let fr = f.call(&trial);

        if fr < fb {
            for k in 0..n {
                trial2[k] = centroid[k] + gamma * (trial[k] - centroid[k]);
            }
            let fe = f.call(&trial2);
            if fe < fr {
                simplex[worst].copy_from_slice(&trial2);
                values[worst] = fe;
            } else {
                simplex[worst].copy_from_slice(&trial);
                values[worst] = fr;
            }
            continue;
        }
        if fr < values[second] {
            simplex[worst].copy_from_slice(&trial);
            values[worst] = fr;
            continue;
        }
        // Contraction, outside when the reflection beat the worst point.
        let outside = fr < fw;
        for k in 0..n {
            trial2[k] = if outside {
                centroid[k] + rho * (trial[k] - centroid[k])
            } else {
                centroid[k] + rho * (simplex[worst][k] - centroid[k])
            };
        }
        let fc = f.call(&trial2);
        if (outside && fc <= fr) || (!outside && fc < fw) {
            simplex[worst].copy_from_slice(&trial2);
            values[worst] = fc;
            continue;
        }
        // Shrink toward the best vertex.
        let anchor = simplex[best].clone();
        for &i in &order[1..] {
            for k in 0..n {
                simplex[i][k] = anchor[k] + sigma * (simplex[i][k] - anchor[k]);
            }
            values[i] = f.call(&simplex[i]);
        }
    }

    let best = (0..=n).min_by(|&a, &b| values[a].total_cmp(&values[b])).unwrap();
    (simplex[best].clone(), values[best], iter, converged)
}
