//! Separable CMA-ES (diagonal covariance) over normalized genomes.
//!
//! Learning rates follow the separable variant of Ros and Hansen: the full
//! CMA rank-one and rank-mu rates scaled by `(n + 2) / 3`. Candidates are
//! clipped to `[0, 1]` before evaluation and the update uses the clipped
//! points.

use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::Serialize;
use thiserror::Error;

use crate::genome::Genome;
use crate::rng::{derive_seed, rng_from_seed};

pub const DEFAULT_LAMBDA: usize = 16;
pub const DEFAULT_SIGMA: f64 = 0.1;
pub const DEFAULT_STEPS: usize = 350;

#[derive(Debug, Error, PartialEq)]
pub enum CmaError {
    #[error("sigma must be positive and finite, got {0}")]
    InvalidSigma(f64),
    #[error("population size must be at least 4, got {0}")]
    InvalidLambda(usize),
    #[error("expected {expected} entries, got {actual}")]
    SizeMismatch { expected: usize, actual: usize },
    #[error("steps must be at least 1")]
    NoSteps,
    #[error("empty search space")]
    EmptyGenome,
}

/// Strategy constants derived from `(n, lambda)`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CmaParams {
    pub dim: usize,
    pub lambda: usize,
    pub mu: usize,
    pub weights: Vec<f64>,
    pub mu_eff: f64,
    pub c_sigma: f64,
    pub d_sigma: f64,
    pub c_c: f64,
    pub c_1: f64,
    pub c_mu: f64,
    pub chi_n: f64,
}

impl CmaParams {
    pub fn new(dim: usize, lambda: usize) -> Self {
        let n = dim as f64;
        let mu = lambda / 2;
        let raw: Vec<f64> = (0..mu)
            .map(|i| ((lambda as f64 + 1.0) / 2.0).ln() - ((i + 1) as f64).ln())
            .collect();
        let total: f64 = raw.iter().sum();
        let weights: Vec<f64> = raw.iter().map(|w| w / total).collect();
        let mu_eff = 1.0 / weights.iter().map(|w| w * w).sum::<f64>();

        let c_sigma = (mu_eff + 2.0) / (n + mu_eff + 5.0);
        let d_sigma = 1.0 + 2.0 * (((mu_eff - 1.0) / (n + 1.0)).sqrt() - 1.0).max(0.0) + c_sigma;
        let c_c = (4.0 + mu_eff / n) / (n + 4.0 + 2.0 * mu_eff / n);
        let c_1_full = 2.0 / ((n + 1.3).powi(2) + mu_eff);
        let c_mu_full = 2.0 * (mu_eff - 2.0 + 1.0 / mu_eff) / ((n + 2.0).powi(2) + mu_eff);
        let scale = (n + 2.0) / 3.0;
        let c_1 = (c_1_full * scale).min(1.0);
        let c_mu = (c_mu_full * scale).min(1.0 - c_1);
        let chi_n = n.sqrt() * (1.0 - 1.0 / (4.0 * n) + 1.0 / (21.0 * n * n));
        Self { dim, lambda, mu, weights, mu_eff, c_sigma, d_sigma, c_c, c_1, c_mu, chi_n }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SepCmaState {
    pub mean: Vec<f64>,
    pub sigma: f64,
    pub variances: Vec<f64>,
    pub path_sigma: Vec<f64>,
    pub path_c: Vec<f64>,
    pub generation: usize,
    pub params: CmaParams,
}

impl SepCmaState {
    pub fn init(theta0: &Genome, sigma: f64, lambda: usize) -> Result<Self, CmaError> {
        if !(sigma > 0.0 && sigma.is_finite()) {
            return Err(CmaError::InvalidSigma(sigma));
        }
        if lambda < 4 {
            return Err(CmaError::InvalidLambda(lambda));
        }
        let n = theta0.len();
        if n == 0 {
            return Err(CmaError::EmptyGenome);
        }
        Ok(Self {
            mean: theta0.values().to_vec(),
            sigma,
            variances: vec![1.0; n],
            path_sigma: vec![0.0; n],
            path_c: vec![0.0; n],
            generation: 0,
            params: CmaParams::new(n, lambda),
        })
    }

    pub fn lambda(&self) -> usize {
        self.params.lambda
    }

    /// `lambda` clipped samples from `N(mean, sigma^2 diag(variances))`.
    pub fn ask(&self, seed: u64) -> Vec<Genome> {
        let mut rng = rng_from_seed(seed);
        (0..self.params.lambda)
            .map(|_| {
                let values = self
                    .mean
                    .iter()
                    .zip(&self.variances)
                    .map(|(m, v)| {
                        let z: f64 = rng.sample(StandardNormal);
                        m + self.sigma * v.sqrt() * z
                    })
                    .collect();
                Genome::from_clipped(values)
            })
            .collect()
    }

    /// Rank-based update. Non-finite fitnesses rank last; ties keep index
    /// order.
    pub fn tell(&mut self, candidates: &[Genome], fitnesses: &[f64]) -> Result<(), CmaError> {
        let p = &self.params;
        let n = p.dim;
        if candidates.len() != p.lambda {
            return Err(CmaError::SizeMismatch { expected: p.lambda, actual: candidates.len() });
        }
        if fitnesses.len() != p.lambda {
            return Err(CmaError::SizeMismatch { expected: p.lambda, actual: fitnesses.len() });
        }
        if let Some(bad) = candidates.iter().find(|c| c.len() != n) {
            return Err(CmaError::SizeMismatch { expected: n, actual: bad.len() });
        }
        let order = rank_order(fitnesses);

        // steps of the selected points in sigma units
        let steps: Vec<Vec<f64>> = order[..p.mu]
            .iter()
            .map(|&i| {
                candidates[i]
                    .values()
                    .iter()
                    .zip(&self.mean)
                    .map(|(x, m)| (x - m) / self.sigma)
                    .collect()
            })
            .collect();
        let mut y_w = vec![0.0; n];
        for (w, y) in p.weights.iter().zip(&steps) {
            for (acc, v) in y_w.iter_mut().zip(y) {
                *acc += w * v;
            }
        }

        for (m, y) in self.mean.iter_mut().zip(&y_w) {
            *m += self.sigma * y;
        }

        let cs = (p.c_sigma * (2.0 - p.c_sigma) * p.mu_eff).sqrt();
        for ((ps, y), v) in self.path_sigma.iter_mut().zip(&y_w).zip(&self.variances) {
            *ps = (1.0 - p.c_sigma) * *ps + cs * y / v.sqrt();
        }
        let ps_norm = self.path_sigma.iter().map(|v| v * v).sum::<f64>().sqrt();
        let gen = (self.generation + 1) as f64;
        let correction = (1.0 - (1.0 - p.c_sigma).powf(2.0 * gen)).sqrt();
        let h_sigma = ps_norm / correction < (1.4 + 2.0 / (n as f64 + 1.0)) * p.chi_n;

        let cc = (p.c_c * (2.0 - p.c_c) * p.mu_eff).sqrt();
        for (pc, y) in self.path_c.iter_mut().zip(&y_w) {
            *pc = (1.0 - p.c_c) * *pc + if h_sigma { cc * y } else { 0.0 };
        }

        let stall = if h_sigma { 0.0 } else { p.c_1 * p.c_c * (2.0 - p.c_c) };
        let decay = 1.0 - p.c_1 - p.c_mu + stall;
        for j in 0..n {
            let rank_mu: f64 = p.weights.iter().zip(&steps).map(|(w, y)| w * y[j] * y[j]).sum();
            let v = decay * self.variances[j] + p.c_1 * self.path_c[j].powi(2) + p.c_mu * rank_mu;
            // guard against collapse to zero along a coordinate
            self.variances[j] = v.max(f64::MIN_POSITIVE);
        }

        self.sigma *= ((p.c_sigma / p.d_sigma) * (ps_norm / p.chi_n - 1.0)).exp();
        self.generation += 1;
        Ok(())
    }
}

/// Indices sorted by fitness ascending; non-finite values last, ties by index.
pub fn rank_order(fitnesses: &[f64]) -> Vec<usize> {
    let key = |f: f64| if f.is_finite() { f } else { f64::INFINITY };
    let mut order: Vec<usize> = (0..fitnesses.len()).collect();
    order.sort_by(|&a, &b| key(fitnesses[a]).total_cmp(&key(fitnesses[b])));
    order
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GenerationStats {
    pub generation: usize,
    pub best_fitness: f64,
    pub mean_fitness: f64,
    pub sigma: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimizationTrace {
    pub generations: Vec<GenerationStats>,
    pub best_theta: Genome,
    pub best_fitness: f64,
    pub evaluations: usize,
}

/// Runs `steps` ask/tell generations, evaluating each population in
/// parallel. A failed evaluation counts as the worst fitness. `on_generation`
/// sees the state and trace after every generation.
pub fn optimize<F, E>(
    objective: F,
    theta0: &Genome,
    steps: usize,
    lambda: usize,
    sigma: f64,
    seed: u64,
    mut on_generation: impl FnMut(&SepCmaState, &OptimizationTrace),
) -> Result<OptimizationTrace, CmaError>
where
    F: Fn(&Genome) -> Result<f64, E> + Sync,
    E: std::fmt::Display,
{
    if steps == 0 {
        return Err(CmaError::NoSteps);
    }
    let mut state = SepCmaState::init(theta0, sigma, lambda)?;
    let mut trace = OptimizationTrace {
        generations: Vec::with_capacity(steps),
        best_theta: theta0.clone(),
        best_fitness: f64::INFINITY,
        evaluations: 0,
    };
    for gen in 0..steps {
        let candidates = state.ask(derive_seed(seed, &[gen as u64]));
        let fitnesses: Vec<f64> = candidates
            .par_iter()
            .map(|c| match objective(c) {
                Ok(f) if f.is_finite() => f,
                Ok(f) => {
                    log::warn!("non-finite fitness {f}; ranking candidate last");
                    f64::INFINITY
                }
                Err(e) => {
                    log::warn!("objective failed: {e}; ranking candidate last");
                    f64::INFINITY
                }
            })
            .collect();
        trace.evaluations += candidates.len();
        let order = rank_order(&fitnesses);
        let best = order[0];
        if fitnesses[best] < trace.best_fitness {
            trace.best_fitness = fitnesses[best];
            trace.best_theta = candidates[best].clone();
        }
        let finite: Vec<f64> = fitnesses.iter().copied().filter(|f| f.is_finite()).collect();
        let mean_fitness = if finite.is_empty() {
            f64::INFINITY
        } else {
            finite.iter().sum::<f64>() / finite.len() as f64
        };
        state.tell(&candidates, &fitnesses)?;
        trace.generations.push(GenerationStats {
            generation: gen + 1,
            best_fitness: trace.best_fitness,
            mean_fitness,
            sigma: state.sigma,
        });
        on_generation(&state, &trace);
    }
    Ok(trace)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn genome(v: f64, n: usize) -> Genome {
        Genome::new(vec![v; n]).unwrap()
    }

    #[test]
    fn init_defaults_and_validation() {
        let g = genome(0.3, 5);
        let s = SepCmaState::init(&g, DEFAULT_SIGMA, DEFAULT_LAMBDA).unwrap();
        assert_eq!(s.mean, g.values());
        assert_eq!(s.generation, 0);
        assert_eq!(s.lambda(), 16);
        assert_eq!(s.variances, vec![1.0; 5]);
        assert_eq!(SepCmaState::init(&g, 0.0, 16), Err(CmaError::InvalidSigma(0.0)));
        assert_eq!(SepCmaState::init(&g, 0.1, 3), Err(CmaError::InvalidLambda(3)));
    }

    #[test]
    fn weights_are_positive_decreasing_and_normalized() {
        let p = CmaParams::new(235, 16);
        assert_eq!(p.mu, 8);
        assert!((p.weights.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(p.weights.windows(2).all(|w| w[0] > w[1] && w[1] > 0.0));
        assert!(p.c_1 + p.c_mu <= 1.0);
    }

    #[test]
    fn tiny_sigma_gives_the_clipped_mean() {
        let mut values = vec![0.5; 4];
        values[0] = 1.0;
        let s = SepCmaState::init(&Genome::new(values.clone()).unwrap(), 1e-300, 16).unwrap();
        for c in s.ask(1) {
            assert_eq!(c.values(), values.as_slice());
        }
    }

    #[test]
    fn tell_checks_sizes() {
        let mut s = SepCmaState::init(&genome(0.5, 3), 0.1, 8).unwrap();
        let c = s.ask(0);
        assert!(matches!(s.tell(&c[..7], &[0.0; 7]), Err(CmaError::SizeMismatch { .. })));
        assert!(matches!(s.tell(&c, &[0.0; 7]), Err(CmaError::SizeMismatch { .. })));
    }

    #[test]
    fn non_finite_fitness_ranks_last() {
        assert_eq!(rank_order(&[f64::NAN, 1.0, f64::NEG_INFINITY, 0.5, 1.0]), vec![3, 1, 4, 0, 2]);
    }

    #[test]
    fn equal_fitness_recombines_in_index_order() {
        let mut s = SepCmaState::init(&genome(0.5, 3), 0.1, 8).unwrap();
        let c = s.ask(5);
        let m0 = s.mean.clone();
        s.tell(&c, &[1.0; 8]).unwrap();
        for j in 0..3 {
            let expected: f64 = m0[j]
                + s.params.weights.iter().zip(&c).map(|(w, x)| w * (x.values()[j] - m0[j])).sum::<f64>();
            assert!((s.mean[j] - expected).abs() < 1e-15);
        }
    }

    #[test]
    fn one_step_costs_lambda_evaluations() {
        let t = optimize(
            |g: &Genome| Ok::<_, String>(g.values().iter().sum()),
            &genome(0.5, 4),
            1,
            16,
            0.1,
            0,
            |_, _| {},
        )
        .unwrap();
        assert_eq!(t.evaluations, 16);
        assert_eq!(t.generations.len(), 1);
    }

    #[test]
    fn failed_evaluations_do_not_stop_the_run() {
        let t = optimize(
            |g: &Genome| if g.values()[0] > 0.5 { Err("boom") } else { Ok(g.values()[0]) },
            &genome(0.5, 2),
            5,
            8,
            0.1,
            3,
            |_, _| {},
        )
        .unwrap();
        assert!(t.best_fitness.is_finite());
        assert_eq!(t.evaluations, 40);
    }
}
