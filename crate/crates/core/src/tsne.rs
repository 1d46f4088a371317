//! Stochastic neighbour embedding of a precomputed distance matrix.
//!
//! High-dimensional affinities are Gaussian conditionals whose per-row
//! bandwidth is calibrated to a target perplexity. Two low-dimensional
//! models are available: the symmetric Student-t joint of t-SNE and the
//! Gaussian conditional of classic SNE with a fixed bandwidth of `1/sqrt(2)`.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dtw::DistanceMatrix;
use crate::embedding::{sq_dist, EmbeddedPoint, EmbeddingTag};
use crate::error::{Error, Result};
use crate::trajectory::TrajId;

const MAX_BISECTION_STEPS: usize = 64;
const PERPLEXITY_RTOL: f64 = 1e-5;

/// Calibrated high-dimensional affinities.
#[derive(Debug, Clone, PartialEq)]
pub struct AffinityMatrix {
    pub n: usize,
    /// Row-major `p[j|i]`, zero diagonal, rows sum to one.
    pub conditional: Vec<f64>,
    pub sigma: Vec<f64>,
    /// Symmetrized joint `(p[j|i] + p[i|j]) / 2n`, sums to one.
    pub joint: Vec<f64>,
}

impl AffinityMatrix {
    pub fn cond(&self, i: usize, j: usize) -> f64 {
        self.conditional[i * self.n + j]
    }

    /// Realized perplexity `2^H(p[.|i])` of row `i`.
    pub fn row_perplexity(&self, i: usize) -> f64 {
        let row = &self.conditional[i * self.n..(i + 1) * self.n];
        2f64.powf(entropy_bits(row))
    }
}

fn entropy_bits(p: &[f64]) -> f64 {
    -p.iter().filter(|v| **v > 0.0).map(|v| v * v.log2()).sum::<f64>()
}

/// Conditional row for precision `beta = 1 / (2 sigma^2)` over shifted squared
/// distances. Returns the entropy in bits.
fn conditional_row(shifted: &[f64], skip: usize, beta: f64, out: &mut [f64]) -> f64 {
    let mut z = 0.0;
    for (j, (s, o)) in shifted.iter().zip(out.iter_mut()).enumerate() {
        *o = if j == skip { 0.0 } else { (-beta * s).exp() };
        z += *o;
    }
    for o in out.iter_mut() {
        *o /= z;
    }
    entropy_bits(out)
}

/// Finds each row's bandwidth by bisection on `ln beta` so that the row's
/// perplexity matches `perplexity`.
pub fn calibrate_bandwidths(d: &DistanceMatrix, perplexity: f64) -> Result<AffinityMatrix> {
    let n = d.n();
    if n < 3 {
        return Err(Error::invalid(format!("bandwidth calibration needs n >= 3, got {n}")));
    }
    if !(perplexity > 1.0 && perplexity <= (n - 1) as f64) {
        return Err(Error::invalid(format!(
            "perplexity {perplexity} outside (1, {}]",
            n - 1
        )));
    }
    if d.as_slice().iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("distance matrix".into()));
    }
    let target_bits = perplexity.log2();
    let rows: Vec<Result<(Vec<f64>, f64)>> = (0..n)
        .into_par_iter()
        .map(|i| {
            let row = d.row(i);
            let min_sq = (0..n).filter(|&j| j != i).map(|j| row[j] * row[j]).fold(f64::INFINITY, f64::min);
            let shifted: Vec<f64> = row.iter().map(|v| v * v - min_sq).collect();
            let mut p = vec![0.0; n];
            let positive = (0..n).filter(|&j| j != i && shifted[j] > 0.0).map(|j| shifted[j]);
            let (smallest, mean) = positive.fold((f64::INFINITY, (0.0, 0usize)), |(m, (s, c)), v| (m.min(v), (s + v, c + 1)));
            if mean.1 == 0 {
                // All neighbours equidistant: the row is uniform for any bandwidth.
                let h = conditional_row(&shifted, i, 1.0, &mut p);
                let achieved = 2f64.powf(h);
                if (achieved - perplexity).abs() > PERPLEXITY_RTOL * perplexity {
                    return Err(Error::BisectionFailed { row: i, achieved, target: perplexity });
                }
                return Ok((p, (0.5f64).sqrt()));
            }
            let mean = mean.0 / mean.1 as f64;
            let mut lo = (1e-12 / mean).ln();
            let mut hi = (1e12 / smallest).ln();
            let mut beta = ((lo + hi) / 2.0).exp();
            for _ in 0..MAX_BISECTION_STEPS {
                let log_beta = (lo + hi) / 2.0;
                beta = log_beta.exp();
                let h = conditional_row(&shifted, i, beta, &mut p);
                if h > target_bits {
                    lo = log_beta;
                } else {
                    hi = log_beta;
                }
            }
            let achieved = 2f64.powf(conditional_row(&shifted, i, beta, &mut p));
            if (achieved - perplexity).abs() > PERPLEXITY_RTOL * perplexity {
                return Err(Error::BisectionFailed { row: i, achieved, target: perplexity });
            }
            Ok((p, (1.0 / (2.0 * beta)).sqrt()))
        })
        .collect();
    let mut conditional = Vec::with_capacity(n * n);
    let mut sigma = Vec::with_capacity(n);
    for r in rows {
        let (p, s) = r?;
        conditional.extend(p);
        sigma.push(s);
    }
    let mut joint = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            joint[i * n + j] = (conditional[i * n + j] + conditional[j * n + i]) / (2.0 * n as f64);
        }
    }
    Ok(AffinityMatrix {
        n,
        conditional,
        sigma,
        joint,
    })
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum LowDimMode {
    /// Symmetric joint with heavy-tailed kernel `(1 + |xi - xj|^2)^-1`.
    #[default]
    StudentT,
    /// Row-wise Gaussian conditional with exponent `-|xi - xj|^2`.
    GaussianConditional,
}

/// Low-dimensional affinities: a joint matrix (Student-t) or row-stochastic
/// conditionals (Gaussian). Row-major with zero diagonal.
pub fn low_dim_affinities(points: &[Vec<f64>], mode: LowDimMode) -> Result<Vec<f64>> {
    let n = points.len();
    if n < 3 {
        return Err(Error::invalid(format!("low-dimensional affinities need >= 3 points, got {n}")));
    }
    Ok(q_matrix(points, mode))
}

fn q_matrix(points: &[Vec<f64>], mode: LowDimMode) -> Vec<f64> {
    let n = points.len();
    let mut q = vec![0.0; n * n];
    match mode {
        LowDimMode::StudentT => {
            let mut z = 0.0;
            for i in 0..n {
                for j in 0..n {
                    if i != j {
                        let k = 1.0 / (1.0 + sq_dist(&points[i], &points[j]));
                        q[i * n + j] = k;
                        z += k;
                    }
                }
            }
            q.iter_mut().for_each(|v| *v /= z);
        }
        LowDimMode::GaussianConditional => {
            for i in 0..n {
                let row = &mut q[i * n..(i + 1) * n];
                let min = (0..n)
                    .filter(|&j| j != i)
                    .map(|j| sq_dist(&points[i], &points[j]))
                    .fold(f64::INFINITY, f64::min);
                let mut z = 0.0;
                for (j, r) in row.iter_mut().enumerate() {
                    if j != i {
                        *r = (-(sq_dist(&points[i], &points[j]) - min)).exp();
                        z += *r;
                    }
                }
                row.iter_mut().for_each(|v| *v /= z);
            }
        }
    }
    q
}

/// KL objective and its gradient with respect to the flattened coordinates.
///
/// Student-t mode uses `KL(P || Q)` over the joint `P`; Gaussian mode sums the
/// row-wise `KL(P_i || Q_i)` over the conditionals. `p` is the row-major
/// matrix matching the mode.
pub fn kl_and_gradient(p: &[f64], points: &[Vec<f64>], mode: LowDimMode) -> (f64, Vec<Vec<f64>>) {
    let q = q_matrix(points, mode);
    let kl = kl_divergence(p, &q);
    (kl, gradient(p, &q, points, mode))
}

fn kl_divergence(p: &[f64], q: &[f64]) -> f64 {
    p.iter()
        .zip(q)
        .filter(|(pv, _)| **pv > 0.0)
        .map(|(pv, qv)| pv * (pv / qv.max(f64::MIN_POSITIVE)).ln())
        .sum()
}

fn gradient(p: &[f64], q: &[f64], points: &[Vec<f64>], mode: LowDimMode) -> Vec<Vec<f64>> {
    let n = points.len();
    let dim = points[0].len();
    (0..n)
        .into_par_iter()
        .map(|i| {
            let mut g = vec![0.0; dim];
            for j in 0..n {
                if j == i {
                    continue;
                }
                let coef = match mode {
                    LowDimMode::StudentT => {
                        let k = 1.0 / (1.0 + sq_dist(&points[i], &points[j]));
                        4.0 * (p[i * n + j] - q[i * n + j]) * k
                    }
                    LowDimMode::GaussianConditional => {
                        2.0 * (p[i * n + j] - q[i * n + j] + p[j * n + i] - q[j * n + i])
                    }
                };
                for (gd, (a, b)) in g.iter_mut().zip(points[i].iter().zip(&points[j])) {
                    *gd += coef * (a - b);
                }
            }
            g
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingConfig {
    pub perplexity: f64,
    pub output_dim: usize,
    pub mode: LowDimMode,
    pub iterations: usize,
    pub learning_rate: f64,
    pub initial_momentum: f64,
    pub final_momentum: f64,
    pub momentum_switch: usize,
    pub exaggeration: f64,
    pub exaggeration_iters: usize,
    /// Per-coordinate adaptive gains (delta-bar-delta).
    pub adaptive_gains: bool,
    pub init_std: f64,
    pub seed: u64,
}

impl Default for EmbeddingConfig {
    fn default() -> Self {
        EmbeddingConfig {
            perplexity: 37.5,
            output_dim: 2,
            mode: LowDimMode::StudentT,
            iterations: 1000,
            learning_rate: 200.0,
            initial_momentum: 0.5,
            final_momentum: 0.8,
            momentum_switch: 250,
            exaggeration: 4.0,
            exaggeration_iters: 100,
            adaptive_gains: true,
            init_std: 1e-2,
            seed: 0,
        }
    }
}

impl EmbeddingConfig {
    /// Defaults for `mode`. The Gaussian kernel has no heavy tail, so its
    /// step size is far below the Student-t one and gains are off.
    pub fn for_mode(mode: LowDimMode) -> Self {
        match mode {
            LowDimMode::StudentT => Self::default(),
            LowDimMode::GaussianConditional => EmbeddingConfig {
                mode,
                learning_rate: 0.05,
                adaptive_gains: false,
                ..Self::default()
            },
        }
    }

    pub fn validate(&self, n: usize) -> Result<()> {
        if !(self.perplexity > 1.0 && self.perplexity <= n as f64 - 1.0) {
            return Err(Error::invalid(format!(
                "perplexity {} must lie in (1, n - 1] for n = {n}",
                self.perplexity
            )));
        }
        if self.iterations == 0 {
            return Err(Error::invalid("iterations must be >= 1"));
        }
        if self.output_dim == 0 {
            return Err(Error::invalid("output dimension must be >= 1"));
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::invalid("learning rate must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TsneResult {
    pub coords: Vec<Vec<f64>>,
    /// KL divergence against the unexaggerated affinities, one entry per
    /// iteration, preceded by the value at initialization.
    pub kl_trace: Vec<f64>,
}

impl TsneResult {
    pub fn into_points(self, ids: &[TrajId]) -> Vec<EmbeddedPoint> {
        ids.iter()
            .zip(self.coords)
            .map(|(id, coords)| EmbeddedPoint {
                id: *id,
                tag: EmbeddingTag::MTsne,
                coords,
            })
            .collect()
    }
}

/// Gradient descent with momentum on the KL objective.
pub fn embed(d: &DistanceMatrix, config: &EmbeddingConfig) -> Result<TsneResult> {
    let n = d.n();
    config.validate(n)?;
    let aff = calibrate_bandwidths(d, config.perplexity)?;
    let p = match config.mode {
        LowDimMode::StudentT => aff.joint,
        LowDimMode::GaussianConditional => aff.conditional,
    };
    let dim = config.output_dim;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let init = Normal::new(0.0, config.init_std).map_err(|e| Error::invalid(e.to_string()))?;
    let mut y: Vec<Vec<f64>> = (0..n).map(|_| (0..dim).map(|_| init.sample(&mut rng)).collect()).collect();
    let mut velocity = vec![vec![0.0; dim]; n];
    let mut gains = vec![vec![1.0f64; dim]; n];

    let mut trace = Vec::with_capacity(config.iterations + 1);
    trace.push(kl_divergence(&p, &q_matrix(&y, config.mode)));
    let exaggerated: Vec<f64> = p.iter().map(|v| v * config.exaggeration).collect();

    for it in 0..config.iterations {
        let p_iter = if it < config.exaggeration_iters { &exaggerated } else { &p };
        let q = q_matrix(&y, config.mode);
        let grad = gradient(p_iter, &q, &y, config.mode);
        let momentum = if it < config.momentum_switch {
            config.initial_momentum
        } else {
            config.final_momentum
        };
        for i in 0..n {
            for k in 0..dim {
                let g = grad[i][k];
                if config.adaptive_gains {
                    let gain = &mut gains[i][k];
                    *gain = if (g > 0.0) != (velocity[i][k] > 0.0) { *gain + 0.2 } else { *gain * 0.8 };
                    *gain = gain.max(0.01);
                }
                velocity[i][k] = momentum * velocity[i][k] - config.learning_rate * gains[i][k] * g;
                y[i][k] += velocity[i][k];
            }
        }
        // Recentre; the objective is translation invariant.
        for k in 0..dim {
            let mean = y.iter().map(|r| r[k]).sum::<f64>() / n as f64;
            y.iter_mut().for_each(|r| r[k] -= mean);
        }
        let kl = kl_divergence(&p, &q_matrix(&y, config.mode));
        if !kl.is_finite() || y.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::DivergedKl { iteration: it });
        }
        trace.push(kl);
    }
    Ok(TsneResult { coords: y, kl_trace: trace })
}
