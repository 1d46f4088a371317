//! One-vs-rest RBF support vector machine trained by sequential minimal
//! optimization with second-order working-set selection.

use serde::{Deserialize, Serialize};

use super::{softmax, PredictiveDistribution};
use crate::embedding::sq_dist;
use crate::error::{Error, Result};
use crate::trajectory::ClassLabel;

const TAU: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SvmParams {
    /// RBF bandwidth; `None` selects `1 / (d * var)` from the training points.
    pub gamma: Option<f64>,
    pub c: f64,
    /// Stopping tolerance on the maximal KKT violation.
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for SvmParams {
    fn default() -> Self {
        SvmParams {
            gamma: None,
            c: 1.0,
            tol: 1e-3,
            max_iter: 10_000_000,
        }
    }
}

/// `1 / (d * var)` with `var` the variance over every coordinate value.
pub fn scale_gamma(points: &[Vec<f64>]) -> f64 {
    let d = points.first().map_or(1, Vec::len).max(1);
    let values: Vec<f64> = points.iter().flatten().copied().collect();
    if values.is_empty() {
        return 1.0;
    }
    let mean = values.iter().sum::<f64>() / values.len() as f64;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / values.len() as f64;
    if var > 0.0 {
        1.0 / (d as f64 * var)
    } else {
        1.0
    }
}

pub fn rbf(gamma: f64, a: &[f64], b: &[f64]) -> f64 {
    (-gamma * sq_dist(a, b)).exp()
}

/// Solution of one binary problem: `f(x) = sum_i coef_i K(x_i, x) + bias`,
/// with `coef_i = alpha_i y_i`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BinarySvm {
    pub alpha: Vec<f64>,
    pub y: Vec<f64>,
    pub bias: f64,
    pub iterations: usize,
}

/// Solves `min 1/2 a'Qa - e'a` s.t. `0 <= a <= C`, `y'a = 0` for the kernel
/// matrix `k` (row-major, n x n) and labels `y` in {-1, +1}.
pub fn smo(k: &[f64], y: &[f64], c: f64, tol: f64, max_iter: usize) -> BinarySvm {
    let n = y.len();
    let q = |i: usize, j: usize| y[i] * y[j] * k[i * n + j];
    let mut alpha = vec![0.0; n];
    let mut grad = vec![-1.0; n];
    let upper = |a: f64| a >= c;
    let lower = |a: f64| a <= 0.0;
    let mut iterations = 0;
    while iterations < max_iter {
        // First index: maximal violation in I_up.
        let mut gmax = f64::NEG_INFINITY;
        let mut i_sel = None;
        for t in 0..n {
            let in_up = if y[t] > 0.0 { !upper(alpha[t]) } else { !lower(alpha[t]) };
            if in_up && -y[t] * grad[t] >= gmax {
                gmax = -y[t] * grad[t];
                i_sel = Some(t);
            }
        }
        let Some(i) = i_sel else { break };
        // Second index: largest objective decrease in I_low.
        let mut gmax2 = f64::NEG_INFINITY;
        let mut j_sel = None;
        let mut best_obj = f64::INFINITY;
        for t in 0..n {
            let in_low = if y[t] > 0.0 { !lower(alpha[t]) } else { !upper(alpha[t]) };
            if !in_low {
                continue;
            }
            let yg = y[t] * grad[t];
            gmax2 = gmax2.max(yg);
            let diff = gmax + yg;
            if diff > 0.0 {
                let mut quad = k[i * n + i] + k[t * n + t] - 2.0 * k[i * n + t];
                if quad <= 0.0 {
                    quad = TAU;
                }
                let obj = -(diff * diff) / quad;
                if obj <= best_obj {
                    best_obj = obj;
                    j_sel = Some(t);
                }
            }
        }
        if gmax + gmax2 < tol {
            break;
        }
        let Some(j) = j_sel else { break };
        iterations += 1;

        let (old_i, old_j) = (alpha[i], alpha[j]);
        if y[i] != y[j] {
            let mut quad = k[i * n + i] + k[j * n + j] + 2.0 * q(i, j);
            if quad <= 0.0 {
                quad = TAU;
            }
            let delta = (-grad[i] - grad[j]) / quad;
            let diff = alpha[i] - alpha[j];
            alpha[i] += delta;
            alpha[j] += delta;
            if diff > 0.0 {
                if alpha[j] < 0.0 {
                    alpha[j] = 0.0;
                    alpha[i] = diff;
                }
            } else if alpha[i] < 0.0 {
                alpha[i] = 0.0;
                alpha[j] = -diff;
            }
            if diff > 0.0 {
                if alpha[i] > c {
                    alpha[i] = c;
                    alpha[j] = c - diff;
                }
            } else if alpha[j] > c {
                alpha[j] = c;
                alpha[i] = c + diff;
            }
        } else {
            let mut quad = k[i * n + i] + k[j * n + j] - 2.0 * q(i, j);
            if quad <= 0.0 {
                quad = TAU;
            }
            let delta = (grad[i] - grad[j]) / quad;
            let sum = alpha[i] + alpha[j];
            alpha[i] -= delta;
            alpha[j] += delta;
            if sum > c {
                if alpha[i] > c {
                    alpha[i] = c;
                    alpha[j] = sum - c;
                }
            } else if alpha[j] < 0.0 {
                alpha[j] = 0.0;
                alpha[i] = sum;
            }
            if sum > c {
                if alpha[j] > c {
                    alpha[j] = c;
                    alpha[i] = sum - c;
                }
            } else if alpha[i] < 0.0 {
                alpha[i] = 0.0;
                alpha[j] = sum;
            }
        }
        let (di, dj) = (alpha[i] - old_i, alpha[j] - old_j);
        for t in 0..n {
            grad[t] += q(i, t) * di + q(j, t) * dj;
        }
    }
    if iterations >= max_iter {
        log::warn!("SMO stopped at the iteration cap ({max_iter})");
    }

    // Offset from free vectors, or the midpoint of the feasible interval.
    let (mut ub, mut lb) = (f64::INFINITY, f64::NEG_INFINITY);
    let (mut free_sum, mut free_n) = (0.0, 0usize);
    for t in 0..n {
        let yg = y[t] * grad[t];
        if upper(alpha[t]) {
            if y[t] < 0.0 {
                ub = ub.min(yg);
            } else {
                lb = lb.max(yg);
            }
        } else if lower(alpha[t]) {
            if y[t] > 0.0 {
                ub = ub.min(yg);
            } else {
                lb = lb.max(yg);
            }
        } else {
            free_sum += yg;
            free_n += 1;
        }
    }
    let rho = if free_n > 0 {
        free_sum / free_n as f64
    } else {
        (ub + lb) / 2.0
    };
    BinarySvm {
        alpha,
        y: y.to_vec(),
        bias: -rho,
        iterations,
    }
}

/// Largest KKT violation of a binary solution, evaluated from scratch.
pub fn kkt_residual(k: &[f64], sol: &BinarySvm, c: f64) -> f64 {
    let n = sol.y.len();
    (0..n)
        .map(|i| {
            let f: f64 = (0..n).map(|j| sol.alpha[j] * sol.y[j] * k[j * n + i]).sum::<f64>() + sol.bias;
            let margin = sol.y[i] * f;
            let a = sol.alpha[i];
            if a <= 0.0 {
                (1.0 - margin).max(0.0)
            } else if a >= c {
                (margin - 1.0).max(0.0)
            } else {
                (margin - 1.0).abs()
            }
        })
        .fold(0.0, f64::max)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OneVsRest {
    pub class: ClassLabel,
    pub support: Vec<usize>,
    pub coef: Vec<f64>,
    pub bias: f64,
    pub kkt_residual: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SvmModel {
    pub classes: Vec<ClassLabel>,
    pub gamma: f64,
    pub c: f64,
    pub dim: usize,
    /// Training points referenced by the per-class support indices.
    pub points: Vec<Vec<f64>>,
    pub problems: Vec<OneVsRest>,
}

pub fn svm_train(points: &[Vec<f64>], labels: &[ClassLabel], params: &SvmParams) -> Result<SvmModel> {
    if points.len() != labels.len() || points.is_empty() {
        return Err(Error::invalid("SVM training needs one label per point and at least one point"));
    }
    let dim = points[0].len();
    if points.iter().any(|p| p.len() != dim) {
        return Err(Error::invalid("training points of unequal dimension"));
    }
    let mut classes: Vec<ClassLabel> = labels.to_vec();
    classes.sort();
    classes.dedup();
    if classes.len() < 2 {
        return Err(Error::SingleClass(classes.len()));
    }
    let gamma = params.gamma.unwrap_or_else(|| scale_gamma(points));
    let n = points.len();
    let mut k = vec![0.0; n * n];
    for i in 0..n {
        for j in i..n {
            let v = rbf(gamma, &points[i], &points[j]);
            k[i * n + j] = v;
            k[j * n + i] = v;
        }
    }
    let problems = classes
        .iter()
        .map(|&class| {
            let y: Vec<f64> = labels.iter().map(|l| if *l == class { 1.0 } else { -1.0 }).collect();
            let sol = smo(&k, &y, params.c, params.tol, params.max_iter);
            let kkt = kkt_residual(&k, &sol, params.c);
            let support: Vec<usize> = (0..n).filter(|&i| sol.alpha[i] > 0.0).collect();
            OneVsRest {
                class,
                coef: support.iter().map(|&i| sol.alpha[i] * sol.y[i]).collect(),
                support,
                bias: sol.bias,
                kkt_residual: kkt,
            }
        })
        .collect();
    Ok(SvmModel {
        classes,
        gamma,
        c: params.c,
        dim,
        points: points.to_vec(),
        problems,
    })
}

impl SvmModel {
    /// One-vs-rest decision values, in class order.
    pub fn decision_values(&self, point: &[f64]) -> Result<Vec<f64>> {
        if point.len() != self.dim {
            return Err(Error::DimensionMismatch {
                expected: self.dim,
                got: point.len(),
            });
        }
        Ok(self
            .problems
            .iter()
            .map(|p| {
                p.support
                    .iter()
                    .zip(&p.coef)
                    .map(|(&i, c)| c * rbf(self.gamma, &self.points[i], point))
                    .sum::<f64>()
                    + p.bias
            })
            .collect())
    }

    /// Softmax (temperature 1) over the decision values.
    pub fn predict_proba(&self, point: &[f64]) -> Result<PredictiveDistribution> {
        let f = self.decision_values(point)?;
        PredictiveDistribution::new(self.classes.clone(), softmax(&f))
    }

    /// Class with the largest decision value (first on ties).
    pub fn predict(&self, point: &[f64]) -> Result<ClassLabel> {
        let f = self.decision_values(point)?;
        let best = f
            .iter()
            .enumerate()
            .fold(0, |b, (i, v)| if *v > f[b] { i } else { b });
        Ok(self.classes[best])
    }

    pub fn max_kkt_residual(&self) -> f64 {
        self.problems.iter().map(|p| p.kkt_residual).fold(0.0, f64::max)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use ClassLabel::{CutIn, LeftDriveBy as A, RightDriveBy as B};

    fn xor_data(seed: u64) -> (Vec<Vec<f64>>, Vec<ClassLabel>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut pts = Vec::new();
        let mut labels = Vec::new();
        for (cx, cy, l) in [(1.0, 1.0, A), (-1.0, -1.0, A), (1.0, -1.0, B), (-1.0, 1.0, B)] {
            for _ in 0..20 {
                pts.push(vec![cx + rng.random_range(-0.3..0.3), cy + rng.random_range(-0.3..0.3)]);
                labels.push(l);
            }
        }
        (pts, labels)
    }

    fn accuracy(m: &SvmModel, pts: &[Vec<f64>], labels: &[ClassLabel]) -> f64 {
        pts.iter().zip(labels).filter(|(p, l)| m.predict(p).unwrap() == **l).count() as f64 / pts.len() as f64
    }

    #[test]
    fn separable_pair_is_learned() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut pts = Vec::new();
        let mut labels = Vec::new();
        for _ in 0..10 {
            pts.push(vec![-1.0 + rng.random_range(-0.01..0.01), rng.random_range(-0.01..0.01)]);
            labels.push(A);
            pts.push(vec![1.0 + rng.random_range(-0.01..0.01), rng.random_range(-0.01..0.01)]);
            labels.push(B);
        }
        let m = svm_train(&pts, &labels, &SvmParams::default()).unwrap();
        assert_eq!(accuracy(&m, &pts, &labels), 1.0);
    }

    #[test]
    fn xor_with_rbf_kernel() {
        let (pts, labels) = xor_data(1);
        let params = SvmParams {
            gamma: Some(1.0),
            c: 10.0,
            ..Default::default()
        };
        let m = svm_train(&pts, &labels, &params).unwrap();
        assert!(accuracy(&m, &pts, &labels) >= 0.95);
        assert!(m.max_kkt_residual() <= 1e-3);
    }

    #[test]
    fn xor_defeats_a_linear_kernel() {
        // Any line leaves at least one of the four clusters misclassified.
        let (pts, labels) = xor_data(1);
        let mut best = 0.0f64;
        for step in 0..360 {
            let th = (step as f64).to_radians();
            let (w0, w1) = (th.cos(), th.sin());
            for b in (-30..=30).map(|k| k as f64 * 0.1) {
                let acc = pts
                    .iter()
                    .zip(&labels)
                    .filter(|(p, l)| ((w0 * p[0] + w1 * p[1] + b) > 0.0) == (**l == A))
                    .count() as f64
                    / pts.len() as f64;
                best = best.max(acc);
            }
        }
        assert!(best <= 0.75 + 1e-12);
    }

    #[test]
    fn duplicated_training_set_gives_same_decision_function() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut pts = Vec::new();
        let mut labels = Vec::new();
        for _ in 0..15 {
            pts.push(vec![rng.random_range(-2.0..-0.5), rng.random_range(-1.0..1.0)]);
            labels.push(A);
            pts.push(vec![rng.random_range(0.5..2.0), rng.random_range(-1.0..1.0)]);
            labels.push(B);
        }
        let params = SvmParams {
            gamma: Some(0.5),
            c: 1e3,
            tol: 1e-10,
            ..Default::default()
        };
        let once = svm_train(&pts, &labels, &params).unwrap();
        let twice_pts: Vec<Vec<f64>> = pts.iter().chain(&pts).cloned().collect();
        let twice_labels: Vec<ClassLabel> = labels.iter().chain(&labels).copied().collect();
        let twice = svm_train(&twice_pts, &twice_labels, &params).unwrap();
        for gx in -10..=10 {
            for gy in -10..=10 {
                let p = [gx as f64 * 0.3, gy as f64 * 0.3];
                let a = once.decision_values(&p).unwrap();
                let b = twice.decision_values(&p).unwrap();
                for (x, y) in a.iter().zip(&b) {
                    assert!((x - y).abs() <= 1e-6, "{x} vs {y} at {p:?}");
                }
            }
        }
    }

    #[test]
    fn single_class_rejected() {
        let pts = vec![vec![0.0], vec![1.0]];
        assert!(matches!(svm_train(&pts, &[A, A], &SvmParams::default()), Err(Error::SingleClass(1))));
    }

    #[test]
    fn probabilities_preserve_decision_argmax() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let pts: Vec<Vec<f64>> = (0..45).map(|i| vec![(i % 3) as f64 * 2.0 + rng.random::<f64>(), rng.random::<f64>()]).collect();
        let labels: Vec<ClassLabel> = (0..45).map(|i| [A, B, CutIn][i % 3]).collect();
        let m = svm_train(&pts, &labels, &SvmParams::default()).unwrap();
        for _ in 0..500 {
            let p = [rng.random_range(-2.0..8.0), rng.random_range(-2.0..3.0)];
            let dist = m.predict_proba(&p).unwrap();
            assert!((dist.probs.iter().sum::<f64>() - 1.0).abs() < 1e-8);
            assert_eq!(dist.argmax(), m.predict(&p).unwrap());
        }
        assert!(m.predict_proba(&[0.0]).is_err());
    }

    #[test]
    fn kkt_holds_on_random_problems() {
        for seed in 0..10 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let pts: Vec<Vec<f64>> = (0..40).map(|_| vec![rng.random::<f64>(), rng.random::<f64>()]).collect();
            let labels: Vec<ClassLabel> = (0..40).map(|_| [A, B, CutIn][rng.random_range(0..3)]).collect();
            let m = svm_train(&pts, &labels, &SvmParams { c: 5.0, ..Default::default() }).unwrap();
            for p in &m.problems {
                assert!(p.coef.iter().all(|c| c.abs() <= 5.0 + 1e-12));
            }
            assert!(m.max_kkt_residual() <= 1e-3, "seed {seed}: {}", m.max_kkt_residual());
        }
    }
}
