//! Exact t-SNE: perplexity-calibrated Gaussian affinities, Student-t output
//! kernel, KL-divergence gradient descent with momentum, adaptive gains and
//! early exaggeration.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{sq_dist, PointCloud};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TsneConfig {
    pub perplexity: f64,
    pub iters: usize,
    pub seed: u64,
    pub learning_rate: f64,
    pub early_exaggeration: f64,
    /// Iterations with exaggerated affinities and low momentum.
    pub exaggeration_iters: usize,
}

impl Default for TsneConfig {
    fn default() -> Self {
        Self {
            perplexity: 30.0,
            iters: 1000,
            seed: 0,
            learning_rate: 200.0,
            early_exaggeration: 12.0,
            exaggeration_iters: 250,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TsneResult {
    pub embedding: PointCloud,
    /// `(iteration, KL(P || Q))` checkpoints, measured against the
    /// un-exaggerated affinities.
    pub kl_history: Vec<(usize, f64)>,
}

impl TsneResult {
    pub fn kl_at(&self, iter: usize) -> Option<f64> {
        self.kl_history.iter().find(|(i, _)| *i == iter).map(|(_, kl)| *kl)
    }
}

const ENTROPY_TOL: f64 = 1e-5;
const MAX_BISECTIONS: usize = 50;
const MIN_PROB: f64 = 1e-12;
const MIN_GAIN: f64 = 0.01;
const KL_EVERY: usize = 50;

/// Conditional affinities `p_{j|i}` with each row's precision found by
/// bisection on the entropy.
fn conditional_affinities(dist: &[f64], n: usize, perplexity: f64) -> Vec<f64> {
    let target = perplexity.ln();
    let mut p = vec![0.0f64; n * n];
    let mut row = vec![0.0f64; n];
    for i in 0..n {
        let d = &dist[i * n..(i + 1) * n];
        // Shift by the nearest distance; the normalized row is unchanged and
        // exp() no longer underflows for far-apart inputs.
        let d_min = (0..n).filter(|&j| j != i).map(|j| d[j]).fold(f64::INFINITY, f64::min);
        let (mut beta, mut lo, mut hi) = (1.0f64, f64::NEG_INFINITY, f64::INFINITY);
        for _ in 0..MAX_BISECTIONS {
            let mut sum = 0.0;
            let mut weighted = 0.0;
            for j in 0..n {
                row[j] = if j == i { 0.0 } else { (-(d[j] - d_min) * beta).exp() };
                sum += row[j];
                weighted += (d[j] - d_min) * row[j];
            }
            let entropy = sum.ln() + beta * weighted / sum;
            let diff = entropy - target;
            if diff.abs() < ENTROPY_TOL {
                break;
            }
            if diff > 0.0 {
                lo = beta;
                beta = if hi.is_infinite() { beta * 2.0 } else { 0.5 * (beta + hi) };
            } else {
                hi = beta;
                beta = if lo.is_infinite() { beta / 2.0 } else { 0.5 * (beta + lo) };
            }
        }
        let sum: f64 = (0..n).filter(|&j| j != i).map(|j| (-(d[j] - d_min) * beta).exp()).sum();
        for j in 0..n {
            p[i * n + j] = if j == i { 0.0 } else { (-(d[j] - d_min) * beta).exp() / sum };
        }
    }
    p
}

fn kl_divergence(p: &[f64], num: &[f64], num_sum: f64) -> f64 {
    p.iter()
        .zip(num)
        .filter(|(&pij, _)| pij > 0.0)
        .map(|(&pij, &nij)| pij * (pij / (nij / num_sum).max(MIN_PROB)).ln())
        .sum()
}

pub fn tsne(x: &PointCloud, cfg: &TsneConfig) -> Result<TsneResult> {
    let n = x.len();
    if n < 4 {
        return Err(Error::Config(format!("t-SNE needs at least 4 points, got {n}")));
    }
    if !(cfg.perplexity >= 1.0 && cfg.perplexity < n as f64 / 3.0) {
        return Err(Error::Config(format!(
            "perplexity {} infeasible for {n} points (need 1 <= perplexity < n/3)",
            cfg.perplexity
        )));
    }

    let mut dist = vec![0.0f64; n * n];
    for i in 0..n {
        for j in i + 1..n {
            let d = sq_dist(x.point(i), x.point(j));
            dist[i * n + j] = d;
            dist[j * n + i] = d;
        }
    }
    let cond = conditional_affinities(&dist, n, cfg.perplexity);
    drop(dist);
    let mut p = vec![0.0f64; n * n];
    let mut total = 0.0;
    for i in 0..n {
        for j in 0..n {
            p[i * n + j] = cond[i * n + j] + cond[j * n + i];
            total += p[i * n + j];
        }
    }
    for (k, v) in p.iter_mut().enumerate() {
        *v = if k / n == k % n { 0.0 } else { (*v / total).max(MIN_PROB) };
    }

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let normal = Normal::new(0.0, 1e-2).expect("valid std");
    let mut y: Vec<f64> = (0..2 * n).map(|_| normal.sample(&mut rng)).collect();
    let mut velocity = vec![0.0f64; 2 * n];
    let mut gains = vec![1.0f64; 2 * n];
    let mut num = vec![0.0f64; n * n];
    let mut grad = vec![0.0f64; 2 * n];
    let mut kl_history = Vec::new();

    for iter in 1..=cfg.iters {
        let exaggerate = iter <= cfg.exaggeration_iters;
        let factor = if exaggerate { cfg.early_exaggeration } else { 1.0 };
        let momentum = if exaggerate { 0.5 } else { 0.8 };

        let mut num_sum = 0.0;
        for i in 0..n {
            num[i * n + i] = 0.0;
            for j in i + 1..n {
                let dx = y[2 * i] - y[2 * j];
                let dy = y[2 * i + 1] - y[2 * j + 1];
                let v = 1.0 / (1.0 + dx * dx + dy * dy);
                num[i * n + j] = v;
                num[j * n + i] = v;
                num_sum += 2.0 * v;
            }
        }
        for i in 0..n {
            let (mut gx, mut gy) = (0.0, 0.0);
            for j in 0..n {
                if j == i {
                    continue;
                }
                let nij = num[i * n + j];
                let q = (nij / num_sum).max(MIN_PROB);
                let w = (factor * p[i * n + j] - q) * nij;
                gx += w * (y[2 * i] - y[2 * j]);
                gy += w * (y[2 * i + 1] - y[2 * j + 1]);
            }
            grad[2 * i] = 4.0 * gx;
            grad[2 * i + 1] = 4.0 * gy;
        }
        // `num` describes the layout after `iter - 1` updates.
        if (iter - 1) % KL_EVERY == 0 || iter - 1 == cfg.exaggeration_iters {
            kl_history.push((iter - 1, kl_divergence(&p, &num, num_sum)));
        }
        for k in 0..2 * n {
            gains[k] = if (grad[k] > 0.0) != (velocity[k] > 0.0) {
                gains[k] + 0.2
            } else {
                (gains[k] * 0.8).max(MIN_GAIN)
            };
            velocity[k] = momentum * velocity[k] - cfg.learning_rate * gains[k] * grad[k];
            y[k] += velocity[k];
        }
        let (mx, my) = (
            (0..n).map(|i| y[2 * i]).sum::<f64>() / n as f64,
            (0..n).map(|i| y[2 * i + 1]).sum::<f64>() / n as f64,
        );
        for i in 0..n {
            y[2 * i] -= mx;
            y[2 * i + 1] -= my;
        }
    }
    // Objective of the final layout.
    let mut num_sum = 0.0;
    for i in 0..n {
        for j in 0..n {
            if i != j {
                let d = sq_dist(&y[2 * i..2 * i + 2], &y[2 * j..2 * j + 2]);
                num[i * n + j] = 1.0 / (1.0 + d);
                num_sum += num[i * n + j];
            } else {
                num[i * n + j] = 0.0;
            }
        }
    }
    kl_history.push((cfg.iters, kl_divergence(&p, &num, num_sum)));

    if y.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("t-SNE diverged".into()));
    }
    Ok(TsneResult {
        embedding: PointCloud::new(2, y)?,
        kl_history,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn blobs(n_per: usize, seed: u64) -> PointCloud {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut rows = Vec::new();
        for c in 0..3 {
            for _ in 0..n_per {
                rows.push((0..5).map(|d| if d == c { 8.0 } else { 0.0 } + rng.gen_range(-1.0..1.0)).collect::<Vec<f64>>());
            }
        }
        PointCloud::from_rows(&rows).unwrap()
    }

    #[test]
    fn shape_centering_and_determinism() {
        let x = blobs(15, 1);
        let cfg = TsneConfig { perplexity: 5.0, iters: 300, seed: 3, ..TsneConfig::default() };
        let a = tsne(&x, &cfg).unwrap();
        assert_eq!(a.embedding.len(), 45);
        assert_eq!(a.embedding.dim(), 2);
        for axis in 0..2 {
            let m: f64 = a.embedding.points().map(|p| p[axis]).sum::<f64>() / 45.0;
            assert!(m.abs() < 1e-3);
        }
        assert_eq!(a, tsne(&x, &cfg).unwrap());
    }

    #[test]
    fn kl_decreases_after_exaggeration() {
        let x = blobs(20, 2);
        let r = tsne(&x, &TsneConfig { perplexity: 10.0, ..TsneConfig::default() }).unwrap();
        let (early, late) = (r.kl_at(250).unwrap(), r.kl_at(1000).unwrap());
        assert!(late <= early, "KL rose from {early} to {late}");
    }

    #[test]
    fn coincident_inputs_stay_closest() {
        let rows = vec![
            vec![0.0, 0.0],
            vec![0.0, 0.0],
            vec![3.0, 0.0],
            vec![0.0, 4.0],
            vec![5.0, 5.0],
            vec![-4.0, 2.0],
        ];
        let x = PointCloud::from_rows(&rows).unwrap();
        let r = tsne(&x, &TsneConfig { perplexity: 1.5, iters: 500, ..TsneConfig::default() }).unwrap();
        let e = &r.embedding;
        let tied = sq_dist(e.point(0), e.point(1));
        for i in 0..6 {
            for j in i + 1..6 {
                if (i, j) != (0, 1) {
                    assert!(tied < sq_dist(e.point(i), e.point(j)), "pair ({i},{j}) closer");
                }
            }
        }
    }

    #[test]
    fn infeasible_perplexity() {
        let x = blobs(3, 1);
        assert!(tsne(&x, &TsneConfig { perplexity: 3.0, ..TsneConfig::default() }).is_err());
        let tiny = PointCloud::from_rows(&[[0.0], [1.0], [2.0]]).unwrap();
        assert!(tsne(&tiny, &TsneConfig { perplexity: 1.0, ..TsneConfig::default() }).is_err());
    }
}
