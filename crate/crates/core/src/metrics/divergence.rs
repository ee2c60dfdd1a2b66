use serde::{Deserialize, Serialize};

use super::{sq_dist, PointCloud};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Bandwidth {
    /// Median pairwise distance over the pooled sample.
    Median,
    Fixed(f64),
}

/// Median of the distances between distinct points of `x ∪ y`.
pub fn median_pairwise_distance(x: &PointCloud, y: &PointCloud) -> f64 {
    let pooled: Vec<&[f64]> = x.points().chain(y.points()).collect();
    let mut d = Vec::with_capacity(pooled.len() * pooled.len().saturating_sub(1) / 2);
    for i in 0..pooled.len() {
        for j in i + 1..pooled.len() {
            d.push(sq_dist(pooled[i], pooled[j]).sqrt());
        }
    }
    if d.is_empty() {
        return 0.0;
    }
    d.sort_by(|a, b| a.total_cmp(b));
    let mid = d.len() / 2;
    if d.len() % 2 == 1 {
        d[mid]
    } else {
        0.5 * (d[mid - 1] + d[mid])
    }
}

fn mean_kernel(a: &PointCloud, b: &PointCloud, gamma: f64) -> f64 {
    let mut total = 0.0;
    for p in a.points() {
        for q in b.points() {
            total += (-sq_dist(p, q) * gamma).exp();
        }
    }
    total / (a.len() * b.len()) as f64
}

/// Square root of the biased (V-statistic) estimate of squared MMD under
/// the Gaussian kernel `exp(-|a-b|^2 / (2 sigma^2))`.
pub fn mmd_rbf(x: &PointCloud, y: &PointCloud, bandwidth: Bandwidth) -> Result<f64> {
    if x.is_empty() || y.is_empty() {
        return Err(Error::Config("mmd needs two non-empty samples".into()));
    }
    if x.dim() != y.dim() {
        return Err(Error::shape(format!("{}-dim", x.dim()), format!("{}-dim", y.dim())));
    }
    let sigma = match bandwidth {
        Bandwidth::Fixed(s) if s > 0.0 => s,
        Bandwidth::Fixed(s) => return Err(Error::Config(format!("bandwidth must be positive, got {s}"))),
        Bandwidth::Median => {
            let m = median_pairwise_distance(x, y);
            // All pooled points coincide: any bandwidth gives zero.
            if m > 0.0 {
                m
            } else {
                1.0
            }
        }
    };
    let gamma = 1.0 / (2.0 * sigma * sigma);
    let mmd2 = mean_kernel(x, x, gamma) + mean_kernel(y, y, gamma) - 2.0 * mean_kernel(x, y, gamma);
    Ok(mmd2.max(0.0).sqrt())
}

const JS_SMOOTHING: f64 = 1e-12;

fn histogram(cloud: &PointCloud, lo: [f64; 2], width: [f64; 2], bins: usize) -> Vec<f64> {
    let mut h = vec![0.0f64; bins * bins];
    for p in cloud.points() {
        let cell = |axis: usize| (((p[axis] - lo[axis]) / width[axis]).floor() as isize).clamp(0, bins as isize - 1) as usize;
        h[cell(0) * bins + cell(1)] += 1.0;
    }
    let n = cloud.len() as f64;
    let mut total = 0.0;
    for v in &mut h {
        *v = *v / n + JS_SMOOTHING;
        total += *v;
    }
    h.iter_mut().for_each(|v| *v /= total);
    h
}

/// Jensen-Shannon divergence (natural log) between 2-D histograms of two
/// clouds over a shared `bins x bins` grid spanning their joint bounding box,
/// widened by 1% per side.
pub fn js_divergence_2d(x: &PointCloud, y: &PointCloud, bins: usize) -> Result<f64> {
    if x.is_empty() || y.is_empty() {
        return Err(Error::Config("js divergence needs two non-empty samples".into()));
    }
    if x.dim() != 2 || y.dim() != 2 {
        return Err(Error::shape("2-dim points", format!("{}/{}-dim", x.dim(), y.dim())));
    }
    if bins < 2 {
        return Err(Error::Config("js divergence needs at least 2 bins".into()));
    }
    let mut lo = [f64::INFINITY; 2];
    let mut hi = [f64::NEG_INFINITY; 2];
    for p in x.points().chain(y.points()) {
        for a in 0..2 {
            lo[a] = lo[a].min(p[a]);
            hi[a] = hi[a].max(p[a]);
        }
    }
    let mut width = [0.0; 2];
    for a in 0..2 {
        let span = hi[a] - lo[a];
        let pad = if span > 0.0 { 0.01 * span } else { 0.5 };
        lo[a] -= pad;
        hi[a] += pad;
        width[a] = (hi[a] - lo[a]) / bins as f64;
    }
    let p = histogram(x, lo, width, bins);
    let q = histogram(y, lo, width, bins);
    let mut js = 0.0;
    for (&pi, &qi) in p.iter().zip(&q) {
        let m = 0.5 * (pi + qi);
        js += 0.5 * pi * (pi / m).ln() + 0.5 * qi * (qi / m).ln();
    }
    Ok(js.clamp(0.0, std::f64::consts::LN_2))
}
