//! Analysis primitives: Pearson correlation and a two-component PCA.

use crate::error::{Error, Result};

const VARIANCE_FLOOR: f64 = 1e-12;
pub const POWER_TOL: f64 = 1e-9;
pub const POWER_MAX_ITERS: usize = 1000;

/// Sample correlation of `x` and `y`. Returns 0 when either side is
/// (numerically) constant.
pub fn pearson(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() {
        return Err(Error::Metric(format!(
            "pearson needs equal lengths, got {} and {}",
            x.len(),
            y.len()
        )));
    }
    if x.len() < 2 {
        return Err(Error::Metric("pearson needs at least two values".into()));
    }
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        let (dx, dy) = (a - mx, b - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx / n < VARIANCE_FLOOR || syy / n < VARIANCE_FLOOR {
        return Ok(0.0);
    }
    Ok((sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0))
}

#[derive(Debug, Clone, PartialEq)]
pub struct Pca2 {
    /// Mean-centred projections onto the two leading components.
    pub coords: Vec<[f64; 2]>,
    pub components: [Vec<f64>; 2],
    pub eigenvalues: [f64; 2],
    /// Fraction of total variance along each component.
    pub explained: [f64; 2],
}

/// Project `points` onto the top two eigenvectors of their covariance,
/// found by power iteration with deflation started from the first basis
/// vector.
pub fn pca2(points: &[Vec<f64>]) -> Result<Pca2> {
    if points.len() < 3 {
        return Err(Error::Degenerate(format!("pca needs >= 3 points, got {}", points.len())));
    }
    let dim = points[0].len();
    if dim == 0 || points.iter().any(|p| p.len() != dim) {
        return Err(Error::Degenerate("points must share a nonzero dimension".into()));
    }
    let n = points.len() as f64;
    let mut mean = vec![0.0; dim];
    for p in points {
        for (m, v) in mean.iter_mut().zip(p) {
            *m += v / n;
        }
    }
    let centred: Vec<Vec<f64>> = points
        .iter()
        .map(|p| p.iter().zip(&mean).map(|(v, m)| v - m).collect())
        .collect();
    let mut cov = vec![0.0; dim * dim];
    for p in &centred {
        for i in 0..dim {
            let pi = p[i];
            for j in i..dim {
                cov[i * dim + j] += pi * p[j];
            }
        }
    }
    for i in 0..dim {
        for j in i..dim {
            let v = cov[i * dim + j] / (n - 1.0);
            cov[i * dim + j] = v;
            cov[j * dim + i] = v;
        }
    }
    let trace: f64 = (0..dim).map(|i| cov[i * dim + i]).sum();
    if trace <= VARIANCE_FLOOR {
        return Err(Error::Degenerate("covariance is zero".into()));
    }

    let (l1, v1) = power_iteration(&cov, dim).expect("nonzero covariance has a dominant direction");
    for i in 0..dim {
        for j in 0..dim {
            cov[i * dim + j] -= l1 * v1[i] * v1[j];
        }
    }
    let (l2, v2) = match power_iteration(&cov, dim) {
        Some((l, v)) if l > 0.0 => (l, v),
        _ => (0.0, orthogonal_unit(&v1)),
    };

    let coords = centred
        .iter()
        .map(|p| [dot(p, &v1), dot(p, &v2)])
        .collect();
    Ok(Pca2 {
        coords,
        components: [v1, v2],
        eigenvalues: [l1, l2],
        explained: [l1 / trace, l2.max(0.0) / trace],
    })
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn mat_vec(m: &[f64], v: &[f64], dim: usize) -> Vec<f64> {
    (0..dim).map(|i| dot(&m[i * dim..(i + 1) * dim], v)).collect()
}

fn normalise(v: &mut [f64]) -> f64 {
    let norm = dot(v, v).sqrt();
    if norm > 0.0 {
        v.iter_mut().for_each(|x| *x /= norm);
    }
    norm
}

/// Dominant eigenpair of a symmetric PSD matrix, or `None` if the matrix
/// annihilates every basis vector.
fn power_iteration(m: &[f64], dim: usize) -> Option<(f64, Vec<f64>)> {
    let scale = (0..dim).map(|i| m[i * dim + i].abs()).fold(0.0, f64::max).max(f64::MIN_POSITIVE);
    // First basis vector, falling back to the next ones if it lies in the null space.
    let mut v = (0..dim).find_map(|k| {
        let mut e = vec![0.0; dim];
        e[k] = 1.0;
        let mut w = mat_vec(m, &e, dim);
        (normalise(&mut w) > scale * 1e-12).then_some(w)
    })?;
    for _ in 0..POWER_MAX_ITERS {
        let mut w = mat_vec(m, &v, dim);
        if normalise(&mut w) <= scale * 1e-12 {
            return None;
        }
        let delta = w.iter().zip(&v).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        v = w;
        if delta < POWER_TOL {
            break;
        }
    }
    let lambda = dot(&v, &mat_vec(m, &v, dim));
    Some((lambda, v))
}

fn orthogonal_unit(v: &[f64]) -> Vec<f64> {
    let dim = v.len();
    (0..dim)
        .map(|k| {
            let mut e = vec![0.0; dim];
            e[k] = 1.0;
            let d = v[k];
            e.iter_mut().zip(v).for_each(|(x, vi)| *x -= d * vi);
            e
        })
        .max_by(|a, b| dot(a, a).total_cmp(&dot(b, b)))
        .map(|mut e| {
            normalise(&mut e);
            e
        })
        .unwrap_or_default()
}
