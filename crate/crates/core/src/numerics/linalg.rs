//! Pearson correlation and power-iteration PCA.

use super::tensor::Tensor;
use crate::error::{Error, Result};

const PCA_MAX_ITERS: usize = 1000;
const PCA_TOL: f64 = 1e-10;

/// Pearson correlation coefficient of two equal-length samples.
pub fn pearson_r(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() || x.len() < 2 {
        return Err(Error::Shape(format!(
            "pearson_r over lengths {} and {}",
            x.len(),
            y.len()
        )));
    }
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        let (da, db) = (a - mx, b - my);
        sxy += da * db;
        sxx += da * da;
        syy += db * db;
    }
    if sxx <= 0.0 || syy <= 0.0 {
        return Err(Error::DegenerateInput("zero variance".into()));
    }
    Ok((sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0))
}

#[derive(Clone, Debug, PartialEq)]
pub struct Pca {
    /// `rows x n_components` coordinates of the centered input.
    pub projected: Tensor,
    /// `n_components x dim`, orthonormal rows.
    pub components: Tensor,
    /// Variance along each component.
    pub eigenvalues: Vec<f64>,
    pub mean: Vec<f64>,
    /// Sum of all covariance eigenvalues.
    pub total_variance: f64,
}

impl Pca {
    pub fn explained_ratio(&self, component: usize) -> f64 {
        self.eigenvalues[component] / self.total_variance
    }
}

/// Projects `rows` onto their top principal components.
///
/// Components come from power iteration with deflation on the sample
/// covariance. Each component is sign-normalized so that its first
/// nonzero coordinate is positive.
pub fn pca_project(rows: &Tensor, n_components: usize) -> Result<Pca> {
    let (n, d) = rows.shape();
    if n < n_components + 1 || n_components == 0 || n_components > d {
        return Err(Error::Rank(format!(
            "{n} rows of width {d} cannot give {n_components} components"
        )));
    }
    let mean: Vec<f64> = (0..d)
        .map(|c| (0..n).map(|r| rows.get(r, c)).sum::<f64>() / n as f64)
        .collect();
    let mut cov = vec![0.0; d * d];
    for r in 0..n {
        let row = rows.row(r);
        for i in 0..d {
            let di = row[i] - mean[i];
            for j in 0..d {
                cov[i * d + j] += di * (row[j] - mean[j]);
            }
        }
    }
    for c in &mut cov {
        *c /= (n - 1) as f64;
    }
    let total_variance: f64 = (0..d).map(|i| cov[i * d + i]).sum();
    let scale_floor = 1e-12 * total_variance.max(f64::MIN_POSITIVE);

    let mut components: Vec<Vec<f64>> = Vec::with_capacity(n_components);
    let mut eigenvalues = Vec::with_capacity(n_components);
    let mut deflated = cov.clone();
    for k in 0..n_components {
        let mut v: Vec<f64> = (0..d)
            .map(|i| 1.0 + 0.37 * (i as f64 + 1.0).sqrt() + 0.11 * k as f64)
            .collect();
        orthogonalize(&mut v, &components);
        if normalize(&mut v) == 0.0 {
            v = vec![0.0; d];
            v[k] = 1.0;
            orthogonalize(&mut v, &components);
            normalize(&mut v);
        }
        let mut next = vec![0.0; d];
        for _ in 0..PCA_MAX_ITERS {
            for i in 0..d {
                next[i] = (0..d).map(|j| deflated[i * d + j] * v[j]).sum();
            }
            orthogonalize(&mut next, &components);
            orthogonalize(&mut next, &components);
            if normalize(&mut next) <= scale_floor {
                return Err(Error::Rank(format!("no variance left for component {k}")));
            }
            // sign-insensitive direction change
            let same: f64 = next
                .iter()
                .zip(&v)
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                .sqrt();
            let flip: f64 = next
                .iter()
                .zip(&v)
                .map(|(a, b)| (a + b) * (a + b))
                .sum::<f64>()
                .sqrt();
            std::mem::swap(&mut v, &mut next);
            if same.min(flip) < PCA_TOL {
                break;
            }
        }
        let cv: Vec<f64> = (0..d)
            .map(|i| (0..d).map(|j| cov[i * d + j] * v[j]).sum())
            .collect();
        let lambda: f64 = cv.iter().zip(&v).map(|(a, b)| a * b).sum();
        if lambda <= scale_floor {
            return Err(Error::Rank(format!(
                "component {k} has variance {lambda:e}"
            )));
        }
        if let Some(first) = v.iter().find(|x| x.abs() > 1e-12) {
            if *first < 0.0 {
                v.iter_mut().for_each(|x| *x = -*x);
            }
        }
        for i in 0..d {
            for j in 0..d {
                deflated[i * d + j] -= lambda * v[i] * v[j];
            }
        }
        eigenvalues.push(lambda);
        components.push(v);
    }

    let mut projected = Tensor::zeros(n, n_components);
    for r in 0..n {
        let row = rows.row(r);
        for (k, comp) in components.iter().enumerate() {
            let s: f64 = (0..d).map(|i| (row[i] - mean[i]) * comp[i]).sum();
            projected.set(r, k, s);
        }
    }
    Ok(Pca {
        projected,
        components: Tensor::from_rows(&components),
        eigenvalues,
        mean,
        total_variance,
    })
}

fn orthogonalize(v: &mut [f64], basis: &[Vec<f64>]) {
    for b in basis {
        let p: f64 = v.iter().zip(b).map(|(x, y)| x * y).sum();
        for (x, y) in v.iter_mut().zip(b) {
            *x -= p * y;
        }
    }
}

fn normalize(v: &mut [f64]) -> f64 {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n > 1e-300 {
        v.iter_mut().for_each(|x| *x /= n);
        n
    } else {
        0.0
    }
}
