use alloc::vec::Vec;

use crate::error::{domain_err, shape_err, Result};
use crate::tensor::Tensor;

/// `n x d` feature matrix from an external embedding network.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingSet {
    n: usize,
    d: usize,
    features: Vec<f64>,
}

impl EmbeddingSet {
    pub fn new(features: &Tensor) -> Result<Self> {
        let (n, d) = features.matrix_dims()?;
        if !features.all_finite() {
            return Err(domain_err!("embedding set contains non-finite values"));
        }
        Ok(Self {
            n,
            d,
            features: features.to_f64(),
        })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let d = rows.first().map_or(0, Vec::len);
        if rows.is_empty() || d == 0 {
            return Err(shape_err!("embedding set needs at least one non-empty row"));
        }
        if rows.iter().any(|r| r.len() != d) {
            return Err(shape_err!("embedding rows have differing lengths"));
        }
        if rows.iter().flatten().any(|v| !v.is_finite()) {
            return Err(domain_err!("embedding set contains non-finite values"));
        }
        Ok(Self {
            n: rows.len(),
            d,
            features: rows.concat(),
        })
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn dim(&self) -> usize {
        self.d
    }

    fn mean_and_cov(&self) -> (Vec<f64>, Vec<f64>) {
        let (n, d) = (self.n, self.d);
        let mut mu = alloc::vec![0.0; d];
        for row in self.features.chunks(d) {
            for (m, v) in mu.iter_mut().zip(row) {
                *m += v;
            }
        }
        mu.iter_mut().for_each(|m| *m /= n as f64);
        let mut cov = alloc::vec![0.0; d * d];
        for row in self.features.chunks(d) {
            for i in 0..d {
                let di = row[i] - mu[i];
                for j in i..d {
                    cov[i * d + j] += di * (row[j] - mu[j]);
                }
            }
        }
        let denom = (n - 1) as f64;
        for i in 0..d {
            for j in i..d {
                let v = cov[i * d + j] / denom;
                cov[i * d + j] = v;
                cov[j * d + i] = v;
            }
        }
        (mu, cov)
    }
}

/// Eigenvalues and column eigenvectors of a symmetric `d x d` matrix by
/// cyclic Jacobi rotations.
pub fn symmetric_eigen(matrix: &[f64], d: usize) -> (Vec<f64>, Vec<f64>) {
    let mut a = matrix.to_vec();
    let mut v = alloc::vec![0.0; d * d];
    for i in 0..d {
        v[i * d + i] = 1.0;
    }
    for _sweep in 0..100 {
        let off: f64 = (0..d)
            .flat_map(|i| (0..d).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| a[i * d + j] * a[i * d + j])
            .sum();
        let scale: f64 = a.iter().map(|x| x * x).sum();
        if off <= 1e-30 * scale.max(f64::MIN_POSITIVE) {
            break;
        }
        for p in 0..d {
            for q in p + 1..d {
                let apq = a[p * d + q];
                if apq == 0.0 {
                    continue;
                }
                let theta = (a[q * d + q] - a[p * d + p]) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + libm::sqrt(theta * theta + 1.0));
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / libm::sqrt(t * t + 1.0);
                let s = t * c;
                for k in 0..d {
                    let akp = a[k * d + p];
                    let akq = a[k * d + q];
                    a[k * d + p] = c * akp - s * akq;
                    a[k * d + q] = s * akp + c * akq;
                }
                for k in 0..d {
                    let apk = a[p * d + k];
                    let aqk = a[q * d + k];
                    a[p * d + k] = c * apk - s * aqk;
                    a[q * d + k] = s * apk + c * aqk;
                }
                for k in 0..d {
                    let vkp = v[k * d + p];
                    let vkq = v[k * d + q];
                    v[k * d + p] = c * vkp - s * vkq;
                    v[k * d + q] = s * vkp + c * vkq;
                }
            }
        }
    }
    ((0..d).map(|i| a[i * d + i]).collect(), v)
}

fn sqrt_psd(m: &[f64], d: usize) -> Vec<f64> {
    let (vals, vecs) = symmetric_eigen(m, d);
    let roots: Vec<f64> = vals.iter().map(|&l| libm::sqrt(l.max(0.0))).collect();
    let mut out = alloc::vec![0.0; d * d];
    for i in 0..d {
        for j in 0..d {
            out[i * d + j] = (0..d).map(|k| vecs[i * d + k] * roots[k] * vecs[j * d + k]).sum();
        }
    }
    out
}

fn matmul(a: &[f64], b: &[f64], d: usize) -> Vec<f64> {
    let mut out = alloc::vec![0.0; d * d];
    for i in 0..d {
        for k in 0..d {
            let aik = a[i * d + k];
            for j in 0..d {
                out[i * d + j] += aik * b[k * d + j];
            }
        }
    }
    out
}

/// Fréchet distance between Gaussians fitted to two embedding sets.
///
/// `tr sqrt(Σa Σb)` is taken as `tr sqrt(sqrt(Σa) Σb sqrt(Σa))`, which has the
/// same eigenvalues but is symmetric.
pub fn fid(a: &EmbeddingSet, b: &EmbeddingSet) -> Result<f64> {
    if a.d != b.d {
        return Err(shape_err!("feature dimensions differ: {} vs {}", a.d, b.d));
    }
    if a.n < 2 || b.n < 2 {
        return Err(domain_err!("FID needs at least 2 samples per set, got {} and {}", a.n, b.n));
    }
    let d = a.d;
    let (mu_a, cov_a) = a.mean_and_cov();
    let (mu_b, cov_b) = b.mean_and_cov();
    let mean_term: f64 = mu_a.iter().zip(&mu_b).map(|(x, y)| (x - y) * (x - y)).sum();
    let root_a = sqrt_psd(&cov_a, d);
    let mut inner = matmul(&matmul(&root_a, &cov_b, d), &root_a, d);
    for i in 0..d {
        for j in i + 1..d {
            let s = 0.5 * (inner[i * d + j] + inner[j * d + i]);
            inner[i * d + j] = s;
            inner[j * d + i] = s;
        }
    }
    let (vals, _) = symmetric_eigen(&inner, d);
    let tr_root: f64 = vals.iter().map(|&l| libm::sqrt(l.max(0.0))).sum();
    let tr: f64 = (0..d).map(|i| cov_a[i * d + i] + cov_b[i * d + i]).sum();
    Ok((mean_term + tr - 2.0 * tr_root).max(0.0))
}
