use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

fn check_pair(xs: &[f64], ys: &[f64]) -> Result<()> {
    if xs.len() != ys.len() {
        return Err(Error::LengthMismatch { left: xs.len(), right: ys.len() });
    }
    if xs.len() < 3 {
        return Err(Error::Undefined(format!("correlation needs n >= 3, got {}", xs.len())));
    }
    if xs.iter().chain(ys).any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("correlation input".into()));
    }
    Ok(())
}

/// Product-moment correlation.
pub fn pearson(xs: &[f64], ys: &[f64]) -> Result<f64> {
    check_pair(xs, ys)?;
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (x, y) in xs.iter().zip(ys) {
        let (a, b) = (x - mx, y - my);
        sxy += a * b;
        sxx += a * a;
        syy += b * b;
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::Undefined("correlation of a constant input".into()));
    }
    Ok((sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0))
}

/// 1-based ranks with ties given their average rank.
pub fn average_ranks(xs: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..xs.len()).collect();
    idx.sort_by(|a, b| xs[*a].total_cmp(&xs[*b]));
    let mut ranks = vec![0.0; xs.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && xs[idx[j + 1]] == xs[idx[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for k in i..=j {
            ranks[idx[k]] = r;
        }
        i = j + 1;
    }
    ranks
}

/// Pearson correlation of average ranks.
pub fn spearman(xs: &[f64], ys: &[f64]) -> Result<f64> {
    check_pair(xs, ys)?;
    pearson(&average_ranks(xs), &average_ranks(ys))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorrelationResult {
    pub pearson: f64,
    pub spearman: f64,
    pub n: usize,
}

pub fn correlate(xs: &[f64], ys: &[f64]) -> Result<CorrelationResult> {
    Ok(CorrelationResult { pearson: pearson(xs, ys)?, spearman: spearman(xs, ys)?, n: xs.len() })
}

fn centered(x: &Tensor<f64>) -> (usize, usize, Vec<f64>) {
    let (n, p) = x.dims2();
    let mut v = x.values().to_vec();
    for j in 0..p {
        let m = (0..n).map(|i| v[i * p + j]).sum::<f64>() / n as f64;
        for i in 0..n {
            v[i * p + j] -= m;
        }
    }
    (n, p, v)
}

/// Squared Frobenius norm of `Aᵀ B` for row-major `[n, p]` and `[n, q]`.
fn cross_fro2(n: usize, a: &[f64], p: usize, b: &[f64], q: usize) -> f64 {
    let mut m = vec![0.0; p * q];
    for i in 0..n {
        let (ra, rb) = (&a[i * p..(i + 1) * p], &b[i * q..(i + 1) * q]);
        for (j, x) in ra.iter().enumerate() {
            if *x == 0.0 {
                continue;
            }
            for (k, y) in rb.iter().enumerate() {
                m[j * q + k] += x * y;
            }
        }
    }
    m.iter().map(|v| v * v).sum()
}

/// Linear CKA `‖YᶜᵀXᶜ‖²_F / (‖XᶜᵀXᶜ‖_F·‖YᶜᵀYᶜ‖_F)` between `[n, p]` and
/// `[n, q]` activations.
pub fn cka(x: &Tensor<f64>, y: &Tensor<f64>) -> Result<f64> {
    let (nx, _) = x.dims2();
    let (ny, _) = y.dims2();
    if nx != ny {
        return Err(Error::LengthMismatch { left: nx, right: ny });
    }
    if nx < 2 {
        return Err(Error::Undefined("CKA needs at least two rows".into()));
    }
    let (n, p, xc) = centered(x);
    let (_, q, yc) = centered(y);
    let xx = cross_fro2(n, &xc, p, &xc, p).sqrt();
    let yy = cross_fro2(n, &yc, q, &yc, q).sqrt();
    if xx == 0.0 || yy == 0.0 {
        return Err(Error::Undefined("CKA of a zero-variance input".into()));
    }
    Ok(cross_fro2(n, &yc, q, &xc, p) / (xx * yy))
}
