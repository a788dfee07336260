//! PCA of latent channels, projected to RGB.

use candle_core::{DType, Tensor};
use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const SIGN_RULE: &str = "max_abs_loading_positive";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PcaBasis {
    /// `components[j]` is the unit-norm loading vector (length c) of
    /// principal component `j`.
    pub components: [Vec<f64>; 3],
    pub explained_variance: [f64; 3],
    pub mean: Vec<f64>,
    pub sign_rule: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PcaRgb {
    /// Leading dims of the input with 3 appended.
    pub shape: Vec<usize>,
    /// Row-major RGB values in `[0, 1]`.
    pub rgb: Vec<f32>,
    pub basis: PcaBasis,
}

/// Fits PCA over all positions of `latents` (any rank, channels last),
/// projects onto the top three components and min-max normalizes each.
pub fn pca_rgb(latents: &Tensor) -> Result<PcaRgb> {
    let dims = latents.dims().to_vec();
    let c = *dims.last().ok_or_else(|| Error::Dimension("PCA input is a scalar".into()))?;
    if c < 3 {
        return Err(Error::Dimension(format!("PCA to RGB needs at least 3 channels, got {c}")));
    }
    let n = latents.elem_count() / c;
    if n < 2 {
        return Err(Error::Degenerate("PCA needs at least two positions".into()));
    }
    let rows: Vec<f64> = latents.to_dtype(DType::F64)?.flatten_all()?.to_vec1()?;
    let mut mean = vec![0f64; c];
    for r in rows.chunks(c) {
        for (m, v) in mean.iter_mut().zip(r) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    let mut cov = DMatrix::<f64>::zeros(c, c);
    for r in rows.chunks(c) {
        for i in 0..c {
            let di = r[i] - mean[i];
            for j in i..c {
                cov[(i, j)] += di * (r[j] - mean[j]);
            }
        }
    }
    for i in 0..c {
        for j in i..c {
            let v = cov[(i, j)] / (n - 1) as f64;
            cov[(i, j)] = v;
            cov[(j, i)] = v;
        }
    }
    if cov.trace() <= 0.0 || !cov.trace().is_finite() {
        return Err(Error::Degenerate("latents have zero variance".into()));
    }
    let eig = SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..c).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]).then(a.cmp(&b)));
    let mut comps: [Vec<f64>; 3] = Default::default();
    let mut var = [0f64; 3];
    for k in 0..3 {
        let col = eig.eigenvectors.column(order[k]);
        let mut v: Vec<f64> = col.iter().copied().collect();
        let pivot = v
            .iter()
            .enumerate()
            .fold(0usize, |best, (i, x)| if x.abs() > v[best].abs() { i } else { best });
        if v[pivot] < 0.0 {
            v.iter_mut().for_each(|x| *x = -*x);
        }
        comps[k] = v;
        var[k] = eig.eigenvalues[order[k]].max(0.0);
    }

    let mut proj = vec![0f64; n * 3];
    for (p, r) in rows.chunks(c).enumerate() {
        for k in 0..3 {
            proj[p * 3 + k] = r.iter().zip(&mean).zip(&comps[k]).map(|((x, m), w)| (x - m) * w).sum();
        }
    }
    let mut rgb = vec![0f32; n * 3];
    for k in 0..3 {
        let (lo, hi) = (0..n).fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), p| {
            (lo.min(proj[p * 3 + k]), hi.max(proj[p * 3 + k]))
        });
        let span = hi - lo;
        // Relative threshold: a numerically flat component maps to 0.
        let flat = span <= 1e-12 * (1.0 + hi.abs().max(lo.abs()));
        for p in 0..n {
            rgb[p * 3 + k] = if flat { 0.0 } else { ((proj[p * 3 + k] - lo) / span) as f32 };
        }
    }
    let mut shape = dims[..dims.len() - 1].to_vec();
    shape.push(3);
    Ok(PcaRgb {
        shape,
        rgb,
        basis: PcaBasis {
            components: comps,
            explained_variance: var,
            mean,
            sign_rule: SIGN_RULE.to_string(),
        },
    })
}
