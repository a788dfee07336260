//! PSNR and SSIM on clips rescaled from `[-1, 1]` to `[0, 1]`.

use crate::error::{Error, Result};
use crate::model::VideoClip;

/// Returned for identical inputs.
pub const PSNR_CAP_DB: f64 = 100.0;

const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;
const SSIM_C1: f64 = 0.01 * 0.01;
const SSIM_C2: f64 = 0.03 * 0.03;

fn check_shapes(a: &VideoClip, b: &VideoClip) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::Dimension(format!(
            "clip shapes differ: {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
}

/// `10 log10(1 / MSE)` on the `[0, 1]` range, capped at [`PSNR_CAP_DB`].
pub fn psnr(a: &VideoClip, b: &VideoClip) -> Result<f64> {
    check_shapes(a, b)?;
    let mse = a
        .data
        .iter()
        .zip(&b.data)
        .map(|(&x, &y)| {
            let d = (x as f64 - y as f64) / 2.0;
            d * d
        })
        .sum::<f64>()
        / a.data.len() as f64;
    psnr_from_mse(mse)
}

/// PSNR for a given MSE on the `[0, 1]` range.
pub fn psnr_from_mse(mse: f64) -> Result<f64> {
    if !mse.is_finite() || mse < 0.0 {
        return Err(Error::Numeric(format!("invalid mse {mse}")));
    }
    if mse == 0.0 {
        return Ok(PSNR_CAP_DB);
    }
    Ok((10.0 * (1.0 / mse).log10()).min(PSNR_CAP_DB))
}

fn gaussian_kernel() -> [f64; SSIM_WINDOW] {
    let mut k = [0f64; SSIM_WINDOW];
    let c = (SSIM_WINDOW / 2) as f64;
    for (i, v) in k.iter_mut().enumerate() {
        let d = i as f64 - c;
        *v = (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    let s: f64 = k.iter().sum();
    k.map(|v| v / s)
}

/// Separable valid-mode Gaussian filter of an `h x w` plane.
fn filter_valid(plane: &[f64], h: usize, w: usize, k: &[f64; SSIM_WINDOW]) -> Vec<f64> {
    let (oh, ow) = (h - SSIM_WINDOW + 1, w - SSIM_WINDOW + 1);
    let mut rows = vec![0f64; h * ow];
    for y in 0..h {
        for x in 0..ow {
            rows[y * ow + x] = (0..SSIM_WINDOW).map(|i| k[i] * plane[y * w + x + i]).sum();
        }
    }
    let mut out = vec![0f64; oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = (0..SSIM_WINDOW).map(|i| k[i] * rows[(y + i) * ow + x]).sum();
        }
    }
    out
}

/// Mean SSIM over frames, channels and valid 11x11 windows.
pub fn ssim(a: &VideoClip, b: &VideoClip) -> Result<f64> {
    check_shapes(a, b)?;
    if a.height < SSIM_WINDOW || a.width < SSIM_WINDOW {
        return Err(Error::Input(format!(
            "SSIM needs frames of at least {SSIM_WINDOW}x{SSIM_WINDOW}, got {}x{}",
            a.height, a.width
        )));
    }
    let k = gaussian_kernel();
    let (h, w) = (a.height, a.width);
    let mut total = 0f64;
    let mut count = 0usize;
    for t in 0..a.frames {
        let fa = a.frame(t);
        let fb = b.frame(t);
        for c in 0..3 {
            let pa: Vec<f64> = (0..h * w).map(|i| (fa[i * 3 + c] as f64 + 1.0) / 2.0).collect();
            let pb: Vec<f64> = (0..h * w).map(|i| (fb[i * 3 + c] as f64 + 1.0) / 2.0).collect();
            let prod = |p: &[f64], q: &[f64]| -> Vec<f64> { p.iter().zip(q).map(|(x, y)| x * y).collect() };
            let mu_a = filter_valid(&pa, h, w, &k);
            let mu_b = filter_valid(&pb, h, w, &k);
            let saa = filter_valid(&prod(&pa, &pa), h, w, &k);
            let sbb = filter_valid(&prod(&pb, &pb), h, w, &k);
            let sab = filter_valid(&prod(&pa, &pb), h, w, &k);
            for i in 0..mu_a.len() {
                let (ma, mb) = (mu_a[i], mu_b[i]);
                let va = saa[i] - ma * ma;
                let vb = sbb[i] - mb * mb;
                let cov = sab[i] - ma * mb;
                let num = (2.0 * ma * mb + SSIM_C1) * (2.0 * cov + SSIM_C2);
                let den = (ma * ma + mb * mb + SSIM_C1) * (va + vb + SSIM_C2);
                total += num / den;
                count += 1;
            }
        }
    }
    Ok(total / count as f64)
}
