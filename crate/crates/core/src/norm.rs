//! Fused per-frame group normalization with optional SiLU, as a custom op
//! with an analytic backward pass.

use candle_core::{CpuStorage, CustomOp2, CustomOp3, Layout, Shape, Tensor};

use crate::error::{Error, Result};

trait Float: Copy + 'static {
    fn to_f64(self) -> f64;
    fn from_f64(v: f64) -> Self;
}
impl Float for f32 {
    fn to_f64(self) -> f64 {
        self as f64
    }
    fn from_f64(v: f64) -> Self {
        v as f32
    }
}
impl Float for f64 {
    fn to_f64(self) -> f64 {
        self
    }
    fn from_f64(v: f64) -> Self {
        v
    }
}

#[derive(Debug, Clone, Copy)]
struct NormSpec {
    groups: usize,
    eps: f64,
    silu: bool,
}

fn sigmoid(a: f64) -> f64 {
    1.0 / (1.0 + (-a).exp())
}

/// Mean and reciprocal std of one group in one frame.
fn group_stats<T: Float>(frame: &[T], c: usize, lo: usize, hi: usize, eps: f64) -> (f64, f64) {
    let mut sum = 0.0;
    let mut count = 0usize;
    for px in frame.chunks_exact(c) {
        for v in &px[lo..hi] {
            sum += v.to_f64();
        }
        count += hi - lo;
    }
    let mean = sum / count as f64;
    let mut var = 0.0;
    for px in frame.chunks_exact(c) {
        for v in &px[lo..hi] {
            let d = v.to_f64() - mean;
            var += d * d;
        }
    }
    (mean, 1.0 / (var / count as f64 + eps).sqrt())
}

fn forward_impl<T: Float>(x: &[T], aff: &[T], frame_len: usize, c: usize, s: NormSpec) -> Vec<T> {
    let cg = c / s.groups;
    let mut out = vec![T::from_f64(0.0); x.len()];
    for (frame, dst) in x.chunks_exact(frame_len).zip(out.chunks_exact_mut(frame_len)) {
        for g in 0..s.groups {
            let (lo, hi) = (g * cg, (g + 1) * cg);
            let (mean, rstd) = group_stats(frame, c, lo, hi, s.eps);
            for (px, dpx) in frame.chunks_exact(c).zip(dst.chunks_exact_mut(c)) {
                for ch in lo..hi {
                    let a = (px[ch].to_f64() - mean) * rstd * aff[ch].to_f64() + aff[c + ch].to_f64();
                    dpx[ch] = T::from_f64(if s.silu { a * sigmoid(a) } else { a });
                }
            }
        }
    }
    out
}

/// Returns `[grad_x ; grad_gamma ; grad_beta]` packed in one buffer.
fn backward_impl<T: Float>(x: &[T], aff: &[T], gy: &[T], frame_len: usize, c: usize, s: NormSpec) -> Vec<T> {
    let cg = c / s.groups;
    let n = x.len();
    let mut gx = vec![0f64; n];
    let mut gaff = vec![0f64; 2 * c];
    let mut da = vec![0f64; frame_len];
    for (fi, frame) in x.chunks_exact(frame_len).enumerate() {
        let base = fi * frame_len;
        let gframe = &gy[base..base + frame_len];
        for g in 0..s.groups {
            let (lo, hi) = (g * cg, (g + 1) * cg);
            let (mean, rstd) = group_stats(frame, c, lo, hi, s.eps);
            let mut sum_dxhat = 0.0;
            let mut sum_dxhat_xhat = 0.0;
            let mut count = 0usize;
            for (p, px) in frame.chunks_exact(c).enumerate() {
                for ch in lo..hi {
                    let i = p * c + ch;
                    let xhat = (px[ch].to_f64() - mean) * rstd;
                    let gamma = aff[ch].to_f64();
                    let mut d = gframe[i].to_f64();
                    if s.silu {
                        let a = xhat * gamma + aff[c + ch].to_f64();
                        let sg = sigmoid(a);
                        d *= sg * (1.0 + a * (1.0 - sg));
                    }
                    da[i] = d;
                    gaff[ch] += d * xhat;
                    gaff[c + ch] += d;
                    let dxhat = d * gamma;
                    sum_dxhat += dxhat;
                    sum_dxhat_xhat += dxhat * xhat;
                    count += 1;
                }
            }
            let m_dxhat = sum_dxhat / count as f64;
            let m_dxhat_xhat = sum_dxhat_xhat / count as f64;
            for (p, px) in frame.chunks_exact(c).enumerate() {
                for ch in lo..hi {
                    let i = p * c + ch;
                    let xhat = (px[ch].to_f64() - mean) * rstd;
                    let dxhat = da[i] * aff[ch].to_f64();
                    gx[base + i] = rstd * (dxhat - m_dxhat - xhat * m_dxhat_xhat);
                }
            }
        }
    }
    gx.into_iter().chain(gaff).map(T::from_f64).collect()
}

fn slice<'a, T>(data: &'a [T], l: &Layout) -> candle_core::Result<&'a [T]> {
    match l.contiguous_offsets() {
        Some((a, b)) => Ok(&data[a..b]),
        None => candle_core::bail!("group norm operands must be contiguous"),
    }
}

fn frame_geometry(l: &Layout) -> candle_core::Result<(usize, usize)> {
    let (_, _, h, w, c) = l.shape().dims5()?;
    Ok((h * w * c, c))
}

struct NormOp(NormSpec);

impl CustomOp2 for NormOp {
    fn name(&self) -> &'static str {
        "frame-group-norm"
    }

    fn cpu_fwd(&self, s1: &CpuStorage, l1: &Layout, s2: &CpuStorage, l2: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let (frame_len, c) = frame_geometry(l1)?;
        let out = match (s1, s2) {
            (CpuStorage::F32(x), CpuStorage::F32(a)) => {
                CpuStorage::F32(forward_impl(slice(x, l1)?, slice(a, l2)?, frame_len, c, self.0))
            }
            (CpuStorage::F64(x), CpuStorage::F64(a)) => {
                CpuStorage::F64(forward_impl(slice(x, l1)?, slice(a, l2)?, frame_len, c, self.0))
            }
            _ => candle_core::bail!("frame-group-norm supports matching f32 or f64 operands"),
        };
        Ok((out, l1.shape().clone()))
    }

    fn bwd(&self, x: &Tensor, aff: &Tensor, _res: &Tensor, grad: &Tensor) -> candle_core::Result<(Option<Tensor>, Option<Tensor>)> {
        let grad = grad.contiguous()?;
        let packed = x.apply_op3_no_bwd(aff, &grad, &NormGradOp(self.0))?;
        let n = x.elem_count();
        let c = aff.dim(1)?;
        let gx = packed.narrow(0, 0, n)?.reshape(x.shape())?;
        let gaff = packed.narrow(0, n, 2 * c)?.reshape((2, c))?;
        Ok((Some(gx), Some(gaff)))
    }
}

struct NormGradOp(NormSpec);

impl CustomOp3 for NormGradOp {
    fn name(&self) -> &'static str {
        "frame-group-norm-grad"
    }

    fn cpu_fwd(
        &self,
        s1: &CpuStorage,
        l1: &Layout,
        s2: &CpuStorage,
        l2: &Layout,
        s3: &CpuStorage,
        l3: &Layout,
    ) -> candle_core::Result<(CpuStorage, Shape)> {
        let (frame_len, c) = frame_geometry(l1)?;
        let out = match (s1, s2, s3) {
            (CpuStorage::F32(x), CpuStorage::F32(a), CpuStorage::F32(g)) => CpuStorage::F32(backward_impl(
                slice(x, l1)?,
                slice(a, l2)?,
                slice(g, l3)?,
                frame_len,
                c,
                self.0,
            )),
            (CpuStorage::F64(x), CpuStorage::F64(a), CpuStorage::F64(g)) => CpuStorage::F64(backward_impl(
                slice(x, l1)?,
                slice(a, l2)?,
                slice(g, l3)?,
                frame_len,
                c,
                self.0,
            )),
            _ => candle_core::bail!("frame-group-norm-grad: dtype mismatch"),
        };
        Ok((out, Shape::from(l1.shape().elem_count() + 2 * c)))
    }
}

/// Group norm over `(H, W, C / groups)` of every frame of `x: (B, T, H, W, C)`,
/// scaled by `gamma`, shifted by `beta`, optionally followed by SiLU.
pub fn frame_group_norm(x: &Tensor, gamma: &Tensor, beta: &Tensor, groups: usize, eps: f64, silu: bool) -> Result<Tensor> {
    let (_, _, _, _, c) = x
        .dims5()
        .map_err(|_| Error::Dimension(format!("group norm input must be (B,T,H,W,C), got {:?}", x.dims())))?;
    if groups == 0 || c % groups != 0 {
        return Err(Error::Config(format!("{c} channels cannot form {groups} groups")));
    }
    let aff = Tensor::stack(&[gamma, beta], 0)?.contiguous()?;
    Ok(x.contiguous()?.apply_op2(&aff, NormOp(NormSpec { groups, eps, silu }))?)
}
