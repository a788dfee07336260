//! Causal 3D convolution over channels-last video tensors `(B, T, H, W, C)`.
//!
//! Temporal padding is left-only and replicates the earliest frame of the
//! window: output frame `t` reads input frames `t*st - (kt-1) ..= t*st`, with
//! negative indices clamped to frame 0. Spatial padding is zero padding.
//!
//! The kernel is an explicit im2col + GEMM, chunked one output frame at a
//! time so memory stays bounded at high resolution. Gradients for input and
//! weight are implemented as separate ops (no double backward).

use candle_core::{CpuStorage, CustomOp2, CustomOp3, Layout, Shape, Tensor};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeometry {
    /// Kernel extent `(kt, kh, kw)`.
    pub kernel: [usize; 3],
    /// Stride `(st, sh, sw)`.
    pub stride: [usize; 3],
    /// Zero padding `(ph, pw)` applied on both spatial sides.
    pub pad: [usize; 2],
}

impl ConvGeometry {
    pub fn new(kernel: [usize; 3], stride: [usize; 3]) -> Self {
        Self {
            kernel,
            stride,
            pad: [kernel[1] / 2, kernel[2] / 2],
        }
    }

    pub fn pointwise() -> Self {
        Self::new([1, 1, 1], [1, 1, 1])
    }

    /// Output `(T, H, W)` for an input of extent `(t, h, w)`.
    pub fn output_dims(&self, t: usize, h: usize, w: usize) -> Result<(usize, usize, usize)> {
        let [_, kh, kw] = self.kernel;
        let [st, sh, sw] = self.stride;
        let [ph, pw] = self.pad;
        if t == 0 || h + 2 * ph < kh || w + 2 * pw < kw {
            return Err(Error::Dimension(format!(
                "input ({t}, {h}, {w}) too small for kernel {:?}",
                self.kernel
            )));
        }
        Ok((
            (t - 1) / st + 1,
            (h + 2 * ph - kh) / sh + 1,
            (w + 2 * pw - kw) / sw + 1,
        ))
    }

    fn patch_len(&self, cin: usize) -> usize {
        self.kernel.iter().product::<usize>() * cin
    }
}

#[derive(Debug, Clone, Copy)]
struct Dims {
    b: usize,
    t: usize,
    h: usize,
    w: usize,
    c: usize,
}

trait Element: Copy + Default + 'static + std::ops::AddAssign {
    const ONE: Self;
}
impl Element for f32 {
    const ONE: Self = 1.0;
}
impl Element for f64 {
    const ONE: Self = 1.0;
}

/// Fills `cols` (rows = output pixels of frame `to`, cols = patch) for one
/// batch element.
fn im2col<T: Element>(
    x: &[T],
    dims: Dims,
    g: &ConvGeometry,
    out_hw: (usize, usize),
    bi: usize,
    to: usize,
    cols: &mut [T],
) {
    let [kt, kh, kw] = g.kernel;
    let [st, sh, sw] = g.stride;
    let [ph, pw] = g.pad;
    let (ho_n, wo_n) = out_hw;
    let c = dims.c;
    let k = g.patch_len(c);
    let frame_len = dims.h * dims.w * c;
    for ho in 0..ho_n {
        for wo in 0..wo_n {
            let row = &mut cols[(ho * wo_n + wo) * k..(ho * wo_n + wo + 1) * k];
            let mut off = 0;
            for dt in 0..kt {
                let ti = (to * st + dt).saturating_sub(kt - 1);
                let frame = &x[(bi * dims.t + ti) * frame_len..(bi * dims.t + ti + 1) * frame_len];
                for dh in 0..kh {
                    let hi = (ho * sh + dh) as isize - ph as isize;
                    for dw in 0..kw {
                        let wi = (wo * sw + dw) as isize - pw as isize;
                        let dst = &mut row[off..off + c];
                        if hi < 0 || wi < 0 || hi as usize >= dims.h || wi as usize >= dims.w {
                            dst.fill(T::default());
                        } else {
                            let src = (hi as usize * dims.w + wi as usize) * c;
                            dst.copy_from_slice(&frame[src..src + c]);
                        }
                        off += c;
                    }
                }
            }
        }
    }
}

/// Scatter-adds patch gradients back into the input gradient buffer.
fn col2im<T: Element>(
    cols: &[T],
    dims: Dims,
    g: &ConvGeometry,
    out_hw: (usize, usize),
    bi: usize,
    to: usize,
    gx: &mut [T],
) {
    let [kt, kh, kw] = g.kernel;
    let [st, sh, sw] = g.stride;
    let [ph, pw] = g.pad;
    let (ho_n, wo_n) = out_hw;
    let c = dims.c;
    let k = g.patch_len(c);
    let frame_len = dims.h * dims.w * c;
    for ho in 0..ho_n {
        for wo in 0..wo_n {
            let row = &cols[(ho * wo_n + wo) * k..(ho * wo_n + wo + 1) * k];
            let mut off = 0;
            for dt in 0..kt {
                let ti = (to * st + dt).saturating_sub(kt - 1);
                let base = (bi * dims.t + ti) * frame_len;
                for dh in 0..kh {
                    let hi = (ho * sh + dh) as isize - ph as isize;
                    for dw in 0..kw {
                        let wi = (wo * sw + dw) as isize - pw as isize;
                        if !(hi < 0 || wi < 0 || hi as usize >= dims.h || wi as usize >= dims.w) {
                            let dst = base + (hi as usize * dims.w + wi as usize) * c;
                            for (d, s) in gx[dst..dst + c].iter_mut().zip(&row[off..off + c]) {
                                *d += *s;
                            }
                        }
                        off += c;
                    }
                }
            }
        }
    }
}

/// `dst (m x n) = [dst +] lhs (m x k) * rhs (k x n)` with explicit strides
/// `(row, col)` for each operand.
#[allow(clippy::too_many_arguments)]
fn matmul<T: Element>(
    m: usize,
    n: usize,
    k: usize,
    dst: &mut [T],
    accumulate: bool,
    lhs: &[T],
    lhs_rs: usize,
    lhs_cs: usize,
    rhs: &[T],
    rhs_rs: usize,
    rhs_cs: usize,
) {
    if m == 0 || n == 0 {
        return;
    }
    debug_assert!(dst.len() >= m * n);
    // SAFETY: bounds follow from the caller-provided extents; every operand
    // slice covers the strided region it is read/written through.
    unsafe {
        gemm::gemm(
            m,
            n,
            k,
            dst.as_mut_ptr(),
            1,
            n as isize,
            accumulate,
            lhs.as_ptr(),
            lhs_cs as isize,
            lhs_rs as isize,
            rhs.as_ptr(),
            rhs_cs as isize,
            rhs_rs as isize,
            T::ONE,
            T::ONE,
            false,
            false,
            false,
            gemm::Parallelism::None,
        );
    }
}

fn forward_impl<T: Element>(
    x: &[T],
    dims: Dims,
    w: &[T],
    bias: Option<&[T]>,
    cout: usize,
    g: &ConvGeometry,
) -> Result<(Vec<T>, [usize; 5])> {
    let (to_n, ho_n, wo_n) = g.output_dims(dims.t, dims.h, dims.w)?;
    let k = g.patch_len(dims.c);
    let rows = ho_n * wo_n;
    let mut out = match bias {
        Some(b) => b.repeat(dims.b * to_n * rows),
        None => vec![T::default(); dims.b * to_n * rows * cout],
    };
    let mut cols = vec![T::default(); rows * k];
    for bi in 0..dims.b {
        for to in 0..to_n {
            im2col(x, dims, g, (ho_n, wo_n), bi, to, &mut cols);
            let o = (bi * to_n + to) * rows * cout;
            matmul(rows, cout, k, &mut out[o..o + rows * cout], bias.is_some(), &cols, k, 1, w, cout, 1);
        }
    }
    Ok((out, [dims.b, to_n, ho_n, wo_n, cout]))
}

fn grad_input_impl<T: Element>(gy: &[T], dims: Dims, w: &[T], cout: usize, g: &ConvGeometry) -> Result<Vec<T>> {
    let (to_n, ho_n, wo_n) = g.output_dims(dims.t, dims.h, dims.w)?;
    let k = g.patch_len(dims.c);
    let rows = ho_n * wo_n;
    let mut gx = vec![T::default(); dims.b * dims.t * dims.h * dims.w * dims.c];
    let mut cols = vec![T::default(); rows * k];
    for bi in 0..dims.b {
        for to in 0..to_n {
            let o = (bi * to_n + to) * rows * cout;
            // cols = gy (rows x cout) * w^T (cout x k)
            matmul(rows, k, cout, &mut cols, false, &gy[o..o + rows * cout], cout, 1, w, 1, cout);
            col2im(&cols, dims, g, (ho_n, wo_n), bi, to, &mut gx);
        }
    }
    Ok(gx)
}

fn grad_weight_impl<T: Element>(x: &[T], dims: Dims, gy: &[T], cout: usize, g: &ConvGeometry) -> Result<Vec<T>> {
    let (to_n, ho_n, wo_n) = g.output_dims(dims.t, dims.h, dims.w)?;
    let k = g.patch_len(dims.c);
    let rows = ho_n * wo_n;
    // Rows 0..k hold the weight gradient, row k the bias gradient.
    let mut gw = vec![T::default(); (k + 1) * cout];
    let mut cols = vec![T::default(); rows * k];
    for bi in 0..dims.b {
        for to in 0..to_n {
            im2col(x, dims, g, (ho_n, wo_n), bi, to, &mut cols);
            let o = (bi * to_n + to) * rows * cout;
            let gy_frame = &gy[o..o + rows * cout];
            // gw (k x cout) += cols^T (k x rows) * gy (rows x cout)
            matmul(k, cout, rows, &mut gw[..k * cout], true, &cols, 1, k, gy_frame, cout, 1);
            let gb = &mut gw[k * cout..];
            for r in gy_frame.chunks_exact(cout) {
                for (d, v) in gb.iter_mut().zip(r) {
                    *d += *v;
                }
            }
        }
    }
    Ok(gw)
}

fn contiguous<'a, T>(data: &'a [T], layout: &Layout, what: &str) -> candle_core::Result<&'a [T]> {
    match layout.contiguous_offsets() {
        Some((start, end)) => Ok(&data[start..end]),
        None => candle_core::bail!("{what} must be contiguous"),
    }
}

fn dims5(layout: &Layout) -> candle_core::Result<Dims> {
    let (b, t, h, w, c) = layout.shape().dims5()?;
    Ok(Dims { b, t, h, w, c })
}

fn to_candle<E: std::fmt::Display>(e: E) -> candle_core::Error {
    candle_core::Error::Msg(e.to_string())
}

/// Forward op: `x (B,T,H,W,Ci)` with `weight (kt*kh*kw*Ci, Co)`.
struct CausalConv3dOp {
    geom: ConvGeometry,
}

impl CustomOp2 for CausalConv3dOp {
    fn name(&self) -> &'static str {
        "causal-conv3d"
    }

    fn cpu_fwd(
        &self,
        s1: &CpuStorage,
        l1: &Layout,
        s2: &CpuStorage,
        l2: &Layout,
    ) -> candle_core::Result<(CpuStorage, Shape)> {
        let dims = dims5(l1)?;
        let (k, cout) = l2.shape().dims2()?;
        if k != self.geom.patch_len(dims.c) {
            candle_core::bail!(
                "weight rows {k} do not match kernel {:?} x {} channels",
                self.geom.kernel,
                dims.c
            );
        }
        match (s1, s2) {
            (CpuStorage::F32(x), CpuStorage::F32(w)) => {
                let x = contiguous(x, l1, "conv input")?;
                let w = contiguous(w, l2, "conv weight")?;
                let (out, shape) = forward_impl(x, dims, w, None, cout, &self.geom).map_err(to_candle)?;
                Ok((CpuStorage::F32(out), Shape::from(shape.to_vec())))
            }
            (CpuStorage::F64(x), CpuStorage::F64(w)) => {
                let x = contiguous(x, l1, "conv input")?;
                let w = contiguous(w, l2, "conv weight")?;
                let (out, shape) = forward_impl(x, dims, w, None, cout, &self.geom).map_err(to_candle)?;
                Ok((CpuStorage::F64(out), Shape::from(shape.to_vec())))
            }
            _ => candle_core::bail!("causal-conv3d supports matching f32 or f64 operands"),
        }
    }

    fn bwd(
        &self,
        x: &Tensor,
        w: &Tensor,
        _res: &Tensor,
        grad: &Tensor,
    ) -> candle_core::Result<(Option<Tensor>, Option<Tensor>)> {
        let grad = grad.contiguous()?;
        let gx = input_grad(self.geom, x, w, &grad)?;
        let gw = x.apply_op2_no_bwd(&grad, &GradWeightOp { geom: self.geom })?;
        Ok((Some(gx), Some(gw.narrow(0, 0, w.dim(0)?)?)))
    }
}

fn input_grad(geom: ConvGeometry, x: &Tensor, w: &Tensor, grad: &Tensor) -> candle_core::Result<Tensor> {
    let (_, t, h, wd, _) = x.dims5()?;
    grad.apply_op2_no_bwd(
        w,
        &GradInputOp {
            geom,
            input_thw: (t, h, wd),
            cin: x.dim(4)?,
            batch: x.dim(0)?,
        },
    )
}

/// Forward op with a fused bias: `(x, weight, bias (Co,))`.
struct CausalConv3dBiasOp {
    geom: ConvGeometry,
}

impl CustomOp3 for CausalConv3dBiasOp {
    fn name(&self) -> &'static str {
        "causal-conv3d-bias"
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
        let dims = dims5(l1)?;
        let (k, cout) = l2.shape().dims2()?;
        if k != self.geom.patch_len(dims.c) || l3.shape().dims1()? != cout {
            candle_core::bail!(
                "weight {:?} / bias {:?} do not match kernel {:?} x {} channels",
                l2.shape(),
                l3.shape(),
                self.geom.kernel,
                dims.c
            );
        }
        match (s1, s2, s3) {
            (CpuStorage::F32(x), CpuStorage::F32(w), CpuStorage::F32(b)) => {
                let (x, w, b) = (contiguous(x, l1, "conv input")?, contiguous(w, l2, "conv weight")?, contiguous(b, l3, "conv bias")?);
                let (out, shape) = forward_impl(x, dims, w, Some(b), cout, &self.geom).map_err(to_candle)?;
                Ok((CpuStorage::F32(out), Shape::from(shape.to_vec())))
            }
            (CpuStorage::F64(x), CpuStorage::F64(w), CpuStorage::F64(b)) => {
                let (x, w, b) = (contiguous(x, l1, "conv input")?, contiguous(w, l2, "conv weight")?, contiguous(b, l3, "conv bias")?);
                let (out, shape) = forward_impl(x, dims, w, Some(b), cout, &self.geom).map_err(to_candle)?;
                Ok((CpuStorage::F64(out), Shape::from(shape.to_vec())))
            }
            _ => candle_core::bail!("causal-conv3d-bias supports matching f32 or f64 operands"),
        }
    }

    fn bwd(
        &self,
        x: &Tensor,
        w: &Tensor,
        _b: &Tensor,
        _res: &Tensor,
        grad: &Tensor,
    ) -> candle_core::Result<(Option<Tensor>, Option<Tensor>, Option<Tensor>)> {
        let grad = grad.contiguous()?;
        let gx = input_grad(self.geom, x, w, &grad)?;
        let packed = x.apply_op2_no_bwd(&grad, &GradWeightOp { geom: self.geom })?;
        let k = w.dim(0)?;
        let gw = packed.narrow(0, 0, k)?;
        let gb = packed.get(k)?;
        Ok((Some(gx), Some(gw), Some(gb)))
    }
}

/// `(grad_out, weight) -> grad_input`.
struct GradInputOp {
    geom: ConvGeometry,
    input_thw: (usize, usize, usize),
    cin: usize,
    batch: usize,
}

impl CustomOp2 for GradInputOp {
    fn name(&self) -> &'static str {
        "causal-conv3d-grad-input"
    }

    fn cpu_fwd(
        &self,
        s1: &CpuStorage,
        l1: &Layout,
        s2: &CpuStorage,
        l2: &Layout,
    ) -> candle_core::Result<(CpuStorage, Shape)> {
        let (_, cout) = l2.shape().dims2()?;
        let (t, h, w) = self.input_thw;
        let dims = Dims {
            b: self.batch,
            t,
            h,
            w,
            c: self.cin,
        };
        let shape = Shape::from(vec![dims.b, t, h, w, dims.c]);
        match (s1, s2) {
            (CpuStorage::F32(gy), CpuStorage::F32(wt)) => {
                let gy = contiguous(gy, l1, "grad")?;
                let wt = contiguous(wt, l2, "weight")?;
                let gx = grad_input_impl(gy, dims, wt, cout, &self.geom).map_err(to_candle)?;
                Ok((CpuStorage::F32(gx), shape))
            }
            (CpuStorage::F64(gy), CpuStorage::F64(wt)) => {
                let gy = contiguous(gy, l1, "grad")?;
                let wt = contiguous(wt, l2, "weight")?;
                let gx = grad_input_impl(gy, dims, wt, cout, &self.geom).map_err(to_candle)?;
                Ok((CpuStorage::F64(gx), shape))
            }
            _ => candle_core::bail!("causal-conv3d-grad-input: dtype mismatch"),
        }
    }
}

/// `(input, grad_out) -> grad_weight`.
struct GradWeightOp {
    geom: ConvGeometry,
}

impl CustomOp2 for GradWeightOp {
    fn name(&self) -> &'static str {
        "causal-conv3d-grad-weight"
    }

    fn cpu_fwd(
        &self,
        s1: &CpuStorage,
        l1: &Layout,
        s2: &CpuStorage,
        l2: &Layout,
    ) -> candle_core::Result<(CpuStorage, Shape)> {
        let dims = dims5(l1)?;
        let cout = l2.shape().dims5()?.4;
        let shape = Shape::from(vec![self.geom.patch_len(dims.c) + 1, cout]);
        match (s1, s2) {
            (CpuStorage::F32(x), CpuStorage::F32(gy)) => {
                let x = contiguous(x, l1, "input")?;
                let gy = contiguous(gy, l2, "grad")?;
                let gw = grad_weight_impl(x, dims, gy, cout, &self.geom).map_err(to_candle)?;
                Ok((CpuStorage::F32(gw), shape))
            }
            (CpuStorage::F64(x), CpuStorage::F64(gy)) => {
                let x = contiguous(x, l1, "input")?;
                let gy = contiguous(gy, l2, "grad")?;
                let gw = grad_weight_impl(x, dims, gy, cout, &self.geom).map_err(to_candle)?;
                Ok((CpuStorage::F64(gw), shape))
            }
            _ => candle_core::bail!("causal-conv3d-grad-weight: dtype mismatch"),
        }
    }
}

/// Applies the causal convolution (no bias). `weight` has shape
/// `(kt*kh*kw*Ci, Co)` with rows ordered `(dt, dh, dw, ci)`.
pub fn causal_conv3d(x: &Tensor, weight: &Tensor, geom: ConvGeometry) -> Result<Tensor> {
    if x.rank() != 5 {
        return Err(Error::Dimension(format!(
            "conv input must be (B,T,H,W,C), got {:?}",
            x.dims()
        )));
    }
    let x = x.contiguous()?;
    let w = weight.contiguous()?;
    Ok(x.apply_op2(&w, CausalConv3dOp { geom })?)
}

/// [`causal_conv3d`] plus a per-output-channel bias, fused.
pub fn causal_conv3d_bias(x: &Tensor, weight: &Tensor, bias: &Tensor, geom: ConvGeometry) -> Result<Tensor> {
    if x.rank() != 5 {
        return Err(Error::Dimension(format!(
            "conv input must be (B,T,H,W,C), got {:?}",
            x.dims()
        )));
    }
    let x = x.contiguous()?;
    Ok(x.apply_op3(&weight.contiguous()?, &bias.contiguous()?, CausalConv3dBiasOp { geom })?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{normal_tensor, seeded};
    use candle_core::{DType, Device, Var};

    /// Direct 7-deep loop, independent of the im2col path.
    fn reference(x: &[f64], d: [usize; 5], w: &[f64], cout: usize, g: &ConvGeometry) -> Vec<f64> {
        let [b, t, h, wd, c] = d;
        let (to_n, ho_n, wo_n) = g.output_dims(t, h, wd).unwrap();
        let [kt, kh, kw] = g.kernel;
        let mut out = vec![0.0; b * to_n * ho_n * wo_n * cout];
        for bi in 0..b {
            for to in 0..to_n {
                for ho in 0..ho_n {
                    for wo in 0..wo_n {
                        for co in 0..cout {
                            let mut acc = 0.0;
                            for dt in 0..kt {
                                let ti = (to as isize * g.stride[0] as isize + dt as isize
                                    - (kt as isize - 1))
                                    .max(0) as usize;
                                for dh in 0..kh {
                                    for dw in 0..kw {
                                        let hi = (ho * g.stride[1] + dh) as isize - g.pad[0] as isize;
                                        let wi = (wo * g.stride[2] + dw) as isize - g.pad[1] as isize;
                                        if hi < 0 || wi < 0 || hi >= h as isize || wi >= wd as isize {
                                            continue;
                                        }
                                        for ci in 0..c {
                                            let xv = x[(((bi * t + ti) * h + hi as usize) * wd + wi as usize) * c + ci];
                                            let row = ((dt * kh + dh) * kw + dw) * c + ci;
                                            acc += xv * w[row * cout + co];
                                        }
                                    }
                                }
                            }
                            out[(((bi * to_n + to) * ho_n + ho) * wo_n + wo) * cout + co] = acc;
                        }
                    }
                }
            }
        }
        out
    }

    fn check_against_reference(d: [usize; 5], cout: usize, g: ConvGeometry) {
        let dev = Device::Cpu;
        let mut rng = seeded(3);
        let x = normal_tensor(&mut rng, &d, DType::F64, &dev).unwrap();
        let k = g.patch_len(d[4]);
        let w = normal_tensor(&mut rng, &[k, cout], DType::F64, &dev).unwrap();
        let y = causal_conv3d(&x, &w, g).unwrap();
        let expect = reference(
            &x.flatten_all().unwrap().to_vec1().unwrap(),
            d,
            &w.flatten_all().unwrap().to_vec1().unwrap(),
            cout,
            &g,
        );
        let got: Vec<f64> = y.flatten_all().unwrap().to_vec1().unwrap();
        assert_eq!(got.len(), expect.len());
        for (a, b) in got.iter().zip(&expect) {
            assert!((a - b).abs() < 1e-10, "{a} vs {b}");
        }
    }

    #[test]
    fn matches_reference_stride_one() {
        check_against_reference([2, 5, 6, 7, 3], 4, ConvGeometry::new([3, 3, 3], [1, 1, 1]));
    }

    #[test]
    fn matches_reference_strided() {
        check_against_reference([1, 9, 8, 8, 2], 3, ConvGeometry::new([3, 3, 3], [2, 2, 2]));
        check_against_reference([1, 5, 8, 6, 2], 3, ConvGeometry::new([3, 3, 3], [1, 2, 2]));
    }

    #[test]
    fn output_lengths_follow_one_plus_t_rule() {
        let g = ConvGeometry::new([3, 3, 3], [2, 2, 2]);
        assert_eq!(g.output_dims(17, 64, 64).unwrap(), (9, 32, 32));
        assert_eq!(g.output_dims(1, 64, 64).unwrap(), (1, 32, 32));
        assert_eq!(g.output_dims(9, 32, 32).unwrap(), (5, 16, 16));
    }

    #[test]
    fn gradients_match_finite_differences() {
        let dev = Device::Cpu;
        let mut rng = seeded(11);
        let g = ConvGeometry::new([3, 3, 3], [2, 2, 1]);
        let x = Var::from_tensor(&normal_tensor(&mut rng, &[1, 5, 4, 3, 2], DType::F64, &dev).unwrap()).unwrap();
        let w = Var::from_tensor(&normal_tensor(&mut rng, &[54, 3], DType::F64, &dev).unwrap()).unwrap();
        let probe = normal_tensor(&mut rng, &[1, 3, 2, 3, 3], DType::F64, &dev).unwrap();
        let loss = |x: &Tensor, w: &Tensor| -> f64 {
            causal_conv3d(x, w, g)
                .unwrap()
                .mul(&probe)
                .unwrap()
                .sqr()
                .unwrap()
                .sum_all()
                .unwrap()
                .to_scalar::<f64>()
                .unwrap()
        };
        let l = causal_conv3d(&x, &w, g).unwrap().mul(&probe).unwrap().sqr().unwrap().sum_all().unwrap();
        let grads = l.backward().unwrap();
        for var in [&x, &w] {
            let analytic: Vec<f64> = grads.get(var).unwrap().flatten_all().unwrap().to_vec1().unwrap();
            let base: Vec<f64> = var.flatten_all().unwrap().to_vec1().unwrap();
            for i in (0..base.len()).step_by(7) {
                let eval = |delta: f64| {
                    let mut v = base.clone();
                    v[i] += delta;
                    let t = Tensor::from_vec(v, var.shape(), &dev).unwrap();
                    if std::ptr::eq(var, &x) {
                        loss(&t, &w)
                    } else {
                        loss(&x, &t)
                    }
                };
                let fd = (eval(1e-5) - eval(-1e-5)) / 2e-5;
                let err = (fd - analytic[i]).abs() / fd.abs().max(analytic[i].abs()).max(1e-8);
                assert!(err < 1e-6, "index {i}: fd {fd} analytic {}", analytic[i]);
            }
        }
    }

    #[test]
    fn fused_bias_matches_separate_add() {
        let dev = Device::Cpu;
        let mut rng = seeded(8);
        let g = ConvGeometry::new([3, 3, 3], [1, 2, 2]);
        let x = Var::from_tensor(&normal_tensor(&mut rng, &[2, 5, 6, 6, 3], DType::F64, &dev).unwrap()).unwrap();
        let w = Var::from_tensor(&normal_tensor(&mut rng, &[81, 4], DType::F64, &dev).unwrap()).unwrap();
        let b = Var::from_tensor(&normal_tensor(&mut rng, &[4], DType::F64, &dev).unwrap()).unwrap();
        let probe = normal_tensor(&mut rng, &[2, 5, 3, 3, 4], DType::F64, &dev).unwrap();
        let fused = causal_conv3d_bias(&x, &w, &b, g).unwrap();
        let split = causal_conv3d(&x, &w, g).unwrap().broadcast_add(&b).unwrap();
        let diff = |a: &Tensor, b: &Tensor| -> f64 {
            (a - b).unwrap().abs().unwrap().max_all().unwrap().to_scalar().unwrap()
        };
        assert!(diff(&fused, &split) < 1e-12);
        let g1 = (fused * &probe).unwrap().sum_all().unwrap().backward().unwrap();
        let g2 = (split * &probe).unwrap().sum_all().unwrap().backward().unwrap();
        for v in [&x, &w, &b] {
            assert!(diff(g1.get(v).unwrap(), g2.get(v).unwrap()) < 1e-10);
        }
    }

    #[test]
    fn f32_and_f64_agree() {
        let dev = Device::Cpu;
        let mut rng = seeded(5);
        let g = ConvGeometry::new([3, 3, 3], [1, 1, 1]);
        let x = normal_tensor(&mut rng, &[1, 3, 5, 5, 4], DType::F64, &dev).unwrap();
        let w = normal_tensor(&mut rng, &[108, 2], DType::F64, &dev).unwrap();
        let a: Vec<f64> = causal_conv3d(&x, &w, g).unwrap().flatten_all().unwrap().to_vec1().unwrap();
        let b: Vec<f32> = causal_conv3d(
            &x.to_dtype(DType::F32).unwrap(),
            &w.to_dtype(DType::F32).unwrap(),
            g,
        )
        .unwrap()
        .flatten_all()
        .unwrap()
        .to_vec1()
        .unwrap();
        for (a, b) in a.iter().zip(&b) {
            assert!((a - *b as f64).abs() < 1e-4);
        }
    }
}
