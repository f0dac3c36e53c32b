//! 2D convolution and transposed convolution, forward and backward.
//!
//! Shapes follow the NCHW convention. Convolution weights are
//! `[out_ch, in_ch, kh, kw]`, transposed-convolution weights are
//! `[in_ch, out_ch, kh, kw]`. All heavy lifting is lowered to im2col/col2im
//! plus a dense f64 GEMM so the toy training loop stays within its runtime
//! budget.

use crate::error::TensorError;
use crate::tensor::{dims4, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PadMode {
    Zero,
    Replicate,
}

/// Geometry of one convolution layer.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvSpec {
    pub kernel: (usize, usize),
    pub stride: (usize, usize),
    pub dilation: (usize, usize),
    pub padding: (usize, usize),
    pub pad_mode: PadMode,
    pub in_channels: usize,
    pub out_channels: usize,
}

impl ConvSpec {
    pub fn simple(kernel: (usize, usize), in_channels: usize, out_channels: usize) -> ConvSpec {
        ConvSpec {
            kernel,
            stride: (1, 1),
            dilation: (1, 1),
            padding: (0, 0),
            pad_mode: PadMode::Zero,
            in_channels,
            out_channels,
        }
    }

    pub fn with_stride(mut self, stride: (usize, usize)) -> ConvSpec {
        self.stride = stride;
        self
    }

    pub fn with_dilation(mut self, dilation: (usize, usize)) -> ConvSpec {
        self.dilation = dilation;
        self
    }

    pub fn with_padding(mut self, padding: (usize, usize)) -> ConvSpec {
        self.padding = padding;
        self
    }

    pub fn with_pad_mode(mut self, mode: PadMode) -> ConvSpec {
        self.pad_mode = mode;
        self
    }

    pub fn validate(&self) -> Result<(), TensorError> {
        let ok = self.kernel.0 >= 1
            && self.kernel.1 >= 1
            && self.stride.0 >= 1
            && self.stride.1 >= 1
            && self.dilation.0 >= 1
            && self.dilation.1 >= 1
            && self.in_channels >= 1
            && self.out_channels >= 1;
        if !ok {
            return Err(TensorError::BadParameter {
                what: format!("conv spec has a zero extent: {self:?}"),
            });
        }
        Ok(())
    }

    /// `out = floor((in + 2p - d*(k-1) - 1)/s) + 1` on one axis.
    fn out_extent_axis(in_ext: usize, k: usize, s: usize, d: usize, p: usize) -> Option<usize> {
        let span = d * (k - 1) + 1;
        let padded = in_ext + 2 * p;
        if padded < span {
            return None;
        }
        Some((padded - span) / s + 1)
    }

    pub fn out_extent(&self, in_hw: (usize, usize)) -> Result<(usize, usize), TensorError> {
        let oh = Self::out_extent_axis(
            in_hw.0,
            self.kernel.0,
            self.stride.0,
            self.dilation.0,
            self.padding.0,
        );
        let ow = Self::out_extent_axis(
            in_hw.1,
            self.kernel.1,
            self.stride.1,
            self.dilation.1,
            self.padding.1,
        );
        match (oh, ow) {
            (Some(oh), Some(ow)) => Ok((oh, ow)),
            _ => Err(TensorError::BadShape {
                what: format!(
                    "input {}x{} smaller than effective kernel span of {:?}",
                    in_hw.0, in_hw.1, self
                ),
            }),
        }
    }

    pub fn weight_shape(&self) -> [usize; 4] {
        [
            self.out_channels,
            self.in_channels,
            self.kernel.0,
            self.kernel.1,
        ]
    }
}

/// Geometry of one transposed-convolution layer.
/// `out = (in - 1)*s + k - 2p` on each axis.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct DeconvSpec {
    pub kernel: (usize, usize),
    pub stride: (usize, usize),
    pub padding: (usize, usize),
    pub in_channels: usize,
    pub out_channels: usize,
}

impl DeconvSpec {
    pub fn validate(&self) -> Result<(), TensorError> {
        let ok = self.kernel.0 >= 1
            && self.kernel.1 >= 1
            && self.stride.0 >= 1
            && self.stride.1 >= 1
            && self.in_channels >= 1
            && self.out_channels >= 1;
        if !ok {
            return Err(TensorError::BadParameter {
                what: format!("deconv spec has a zero extent: {self:?}"),
            });
        }
        Ok(())
    }

    pub fn out_extent(&self, in_hw: (usize, usize)) -> Result<(usize, usize), TensorError> {
        let ext = |i: usize, k: usize, s: usize, p: usize| -> Option<usize> {
            ((i - 1) * s + k).checked_sub(2 * p)
        };
        match (
            ext(in_hw.0, self.kernel.0, self.stride.0, self.padding.0),
            ext(in_hw.1, self.kernel.1, self.stride.1, self.padding.1),
        ) {
            (Some(h), Some(w)) if h > 0 && w > 0 => Ok((h, w)),
            _ => Err(TensorError::BadShape {
                what: format!("deconv padding swallows the whole output: {self:?}"),
            }),
        }
    }

    pub fn weight_shape(&self) -> [usize; 4] {
        [
            self.in_channels,
            self.out_channels,
            self.kernel.0,
            self.kernel.1,
        ]
    }
}

/// Row-major GEMM: C = alpha*A(m,k)*B(k,n) + beta*C(m,n), with explicit strides.
#[allow(clippy::too_many_arguments)]
fn dgemm_strided(
    m: usize,
    k: usize,
    n: usize,
    alpha: f64,
    a: &[f64],
    rsa: isize,
    csa: isize,
    b: &[f64],
    rsb: isize,
    csb: isize,
    beta: f64,
    c: &mut [f64],
) {
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            alpha,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

fn dgemm_rm(m: usize, k: usize, n: usize, alpha: f64, a: &[f64], b: &[f64], beta: f64, c: &mut [f64]) {
    dgemm_strided(m, k, n, alpha, a, k as isize, 1, b, n as isize, 1, beta, c);
}

/// Pads one [C,H,W] sample into `out` of extent [C, H+pt+pb, W+pl+pr].
fn pad_sample(
    x: &[f64],
    c: usize,
    h: usize,
    w: usize,
    (pt, pb, pl, pr): (usize, usize, usize, usize),
    mode: PadMode,
    out: &mut [f64],
) {
    let ph = h + pt + pb;
    let pw = w + pl + pr;
    debug_assert_eq!(out.len(), c * ph * pw);
    match mode {
        PadMode::Zero => {
            out.fill(0.0);
            for ci in 0..c {
                for i in 0..h {
                    let src = &x[ci * h * w + i * w..ci * h * w + i * w + w];
                    let dst_off = ci * ph * pw + (i + pt) * pw + pl;
                    out[dst_off..dst_off + w].copy_from_slice(src);
                }
            }
        }
        PadMode::Replicate => {
            for ci in 0..c {
                for pi in 0..ph {
                    let si = pi.saturating_sub(pt).min(h - 1);
                    for pj in 0..pw {
                        let sj = pj.saturating_sub(pl).min(w - 1);
                        out[ci * ph * pw + pi * pw + pj] = x[ci * h * w + si * w + sj];
                    }
                }
            }
        }
    }
}

/// Adjoint of `pad_sample`: accumulates the padded-region gradient back onto
/// its source pixels (dropped for zero padding, folded to the edge for
/// replicate padding).
fn unpad_sample_accumulate(
    dpad: &[f64],
    c: usize,
    h: usize,
    w: usize,
    (pt, pb, pl, pr): (usize, usize, usize, usize),
    mode: PadMode,
    dx: &mut [f64],
) {
    let ph = h + pt + pb;
    let pw = w + pl + pr;
    debug_assert_eq!(dpad.len(), c * ph * pw);
    match mode {
        PadMode::Zero => {
            for ci in 0..c {
                for i in 0..h {
                    let src_off = ci * ph * pw + (i + pt) * pw + pl;
                    let dst_off = ci * h * w + i * w;
                    for j in 0..w {
                        dx[dst_off + j] += dpad[src_off + j];
                    }
                }
            }
        }
        PadMode::Replicate => {
            for ci in 0..c {
                for pi in 0..ph {
                    let si = pi.saturating_sub(pt).min(h - 1);
                    for pj in 0..pw {
                        let sj = pj.saturating_sub(pl).min(w - 1);
                        dx[ci * h * w + si * w + sj] += dpad[ci * ph * pw + pi * pw + pj];
                    }
                }
            }
        }
    }
}

/// Gathers sliding windows of a padded [C,PH,PW] sample into a
/// [C*kh*kw, OH*OW] column matrix.
#[allow(clippy::too_many_arguments)]
fn im2col(
    xp: &[f64],
    c: usize,
    ph: usize,
    pw: usize,
    (kh, kw): (usize, usize),
    (sh, sw): (usize, usize),
    (dh, dw): (usize, usize),
    (oh, ow): (usize, usize),
    col: &mut [f64],
) {
    debug_assert_eq!(col.len(), c * kh * kw * oh * ow);
    let mut row = 0;
    for ci in 0..c {
        for ki in 0..kh {
            for kj in 0..kw {
                let base = ci * ph * pw + ki * dh * pw + kj * dw;
                let dst = &mut col[row * oh * ow..(row + 1) * oh * ow];
                let mut d = 0;
                for oi in 0..oh {
                    let src = base + oi * sh * pw;
                    if sw == 1 {
                        dst[d..d + ow].copy_from_slice(&xp[src..src + ow]);
                        d += ow;
                    } else {
                        for oj in 0..ow {
                            dst[d] = xp[src + oj * sw];
                            d += 1;
                        }
                    }
                }
                row += 1;
            }
        }
    }
}

/// Adjoint of `im2col`: scatters a column matrix back into a padded sample.
#[allow(clippy::too_many_arguments)]
fn col2im_accumulate(
    col: &[f64],
    c: usize,
    ph: usize,
    pw: usize,
    (kh, kw): (usize, usize),
    (sh, sw): (usize, usize),
    (dh, dw): (usize, usize),
    (oh, ow): (usize, usize),
    xp: &mut [f64],
) {
    let mut row = 0;
    for ci in 0..c {
        for ki in 0..kh {
            for kj in 0..kw {
                let base = ci * ph * pw + ki * dh * pw + kj * dw;
                let src = &col[row * oh * ow..(row + 1) * oh * ow];
                let mut s = 0;
                for oi in 0..oh {
                    let dst = base + oi * sh * pw;
                    for oj in 0..ow {
                        xp[dst + oj * sw] += src[s];
                        s += 1;
                    }
                }
                row += 1;
            }
        }
    }
}

fn check_conv_shapes(
    x: &Tensor,
    w: &Tensor,
    b: Option<&Tensor>,
    spec_weight_shape: [usize; 4],
    in_channels: usize,
    out_channels: usize,
    x_c: usize,
) -> Result<(), TensorError> {
    if x_c != in_channels {
        return Err(TensorError::BadShape {
            what: format!(
                "input has {x_c} channels, spec expects {in_channels} (input {:?})",
                x.shape()
            ),
        });
    }
    if w.shape() != spec_weight_shape {
        return Err(TensorError::BadShape {
            what: format!(
                "weight shape {:?} does not match spec {:?}",
                w.shape(),
                spec_weight_shape
            ),
        });
    }
    if let Some(b) = b {
        if b.shape() != [out_channels] {
            return Err(TensorError::BadShape {
                what: format!("bias shape {:?}, expected [{out_channels}]", b.shape()),
            });
        }
    }
    Ok(())
}

pub fn conv2d_forward(
    x: &Tensor,
    w: &Tensor,
    b: Option<&Tensor>,
    spec: &ConvSpec,
) -> Result<Tensor, TensorError> {
    spec.validate()?;
    let (n, c, h, wd) = dims4(x)?;
    check_conv_shapes(x, w, b, spec.weight_shape(), spec.in_channels, spec.out_channels, c)?;
    let (oh, ow) = spec.out_extent((h, wd))?;
    let (kh, kw) = spec.kernel;
    let (pt, pl) = spec.padding;
    let ph = h + 2 * pt;
    let pw = wd + 2 * pl;
    let ckk = c * kh * kw;
    let oc = spec.out_channels;

    let mut out = Tensor::zeros(&[n, oc, oh, ow]);
    let mut xp = vec![0.0; c * ph * pw];
    let mut col = vec![0.0; ckk * oh * ow];
    for ni in 0..n {
        let xs = &x.data()[ni * c * h * wd..(ni + 1) * c * h * wd];
        pad_sample(xs, c, h, wd, (pt, pt, pl, pl), spec.pad_mode, &mut xp);
        im2col(&xp, c, ph, pw, spec.kernel, spec.stride, spec.dilation, (oh, ow), &mut col);
        let os = &mut out.data_mut()[ni * oc * oh * ow..(ni + 1) * oc * oh * ow];
        dgemm_rm(oc, ckk, oh * ow, 1.0, w.data(), &col, 0.0, os);
        if let Some(b) = b {
            for (ci, chunk) in os.chunks_mut(oh * ow).enumerate() {
                let bv = b.data()[ci];
                for v in chunk {
                    *v += bv;
                }
            }
        }
    }
    Ok(out)
}

/// Gradients of `conv2d_forward` w.r.t. input, weights and bias.
pub fn conv2d_backward(
    x: &Tensor,
    w: &Tensor,
    spec: &ConvSpec,
    dout: &Tensor,
) -> Result<(Tensor, Tensor, Tensor), TensorError> {
    let (n, c, h, wd) = dims4(x)?;
    let (oh, ow) = spec.out_extent((h, wd))?;
    let oc = spec.out_channels;
    if dout.shape() != [n, oc, oh, ow] {
        return Err(TensorError::BadShape {
            what: format!(
                "upstream gradient shape {:?}, expected [{n},{oc},{oh},{ow}]",
                dout.shape()
            ),
        });
    }
    let (kh, kw) = spec.kernel;
    let (pt, pl) = spec.padding;
    let ph = h + 2 * pt;
    let pw = wd + 2 * pl;
    let ckk = c * kh * kw;

    let mut dx = Tensor::zeros(x.shape());
    let mut dw = Tensor::zeros(w.shape());
    let mut db = Tensor::zeros(&[oc]);
    let mut xp = vec![0.0; c * ph * pw];
    let mut col = vec![0.0; ckk * oh * ow];
    let mut dcol = vec![0.0; ckk * oh * ow];
    let mut dxp = vec![0.0; c * ph * pw];
    for ni in 0..n {
        let xs = &x.data()[ni * c * h * wd..(ni + 1) * c * h * wd];
        let dos = &dout.data()[ni * oc * oh * ow..(ni + 1) * oc * oh * ow];
        pad_sample(xs, c, h, wd, (pt, pt, pl, pl), spec.pad_mode, &mut xp);
        im2col(&xp, c, ph, pw, spec.kernel, spec.stride, spec.dilation, (oh, ow), &mut col);
        // dW[oc, ckk] += dout[oc, ohw] * col^T[ohw, ckk]
        dgemm_strided(
            oc,
            oh * ow,
            ckk,
            1.0,
            dos,
            (oh * ow) as isize,
            1,
            &col,
            1,
            (oh * ow) as isize,
            1.0,
            dw.data_mut(),
        );
        // dcol[ckk, ohw] = w^T[ckk, oc] * dout[oc, ohw]
        dgemm_strided(
            ckk,
            oc,
            oh * ow,
            1.0,
            w.data(),
            1,
            ckk as isize,
            dos,
            (oh * ow) as isize,
            1,
            0.0,
            &mut dcol,
        );
        dxp.fill(0.0);
        col2im_accumulate(&dcol, c, ph, pw, spec.kernel, spec.stride, spec.dilation, (oh, ow), &mut dxp);
        let dxs = &mut dx.data_mut()[ni * c * h * wd..(ni + 1) * c * h * wd];
        unpad_sample_accumulate(&dxp, c, h, wd, (pt, pt, pl, pl), spec.pad_mode, dxs);
        for (ci, chunk) in dos.chunks(oh * ow).enumerate() {
            db.data_mut()[ci] += chunk.iter().sum::<f64>();
        }
    }
    #[cfg(feature = "inject-grad-bug")]
    {
        for v in db.data_mut() {
            *v *= 1.5;
        }
    }
    Ok((dx, dw, db))
}

pub fn deconv2d_forward(
    x: &Tensor,
    w: &Tensor,
    b: Option<&Tensor>,
    spec: &DeconvSpec,
) -> Result<Tensor, TensorError> {
    spec.validate()?;
    let (n, c, h, wd) = dims4(x)?;
    check_conv_shapes(x, w, b, spec.weight_shape(), spec.in_channels, spec.out_channels, c)?;
    let (oh, ow) = spec.out_extent((h, wd))?;
    let (kh, kw) = spec.kernel;
    let (pt, pl) = spec.padding;
    let oc = spec.out_channels;
    let okk = oc * kh * kw;
    // Scatter target is the output before pad-cropping.
    let fh = oh + 2 * pt;
    let fw = ow + 2 * pl;

    let mut out = Tensor::zeros(&[n, oc, oh, ow]);
    let mut col = vec![0.0; okk * h * wd];
    let mut full = vec![0.0; oc * fh * fw];
    for ni in 0..n {
        let xs = &x.data()[ni * c * h * wd..(ni + 1) * c * h * wd];
        // col[okk, hw] = w^T[okk, c] * x[c, hw]
        dgemm_strided(
            okk,
            c,
            h * wd,
            1.0,
            w.data(),
            1,
            okk as isize,
            xs,
            (h * wd) as isize,
            1,
            0.0,
            &mut col,
        );
        full.fill(0.0);
        col2im_accumulate(&col, oc, fh, fw, spec.kernel, spec.stride, (1, 1), (h, wd), &mut full);
        let os = &mut out.data_mut()[ni * oc * oh * ow..(ni + 1) * oc * oh * ow];
        for ci in 0..oc {
            for i in 0..oh {
                let src = ci * fh * fw + (i + pt) * fw + pl;
                let dst = ci * oh * ow + i * ow;
                for j in 0..ow {
                    os[dst + j] += full[src + j];
                }
            }
        }
        if let Some(b) = b {
            for (ci, chunk) in os.chunks_mut(oh * ow).enumerate() {
                let bv = b.data()[ci];
                for v in chunk {
                    *v += bv;
                }
            }
        }
    }
    Ok(out)
}

pub fn deconv2d_backward(
    x: &Tensor,
    w: &Tensor,
    spec: &DeconvSpec,
    dout: &Tensor,
) -> Result<(Tensor, Tensor, Tensor), TensorError> {
    let (n, c, h, wd) = dims4(x)?;
    let (oh, ow) = spec.out_extent((h, wd))?;
    let oc = spec.out_channels;
    if dout.shape() != [n, oc, oh, ow] {
        return Err(TensorError::BadShape {
            what: format!(
                "upstream gradient shape {:?}, expected [{n},{oc},{oh},{ow}]",
                dout.shape()
            ),
        });
    }
    let (kh, kw) = spec.kernel;
    let (pt, pl) = spec.padding;
    let fh = oh + 2 * pt;
    let fw = ow + 2 * pl;
    let okk = oc * kh * kw;

    let mut dx = Tensor::zeros(x.shape());
    let mut dw = Tensor::zeros(w.shape());
    let mut db = Tensor::zeros(&[oc]);
    let mut dfull = vec![0.0; oc * fh * fw];
    let mut dcol = vec![0.0; okk * h * wd];
    for ni in 0..n {
        let xs = &x.data()[ni * c * h * wd..(ni + 1) * c * h * wd];
        let dos = &dout.data()[ni * oc * oh * ow..(ni + 1) * oc * oh * ow];
        // Zero-pad upstream gradient back to the uncropped extent.
        dfull.fill(0.0);
        for ci in 0..oc {
            for i in 0..oh {
                let dst = ci * fh * fw + (i + pt) * fw + pl;
                let src = ci * oh * ow + i * ow;
                dfull[dst..dst + ow].copy_from_slice(&dos[src..src + ow]);
            }
        }
        // dcol[okk, hw] = gather of dfull at the scatter positions
        im2col(&dfull, oc, fh, fw, spec.kernel, spec.stride, (1, 1), (h, wd), &mut dcol);
        // dx[c, hw] = w[c, okk] * dcol[okk, hw]
        let dxs = &mut dx.data_mut()[ni * c * h * wd..(ni + 1) * c * h * wd];
        dgemm_rm(c, okk, h * wd, 1.0, w.data(), &dcol, 1.0, dxs);
        // dw^T[okk, c] += dcol[okk, hw] * x^T[hw, c]  => dw[c, okk] += x[c,hw]*dcol^T
        dgemm_strided(
            c,
            h * wd,
            okk,
            1.0,
            xs,
            (h * wd) as isize,
            1,
            &dcol,
            1,
            (h * wd) as isize,
            1.0,
            dw.data_mut(),
        );
        for (ci, chunk) in dos.chunks(oh * ow).enumerate() {
            db.data_mut()[ci] += chunk.iter().sum::<f64>();
        }
    }
    Ok((dx, dw, db))
}

/// Standalone spatial padding: pads [N,C,H,W] by independent per-side
/// amounts. Used where same-padding needs an asymmetric split that
/// `ConvSpec`'s symmetric padding cannot express.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PadSpec {
    pub top: usize,
    pub bottom: usize,
    pub left: usize,
    pub right: usize,
    pub mode: PadMode,
}

pub fn pad2d_forward(x: &Tensor, pad: &PadSpec) -> Result<Tensor, TensorError> {
    let (n, c, h, w) = dims4(x)?;
    let ph = h + pad.top + pad.bottom;
    let pw = w + pad.left + pad.right;
    let mut out = Tensor::zeros(&[n, c, ph, pw]);
    for ni in 0..n {
        let xs = &x.data()[ni * c * h * w..(ni + 1) * c * h * w];
        let os = &mut out.data_mut()[ni * c * ph * pw..(ni + 1) * c * ph * pw];
        pad_sample(xs, c, h, w, (pad.top, pad.bottom, pad.left, pad.right), pad.mode, os);
    }
    Ok(out)
}

pub fn pad2d_backward(x_shape: &[usize], pad: &PadSpec, dout: &Tensor) -> Tensor {
    let (n, c, h, w) = (x_shape[0], x_shape[1], x_shape[2], x_shape[3]);
    let ph = h + pad.top + pad.bottom;
    let pw = w + pad.left + pad.right;
    debug_assert_eq!(dout.shape(), [n, c, ph, pw]);
    let mut dx = Tensor::zeros(x_shape);
    for ni in 0..n {
        let ds = &dout.data()[ni * c * ph * pw..(ni + 1) * c * ph * pw];
        let dxs = &mut dx.data_mut()[ni * c * h * w..(ni + 1) * c * h * w];
        unpad_sample_accumulate(ds, c, h, w, (pad.top, pad.bottom, pad.left, pad.right), pad.mode, dxs);
    }
    dx
}
