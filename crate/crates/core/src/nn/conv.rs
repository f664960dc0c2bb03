//! Spatial operators on `N×C×H×W` tensors: convolution, 2×2 max pooling,
//! stride-2 transposed convolution and channel concatenation.

use crate::error::{Error, Result};
use crate::nn::Tensor;
use crate::real::{gemm, Real};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Conv2dSpec {
    pub stride: usize,
    pub padding: usize,
}

impl Conv2dSpec {
    /// Stride 1 with "same" padding for an odd kernel size.
    pub fn same(kernel: usize) -> Self {
        Self {
            stride: 1,
            padding: kernel / 2,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Conv2dGrads<T> {
    pub input: Tensor<T>,
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

struct ConvGeom {
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    o: usize,
    kh: usize,
    kw: usize,
    oh: usize,
    ow: usize,
    stride: usize,
    pad: usize,
}

fn conv_geom<T: Real>(input: &Tensor<T>, weight: &Tensor<T>, spec: Conv2dSpec) -> Result<ConvGeom> {
    let (n, c, h, w) = input.dims4()?;
    let (o, wc, kh, kw) = weight.dims4()?;
    if wc != c {
        return Err(Error::shape(format!(
            "conv2d: input has {c} channels, weight expects {wc}"
        )));
    }
    if spec.stride == 0 {
        return Err(Error::shape("conv2d: stride must be positive"));
    }
    if h + 2 * spec.padding < kh || w + 2 * spec.padding < kw {
        return Err(Error::shape("conv2d: kernel larger than padded input"));
    }
    let oh = (h + 2 * spec.padding - kh) / spec.stride + 1;
    let ow = (w + 2 * spec.padding - kw) / spec.stride + 1;
    Ok(ConvGeom {
        n,
        c,
        h,
        w,
        o,
        kh,
        kw,
        oh,
        ow,
        stride: spec.stride,
        pad: spec.padding,
    })
}

/// Unfolds one image `C×H×W` into a `(C·kh·kw) × (oh·ow)` column matrix.
fn im2col<T: Real>(img: &[T], g: &ConvGeom, col: &mut [T]) {
    let cols = g.oh * g.ow;
    for c in 0..g.c {
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (c * g.kh + ky) * g.kw + kx;
                let dst = &mut col[row * cols..(row + 1) * cols];
                for oy in 0..g.oh {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    let line = &mut dst[oy * g.ow..(oy + 1) * g.ow];
                    if iy < 0 || iy >= g.h as isize {
                        line.fill(T::zero());
                        continue;
                    }
                    let src = &img[(c * g.h + iy as usize) * g.w..][..g.w];
                    for (ox, d) in line.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        *d = if ix < 0 || ix >= g.w as isize {
                            T::zero()
                        } else {
                            src[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: accumulates columns back into an image gradient.
fn col2im<T: Real>(col: &[T], g: &ConvGeom, img: &mut [T]) {
    let cols = g.oh * g.ow;
    for c in 0..g.c {
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (c * g.kh + ky) * g.kw + kx;
                let src = &col[row * cols..(row + 1) * cols];
                for oy in 0..g.oh {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let dst = &mut img[(c * g.h + iy as usize) * g.w..][..g.w];
                    for ox in 0..g.ow {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.w as isize {
                            dst[ix as usize] += src[oy * g.ow + ox];
                        }
                    }
                }
            }
        }
    }
}

/// Cross-correlation of `input` (`N×C×H×W`) with `weight` (`O×C×kh×kw`).
pub fn conv2d_forward<T: Real>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    spec: Conv2dSpec,
) -> Result<Tensor<T>> {
    let g = conv_geom(input, weight, spec)?;
    if let Some(b) = bias {
        if b.len() != g.o {
            return Err(Error::shape("conv2d: bias length must equal output channels"));
        }
    }
    let k = g.c * g.kh * g.kw;
    let cols = g.oh * g.ow;
    let mut out = Tensor::zeros(&[g.n, g.o, g.oh, g.ow]);
    let mut col = vec![T::zero(); k * cols];
    let in_stride = g.c * g.h * g.w;
    for ni in 0..g.n {
        let img = &input.data()[ni * in_stride..(ni + 1) * in_stride];
        let dst = &mut out.data_mut()[ni * g.o * cols..(ni + 1) * g.o * cols];
        if let Some(b) = bias {
            for (oc, chunk) in dst.chunks_exact_mut(cols).enumerate() {
                chunk.fill(b.data()[oc]);
            }
        }
        let is_pointwise = g.kh == 1 && g.kw == 1 && g.stride == 1 && g.pad == 0;
        let colref: &[T] = if is_pointwise {
            img
        } else {
            im2col(img, &g, &mut col);
            &col
        };
        let beta = if bias.is_some() { T::one() } else { T::zero() };
        gemm(false, false, g.o, cols, k, T::one(), weight.data(), colref, beta, dst);
    }
    out.debug_check("conv2d_forward");
    Ok(out)
}

pub fn conv2d_backward<T: Real>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    grad_out: &Tensor<T>,
    spec: Conv2dSpec,
) -> Result<Conv2dGrads<T>> {
    let g = conv_geom(input, weight, spec)?;
    if grad_out.shape() != [g.n, g.o, g.oh, g.ow] {
        return Err(Error::shape(format!(
            "conv2d_backward: grad shape {:?}, expected {:?}",
            grad_out.shape(),
            [g.n, g.o, g.oh, g.ow]
        )));
    }
    let k = g.c * g.kh * g.kw;
    let cols = g.oh * g.ow;
    let in_stride = g.c * g.h * g.w;
    let mut d_in = Tensor::zeros(input.shape());
    let mut d_w = Tensor::zeros(weight.shape());
    let mut d_b = Tensor::zeros(&[g.o]);
    let mut col = vec![T::zero(); k * cols];
    let mut dcol = vec![T::zero(); k * cols];
    let is_pointwise = g.kh == 1 && g.kw == 1 && g.stride == 1 && g.pad == 0;
    for ni in 0..g.n {
        let img = &input.data()[ni * in_stride..(ni + 1) * in_stride];
        let dy = &grad_out.data()[ni * g.o * cols..(ni + 1) * g.o * cols];
        for (oc, chunk) in dy.chunks_exact(cols).enumerate() {
            d_b.data_mut()[oc] += chunk.iter().copied().sum::<T>();
        }
        let colref: &[T] = if is_pointwise {
            img
        } else {
            im2col(img, &g, &mut col);
            &col
        };
        // dW (O×k) += dy (O×cols) · colᵀ (cols×k)
        gemm(false, true, g.o, k, cols, T::one(), dy, colref, T::one(), d_w.data_mut());
        let dimg = &mut d_in.data_mut()[ni * in_stride..(ni + 1) * in_stride];
        if is_pointwise {
            gemm(true, false, k, cols, g.o, T::one(), weight.data(), dy, T::zero(), dimg);
        } else {
            // dcol (k×cols) = Wᵀ (k×O) · dy (O×cols)
            gemm(true, false, k, cols, g.o, T::one(), weight.data(), dy, T::zero(), &mut dcol);
            col2im(&dcol, &g, dimg);
        }
    }
    Ok(Conv2dGrads {
        input: d_in,
        weight: d_w,
        bias: d_b,
    })
}

/// 2×2 max pooling with stride 2. Returns the pooled tensor and, per output
/// entry, the flat input index of its maximum (first index wins ties).
pub fn maxpool2x2_forward<T: Real>(input: &Tensor<T>) -> Result<(Tensor<T>, Vec<usize>)> {
    let (n, c, h, w) = input.dims4()?;
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::shape(format!(
            "maxpool2x2 needs even spatial dims, got {h}x{w}"
        )));
    }
    let (oh, ow) = (h / 2, w / 2);
    let mut out = Tensor::zeros(&[n, c, oh, ow]);
    let mut arg = vec![0usize; n * c * oh * ow];
    let src = input.data();
    let dst = out.data_mut();
    for plane in 0..n * c {
        let base = plane * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = base + (2 * oy) * w + 2 * ox;
                for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                    let idx = base + (2 * oy + dy) * w + 2 * ox + dx;
                    if src[idx] > src[best] {
                        best = idx;
                    }
                }
                let o = (plane * oh + oy) * ow + ox;
                dst[o] = src[best];
                arg[o] = best;
            }
        }
    }
    Ok((out, arg))
}

pub fn maxpool2x2_backward<T: Real>(
    input_shape: &[usize],
    argmax: &[usize],
    grad_out: &Tensor<T>,
) -> Result<Tensor<T>> {
    if argmax.len() != grad_out.len() {
        return Err(Error::shape("maxpool2x2_backward: argmax/grad length mismatch"));
    }
    let mut d = Tensor::zeros(input_shape);
    let dst = d.data_mut();
    for (&i, &gv) in argmax.iter().zip(grad_out.data()) {
        dst[i] += gv;
    }
    Ok(d)
}

fn tconv_dims<T: Real>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
) -> Result<(usize, usize, usize, usize, usize)> {
    let (n, c, h, w) = input.dims4()?;
    let (wc, o, kh, kw) = weight.dims4()?;
    if wc != c || kh != 2 || kw != 2 {
        return Err(Error::shape(format!(
            "transpose_conv2x2: weight must be {c}×O×2×2, got {:?}",
            weight.shape()
        )));
    }
    Ok((n, c, h, w, o))
}

/// Transposed convolution with a 2×2 kernel, stride 2 and no padding.
/// `weight` is `C_in×C_out×2×2`; spatial dims double.
pub fn transpose_conv2x2_forward<T: Real>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    bias: &Tensor<T>,
) -> Result<Tensor<T>> {
    let (n, c, h, w, o) = tconv_dims(input, weight)?;
    if bias.len() != o {
        return Err(Error::shape("transpose_conv2x2: bias length"));
    }
    let hw = h * w;
    let (oh, ow) = (2 * h, 2 * w);
    let mut out = Tensor::zeros(&[n, o, oh, ow]);
    let mut y = vec![T::zero(); o * 4 * hw];
    for ni in 0..n {
        let x = &input.data()[ni * c * hw..(ni + 1) * c * hw];
        // y ((O·4)×HW) = Wᵀ · x, W stored C×(O·4)
        gemm(true, false, o * 4, hw, c, T::one(), weight.data(), x, T::zero(), &mut y);
        let dst = &mut out.data_mut()[ni * o * oh * ow..(ni + 1) * o * oh * ow];
        for oc in 0..o {
            let b = bias.data()[oc];
            for a in 0..2 {
                for bb in 0..2 {
                    let row = &y[((oc * 2 + a) * 2 + bb) * hw..][..hw];
                    for iy in 0..h {
                        let line = &mut dst[(oc * oh + 2 * iy + a) * ow..][..ow];
                        for ix in 0..w {
                            line[2 * ix + bb] = row[iy * w + ix] + b;
                        }
                    }
                }
            }
        }
    }
    out.debug_check("transpose_conv2x2_forward");
    Ok(out)
}

pub fn transpose_conv2x2_backward<T: Real>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    grad_out: &Tensor<T>,
) -> Result<Conv2dGrads<T>> {
    let (n, c, h, w, o) = tconv_dims(input, weight)?;
    let hw = h * w;
    let (oh, ow) = (2 * h, 2 * w);
    if grad_out.shape() != [n, o, oh, ow] {
        return Err(Error::shape("transpose_conv2x2_backward: grad shape"));
    }
    let mut d_in = Tensor::zeros(input.shape());
    let mut d_w = Tensor::zeros(weight.shape());
    let mut d_b = Tensor::zeros(&[o]);
    let mut dy = vec![T::zero(); o * 4 * hw];
    for ni in 0..n {
        let g = &grad_out.data()[ni * o * oh * ow..(ni + 1) * o * oh * ow];
        for oc in 0..o {
            let plane = &g[oc * oh * ow..(oc + 1) * oh * ow];
            d_b.data_mut()[oc] += plane.iter().copied().sum::<T>();
            for a in 0..2 {
                for bb in 0..2 {
                    let row = &mut dy[((oc * 2 + a) * 2 + bb) * hw..][..hw];
                    for iy in 0..h {
                        let line = &plane[(2 * iy + a) * ow..][..ow];
                        for ix in 0..w {
                            row[iy * w + ix] = line[2 * ix + bb];
                        }
                    }
                }
            }
        }
        let x = &input.data()[ni * c * hw..(ni + 1) * c * hw];
        // dW (C×(O·4)) += x (C×HW) · dyᵀ (HW×(O·4))
        gemm(false, true, c, o * 4, hw, T::one(), x, &dy, T::one(), d_w.data_mut());
        // dx (C×HW) = W (C×(O·4)) · dy ((O·4)×HW)
        let dx = &mut d_in.data_mut()[ni * c * hw..(ni + 1) * c * hw];
        gemm(false, false, c, hw, o * 4, T::one(), weight.data(), &dy, T::zero(), dx);
    }
    Ok(Conv2dGrads {
        input: d_in,
        weight: d_w,
        bias: d_b,
    })
}

/// Stacks `a` and `b` along the channel axis.
pub fn concat_channels<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (n, ca, h, w) = a.dims4()?;
    let (nb, cb, hb, wb) = b.dims4()?;
    if (n, h, w) != (nb, hb, wb) {
        return Err(Error::shape(format!(
            "concat_channels: {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let hw = h * w;
    let mut data = Vec::with_capacity(n * (ca + cb) * hw);
    for ni in 0..n {
        data.extend_from_slice(&a.data()[ni * ca * hw..(ni + 1) * ca * hw]);
        data.extend_from_slice(&b.data()[ni * cb * hw..(ni + 1) * cb * hw]);
    }
    Tensor::new(&[n, ca + cb, h, w], data)
}

/// Adjoint of [`concat_channels`]: splits a gradient after `ca` channels.
pub fn split_channels<T: Real>(g: &Tensor<T>, ca: usize) -> Result<(Tensor<T>, Tensor<T>)> {
    let (n, c, h, w) = g.dims4()?;
    if ca > c {
        return Err(Error::shape("split_channels: split point beyond channel count"));
    }
    let cb = c - ca;
    let hw = h * w;
    let mut da = Vec::with_capacity(n * ca * hw);
    let mut db = Vec::with_capacity(n * cb * hw);
    for ni in 0..n {
        let s = &g.data()[ni * c * hw..(ni + 1) * c * hw];
        da.extend_from_slice(&s[..ca * hw]);
        db.extend_from_slice(&s[ca * hw..]);
    }
    Ok((
        Tensor::new(&[n, ca, h, w], da)?,
        Tensor::new(&[n, cb, h, w], db)?,
    ))
}
