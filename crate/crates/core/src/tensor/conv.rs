use super::Tensor;
use crate::error::{Error, Result};

/// Geometry of a 2-D convolution with symmetric zero padding.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvSpec {
    pub kernel_height: usize,
    pub kernel_width: usize,
    pub stride: usize,
    pub padding: usize,
}

impl ConvSpec {
    pub fn square(kernel: usize, stride: usize, padding: usize) -> Self {
        ConvSpec {
            kernel_height: kernel,
            kernel_width: kernel,
            stride,
            padding,
        }
    }

    /// Output extent along one axis, or `None` when the kernel does not fit.
    pub fn output_extent(&self, input: usize, kernel: usize) -> Option<usize> {
        let padded = input + 2 * self.padding;
        if self.stride == 0 || kernel == 0 || padded < kernel {
            return None;
        }
        Some((padded - kernel) / self.stride + 1)
    }

    pub fn output_size(&self, height: usize, width: usize) -> Option<(usize, usize)> {
        Some((
            self.output_extent(height, self.kernel_height)?,
            self.output_extent(width, self.kernel_width)?,
        ))
    }
}

/// Gradients returned by [`conv2d_backward`].
#[derive(Debug, Clone)]
pub struct ConvGrads {
    pub input: Tensor,
    pub weights: Tensor,
    pub bias: Tensor,
}

struct Geometry {
    c_in: usize,
    h: usize,
    w: usize,
    c_out: usize,
    kh: usize,
    kw: usize,
    oh: usize,
    ow: usize,
}

fn geometry(input: &Tensor, weights: &Tensor, spec: &ConvSpec) -> Result<Geometry> {
    let (c_in, h, w) = input.dims3()?;
    let [c_out, wc_in, kh, kw] = weights.shape()[..] else {
        return Err(Error::shape(format!(
            "conv2d: weights must be [C_out, C_in, kh, kw], got {:?}",
            weights.shape()
        )));
    };
    if wc_in != c_in {
        return Err(Error::shape(format!(
            "conv2d: input channels {c_in} but weights expect C_in = {wc_in}"
        )));
    }
    if kh != spec.kernel_height {
        return Err(Error::shape(format!(
            "conv2d: kernel height {kh} disagrees with ConvSpec {}",
            spec.kernel_height
        )));
    }
    if kw != spec.kernel_width {
        return Err(Error::shape(format!(
            "conv2d: kernel width {kw} disagrees with ConvSpec {}",
            spec.kernel_width
        )));
    }
    if spec.stride == 0 {
        return Err(Error::invalid("conv2d: stride must be positive"));
    }
    let oh = spec.output_extent(h, kh).ok_or_else(|| {
        Error::shape(format!(
            "conv2d: kernel height {kh} exceeds padded input height {}",
            h + 2 * spec.padding
        ))
    })?;
    let ow = spec.output_extent(w, kw).ok_or_else(|| {
        Error::shape(format!(
            "conv2d: kernel width {kw} exceeds padded input width {}",
            w + 2 * spec.padding
        ))
    })?;
    Ok(Geometry {
        c_in,
        h,
        w,
        c_out,
        kh,
        kw,
        oh,
        ow,
    })
}

/// Output positions `o` in `0..out` whose source `o * stride + k - pad` lands
/// inside `0..len`.
#[inline]
fn valid_range(k: usize, pad: usize, stride: usize, len: usize, out: usize) -> (usize, usize) {
    // o * stride + k >= pad
    let lo = if k >= pad { 0 } else { (pad - k).div_ceil(stride) };
    // o * stride + k - pad <= len - 1
    let hi = if k > len - 1 + pad {
        0
    } else {
        ((len - 1 + pad - k) / stride + 1).min(out)
    };
    (lo, hi.max(lo))
}

/// Cross-correlation of `input` with `weights`, plus a per-channel bias.
pub fn conv2d(input: &Tensor, weights: &Tensor, bias: &Tensor, spec: &ConvSpec) -> Result<Tensor> {
    let g = geometry(input, weights, spec)?;
    if bias.shape() != [g.c_out] {
        return Err(Error::shape(format!(
            "conv2d: bias must be [{}], got {:?}",
            g.c_out,
            bias.shape()
        )));
    }
    let (s, p) = (spec.stride, spec.padding);
    let x = input.data();
    let wt = weights.data();
    let mut out = vec![0.0; g.c_out * g.oh * g.ow];
    for co in 0..g.c_out {
        let plane = &mut out[co * g.oh * g.ow..(co + 1) * g.oh * g.ow];
        plane.fill(bias.data()[co]);
        for ci in 0..g.c_in {
            let src = &x[ci * g.h * g.w..(ci + 1) * g.h * g.w];
            for ki in 0..g.kh {
                let (oi_lo, oi_hi) = valid_range(ki, p, s, g.h, g.oh);
                for kj in 0..g.kw {
                    let k = wt[((co * g.c_in + ci) * g.kh + ki) * g.kw + kj];
                    let (oj_lo, oj_hi) = valid_range(kj, p, s, g.w, g.ow);
                    for oi in oi_lo..oi_hi {
                        let row = &src[(oi * s + ki - p) * g.w..];
                        let dst = &mut plane[oi * g.ow..(oi + 1) * g.ow];
                        if s == 1 {
                            let off = kj as isize - p as isize;
                            let src_row = &row[(oj_lo as isize + off) as usize
                                ..(oj_hi as isize + off) as usize];
                            for (d, v) in dst[oj_lo..oj_hi].iter_mut().zip(src_row) {
                                *d += k * v;
                            }
                        } else {
                            for oj in oj_lo..oj_hi {
                                dst[oj] += k * row[oj * s + kj - p];
                            }
                        }
                    }
                }
            }
        }
    }
    Tensor::new(vec![g.c_out, g.oh, g.ow], out)
}

/// Exact gradients of `sum(grad_output ⊙ conv2d(input, weights, bias))`.
pub fn conv2d_backward(
    input: &Tensor,
    weights: &Tensor,
    spec: &ConvSpec,
    grad_output: &Tensor,
) -> Result<ConvGrads> {
    let g = geometry(input, weights, spec)?;
    if grad_output.shape() != [g.c_out, g.oh, g.ow] {
        return Err(Error::shape(format!(
            "conv2d_backward: grad_output must be [{}, {}, {}], got {:?}",
            g.c_out,
            g.oh,
            g.ow,
            grad_output.shape()
        )));
    }
    let (s, p) = (spec.stride, spec.padding);
    let x = input.data();
    let wt = weights.data();
    let gy = grad_output.data();
    let mut gx = vec![0.0; x.len()];
    let mut gw = vec![0.0; wt.len()];
    let mut gb = vec![0.0; g.c_out];

    for co in 0..g.c_out {
        let gplane = &gy[co * g.oh * g.ow..(co + 1) * g.oh * g.ow];
        gb[co] = gplane.iter().sum();
        for ci in 0..g.c_in {
            let src = &x[ci * g.h * g.w..(ci + 1) * g.h * g.w];
            let gsrc = &mut gx[ci * g.h * g.w..(ci + 1) * g.h * g.w];
            for ki in 0..g.kh {
                let (oi_lo, oi_hi) = valid_range(ki, p, s, g.h, g.oh);
                for kj in 0..g.kw {
                    let widx = ((co * g.c_in + ci) * g.kh + ki) * g.kw + kj;
                    let k = wt[widx];
                    let (oj_lo, oj_hi) = valid_range(kj, p, s, g.w, g.ow);
                    let mut acc = 0.0;
                    for oi in oi_lo..oi_hi {
                        let base = (oi * s + ki - p) * g.w;
                        let grow = &gplane[oi * g.ow..(oi + 1) * g.ow];
                        for oj in oj_lo..oj_hi {
                            let xi = base + oj * s + kj - p;
                            acc += grow[oj] * src[xi];
                            gsrc[xi] += k * grow[oj];
                        }
                    }
                    gw[widx] = acc;
                }
            }
        }
    }
    Ok(ConvGrads {
        input: Tensor::new(input.shape().to_vec(), gx)?,
        weights: Tensor::new(weights.shape().to_vec(), gw)?,
        bias: Tensor::new(vec![g.c_out], gb)?,
    })
}
