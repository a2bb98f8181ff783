use super::Tensor;
use crate::error::{Error, Result};

/// Per-output-index sampling: lower source index, upper source index and the
/// fractional weight of the upper one.
#[derive(Debug, Clone, Copy)]
struct Tap {
    lo: usize,
    hi: usize,
    frac: f64,
}

/// Corner-aligned sample positions: output `i` reads source `i·(n−1)/(m−1)`.
fn taps(src: usize, dst: usize) -> Vec<Tap> {
    (0..dst)
        .map(|i| {
            if dst == 1 || src == 1 {
                return Tap {
                    lo: 0,
                    hi: 0,
                    frac: 0.0,
                };
            }
            // integer numerator keeps the endpoints exact
            let pos = (i * (src - 1)) as f64 / (dst - 1) as f64;
            let lo = (pos.floor() as usize).min(src - 1);
            let hi = (lo + 1).min(src - 1);
            Tap {
                lo,
                hi,
                frac: pos - lo as f64,
            }
        })
        .collect()
}

/// Bilinear resize of every channel of a `[C, h, w]` tensor to `out_h × out_w`
/// with corner-aligned sampling.
pub fn bilinear_resize(input: &Tensor, out_h: usize, out_w: usize) -> Result<Tensor> {
    let (c, h, w) = input.dims3()?;
    if out_h == 0 || out_w == 0 {
        return Err(Error::shape(format!(
            "bilinear_resize: output extent {out_h}x{out_w} must be positive"
        )));
    }
    let rows = taps(h, out_h);
    let cols = taps(w, out_w);
    let x = input.data();
    let mut out = Vec::with_capacity(c * out_h * out_w);
    for ch in 0..c {
        let plane = &x[ch * h * w..(ch + 1) * h * w];
        for r in &rows {
            let top = &plane[r.lo * w..(r.lo + 1) * w];
            let bottom = &plane[r.hi * w..(r.hi + 1) * w];
            for q in &cols {
                // a + t·(b − a) reproduces constants exactly
                let upper = top[q.lo] + q.frac * (top[q.hi] - top[q.lo]);
                let lower = bottom[q.lo] + q.frac * (bottom[q.hi] - bottom[q.lo]);
                out.push(upper + r.frac * (lower - upper));
            }
        }
    }
    Tensor::new(vec![c, out_h, out_w], out)
}

/// Adjoint of [`bilinear_resize`]: spreads each output gradient over its four
/// source pixels with the forward interpolation weights.
pub fn bilinear_resize_backward(grad_output: &Tensor, in_h: usize, in_w: usize) -> Result<Tensor> {
    let (c, out_h, out_w) = grad_output.dims3()?;
    if in_h == 0 || in_w == 0 {
        return Err(Error::shape(format!(
            "bilinear_resize_backward: input extent {in_h}x{in_w} must be positive"
        )));
    }
    let rows = taps(in_h, out_h);
    let cols = taps(in_w, out_w);
    let g = grad_output.data();
    let mut gx = vec![0.0; c * in_h * in_w];
    for ch in 0..c {
        let plane = &mut gx[ch * in_h * in_w..(ch + 1) * in_h * in_w];
        let gplane = &g[ch * out_h * out_w..(ch + 1) * out_h * out_w];
        for (oi, r) in rows.iter().enumerate() {
            for (oj, q) in cols.iter().enumerate() {
                let v = gplane[oi * out_w + oj];
                let (wy0, wy1) = (1.0 - r.frac, r.frac);
                let (wx0, wx1) = (1.0 - q.frac, q.frac);
                plane[r.lo * in_w + q.lo] += v * wy0 * wx0;
                plane[r.lo * in_w + q.hi] += v * wy0 * wx1;
                plane[r.hi * in_w + q.lo] += v * wy1 * wx0;
                plane[r.hi * in_w + q.hi] += v * wy1 * wx1;
            }
        }
    }
    Tensor::new(vec![c, in_h, in_w], gx)
}
