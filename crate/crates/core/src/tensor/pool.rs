use super::Tensor;
use crate::error::{Error, Result};

/// Output of a 2×2/stride-2 max pool together with the routing needed by
/// [`maxpool2d_backward`].
#[derive(Debug, Clone)]
pub struct Pooled {
    pub output: Tensor,
    /// Flat input index chosen for each output element.
    pub argmax: Vec<usize>,
}

/// Non-overlapping 2×2 max pooling. Ties go to the smallest flat index.
pub fn maxpool2d(input: &Tensor) -> Result<Pooled> {
    let (c, h, w) = input.dims3()?;
    if h % 2 != 0 {
        return Err(Error::shape(format!("maxpool2d: height {h} is odd")));
    }
    if w % 2 != 0 {
        return Err(Error::shape(format!("maxpool2d: width {w} is odd")));
    }
    let (oh, ow) = (h / 2, w / 2);
    let x = input.data();
    let mut out = Vec::with_capacity(c * oh * ow);
    let mut argmax = Vec::with_capacity(c * oh * ow);
    for ch in 0..c {
        for oi in 0..oh {
            for oj in 0..ow {
                let top = (ch * h + 2 * oi) * w + 2 * oj;
                // Visited in increasing flat order, so strict `>` keeps the first maximum.
                let mut best = top;
                for idx in [top + 1, top + w, top + w + 1] {
                    if x[idx] > x[best] {
                        best = idx;
                    }
                }
                out.push(x[best]);
                argmax.push(best);
            }
        }
    }
    Ok(Pooled {
        output: Tensor::new(vec![c, oh, ow], out)?,
        argmax,
    })
}

/// Routes each output gradient to the input element that won its window.
pub fn maxpool2d_backward(
    input_shape: &[usize],
    argmax: &[usize],
    grad_output: &Tensor,
) -> Result<Tensor> {
    if grad_output.len() != argmax.len() {
        return Err(Error::shape(format!(
            "maxpool2d_backward: {} routed positions but grad_output has {} values",
            argmax.len(),
            grad_output.len()
        )));
    }
    let mut gx = Tensor::zeros(input_shape);
    for (&idx, &g) in argmax.iter().zip(grad_output.data()) {
        gx.data_mut()[idx] += g;
    }
    Ok(gx)
}
