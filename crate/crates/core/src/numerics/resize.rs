use crate::error::{Error, Result};

use super::tensor::Tensor;

/// Bilinear resize of an H×W image with the pixel-center convention
/// (corners not aligned). Samples outside the source clamp to the edge.
pub fn bilinear_resize(input: &Tensor, target_h: usize, target_w: usize) -> Result<Tensor> {
    if input.rank() != 2 {
        return Err(Error::dim(format!("bilinear_resize wants H×W, got {:?}", input.shape())));
    }
    if target_h == 0 || target_w == 0 {
        return Err(Error::usage("bilinear_resize target dims must be at least 1"));
    }
    let (h, w) = (input.shape()[0], input.shape()[1]);
    if (h, w) == (target_h, target_w) {
        return Ok(input.clone());
    }
    let x = input.data();
    let ys = sample_positions(h, target_h);
    let xs = sample_positions(w, target_w);
    let mut out = Vec::with_capacity(target_h * target_w);
    for &(y0, y1, fy) in &ys {
        for &(x0, x1, fx) in &xs {
            let top = x[y0 * w + x0] * (1.0 - fx) + x[y0 * w + x1] * fx;
            let bottom = x[y1 * w + x0] * (1.0 - fx) + x[y1 * w + x1] * fx;
            out.push(top * (1.0 - fy) + bottom * fy);
        }
    }
    Tensor::from_parts(vec![target_h, target_w], out, "bilinear_resize")
}

/// For each destination index: the two source indices and the blend weight of the second.
fn sample_positions(src: usize, dst: usize) -> Vec<(usize, usize, f32)> {
    let scale = src as f64 / dst as f64;
    (0..dst)
        .map(|i| {
            let pos = ((i as f64 + 0.5) * scale - 0.5).clamp(0.0, (src - 1) as f64);
            let lo = pos.floor() as usize;
            let hi = (lo + 1).min(src - 1);
            (lo, hi, (pos - lo as f64) as f32)
        })
        .collect()
}
