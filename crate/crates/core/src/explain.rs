//! Grad-CAM saliency over the slice network's last convolution.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::io::write_atomic;
use crate::model::SliceModel;
use crate::numerics::{bilinear_resize, Graph, Mode, Tensor};

/// Class-capsule index of "infection evident".
pub const COVID_CLASS: usize = 1;
pub const NON_COVID_CLASS: usize = 0;

#[derive(Clone, Debug, PartialEq)]
pub struct HeatMap {
    /// S×S, values in [0, 1].
    pub values: Tensor,
    pub source_slice_id: String,
    pub target_class: usize,
}

/// Heat map of the evidence for `target_class` in one S×S slice.
///
/// The target is the class capsule's norm. Each conv4 channel is weighted by
/// the spatial mean of that norm's gradient, the weighted sum is rectified,
/// upsampled bilinearly to S×S and min-max normalized. A map with no positive
/// evidence is all zeros.
pub fn gradcam(model: &SliceModel, slice: &Tensor, target_class: usize) -> Result<HeatMap> {
    let s = model.arch.input_size;
    if slice.len() != s * s || !(slice.shape() == [s, s] || slice.shape() == [1, s, s]) {
        return Err(Error::dim(format!("expected a {s}×{s} slice, got {:?}", slice.shape())));
    }
    let classes = model.arch.class_spec().out_capsules;
    if target_class >= classes {
        return Err(Error::usage(format!("class {target_class} out of range for {classes} class capsules")));
    }

    let mut g = Graph::new();
    let input = g.constant(slice.reshape(&[1, 1, s, s])?);
    let rec = model.record(&mut g, input, Mode::Eval, true)?;
    let mut seed = vec![0.0f32; classes];
    seed[target_class] = 1.0;
    g.backward_seeded(rec.class_norms, &seed)?;

    let activations = g.value(rec.last_conv);
    let (c, h, w) = (activations.shape()[1], activations.shape()[2], activations.shape()[3]);
    let grads = g.grad(rec.last_conv).unwrap_or_else(|| Tensor::zeros(activations.shape()));
    let hw = h * w;
    let mut cam = vec![0.0f32; hw];
    for ch in 0..c {
        let a = &activations.data()[ch * hw..][..hw];
        let weight = grads.data()[ch * hw..][..hw].iter().sum::<f32>() / hw as f32;
        cam.iter_mut().zip(a).for_each(|(m, &v)| *m += weight * v);
    }
    cam.iter_mut().for_each(|m| *m = m.max(0.0));
    let up = bilinear_resize(&Tensor::new(&[h, w], cam)?, s, s)?;
    Ok(HeatMap { values: min_max(&up)?, source_slice_id: String::new(), target_class })
}

fn min_max(t: &Tensor) -> Result<Tensor> {
    let (lo, hi) = t.data().iter().fold((f32::INFINITY, f32::NEG_INFINITY), |(l, h), &v| (l.min(v), h.max(v)));
    let span = hi - lo;
    let data = if span > 0.0 {
        t.data().iter().map(|&v| ((v - lo) / span).clamp(0.0, 1.0)).collect()
    } else {
        vec![0.0; t.len()]
    };
    Tensor::new(t.shape(), data)
}

/// Mean heat inside and outside a binary mask.
pub fn heat_inside_outside(map: &Tensor, mask: &Tensor) -> Result<(f64, f64)> {
    if map.shape() != mask.shape() {
        return Err(Error::dim(format!("map {:?} vs mask {:?}", map.shape(), mask.shape())));
    }
    let (mut sum_in, mut n_in, mut sum_out, mut n_out) = (0.0f64, 0usize, 0.0f64, 0usize);
    for (&v, &m) in map.data().iter().zip(mask.data()) {
        if m > 0.5 {
            sum_in += v as f64;
            n_in += 1;
        } else {
            sum_out += v as f64;
            n_out += 1;
        }
    }
    if n_in == 0 || n_out == 0 {
        return Err(Error::usage("mask must have pixels both inside and outside"));
    }
    Ok((sum_in / n_in as f64, sum_out / n_out as f64))
}

/// 8-bit binary PGM (P5) of an H×W image in [0, 1].
pub fn encode_pgm(image: &Tensor) -> Result<Vec<u8>> {
    let [h, w] = *image.shape() else {
        return Err(Error::dim(format!("PGM needs H×W, got {:?}", image.shape())));
    };
    let mut header = String::new();
    write!(header, "P5\n{w} {h}\n255\n").unwrap();
    let mut bytes = header.into_bytes();
    bytes.extend(image.data().iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8));
    Ok(bytes)
}

pub fn write_pgm(path: &Path, image: &Tensor) -> Result<()> {
    write_atomic(path, &encode_pgm(image)?)
}

/// The slice and its heat map side by side, S×2S.
pub fn overlay(slice: &Tensor, map: &HeatMap) -> Result<Tensor> {
    let s = map.values.shape()[0];
    if slice.len() != s * s {
        return Err(Error::dim(format!("slice {:?} vs map {:?}", slice.shape(), map.values.shape())));
    }
    let mut data = Vec::with_capacity(2 * s * s);
    for y in 0..s {
        data.extend_from_slice(&slice.data()[y * s..][..s]);
        data.extend_from_slice(&map.values.data()[y * s..][..s]);
    }
    Tensor::new(&[s, 2 * s], data)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pgm_layout() {
        let img = Tensor::new(&[1, 3], vec![0.0, 0.5, 1.0]).unwrap();
        let bytes = encode_pgm(&img).unwrap();
        assert_eq!(&bytes[..11], b"P5\n3 1\n255\n");
        assert_eq!(&bytes[11..], &[0, 128, 255]);
    }

    #[test]
    fn min_max_of_constant_is_zero() {
        let t = Tensor::full(&[2, 2], 0.3);
        assert_eq!(min_max(&t).unwrap().data(), &[0.0; 4]);
    }
}
