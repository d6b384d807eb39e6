use crate::error::{Error, Result};
use crate::numerics::{bilinear_resize, Tensor};

use super::volume::{SliceLabel, SliceRecord, SliceVolume};

/// Side length slices are brought to before they reach the network.
pub const PREPROCESSED_SIZE: usize = 256;

/// Minimum fraction of lung (or, lacking a mask, nonzero) pixels a slice needs to be kept.
pub const DEFAULT_MIN_LUNG_FRACTION: f32 = 0.005;

/// Min-max normalization to [0, 1]; a constant image becomes all zeros.
pub fn normalize_min_max(image: &Tensor) -> Tensor {
    let (lo, hi) = image
        .data()
        .iter()
        .fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    let range = hi - lo;
    let data = if range > 0.0 {
        image.data().iter().map(|&v| ((v - lo) / range).clamp(0.0, 1.0)).collect()
    } else {
        vec![0.0; image.len()]
    };
    Tensor::new(image.shape(), data).expect("normalized values are finite")
}

/// Lung-segmented square slice → 256×256 record in [0, 1].
pub fn preprocess_slice(raw: &Tensor) -> Result<SliceRecord> {
    preprocess_slice_to(raw, PREPROCESSED_SIZE)
}

/// Resizes to `size`×`size`, then min-max normalizes. Input must be square and at least `size` wide.
pub fn preprocess_slice_to(raw: &Tensor, size: usize) -> Result<SliceRecord> {
    let shape = raw.shape();
    if shape.len() != 2 || shape[0] != shape[1] || shape[0] < size {
        return Err(Error::dim(format!(
            "expected a square slice of side ≥ {size}, got {shape:?}"
        )));
    }
    let resized = bilinear_resize(raw, size, size)?;
    SliceRecord::new(normalize_min_max(&resized), SliceLabel::Unlabeled)
}

/// Fraction of lung pixels, from the mask when present, else of nonzero pixels.
pub fn lung_fraction(slice: &SliceRecord) -> f32 {
    let source = slice.lung_mask.as_ref().unwrap_or(&slice.pixels);
    let hits = source.data().iter().filter(|&&v| v > 0.0).count();
    hits as f32 / source.len() as f32
}

/// Drops slices without visible lung, keeping order.
pub fn filter_empty_slices(volume: SliceVolume, min_lung_fraction: f32) -> Result<SliceVolume> {
    let SliceVolume { patient_id, slices, label } = volume;
    let kept: Vec<SliceRecord> = slices.into_iter().filter(|s| lung_fraction(s) >= min_lung_fraction).collect();
    if kept.is_empty() {
        return Err(Error::EmptyVolume(format!(
            "every slice of patient {patient_id} is below lung fraction {min_lung_fraction}"
        )));
    }
    Ok(SliceVolume { patient_id, slices: kept, label })
}
