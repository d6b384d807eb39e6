//! Synthetic lung-CT cohorts with planted lesions.
//!
//! Every slice shows two elliptical lungs of moderate intensity on a dark
//! background with Gaussian noise. COVID volumes carry one bright peripheral
//! blob in a random 20–60% of their slices; those slices are labeled
//! infection-evident and keep the blob footprint as their infection mask.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::model::SUPPORTED_INPUT_SIZES;
use crate::numerics::Tensor;

use super::volume::{PatientLabel, SliceLabel, SliceRecord, SliceVolume};

pub const MIN_BLOB_FRACTION: f64 = 0.2;
pub const MAX_BLOB_FRACTION: f64 = 0.6;

const LUNG_LEVEL: f32 = 0.35;
const BACKGROUND_LEVEL: f32 = 0.04;
const NOISE_SD: f32 = 0.03;
const BLOB_GAIN: f32 = 0.55;
const BLOB_SIGMA: f32 = 0.055;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SynthConfig {
    pub n_covid: usize,
    pub n_noncovid: usize,
    pub slices_per_volume: usize,
    pub size: usize,
    pub seed: u64,
}

struct Ellipse {
    cx: f32,
    cy: f32,
    rx: f32,
    ry: f32,
}

impl Ellipse {
    /// Squared normalized radius; < 1 inside.
    fn rho2(&self, x: f32, y: f32) -> f32 {
        ((x - self.cx) / self.rx).powi(2) + ((y - self.cy) / self.ry).powi(2)
    }
}

/// Generates `n_covid` COVID volumes followed by `n_noncovid` others, ids `P000`, `P001`, ….
///
/// Each volume draws from its own ChaCha stream, so volume `i` depends only on `(seed, i)`.
pub fn generate_synthetic_cohort(cfg: &SynthConfig) -> Result<Vec<SliceVolume>> {
    if !SUPPORTED_INPUT_SIZES.contains(&cfg.size) {
        return Err(Error::usage(format!(
            "synthetic slice size {} not in {SUPPORTED_INPUT_SIZES:?}",
            cfg.size
        )));
    }
    if cfg.slices_per_volume == 0 {
        return Err(Error::usage("volumes need at least one slice"));
    }
    (0..cfg.n_covid + cfg.n_noncovid)
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
            rng.set_stream(i as u64);
            generate_volume(&mut rng, format!("P{i:03}"), i < cfg.n_covid, cfg)
        })
        .collect()
}

/// How many of `n` slices carry a lesion: uniform over counts whose fraction lies in [0.2, 0.6].
fn blob_slice_count(rng: &mut ChaCha8Rng, n: usize) -> usize {
    let lo = ((MIN_BLOB_FRACTION * n as f64).ceil() as usize).max(1);
    let hi = ((MAX_BLOB_FRACTION * n as f64).floor() as usize).max(lo).min(n);
    rng.gen_range(lo..=hi)
}

fn generate_volume(rng: &mut ChaCha8Rng, id: String, covid: bool, cfg: &SynthConfig) -> Result<SliceVolume> {
    let s = cfg.size as f32;
    let n = cfg.slices_per_volume;
    let rx = rng.gen_range(0.12..0.15) * s;
    let ry = rng.gen_range(0.26..0.31) * s;
    let sep = rng.gen_range(0.17..0.19) * s;
    let cy = rng.gen_range(0.48..0.52) * s;
    let blob_slices: Vec<usize> = if covid {
        let k = blob_slice_count(rng, n);
        sample(rng, n, k).into_vec()
    } else { Vec::new() };

    let noise = Normal::new(0.0f32, NOISE_SD).expect("valid sd");
    let mut slices = Vec::with_capacity(n);
    for z in 0..n {
        // lungs are widest mid-volume
        let t = if n > 1 { z as f32 / (n - 1) as f32 } else { 0.5 };
        let scale = 0.8 + 0.2 * (std::f32::consts::PI * t).sin();
        let lungs = [
            Ellipse { cx: s / 2.0 - sep, cy, rx: rx * scale, ry: ry * scale },
            Ellipse { cx: s / 2.0 + sep, cy, rx: rx * scale, ry: ry * scale },
        ];
        let blob = blob_slices.contains(&z).then(|| place_blob(rng, &lungs, s));

        let size = cfg.size;
        let mut pixels = vec![0.0f32; size * size];
        let mut lung_mask = vec![0.0f32; size * size];
        let mut infection = vec![0.0f32; size * size];
        for y in 0..size {
            for x in 0..size {
                let (px, py) = (x as f32 + 0.5, y as f32 + 0.5);
                let idx = y * size + x;
                let inside = lungs.iter().any(|e| e.rho2(px, py) < 1.0);
                let mut v = if inside { LUNG_LEVEL } else { BACKGROUND_LEVEL };
                if inside {
                    lung_mask[idx] = 1.0;
                    if let Some((bx, by, sigma)) = blob {
                        let d2 = (px - bx).powi(2) + (py - by).powi(2);
                        let bump = (-d2 / (2.0 * sigma * sigma)).exp();
                        v += BLOB_GAIN * bump;
                        if bump > 0.5 {
                            infection[idx] = 1.0;
                        }
                    }
                }
                v += noise.sample(rng);
                pixels[idx] = v.clamp(0.0, 1.0);
            }
        }
        let (label, infection_mask) = match blob {
            Some(_) => (SliceLabel::InfectionEvident, Some(Tensor::new(&[size, size], infection)?)),
            None => (SliceLabel::NoEvidence, None),
        };
        slices.push(SliceRecord {
            pixels: Tensor::new(&[size, size], pixels)?,
            lung_mask: Some(Tensor::new(&[size, size], lung_mask)?),
            infection_mask,
            label,
        });
    }
    SliceVolume::new(id, slices, PatientLabel::from_covid(covid))
}

/// Center and spread of a lesion near the outer rim of one lung.
fn place_blob(rng: &mut ChaCha8Rng, lungs: &[Ellipse; 2], s: f32) -> (f32, f32, f32) {
    let left = rng.gen_bool(0.5);
    let lung = &lungs[if left { 0 } else { 1 }];
    // angle measured from the lateral direction, kept on the outer half
    let theta: f32 = rng.gen_range(-1.2..1.2);
    let lateral = if left { -1.0 } else { 1.0 };
    let r = rng.gen_range(0.55..0.7);
    let bx = lung.cx + lateral * r * lung.rx * theta.cos();
    let by = lung.cy + r * lung.ry * theta.sin();
    (bx, by, BLOB_SIGMA * s)
}
