//! Three-channel patches around each pixel and the pseudo-labelled training set.
//!
//! A patch stacks the `R x R` neighbourhoods of I1, I2 and the difference
//! image, in that channel order, scaled to [0, 1]. Windows that run off the
//! image repeat the nearest edge pixel.

use rand::seq::index::sample as sample_indices;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::diff::{check_same_dims, DifferenceImage};
use crate::error::{Error, Result};
use crate::preclassify::{PseudoLabel, PseudoLabelMap};
use crate::raster::RasterImage;
use crate::tensor::Tensor;

pub const CHANNELS: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct PixelCoord {
    pub row: usize,
    pub col: usize,
}

impl PixelCoord {
    pub fn new(row: usize, col: usize) -> Self {
        Self { row, col }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PatchConfig {
    /// Odd patch side length.
    pub r: usize,
    pub max_per_class: usize,
    pub seed: u64,
}

impl PatchConfig {
    pub fn new(r: usize, max_per_class: usize, seed: u64) -> Result<Self> {
        let cfg = Self {
            r,
            max_per_class,
            seed,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        validate_patch_size(self.r)?;
        if self.max_per_class == 0 {
            return Err(Error::Config("max_per_class must be at least 1".into()));
        }
        Ok(())
    }
}

pub fn validate_patch_size(r: usize) -> Result<()> {
    if r % 2 == 0 || !(3..=31).contains(&r) {
        return Err(Error::Config(format!(
            "patch size must be odd and within 3..=31, got {r}"
        )));
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    /// `3 x R x R`, channels (I1, I2, DI), values in [0, 1].
    pub patch: Tensor,
    /// 0 unchanged, 1 changed.
    pub label: u8,
    pub pixel: PixelCoord,
}

/// Borrowed view of the three co-registered sources a patch is cut from.
#[derive(Debug, Clone, Copy)]
pub struct PatchSource<'a> {
    i1: &'a RasterImage,
    i2: &'a RasterImage,
    di: &'a DifferenceImage,
}

impl<'a> PatchSource<'a> {
    pub fn new(i1: &'a RasterImage, i2: &'a RasterImage, di: &'a DifferenceImage) -> Result<Self> {
        check_same_dims(i1.dims(), i2.dims(), "image")?;
        check_same_dims(i1.dims(), di.dims(), "difference image")?;
        Ok(Self { i1, i2, di })
    }

    pub fn width(&self) -> usize {
        self.i1.width()
    }

    pub fn height(&self) -> usize {
        self.i1.height()
    }

    /// Write the `3 x r x r` patch centered at `center` into `out`.
    pub fn write_patch(&self, center: PixelCoord, r: usize, out: &mut [f64]) -> Result<()> {
        let (w, h) = (self.width(), self.height());
        if center.row >= h || center.col >= w {
            return Err(Error::Coordinate(format!(
                "pixel ({}, {}) outside {}x{} image",
                center.row, center.col, w, h
            )));
        }
        if r % 2 == 0 {
            return Err(Error::Config(format!("patch size must be odd, got {r}")));
        }
        if out.len() != CHANNELS * r * r {
            return Err(Error::Shape(format!(
                "patch buffer of {} values for R = {r}",
                out.len()
            )));
        }
        let half = (r / 2) as isize;
        let clamp = |v: isize, n: usize| v.clamp(0, n as isize - 1) as usize;
        let planes = [self.i1.data(), self.i2.data(), self.di.data()];
        for (ch, plane) in planes.iter().enumerate() {
            let dst = &mut out[ch * r * r..(ch + 1) * r * r];
            for dy in 0..r {
                let y = clamp(center.row as isize + dy as isize - half, h);
                let src_row = &plane[y * w..(y + 1) * w];
                for dx in 0..r {
                    let x = clamp(center.col as isize + dx as isize - half, w);
                    dst[dy * r + dx] = src_row[x] / 255.0;
                }
            }
        }
        Ok(())
    }

    pub fn patch(&self, center: PixelCoord, r: usize) -> Result<Tensor> {
        let mut data = vec![0.0; CHANNELS * r * r];
        self.write_patch(center, r, &mut data)?;
        Tensor::new([CHANNELS, r, r], data)
    }
}

pub fn extract_patch(
    i1: &RasterImage,
    i2: &RasterImage,
    di: &DifferenceImage,
    center: PixelCoord,
    r: usize,
) -> Result<Tensor> {
    PatchSource::new(i1, i2, di)?.patch(center, r)
}

/// Every confidently changed / unchanged pixel becomes a candidate; each class
/// is shuffled and capped at `max_per_class`, and the union is shuffled again.
pub fn build_training_set(
    i1: &RasterImage,
    i2: &RasterImage,
    di: &DifferenceImage,
    labels: &PseudoLabelMap,
    cfg: &PatchConfig,
) -> Result<Vec<Sample>> {
    cfg.validate()?;
    let source = PatchSource::new(i1, i2, di)?;
    check_same_dims(i1.dims(), labels.dims(), "pseudo-label map")?;

    let w = labels.width();
    let mut changed = Vec::new();
    let mut unchanged = Vec::new();
    for (i, l) in labels.labels().iter().enumerate() {
        let px = PixelCoord::new(i / w, i % w);
        match l {
            PseudoLabel::Changed => changed.push(px),
            PseudoLabel::Unchanged => unchanged.push(px),
            PseudoLabel::Intermediate => {}
        }
    }
    if changed.is_empty() || unchanged.is_empty() {
        return Err(Error::Clustering(format!(
            "training set needs both classes: {} changed, {} unchanged",
            changed.len(),
            unchanged.len()
        )));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut picked = Vec::new();
    for (label, mut pixels) in [(1u8, changed), (0u8, unchanged)] {
        pixels.shuffle(&mut rng);
        pixels.truncate(cfg.max_per_class);
        picked.extend(pixels.into_iter().map(|px| (label, px)));
    }
    picked.shuffle(&mut rng);

    picked
        .into_iter()
        .map(|(label, pixel)| {
            Ok(Sample {
                patch: source.patch(pixel, cfg.r)?,
                label,
                pixel,
            })
        })
        .collect()
}

/// Flip exactly `round(flip_rate * n)` labels chosen uniformly without replacement.
pub fn inject_label_noise(samples: &[Sample], flip_rate: f64, seed: u64) -> Result<Vec<Sample>> {
    if !(0.0..1.0).contains(&flip_rate) {
        return Err(Error::Config(format!(
            "flip rate must be in [0, 1), got {flip_rate}"
        )));
    }
    let mut out = samples.to_vec();
    let n_flip = (flip_rate * samples.len() as f64).round() as usize;
    if n_flip == 0 {
        return Ok(out);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for i in sample_indices(&mut rng, samples.len(), n_flip) {
        out[i].label = 1 - out[i].label;
    }
    Ok(out)
}
