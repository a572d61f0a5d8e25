//! Log-ratio difference image.

use crate::error::{Error, Result};
use crate::raster::RasterImage;

/// Per-pixel dissimilarity of a coregistered pair, rescaled to [0, 255].
#[derive(Debug, Clone, PartialEq)]
pub struct DifferenceImage {
    width: usize,
    height: usize,
    data: Vec<f64>,
}

impl DifferenceImage {
    pub fn new(width: usize, height: usize, data: Vec<f64>) -> Result<Self> {
        // Reuse the raster invariants (length and range).
        let raster = RasterImage::new(width, height, data)?;
        Ok(Self {
            width,
            height,
            data: raster.into_data(),
        })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.data[row * self.width + col]
    }

    pub fn to_raster(&self) -> RasterImage {
        RasterImage::new(self.width, self.height, self.data.clone())
            .expect("difference image invariants")
    }
}

pub(crate) fn check_same_dims(a: (usize, usize), b: (usize, usize), what: &str) -> Result<()> {
    if a != b {
        return Err(Error::Shape(format!(
            "{what} size mismatch: {}x{} vs {}x{}",
            a.0, a.1, b.0, b.1
        )));
    }
    Ok(())
}

/// `|ln((i2 + 1) / (i1 + 1))|` per pixel, then linearly mapped so the
/// largest value becomes 255. An all-zero ratio stays all zero.
pub fn log_ratio(i1: &RasterImage, i2: &RasterImage) -> Result<DifferenceImage> {
    check_same_dims(i1.dims(), i2.dims(), "image")?;
    let raw: Vec<f64> = i1
        .data()
        .iter()
        .zip(i2.data())
        .map(|(&a, &b)| ((b + 1.0).ln() - (a + 1.0).ln()).abs())
        .collect();
    let max = raw.iter().copied().fold(0.0_f64, f64::max);
    let data = if max > 0.0 {
        let scale = 255.0 / max;
        raw.into_iter()
            .map(|v| {
                if v == max {
                    255.0
                } else {
                    (v * scale).min(255.0)
                }
            })
            .collect()
    } else {
        raw
    };
    Ok(DifferenceImage {
        width: i1.width(),
        height: i1.height(),
        data,
    })
}
