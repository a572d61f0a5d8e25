//! Grayscale rasters, binary change maps, and binary PGM (P5) I/O.
//!
//! Files are always 8-bit `P5` with maxval 255. The writer emits the minimal
//! header `P5\n<width> <height>\n255\n`; the reader also accepts arbitrary
//! whitespace and `#` comments between header tokens.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};

/// Intensity at or above this value decodes as "changed" in a reference map.
pub const CHANGE_THRESHOLD: f64 = 128.0;

/// A 2-D grayscale intensity grid stored row-major with real values in [0, 255].
#[derive(Debug, Clone, PartialEq)]
pub struct RasterImage {
    width: usize,
    height: usize,
    data: Vec<f64>,
}

impl RasterImage {
    pub fn new(width: usize, height: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != width * height {
            return Err(Error::Shape(format!(
                "raster data has {} values, expected {}x{} = {}",
                data.len(),
                width,
                height,
                width * height
            )));
        }
        if let Some(v) = data.iter().find(|v| !(0.0..=255.0).contains(*v)) {
            return Err(Error::Numeric(format!("raster value {v} outside [0, 255]")));
        }
        Ok(Self {
            width,
            height,
            data,
        })
    }

    pub fn filled(width: usize, height: usize, value: f64) -> Result<Self> {
        Self::new(width, height, vec![value; width * height])
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

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.data[row * self.width + col]
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.width, self.height)
    }
}

/// Binary per-pixel decision: 0 = unchanged, 1 = changed.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ChangeMap {
    width: usize,
    height: usize,
    labels: Vec<u8>,
}

impl ChangeMap {
    pub fn new(width: usize, height: usize, labels: Vec<u8>) -> Result<Self> {
        if labels.len() != width * height {
            return Err(Error::Shape(format!(
                "change map has {} labels, expected {}x{} = {}",
                labels.len(),
                width,
                height,
                width * height
            )));
        }
        if let Some(v) = labels.iter().find(|&&v| v > 1) {
            return Err(Error::Numeric(format!(
                "change map label {v} is not 0 or 1"
            )));
        }
        Ok(Self {
            width,
            height,
            labels,
        })
    }

    /// Threshold a reference raster: intensity >= 128 becomes "changed".
    pub fn from_raster(image: &RasterImage) -> Self {
        let labels = image
            .data()
            .iter()
            .map(|&v| u8::from(v >= CHANGE_THRESHOLD))
            .collect();
        Self {
            width: image.width,
            height: image.height,
            labels,
        }
    }

    /// Render as a raster with changed = 255 and unchanged = 0.
    pub fn to_raster(&self) -> RasterImage {
        let data = self
            .labels
            .iter()
            .map(|&l| if l == 1 { 255.0 } else { 0.0 })
            .collect();
        RasterImage {
            width: self.width,
            height: self.height,
            data,
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    pub fn changed_count(&self) -> usize {
        self.labels.iter().filter(|&&l| l == 1).count()
    }
}

pub fn read_pgm(path: impl AsRef<Path>) -> Result<RasterImage> {
    let bytes = fs::read(path)?;
    decode_pgm(&bytes)
}

/// Decode a binary PGM held in memory.
pub fn decode_pgm(bytes: &[u8]) -> Result<RasterImage> {
    let mut cursor = HeaderCursor { bytes, pos: 0 };
    if bytes.len() < 2 || &bytes[..2] != b"P5" {
        let found = String::from_utf8_lossy(&bytes[..bytes.len().min(2)]).into_owned();
        return Err(Error::parse(
            "magic number",
            format!("expected \"P5\", found {found:?}"),
        ));
    }
    cursor.pos = 2;
    let width = cursor.next_number("width")?;
    let height = cursor.next_number("height")?;
    let maxval = cursor.next_number("maxval")?;
    if maxval != 255 {
        return Err(Error::parse(
            "maxval",
            format!("unsupported maxval {maxval} (only 255)"),
        ));
    }
    if width == 0 || height == 0 {
        return Err(Error::parse(
            "width/height",
            format!("empty image {width}x{height}"),
        ));
    }
    // Exactly one whitespace byte separates the header from the raster.
    match bytes.get(cursor.pos) {
        Some(b) if b.is_ascii_whitespace() => cursor.pos += 1,
        _ => return Err(Error::parse("maxval", "missing whitespace after header")),
    }
    let expected = width * height;
    let payload = &bytes[cursor.pos..];
    if payload.len() < expected {
        return Err(Error::parse(
            "payload",
            format!("truncated payload: {} of {} bytes", payload.len(), expected),
        ));
    }
    let data = payload[..expected].iter().map(|&b| f64::from(b)).collect();
    Ok(RasterImage {
        width,
        height,
        data,
    })
}

/// Encode as binary PGM, rounding each intensity to the nearest integer.
pub fn encode_pgm(image: &RasterImage) -> Vec<u8> {
    let header = format!("P5\n{} {}\n255\n", image.width, image.height);
    let mut out = Vec::with_capacity(header.len() + image.data.len());
    out.extend_from_slice(header.as_bytes());
    out.extend(
        image
            .data
            .iter()
            .map(|&v| v.round().clamp(0.0, 255.0) as u8),
    );
    out
}

pub fn write_pgm(image: &RasterImage, path: impl AsRef<Path>) -> Result<()> {
    let mut file = fs::File::create(path)?;
    file.write_all(&encode_pgm(image))?;
    Ok(())
}

pub fn write_change_map(map: &ChangeMap, path: impl AsRef<Path>) -> Result<()> {
    write_pgm(&map.to_raster(), path)
}

struct HeaderCursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl HeaderCursor<'_> {
    fn skip_whitespace_and_comments(&mut self) {
        while let Some(&b) = self.bytes.get(self.pos) {
            if b.is_ascii_whitespace() {
                self.pos += 1;
            } else if b == b'#' {
                while let Some(&c) = self.bytes.get(self.pos) {
                    self.pos += 1;
                    if c == b'\n' || c == b'\r' {
                        break;
                    }
                }
            } else {
                break;
            }
        }
    }

    fn next_number(&mut self, field: &'static str) -> Result<usize> {
        let start_pos = self.pos;
        self.skip_whitespace_and_comments();
        if self.pos == start_pos && self.pos < self.bytes.len() {
            return Err(Error::parse(field, "expected whitespace before value"));
        }
        let start = self.pos;
        while self.bytes.get(self.pos).is_some_and(u8::is_ascii_digit) {
            self.pos += 1;
        }
        if start == self.pos {
            return Err(Error::parse(
                field,
                if self.pos >= self.bytes.len() {
                    "header ends early".into()
                } else {
                    "expected a decimal number".to_string()
                },
            ));
        }
        std::str::from_utf8(&self.bytes[start..self.pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::parse(field, "number out of range"))
    }
}
