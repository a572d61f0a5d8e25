//! Synthetic coregistered image pairs with known change.
//!
//! Both images start from a flat background. The second raises a few random
//! rectangles and axis-aligned ellipses to a brighter level, and each image is
//! then multiplied by independent unit-mean gamma speckle with `L` looks.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma};

use crate::error::{Error, Result};
use crate::raster::{ChangeMap, RasterImage};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SceneSpec {
    pub width: usize,
    pub height: usize,
    pub n_shapes: usize,
    pub background_level: f64,
    pub change_level: f64,
    pub speckle_looks: u32,
    pub seed: u64,
}

impl Default for SceneSpec {
    /// The standard benchmark scene.
    fn default() -> Self {
        Self {
            width: 128,
            height: 128,
            n_shapes: 4,
            background_level: 60.0,
            change_level: 180.0,
            speckle_looks: 4,
            seed: 0,
        }
    }
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        if self.width == 0 || self.height == 0 {
            return Err(Error::Config(format!(
                "scene size must be positive, got {}x{}",
                self.width, self.height
            )));
        }
        let (b, c) = (self.background_level, self.change_level);
        if !(0.0 <= b && b < c && c <= 255.0) {
            return Err(Error::Config(format!(
                "levels must satisfy 0 <= background < change <= 255, got {b} and {c}"
            )));
        }
        if self.speckle_looks == 0 {
            return Err(Error::Config("speckle looks must be at least 1".into()));
        }
        Ok(())
    }
}

/// A changed region. Coordinates are in pixels and may extend past the image
/// border; only pixel centers inside the image are rasterized.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Shape {
    /// Rows `top..top + h`, columns `left..left + w`.
    Rect { top: i64, left: i64, h: i64, w: i64 },
    /// Pixel `(row, col)` is inside when
    /// `((row - cy) / ry)^2 + ((col - cx) / rx)^2 <= 1`.
    Ellipse { cy: f64, cx: f64, ry: f64, rx: f64 },
}

impl Shape {
    pub fn contains(&self, row: usize, col: usize) -> bool {
        let (y, x) = (row as i64, col as i64);
        match *self {
            Shape::Rect { top, left, h, w } => y >= top && y < top + h && x >= left && x < left + w,
            Shape::Ellipse { cy, cx, ry, rx } => {
                let dy = (row as f64 - cy) / ry;
                let dx = (col as f64 - cx) / rx;
                dy * dy + dx * dx <= 1.0
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub i1: RasterImage,
    pub i2: RasterImage,
    pub truth: ChangeMap,
    pub shapes: Vec<Shape>,
}

fn random_shape(spec: &SceneSpec, rng: &mut ChaCha8Rng) -> Shape {
    let side = spec.width.min(spec.height) as f64;
    let (lo, hi) = ((side / 16.0).max(1.0), (side / 6.0).max(2.0));
    let cy = rng.gen_range(0.0..spec.height as f64);
    let cx = rng.gen_range(0.0..spec.width as f64);
    let ry = rng.gen_range(lo..hi);
    let rx = rng.gen_range(lo..hi);
    if rng.gen_bool(0.5) {
        Shape::Rect {
            top: (cy - ry).round() as i64,
            left: (cx - rx).round() as i64,
            h: (2.0 * ry).round() as i64,
            w: (2.0 * rx).round() as i64,
        }
    } else {
        Shape::Ellipse { cy, cx, ry, rx }
    }
}

fn speckled(clean: &[f64], gamma: &Gamma<f64>, rng: &mut ChaCha8Rng) -> Vec<f64> {
    clean
        .iter()
        .map(|&v| (v * gamma.sample(rng)).clamp(0.0, 255.0).round())
        .collect()
}

pub fn generate(spec: &SceneSpec) -> Result<Scene> {
    spec.validate()?;
    let (w, h) = (spec.width, spec.height);
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let shapes: Vec<Shape> = (0..spec.n_shapes)
        .map(|_| random_shape(spec, &mut rng))
        .collect();

    let labels: Vec<u8> = (0..w * h)
        .map(|i| u8::from(shapes.iter().any(|s| s.contains(i / w, i % w))))
        .collect();
    let changed = labels.iter().filter(|&&l| l == 1).count();
    if changed == w * h {
        return Err(Error::Config(format!(
            "the {} shapes cover the whole {w}x{h} image",
            spec.n_shapes
        )));
    }

    let looks = f64::from(spec.speckle_looks);
    let gamma =
        Gamma::new(looks, 1.0 / looks).map_err(|e| Error::Config(format!("speckle: {e}")))?;
    let clean1 = vec![spec.background_level; w * h];
    let clean2: Vec<f64> = labels
        .iter()
        .map(|&l| {
            if l == 1 {
                spec.change_level
            } else {
                spec.background_level
            }
        })
        .collect();
    let i1 = RasterImage::new(w, h, speckled(&clean1, &gamma, &mut rng))?;
    let i2 = RasterImage::new(w, h, speckled(&clean2, &gamma, &mut rng))?;
    Ok(Scene {
        i1,
        i2,
        truth: ChangeMap::new(w, h, labels)?,
        shapes,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic() {
        let spec = SceneSpec {
            seed: 3,
            ..Default::default()
        };
        assert_eq!(generate(&spec).unwrap(), generate(&spec).unwrap());
        let other = generate(&SceneSpec { seed: 4, ..spec }).unwrap();
        assert_ne!(generate(&spec).unwrap().i1, other.i1);
    }

    #[test]
    fn no_shapes_no_change() {
        let scene = generate(&SceneSpec {
            n_shapes: 0,
            ..Default::default()
        })
        .unwrap();
        assert_eq!(scene.truth.changed_count(), 0);
        let mean = |img: &RasterImage| img.data().iter().sum::<f64>() / img.data().len() as f64;
        assert!((mean(&scene.i1) - mean(&scene.i2)).abs() < 1.5);
    }

    #[test]
    fn many_looks_is_nearly_clean() {
        let scene = generate(&SceneSpec {
            speckle_looks: 1_000_000,
            ..Default::default()
        })
        .unwrap();
        // Multiplier standard deviation is 1e-3, so values stay within one
        // grey level of the clean scene.
        assert!(scene.i1.data().iter().all(|&v| (v - 60.0).abs() <= 1.0));
        for (v, &l) in scene.i2.data().iter().zip(scene.truth.labels()) {
            assert!((v - if l == 1 { 180.0 } else { 60.0 }).abs() <= 1.0);
        }
    }

    #[test]
    fn speckle_has_unit_mean() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for looks in [1.0, 4.0, 16.0] {
            let g = Gamma::new(looks, 1.0 / looks).unwrap();
            let n = 200_000;
            let mean = (0..n).map(|_| g.sample(&mut rng)).sum::<f64>() / n as f64;
            assert!((mean - 1.0).abs() < 0.01, "L = {looks}: mean {mean}");
        }
    }

    /// Rasterize each shape independently of `Shape::contains`.
    fn oracle_count(shapes: &[Shape], w: usize, h: usize) -> usize {
        let mut hit = vec![false; w * h];
        for s in shapes {
            match *s {
                Shape::Rect {
                    top,
                    left,
                    h: sh,
                    w: sw,
                } => {
                    let rows = top.max(0)..(top + sh).min(h as i64);
                    for y in rows {
                        for x in left.max(0)..(left + sw).min(w as i64) {
                            hit[y as usize * w + x as usize] = true;
                        }
                    }
                }
                Shape::Ellipse { cy, cx, ry, rx } => {
                    for (y, row) in hit.chunks_mut(w).enumerate() {
                        let t = 1.0 - ((y as f64 - cy) / ry).powi(2);
                        if t < 0.0 {
                            continue;
                        }
                        let half = rx * t.sqrt();
                        for (x, cell) in row.iter_mut().enumerate() {
                            if (x as f64 - cx).abs() <= half {
                                *cell = true;
                            }
                        }
                    }
                }
            }
        }
        hit.iter().filter(|&&b| b).count()
    }

    #[test]
    fn truth_matches_rasterized_shapes() {
        for seed in 0..20 {
            let spec = SceneSpec {
                width: 64,
                height: 48,
                n_shapes: 5,
                seed,
                ..Default::default()
            };
            let scene = generate(&spec).unwrap();
            assert_eq!(
                scene.truth.changed_count(),
                oracle_count(&scene.shapes, 64, 48),
                "seed {seed}"
            );
        }
    }

    #[test]
    fn interior_rectangle_area_is_exact() {
        let s = Shape::Rect {
            top: 3,
            left: 4,
            h: 5,
            w: 7,
        };
        assert_eq!(oracle_count(&[s], 20, 20), 35);
        let inside = (0..400).filter(|i| s.contains(i / 20, i % 20)).count();
        assert_eq!(inside, 35);
    }

    #[test]
    fn rejects_bad_specs() {
        assert!(generate(&SceneSpec {
            background_level: 200.0,
            ..Default::default()
        })
        .is_err());
        assert!(generate(&SceneSpec {
            speckle_looks: 0,
            ..Default::default()
        })
        .is_err());
        assert!(generate(&SceneSpec {
            change_level: 256.0,
            ..Default::default()
        })
        .is_err());
        let tiny = SceneSpec {
            width: 2,
            height: 2,
            n_shapes: 50,
            ..Default::default()
        };
        assert!(matches!(generate(&tiny), Err(Error::Config(_))));
    }
}
