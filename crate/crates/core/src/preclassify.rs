//! Fuzzy c-means clustering of the difference image and the two-stage
//! (hierarchical) rule that turns it into training pseudo-labels.
//!
//! Stage one splits the difference values into a coarse unchanged / changed
//! pair of fuzzy partitions with means `m_u < m_c`. Stage two re-clusters the
//! same values into up to five clusters. The lowest cluster is unchanged, the
//! highest is changed, and every middle cluster is decided by which side of
//! `(m_u + m_c) / 2` its center falls on, provided the pixel is confidently
//! (membership >= 0.9) on that side of the stage-one partition. Everything
//! else is left out of training as intermediate.

use rand::seq::index::sample as sample_indices;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::diff::DifferenceImage;
use crate::error::{Error, Result};
use crate::raster::RasterImage;

const DEGENERATE: &str = "degenerate clustering input";

#[derive(Debug, Clone, PartialEq)]
pub struct FcmParams {
    pub clusters: usize,
    pub fuzzifier: f64,
    pub max_iter: usize,
    pub tol: f64,
    /// Fit on a random subset of at most this many samples.
    pub max_samples: Option<usize>,
    /// Only used for subsampling.
    pub seed: u64,
}

impl FcmParams {
    pub fn new(clusters: usize) -> Self {
        Self {
            clusters,
            fuzzifier: 2.0,
            max_iter: 100,
            tol: 1e-5,
            max_samples: None,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FcmResult {
    /// Strictly ascending.
    pub centers: Vec<f64>,
    /// One row per fitted sample, one column per cluster (ordered like `centers`).
    pub memberships: Vec<Vec<f64>>,
    /// Objective after every iteration.
    pub objective_trace: Vec<f64>,
}

/// Membership of `x` in each cluster.
///
/// A sample that coincides with one or more centers is shared equally
/// between them and gets zero membership elsewhere.
pub fn memberships(x: f64, centers: &[f64], fuzzifier: f64) -> Vec<f64> {
    let mut out = vec![0.0; centers.len()];
    fill_memberships(x, centers, fuzzifier, &mut out);
    out
}

fn fill_memberships(x: f64, centers: &[f64], fuzzifier: f64, out: &mut [f64]) {
    let exponent = -1.0 / (fuzzifier - 1.0);
    let hits = centers.iter().filter(|&&v| v == x).count();
    if hits > 0 {
        let share = 1.0 / hits as f64;
        for (u, &v) in out.iter_mut().zip(centers) {
            *u = if v == x { share } else { 0.0 };
        }
        return;
    }
    let mut total = 0.0;
    for (u, &v) in out.iter_mut().zip(centers) {
        let d2 = (x - v) * (x - v);
        *u = if exponent == -1.0 {
            1.0 / d2
        } else {
            d2.powf(exponent)
        };
        total += *u;
    }
    for u in out.iter_mut() {
        *u /= total;
    }
}

fn neumaier_sum(values: impl Iterator<Item = f64>) -> f64 {
    let mut sum = 0.0_f64;
    let mut comp = 0.0_f64;
    for v in values {
        let t = sum + v;
        if sum.abs() >= v.abs() {
            comp += (sum - t) + v;
        } else {
            comp += (v - t) + sum;
        }
        sum = t;
    }
    sum + comp
}

fn sorted_copy(values: &[f64]) -> Vec<f64> {
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    sorted
}

/// Cluster centers at the `(k + 0.5) / c` quantiles of the sample values.
/// Falls back to quantiles of the distinct values when that would place two
/// centers on the same value.
fn initial_centers(sorted: &[f64], distinct: &[f64], c: usize) -> Vec<f64> {
    let pick = |vals: &[f64]| -> Vec<f64> {
        (0..c)
            .map(|k| {
                let idx = (((k as f64 + 0.5) / c as f64) * vals.len() as f64).floor() as usize;
                vals[idx.min(vals.len() - 1)]
            })
            .collect()
    };
    let centers = pick(sorted);
    if centers.windows(2).all(|w| w[0] < w[1]) {
        centers
    } else {
        pick(distinct)
    }
}

fn distinct_values(sorted: &[f64]) -> Vec<f64> {
    let mut distinct = sorted.to_vec();
    distinct.dedup();
    distinct
}

/// Classical fuzzy c-means on scalar samples.
///
/// Alternates membership and center updates until the largest center move is
/// below `tol` or `max_iter` iterations have run. Requires at least
/// `clusters` distinct sample values.
pub fn fcm(samples: &[f64], params: &FcmParams) -> Result<FcmResult> {
    let c = params.clusters;
    if c < 2 {
        return Err(Error::Config(format!(
            "fcm needs at least 2 clusters, got {c}"
        )));
    }
    if params.fuzzifier.is_nan() || params.fuzzifier <= 1.0 {
        return Err(Error::Config(format!(
            "fuzzifier must exceed 1, got {}",
            params.fuzzifier
        )));
    }
    if samples.is_empty() {
        return Err(Error::Clustering(format!("{DEGENERATE}: no samples")));
    }
    if samples.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("non-finite clustering sample".into()));
    }

    let subset: Vec<f64>;
    let data = match params.max_samples {
        Some(cap) if cap < samples.len() => {
            let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
            let mut picked = sample_indices(&mut rng, samples.len(), cap).into_vec();
            picked.sort_unstable();
            subset = picked.into_iter().map(|i| samples[i]).collect();
            &subset[..]
        }
        _ => samples,
    };

    let sorted = sorted_copy(data);
    let distinct = distinct_values(&sorted);
    if distinct.len() < c {
        return Err(Error::Clustering(format!(
            "{DEGENERATE}: {} distinct values for {} clusters",
            distinct.len(),
            c
        )));
    }

    let m = params.fuzzifier;
    let mut centers = initial_centers(&sorted, &distinct, c);
    let mut u = vec![0.0; data.len() * c];
    let mut trace = Vec::new();

    for _ in 0..params.max_iter {
        for (row, &x) in u.chunks_exact_mut(c).zip(data) {
            fill_memberships(x, &centers, m, row);
        }
        let mut next = centers.clone();
        for (k, center) in next.iter_mut().enumerate() {
            let mut num = 0.0;
            let mut den = 0.0;
            for (row, &x) in u.chunks_exact(c).zip(data) {
                let w = row[k].powf(m);
                num += w * x;
                den += w;
            }
            if den > 0.0 {
                *center = num / den;
            }
        }
        let objective = neumaier_sum(u.chunks_exact(c).zip(data).flat_map(|(row, &x)| {
            row.iter()
                .zip(&next)
                .map(move |(&uk, &v)| uk.powf(m) * (x - v) * (x - v))
        }));
        trace.push(objective);
        let shift = centers
            .iter()
            .zip(&next)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        centers = next;
        if shift < params.tol {
            break;
        }
    }

    let mut order: Vec<usize> = (0..c).collect();
    order.sort_by(|&a, &b| centers[a].total_cmp(&centers[b]));
    let centers: Vec<f64> = order.iter().map(|&k| centers[k]).collect();
    let memberships = data.iter().map(|&x| memberships(x, &centers, m)).collect();
    Ok(FcmResult {
        centers,
        memberships,
        objective_trace: trace,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum PseudoLabel {
    Unchanged,
    Changed,
    Intermediate,
}

impl PseudoLabel {
    /// Debug rendering: unchanged 0, intermediate 128, changed 255.
    pub fn intensity(self) -> f64 {
        match self {
            PseudoLabel::Unchanged => 0.0,
            PseudoLabel::Intermediate => 128.0,
            PseudoLabel::Changed => 255.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PseudoLabelMap {
    width: usize,
    height: usize,
    labels: Vec<PseudoLabel>,
}

impl PseudoLabelMap {
    pub fn new(width: usize, height: usize, labels: Vec<PseudoLabel>) -> Result<Self> {
        if labels.len() != width * height {
            return Err(Error::Shape(format!(
                "pseudo-label map has {} labels, expected {}x{}",
                labels.len(),
                width,
                height
            )));
        }
        Ok(Self {
            width,
            height,
            labels,
        })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    pub fn labels(&self) -> &[PseudoLabel] {
        &self.labels
    }

    pub fn count(&self, label: PseudoLabel) -> usize {
        self.labels.iter().filter(|&&l| l == label).count()
    }

    pub fn to_raster(&self) -> RasterImage {
        let data = self.labels.iter().map(|l| l.intensity()).collect();
        RasterImage::new(self.width, self.height, data).expect("label intensities are in range")
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PreclassifyConfig {
    pub fuzzifier: f64,
    pub max_iter: usize,
    pub tol: f64,
    /// Cluster count of the refinement stage (reduced when the image has fewer distinct values).
    pub fine_clusters: usize,
    /// Minimum stage-one membership for a middle cluster pixel to be kept.
    pub confidence: f64,
    pub max_samples: Option<usize>,
    pub seed: u64,
}

impl Default for PreclassifyConfig {
    fn default() -> Self {
        Self {
            fuzzifier: 2.0,
            max_iter: 100,
            tol: 1e-5,
            fine_clusters: 5,
            confidence: 0.90,
            max_samples: None,
            seed: 0,
        }
    }
}

impl PreclassifyConfig {
    fn fcm_params(&self, clusters: usize) -> FcmParams {
        FcmParams {
            clusters,
            fuzzifier: self.fuzzifier,
            max_iter: self.max_iter,
            tol: self.tol,
            max_samples: self.max_samples,
            seed: self.seed,
        }
    }
}

/// Index of the nearest center, lowest index on ties. For any fuzzifier this
/// is the cluster of largest membership.
fn nearest_center(x: f64, centers: &[f64]) -> usize {
    let mut best = 0;
    let mut best_d = f64::INFINITY;
    for (k, &v) in centers.iter().enumerate() {
        let d = (x - v).abs();
        if d < best_d {
            best = k;
            best_d = d;
        }
    }
    best
}

pub fn hierarchical_fcm(di: &DifferenceImage) -> Result<PseudoLabelMap> {
    hierarchical_fcm_with(di, &PreclassifyConfig::default())
}

pub fn hierarchical_fcm_with(
    di: &DifferenceImage,
    cfg: &PreclassifyConfig,
) -> Result<PseudoLabelMap> {
    let values = di.data();
    let coarse = fcm(values, &cfg.fcm_params(2))?;
    let (m_u, m_c) = (coarse.centers[0], coarse.centers[1]);
    let threshold = 0.5 * (m_u + m_c);

    let distinct = distinct_values(&sorted_copy(values)).len();
    let fine_k = cfg.fine_clusters.min(distinct).max(2);
    let fine = fcm(values, &cfg.fcm_params(fine_k))?;

    let mut coarse_u = [0.0; 2];
    let labels: Vec<PseudoLabel> = values
        .iter()
        .map(|&x| {
            let k = nearest_center(x, &fine.centers);
            if k == 0 {
                return PseudoLabel::Unchanged;
            }
            if k == fine_k - 1 {
                return PseudoLabel::Changed;
            }
            fill_memberships(x, &coarse.centers, cfg.fuzzifier, &mut coarse_u);
            let center = fine.centers[k];
            if center > threshold && coarse_u[1] >= cfg.confidence {
                PseudoLabel::Changed
            } else if center < threshold && coarse_u[0] >= cfg.confidence {
                PseudoLabel::Unchanged
            } else {
                PseudoLabel::Intermediate
            }
        })
        .collect();

    let map = PseudoLabelMap::new(di.width(), di.height(), labels)?;
    if map.count(PseudoLabel::Changed) == 0 || map.count(PseudoLabel::Unchanged) == 0 {
        return Err(Error::Clustering(format!(
            "preclassification collapsed: {} changed, {} unchanged pixels",
            map.count(PseudoLabel::Changed),
            map.count(PseudoLabel::Unchanged)
        )));
    }
    Ok(map)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;

    fn di(w: usize, h: usize, v: Vec<f64>) -> DifferenceImage {
        DifferenceImage::new(w, h, v).unwrap()
    }

    /// Objective evaluated directly from its definition.
    fn objective(samples: &[f64], centers: &[f64], m: f64) -> f64 {
        samples
            .iter()
            .map(|&x| {
                memberships(x, centers, m)
                    .iter()
                    .zip(centers)
                    .map(|(u, v)| u.powf(m) * (x - v).powi(2))
                    .sum::<f64>()
            })
            .sum()
    }

    #[test]
    fn two_point_masses() {
        let samples = [0.0, 0.0, 0.0, 255.0, 255.0, 255.0];
        let res = fcm(&samples, &FcmParams::new(2)).unwrap();
        assert!((res.centers[0] - 0.0).abs() < 1e-9);
        assert!((res.centers[1] - 255.0).abs() < 1e-9);
        for (row, &x) in res.memberships.iter().zip(&samples) {
            let hot = usize::from(x > 100.0);
            assert!((row[hot] - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn one_cluster_per_point() {
        let res = fcm(&[200.0, 0.0, 100.0], &FcmParams::new(3)).unwrap();
        assert_eq!(res.centers, vec![0.0, 100.0, 200.0]);
        assert_eq!(*res.objective_trace.last().unwrap(), 0.0);
        assert_eq!(res.memberships[0], vec![0.0, 0.0, 1.0]);
    }

    #[test]
    fn coinciding_sample_takes_full_membership() {
        assert_eq!(memberships(5.0, &[1.0, 5.0, 9.0], 2.0), vec![0.0, 1.0, 0.0]);
        let u = memberships(3.0, &[1.0, 5.0], 2.0);
        assert!((u[0] - 0.5).abs() < 1e-15);
    }

    #[test]
    fn degenerate_inputs() {
        let err = fcm(&[3.0; 10], &FcmParams::new(2)).unwrap_err();
        assert!(err.to_string().contains("degenerate clustering input"));
        assert!(fcm(&[], &FcmParams::new(2)).is_err());
        assert!(matches!(
            fcm(&[1.0, 2.0], &FcmParams::new(1)),
            Err(Error::Config(_))
        ));
        let mut p = FcmParams::new(2);
        p.fuzzifier = 1.0;
        assert!(matches!(fcm(&[1.0, 2.0], &p), Err(Error::Config(_))));
    }

    #[test]
    fn trace_and_rows_on_noisy_data() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let samples: Vec<f64> = (0..400)
            .map(|i| {
                if i % 3 == 0 {
                    rng.gen_range(150.0..255.0)
                } else {
                    rng.gen_range(0.0..90.0)
                }
            })
            .collect();
        let res = fcm(&samples, &FcmParams::new(3)).unwrap();
        for w in res.objective_trace.windows(2) {
            assert!(w[1] <= w[0] + 1e-9, "{} -> {}", w[0], w[1]);
        }
        for row in &res.memberships {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            assert!(row.iter().all(|u| (0.0..=1.0).contains(u)));
        }
        assert!(res.centers.windows(2).all(|w| w[0] < w[1]));
        // Converged centers sit at a stationary point: no small nudge lowers the objective.
        let j = objective(&samples, &res.centers, 2.0);
        for k in 0..3 {
            for step in [-0.01, 0.01] {
                let mut moved = res.centers.clone();
                moved[k] += step;
                assert!(objective(&samples, &moved, 2.0) >= j - 1e-6);
            }
        }
    }

    #[test]
    fn subsampling_is_seeded() {
        let samples: Vec<f64> = (0..1000).map(|i| f64::from((i * 37) % 256)).collect();
        let mut p = FcmParams::new(2);
        p.max_samples = Some(100);
        p.seed = 4;
        let a = fcm(&samples, &p).unwrap();
        let b = fcm(&samples, &p).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.memberships.len(), 100);
    }

    #[test]
    fn bimodal_matches_thresholding() {
        // Two point masses: no middle clusters exist, so nothing is intermediate.
        let values: Vec<f64> = (0..64)
            .map(|i| if (i / 8 + i % 8) % 3 == 0 { 255.0 } else { 0.0 })
            .collect();
        let map = hierarchical_fcm(&di(8, 8, values.clone())).unwrap();
        assert_eq!(map.count(PseudoLabel::Intermediate), 0);
        for (l, v) in map.labels().iter().zip(&values) {
            let expect = if *v >= 127.5 {
                PseudoLabel::Changed
            } else {
                PseudoLabel::Unchanged
            };
            assert_eq!(*l, expect);
        }
    }

    #[test]
    fn jittered_bimodal_has_no_intermediate() {
        let values: Vec<f64> = (0..400)
            .map(|i| {
                if i < 240 {
                    f64::from(i % 4)
                } else {
                    255.0 - f64::from(i % 4)
                }
            })
            .collect();
        let map = hierarchical_fcm(&di(20, 20, values.clone())).unwrap();
        assert_eq!(map.count(PseudoLabel::Intermediate), 0);
        for (l, v) in map.labels().iter().zip(&values) {
            let expect = if *v >= 127.5 {
                PseudoLabel::Changed
            } else {
                PseudoLabel::Unchanged
            };
            assert_eq!(*l, expect);
        }
    }

    #[test]
    fn tri_band_middle_is_intermediate() {
        let (w, h) = (9, 9);
        let values: Vec<f64> = (0..w * h)
            .map(|i| match (i / w) / 3 {
                0 => 10.0,
                1 => 120.0,
                _ => 245.0,
            })
            .collect();
        let map = hierarchical_fcm(&di(w, h, values)).unwrap();
        for (i, l) in map.labels().iter().enumerate() {
            let expect = match (i / w) / 3 {
                0 => PseudoLabel::Unchanged,
                1 => PseudoLabel::Intermediate,
                _ => PseudoLabel::Changed,
            };
            assert_eq!(*l, expect, "pixel {i}");
        }
    }

    #[test]
    fn constant_image_fails_loudly() {
        let err = hierarchical_fcm(&di(4, 4, vec![9.0; 16])).unwrap_err();
        assert!(err.to_string().contains("degenerate clustering input"));
    }

    #[test]
    fn debug_raster_levels() {
        let map = PseudoLabelMap::new(
            3,
            1,
            vec![
                PseudoLabel::Unchanged,
                PseudoLabel::Intermediate,
                PseudoLabel::Changed,
            ],
        )
        .unwrap();
        assert_eq!(map.to_raster().data(), &[0.0, 128.0, 255.0]);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn labels_are_monotone_in_value(seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let n = 144;
            let mut values: Vec<f64> = (0..n)
                .map(|_| if rng.gen_bool(0.3) { rng.gen_range(100.0..255.0) } else { rng.gen_range(0.0..120.0) })
                .collect();
            values[0] = 0.0;
            values[1] = 255.0;
            let first = hierarchical_fcm(&di(12, 12, values.clone()));
            let map = match first {
                Ok(map) => map,
                Err(_) => return Ok(()),
            };
            prop_assert_eq!(&hierarchical_fcm(&di(12, 12, values.clone())).unwrap(), &map);
            let lowest_changed = values
                .iter()
                .zip(map.labels())
                .filter(|(_, l)| **l == PseudoLabel::Changed)
                .map(|(v, _)| *v)
                .fold(f64::INFINITY, f64::min);
            for (v, l) in values.iter().zip(map.labels()) {
                if *v > lowest_changed {
                    prop_assert_ne!(*l, PseudoLabel::Unchanged);
                }
            }
        }
    }
}
