//! 256-bin histogram statistics and Otsu thresholding.

use crate::error::{CoreError, Result};
use crate::image::{Image2D, Mask};
use crate::preprocess::{percentile_sorted, MR_PERCENTILE};

pub const BINS: usize = 256;

/// Histogram summary of an image region.
#[derive(Clone, Debug, PartialEq)]
pub struct IntensityStats {
    pub histogram: [u64; BINS],
    /// Otsu threshold in image intensity units, `None` for degenerate regions.
    pub otsu_threshold: Option<f64>,
    pub p98: f64,
}

/// Bin index of `v` over the `[lo, hi]` intensity range.
#[inline]
pub fn quantize(v: f32, lo: f32, hi: f32) -> usize {
    let t = ((v - lo) / (hi - lo)) as f64;
    ((t * BINS as f64).floor() as isize).clamp(0, BINS as isize - 1) as usize
}

/// Intensity at the upper edge of bin `k`.
#[inline]
pub fn bin_upper_edge(k: usize, lo: f32, hi: f32) -> f64 {
    lo as f64 + (k + 1) as f64 * (hi - lo) as f64 / BINS as f64
}

pub fn histogram(img: &Image2D, region: &Mask) -> Result<[u64; BINS]> {
    img.pixels.ensure_same_shape(region, "image vs region")?;
    let (lo, hi) = img.modality.range();
    let mut h = [0u64; BINS];
    for (&v, &m) in img.pixels.data().iter().zip(region.data()) {
        if m {
            h[quantize(v, lo, hi)] += 1;
        }
    }
    Ok(h)
}

/// Bin `k` maximizing between-class variance when class 0 is bins `0..=k`.
/// Ties resolve to the smallest `k`.
pub fn otsu_bin(hist: &[u64; BINS]) -> Result<usize> {
    if hist.iter().filter(|&&c| c > 0).count() < 2 {
        return Err(CoreError::DegenerateHistogram);
    }
    let total: u64 = hist.iter().sum();
    let sum_all: u128 = hist.iter().enumerate().map(|(i, &c)| i as u128 * c as u128).sum();
    let mut n0: u64 = 0;
    let mut s0: u128 = 0;
    let mut best = (f64::NEG_INFINITY, 0usize);
    for (k, &c) in hist.iter().enumerate().take(BINS - 1) {
        n0 += c;
        s0 += k as u128 * c as u128;
        let n1 = total - n0;
        if n0 == 0 || n1 == 0 {
            continue;
        }
        // σ_b² ∝ (N·S0 − n0·S)² / (n0·n1); the numerator is exact in integers.
        let num = total as i128 * s0 as i128 - n0 as i128 * sum_all as i128;
        let score = (num as f64) * (num as f64) / (n0 as f64 * n1 as f64);
        if score > best.0 {
            best = (score, k);
        }
    }
    Ok(best.1)
}

/// Otsu threshold of the pixels selected by `region`, in intensity units
/// (upper edge of the last class-0 bin).
pub fn otsu_threshold(img: &Image2D, region: &Mask) -> Result<f64> {
    let (lo, hi) = img.modality.range();
    let k = otsu_bin(&histogram(img, region)?)?;
    Ok(bin_upper_edge(k, lo, hi))
}

pub fn intensity_stats(img: &Image2D, region: &Mask) -> Result<IntensityStats> {
    let histogram = histogram(img, region)?;
    let (lo, hi) = img.modality.range();
    let otsu_threshold = otsu_bin(&histogram).ok().map(|k| bin_upper_edge(k, lo, hi));
    let mut vals: Vec<f32> = img
        .pixels
        .data()
        .iter()
        .zip(region.data())
        .filter(|(_, &m)| m)
        .map(|(&v, _)| v)
        .collect();
    if vals.is_empty() {
        return Err(CoreError::NoForeground);
    }
    vals.sort_by(f32::total_cmp);
    Ok(IntensityStats {
        histogram,
        otsu_threshold,
        p98: percentile_sorted(&vals, MR_PERCENTILE) as f64,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::image::{Grid, Modality};

    fn img(data: Vec<f32>, n: usize, modality: Modality) -> Image2D {
        Image2D::new(Grid::new(n, n, data).unwrap(), modality, None).unwrap()
    }

    #[test]
    fn bimodal_threshold_separates_classes() {
        let data: Vec<f32> = (0..64).map(|i| if i % 2 == 0 { 0.1 } else { 0.9 }).collect();
        for m in [Modality::Mri, Modality::Ct] {
            let im = img(data.clone(), 8, m);
            let t = otsu_threshold(&im, &im.region()).unwrap();
            assert!(t > 0.1 && t < 0.9, "{m:?}: {t}");
        }
    }

    #[test]
    fn constant_region_is_degenerate() {
        let im = img(vec![0.3; 16], 4, Modality::Ct);
        assert!(matches!(
            otsu_threshold(&im, &im.region()),
            Err(CoreError::DegenerateHistogram)
        ));
    }

    #[test]
    fn region_restricts_histogram() {
        let mut data = vec![0.0f32; 16];
        data[0] = 0.5;
        data[1] = 0.7;
        let im = img(data, 4, Modality::Mri);
        let mut region = Mask::filled(4, 4, false);
        region.set(0, 0, true);
        region.set(0, 1, true);
        let h = histogram(&im, &region).unwrap();
        assert_eq!(h.iter().sum::<u64>(), 2);
        let stats = intensity_stats(&im, &region).unwrap();
        assert_eq!(stats.histogram.iter().sum::<u64>(), region.count() as u64);
        let t = stats.otsu_threshold.unwrap();
        assert!(t > 0.5 && t < 0.7);
    }
}
