//! Patch-score heat-maps and final anomaly maps.

use crate::error::{CoreError, Result};
use crate::image::{Grid, Image2D, Mask};
use crate::siamese::PatchScorer;

/// Per-pixel mean patch dissimilarity `1 − a` and the number of patches covering each pixel.
#[derive(Clone, Debug, PartialEq)]
pub struct AnomalyMap {
    pub pixels: Grid<f64>,
    pub coverage: Grid<u32>,
}

/// `|real − rec| ∘ A`, zero outside the foreground.
#[derive(Clone, Debug, PartialEq)]
pub struct FinalMap {
    pub pixels: Grid<f64>,
}

impl FinalMap {
    pub fn max(&self) -> f64 {
        self.pixels.data().iter().copied().fold(0.0, f64::max)
    }
}

pub fn default_stride(s: usize) -> usize {
    (s / 2).max(1)
}

/// Patch origins `0, stride, 2·stride, …` not exceeding `n − s`.
pub fn grid_origins(n: usize, s: usize, stride: usize) -> Vec<usize> {
    if s > n || stride == 0 {
        return Vec::new();
    }
    (0..=n - s).step_by(stride).collect()
}

/// Averages `1 − a_k` over every patch covering a pixel. Pixels no patch
/// covers take the value of the nearest covered pixel.
pub fn heatmap_from_scores(
    shape: (usize, usize),
    s: usize,
    origins: &[(usize, usize)],
    scores: &[f64],
) -> Result<AnomalyMap> {
    if origins.len() != scores.len() {
        return Err(CoreError::shape(format!("{} origins vs {} scores", origins.len(), scores.len())));
    }
    if origins.is_empty() {
        return Err(CoreError::Empty("patch grid"));
    }
    let (h, w) = shape;
    let mut sum = Grid::filled(h, w, 0.0f64);
    let mut cov = Grid::filled(h, w, 0u32);
    let (mut rmax, mut cmax) = (0, 0);
    for (&(r0, c0), &a) in origins.iter().zip(scores) {
        if r0 + s > h || c0 + s > w {
            return Err(CoreError::PatchTooLarge { patch: s, side: h.min(w) });
        }
        let d = (1.0 - a).clamp(0.0, 1.0);
        for r in r0..r0 + s {
            for c in c0..c0 + s {
                sum.set(r, c, sum.get(r, c) + d);
                cov.set(r, c, cov.get(r, c) + 1);
            }
        }
        rmax = rmax.max(r0 + s - 1);
        cmax = cmax.max(c0 + s - 1);
    }
    let mean = Grid::from_fn(h, w, |r, c| {
        let n = cov.get(r, c);
        if n > 0 {
            sum.get(r, c) / n as f64
        } else {
            f64::NAN
        }
    });
    // Origins form a grid starting at 0, so the covered set is the rectangle
    // [0, rmax] x [0, cmax] and clamping yields the nearest covered pixel.
    let pixels = Grid::from_fn(h, w, |r, c| {
        let v = mean.get(r, c);
        if v.is_nan() {
            let v = mean.get(r.min(rmax), c.min(cmax));
            if v.is_nan() {
                0.0
            } else {
                v
            }
        } else {
            v
        }
    });
    Ok(AnomalyMap { pixels, coverage: cov })
}

/// Scores corresponding real/reconstructed patches on a regular grid.
pub fn heatmap(real: &Image2D, rec: &Image2D, scorer: &dyn PatchScorer, stride: Option<usize>) -> Result<AnomalyMap> {
    real.pixels.ensure_same_shape(&rec.pixels, "real vs reconstruction")?;
    let s = scorer.patch_size();
    let (h, w) = real.shape();
    if s > h || s > w {
        return Err(CoreError::PatchTooLarge { patch: s, side: h.min(w) });
    }
    let stride = stride.unwrap_or_else(|| default_stride(s));
    if stride == 0 {
        return Err(CoreError::Config("stride must be positive".into()));
    }
    let rows = grid_origins(h, s, stride);
    let cols = grid_origins(w, s, stride);
    let origins: Vec<(usize, usize)> = rows.iter().flat_map(|&r| cols.iter().map(move |&c| (r, c))).collect();
    let crop = |img: &Image2D, (r, c): (usize, usize)| img.pixels.crop(r as isize, c as isize, s, s, 0.0);
    let rp: Vec<Grid<f32>> = origins.iter().map(|&o| crop(real, o)).collect();
    let cp: Vec<Grid<f32>> = origins.iter().map(|&o| crop(rec, o)).collect();
    let scores = scorer.score(&rp.iter().collect::<Vec<_>>(), &cp.iter().collect::<Vec<_>>())?;
    heatmap_from_scores((h, w), s, &origins, &scores)
}

fn foreground(real: &Image2D) -> Mask {
    real.region()
}

/// `|real − rec| ∘ A`, background forced to 0.
pub fn final_map(real: &Image2D, rec: &Image2D, a: &AnomalyMap) -> Result<FinalMap> {
    real.pixels.ensure_same_shape(&rec.pixels, "real vs reconstruction")?;
    real.pixels.ensure_same_shape(&a.pixels, "image vs heat-map")?;
    let fg = foreground(real);
    let (h, w) = real.shape();
    Ok(FinalMap {
        pixels: Grid::from_fn(h, w, |r, c| {
            if !fg.get(r, c) {
                return 0.0;
            }
            (real.pixels.get(r, c) as f64 - rec.pixels.get(r, c) as f64).abs() * a.pixels.get(r, c)
        }),
    })
}

/// Absolute residual alone (the variant without patch scoring), background forced to 0.
pub fn residual_map(real: &Image2D, rec: &Image2D) -> Result<FinalMap> {
    real.pixels.ensure_same_shape(&rec.pixels, "real vs reconstruction")?;
    let fg = foreground(real);
    let (h, w) = real.shape();
    Ok(FinalMap {
        pixels: Grid::from_fn(h, w, |r, c| {
            if fg.get(r, c) {
                (real.pixels.get(r, c) as f64 - rec.pixels.get(r, c) as f64).abs()
            } else {
                0.0
            }
        }),
    })
}

/// Pixels strictly above `t`.
pub fn apply_threshold(fm: &FinalMap, t: f64) -> Mask {
    fm.pixels.map(|v| v > t)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn non_overlapping_grid_is_block_constant() {
        let origins: Vec<(usize, usize)> = [(0, 0), (0, 4), (4, 0), (4, 4)].into();
        let scores = [0.1, 0.2, 0.3, 0.4];
        let a = heatmap_from_scores((8, 8), 4, &origins, &scores).unwrap();
        for (k, &(r0, c0)) in origins.iter().enumerate() {
            for r in r0..r0 + 4 {
                for c in c0..c0 + 4 {
                    assert_eq!(a.pixels.get(r, c), 1.0 - scores[k]);
                }
            }
        }
    }

    #[test]
    fn uncovered_border_takes_nearest_value() {
        let rows = grid_origins(9, 4, 4);
        assert_eq!(rows, vec![0, 4]);
        let origins: Vec<(usize, usize)> = rows.iter().flat_map(|&r| rows.iter().map(move |&c| (r, c))).collect();
        let scores: Vec<f64> = (0..origins.len()).map(|i| i as f64 / 10.0).collect();
        let a = heatmap_from_scores((9, 9), 4, &origins, &scores).unwrap();
        assert_eq!(a.coverage.get(8, 8), 0);
        assert_eq!(a.pixels.get(8, 8), a.pixels.get(7, 7));
        assert_eq!(a.pixels.get(8, 2), a.pixels.get(7, 2));
    }

    #[test]
    fn threshold_above_max_is_empty() {
        let fm = FinalMap {
            pixels: Grid::new(2, 2, vec![0.0, 0.5, 0.2, 0.0]).unwrap(),
        };
        assert_eq!(apply_threshold(&fm, 0.0).count(), 2);
        assert_eq!(apply_threshold(&fm, 0.6).count(), 0);
    }
}
