//! Canny edge extraction with Otsu-derived thresholds.
//!
//! Intensities are rescaled from the modality range onto `[0, 255]` before
//! differentiation so that gradient magnitudes and the Otsu threshold share
//! the 8-bit scale the thresholds are usually specified in.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::image::{EdgeMap, Grid, Image2D};
use crate::otsu;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CannyParams {
    /// Gaussian pre-smoothing sigma in pixels.
    pub sigma: f64,
    /// Low threshold as a fraction of the Otsu threshold.
    pub low_ratio: f64,
    /// High threshold as a fraction of the Otsu threshold.
    pub high_ratio: f64,
    /// Threshold (8-bit scale) used when the Otsu histogram is degenerate.
    /// `None` propagates the error instead.
    pub fallback_threshold: Option<f64>,
}

impl Default for CannyParams {
    fn default() -> Self {
        CannyParams {
            sigma: 1.0,
            low_ratio: 0.66,
            high_ratio: 0.66,
            fallback_threshold: None,
        }
    }
}

impl CannyParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.sigma >= 0.0) || !(self.low_ratio > 0.0) || self.high_ratio < self.low_ratio {
            return Err(CoreError::Config(format!("invalid canny parameters {self:?}")));
        }
        Ok(())
    }
}

/// Normalized 1-D Gaussian kernel with radius `ceil(3σ)`.
pub fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    if sigma <= 0.0 {
        return vec![1.0];
    }
    let radius = (3.0 * sigma).ceil() as isize;
    let k: Vec<f64> = (-radius..=radius)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f64 = k.iter().sum();
    k.into_iter().map(|v| v / s).collect()
}

/// Separable Gaussian blur with replicated borders.
pub fn gaussian_blur(img: &Grid<f64>, sigma: f64) -> Grid<f64> {
    let k = gaussian_kernel(sigma);
    let r = (k.len() / 2) as isize;
    let (h, w) = img.shape();
    let tmp = Grid::from_fn(h, w, |y, x| {
        k.iter()
            .enumerate()
            .map(|(i, kv)| kv * img.get_clamped(y as isize, x as isize + i as isize - r))
            .sum::<f64>()
    });
    Grid::from_fn(h, w, |y, x| {
        k.iter()
            .enumerate()
            .map(|(i, kv)| kv * tmp.get_clamped(y as isize + i as isize - r, x as isize))
            .sum::<f64>()
    })
}

/// Sobel derivatives `(gx, gy)` with replicated borders; `gx` grows to the right, `gy` downwards.
pub fn sobel(img: &Grid<f64>) -> (Grid<f64>, Grid<f64>) {
    let (h, w) = img.shape();
    let p = |y: usize, x: usize, dy: isize, dx: isize| img.get_clamped(y as isize + dy, x as isize + dx);
    let gx = Grid::from_fn(h, w, |y, x| {
        (p(y, x, -1, 1) + 2.0 * p(y, x, 0, 1) + p(y, x, 1, 1))
            - (p(y, x, -1, -1) + 2.0 * p(y, x, 0, -1) + p(y, x, 1, -1))
    });
    let gy = Grid::from_fn(h, w, |y, x| {
        (p(y, x, 1, -1) + 2.0 * p(y, x, 1, 0) + p(y, x, 1, 1))
            - (p(y, x, -1, -1) + 2.0 * p(y, x, -1, 0) + p(y, x, -1, 1))
    });
    (gx, gy)
}

/// Neighbour offsets `(before, after)` along the quantized gradient direction.
#[inline]
pub fn nms_offsets(gx: f64, gy: f64) -> ((isize, isize), (isize, isize)) {
    let mut angle = gy.atan2(gx).to_degrees();
    if angle < 0.0 {
        angle += 180.0;
    }
    if !(22.5..157.5).contains(&angle) {
        ((0, -1), (0, 1))
    } else if angle < 67.5 {
        ((-1, -1), (1, 1))
    } else if angle < 112.5 {
        ((-1, 0), (1, 0))
    } else {
        ((-1, 1), (1, -1))
    }
}

/// Thin ridges of the gradient magnitude. A pixel survives if it is strictly
/// larger than the neighbour before it and not smaller than the one after it,
/// so plateaus two pixels wide collapse to one. Out-of-image neighbours count as 0.
pub fn non_maximum_suppression(mag: &Grid<f64>, gx: &Grid<f64>, gy: &Grid<f64>) -> Grid<f64> {
    let (h, w) = mag.shape();
    let at = |y: isize, x: isize| {
        if y < 0 || x < 0 || y >= h as isize || x >= w as isize {
            0.0
        } else {
            mag.get(y as usize, x as usize)
        }
    };
    Grid::from_fn(h, w, |y, x| {
        let m = mag.get(y, x);
        if m == 0.0 {
            return 0.0;
        }
        let ((by, bx), (ay, ax)) = nms_offsets(gx.get(y, x), gy.get(y, x));
        let (yi, xi) = (y as isize, x as isize);
        if m > at(yi + by, xi + bx) && m >= at(yi + ay, xi + ax) {
            m
        } else {
            0.0
        }
    })
}

/// Double-threshold hysteresis: pixels above `high` seed edges that grow
/// through 8-connected pixels above `low`.
pub fn hysteresis(thin: &Grid<f64>, low: f64, high: f64) -> Grid<u8> {
    let (h, w) = thin.shape();
    let mut out = Grid::filled(h, w, 0u8);
    let mut queue = VecDeque::new();
    for y in 0..h {
        for x in 0..w {
            if thin.get(y, x) > high && out.get(y, x) == 0 {
                out.set(y, x, 1);
                queue.push_back((y, x));
                while let Some((cy, cx)) = queue.pop_front() {
                    for dy in -1isize..=1 {
                        for dx in -1isize..=1 {
                            let ny = cy as isize + dy;
                            let nx = cx as isize + dx;
                            if ny < 0 || nx < 0 || ny >= h as isize || nx >= w as isize {
                                continue;
                            }
                            let (ny, nx) = (ny as usize, nx as usize);
                            if out.get(ny, nx) == 0 && thin.get(ny, nx) > low {
                                out.set(ny, nx, 1);
                                queue.push_back((ny, nx));
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

/// Image intensities mapped from the modality range onto `[0, 255]`.
pub fn to_8bit_scale(img: &Image2D) -> Grid<f64> {
    let (lo, hi) = img.modality.range();
    let span = (hi - lo) as f64;
    img.pixels.map(|v| (v as f64 - lo as f64) / span * 255.0)
}

/// The Otsu threshold of `img` on the 8-bit scale, or the configured fallback.
pub fn otsu_8bit(img: &Image2D, params: &CannyParams) -> Result<f64> {
    let (lo, hi) = img.modality.range();
    match otsu::otsu_threshold(img, &img.region()) {
        Ok(t) => Ok((t - lo as f64) / (hi - lo) as f64 * 255.0),
        Err(CoreError::DegenerateHistogram) => params
            .fallback_threshold
            .ok_or(CoreError::DegenerateHistogram),
        Err(e) => Err(e),
    }
}

/// Gradient magnitude, direction components, and NMS output.
pub struct CannyStages {
    pub gx: Grid<f64>,
    pub gy: Grid<f64>,
    pub magnitude: Grid<f64>,
    pub thinned: Grid<f64>,
}

pub fn canny_stages(img: &Image2D, sigma: f64) -> CannyStages {
    let smooth = gaussian_blur(&to_8bit_scale(img), sigma);
    let (gx, gy) = sobel(&smooth);
    let (h, w) = gx.shape();
    let magnitude = Grid::from_fn(h, w, |y, x| gx.get(y, x).hypot(gy.get(y, x)));
    let thinned = non_maximum_suppression(&magnitude, &gx, &gy);
    CannyStages {
        gx,
        gy,
        magnitude,
        thinned,
    }
}

/// Canny edges with thresholds `low_ratio·otsu` and `high_ratio·otsu`,
/// the Otsu threshold taken over the image foreground.
pub fn canny_edges(img: &Image2D, params: &CannyParams) -> Result<EdgeMap> {
    let t = otsu_8bit(img, params)?;
    let stages = canny_stages(img, params.sigma);
    let edges = hysteresis(&stages.thinned, params.low_ratio * t, params.high_ratio * t);
    EdgeMap::new(edges)
}
