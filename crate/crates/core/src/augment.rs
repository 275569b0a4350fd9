//! Copy-paste augmentation of edge maps.

use std::cmp::Ordering;
use std::collections::{BinaryHeap, VecDeque};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::canny::{canny_edges, gaussian_blur, CannyParams};
use crate::error::{CoreError, Result};
use crate::image::{EdgeMap, Grid, Image2D, Mask};

/// Maximum shape or placement draws before giving up.
pub const MAX_RETRIES: usize = 100;
/// Absolute area-fraction slack allowed for the morphological smoothing pass.
pub const AREA_TOLERANCE: f64 = 0.02;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentSpec {
    pub min_area_frac: f64,
    pub max_area_frac: f64,
    /// Swaps per augmented map are drawn from `1..=max_copy_paste_ops`; 0 disables augmentation.
    pub max_copy_paste_ops: usize,
    pub max_augmentations_per_image: usize,
    /// Gaussian sigma for the shape noise, in pixels.
    pub blur_sigma: f64,
    pub seed: u64,
}

impl Default for AugmentSpec {
    fn default() -> Self {
        AugmentSpec {
            min_area_frac: 0.01,
            max_area_frac: 0.33,
            max_copy_paste_ops: 10,
            max_augmentations_per_image: 20,
            blur_sigma: 4.0,
            seed: 0,
        }
    }
}

impl AugmentSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.min_area_frac > 0.0
            && self.min_area_frac <= self.max_area_frac
            && self.max_area_frac <= 1.0)
        {
            return Err(CoreError::Config(format!(
                "area fractions must satisfy 0 < min <= max <= 1, got [{}, {}]",
                self.min_area_frac, self.max_area_frac
            )));
        }
        if self.max_copy_paste_ops > 0 && self.max_augmentations_per_image == 0 {
            return Err(CoreError::Config(
                "max_augmentations_per_image must be >= 1".into(),
            ));
        }
        if !(self.blur_sigma >= 0.0) {
            return Err(CoreError::Config("blur_sigma must be >= 0".into()));
        }
        Ok(())
    }
}

/// Irregular connected blob, stored cropped to its bounding box.
#[derive(Clone, Debug, PartialEq)]
pub struct RegionShape {
    pub mask: Mask,
    /// `(row, col, h, w)` of the bounding box in the frame it was sampled in.
    pub bbox: (usize, usize, usize, usize),
    pub image_size: usize,
}

impl RegionShape {
    pub fn area(&self) -> usize {
        self.mask.count()
    }

    pub fn area_fraction(&self) -> f64 {
        self.area() as f64 / (self.image_size * self.image_size) as f64
    }
}

#[derive(PartialEq)]
struct Cell(f64, usize);

impl Eq for Cell {}

impl PartialOrd for Cell {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Cell {
    fn cmp(&self, other: &Self) -> Ordering {
        self.0.total_cmp(&other.0).then(other.1.cmp(&self.1))
    }
}

const NEIGHBORS4: [(isize, isize); 4] = [(-1, 0), (1, 0), (0, -1), (0, 1)];

/// Grows the superlevel-set component of the noise maximum until it holds
/// exactly `target` pixels.
fn priority_flood(noise: &Grid<f64>, target: usize) -> Mask {
    let start = noise
        .data()
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.total_cmp(b.1))
        .map(|(i, _)| i)
        .unwrap_or(0);
    flood_from(noise, target, None, start)
}

/// Priority flood from pixel index `start`, never leaving `allowed`. Stops
/// early when the reachable set is smaller than `target`.
pub(crate) fn flood_from(noise: &Grid<f64>, target: usize, allowed: Option<&Mask>, start: usize) -> Mask {
    let (h, w) = noise.shape();
    let ok = |j: usize| allowed.is_none_or(|m| m.data()[j]);
    let mut mask = Mask::filled(h, w, false);
    let mut queued = vec![false; h * w];
    let mut heap = BinaryHeap::new();
    if ok(start) {
        heap.push(Cell(noise.data()[start], start));
        queued[start] = true;
    }
    let mut n = 0;
    while n < target {
        let Some(Cell(_, i)) = heap.pop() else { break };
        mask.data_mut()[i] = true;
        n += 1;
        let (r, c) = ((i / w) as isize, (i % w) as isize);
        for (dr, dc) in NEIGHBORS4 {
            let (nr, nc) = (r + dr, c + dc);
            if nr < 0 || nc < 0 || nr >= h as isize || nc >= w as isize {
                continue;
            }
            let j = nr as usize * w + nc as usize;
            if !queued[j] && ok(j) {
                queued[j] = true;
                heap.push(Cell(noise.data()[j], j));
            }
        }
    }
    mask
}

/// 3x3 binary erosion (`erode == true`) or dilation; outside pixels are background.
fn morph(m: &Mask, erode: bool) -> Mask {
    let (h, w) = m.shape();
    Grid::from_fn(h, w, |r, c| {
        let mut any = false;
        let mut all = true;
        for dr in -1isize..=1 {
            for dc in -1isize..=1 {
                let (nr, nc) = (r as isize + dr, c as isize + dc);
                let v = nr >= 0
                    && nc >= 0
                    && nr < h as isize
                    && nc < w as isize
                    && m.get(nr as usize, nc as usize);
                any |= v;
                all &= v;
            }
        }
        if erode {
            all
        } else {
            any
        }
    })
}

/// One opening followed by one closing with a 3x3 square.
pub fn open_close(m: &Mask) -> Mask {
    let opened = morph(&morph(m, true), false);
    morph(&morph(&opened, false), true)
}

/// Largest 4-connected component; ties keep the first in raster order.
pub fn largest_component(m: &Mask) -> Mask {
    let (h, w) = m.shape();
    let mut label = vec![0usize; h * w];
    let mut best = (0usize, 0usize);
    let mut next = 0;
    for s in 0..h * w {
        if !m.data()[s] || label[s] != 0 {
            continue;
        }
        next += 1;
        label[s] = next;
        let mut size = 0;
        let mut q = VecDeque::from([s]);
        while let Some(i) = q.pop_front() {
            size += 1;
            let (r, c) = ((i / w) as isize, (i % w) as isize);
            for (dr, dc) in NEIGHBORS4 {
                let (nr, nc) = (r + dr, c + dc);
                if nr < 0 || nc < 0 || nr >= h as isize || nc >= w as isize {
                    continue;
                }
                let j = nr as usize * w + nc as usize;
                if m.data()[j] && label[j] == 0 {
                    label[j] = next;
                    q.push_back(j);
                }
            }
        }
        if size > best.0 {
            best = (size, next);
        }
    }
    Grid::new(h, w, label.iter().map(|&l| l != 0 && l == best.1).collect())
        .expect("same shape")
}

fn area_ok(frac: f64, target: f64, spec: &AugmentSpec) -> bool {
    let narrow = spec.max_area_frac - spec.min_area_frac < 2.0 * AREA_TOLERANCE;
    (frac - target).abs() <= AREA_TOLERANCE
        && (narrow || (spec.min_area_frac..=spec.max_area_frac).contains(&frac))
}

/// Samples a smooth irregular blob covering a uniformly drawn area fraction.
pub fn sample_region_shape<R: Rng + ?Sized>(
    rng: &mut R,
    image_size: usize,
    spec: &AugmentSpec,
) -> Result<RegionShape> {
    if image_size < 8 {
        return Err(CoreError::Config(format!(
            "image size {image_size} too small for region sampling"
        )));
    }
    spec.validate()?;
    let total = (image_size * image_size) as f64;
    for _ in 0..MAX_RETRIES {
        let target = rng.random_range(spec.min_area_frac..=spec.max_area_frac);
        let noise = Grid::from_fn(image_size, image_size, |_, _| rng.random::<f64>());
        let noise = gaussian_blur(&noise, spec.blur_sigma);
        let blob = priority_flood(&noise, (target * total).round().max(1.0) as usize);
        let smooth = largest_component(&open_close(&blob));
        let frac = smooth.count() as f64 / total;
        if smooth.count() == 0 || !area_ok(frac, target, spec) {
            continue;
        }
        let (r0, c0, r1, c1) = smooth.bbox().expect("non-empty");
        let (h, w) = (r1 - r0 + 1, c1 - c0 + 1);
        return Ok(RegionShape {
            mask: smooth.crop(r0 as isize, c0 as isize, h, w, false),
            bbox: (r0, c0, h, w),
            image_size,
        });
    }
    Err(CoreError::SamplingFailed(MAX_RETRIES))
}

/// A region and two disjoint top-left placements whose contents get exchanged.
#[derive(Clone, Debug, PartialEq)]
pub struct SwapPlan {
    pub region: RegionShape,
    pub a: (usize, usize),
    pub b: (usize, usize),
}

fn placements_overlap(m: &Mask, a: (usize, usize), b: (usize, usize)) -> bool {
    let (h, w) = m.shape();
    let dr = b.0 as isize - a.0 as isize;
    let dc = b.1 as isize - a.1 as isize;
    if dr.unsigned_abs() >= h || dc.unsigned_abs() >= w {
        return false;
    }
    (0..h).any(|r| {
        (0..w).any(|c| {
            let (rr, cc) = (r as isize - dr, c as isize - dc);
            m.get(r, c)
                && rr >= 0
                && cc >= 0
                && (rr as usize) < h
                && (cc as usize) < w
                && m.get(rr as usize, cc as usize)
        })
    })
}

/// Draws a region and two distinct, non-overlapping, fully inside placements.
pub fn sample_swap<R: Rng + ?Sized>(
    rng: &mut R,
    shape: (usize, usize),
    spec: &AugmentSpec,
) -> Result<SwapPlan> {
    let (ih, iw) = shape;
    let side = ih.min(iw);
    for _ in 0..MAX_RETRIES {
        let region = sample_region_shape(rng, side, spec)?;
        let (h, w) = region.mask.shape();
        for _ in 0..MAX_RETRIES {
            let a = (rng.random_range(0..=ih - h), rng.random_range(0..=iw - w));
            let b = (rng.random_range(0..=ih - h), rng.random_range(0..=iw - w));
            if a != b && !placements_overlap(&region.mask, a, b) {
                return Ok(SwapPlan { region, a, b });
            }
        }
    }
    Err(CoreError::SamplingFailed(MAX_RETRIES))
}

/// Exchanges the edge pixels under the region mask at the two placements.
pub fn apply_swap(edges: &EdgeMap, plan: &SwapPlan) -> EdgeMap {
    let mut out = edges.clone();
    let m = &plan.region.mask;
    let (h, w) = m.shape();
    for r in 0..h {
        for c in 0..w {
            if m.get(r, c) {
                let pa = (plan.a.0 + r, plan.a.1 + c);
                let pb = (plan.b.0 + r, plan.b.1 + c);
                let va = edges.pixels.get(pa.0, pa.1);
                let vb = edges.pixels.get(pb.0, pb.1);
                out.pixels.set(pa.0, pa.1, vb);
                out.pixels.set(pb.0, pb.1, va);
            }
        }
    }
    out
}

/// One random swap. If no valid swap can be drawn the input is returned unchanged.
pub fn copy_paste_once<R: Rng + ?Sized>(edges: &EdgeMap, rng: &mut R, spec: &AugmentSpec) -> EdgeMap {
    match sample_swap(rng, edges.shape(), spec) {
        Ok(plan) => apply_swap(edges, &plan),
        Err(_) => edges.clone(),
    }
}

/// `k ~ U{1..max_copy_paste_ops}` sequential swaps; identity when the maximum is 0.
pub fn augment_edge_map<R: Rng + ?Sized>(edges: &EdgeMap, rng: &mut R, spec: &AugmentSpec) -> EdgeMap {
    if spec.max_copy_paste_ops == 0 {
        return edges.clone();
    }
    let k = rng.random_range(1..=spec.max_copy_paste_ops);
    let mut out = edges.clone();
    for _ in 0..k {
        out = copy_paste_once(&out, rng, spec);
    }
    out
}

/// `(edges, target)` pairs for one image: the clean Canny map first, then up
/// to `max_augmentations_per_image` distinct augmented maps.
pub fn build_training_pairs<R: Rng + ?Sized>(
    img: &Image2D,
    spec: &AugmentSpec,
    canny: &CannyParams,
    rng: &mut R,
) -> Result<Vec<(EdgeMap, Image2D)>> {
    let clean = canny_edges(img, canny)?;
    Ok(augment_pairs(&clean, spec, rng)
        .into_iter()
        .map(|e| (e, img.clone()))
        .collect())
}

/// The clean map followed by its distinct augmentations.
pub fn augment_pairs<R: Rng + ?Sized>(clean: &EdgeMap, spec: &AugmentSpec, rng: &mut R) -> Vec<EdgeMap> {
    let mut maps = vec![clean.clone()];
    if spec.max_copy_paste_ops == 0 || spec.max_augmentations_per_image == 0 {
        return maps;
    }
    let n = rng.random_range(1..=spec.max_augmentations_per_image);
    let mut attempts = 0;
    while maps.len() < n + 1 && attempts < 3 * n {
        attempts += 1;
        let aug = augment_edge_map(clean, rng, spec);
        if !maps.contains(&aug) {
            maps.push(aug);
        }
    }
    maps
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;

    fn stripes(n: usize) -> EdgeMap {
        EdgeMap::new(Grid::from_fn(n, n, |r, c| ((r * 3 + c) % 5 == 0) as u8)).unwrap()
    }

    #[test]
    fn region_area_in_range_and_connected() {
        let spec = AugmentSpec::default();
        let mut rng = seeded(1);
        for _ in 0..50 {
            let s = sample_region_shape(&mut rng, 32, &spec).unwrap();
            let f = s.area_fraction();
            assert!((0.01..=0.33).contains(&f), "{f}");
            assert_eq!(largest_component(&s.mask).count(), s.area());
        }
    }

    #[test]
    fn pinned_area_within_tolerance() {
        let spec = AugmentSpec {
            min_area_frac: 0.10,
            max_area_frac: 0.10,
            ..Default::default()
        };
        let mut rng = seeded(2);
        for _ in 0..20 {
            let f = sample_region_shape(&mut rng, 64, &spec).unwrap().area_fraction();
            assert!((f - 0.10).abs() <= AREA_TOLERANCE + 1e-12, "{f}");
        }
    }

    #[test]
    fn swap_is_an_involution() {
        let e = stripes(32);
        let plan = sample_swap(&mut seeded(3), e.shape(), &AugmentSpec::default()).unwrap();
        let once = apply_swap(&e, &plan);
        assert_eq!(once.count(), e.count());
        assert_eq!(apply_swap(&once, &plan), e);
    }

    #[test]
    fn empty_map_stays_empty() {
        let e = EdgeMap::empty(16, 16);
        let out = augment_edge_map(&e, &mut seeded(4), &AugmentSpec::default());
        assert_eq!(out, e);
    }

    #[test]
    fn zero_ops_is_identity_and_single_pair() {
        let spec = AugmentSpec {
            max_copy_paste_ops: 0,
            ..Default::default()
        };
        let e = stripes(16);
        assert_eq!(augment_edge_map(&e, &mut seeded(5), &spec), e);
        assert_eq!(augment_pairs(&e, &spec, &mut seeded(5)), vec![e]);
    }

    #[test]
    fn pairs_have_bounded_length_and_clean_first() {
        let e = stripes(32);
        let spec = AugmentSpec::default();
        for seed in 0..5 {
            let maps = augment_pairs(&e, &spec, &mut seeded(seed));
            assert!((2..=21).contains(&maps.len()), "{}", maps.len());
            assert_eq!(maps[0], e);
            assert!(maps.iter().all(|m| m.count() == e.count()));
        }
    }

    #[test]
    fn open_close_removes_isolated_pixel() {
        let mut m = Mask::filled(9, 9, false);
        m.set(1, 1, true);
        for r in 4..8 {
            for c in 4..8 {
                m.set(r, c, true);
            }
        }
        let s = open_close(&m);
        assert!(!s.get(1, 1));
        assert_eq!(s.count(), 16);
    }
}
