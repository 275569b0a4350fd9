//! Procedural vessel-like images with injected blob anomalies.

use std::f64::consts::PI;
use std::fs;
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::augment::flood_from;
use crate::canny::gaussian_blur;
use crate::error::{CoreError, Result};
use crate::image::{Grid, Image2D, Mask, Modality};
use crate::io;
use crate::manifest::{Manifest, ManifestRecord, Split};
use crate::rng::stream;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub image_size: usize,
    /// Normal images, all in the train split.
    pub n_normal: usize,
    /// Anomalous images; the first half goes to val, the rest to test.
    pub n_anomalous: usize,
    pub vessel_count: [usize; 2],
    /// Peak vessel intensity above the base level; drifts along each vessel.
    pub vessel_intensity: [f64; 2],
    /// Vessel cross-section width in pixels (twice the Gaussian sigma).
    pub vessel_width: [f64; 2],
    /// Area of each blob as a fraction of the image.
    pub anomaly_area_frac: [f64; 2],
    /// Standard deviation of the fine base texture.
    pub texture_std: f64,
    pub anomaly_intensity_shift: [f64; 2],
    pub blobs_per_image: [usize; 2],
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            image_size: 64,
            n_normal: 200,
            n_anomalous: 100,
            vessel_count: [4, 8],
            vessel_intensity: [0.4, 1.3],
            vessel_width: [1.2, 2.6],
            anomaly_area_frac: [0.02, 0.15],
            texture_std: 0.2,
            anomaly_intensity_shift: [0.4, 0.7],
            blobs_per_image: [1, 3],
            seed: 0,
        }
    }
}

fn ordered<T: PartialOrd + Copy>(r: [T; 2], name: &str) -> Result<()> {
    if r[0] > r[1] {
        return Err(CoreError::Config(format!("{name} range is reversed")));
    }
    Ok(())
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.image_size < 32 {
            return Err(CoreError::Config("image_size must be at least 32".into()));
        }
        if self.image_size % 4 != 0 {
            return Err(CoreError::NotDivisibleBy4(self.image_size));
        }
        let [lo, hi] = self.anomaly_area_frac;
        if !(lo > 0.0 && hi < 0.5) {
            return Err(CoreError::Config("anomaly_area_frac must lie within (0, 0.5)".into()));
        }
        if self.vessel_count[0] == 0 || self.vessel_width[0] <= 0.0 || self.anomaly_intensity_shift[0] <= 0.0 {
            return Err(CoreError::Config("vessel counts, widths and shifts must be positive".into()));
        }
        if self.blobs_per_image[1] == 0 {
            return Err(CoreError::Config("blobs_per_image must allow at least one blob".into()));
        }
        ordered(self.vessel_count, "vessel_count")?;
        ordered(self.vessel_width, "vessel_width")?;
        ordered(self.vessel_intensity, "vessel_intensity")?;
        if !(self.texture_std >= 0.0) {
            return Err(CoreError::Config("texture_std must be nonnegative".into()));
        }
        ordered(self.anomaly_area_frac, "anomaly_area_frac")?;
        ordered(self.anomaly_intensity_shift, "anomaly_intensity_shift")?;
        ordered(self.blobs_per_image, "blobs_per_image")
    }
}

fn uniform<R: Rng + ?Sized>(rng: &mut R, r: [f64; 2]) -> f64 {
    if r[0] == r[1] {
        r[0]
    } else {
        rng.random_range(r[0]..r[1])
    }
}

fn smooth_noise<R: Rng + ?Sized>(rng: &mut R, n: usize, sigma: f64) -> Grid<f64> {
    let raw = Grid::from_fn(n, n, |_, _| rng.random::<f64>());
    gaussian_blur(&raw, sigma)
}

/// Smoothed noise rescaled to zero mean and unit standard deviation.
fn texture<R: Rng + ?Sized>(rng: &mut R, n: usize, sigma: f64) -> Grid<f64> {
    let t = smooth_noise(rng, n, sigma);
    let m = t.data().iter().sum::<f64>() / t.len() as f64;
    let sd = (t.data().iter().map(|v| (v - m).powi(2)).sum::<f64>() / t.len() as f64).sqrt();
    t.map(|v| if sd > 0.0 { (v - m) / sd } else { 0.0 })
}

fn random_pixel<R: Rng + ?Sized>(rng: &mut R, m: &Mask) -> Option<usize> {
    let n = m.count();
    if n == 0 {
        return None;
    }
    let k = rng.random_range(0..n);
    m.data().iter().enumerate().filter(|(_, &b)| b).nth(k).map(|(i, _)| i)
}

fn ellipse<R: Rng + ?Sized>(rng: &mut R, n: usize) -> Mask {
    let s = n as f64;
    let (cy, cx) = (s / 2.0 + rng.random_range(-0.04..0.04) * s, s / 2.0 + rng.random_range(-0.04..0.04) * s);
    let (a, b) = (rng.random_range(0.36..0.45) * s, rng.random_range(0.30..0.42) * s);
    let t = rng.random_range(0.0..PI);
    let (ct, st) = (t.cos(), t.sin());
    Grid::from_fn(n, n, |r, c| {
        let (y, x) = (r as f64 + 0.5 - cy, c as f64 + 0.5 - cx);
        let (u, v) = (x * ct + y * st, -x * st + y * ct);
        (u / a).powi(2) + (v / b).powi(2) <= 1.0
    })
}

struct Walker {
    y: f64,
    x: f64,
    theta: f64,
    width: f64,
    steps: usize,
}

/// Max-composites branching random walks with Gaussian cross-sections.
fn vessels<R: Rng + ?Sized>(rng: &mut R, fg: &Mask, cfg: &SynthConfig) -> Grid<f64> {
    let n = cfg.image_size;
    let mut acc = Grid::filled(n, n, 0.0f64);
    let count = rng.random_range(cfg.vessel_count[0]..=cfg.vessel_count[1]);
    let turn = Normal::new(0.0, 0.18).expect("valid sigma");
    let drift = Normal::new(0.0, 0.03).expect("valid sigma");
    for _ in 0..count {
        let Some(start) = random_pixel(rng, fg) else { break };
        let mut amp = uniform(rng, cfg.vessel_intensity);
        let mut stack = vec![Walker {
            y: (start / n) as f64 + 0.5,
            x: (start % n) as f64 + 0.5,
            theta: rng.random_range(0.0..2.0 * PI),
            width: uniform(rng, cfg.vessel_width),
            steps: rng.random_range(n / 2..=n * 3 / 2),
        }];
        while let Some(mut w) = stack.pop() {
            for _ in 0..w.steps {
                let (r, c) = (w.y.floor(), w.x.floor());
                if r < 0.0 || c < 0.0 || r >= n as f64 || c >= n as f64 || !fg.get(r as usize, c as usize) {
                    break;
                }
                splat(&mut acc, fg, w.y, w.x, w.width / 2.0, amp);
                amp = (amp + drift.sample(rng)).clamp(0.5 * cfg.vessel_intensity[0], cfg.vessel_intensity[1]);
                w.theta += turn.sample(rng);
                w.y += 0.7 * w.theta.sin();
                w.x += 0.7 * w.theta.cos();
                if w.width > 0.9 && rng.random_bool(0.03) {
                    let side = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
                    stack.push(Walker {
                        y: w.y,
                        x: w.x,
                        theta: w.theta + side * rng.random_range(0.4..0.9),
                        width: w.width * 0.7,
                        steps: w.steps / 2,
                    });
                }
            }
        }
    }
    acc
}

fn splat(acc: &mut Grid<f64>, fg: &Mask, y: f64, x: f64, sigma: f64, amp: f64) {
    let n = acc.height() as isize;
    let rad = (2.5 * sigma).ceil() as isize;
    let (r0, c0) = (y.floor() as isize, x.floor() as isize);
    for r in (r0 - rad).max(0)..=(r0 + rad).min(n - 1) {
        for c in (c0 - rad).max(0)..=(c0 + rad).min(n - 1) {
            let (r, c) = (r as usize, c as usize);
            if !fg.get(r, c) {
                continue;
            }
            let d2 = (r as f64 + 0.5 - y).powi(2) + (c as f64 + 0.5 - x).powi(2);
            let v = amp * (-d2 / (2.0 * sigma * sigma)).exp();
            if v > acc.get(r, c) {
                acc.set(r, c, v);
            }
        }
    }
}

const BASE_LEVEL: f64 = -0.6;

/// A normal image: textured ellipse with bright vessels, zero background.
/// The foreground ellipse is attached as the image mask.
pub fn gen_normal<R: Rng + ?Sized>(rng: &mut R, cfg: &SynthConfig) -> Result<Image2D> {
    cfg.validate()?;
    let n = cfg.image_size;
    let fg = ellipse(rng, n);
    let tex = texture(rng, n, 1.0);
    let v = vessels(rng, &fg, cfg);
    let px = Grid::from_fn(n, n, |r, c| {
        if !fg.get(r, c) {
            return 0.0;
        }
        let base = BASE_LEVEL + cfg.texture_std * tex.get(r, c);
        (base + v.get(r, c)).clamp(-1.0, 1.0) as f32
    });
    Image2D::new(px, Modality::Synth, Some(fg))
}

/// One blob of `target` pixels inside `fg`, with soft weights in `[0.5, 1]`.
fn blob<R: Rng + ?Sized>(rng: &mut R, fg: &Mask, target: usize, area: [usize; 2]) -> Option<(Mask, Grid<f64>)> {
    let n = fg.height();
    let noise = smooth_noise(rng, n, 3.0);
    let start = random_pixel(rng, fg)?;
    let hard = flood_from(&noise, target, Some(fg), start);
    let soft = gaussian_blur(&hard.map(|b| b as u8 as f64), 1.5);
    let smoothed = Grid::from_fn(n, n, |r, c| fg.get(r, c) && soft.get(r, c) >= 0.5);
    let a = smoothed.count();
    let mask = if a >= area[0] && a <= area[1] { smoothed } else { hard };
    let weight = Grid::from_fn(n, n, |r, c| if mask.get(r, c) { soft.get(r, c).clamp(0.5, 1.0) } else { 0.0 });
    Some((mask, weight))
}

/// Adds `count` blobs and returns the image with each blob's mask.
pub fn inject_blobs<R: Rng + ?Sized>(img: &Image2D, rng: &mut R, cfg: &SynthConfig, count: usize) -> Result<(Image2D, Vec<Mask>)> {
    cfg.validate()?;
    let fg = img.region();
    let (h, w) = img.shape();
    let total = (h * w) as f64;
    let area = [
        (cfg.anomaly_area_frac[0] * total).ceil() as usize,
        (cfg.anomaly_area_frac[1] * total).floor() as usize,
    ];
    let mut shift = Grid::filled(h, w, 0.0f64);
    let mut masks = Vec::with_capacity(count);
    for _ in 0..count {
        let frac = uniform(rng, cfg.anomaly_area_frac);
        let target = ((frac * total).round() as usize).clamp(area[0], area[1].max(area[0]));
        let Some((m, wgt)) = blob(rng, &fg, target, area) else { break };
        let s = uniform(rng, cfg.anomaly_intensity_shift);
        for (acc, &k) in shift.data_mut().iter_mut().zip(wgt.data()) {
            *acc += s * k;
        }
        masks.push(m);
    }
    let px = Grid::from_fn(h, w, |r, c| (img.pixels.get(r, c) as f64 + shift.get(r, c)).clamp(-1.0, 1.0) as f32);
    Ok((Image2D::new(px, img.modality, img.mask.clone())?, masks))
}

pub fn union(masks: &[Mask], h: usize, w: usize) -> Mask {
    Grid::from_fn(h, w, |r, c| masks.iter().any(|m| m.get(r, c)))
}

/// Injects a random number of blobs within `blobs_per_image`; returns the union mask.
pub fn inject_anomaly<R: Rng + ?Sized>(img: &Image2D, rng: &mut R, cfg: &SynthConfig) -> Result<(Image2D, Mask)> {
    cfg.validate()?;
    let k = rng.random_range(cfg.blobs_per_image[0]..=cfg.blobs_per_image[1]);
    let (out, masks) = inject_blobs(img, rng, cfg, k)?;
    let (h, w) = img.shape();
    Ok((out, union(&masks, h, w)))
}

/// A normal image keyed by id, independent of generation order.
pub fn normal_by_id(cfg: &SynthConfig, id: &str) -> Result<Image2D> {
    gen_normal(&mut stream(cfg.seed, "synth-image", id), cfg)
}

pub fn anomalous_by_id(cfg: &SynthConfig, id: &str) -> Result<(Image2D, Mask)> {
    let img = normal_by_id(cfg, id)?;
    inject_anomaly(&img, &mut stream(cfg.seed, "synth-anomaly", id), cfg)
}

/// Writes `images/`, `masks/` (foreground), `gt/` and `manifest.csv` under `out`.
/// Refuses to overwrite any existing file.
pub fn gen_dataset(cfg: &SynthConfig, out: &Path) -> Result<Manifest> {
    cfg.validate()?;
    let n_val = cfg.n_anomalous / 2;
    let mut plan: Vec<(String, Split)> = (0..cfg.n_normal).map(|i| (format!("normal_{i:05}"), Split::Train)).collect();
    plan.extend((0..n_val).map(|i| (format!("val_{i:05}"), Split::Val)));
    plan.extend((0..cfg.n_anomalous - n_val).map(|i| (format!("test_{i:05}"), Split::Test)));

    let manifest_path = out.join("manifest.csv");
    let records: Vec<ManifestRecord> = plan
        .iter()
        .map(|(id, split)| ManifestRecord {
            image_id: id.clone(),
            split: *split,
            image_path: format!("images/{id}.npy").into(),
            mask_path: Some(format!("masks/{id}.npy").into()),
            gt_path: (*split != Split::Train).then(|| format!("gt/{id}.npy").into()),
        })
        .collect();
    let targets = records
        .iter()
        .flat_map(|r| [Some(&r.image_path), r.mask_path.as_ref(), r.gt_path.as_ref()])
        .flatten()
        .map(|p| out.join(p))
        .chain([manifest_path.clone()]);
    for t in targets {
        if t.exists() {
            return Err(CoreError::Exists(t));
        }
    }
    for d in ["images", "masks", "gt"] {
        let p = out.join(d);
        fs::create_dir_all(&p).map_err(|e| CoreError::io(&p, e))?;
    }
    for r in &records {
        let (img, gt) = if r.split == Split::Train {
            (normal_by_id(cfg, &r.image_id)?, None)
        } else {
            let (i, g) = anomalous_by_id(cfg, &r.image_id)?;
            (i, Some(g))
        };
        io::write_f32(&out.join(&r.image_path), &img.pixels)?;
        io::write_mask(&out.join(r.mask_path.as_ref().expect("set above")), &img.region())?;
        if let (Some(g), Some(p)) = (gt, &r.gt_path) {
            io::write_mask(&out.join(p), &g)?;
        }
    }
    let m = Manifest::new(out, records)?;
    m.write(&manifest_path)?;
    Ok(m)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;

    #[test]
    fn zero_blobs_leave_image_unchanged() {
        let cfg = SynthConfig::default();
        let img = gen_normal(&mut seeded(1), &cfg).unwrap();
        let (out, masks) = inject_blobs(&img, &mut seeded(2), &cfg, 0).unwrap();
        assert_eq!(out, img);
        assert!(masks.is_empty());
    }

    #[test]
    fn config_rules() {
        assert!(SynthConfig::default().validate().is_ok());
        let bad = |f: fn(&mut SynthConfig)| {
            let mut c = SynthConfig::default();
            f(&mut c);
            c.validate().is_err()
        };
        assert!(bad(|c| c.image_size = 28));
        assert!(bad(|c| c.anomaly_area_frac = [0.1, 0.5]));
        assert!(bad(|c| c.anomaly_area_frac = [0.0, 0.2]));
        assert!(bad(|c| c.vessel_width = [3.0, 1.0]));
    }
}
