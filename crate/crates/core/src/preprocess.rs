//! CT / MRI intensity normalization and square cropping/resizing.

use crate::error::{CoreError, Result};
use crate::image::{Grid, Image2D, Mask, Modality};

pub const CT_HU_MIN: f32 = -1000.0;
pub const CT_HU_MAX: f32 = 0.0;
pub const MR_PERCENTILE: f64 = 98.0;

/// Clips Hounsfield units to `[-1000, 0]` and maps them linearly onto `[-1, 1]`.
#[inline]
pub fn hu_to_unit(hu: f32) -> f32 {
    let c = hu.clamp(CT_HU_MIN, CT_HU_MAX);
    (c - CT_HU_MIN) / (CT_HU_MAX - CT_HU_MIN) * 2.0 - 1.0
}

/// CT slice normalization: clip and scale, zero the background, then crop a
/// square around the lung bounding box and resize to `size × size`.
pub fn normalize_ct(raw: &Grid<f32>, lung_mask: &Mask, size: usize) -> Result<Image2D> {
    raw.ensure_same_shape(lung_mask, "CT slice vs lung mask")?;
    if lung_mask.count() == 0 {
        return Err(CoreError::NoForeground);
    }
    let scaled = Grid::from_fn(raw.height(), raw.width(), |r, c| {
        if lung_mask.get(r, c) {
            hu_to_unit(raw.get(r, c))
        } else {
            0.0
        }
    });
    let (pixels, mask) = square_crop_resize(&scaled, lung_mask, size)?;
    Image2D::new(pixels, Modality::Ct, Some(mask))
}

/// Crops the smallest square centered on the mask bounding box (padding with
/// background where it leaves the image), then resizes it. Images use
/// bilinear interpolation restricted to foreground samples, masks nearest
/// neighbour; background pixels are zero.
pub fn square_crop_resize(img: &Grid<f32>, mask: &Mask, size: usize) -> Result<(Grid<f32>, Mask)> {
    img.ensure_same_shape(mask, "image vs mask")?;
    let (top, left, side) = crop_square(mask)?;
    let img_c = img.crop(top, left, side, side, 0.0);
    let mask_c = mask.crop(top, left, side, side, false);
    let mask_r = resize_nearest(&mask_c, size, size);
    let img_r = resize_bilinear_masked(&img_c, &mask_c, &mask_r);
    Ok((img_r, mask_r))
}

fn crop_square(mask: &Mask) -> Result<(isize, isize, usize)> {
    let (r0, c0, r1, c1) = mask.bbox().ok_or(CoreError::NoForeground)?;
    let (bh, bw) = (r1 - r0 + 1, c1 - c0 + 1);
    let side = bh.max(bw);
    let top = r0 as isize - ((side - bh) / 2) as isize;
    let left = c0 as isize - ((side - bw) / 2) as isize;
    Ok((top, left, side))
}

/// Applies the geometric part of a modality's preprocessing to a label mask
/// (such as ground truth) so it stays aligned with the normalized image.
/// `foreground` is the CT lung mask; it is ignored for the other modalities.
pub fn align_mask(label: &Mask, modality: Modality, foreground: Option<&Mask>, size: usize) -> Result<Mask> {
    let sq = match modality {
        Modality::Ct => {
            let fg = foreground.ok_or(CoreError::NoForeground)?;
            label.ensure_same_shape(fg, "label vs lung mask")?;
            let (top, left, side) = crop_square(fg)?;
            label.crop(top, left, side, side, false)
        }
        Modality::Mri => {
            let (h, w) = label.shape();
            let side = h.max(w);
            label.crop(-(((side - h) / 2) as isize), -(((side - w) / 2) as isize), side, side, false)
        }
        Modality::Synth => label.clone(),
    };
    Ok(resize_nearest(&sq, size, size))
}

/// Linear-interpolated percentile (`q` in `[0, 100]`) of a sorted slice.
pub fn percentile_sorted(sorted: &[f32], q: f64) -> f32 {
    assert!(!sorted.is_empty());
    let pos = q / 100.0 * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let frac = pos - lo as f64;
    (sorted[lo] as f64 + (sorted[hi] as f64 - sorted[lo] as f64) * frac) as f32
}

/// MRI slice normalization: clip at the 98th percentile of nonzero pixels,
/// scale to `[0, 1]`, and zero-pad to a square (extra row/column after).
pub fn normalize_mr(raw: &Grid<f32>) -> Result<Image2D> {
    if raw.is_empty() {
        return Err(CoreError::Empty("MR slice"));
    }
    let mut nonzero: Vec<f32> = raw.data().iter().copied().filter(|&v| v > 0.0).collect();
    if nonzero.is_empty() {
        return Err(CoreError::AllZero);
    }
    nonzero.sort_by(f32::total_cmp);
    let p = percentile_sorted(&nonzero, MR_PERCENTILE);
    let scaled = raw.map(|v| if v > 0.0 { v.min(p) / p } else { 0.0 });
    let fg = raw.map(|v| v > 0.0);
    let (pixels, mask) = pad_square(&scaled, &fg);
    Image2D::new(pixels, Modality::Mri, Some(mask))
}

/// Zero-pads to a square; an odd remainder goes to the bottom/right.
pub fn pad_square(img: &Grid<f32>, mask: &Mask) -> (Grid<f32>, Mask) {
    let (h, w) = img.shape();
    let side = h.max(w);
    let top = (side - h) / 2;
    let left = (side - w) / 2;
    (
        img.crop(-(top as isize), -(left as isize), side, side, 0.0),
        mask.crop(-(top as isize), -(left as isize), side, side, false),
    )
}

/// Bilinear resampling with pixel-center alignment.
pub fn resize_bilinear(img: &Grid<f32>, out_h: usize, out_w: usize) -> Grid<f32> {
    let (h, w) = img.shape();
    if (h, w) == (out_h, out_w) {
        return img.clone();
    }
    let sy = h as f64 / out_h as f64;
    let sx = w as f64 / out_w as f64;
    Grid::from_fn(out_h, out_w, |r, c| {
        let fy = ((r as f64 + 0.5) * sy - 0.5).clamp(0.0, (h - 1) as f64);
        let fx = ((c as f64 + 0.5) * sx - 0.5).clamp(0.0, (w - 1) as f64);
        let (y0, x0) = (fy.floor() as usize, fx.floor() as usize);
        let (y1, x1) = ((y0 + 1).min(h - 1), (x0 + 1).min(w - 1));
        let (ty, tx) = (fy - y0 as f64, fx - x0 as f64);
        let top = img.get(y0, x0) as f64 * (1.0 - tx) + img.get(y0, x1) as f64 * tx;
        let bot = img.get(y1, x0) as f64 * (1.0 - tx) + img.get(y1, x1) as f64 * tx;
        (top * (1.0 - ty) + bot * ty) as f32
    })
}

/// Bilinear resampling that only mixes foreground samples of `mask`, so the
/// zero background never bleeds into the foreground. Output pixels outside
/// `out_mask` are zero.
pub fn resize_bilinear_masked(img: &Grid<f32>, mask: &Mask, out_mask: &Mask) -> Grid<f32> {
    let (h, w) = img.shape();
    let (out_h, out_w) = out_mask.shape();
    let sy = h as f64 / out_h as f64;
    let sx = w as f64 / out_w as f64;
    Grid::from_fn(out_h, out_w, |r, c| {
        if !out_mask.get(r, c) {
            return 0.0;
        }
        let fy = ((r as f64 + 0.5) * sy - 0.5).clamp(0.0, (h - 1) as f64);
        let fx = ((c as f64 + 0.5) * sx - 0.5).clamp(0.0, (w - 1) as f64);
        let (y0, x0) = (fy.floor() as usize, fx.floor() as usize);
        let (y1, x1) = ((y0 + 1).min(h - 1), (x0 + 1).min(w - 1));
        let (ty, tx) = (fy - y0 as f64, fx - x0 as f64);
        let taps = [
            (y0, x0, (1.0 - ty) * (1.0 - tx)),
            (y0, x1, (1.0 - ty) * tx),
            (y1, x0, ty * (1.0 - tx)),
            (y1, x1, ty * tx),
        ];
        let (mut acc, mut wsum) = (0.0, 0.0);
        for (y, x, wt) in taps {
            if mask.get(y, x) {
                acc += wt * img.get(y, x) as f64;
                wsum += wt;
            }
        }
        if wsum > 1e-12 {
            (acc / wsum) as f32
        } else {
            // no foreground tap: use the sample the nearest-neighbour mask came from
            let sr = (((r as f64 + 0.5) * sy) as usize).min(h - 1);
            let sc = (((c as f64 + 0.5) * sx) as usize).min(w - 1);
            img.get(sr, sc)
        }
    })
}

pub fn resize_nearest<T: Copy>(img: &Grid<T>, out_h: usize, out_w: usize) -> Grid<T> {
    let (h, w) = img.shape();
    if (h, w) == (out_h, out_w) {
        return img.clone();
    }
    Grid::from_fn(out_h, out_w, |r, c| {
        let sr = (((r as f64 + 0.5) * h as f64 / out_h as f64) as usize).min(h - 1);
        let sc = (((c as f64 + 0.5) * w as f64 / out_w as f64) as usize).min(w - 1);
        img.get(sr, sc)
    })
}

/// Resizes a normalized image (and its mask) to `size × size`.
pub fn resize_image(img: &Image2D, size: usize) -> Result<Image2D> {
    if img.shape() == (size, size) {
        return Ok(img.clone());
    }
    match &img.mask {
        Some(m) => {
            let out_mask = resize_nearest(m, size, size);
            let pixels = resize_bilinear_masked(&img.pixels, m, &out_mask);
            Image2D::new(pixels, img.modality, Some(out_mask))
        }
        None => Image2D::new(resize_bilinear(&img.pixels, size, size), img.modality, None),
    }
}
