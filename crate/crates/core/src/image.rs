//! Grid-backed image, mask, and edge-map types.

use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};

/// Dense row-major 2-D grid.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Grid<T> {
    height: usize,
    width: usize,
    data: Vec<T>,
}

impl<T: Copy> Grid<T> {
    pub fn new(height: usize, width: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != height * width {
            return Err(CoreError::shape(format!(
                "{} values for a {height}x{width} grid",
                data.len()
            )));
        }
        Ok(Grid {
            height,
            width,
            data,
        })
    }

    pub fn filled(height: usize, width: usize, value: T) -> Self {
        Grid {
            height,
            width,
            data: vec![value; height * width],
        }
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> T) -> Self {
        let mut data = Vec::with_capacity(height * width);
        for r in 0..height {
            for c in 0..width {
                data.push(f(r, c));
            }
        }
        Grid {
            height,
            width,
            data,
        }
    }

    #[inline]
    pub fn height(&self) -> usize {
        self.height
    }

    #[inline]
    pub fn width(&self) -> usize {
        self.width
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> T {
        self.data[r * self.width + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: T) {
        self.data[r * self.width + c] = v;
    }

    /// Value at a possibly out-of-range position, clamped to the border.
    #[inline]
    pub fn get_clamped(&self, r: isize, c: isize) -> T {
        let r = r.clamp(0, self.height as isize - 1) as usize;
        let c = c.clamp(0, self.width as isize - 1) as usize;
        self.get(r, c)
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn map<U: Copy>(&self, f: impl Fn(T) -> U) -> Grid<U> {
        Grid {
            height: self.height,
            width: self.width,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn same_shape<U>(&self, other: &Grid<U>) -> bool {
        self.height == other.height && self.width == other.width
    }

    pub fn ensure_same_shape<U>(&self, other: &Grid<U>, what: &str) -> Result<()> {
        if self.height == other.height && self.width == other.width {
            Ok(())
        } else {
            Err(CoreError::shape(format!(
                "{what}: {}x{} vs {}x{}",
                self.height, self.width, other.height, other.width
            )))
        }
    }

    /// Sub-grid starting at `(r0, c0)`; positions outside the source take `fill`.
    pub fn crop(&self, r0: isize, c0: isize, h: usize, w: usize, fill: T) -> Grid<T> {
        Grid::from_fn(h, w, |r, c| {
            let sr = r0 + r as isize;
            let sc = c0 + c as isize;
            if sr < 0 || sc < 0 || sr >= self.height as isize || sc >= self.width as isize {
                fill
            } else {
                self.get(sr as usize, sc as usize)
            }
        })
    }
}

/// Binary foreground/annotation mask.
pub type Mask = Grid<bool>;

impl Grid<bool> {
    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }

    /// Inclusive bounding box `(r0, c0, r1, c1)` of set pixels.
    pub fn bbox(&self) -> Option<(usize, usize, usize, usize)> {
        let mut bb: Option<(usize, usize, usize, usize)> = None;
        for r in 0..self.height {
            for c in 0..self.width {
                if self.get(r, c) {
                    bb = Some(match bb {
                        None => (r, c, r, c),
                        Some((r0, c0, r1, c1)) => (r0.min(r), c0.min(c), r1.max(r), c1.max(c)),
                    });
                }
            }
        }
        bb
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum Modality {
    Ct,
    Mri,
    Synth,
}

impl Modality {
    /// Valid intensity range after normalization.
    pub fn range(self) -> (f32, f32) {
        match self {
            Modality::Ct | Modality::Synth => (-1.0, 1.0),
            Modality::Mri => (0.0, 1.0),
        }
    }
}

impl std::str::FromStr for Modality {
    type Err = CoreError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().as_str() {
            "CT" => Ok(Modality::Ct),
            "MRI" | "MR" => Ok(Modality::Mri),
            "SYNTH" => Ok(Modality::Synth),
            other => Err(CoreError::Config(format!("unknown modality {other:?}"))),
        }
    }
}

/// Normalized single-channel slice with optional foreground mask.
#[derive(Clone, Debug, PartialEq)]
pub struct Image2D {
    pub pixels: Grid<f32>,
    pub modality: Modality,
    pub mask: Option<Mask>,
}

impl Image2D {
    pub fn new(pixels: Grid<f32>, modality: Modality, mask: Option<Mask>) -> Result<Self> {
        if let Some(m) = &mask {
            pixels.ensure_same_shape(m, "image/mask")?;
        }
        Ok(Image2D {
            pixels,
            modality,
            mask,
        })
    }

    pub fn side(&self) -> usize {
        self.pixels.height()
    }

    pub fn shape(&self) -> (usize, usize) {
        self.pixels.shape()
    }

    /// Foreground mask, or an all-true mask when none is attached.
    pub fn region(&self) -> Mask {
        match &self.mask {
            Some(m) => m.clone(),
            None => Grid::filled(self.pixels.height(), self.pixels.width(), true),
        }
    }

    /// Checks the square-shape, range, and background invariants.
    pub fn validate(&self) -> Result<()> {
        let (h, w) = self.pixels.shape();
        if h != w {
            return Err(CoreError::shape(format!("image is {h}x{w}, expected square")));
        }
        let (lo, hi) = self.modality.range();
        if let Some(v) = self
            .pixels
            .data()
            .iter()
            .find(|v| !v.is_finite() || **v < lo || **v > hi)
        {
            return Err(CoreError::shape(format!(
                "pixel {v} outside [{lo}, {hi}] for {:?}",
                self.modality
            )));
        }
        if let Some(m) = &self.mask {
            if m
                .data()
                .iter()
                .zip(self.pixels.data())
                .any(|(&fg, &v)| !fg && v != 0.0)
            {
                return Err(CoreError::shape("nonzero background pixel"));
            }
        }
        Ok(())
    }
}

/// Binary edge map produced by Canny; values are 0 or 1.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EdgeMap {
    pub pixels: Grid<u8>,
}

impl EdgeMap {
    pub fn new(pixels: Grid<u8>) -> Result<Self> {
        if pixels.data().iter().any(|&v| v > 1) {
            return Err(CoreError::shape("edge map must be binary"));
        }
        Ok(EdgeMap { pixels })
    }

    pub fn empty(h: usize, w: usize) -> Self {
        EdgeMap {
            pixels: Grid::filled(h, w, 0),
        }
    }

    pub fn shape(&self) -> (usize, usize) {
        self.pixels.shape()
    }

    pub fn count(&self) -> usize {
        self.pixels.data().iter().map(|&v| v as usize).sum()
    }

    pub fn is_binary(&self) -> bool {
        self.pixels.data().iter().all(|&v| v <= 1)
    }

    /// Network input encoding: edges at 1, background at -1.
    pub fn to_signed(&self) -> Vec<f32> {
        self.pixels
            .data()
            .iter()
            .map(|&v| if v == 1 { 1.0 } else { -1.0 })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grid_rejects_wrong_length() {
        assert!(Grid::new(2, 3, vec![0.0f32; 5]).is_err());
    }

    #[test]
    fn bbox_of_mask() {
        let mut m = Mask::filled(5, 6, false);
        m.set(1, 4, true);
        m.set(3, 2, true);
        assert_eq!(m.bbox(), Some((1, 2, 3, 4)));
        assert_eq!(Mask::filled(2, 2, false).bbox(), None);
    }

    #[test]
    fn validate_flags_background_and_range() {
        let px = Grid::new(2, 2, vec![0.5, 0.2, 0.0, -1.0]).unwrap();
        let mut m = Mask::filled(2, 2, true);
        m.set(1, 0, false);
        assert!(Image2D::new(px.clone(), Modality::Ct, Some(m.clone())).unwrap().validate().is_ok());
        assert!(Image2D::new(px.clone(), Modality::Mri, None).unwrap().validate().is_err());
        m.set(0, 0, false);
        assert!(Image2D::new(px, Modality::Ct, Some(m)).unwrap().validate().is_err());
    }
}
