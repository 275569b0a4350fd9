//! `.npy` storage for images, score maps and masks.
//!
//! Images are little-endian `float32` arrays of shape `(H, W)`, score maps
//! `float64`, masks `uint8` where any nonzero value is foreground.

use std::fs;
use std::path::Path;

use npyz::WriterBuilder;

use crate::error::{CoreError, Result};
use crate::image::{Grid, Mask};

fn encode<T: npyz::AutoSerialize + Copy>(shape: (usize, usize), data: &[T]) -> std::io::Result<Vec<u8>> {
    let mut out = Vec::new();
    let mut w = npyz::WriteOptions::new()
        .default_dtype()
        .shape(&[shape.0 as u64, shape.1 as u64])
        .writer(&mut out)
        .begin_nd()?;
    w.extend(data.iter().copied())?;
    w.finish()?;
    Ok(out)
}

fn decode<T: npyz::Deserialize>(path: &Path, bytes: &[u8]) -> Result<(usize, usize, Vec<T>)> {
    let bad = |message: String| CoreError::Decode {
        path: path.to_path_buf(),
        message,
    };
    let npy = npyz::NpyFile::new(bytes).map_err(|e| bad(e.to_string()))?;
    let shape = npy.shape().to_vec();
    if shape.len() != 2 {
        return Err(bad(format!("expected a 2-D array, got shape {shape:?}")));
    }
    if npy.order() != npyz::Order::C {
        return Err(bad("Fortran-ordered arrays are not supported".into()));
    }
    let data = npy.into_vec::<T>().map_err(|e| bad(e.to_string()))?;
    Ok((shape[0] as usize, shape[1] as usize, data))
}

pub fn npy_bytes_f32(img: &Grid<f32>) -> Result<Vec<u8>> {
    encode(img.shape(), img.data()).map_err(|e| CoreError::Checkpoint(e.to_string()))
}

pub fn write_f32(path: &Path, img: &Grid<f32>) -> Result<()> {
    let bytes = npy_bytes_f32(img)?;
    fs::write(path, bytes).map_err(|e| CoreError::io(path, e))
}

pub fn read_f32(path: &Path) -> Result<Grid<f32>> {
    let bytes = fs::read(path).map_err(|e| CoreError::io(path, e))?;
    let (h, w, v) = decode::<f32>(path, &bytes)?;
    Grid::new(h, w, v)
}

pub fn write_f64(path: &Path, img: &Grid<f64>) -> Result<()> {
    let bytes = encode(img.shape(), img.data()).map_err(|e| CoreError::Checkpoint(e.to_string()))?;
    fs::write(path, bytes).map_err(|e| CoreError::io(path, e))
}

pub fn read_f64(path: &Path) -> Result<Grid<f64>> {
    let bytes = fs::read(path).map_err(|e| CoreError::io(path, e))?;
    let (h, w, v) = decode::<f64>(path, &bytes)?;
    Grid::new(h, w, v)
}

pub fn write_mask(path: &Path, m: &Mask) -> Result<()> {
    let data: Vec<u8> = m.data().iter().map(|&b| b as u8).collect();
    let bytes = encode(m.shape(), &data).map_err(|e| CoreError::Checkpoint(e.to_string()))?;
    fs::write(path, bytes).map_err(|e| CoreError::io(path, e))
}

pub fn read_mask(path: &Path) -> Result<Mask> {
    let bytes = fs::read(path).map_err(|e| CoreError::io(path, e))?;
    let (h, w, v) = decode::<u8>(path, &bytes)?;
    Grid::new(h, w, v.into_iter().map(|x| x != 0).collect())
}
