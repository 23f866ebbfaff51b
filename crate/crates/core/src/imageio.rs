//! PNG/TIFF reading and writing to and from `ndarray` rasters.

use std::path::Path;

use image::{GrayImage, RgbImage};
use ndarray::{Array2, Array3};

use crate::error::{Error, Result};

pub fn read_rgb(path: &Path) -> Result<Array3<u8>> {
    let img = image::open(path)
        .map_err(|e| Error::Validation(format!("cannot read image {}: {e}", path.display())))?
        .to_rgb8();
    let (w, h) = img.dimensions();
    Array3::from_shape_vec((h as usize, w as usize, 3), img.into_raw())
        .map_err(|e| Error::Shape(e.to_string()))
}

pub fn write_rgb(path: &Path, pixels: &Array3<u8>) -> Result<()> {
    let (h, w, c) = pixels.dim();
    if c != 3 {
        return Err(Error::Shape(format!("expected 3 channels, got {c}")));
    }
    let data: Vec<u8> = pixels.iter().copied().collect();
    let img = RgbImage::from_raw(w as u32, h as u32, data).expect("buffer sized from dims");
    ensure_parent(path)?;
    img.save(path)?;
    Ok(())
}

pub fn read_gray(path: &Path) -> Result<Array2<u8>> {
    let img = image::open(path)
        .map_err(|e| Error::Validation(format!("cannot read mask {}: {e}", path.display())))?
        .to_luma8();
    let (w, h) = img.dimensions();
    Array2::from_shape_vec((h as usize, w as usize), img.into_raw()).map_err(|e| Error::Shape(e.to_string()))
}

pub fn write_gray(path: &Path, values: &Array2<u8>) -> Result<()> {
    let (h, w) = values.dim();
    let data: Vec<u8> = values.iter().copied().collect();
    let img = GrayImage::from_raw(w as u32, h as u32, data).expect("buffer sized from dims");
    ensure_parent(path)?;
    img.save(path)?;
    Ok(())
}

/// Soft mask in `[0, 1]` to an 8-bit raster.
pub fn mask_to_gray(mask: &Array2<f32>) -> Array2<u8> {
    mask.mapv(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
}

pub fn gray_to_mask(gray: &Array2<u8>) -> Array2<f32> {
    gray.mapv(|v| f32::from(v) / 255.0)
}

fn ensure_parent(path: &Path) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent).map_err(|e| Error::io(format!("creating {}", parent.display()), e))?;
        }
    }
    Ok(())
}

/// Image files in a directory (png/tif/tiff), sorted by file name.
pub fn list_images(dir: &Path) -> Result<Vec<std::path::PathBuf>> {
    let mut files = Vec::new();
    let entries = std::fs::read_dir(dir).map_err(|e| Error::io(format!("listing {}", dir.display()), e))?;
    for entry in entries {
        let path = entry.map_err(|e| Error::io(format!("listing {}", dir.display()), e))?.path();
        let ext = path.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase);
        if matches!(ext.as_deref(), Some("png" | "tif" | "tiff")) {
            files.push(path);
        }
    }
    files.sort();
    Ok(files)
}
