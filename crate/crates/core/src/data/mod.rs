//! Image/mask ingestion, saliency-map export and the synthetic dataset.

mod synth;

use std::path::{Path, PathBuf};

use image::{DynamicImage, GrayImage, Luma};

pub use synth::{synth_generate, synth_pairs, synth_samples, SynthConfig};

use crate::autodiff::kernels;
use crate::error::{Error, Result};
use crate::metrics::{BinaryMask, SaliencyMap};
use crate::scalar::Real;
use crate::tensor::Tensor;

pub const IMAGE_DIR: &str = "images";
pub const MASK_DIR: &str = "masks";

/// An input image `(1, 3, H, W)` in `[0, 1]` with its ground truth.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample<T> {
    pub id: String,
    pub image: Tensor<T>,
    pub mask: BinaryMask,
}

/// Per-channel `(x − mean) / std`, applied after scaling to `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Normalization {
    pub mean: [f64; 3],
    pub std: [f64; 3],
}

fn image_error(path: &Path, source: image::ImageError) -> Error {
    Error::Image {
        path: path.to_path_buf(),
        source,
    }
}

/// Image files (`png`, `jpg`, `jpeg`) in `dir` as `(stem, path)`, sorted by stem.
pub fn list_images(dir: &Path) -> Result<Vec<(String, PathBuf)>> {
    let mut out = Vec::new();
    for entry in std::fs::read_dir(dir)? {
        let path = entry?.path();
        let ext = path
            .extension()
            .and_then(|e| e.to_str())
            .map(|e| e.to_ascii_lowercase());
        if !matches!(ext.as_deref(), Some("png" | "jpg" | "jpeg")) || !path.is_file() {
            continue;
        }
        if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
            out.push((stem.to_string(), path.clone()));
        }
    }
    out.sort();
    Ok(out)
}

fn rgb_tensor<T: Real>(img: &DynamicImage, target: usize, norm: Option<&Normalization>) -> Result<Tensor<T>> {
    if target == 0 {
        return Err(Error::invalid("preprocess_image", "target size must be positive"));
    }
    let rgb = img.to_rgb8();
    let (w, h) = (rgb.width() as usize, rgb.height() as usize);
    let raw = Tensor::from_fn([1, 3, h, w], |[_, c, y, x]| T::c(rgb.get_pixel(x as u32, y as u32)[c] as f64 / 255.0));
    let data = kernels::bilinear_forward(raw.data(), raw.shape(), target, target);
    let mut t = Tensor::from_vec([1, 3, target, target], data)?;
    if let Some(n) = norm {
        let plane = target * target;
        for (i, v) in t.data_mut().iter_mut().enumerate() {
            let c = i / plane;
            *v = (*v - T::c(n.mean[c])) / T::c(n.std[c]);
        }
    }
    Ok(t)
}

/// Decode an 8-bit RGB or grayscale image into a `(1, 3, target, target)` tensor
/// in `[0, 1]`, bilinearly resized with aligned corners.
pub fn preprocess_image<T: Real>(bytes: &[u8], target: usize, norm: Option<&Normalization>) -> Result<Tensor<T>> {
    let img = image::load_from_memory(bytes).map_err(|e| image_error(Path::new("<memory>"), e))?;
    rgb_tensor(&img, target, norm)
}

pub fn load_image<T: Real>(path: &Path, target: usize, norm: Option<&Normalization>) -> Result<Tensor<T>> {
    let img = image::open(path).map_err(|e| image_error(path, e))?;
    rgb_tensor(&img, target, norm)
}

/// Binarize a grayscale mask at `≥ 128`, nearest-resizing to `target` when given.
pub fn mask_from_gray(gray: &GrayImage, target: Option<usize>) -> BinaryMask {
    let (sw, sh) = (gray.width() as usize, gray.height() as usize);
    let (tw, th) = target.map_or((sw, sh), |t| (t, t));
    BinaryMask::from_fn(th, tw, |y, x| {
        let (sy, sx) = (y * sh / th, x * sw / tw);
        gray.get_pixel(sx as u32, sy as u32)[0] >= 128
    })
}

pub fn load_mask(path: &Path, target: Option<usize>) -> Result<BinaryMask> {
    let img = image::open(path).map_err(|e| image_error(path, e))?;
    Ok(mask_from_gray(&img.to_luma8(), target))
}

/// Read an 8-bit grayscale saliency map as values `v/255`.
pub fn load_saliency(path: &Path) -> Result<SaliencyMap> {
    let gray = image::open(path).map_err(|e| image_error(path, e))?.to_luma8();
    let (w, h) = (gray.width() as usize, gray.height() as usize);
    SaliencyMap::new(h, w, gray.pixels().map(|p| p[0] as f64 / 255.0).collect())
}

/// Write `round(255·v)` as an 8-bit grayscale PNG.
pub fn save_saliency(map: &SaliencyMap, path: &Path) -> Result<()> {
    let img = GrayImage::from_raw(map.width() as u32, map.height() as u32, map.to_u8())
        .expect("buffer matches dimensions");
    img.save(path).map_err(|e| image_error(path, e))
}

pub fn save_mask(mask: &BinaryMask, path: &Path) -> Result<()> {
    let img = GrayImage::from_fn(mask.width() as u32, mask.height() as u32, |x, y| {
        Luma([if mask.get(y as usize, x as usize) { 255 } else { 0 }])
    });
    img.save(path).map_err(|e| image_error(path, e))
}

/// Pairs `image_dir/<stem>.{png,jpg,jpeg}` with `mask_dir/<stem>.png`, in stem order.
pub fn load_dataset<T: Real>(image_dir: &Path, mask_dir: &Path, target: usize) -> Result<Vec<Sample<T>>> {
    let mut out = Vec::new();
    for (stem, path) in list_images(image_dir)? {
        let mask_path = mask_dir.join(format!("{stem}.png"));
        if !mask_path.is_file() {
            return Err(Error::MissingPair(stem));
        }
        out.push(Sample {
            image: load_image(&path, target, None)?,
            mask: load_mask(&mask_path, Some(target))?,
            id: stem,
        });
    }
    Ok(out)
}

/// [`load_dataset`] over `<root>/images` and `<root>/masks`.
pub fn load_dataset_root<T: Real>(root: &Path, target: usize) -> Result<Vec<Sample<T>>> {
    load_dataset(&root.join(IMAGE_DIR), &root.join(MASK_DIR), target)
}
