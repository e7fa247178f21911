//! PNG reading and writing, and a training source backed by a folder of images.

use std::path::{Path, PathBuf};

use image::{ColorType, DynamicImage};
use lbp_inpaint::data::{mix_seed, MaskPolicy, Sample, SampleSource};
use lbp_inpaint::image::{GrayImage, RgbImage};
use lbp_inpaint::mask::Mask;

use crate::CliError;

fn open(path: &Path) -> Result<DynamicImage, CliError> {
    image::open(path).map_err(|e| CliError::io(format!("cannot read {}: {e}", path.display())))
}

pub fn read_rgb(path: &Path) -> Result<RgbImage, CliError> {
    let img = open(path)?.to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    RgbImage::new(w, h, img.into_raw()).map_err(CliError::from)
}

/// Grayscale input keeps its samples; colour input goes through luma.
pub fn read_gray(path: &Path) -> Result<GrayImage, CliError> {
    match open(path)? {
        DynamicImage::ImageLuma8(img) => {
            let (w, h) = (img.width() as usize, img.height() as usize);
            GrayImage::new(w, h, img.into_raw()).map_err(CliError::from)
        }
        other => {
            let img = other.to_rgb8();
            let (w, h) = (img.width() as usize, img.height() as usize);
            Ok(RgbImage::new(w, h, img.into_raw())?.to_gray())
        }
    }
}

/// White (>= 128) is known, black is missing.
pub fn read_mask(path: &Path) -> Result<Mask, CliError> {
    Mask::from_image(&read_gray(path)?).map_err(CliError::from)
}

fn save(path: &Path, bytes: &[u8], w: usize, h: usize, ty: ColorType) -> Result<(), CliError> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent)
            .map_err(|e| CliError::io(format!("cannot create {}: {e}", parent.display())))?;
    }
    image::save_buffer(path, bytes, w as u32, h as u32, ty)
        .map_err(|e| CliError::io(format!("cannot write {}: {e}", path.display())))
}

pub fn write_gray(path: &Path, img: &GrayImage) -> Result<(), CliError> {
    save(path, img.pixels(), img.width(), img.height(), ColorType::L8)
}

pub fn write_rgb(path: &Path, img: &RgbImage) -> Result<(), CliError> {
    save(path, img.pixels(), img.width(), img.height(), ColorType::Rgb8)
}

/// `*.png` files directly inside `dir`, sorted by name.
pub fn png_files(dir: &Path) -> Result<Vec<PathBuf>, CliError> {
    let entries = std::fs::read_dir(dir)
        .map_err(|e| CliError::io(format!("cannot list {}: {e}", dir.display())))?;
    let mut out = Vec::new();
    for entry in entries {
        let p = entry
            .map_err(|e| CliError::io(format!("cannot list {}: {e}", dir.display())))?
            .path();
        let is_png = p
            .extension()
            .and_then(|e| e.to_str())
            .is_some_and(|e| e.eq_ignore_ascii_case("png"));
        if is_png && p.is_file() {
            out.push(p);
        }
    }
    out.sort();
    Ok(out)
}

/// Images cycle in name order; sample `i` uses image `i mod n` and a fresh
/// mask drawn from `policy`.
#[derive(Clone, Debug)]
pub struct FolderSource {
    pub images: Vec<RgbImage>,
    pub mask: MaskPolicy,
    pub seed: u64,
}

impl FolderSource {
    pub fn load(dir: &Path, size: usize, mask: MaskPolicy, seed: u64) -> Result<Self, CliError> {
        let files = png_files(dir)?;
        if files.is_empty() {
            return Err(CliError::data(format!("no PNG images in {}", dir.display())));
        }
        let mut images = Vec::with_capacity(files.len());
        for f in files {
            let img = read_rgb(&f)?;
            if img.width() != size || img.height() != size {
                return Err(CliError::data(format!(
                    "{} is {}x{}, expected {size}x{size}",
                    f.display(),
                    img.width(),
                    img.height()
                )));
            }
            images.push(img);
        }
        Ok(FolderSource { images, mask, seed })
    }
}

impl SampleSource for FolderSource {
    fn sample(&self, index: u64) -> lbp_inpaint::Result<Sample> {
        let image = self.images[(index % self.images.len() as u64) as usize].clone();
        let mask = self
            .mask
            .make(image.height(), image.width(), mix_seed(self.seed, index))?;
        Ok(Sample { image, mask })
    }
}
