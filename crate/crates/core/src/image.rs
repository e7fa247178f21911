//! 8-bit raster buffers and their mapping to network tensors.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Read access shared by grayscale and RGB buffers.
pub trait Raster {
    fn width(&self) -> usize;
    fn height(&self) -> usize;
    fn channels(&self) -> usize;
    /// Interleaved samples, row-major.
    fn samples(&self) -> &[u8];
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GrayImage {
    width: usize,
    height: usize,
    pixels: Vec<u8>,
}

impl GrayImage {
    pub fn new(width: usize, height: usize, pixels: Vec<u8>) -> Result<Self> {
        if pixels.len() != width * height {
            return Err(Error::Dimension {
                op: "GrayImage::new",
                axis: "pixels",
                expected: width * height,
                actual: pixels.len(),
            });
        }
        Ok(GrayImage {
            width,
            height,
            pixels,
        })
    }

    pub fn filled(width: usize, height: usize, value: u8) -> Self {
        GrayImage {
            width,
            height,
            pixels: vec![value; width * height],
        }
    }

    pub fn from_fn(width: usize, height: usize, f: impl Fn(usize, usize) -> u8) -> Self {
        let mut pixels = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                pixels.push(f(x, y));
            }
        }
        GrayImage {
            width,
            height,
            pixels,
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn pixels(&self) -> &[u8] {
        &self.pixels
    }

    pub fn into_pixels(self) -> Vec<u8> {
        self.pixels
    }

    pub fn get(&self, x: usize, y: usize) -> u8 {
        self.pixels[y * self.width + x]
    }

    pub fn map(&self, f: impl Fn(u8) -> u8) -> GrayImage {
        GrayImage {
            width: self.width,
            height: self.height,
            pixels: self.pixels.iter().map(|&p| f(p)).collect(),
        }
    }
}

impl Raster for GrayImage {
    fn width(&self) -> usize {
        self.width
    }
    fn height(&self) -> usize {
        self.height
    }
    fn channels(&self) -> usize {
        1
    }
    fn samples(&self) -> &[u8] {
        &self.pixels
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RgbImage {
    width: usize,
    height: usize,
    pixels: Vec<u8>,
}

impl RgbImage {
    pub fn new(width: usize, height: usize, pixels: Vec<u8>) -> Result<Self> {
        if pixels.len() != width * height * 3 {
            return Err(Error::Dimension {
                op: "RgbImage::new",
                axis: "pixels",
                expected: width * height * 3,
                actual: pixels.len(),
            });
        }
        Ok(RgbImage {
            width,
            height,
            pixels,
        })
    }

    pub fn from_fn(width: usize, height: usize, f: impl Fn(usize, usize) -> [u8; 3]) -> Self {
        let mut pixels = Vec::with_capacity(width * height * 3);
        for y in 0..height {
            for x in 0..width {
                pixels.extend_from_slice(&f(x, y));
            }
        }
        RgbImage {
            width,
            height,
            pixels,
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn pixels(&self) -> &[u8] {
        &self.pixels
    }

    pub fn into_pixels(self) -> Vec<u8> {
        self.pixels
    }

    pub fn get(&self, x: usize, y: usize) -> [u8; 3] {
        let o = (y * self.width + x) * 3;
        [self.pixels[o], self.pixels[o + 1], self.pixels[o + 2]]
    }

    pub fn put(&mut self, x: usize, y: usize, rgb: [u8; 3]) {
        let o = (y * self.width + x) * 3;
        self.pixels[o..o + 3].copy_from_slice(&rgb);
    }

    /// BT.601 luma, rounded to nearest.
    pub fn to_gray(&self) -> GrayImage {
        let pixels = self
            .pixels
            .chunks_exact(3)
            .map(|p| {
                let y = 0.299 * p[0] as f64 + 0.587 * p[1] as f64 + 0.114 * p[2] as f64;
                y.round().clamp(0.0, 255.0) as u8
            })
            .collect();
        GrayImage {
            width: self.width,
            height: self.height,
            pixels,
        }
    }

    /// `1 x 3 x H x W` tensor with samples mapped affinely onto `[-1, 1]`.
    pub fn to_tensor(&self) -> Tensor {
        let (w, h) = (self.width, self.height);
        let mut t = Tensor::zeros([1, 3, h, w]);
        for (i, px) in self.pixels.chunks_exact(3).enumerate() {
            let (y, x) = (i / w, i % w);
            for (c, &v) in px.iter().enumerate() {
                t.set(0, c, y, x, to_unit(v));
            }
        }
        t
    }

    /// Inverse of [`RgbImage::to_tensor`] for sample `n`, rounding and clamping.
    pub fn from_tensor(t: &Tensor, n: usize) -> Result<RgbImage> {
        if t.channels() != 3 {
            return Err(Error::Dimension {
                op: "RgbImage::from_tensor",
                axis: "channel",
                expected: 3,
                actual: t.channels(),
            });
        }
        let (h, w) = (t.height(), t.width());
        let mut img = RgbImage {
            width: w,
            height: h,
            pixels: vec![0; w * h * 3],
        };
        for y in 0..h {
            for x in 0..w {
                let rgb = [0, 1, 2].map(|c| from_unit(t.get(n, c, y, x)));
                img.put(x, y, rgb);
            }
        }
        Ok(img)
    }
}

impl Raster for RgbImage {
    fn width(&self) -> usize {
        self.width
    }
    fn height(&self) -> usize {
        self.height
    }
    fn channels(&self) -> usize {
        3
    }
    fn samples(&self) -> &[u8] {
        &self.pixels
    }
}

/// `[0, 255] -> [-1, 1]`.
pub fn to_unit(v: u8) -> f64 {
    2.0 * v as f64 / 255.0 - 1.0
}

/// `[-1, 1] -> [0, 255]`, rounded and clamped.
pub fn from_unit(v: f64) -> u8 {
    ((v + 1.0) * 127.5).round().clamp(0.0, 255.0) as u8
}
