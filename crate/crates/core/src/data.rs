//! Training samples: seeded synthetic textures, mask policies and the
//! tensors each network consumes.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::image::RgbImage;
use crate::lbp::{encode_plane, extract_lbp};
use crate::mask::{centering_mask, irregular_mask, Mask, RatioBucket};
use crate::tensor::Tensor;

/// SplitMix64 finaliser over `seed ^ stream`; used to derive independent
/// seeds from one user seed.
pub fn mix_seed(seed: u64, stream: u64) -> u64 {
    let mut z = seed ^ stream.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub image: RgbImage,
    pub mask: Mask,
}

/// Indexed, deterministic sample stream.
pub trait SampleSource {
    fn sample(&self, index: u64) -> Result<Sample>;
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MaskPolicy {
    Centering { side: usize },
    Irregular { bucket: RatioBucket },
}

impl MaskPolicy {
    pub fn make(&self, height: usize, width: usize, seed: u64) -> Result<Mask> {
        match *self {
            MaskPolicy::Centering { side } => centering_mask(height, width, side),
            MaskPolicy::Irregular { bucket } => irregular_mask(height, width, seed, bucket),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TextureKind {
    Stripes,
    Checker,
    Waves,
    Gradient,
}

impl TextureKind {
    pub const ALL: [TextureKind; 4] = [
        TextureKind::Stripes,
        TextureKind::Checker,
        TextureKind::Waves,
        TextureKind::Gradient,
    ];
}

fn random_color(rng: &mut ChaCha8Rng) -> [f64; 3] {
    [0, 1, 2].map(|_| rng.random_range(0.0..255.0))
}

fn blend(a: [f64; 3], b: [f64; 3], t: f64) -> [u8; 3] {
    [0, 1, 2].map(|c| (a[c] + (b[c] - a[c]) * t).round().clamp(0.0, 255.0) as u8)
}

/// One procedurally generated `size x size` texture.
pub fn synthetic_texture(size: usize, kind: TextureKind, seed: u64) -> RgbImage {
    use std::f64::consts::TAU;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (c1, c2) = (random_color(&mut rng), random_color(&mut rng));
    let theta = rng.random_range(0.0..TAU);
    let (dx, dy) = (theta.cos(), theta.sin());
    match kind {
        TextureKind::Stripes => {
            let period = rng.random_range(6.0..16.0);
            let phase = rng.random_range(0.0..TAU);
            RgbImage::from_fn(size, size, |x, y| {
                let u = (x as f64 * dx + y as f64 * dy) / period;
                blend(c1, c2, 0.5 + 0.5 * (TAU * u + phase).sin())
            })
        }
        TextureKind::Checker => {
            let cell = rng.random_range(4..13usize);
            RgbImage::from_fn(size, size, |x, y| {
                blend(c1, c2, ((x / cell + y / cell) % 2) as f64)
            })
        }
        TextureKind::Waves => {
            let p1 = rng.random_range(8.0..24.0);
            let p2 = rng.random_range(8.0..24.0);
            RgbImage::from_fn(size, size, |x, y| {
                let a = (TAU * (x as f64 * dx + y as f64 * dy) / p1).sin();
                let b = (TAU * (y as f64 * dx - x as f64 * dy) / p2).sin();
                blend(c1, c2, 0.5 + 0.25 * (a + b))
            })
        }
        TextureKind::Gradient => {
            let span = size as f64 * (dx.abs() + dy.abs());
            let x0 = if dx < 0.0 { -(size as f64) * dx } else { 0.0 };
            let y0 = if dy < 0.0 { -(size as f64) * dy } else { 0.0 };
            RgbImage::from_fn(size, size, |x, y| {
                let t = ((x as f64 * dx + x0) + (y as f64 * dy + y0)) / span;
                blend(c1, c2, t.clamp(0.0, 1.0))
            })
        }
    }
}

/// Stripes, checkerboards, waves and gradients at a fixed size.
#[derive(Clone, Debug)]
pub struct SyntheticTextures {
    pub size: usize,
    pub seed: u64,
    pub mask: MaskPolicy,
}

impl SampleSource for SyntheticTextures {
    fn sample(&self, index: u64) -> Result<Sample> {
        let s = mix_seed(self.seed, index);
        let kind = TextureKind::ALL[(s % 4) as usize];
        Ok(Sample {
            image: synthetic_texture(self.size, kind, s),
            mask: self.mask.make(self.size, self.size, mix_seed(s, 1))?,
        })
    }
}

/// The same sample at every index.
#[derive(Clone, Debug)]
pub struct Repeated(pub Sample);

impl SampleSource for Repeated {
    fn sample(&self, _index: u64) -> Result<Sample> {
        Ok(self.0.clone())
    }
}

/// Copy of `image` with every missing pixel set to white.
pub fn fill_hole_white(image: &RgbImage, mask: &Mask) -> RgbImage {
    RgbImage::from_fn(image.width(), image.height(), |x, y| {
        if mask.is_known(x, y) {
            image.get(x, y)
        } else {
            [255; 3]
        }
    })
}

/// Network-ready tensors for one sample, all batch 1 on `[-1, 1]` except the
/// 0/1 mask plane.
#[derive(Clone, Debug)]
pub struct Prepared {
    pub mask: Mask,
    /// `I_g`
    pub image_gt: Tensor,
    /// `I_i`: hole filled white.
    pub image_in: Tensor,
    /// `L_g`: LBP of the ground truth.
    pub lbp_gt: Tensor,
    /// `L_i`: LBP of the white-filled input.
    pub lbp_in: Tensor,
    /// `M`: 1 known, 0 missing.
    pub mask_plane: Tensor,
}

impl Prepared {
    pub fn new(sample: &Sample) -> Result<Self> {
        let img = &sample.image;
        let m = &sample.mask;
        if m.width() != img.width() || m.height() != img.height() {
            return Err(Error::Mask(format!(
                "mask is {}x{} but image is {}x{}",
                m.width(),
                m.height(),
                img.width(),
                img.height()
            )));
        }
        let filled = fill_hole_white(img, m);
        Ok(Prepared {
            mask: m.clone(),
            image_gt: img.to_tensor(),
            image_in: filled.to_tensor(),
            lbp_gt: encode_plane(&extract_lbp(&img.to_gray())?),
            lbp_in: encode_plane(&extract_lbp(&filled.to_gray())?),
            mask_plane: m.to_tensor(),
        })
    }

    /// `(L_i, M)`.
    pub fn lbp_input(&self) -> Tensor {
        Tensor::concat_channels(&self.lbp_in, &self.mask_plane).expect("same extent")
    }
}
