//! Binary hole masks: 1 marks a known pixel, 0 a missing one.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::image::GrayImage;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct Mask {
    width: usize,
    height: usize,
    bits: Vec<u8>,
}

impl Mask {
    pub fn new(width: usize, height: usize, bits: Vec<u8>) -> Result<Self> {
        if bits.len() != width * height {
            return Err(Error::Mask(format!(
                "{} bits for a {width}x{height} mask",
                bits.len()
            )));
        }
        if bits.iter().any(|&b| b > 1) {
            return Err(Error::Mask("mask values must be 0 or 1".into()));
        }
        if !bits.contains(&1) {
            return Err(Error::Mask("mask has no known pixel".into()));
        }
        Ok(Mask {
            width,
            height,
            bits,
        })
    }

    pub fn all_known(width: usize, height: usize) -> Self {
        Mask {
            width,
            height,
            bits: vec![1; width * height],
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn bits(&self) -> &[u8] {
        &self.bits
    }

    pub fn is_known(&self, x: usize, y: usize) -> bool {
        self.bits[y * self.width + x] == 1
    }

    pub fn missing_count(&self) -> usize {
        self.bits.iter().filter(|&&b| b == 0).count()
    }

    /// Nearest-neighbour resampling: target pixel `(r, c)` reads source pixel
    /// `(floor((r + 0.5) H / h), floor((c + 0.5) W / w))`. Returns per-pixel
    /// "missing" flags, since the result may have no known pixel.
    pub fn missing_at(&self, height: usize, width: usize) -> Vec<bool> {
        let mut out = Vec::with_capacity(height * width);
        for r in 0..height {
            let sy = ((2 * r + 1) * self.height) / (2 * height);
            for c in 0..width {
                let sx = ((2 * c + 1) * self.width) / (2 * width);
                out.push(self.bits[sy * self.width + sx] == 0);
            }
        }
        out
    }

    /// `1 x 1 x H x W` plane of 0/1 values.
    pub fn to_tensor(&self) -> Tensor {
        let data = self.bits.iter().map(|&b| b as f64).collect();
        Tensor::from_vec([1, 1, self.height, self.width], data).expect("extents match")
    }

    /// 255 for known, 0 for missing.
    pub fn to_image(&self) -> GrayImage {
        GrayImage::new(
            self.width,
            self.height,
            self.bits.iter().map(|&b| b * 255).collect(),
        )
        .expect("extents match")
    }

    /// Pixels `>= 128` are known.
    pub fn from_image(img: &GrayImage) -> Result<Self> {
        Mask::new(
            img.width(),
            img.height(),
            img.pixels().iter().map(|&p| u8::from(p >= 128)).collect(),
        )
    }
}

/// Band of missing-area percentages, `[lower, upper)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct RatioBucket {
    lower: u32,
    upper: u32,
}

impl RatioBucket {
    /// The bands used when reporting results by hole size.
    pub const STANDARD: [RatioBucket; 4] = [
        RatioBucket {
            lower: 10,
            upper: 20,
        },
        RatioBucket {
            lower: 20,
            upper: 30,
        },
        RatioBucket {
            lower: 30,
            upper: 40,
        },
        RatioBucket {
            lower: 40,
            upper: 50,
        },
    ];

    pub fn new(lower: u32, upper: u32) -> Result<Self> {
        if lower >= upper || upper > 100 {
            return Err(Error::Mask(format!(
                "invalid ratio bucket {lower}-{upper}%"
            )));
        }
        Ok(RatioBucket { lower, upper })
    }

    pub fn lower(&self) -> u32 {
        self.lower
    }

    pub fn upper(&self) -> u32 {
        self.upper
    }

    pub fn contains(&self, fraction: f64) -> bool {
        let pct = fraction * 100.0;
        pct >= self.lower as f64 && pct < self.upper as f64
    }
}

impl std::fmt::Display for RatioBucket {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}-{}%", self.lower, self.upper)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RatioClass {
    Bucket(RatioBucket),
    Other,
}

impl std::fmt::Display for RatioClass {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            RatioClass::Bucket(b) => b.fmt(f),
            RatioClass::Other => f.write_str("other"),
        }
    }
}

/// Square hole of `side` pixels; odd leftovers go to the bottom/right so the
/// square leans top-left.
pub fn centering_mask(height: usize, width: usize, side: usize) -> Result<Mask> {
    if side > height.min(width) {
        return Err(Error::Mask(format!(
            "hole side {side} exceeds image {height}x{width}"
        )));
    }
    let top = (height - side) / 2;
    let left = (width - side) / 2;
    let mut bits = vec![1u8; height * width];
    for y in top..top + side {
        bits[y * width + left..y * width + left + side].fill(0);
    }
    Mask::new(width, height, bits)
}

pub fn missing_ratio(mask: &Mask) -> (f64, RatioClass) {
    let fraction = mask.missing_count() as f64 / (mask.width * mask.height) as f64;
    let class = RatioBucket::STANDARD
        .into_iter()
        .find(|b| b.contains(fraction))
        .map_or(RatioClass::Other, RatioClass::Bucket);
    (fraction, class)
}

const MAX_ATTEMPTS: u32 = 64;
const MAX_STROKES: u32 = 96;
const STROKE_TRIES: u32 = 48;

/// Brush-stroke geometry at the 256-pixel reference size.
#[derive(Clone, Copy, Debug)]
struct StrokeStyle {
    min_vertices: u32,
    max_vertices: u32,
    min_thickness: f64,
    max_thickness: f64,
    min_step: f64,
    max_step: f64,
}

impl StrokeStyle {
    fn scaled(height: usize, width: usize) -> Self {
        let s = height.min(width) as f64 / 256.0;
        StrokeStyle {
            min_vertices: 10,
            max_vertices: 40,
            min_thickness: 4.0 * s,
            max_thickness: 18.0 * s,
            min_step: 6.0 * s,
            max_step: 20.0 * s,
        }
    }
}

/// Union of random-walk brush strokes whose missing fraction falls inside
/// `bucket`. Deterministic in `(height, width, seed, bucket)`.
pub fn irregular_mask(height: usize, width: usize, seed: u64, bucket: RatioBucket) -> Result<Mask> {
    if bucket.upper > 50 {
        return Err(Error::Mask(format!(
            "irregular masks cover at most 50% missing area, got {bucket}"
        )));
    }
    if height < 8 || width < 8 {
        return Err(Error::Mask(
            "irregular masks need at least 8x8 pixels".into(),
        ));
    }
    let total = (height * width) as f64;
    let style = StrokeStyle::scaled(height, width);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut stamp = vec![0u32; height * width];
    let mut stamp_id = 0u32;

    for _ in 0..MAX_ATTEMPTS {
        let mut missing = vec![false; height * width];
        let mut count = 0usize;
        let mut strokes = 0;
        let mut tries = 0;
        while strokes < MAX_STROKES && tries < STROKE_TRIES {
            tries += 1;
            stamp_id += 1;
            let added = draw_stroke(
                &mut rng, height, width, &style, &missing, &mut stamp, stamp_id,
            );
            let mut added = added;
            let frac = (count + added.len()) as f64 / total;
            if frac * 100.0 >= bucket.upper as f64 {
                if tries < STROKE_TRIES / 2 {
                    continue;
                }
                // Late in the attempt: keep the leading part of the stroke
                // that lands mid-bucket.
                let target = (total * (bucket.lower + bucket.upper) as f64 / 200.0) as usize;
                added.truncate(target.saturating_sub(count));
            }
            count += added.len();
            for i in added {
                missing[i] = true;
            }
            strokes += 1;
            if bucket.contains(count as f64 / total) {
                let bits = missing.iter().map(|&m| u8::from(!m)).collect();
                return Mask::new(width, height, bits);
            }
        }
    }
    Err(Error::Mask(format!(
        "could not reach bucket {bucket} after {MAX_ATTEMPTS} attempts"
    )))
}

/// Rasterises one stroke and returns the indices it would newly mark missing.
fn draw_stroke(
    rng: &mut ChaCha8Rng,
    height: usize,
    width: usize,
    style: &StrokeStyle,
    missing: &[bool],
    stamp: &mut [u32],
    id: u32,
) -> Vec<usize> {
    let vertices = rng.random_range(style.min_vertices..=style.max_vertices);
    let radius = rng.random_range(style.min_thickness..=style.max_thickness) / 2.0;
    let mut x = rng.random_range(0.0..width as f64);
    let mut y = rng.random_range(0.0..height as f64);
    let mut angle = rng.random_range(0.0..std::f64::consts::TAU);
    let mut added = Vec::new();
    for _ in 1..vertices {
        angle += rng.random_range(-0.8..0.8);
        let step = rng.random_range(style.min_step..=style.max_step);
        let nx = (x + step * angle.cos()).clamp(0.0, width as f64 - 1.0);
        let ny = (y + step * angle.sin()).clamp(0.0, height as f64 - 1.0);
        // Thick segment: every pixel centre within `radius` of the segment.
        let x0 = (x.min(nx) - radius).floor().max(0.0) as usize;
        let x1 = ((x.max(nx) + radius).ceil() as usize).min(width - 1);
        let y0 = (y.min(ny) - radius).floor().max(0.0) as usize;
        let y1 = ((y.max(ny) + radius).ceil() as usize).min(height - 1);
        let (dx, dy) = (nx - x, ny - y);
        let len2 = dx * dx + dy * dy;
        for py in y0..=y1 {
            for px in x0..=x1 {
                let (fx, fy) = (px as f64 + 0.5, py as f64 + 0.5);
                let t = if len2 > 0.0 {
                    (((fx - x) * dx + (fy - y) * dy) / len2).clamp(0.0, 1.0)
                } else {
                    0.0
                };
                let (ex, ey) = (x + t * dx - fx, y + t * dy - fy);
                if ex * ex + ey * ey <= radius * radius {
                    let i = py * width + px;
                    if !missing[i] && stamp[i] != id {
                        stamp[i] = id;
                        added.push(i);
                    }
                }
            }
        }
        x = nx;
        y = ny;
    }
    added
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn centering_hole_size() {
        let m = centering_mask(256, 256, 120).unwrap();
        assert_eq!(m.missing_count(), 14400);
    }

    #[test]
    fn full_hole_is_rejected() {
        assert!(centering_mask(4, 4, 4).is_err());
        assert!(centering_mask(4, 4, 5).is_err());
    }

    #[test]
    fn small_centering_grid() {
        let m = centering_mask(5, 5, 3).unwrap();
        for y in 0..5 {
            for x in 0..5 {
                let hole = (1..=3).contains(&y) && (1..=3).contains(&x);
                assert_eq!(m.is_known(x, y), !hole, "({x},{y})");
            }
        }
    }

    #[test]
    fn even_leftover_leans_top_left() {
        // 6 - 3 = 3 spare rows: 1 above, 2 below.
        let m = centering_mask(6, 6, 3).unwrap();
        assert!(!m.is_known(1, 1));
        assert!(m.is_known(0, 0));
        assert!(m.is_known(4, 4));
    }

    #[test]
    fn ratio_of_centering_mask() {
        let (frac, class) = missing_ratio(&centering_mask(256, 256, 120).unwrap());
        assert!((frac - 14400.0 / 65536.0).abs() < 1e-15);
        assert_eq!(class, RatioClass::Bucket(RatioBucket::new(20, 30).unwrap()));
        let (frac, class) = missing_ratio(&Mask::all_known(8, 8));
        assert_eq!(frac, 0.0);
        assert_eq!(class, RatioClass::Other);
    }

    #[test]
    fn mask_invariants() {
        assert!(Mask::new(2, 1, vec![0, 0]).is_err());
        assert!(Mask::new(2, 1, vec![1, 2]).is_err());
        assert!(Mask::new(2, 1, vec![1]).is_err());
    }

    #[test]
    fn irregular_is_seeded() {
        let b = RatioBucket::new(10, 20).unwrap();
        let a = irregular_mask(64, 64, 9, b).unwrap();
        assert_eq!(a, irregular_mask(64, 64, 9, b).unwrap());
        assert_ne!(a, irregular_mask(64, 64, 10, b).unwrap());
        assert!(b.contains(missing_ratio(&a).0));
    }

    #[test]
    fn irregular_rejects_large_buckets() {
        assert!(irregular_mask(64, 64, 0, RatioBucket::new(50, 60).unwrap()).is_err());
    }

    #[test]
    fn downsample_picks_nearest() {
        let m = centering_mask(64, 64, 16).unwrap();
        let small = m.missing_at(8, 8);
        let holes: Vec<usize> = (0..64).filter(|&i| small[i]).collect();
        assert_eq!(holes, vec![27, 28, 35, 36]);
    }
}
