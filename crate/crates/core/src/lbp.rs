//! 3x3 local binary patterns.
//!
//! Each pixel is compared against its eight neighbours, visited clockwise
//! from the top-left:
//!
//! ```text
//! b1 b2 b3
//! b8  I b4
//! b7 b6 b5
//! ```
//!
//! `b_i` is 0 when the neighbour is `<=` the centre and 1 otherwise; `b1` is
//! the most significant bit. Borders replicate the edge pixels so the map has
//! the same extent as the image.

use crate::error::{Error, Result};
use crate::image::GrayImage;
use crate::tensor::Tensor;

/// `(dx, dy)` offsets in bit order, most significant first.
pub const NEIGHBOR_OFFSETS: [(isize, isize); 8] = [
    (-1, -1),
    (0, -1),
    (1, -1),
    (1, 0),
    (1, 1),
    (0, 1),
    (-1, 1),
    (-1, 0),
];

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LbpMap {
    width: usize,
    height: usize,
    codes: Vec<u8>,
}

impl LbpMap {
    pub fn new(width: usize, height: usize, codes: Vec<u8>) -> Result<Self> {
        if codes.len() != width * height {
            return Err(Error::Dimension {
                op: "LbpMap::new",
                axis: "codes",
                expected: width * height,
                actual: codes.len(),
            });
        }
        Ok(LbpMap {
            width,
            height,
            codes,
        })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn codes(&self) -> &[u8] {
        &self.codes
    }

    pub fn get(&self, x: usize, y: usize) -> u8 {
        self.codes[y * self.width + x]
    }

    /// The codes as an 8-bit grayscale image.
    pub fn to_image(&self) -> GrayImage {
        GrayImage::new(self.width, self.height, self.codes.clone())
            .expect("extents match by construction")
    }
}

pub fn extract_lbp(img: &GrayImage) -> Result<LbpMap> {
    let (w, h) = (img.width(), img.height());
    if w < 3 || h < 3 {
        return Err(Error::invalid(format!(
            "LBP needs at least a 3x3 image, got {w}x{h}"
        )));
    }
    let px = img.pixels();
    let mut codes = vec![0u8; w * h];
    for y in 0..h {
        // Replicated rows above/below.
        let rows = [y.saturating_sub(1), y, (y + 1).min(h - 1)];
        for x in 0..w {
            let cols = [x.saturating_sub(1), x, (x + 1).min(w - 1)];
            let center = px[y * w + x];
            let mut code = 0u8;
            for &(dx, dy) in &NEIGHBOR_OFFSETS {
                let n = px[rows[(dy + 1) as usize] * w + cols[(dx + 1) as usize]];
                code = (code << 1) | u8::from(n > center);
            }
            codes[y * w + x] = code;
        }
    }
    Ok(LbpMap {
        width: w,
        height: h,
        codes,
    })
}

/// `1 x 1 x H x W` plane with codes mapped affinely from `[0, 255]` to `[-1, 1]`.
pub fn encode_plane(map: &LbpMap) -> Tensor {
    let data = map
        .codes
        .iter()
        .map(|&c| crate::image::to_unit(c))
        .collect();
    Tensor::from_vec([1, 1, map.height, map.width], data).expect("extents match")
}

/// Inverse of [`encode_plane`] for the `(n, c)` plane, rounding to the
/// nearest code.
pub fn decode_plane(t: &Tensor, n: usize, c: usize) -> LbpMap {
    let codes = t
        .plane(n, c)
        .iter()
        .map(|&v| crate::image::from_unit(v))
        .collect();
    LbpMap {
        width: t.width(),
        height: t.height(),
        codes,
    }
}
