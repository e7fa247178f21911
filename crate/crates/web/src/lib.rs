//! Browser demo. The plain functions work on RGBA byte buffers as canvases
//! hand them out; the `wasm_bindgen` wrappers at the bottom expose them to
//! JavaScript.
//!
//! The attention demo runs the hole-filling attention directly on pixels:
//! the hole gets a smooth first guess, every pixel is described by its 3x3
//! neighbourhood, and each hole pixel is rebuilt from its best-matching
//! neighbourhoods.

use lbp_inpaint::attention::{plan, AttentionConfig, AttentionScope, PatchRegions, Region};
use lbp_inpaint::data::MaskPolicy;
use lbp_inpaint::image::{to_unit, from_unit, RgbImage};
use lbp_inpaint::lbp::extract_lbp;
use lbp_inpaint::mask::{missing_ratio, Mask, RatioBucket};
use lbp_inpaint::Tensor;
use wasm_bindgen::prelude::*;

/// Largest side accepted by the attention demo.
pub const MAX_ATTENTION_SIDE: usize = 128;
const SMOOTHING_SWEEPS: usize = 400;

fn check_rgba(rgba: &[u8], width: usize, height: usize) -> Result<(), String> {
    if width == 0 || height == 0 {
        return Err("image is empty".into());
    }
    if rgba.len() != width * height * 4 {
        return Err(format!(
            "expected {} RGBA bytes for {width}x{height}, got {}",
            width * height * 4,
            rgba.len()
        ));
    }
    Ok(())
}

fn rgb_from_rgba(rgba: &[u8], width: usize, height: usize) -> Result<RgbImage, String> {
    check_rgba(rgba, width, height)?;
    let rgb = rgba.chunks_exact(4).flat_map(|p| [p[0], p[1], p[2]]).collect();
    RgbImage::new(width, height, rgb).map_err(|e| e.to_string())
}

fn gray_to_rgba(gray: &[u8]) -> Vec<u8> {
    gray.iter().flat_map(|&g| [g, g, g, 255]).collect()
}

fn rgb_to_rgba(img: &RgbImage) -> Vec<u8> {
    img.pixels()
        .chunks_exact(3)
        .flat_map(|p| [p[0], p[1], p[2], 255])
        .collect()
}

/// Red channel `>= 128` is known.
fn mask_from_rgba(rgba: &[u8], width: usize, height: usize) -> Result<Mask, String> {
    check_rgba(rgba, width, height)?;
    let bits = rgba.chunks_exact(4).map(|p| u8::from(p[0] >= 128)).collect();
    Mask::new(width, height, bits).map_err(|e| e.to_string())
}

/// LBP code map of an RGBA image, as grayscale RGBA.
pub fn lbp_rgba(rgba: &[u8], width: usize, height: usize) -> Result<Vec<u8>, String> {
    let img = rgb_from_rgba(rgba, width, height)?;
    let map = extract_lbp(&img.to_gray()).map_err(|e| e.to_string())?;
    Ok(gray_to_rgba(map.codes()))
}

/// `kind` is `centering` with `param` the side, or `irregular` with
/// `param` a percentage band such as `20-30`.
pub fn mask_policy(kind: &str, param: &str) -> Result<MaskPolicy, String> {
    match kind {
        "centering" => param
            .trim()
            .parse()
            .map(|side| MaskPolicy::Centering { side })
            .map_err(|_| format!("bad hole side '{param}'")),
        "irregular" => {
            let (lo, hi) = param
                .trim()
                .trim_end_matches('%')
                .split_once('-')
                .ok_or_else(|| format!("bad band '{param}', expected LO-HI"))?;
            let lo = lo.trim().parse().map_err(|_| format!("bad band '{param}'"))?;
            let hi = hi.trim().parse().map_err(|_| format!("bad band '{param}'"))?;
            let bucket = RatioBucket::new(lo, hi).map_err(|e| e.to_string())?;
            Ok(MaskPolicy::Irregular { bucket })
        }
        _ => Err(format!("unknown mask kind '{kind}'")),
    }
}

/// White known, black missing.
pub fn mask_rgba(
    width: usize,
    height: usize,
    kind: &str,
    param: &str,
    seed: u64,
) -> Result<Vec<u8>, String> {
    let mask = mask_policy(kind, param)?
        .make(height, width, seed)
        .map_err(|e| e.to_string())?;
    Ok(gray_to_rgba(mask.to_image().pixels()))
}

pub fn mask_ratio(rgba: &[u8], width: usize, height: usize) -> Result<f64, String> {
    Ok(missing_ratio(&mask_from_rgba(rgba, width, height)?).0)
}

/// Hole pixels relaxed towards the mean of their four neighbours, starting
/// from the mean known colour. Known pixels stay fixed.
pub fn smooth_fill(img: &RgbImage, mask: &Mask) -> RgbImage {
    let (w, h) = (img.width(), img.height());
    let known = (0..w * h).filter(|&i| mask.is_known(i % w, i / w)).count();
    let mut mean = [0.0; 3];
    for y in 0..h {
        for x in 0..w {
            if mask.is_known(x, y) {
                let p = img.get(x, y);
                for c in 0..3 {
                    mean[c] += p[c] as f64 / known.max(1) as f64;
                }
            }
        }
    }
    let mut cur: Vec<[f64; 3]> = (0..w * h)
        .map(|i| {
            let (x, y) = (i % w, i / w);
            if mask.is_known(x, y) {
                img.get(x, y).map(f64::from)
            } else {
                mean
            }
        })
        .collect();
    let hole: Vec<usize> = (0..w * h).filter(|&i| !mask.is_known(i % w, i / w)).collect();
    for _ in 0..SMOOTHING_SWEEPS {
        for &i in &hole {
            let (x, y) = (i % w, i / w);
            let mut acc = [0.0; 3];
            let mut n = 0.0;
            for (dx, dy) in [(-1i64, 0i64), (1, 0), (0, -1), (0, 1)] {
                let (nx, ny) = (x as i64 + dx, y as i64 + dy);
                if nx >= 0 && ny >= 0 && (nx as usize) < w && (ny as usize) < h {
                    let q = cur[ny as usize * w + nx as usize];
                    for c in 0..3 {
                        acc[c] += q[c];
                    }
                    n += 1.0;
                }
            }
            cur[i] = acc.map(|a| a / n);
        }
    }
    RgbImage::from_fn(w, h, |x, y| cur[y * w + x].map(|v| v.round().clamp(0.0, 255.0) as u8))
}

/// 27-channel tensor: the 3x3 neighbourhood (edge-clamped) of every pixel,
/// channel `3 * k + c` for offset `k` and colour `c`.
pub fn neighbourhood_features(img: &RgbImage) -> Tensor {
    let (w, h) = (img.width(), img.height());
    let mut t = Tensor::zeros([1, 27, h, w]);
    for y in 0..h {
        for x in 0..w {
            for k in 0..9 {
                let sx = (x as i64 + k as i64 % 3 - 1).clamp(0, w as i64 - 1) as usize;
                let sy = (y as i64 + k as i64 / 3 - 1).clamp(0, h as i64 - 1) as usize;
                let p = img.get(sx, sy);
                for c in 0..3 {
                    t.set(0, 3 * k + c, y, x, to_unit(p[c]));
                }
            }
        }
    }
    t
}

/// One chosen source for a hole pixel.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SourcePixel {
    pub x: usize,
    pub y: usize,
    pub known: bool,
    pub weight: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AttentionFill {
    pub smoothed: RgbImage,
    pub filled: RgbImage,
    /// Sources per pixel, empty outside the hole.
    pub sources: Vec<Vec<SourcePixel>>,
}

pub fn attention_fill(
    img: &RgbImage,
    mask: &Mask,
    top_count: usize,
    scope: AttentionScope,
) -> Result<AttentionFill, String> {
    let (w, h) = (img.width(), img.height());
    if w > MAX_ATTENTION_SIDE || h > MAX_ATTENTION_SIDE {
        return Err(format!(
            "attention demo accepts at most {MAX_ATTENTION_SIDE}x{MAX_ATTENTION_SIDE}, got {w}x{h}"
        ));
    }
    if mask.width() != w || mask.height() != h {
        return Err("mask and image sizes differ".into());
    }
    let smoothed = smooth_fill(img, mask);
    let features = neighbourhood_features(&smoothed);
    let cfg = AttentionConfig {
        top_count,
        scope,
        ..AttentionConfig::default()
    };
    let regions = PatchRegions::from_mask(mask, h, w);
    let p = plan(&features, &[regions], &cfg).map_err(|e| e.to_string())?;
    let mut filled = smoothed.clone();
    let mut sources = vec![Vec::new(); w * h];
    for u in &p.samples[0] {
        let (tx, ty) = (u.target % w, u.target / w);
        let mut rgb = [0.0; 3];
        for s in &u.sources {
            let src = smoothed.get(s.position % w, s.position / w);
            for c in 0..3 {
                rgb[c] += s.weight * to_unit(src[c]);
            }
        }
        if !u.sources.is_empty() {
            filled.put(tx, ty, rgb.map(from_unit));
        }
        sources[u.target] = u
            .sources
            .iter()
            .map(|s| SourcePixel {
                x: s.position % w,
                y: s.position / w,
                known: s.region == Region::Known,
                weight: s.weight,
            })
            .collect();
    }
    Ok(AttentionFill {
        smoothed,
        filled,
        sources,
    })
}

fn parse_scope(scope: &str) -> Result<AttentionScope, String> {
    match scope {
        "dual" => Ok(AttentionScope::Dual),
        "known_only" => Ok(AttentionScope::KnownOnly),
        _ => Err(format!("unknown scope '{scope}'")),
    }
}

/// Filled image as RGBA.
pub fn attention_fill_rgba(
    rgba: &[u8],
    mask: &[u8],
    width: usize,
    height: usize,
    top_count: usize,
    scope: &str,
) -> Result<Vec<u8>, String> {
    let img = rgb_from_rgba(rgba, width, height)?;
    let m = mask_from_rgba(mask, width, height)?;
    let r = attention_fill(&img, &m, top_count, parse_scope(scope)?)?;
    Ok(rgb_to_rgba(&r.filled))
}

/// Sources of the pixel at `(x, y)` as `[x, y, known, weight]` quadruples.
#[allow(clippy::too_many_arguments)]
pub fn attention_sources(
    rgba: &[u8],
    mask: &[u8],
    width: usize,
    height: usize,
    top_count: usize,
    scope: &str,
    x: usize,
    y: usize,
) -> Result<Vec<f64>, String> {
    if x >= width || y >= height {
        return Err(format!("({x}, {y}) is outside the image"));
    }
    let img = rgb_from_rgba(rgba, width, height)?;
    let m = mask_from_rgba(mask, width, height)?;
    let r = attention_fill(&img, &m, top_count, parse_scope(scope)?)?;
    Ok(r.sources[y * width + x]
        .iter()
        .flat_map(|s| [s.x as f64, s.y as f64, f64::from(u8::from(s.known)), s.weight])
        .collect())
}

fn js(r: Result<Vec<u8>, String>) -> Result<Vec<u8>, JsError> {
    r.map_err(|e| JsError::new(&e))
}

#[wasm_bindgen(js_name = lbpMap)]
pub fn lbp_map(rgba: &[u8], width: u32, height: u32) -> Result<Vec<u8>, JsError> {
    js(lbp_rgba(rgba, width as usize, height as usize))
}

#[wasm_bindgen(js_name = generateMask)]
pub fn generate_mask(
    width: u32,
    height: u32,
    kind: &str,
    param: &str,
    seed: u32,
) -> Result<Vec<u8>, JsError> {
    js(mask_rgba(width as usize, height as usize, kind, param, seed as u64))
}

#[wasm_bindgen(js_name = missingRatio)]
pub fn missing_ratio_js(mask: &[u8], width: u32, height: u32) -> Result<f64, JsError> {
    mask_ratio(mask, width as usize, height as usize).map_err(|e| JsError::new(&e))
}

#[wasm_bindgen(js_name = attentionFill)]
pub fn attention_fill_js(
    rgba: &[u8],
    mask: &[u8],
    width: u32,
    height: u32,
    top_count: u32,
    scope: &str,
) -> Result<Vec<u8>, JsError> {
    js(attention_fill_rgba(
        rgba,
        mask,
        width as usize,
        height as usize,
        top_count as usize,
        scope,
    ))
}

#[allow(clippy::too_many_arguments)]
#[wasm_bindgen(js_name = attentionSources)]
pub fn attention_sources_js(
    rgba: &[u8],
    mask: &[u8],
    width: u32,
    height: u32,
    top_count: u32,
    scope: &str,
    x: u32,
    y: u32,
) -> Result<Vec<f64>, JsError> {
    attention_sources(
        rgba,
        mask,
        width as usize,
        height as usize,
        top_count as usize,
        scope,
        x as usize,
        y as usize,
    )
    .map_err(|e| JsError::new(&e))
}
