//! Brute-force reference implementations shared by the oracle and
//! acceptance tests. Written for clarity, not speed, and independently of
//! the library code paths they check.
#![allow(dead_code)]

use lbp_inpaint::image::GrayImage;
use lbp_inpaint::Tensor;

/// Direct-loop convolution, weights `(F, C, k, k)`, zero padding.
pub fn conv_oracle(x: &Tensor, w: &Tensor, b: &Tensor, k: usize, s: usize, p: usize) -> Tensor {
    let [n, c, h, wd] = x.shape();
    let f = w.shape()[0];
    let oh = (h + 2 * p - k) / s + 1;
    let ow = (wd + 2 * p - k) / s + 1;
    let mut out = Tensor::zeros([n, f, oh, ow]);
    for ni in 0..n {
        for fi in 0..f {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = b.get(0, fi, 0, 0);
                    for ci in 0..c {
                        for i in 0..k {
                            for j in 0..k {
                                let iy = (oy * s + i) as isize - p as isize;
                                let ix = (ox * s + j) as isize - p as isize;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                    continue;
                                }
                                acc += x.get(ni, ci, iy as usize, ix as usize) * w.get(fi, ci, i, j);
                            }
                        }
                    }
                    out.set(ni, fi, oy, ox, acc);
                }
            }
        }
    }
    out
}

/// Scatter form of the transposed convolution, weights `(C_in, F, k, k)`.
pub fn deconv_oracle(x: &Tensor, w: &Tensor, b: &Tensor, k: usize, s: usize, p: usize) -> Tensor {
    let [n, c, h, wd] = x.shape();
    let f = w.shape()[1];
    let fh = (h - 1) * s + k;
    let fw = (wd - 1) * s + k;
    let mut full = Tensor::zeros([n, f, fh, fw]);
    for ni in 0..n {
        for ci in 0..c {
            for y in 0..h {
                for xx in 0..wd {
                    let v = x.get(ni, ci, y, xx);
                    for fi in 0..f {
                        for i in 0..k {
                            for j in 0..k {
                                let (ty, tx) = (y * s + i, xx * s + j);
                                let cur = full.get(ni, fi, ty, tx);
                                full.set(ni, fi, ty, tx, cur + v * w.get(ci, fi, i, j));
                            }
                        }
                    }
                }
            }
        }
    }
    let (oh, ow) = (fh - 2 * p, fw - 2 * p);
    let mut out = Tensor::zeros([n, f, oh, ow]);
    for ni in 0..n {
        for fi in 0..f {
            for y in 0..oh {
                for xx in 0..ow {
                    out.set(ni, fi, y, xx, full.get(ni, fi, y + p, xx + p) + b.get(0, fi, 0, 0));
                }
            }
        }
    }
    out
}

/// LBP by the definition: neighbours named explicitly, clamped at borders,
/// bit set when the neighbour is strictly brighter.
pub fn lbp_oracle(img: &GrayImage) -> Vec<u8> {
    let (w, h) = (img.width() as i64, img.height() as i64);
    let at = |x: i64, y: i64| img.get(x.clamp(0, w - 1) as usize, y.clamp(0, h - 1) as usize);
    let mut out = Vec::with_capacity((w * h) as usize);
    for y in 0..h {
        for x in 0..w {
            let c = at(x, y);
            let ring = [
                at(x - 1, y - 1), // top-left
                at(x, y - 1),     // top
                at(x + 1, y - 1), // top-right
                at(x + 1, y),     // right
                at(x + 1, y + 1), // bottom-right
                at(x, y + 1),     // bottom
                at(x - 1, y + 1), // bottom-left
                at(x - 1, y),     // left
            ];
            let mut code = 0u32;
            for (i, &n) in ring.iter().enumerate() {
                if n > c {
                    code += 1 << (7 - i);
                }
            }
            out.push(code as u8);
        }
    }
    out
}

/// One hole update as computed by the reference.
pub struct OracleUpdate {
    pub target: usize,
    /// `(position, weight)` for every selected source.
    pub sources: Vec<(usize, f64)>,
}

fn cosine_oracle(x: &Tensor, a: usize, b: usize) -> f64 {
    let [_, c, _, w] = x.shape();
    let v = |p: usize, ch: usize| x.get(0, ch, p / w, p % w);
    let (mut dot, mut na, mut nb) = (0.0, 0.0, 0.0);
    for ch in 0..c {
        dot += v(a, ch) * v(b, ch);
        na += v(a, ch) * v(a, ch);
        nb += v(b, ch) * v(b, ch);
    }
    dot / (na.sqrt() * nb.sqrt())
}

/// Full scan of cosine similarities, explicit top-T by sorting, explicit
/// softmax. `missing` holds one flag per feature position. With `dual`
/// false only known-region candidates are used.
pub fn attention_oracle(
    x: &Tensor,
    missing: &[bool],
    t: usize,
    dual: bool,
) -> (Tensor, Vec<OracleUpdate>) {
    let [_, c, h, w] = x.shape();
    let mut out = x.clone();
    let mut updates = Vec::new();
    for j in 0..h * w {
        if !missing[j] {
            continue;
        }
        let mut picked: Vec<(usize, f64)> = Vec::new();
        let mut best = |want_missing: bool| {
            let mut cands: Vec<(usize, f64)> = (0..h * w)
                .filter(|&k| missing[k] == want_missing && k != j)
                .map(|k| (k, cosine_oracle(x, j, k)))
                .collect();
            cands.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
            cands.truncate(t);
            picked.extend(cands);
        };
        if dual {
            best(true);
        }
        best(false);
        let z: f64 = picked.iter().map(|(_, s)| s.exp()).sum();
        let sources: Vec<(usize, f64)> = picked.iter().map(|&(k, s)| (k, s.exp() / z)).collect();
        for ch in 0..c {
            let v: f64 = sources
                .iter()
                .map(|&(k, wt)| wt * x.get(0, ch, k / w, k % w))
                .sum();
            out.set(0, ch, j / w, j % w, v);
        }
        updates.push(OracleUpdate { target: j, sources });
    }
    (out, updates)
}

/// SSIM of one channel by explicit 11x11 windows with 2-D Gaussian weights,
/// averaged over every fully contained window.
pub fn ssim_window_oracle(a: &[f64], b: &[f64], w: usize, h: usize) -> f64 {
    let (k, sigma) = (11usize, 1.5f64);
    let mut g = vec![0.0; k * k];
    let mid = (k as f64 - 1.0) / 2.0;
    for i in 0..k {
        for j in 0..k {
            let d2 = (i as f64 - mid).powi(2) + (j as f64 - mid).powi(2);
            g[i * k + j] = (-d2 / (2.0 * sigma * sigma)).exp();
        }
    }
    let gs: f64 = g.iter().sum();
    g.iter_mut().for_each(|v| *v /= gs);
    let c1 = (0.01f64 * 255.0).powi(2);
    let c2 = (0.03f64 * 255.0).powi(2);
    let mut total = 0.0;
    let mut count = 0usize;
    for y0 in 0..=h - k {
        for x0 in 0..=w - k {
            let (mut ma, mut mb) = (0.0, 0.0);
            for i in 0..k {
                for j in 0..k {
                    let p = (y0 + i) * w + x0 + j;
                    ma += g[i * k + j] * a[p];
                    mb += g[i * k + j] * b[p];
                }
            }
            let (mut va, mut vb, mut cov) = (0.0, 0.0, 0.0);
            for i in 0..k {
                for j in 0..k {
                    let p = (y0 + i) * w + x0 + j;
                    va += g[i * k + j] * (a[p] - ma).powi(2);
                    vb += g[i * k + j] * (b[p] - mb).powi(2);
                    cov += g[i * k + j] * (a[p] - ma) * (b[p] - mb);
                }
            }
            total += ((2.0 * ma * mb + c1) * (2.0 * cov + c2))
                / ((ma * ma + mb * mb + c1) * (va + vb + c2));
            count += 1;
        }
    }
    total / count as f64
}

pub fn max_abs_diff(a: &Tensor, b: &Tensor) -> f64 {
    assert_eq!(a.shape(), b.shape());
    a.data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}
