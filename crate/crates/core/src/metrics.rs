//! Image quality metrics on 8-bit rasters: mean absolute error as a
//! percentage of full scale, PSNR and SSIM.

use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::image::Raster;
use crate::mask::Mask;

pub const PEAK: f64 = 255.0;
pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;

pub fn ssim_c1() -> f64 {
    (SSIM_K1 * PEAK).powi(2)
}

pub fn ssim_c2() -> f64 {
    (SSIM_K2 * PEAK).powi(2)
}

/// Which pixels a metric is computed over.
#[derive(Clone, Copy, Debug)]
pub enum Scope<'a> {
    Full,
    /// Only the missing pixels of the mask. For SSIM, windows centred on a
    /// missing pixel.
    Hole(&'a Mask),
}

fn check_pair(a: &dyn Raster, b: &dyn Raster, op: &str) -> Result<()> {
    let (sa, sb) = (
        [1, a.channels(), a.height(), a.width()],
        [1, b.channels(), b.height(), b.width()],
    );
    if sa != sb {
        return Err(Error::Shape {
            op: op.to_string(),
            left: sa,
            right: sb,
        });
    }
    Ok(())
}

fn check_mask(img: &dyn Raster, scope: Scope<'_>) -> Result<()> {
    if let Scope::Hole(m) = scope {
        if m.width() != img.width() || m.height() != img.height() {
            return Err(Error::Mask(format!(
                "mask is {}x{} but image is {}x{}",
                m.width(),
                m.height(),
                img.width(),
                img.height()
            )));
        }
        if m.missing_count() == 0 {
            return Err(Error::Mask(
                "hole-only metric on a mask without a hole".into(),
            ));
        }
    }
    Ok(())
}

/// Absolute differences over the selected samples.
fn abs_diffs(a: &dyn Raster, b: &dyn Raster, scope: Scope<'_>) -> Vec<f64> {
    let c = a.channels();
    let w = a.width();
    a.samples()
        .iter()
        .zip(b.samples())
        .enumerate()
        .filter(|(i, _)| match scope {
            Scope::Full => true,
            Scope::Hole(m) => {
                let p = i / c;
                !m.is_known(p % w, p / w)
            }
        })
        .map(|(_, (&x, &y))| (x as f64 - y as f64).abs())
        .collect()
}

/// `100 * mean|a - b| / 255`.
pub fn l1_percent(a: &dyn Raster, b: &dyn Raster) -> Result<f64> {
    l1_percent_in(a, b, Scope::Full)
}

pub fn l1_percent_in(a: &dyn Raster, b: &dyn Raster, scope: Scope<'_>) -> Result<f64> {
    check_pair(a, b, "l1_percent")?;
    check_mask(a, scope)?;
    let d = abs_diffs(a, b, scope);
    let total: u64 = d.iter().map(|&v| v as u64).sum();
    Ok(100.0 * total as f64 / (d.len() as f64 * PEAK))
}

/// `10 log10(255^2 / MSE)`, `f64::INFINITY` when the images are identical.
pub fn psnr(a: &dyn Raster, b: &dyn Raster) -> Result<f64> {
    psnr_in(a, b, Scope::Full)
}

pub fn psnr_in(a: &dyn Raster, b: &dyn Raster, scope: Scope<'_>) -> Result<f64> {
    check_pair(a, b, "psnr")?;
    check_mask(a, scope)?;
    let d = abs_diffs(a, b, scope);
    let sq: u64 = d.iter().map(|&v| (v as u64) * (v as u64)).sum();
    if sq == 0 {
        return Ok(f64::INFINITY);
    }
    let mse = sq as f64 / d.len() as f64;
    Ok(10.0 * (PEAK * PEAK / mse).log10())
}

/// Normalised 1-D Gaussian taps.
pub fn gaussian_taps(size: usize, sigma: f64) -> Vec<f64> {
    let mid = (size as f64 - 1.0) / 2.0;
    let raw: Vec<f64> = (0..size)
        .map(|i| (-((i as f64 - mid).powi(2)) / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f64 = raw.iter().sum();
    raw.into_iter().map(|v| v / s).collect()
}

/// Valid-mode separable filtering of a `w x h` plane.
fn filter_valid(plane: &[f64], w: usize, h: usize, taps: &[f64]) -> Vec<f64> {
    let k = taps.len();
    let (ow, oh) = (w - k + 1, h - k + 1);
    let mut rows = vec![0.0; ow * h];
    for y in 0..h {
        for x in 0..ow {
            rows[y * ow + x] = taps
                .iter()
                .enumerate()
                .map(|(i, t)| t * plane[y * w + x + i])
                .sum();
        }
    }
    let mut out = vec![0.0; ow * oh];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = taps
                .iter()
                .enumerate()
                .map(|(i, t)| t * rows[(y + i) * ow + x])
                .sum();
        }
    }
    out
}

/// Local SSIM map of one channel over valid 11x11 windows.
fn ssim_map(a: &[f64], b: &[f64], w: usize, h: usize) -> Vec<f64> {
    let taps = gaussian_taps(SSIM_WINDOW, SSIM_SIGMA);
    let prod = |x: &[f64], y: &[f64]| x.iter().zip(y).map(|(p, q)| p * q).collect::<Vec<_>>();
    let mu_a = filter_valid(a, w, h, &taps);
    let mu_b = filter_valid(b, w, h, &taps);
    let aa = filter_valid(&prod(a, a), w, h, &taps);
    let bb = filter_valid(&prod(b, b), w, h, &taps);
    let ab = filter_valid(&prod(a, b), w, h, &taps);
    let (c1, c2) = (ssim_c1(), ssim_c2());
    (0..mu_a.len())
        .map(|i| {
            let (ma, mb) = (mu_a[i], mu_b[i]);
            let va = aa[i] - ma * ma;
            let vb = bb[i] - mb * mb;
            let cov = ab[i] - ma * mb;
            ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2))
        })
        .collect()
}

/// Mean local SSIM, averaged over channels.
pub fn ssim(a: &dyn Raster, b: &dyn Raster) -> Result<f64> {
    ssim_in(a, b, Scope::Full)
}

pub fn ssim_in(a: &dyn Raster, b: &dyn Raster, scope: Scope<'_>) -> Result<f64> {
    check_pair(a, b, "ssim")?;
    check_mask(a, scope)?;
    let (w, h, c) = (a.width(), a.height(), a.channels());
    if w < SSIM_WINDOW || h < SSIM_WINDOW {
        return Err(Error::invalid(format!(
            "ssim needs at least {SSIM_WINDOW}x{SSIM_WINDOW}, got {w}x{h}"
        )));
    }
    let half = SSIM_WINDOW / 2;
    let ow = w - SSIM_WINDOW + 1;
    let keep = |i: usize| match scope {
        Scope::Full => true,
        Scope::Hole(m) => !m.is_known(i % ow + half, i / ow + half),
    };
    let mut total = 0.0;
    for ch in 0..c {
        let plane = |r: &dyn Raster| -> Vec<f64> {
            r.samples()
                .iter()
                .skip(ch)
                .step_by(c)
                .map(|&v| v as f64)
                .collect()
        };
        let map = ssim_map(&plane(a), &plane(b), w, h);
        let picked: Vec<f64> = map
            .iter()
            .enumerate()
            .filter(|(i, _)| keep(*i))
            .map(|(_, &v)| v)
            .collect();
        if picked.is_empty() {
            return Err(Error::Mask("no SSIM window is centred in the hole".into()));
        }
        total += picked.iter().sum::<f64>() / picked.len() as f64;
    }
    Ok(total / c as f64)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MetricReport {
    pub l1_percent: f64,
    /// `f64::INFINITY` for identical images.
    pub psnr_db: f64,
    pub ssim: f64,
}

impl MetricReport {
    pub fn compute(output: &dyn Raster, truth: &dyn Raster, scope: Scope<'_>) -> Result<Self> {
        Ok(MetricReport {
            l1_percent: l1_percent_in(output, truth, scope)?,
            psnr_db: psnr_in(output, truth, scope)?,
            ssim: ssim_in(output, truth, scope)?,
        })
    }

    pub const CSV_HEADER: &'static str = "name,l1_percent,psnr_db,ssim";

    pub fn csv_row(&self, name: &str) -> String {
        format!(
            "{name},{:.6},{},{:.6}",
            self.l1_percent,
            fmt_psnr(self.psnr_db),
            self.ssim
        )
    }
}

fn fmt_psnr(v: f64) -> String {
    if v.is_infinite() {
        "inf".into()
    } else {
        format!("{v:.4}")
    }
}

/// Header plus one row per named report.
pub fn reports_csv(rows: &[(String, MetricReport)]) -> String {
    let mut s = String::from(MetricReport::CSV_HEADER);
    s.push('\n');
    for (name, r) in rows {
        s.push_str(&r.csv_row(name));
        s.push('\n');
    }
    s
}

/// Fixed-width table for terminals.
pub fn reports_table(rows: &[(String, MetricReport)]) -> String {
    let width = rows.iter().map(|(n, _)| n.len()).max().unwrap_or(4).max(4);
    let mut s = format!(
        "{:<width$}  {:>9}  {:>10}  {:>8}\n",
        "name", "l1 (%)", "PSNR (dB)", "SSIM"
    );
    for (name, r) in rows {
        let _ = writeln!(
            s,
            "{:<width$}  {:>9.4}  {:>10}  {:>8.4}",
            name,
            r.l1_percent,
            fmt_psnr(r.psnr_db),
            r.ssim
        );
    }
    s
}
