//! Image quality metrics and method comparison reports.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{NeoError, Result};
use crate::image::ImageBuffer;

pub const PSNR_CAP: f64 = 99.0;
pub const REPORT_VERSION: u32 = 1;

const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;
const K1: f64 = 0.01;
const K2: f64 = 0.03;

fn check_pair(a: &ImageBuffer, b: &ImageBuffer, mask: Option<&[bool]>) -> Result<()> {
    if a.dims() != b.dims() {
        return Err(NeoError::InvalidArgument(format!(
            "image sizes differ: {:?} vs {:?}",
            a.dims(),
            b.dims()
        )));
    }
    if let Some(m) = mask {
        if m.len() != a.width() * a.height() {
            return Err(NeoError::InvalidArgument("mask size does not match image".into()));
        }
        if !m.iter().any(|v| *v) {
            return Err(NeoError::InvalidArgument("mask is empty".into()));
        }
    }
    Ok(())
}

/// Peak signal-to-noise ratio in dB over the masked pixels, capped at 99 dB.
pub fn psnr(a: &ImageBuffer, b: &ImageBuffer, mask: Option<&[bool]>) -> Result<f64> {
    check_pair(a, b, mask)?;
    let mut sum = 0.0;
    let mut n = 0usize;
    for (i, (pa, pb)) in a.data().chunks_exact(3).zip(b.data().chunks_exact(3)).enumerate() {
        if mask.is_some_and(|m| !m[i]) {
            continue;
        }
        for k in 0..3 {
            let d = pa[k] as f64 - pb[k] as f64;
            sum += d * d;
        }
        n += 3;
    }
    let mse = sum / n as f64;
    if mse == 0.0 {
        return Ok(PSNR_CAP);
    }
    Ok((10.0 * (1.0 / mse).log10()).min(PSNR_CAP))
}

fn gaussian_window() -> Vec<f64> {
    let r = (SSIM_WINDOW / 2) as f64;
    let g: Vec<f64> = (0..SSIM_WINDOW)
        .map(|i| (-((i as f64 - r).powi(2)) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp())
        .collect();
    let s: f64 = g.iter().sum();
    let g: Vec<f64> = g.iter().map(|v| v / s).collect();
    let mut w = Vec::with_capacity(SSIM_WINDOW * SSIM_WINDOW);
    for gy in &g {
        for gx in &g {
            w.push(gy * gx);
        }
    }
    w
}

/// Single-scale SSIM with an 11×11 Gaussian window (σ = 1.5) over window centers that
/// keep the window inside the image, averaged over channels and centers. With a mask,
/// only centers inside the mask count.
pub fn ssim(a: &ImageBuffer, b: &ImageBuffer, mask: Option<&[bool]>) -> Result<f64> {
    check_pair(a, b, mask)?;
    let (w, h) = a.dims();
    if w < SSIM_WINDOW || h < SSIM_WINDOW {
        return Err(NeoError::InvalidArgument(format!(
            "SSIM needs at least {SSIM_WINDOW}x{SSIM_WINDOW} pixels, got {w}x{h}"
        )));
    }
    let win = gaussian_window();
    let c1 = K1 * K1;
    let c2 = K2 * K2;
    let r = SSIM_WINDOW / 2;
    let (da, db) = (a.data(), b.data());
    let mut total = 0.0;
    let mut count = 0usize;
    for cy in r..h - r {
        for cx in r..w - r {
            if mask.is_some_and(|m| !m[cy * w + cx]) {
                continue;
            }
            for ch in 0..3 {
                let (mut ma, mut mb, mut saa, mut sbb, mut sab) = (0.0, 0.0, 0.0, 0.0, 0.0);
                for wy in 0..SSIM_WINDOW {
                    let row = (cy + wy - r) * w + cx - r;
                    for wx in 0..SSIM_WINDOW {
                        let g = win[wy * SSIM_WINDOW + wx];
                        let x = da[(row + wx) * 3 + ch] as f64;
                        let y = db[(row + wx) * 3 + ch] as f64;
                        ma += g * x;
                        mb += g * y;
                        saa += g * x * x;
                        sbb += g * y * y;
                        sab += g * x * y;
                    }
                }
                let va = saa - ma * ma;
                let vb = sbb - mb * mb;
                let cov = sab - ma * mb;
                total += ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
                count += 1;
            }
        }
    }
    if count == 0 {
        return Err(NeoError::InvalidArgument("no SSIM window center inside the mask".into()));
    }
    Ok(total / count as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Stat {
    pub mean: f64,
    pub std: f64,
}

impl Stat {
    pub fn of(values: &[f64]) -> Stat {
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        Stat { mean, std: var.sqrt() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodRow {
    pub method: String,
    pub count: usize,
    pub psnr_band: Stat,
    pub ssim_band: Stat,
    pub psnr_full: Stat,
    pub ssim_full: Stat,
    /// Reserved for externally computed perceptual scores.
    pub lpips: Option<f64>,
}

/// Per-image PSNR/SSIM on the full image and on the `band` pixels, aggregated.
pub fn evaluate_method(method: &str, outputs: &[ImageBuffer], truths: &[ImageBuffer], band: &[bool]) -> Result<MethodRow> {
    if outputs.len() != truths.len() {
        return Err(NeoError::InvalidArgument(format!(
            "{} outputs for {} ground truths",
            outputs.len(),
            truths.len()
        )));
    }
    if outputs.is_empty() {
        return Err(NeoError::InvalidArgument("no images to evaluate".into()));
    }
    let mut cols: [Vec<f64>; 4] = Default::default();
    for (o, t) in outputs.iter().zip(truths) {
        cols[0].push(psnr(o, t, Some(band))?);
        cols[1].push(ssim(o, t, Some(band))?);
        cols[2].push(psnr(o, t, None)?);
        cols[3].push(ssim(o, t, None)?);
    }
    Ok(MethodRow {
        method: method.to_string(),
        count: outputs.len(),
        psnr_band: Stat::of(&cols[0]),
        ssim_band: Stat::of(&cols[1]),
        psnr_full: Stat::of(&cols[2]),
        ssim_full: Stat::of(&cols[3]),
        lpips: None,
    })
}

/// Mask that is true outside the centered `inner_w`×`inner_h` region.
pub fn band_mask(width: usize, height: usize, inner_w: usize, inner_h: usize) -> Vec<bool> {
    let (x0, y0) = ((width - inner_w) / 2, (height - inner_h) / 2);
    (0..width * height)
        .map(|i| {
            let (x, y) = (i % width, i / width);
            !(x >= x0 && x < x0 + inner_w && y >= y0 && y < y0 + inner_h)
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub version: u32,
    pub config_hash: String,
    pub rows: Vec<MethodRow>,
}

impl MetricReport {
    pub fn new(config_hash: &str, rows: Vec<MethodRow>) -> Result<Self> {
        if rows.is_empty() {
            return Err(NeoError::InvalidArgument("report needs at least one row".into()));
        }
        if rows.iter().any(|r| r.count == 0 || !r.psnr_band.mean.is_finite() || !r.ssim_band.mean.is_finite()) {
            return Err(NeoError::InvalidArgument("report rows need a count and finite means".into()));
        }
        Ok(MetricReport {
            version: REPORT_VERSION,
            config_hash: config_hash.to_string(),
            rows,
        })
    }

    pub fn row(&self, method: &str) -> Option<&MethodRow> {
        self.rows.iter().find(|r| r.method == method)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let r: MetricReport =
            serde_json::from_str(s).map_err(|e| NeoError::InvalidArgument(format!("bad report json: {e}")))?;
        MetricReport::new(&r.config_hash, r.rows)
    }

    /// Markdown table, one row per method, band columns first.
    pub fn to_markdown(&self, title: &str) -> String {
        let mut s = format!("# {title}\n\n");
        s.push_str("| Method | PSNR↑ (band) | SSIM↑ (band) | PSNR↑ (full) | SSIM↑ (full) | LPIPS↓ | N |\n");
        s.push_str("|---|---|---|---|---|---|---|\n");
        for r in &self.rows {
            let lp = r.lpips.map_or("n/a".to_string(), |v| format!("{v:.4}"));
            let _ = writeln!(
                s,
                "| {} | {:.2} ± {:.2} | {:.4} ± {:.4} | {:.2} ± {:.2} | {:.4} ± {:.4} | {} | {} |",
                r.method,
                r.psnr_band.mean,
                r.psnr_band.std,
                r.ssim_band.mean,
                r.ssim_band.std,
                r.psnr_full.mean,
                r.psnr_full.std,
                r.ssim_full.mean,
                r.ssim_full.std,
                lp,
                r.count
            );
        }
        s.push_str(&format!("\nconfig hash: `{}`\n", self.config_hash));
        s
    }
}
