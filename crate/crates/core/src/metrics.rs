//! Image similarity: cross-correlation, normalized cross-correlation and mean
//! structural similarity over uniform sliding windows.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum MetricError {
    #[error("dimension mismatch: {0} vs {1} values")]
    DimensionMismatch(usize, usize),
    #[error("image is constant; normalized correlation is undefined")]
    ConstantImage,
    #[error("window {window} larger than {w}x{h} image")]
    WindowTooLarge { window: usize, w: usize, h: usize },
    #[error("window must be odd and positive, got {0}")]
    InvalidWindow(usize),
}

pub const SSIM_C1: f64 = (0.01 * 255.0) * (0.01 * 255.0);
pub const SSIM_C2: f64 = (0.03 * 255.0) * (0.03 * 255.0);
pub const DEFAULT_WINDOW: usize = 11;

fn mean(a: &[f64]) -> f64 {
    a.iter().sum::<f64>() / a.len() as f64
}

fn check(a: &[f64], b: &[f64]) -> Result<(), MetricError> {
    if a.len() != b.len() || a.is_empty() {
        return Err(MetricError::DimensionMismatch(a.len(), b.len()));
    }
    Ok(())
}

/// `sum (a - mean a)(b - mean b)`.
pub fn ccr(a: &[f64], b: &[f64]) -> Result<f64, MetricError> {
    check(a, b)?;
    let (ma, mb) = (mean(a), mean(b));
    Ok(a.iter().zip(b).map(|(x, y)| (x - ma) * (y - mb)).sum())
}

pub fn ccr_norm(a: &[f64], b: &[f64]) -> Result<f64, MetricError> {
    check(a, b)?;
    let (ma, mb) = (mean(a), mean(b));
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        let (dx, dy) = (x - ma, y - mb);
        sab += dx * dy;
        saa += dx * dx;
        sbb += dy * dy;
    }
    if saa == 0.0 || sbb == 0.0 {
        return Err(MetricError::ConstantImage);
    }
    Ok((sab / (saa * sbb).sqrt()).clamp(-1.0, 1.0))
}

/// Summed-area table with a zero first row and column.
fn integral(v: &[f64], w: usize, h: usize) -> Vec<f64> {
    let mut s = vec![0.0; (w + 1) * (h + 1)];
    for y in 0..h {
        let mut row = 0.0;
        for x in 0..w {
            row += v[y * w + x];
            s[(y + 1) * (w + 1) + x + 1] = s[y * (w + 1) + x + 1] + row;
        }
    }
    s
}

fn box_sum(s: &[f64], w: usize, x: usize, y: usize, k: usize) -> f64 {
    let stride = w + 1;
    s[(y + k) * stride + x + k] - s[y * stride + x + k] - s[(y + k) * stride + x] + s[y * stride + x]
}

/// Mean SSIM over every `window x window` placement (stride 1, uniform
/// weights, population statistics).
pub fn mssim(a: &[f64], b: &[f64], w: usize, h: usize, window: usize) -> Result<f64, MetricError> {
    check(a, b)?;
    if a.len() != w * h {
        return Err(MetricError::DimensionMismatch(a.len(), w * h));
    }
    if window == 0 || window.is_multiple_of(2) {
        return Err(MetricError::InvalidWindow(window));
    }
    if window > w || window > h {
        return Err(MetricError::WindowTooLarge { window, w, h });
    }
    let prod = |f: &dyn Fn(f64, f64) -> f64| a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect::<Vec<_>>();
    let sa = integral(a, w, h);
    let sb = integral(b, w, h);
    let saa = integral(&prod(&|x, _| x * x), w, h);
    let sbb = integral(&prod(&|_, y| y * y), w, h);
    let sab = integral(&prod(&|x, y| x * y), w, h);
    let n = (window * window) as f64;
    let mut total = 0.0;
    let mut count = 0usize;
    for y in 0..=h - window {
        for x in 0..=w - window {
            let ma = box_sum(&sa, w, x, y, window) / n;
            let mb = box_sum(&sb, w, x, y, window) / n;
            let va = (box_sum(&saa, w, x, y, window) / n - ma * ma).max(0.0);
            let vb = (box_sum(&sbb, w, x, y, window) / n - mb * mb).max(0.0);
            let cov = box_sum(&sab, w, x, y, window) / n - ma * mb;
            total += ((2.0 * ma * mb + SSIM_C1) * (2.0 * cov + SSIM_C2))
                / ((ma * ma + mb * mb + SSIM_C1) * (va + vb + SSIM_C2));
            count += 1;
        }
    }
    Ok(total / count as f64)
}

/// Intersection over union of two boolean masks; 1 when both are empty.
pub fn jaccard(a: &[bool], b: &[bool]) -> f64 {
    let inter = a.iter().zip(b).filter(|(x, y)| **x && **y).count();
    let union = a.iter().zip(b).filter(|(x, y)| **x || **y).count();
    if union == 0 {
        1.0
    } else {
        inter as f64 / union as f64
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimilarityReport {
    pub ccr: f64,
    pub ccr_norm: f64,
    pub mssim: f64,
    pub window: usize,
}

pub fn similarity(a: &[f64], b: &[f64], w: usize, h: usize) -> Result<SimilarityReport, MetricError> {
    Ok(SimilarityReport {
        ccr: ccr(a, b)?,
        ccr_norm: ccr_norm(a, b)?,
        mssim: mssim(a, b, w, h, DEFAULT_WINDOW)?,
        window: DEFAULT_WINDOW,
    })
}
