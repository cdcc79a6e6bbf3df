//! Image and depth quality metrics: PSNR, single-scale SSIM, and masked
//! L1 depth error.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::img::{check_same_shape, DepthMap, Image};

/// Peak signal-to-noise ratio in dB over all RGB values (unit range).
/// Identical images are capped at 99 dB.
pub fn psnr(a: &Image, b: &Image) -> Result<f64> {
    check_same_shape(a, b)?;
    let n = a.data.len() as f64;
    let mse: f64 = a
        .data
        .iter()
        .zip(&b.data)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        / n;
    if mse <= 0.0 {
        return Ok(99.0);
    }
    Ok((-10.0 * mse.log10()).min(99.0))
}

const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;
const SSIM_K1: f64 = 0.01;
const SSIM_K2: f64 = 0.03;

fn luma(img: &Image) -> Vec<f64> {
    let mut out = Vec::with_capacity((img.width * img.height) as usize);
    for px in img.data.chunks_exact(3) {
        out.push(0.299 * px[0] + 0.587 * px[1] + 0.114 * px[2]);
    }
    out
}

fn gaussian_kernel() -> [f64; SSIM_WINDOW] {
    let mut k = [0.0; SSIM_WINDOW];
    let c = (SSIM_WINDOW / 2) as f64;
    let mut total = 0.0;
    for (i, v) in k.iter_mut().enumerate() {
        *v = (-((i as f64 - c) * (i as f64 - c)) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
        total += *v;
    }
    for v in k.iter_mut() {
        *v /= total;
    }
    k
}

/// Separable Gaussian filter; output is the valid region (no padding),
/// size (w - 10) x (h - 10).
fn gauss_filter_valid(src: &[f64], w: usize, h: usize) -> Vec<f64> {
    let k = gaussian_kernel();
    let ow = w - (SSIM_WINDOW - 1);
    let oh = h - (SSIM_WINDOW - 1);
    // Horizontal pass: (w-10) x h.
    let mut tmp = vec![0.0; ow * h];
    for y in 0..h {
        for x in 0..ow {
            let mut acc = 0.0;
            for (i, kv) in k.iter().enumerate() {
                acc += kv * src[y * w + x + i];
            }
            tmp[y * ow + x] = acc;
        }
    }
    // Vertical pass: (w-10) x (h-10).
    let mut out = vec![0.0; ow * oh];
    for y in 0..oh {
        for x in 0..ow {
            let mut acc = 0.0;
            for (i, kv) in k.iter().enumerate() {
                acc += kv * tmp[(y + i) * ow + x];
            }
            out[y * ow + x] = acc;
        }
    }
    out
}

/// Single-scale SSIM on grayscale-converted images: 11x11 Gaussian window
/// (sigma 1.5), k1 = 0.01, k2 = 0.03, unit dynamic range, averaged over all
/// fully interior windows.
pub fn ssim(a: &Image, b: &Image) -> Result<f64> {
    check_same_shape(a, b)?;
    let (w, h) = (a.width as usize, a.height as usize);
    if w < SSIM_WINDOW || h < SSIM_WINDOW {
        return Err(Error::InvalidArgument(format!(
            "ssim needs images of at least {SSIM_WINDOW}x{SSIM_WINDOW}"
        )));
    }
    let x = luma(a);
    let y = luma(b);
    let xx: Vec<f64> = x.iter().map(|v| v * v).collect();
    let yy: Vec<f64> = y.iter().map(|v| v * v).collect();
    let xy: Vec<f64> = x.iter().zip(&y).map(|(u, v)| u * v).collect();

    let mu_x = gauss_filter_valid(&x, w, h);
    let mu_y = gauss_filter_valid(&y, w, h);
    let m_xx = gauss_filter_valid(&xx, w, h);
    let m_yy = gauss_filter_valid(&yy, w, h);
    let m_xy = gauss_filter_valid(&xy, w, h);

    let c1 = SSIM_K1 * SSIM_K1;
    let c2 = SSIM_K2 * SSIM_K2;
    let mut total = 0.0;
    for i in 0..mu_x.len() {
        let (mx, my) = (mu_x[i], mu_y[i]);
        let vx = m_xx[i] - mx * mx;
        let vy = m_yy[i] - my * my;
        let cov = m_xy[i] - mx * my;
        total += ((2.0 * mx * my + c1) * (2.0 * cov + c2))
            / ((mx * mx + my * my + c1) * (vx + vy + c2));
    }
    Ok(total / mu_x.len() as f64)
}

/// Mean absolute depth error over pixels valid in the ground truth map.
/// Returns None when no pixel is valid.
pub fn l1_depth(pred: &DepthMap, gt: &DepthMap) -> Result<Option<f64>> {
    if pred.width != gt.width || pred.height != gt.height {
        return Err(Error::ShapeMismatch(format!(
            "{}x{} vs {}x{}",
            pred.width, pred.height, gt.width, gt.height
        )));
    }
    let mut total = 0.0;
    let mut n = 0usize;
    for i in 0..gt.data.len() {
        if gt.valid[i] {
            total += (pred.data[i] - gt.data[i]).abs();
            n += 1;
        }
    }
    if n == 0 {
        Ok(None)
    } else {
        Ok(Some(total / n as f64))
    }
}

/// One evaluation row written to metrics.csv.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricRecord {
    /// Training keyframes consumed when this evaluation ran.
    pub train_keyframes: u64,
    pub frame_id: u64,
    pub psnr: f64,
    pub ssim: f64,
    pub l1_depth: Option<f64>,
    /// "interval", "pre_update", "post_update", or "final".
    pub event: String,
}
