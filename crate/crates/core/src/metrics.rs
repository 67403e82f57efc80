//! Image quality metrics on `[0, 1]`-scaled `[N, C, H, W]` batches.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Finite stand-in for the PSNR of an exact reconstruction in records.
pub const PSNR_SENTINEL_DB: f64 = 100.0;

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
const SSIM_K1: f64 = 0.01;
const SSIM_K2: f64 = 0.03;

/// `10·log10(1/mse)` for peak 1; `+∞` when `mse == 0`.
pub fn psnr_from_mse(mse: f64) -> f64 {
    -10.0 * mse.log10()
}

fn check_pair(a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() || a.shape().len() != 4 {
        return Err(Error::shape(format!("{:?} (4-d)", a.shape()), format!("{:?}", b.shape())));
    }
    Ok(())
}

pub fn mse_per_image(a: &Tensor, b: &Tensor) -> Result<Vec<f64>> {
    check_pair(a, b)?;
    Ok((0..a.batch())
        .map(|i| {
            let (x, y) = (a.item_slice(i), b.item_slice(i));
            x.iter().zip(y).map(|(p, q)| (p - q) * (p - q)).sum::<f64>() / x.len() as f64
        })
        .collect())
}

pub fn psnr_per_image(a: &Tensor, b: &Tensor) -> Result<Vec<f64>> {
    Ok(mse_per_image(a, b)?.into_iter().map(psnr_from_mse).collect())
}

/// Mean of per-image PSNRs (dB); `+∞` if any pair is identical.
pub fn psnr(a: &Tensor, b: &Tensor) -> Result<f64> {
    let v = psnr_per_image(a, b)?;
    Ok(v.iter().sum::<f64>() / v.len().max(1) as f64)
}

fn gaussian_window() -> [f64; SSIM_WINDOW] {
    let r = (SSIM_WINDOW / 2) as f64;
    let mut w = [0.0; SSIM_WINDOW];
    for (i, v) in w.iter_mut().enumerate() {
        let d = i as f64 - r;
        *v = (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    let s: f64 = w.iter().sum();
    w.map(|v| v / s)
}

/// Separable "valid" Gaussian filtering of an `h×w` plane.
fn filter_valid(plane: &[f64], h: usize, w: usize, win: &[f64; SSIM_WINDOW]) -> Vec<f64> {
    let (oh, ow) = (h + 1 - SSIM_WINDOW, w + 1 - SSIM_WINDOW);
    let mut rows = vec![0.0; h * ow];
    for y in 0..h {
        for x in 0..ow {
            rows[y * ow + x] = (0..SSIM_WINDOW).map(|k| win[k] * plane[y * w + x + k]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = (0..SSIM_WINDOW).map(|k| win[k] * rows[(y + k) * ow + x]).sum();
        }
    }
    out
}

fn ssim_plane(x: &[f64], y: &[f64], h: usize, w: usize, win: &[f64; SSIM_WINDOW]) -> f64 {
    let c1 = SSIM_K1 * SSIM_K1;
    let c2 = SSIM_K2 * SSIM_K2;
    let prod = |f: &dyn Fn(f64, f64) -> f64| x.iter().zip(y).map(|(&p, &q)| f(p, q)).collect::<Vec<_>>();
    let mx = filter_valid(x, h, w, win);
    let my = filter_valid(y, h, w, win);
    let sxx = filter_valid(&prod(&|p, _| p * p), h, w, win);
    let syy = filter_valid(&prod(&|_, q| q * q), h, w, win);
    let sxy = filter_valid(&prod(&|p, q| p * q), h, w, win);
    let n = mx.len();
    (0..n)
        .map(|i| {
            let (a, b) = (mx[i], my[i]);
            let vx = sxx[i] - a * a;
            let vy = syy[i] - b * b;
            let cov = sxy[i] - a * b;
            ((2.0 * a * b + c1) * (2.0 * cov + c2)) / ((a * a + b * b + c1) * (vx + vy + c2))
        })
        .sum::<f64>()
        / n as f64
}

/// Structural similarity of each image pair: 11×11 Gaussian window
/// (σ = 1.5), K1 = 0.01, K2 = 0.03, peak 1, population statistics over
/// valid windows, averaged over channels.
pub fn ssim_per_image(a: &Tensor, b: &Tensor) -> Result<Vec<f64>> {
    check_pair(a, b)?;
    let (n, c, h, w) = a.dims4();
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::shape(
            format!("images of at least {SSIM_WINDOW}×{SSIM_WINDOW}"),
            format!("{h}×{w}"),
        ));
    }
    let win = gaussian_window();
    let plane = h * w;
    Ok((0..n)
        .map(|i| {
            let (x, y) = (a.item_slice(i), b.item_slice(i));
            (0..c)
                .map(|ch| {
                    let r = ch * plane..(ch + 1) * plane;
                    ssim_plane(&x[r.clone()], &y[r], h, w, &win)
                })
                .sum::<f64>()
                / c as f64
        })
        .collect())
}

pub fn ssim(a: &Tensor, b: &Tensor) -> Result<f64> {
    let v = ssim_per_image(a, b)?;
    Ok(v.iter().sum::<f64>() / v.len().max(1) as f64)
}
