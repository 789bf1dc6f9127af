//! Image fidelity metrics on `[0, 1]` images.

use crate::error::{ensure, Result};
use crate::imaging::FloatImage;

/// PSNR values written to logs are capped here; identical images would
/// otherwise log as infinity.
pub const PSNR_LOG_CAP: f64 = 99.0;

const SSIM_RADIUS: usize = 5;
const SSIM_SIGMA: f64 = 1.5;
const SSIM_K1: f64 = 0.01;
const SSIM_K2: f64 = 0.03;

fn check_same(a: &FloatImage, b: &FloatImage) -> Result<()> {
    ensure!(
        a.width == b.width && a.height == b.height && a.channels == b.channels,
        Shape,
        "image shapes differ: {}x{}x{} vs {}x{}x{}",
        a.width,
        a.height,
        a.channels,
        b.width,
        b.height,
        b.channels
    );
    Ok(())
}

pub fn mse(a: &FloatImage, b: &FloatImage) -> Result<f64> {
    check_same(a, b)?;
    ensure!(!a.data.is_empty(), Shape, "empty image");
    let s: f64 = a
        .data
        .iter()
        .zip(&b.data)
        .map(|(x, y)| (*x as f64 - *y as f64).powi(2))
        .sum();
    Ok(s / a.data.len() as f64)
}

/// `10 log10(1 / mse)`; infinite for a zero error.
pub fn psnr_from_mse(mse: f64) -> f64 {
    if mse <= 0.0 {
        f64::INFINITY
    } else {
        -10.0 * mse.log10()
    }
}

pub fn psnr(a: &FloatImage, b: &FloatImage) -> Result<f64> {
    Ok(psnr_from_mse(mse(a, b)?))
}

/// The value to log for a PSNR.
pub fn psnr_for_log(psnr: f64) -> f64 {
    psnr.min(PSNR_LOG_CAP)
}

fn gaussian_window() -> [f64; 2 * SSIM_RADIUS + 1] {
    let mut w = [0.0; 2 * SSIM_RADIUS + 1];
    for (i, x) in w.iter_mut().enumerate() {
        let d = i as f64 - SSIM_RADIUS as f64;
        *x = (-0.5 * d * d / (SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    let s: f64 = w.iter().sum();
    w.map(|x| x / s)
}

/// Separable Gaussian filter over the positions where the window fits.
fn filter_valid(src: &[f64], width: usize, height: usize, win: &[f64]) -> Vec<f64> {
    let k = win.len();
    let (ow, oh) = (width + 1 - k, height + 1 - k);
    let mut rows = vec![0.0; ow * height];
    for y in 0..height {
        for x in 0..ow {
            rows[y * ow + x] = (0..k).map(|i| win[i] * src[y * width + x + i]).sum();
        }
    }
    let mut out = vec![0.0; ow * oh];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = (0..k).map(|i| win[i] * rows[(y + i) * ow + x]).sum();
        }
    }
    out
}

/// Single-scale SSIM with an 11x11 Gaussian window (sigma 1.5), data range 1
/// and the usual constants, averaged over all positions where the window
/// fits and then over channels.
pub fn ssim(a: &FloatImage, b: &FloatImage) -> Result<f64> {
    check_same(a, b)?;
    let k = 2 * SSIM_RADIUS + 1;
    ensure!(
        a.width >= k && a.height >= k,
        Shape,
        "SSIM needs images of at least {k}x{k}, got {}x{}",
        a.width,
        a.height
    );
    let win = gaussian_window();
    let (c1, c2) = ((SSIM_K1).powi(2), (SSIM_K2).powi(2));
    let (w, h, ch) = (a.width, a.height, a.channels);
    let mut total = 0.0;
    for c in 0..ch {
        let x: Vec<f64> = a.data.iter().skip(c).step_by(ch).map(|&v| v as f64).collect();
        let y: Vec<f64> = b.data.iter().skip(c).step_by(ch).map(|&v| v as f64).collect();
        let xx: Vec<f64> = x.iter().map(|v| v * v).collect();
        let yy: Vec<f64> = y.iter().map(|v| v * v).collect();
        let xy: Vec<f64> = x.iter().zip(&y).map(|(p, q)| p * q).collect();
        let [mx, my, mxx, myy, mxy] = [&x, &y, &xx, &yy, &xy].map(|s| filter_valid(s, w, h, &win));
        let mut sum = 0.0;
        for i in 0..mx.len() {
            let (ux, uy) = (mx[i], my[i]);
            let vx = mxx[i] - ux * ux;
            let vy = myy[i] - uy * uy;
            let cxy = mxy[i] - ux * uy;
            sum += ((2.0 * ux * uy + c1) * (2.0 * cxy + c2)) / ((ux * ux + uy * uy + c1) * (vx + vy + c2));
        }
        total += sum / mx.len() as f64;
    }
    Ok(total / ch as f64)
}
