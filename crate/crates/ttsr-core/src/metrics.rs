//! Y-channel image quality metrics: PSNR and SSIM over full-range BT.601
//! luma, with no border cropping.

use crate::data::ImageU8;

/// Reported PSNR cap for identical images.
pub const PSNR_CAP: f64 = 100.0;

/// Full-range BT.601 luma of one RGB pixel, in `[0, 255]`.
pub fn luma(r: u8, g: u8, b: u8) -> f64 {
    0.299 * r as f64 + 0.587 * g as f64 + 0.114 * b as f64
}

/// Y plane of an image, row-major, values in `[0, 255]`.
pub fn y_channel(img: &ImageU8) -> Vec<f64> {
    img.pixels
        .chunks_exact(3)
        .map(|p| luma(p[0], p[1], p[2]))
        .collect()
}

fn check_extents(a: &ImageU8, b: &ImageU8) -> Result<(), String> {
    if a.width != b.width || a.height != b.height {
        return Err(format!(
            "extent mismatch: {}x{} vs {}x{}",
            a.width, a.height, b.width, b.height
        ));
    }
    Ok(())
}

/// Y-channel PSNR in dB: `10·log10(255² / MSE)`, capped at 100 dB.
pub fn psnr(a: &ImageU8, b: &ImageU8) -> Result<f64, String> {
    check_extents(a, b)?;
    let (ya, yb) = (y_channel(a), y_channel(b));
    let mse = ya
        .iter()
        .zip(&yb)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        / ya.len() as f64;
    if mse == 0.0 {
        return Ok(PSNR_CAP);
    }
    Ok((10.0 * (255.0f64 * 255.0 / mse).log10()).min(PSNR_CAP))
}

const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;

fn gaussian_window() -> [f64; SSIM_WINDOW * SSIM_WINDOW] {
    let mut w = [0.0; SSIM_WINDOW * SSIM_WINDOW];
    let c = (SSIM_WINDOW / 2) as f64;
    let mut sum = 0.0;
    for y in 0..SSIM_WINDOW {
        for x in 0..SSIM_WINDOW {
            let d2 = (x as f64 - c).powi(2) + (y as f64 - c).powi(2);
            let v = (-d2 / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
            w[y * SSIM_WINDOW + x] = v;
            sum += v;
        }
    }
    for v in w.iter_mut() {
        *v /= sum;
    }
    w
}

/// Y-channel SSIM with an 11x11 Gaussian window (sigma 1.5),
/// `C1 = (0.01·255)²`, `C2 = (0.03·255)²`, averaged over valid window
/// positions only (no padding).
pub fn ssim(a: &ImageU8, b: &ImageU8) -> Result<f64, String> {
    check_extents(a, b)?;
    let (w, h) = (a.width, a.height);
    if w < SSIM_WINDOW || h < SSIM_WINDOW {
        return Err(format!(
            "image {w}x{h} smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} SSIM window"
        ));
    }
    let (ya, yb) = (y_channel(a), y_channel(b));
    let win = gaussian_window();
    let c1 = (0.01f64 * 255.0).powi(2);
    let c2 = (0.03f64 * 255.0).powi(2);

    let mut total = 0.0;
    let mut count = 0usize;
    for oy in 0..=(h - SSIM_WINDOW) {
        for ox in 0..=(w - SSIM_WINDOW) {
            let (mut mu_a, mut mu_b) = (0.0, 0.0);
            for wy in 0..SSIM_WINDOW {
                for wx in 0..SSIM_WINDOW {
                    let g = win[wy * SSIM_WINDOW + wx];
                    let i = (oy + wy) * w + ox + wx;
                    mu_a += g * ya[i];
                    mu_b += g * yb[i];
                }
            }
            let (mut var_a, mut var_b, mut cov) = (0.0, 0.0, 0.0);
            for wy in 0..SSIM_WINDOW {
                for wx in 0..SSIM_WINDOW {
                    let g = win[wy * SSIM_WINDOW + wx];
                    let i = (oy + wy) * w + ox + wx;
                    let (da, db) = (ya[i] - mu_a, yb[i] - mu_b);
                    var_a += g * da * da;
                    var_b += g * db * db;
                    cov += g * da * db;
                }
            }
            total += ((2.0 * mu_a * mu_b + c1) * (2.0 * cov + c2))
                / ((mu_a * mu_a + mu_b * mu_b + c1) * (var_a + var_b + c2));
            count += 1;
        }
    }
    Ok(total / count as f64)
}
