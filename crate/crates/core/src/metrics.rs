//! Image-quality metrics on magnitude images, plus scaled error maps.

use ndarray::Array2;
use std::path::Path;

use crate::error::{Error, Result};
use crate::image::ComplexImage;
use crate::scalar::Scalar;

/// Peak signal-to-noise ratio in dB with the reference maximum as peak:
/// `20 log10(max|ref| / rmse)`. Identical images yield +inf.
pub fn psnr_mag(x: &Array2<f64>, reference: &Array2<f64>) -> Result<f64> {
    if x.dim() != reference.dim() {
        return Err(Error::invalid("psnr inputs must share a shape"));
    }
    let n = x.len() as f64;
    let mse: f64 = x
        .iter()
        .zip(reference.iter())
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        / n;
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    let peak = reference.iter().cloned().fold(0.0f64, f64::max);
    Ok(20.0 * (peak / mse.sqrt()).log10())
}

pub fn psnr<T: Scalar>(x: &ComplexImage<T>, reference: &ComplexImage<T>) -> Result<f64> {
    if x.shape() != reference.shape() {
        return Err(Error::invalid("psnr inputs must share a shape"));
    }
    let xm = x.magnitude().mapv(|v| v.to_f64_c());
    let rm = reference.magnitude().mapv(|v| v.to_f64_c());
    psnr_mag(&xm, &rm)
}

#[derive(Debug, Clone, Copy)]
pub struct SsimParams {
    pub window: usize,
    pub sigma: f64,
    pub k1: f64,
    pub k2: f64,
}

impl Default for SsimParams {
    fn default() -> Self {
        Self {
            window: 7,
            sigma: 1.5,
            k1: 0.01,
            k2: 0.03,
        }
    }
}

fn gaussian_window(n: usize, sigma: f64) -> Vec<f64> {
    let c = (n as f64 - 1.0) / 2.0;
    let mut w: Vec<f64> = (0..n * n)
        .map(|i| {
            let (r, cc) = ((i / n) as f64, (i % n) as f64);
            (-((r - c).powi(2) + (cc - c).powi(2)) / (2.0 * sigma * sigma)).exp()
        })
        .collect();
    let sum: f64 = w.iter().sum();
    for v in w.iter_mut() {
        *v /= sum;
    }
    w
}

/// Mean local SSIM over all fully interior windows, Gaussian-weighted
/// local statistics, dynamic range taken from the reference maximum.
pub fn ssim_mag(x: &Array2<f64>, reference: &Array2<f64>, params: &SsimParams) -> Result<f64> {
    if x.dim() != reference.dim() {
        return Err(Error::invalid("ssim inputs must share a shape"));
    }
    let (h, w) = x.dim();
    let win = params.window;
    if h < win || w < win {
        return Err(Error::invalid(format!(
            "image {h}x{w} smaller than the {win}x{win} ssim window"
        )));
    }
    let weights = gaussian_window(win, params.sigma);
    let peak = reference.iter().cloned().fold(0.0f64, f64::max);
    let c1 = (params.k1 * peak).powi(2);
    let c2 = (params.k2 * peak).powi(2);

    let mut total = 0.0;
    let mut count = 0usize;
    for r0 in 0..=(h - win) {
        for c0 in 0..=(w - win) {
            let mut mx = 0.0;
            let mut my = 0.0;
            for dr in 0..win {
                for dc in 0..win {
                    let wv = weights[dr * win + dc];
                    mx += wv * x[[r0 + dr, c0 + dc]];
                    my += wv * reference[[r0 + dr, c0 + dc]];
                }
            }
            let mut vx = 0.0;
            let mut vy = 0.0;
            let mut cov = 0.0;
            for dr in 0..win {
                for dc in 0..win {
                    let wv = weights[dr * win + dc];
                    let ax = x[[r0 + dr, c0 + dc]] - mx;
                    let ay = reference[[r0 + dr, c0 + dc]] - my;
                    vx += wv * ax * ax;
                    vy += wv * ay * ay;
                    cov += wv * ax * ay;
                }
            }
            let num = (2.0 * mx * my + c1) * (2.0 * cov + c2);
            let den = (mx * mx + my * my + c1) * (vx + vy + c2);
            total += num / den;
            count += 1;
        }
    }
    Ok(total / count as f64)
}

pub fn ssim<T: Scalar>(
    x: &ComplexImage<T>,
    reference: &ComplexImage<T>,
    params: &SsimParams,
) -> Result<f64> {
    if x.shape() != reference.shape() {
        return Err(Error::invalid("ssim inputs must share a shape"));
    }
    let xm = x.magnitude().mapv(|v| v.to_f64_c());
    let rm = reference.magnitude().mapv(|v| v.to_f64_c());
    ssim_mag(&xm, &rm, params)
}

/// Writes `||x| - |ref|| * scale`, clipped to the reference peak, as an
/// 8-bit grayscale PNG. Pixels beyond the range saturate at 255.
pub fn error_map<T: Scalar>(
    x: &ComplexImage<T>,
    reference: &ComplexImage<T>,
    scale: f64,
    path: &Path,
) -> Result<()> {
    if x.shape() != reference.shape() {
        return Err(Error::invalid("error map inputs must share a shape"));
    }
    if !(scale > 0.0) {
        return Err(Error::config("error map scale must be positive"));
    }
    let (h, w) = x.shape();
    let xm = x.magnitude();
    let rm = reference.magnitude();
    let peak = rm.iter().fold(0.0f64, |m, v| m.max(v.to_f64_c()));
    let mut img = image::GrayImage::new(w as u32, h as u32);
    for r in 0..h {
        for c in 0..w {
            let e = (xm[[r, c]].to_f64_c() - rm[[r, c]].to_f64_c()).abs() * scale;
            let clipped = e.min(peak).max(0.0);
            let v = if peak > 0.0 {
                (clipped / peak * 255.0).round() as u8
            } else {
                0
            };
            img.put_pixel(c as u32, r as u32, image::Luma([v]));
        }
    }
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent)
                .map_err(|e| Error::io(parent, format!("creating directory: {e}")))?;
        }
    }
    img.save(path)
        .map_err(|e| Error::io(path, format!("writing error map: {e}")))?;
    Ok(())
}
