//! Image quality and storage accounting.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::FactorizedModel;
use crate::numerics::Scalar;
use crate::persistence::{scene_record_bytes, shared_bytes, HEADER_BYTES};
use crate::rendering::Image;

const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;
const SSIM_C1: f64 = 0.01 * 0.01;
const SSIM_C2: f64 = 0.03 * 0.03;

fn check_dims(a: &Image, b: &Image) -> Result<()> {
    if a.width() != b.width() || a.height() != b.height() {
        return Err(Error::Shape {
            op: "image metric",
            lhs: vec![a.height(), a.width(), 3],
            rhs: vec![b.height(), b.width(), 3],
        });
    }
    Ok(())
}

pub fn mse(a: &Image, b: &Image) -> Result<f64> {
    check_dims(a, b)?;
    let n = a.data().len() as f64;
    Ok(a.data().iter().zip(b.data()).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / n)
}

/// `10·log₁₀(1 / MSE)` over all channels; `+∞` for identical images.
pub fn psnr(a: &Image, b: &Image) -> Result<f64> {
    let m = mse(a, b)?;
    Ok(if m == 0.0 { f64::INFINITY } else { -10.0 * m.log10() })
}

fn gaussian_taps() -> [f64; SSIM_WINDOW] {
    let r = (SSIM_WINDOW / 2) as f64;
    let mut taps = [0.0; SSIM_WINDOW];
    for (i, t) in taps.iter_mut().enumerate() {
        let x = i as f64 - r;
        *t = (-x * x / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    let s: f64 = taps.iter().sum();
    taps.map(|t| t / s)
}

/// Separable Gaussian filter over the windows that fit entirely inside the image.
fn filter_valid(plane: &[f64], w: usize, h: usize, taps: &[f64; SSIM_WINDOW]) -> Vec<f64> {
    let (ow, oh) = (w - SSIM_WINDOW + 1, h - SSIM_WINDOW + 1);
    let mut rows = vec![0.0; ow * h];
    for y in 0..h {
        for x in 0..ow {
            rows[y * ow + x] = (0..SSIM_WINDOW).map(|k| taps[k] * plane[y * w + x + k]).sum();
        }
    }
    let mut out = vec![0.0; ow * oh];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = (0..SSIM_WINDOW).map(|k| taps[k] * rows[(y + k) * ow + x]).sum();
        }
    }
    out
}

/// Single-scale SSIM with an 11×11 Gaussian window (σ = 1.5) on unit range,
/// averaged over valid window positions and then over channels.
pub fn ssim(a: &Image, b: &Image) -> Result<f64> {
    check_dims(a, b)?;
    let (w, h) = (a.width(), a.height());
    if w < SSIM_WINDOW || h < SSIM_WINDOW {
        return Err(Error::contract(format!("SSIM needs at least {SSIM_WINDOW}×{SSIM_WINDOW} pixels, got {w}×{h}")));
    }
    let taps = gaussian_taps();
    let mut total = 0.0;
    for ch in 0..3 {
        let x: Vec<f64> = a.data().iter().skip(ch).step_by(3).copied().collect();
        let y: Vec<f64> = b.data().iter().skip(ch).step_by(3).copied().collect();
        let xx: Vec<f64> = x.iter().map(|v| v * v).collect();
        let yy: Vec<f64> = y.iter().map(|v| v * v).collect();
        let xy: Vec<f64> = x.iter().zip(&y).map(|(p, q)| p * q).collect();
        let [mx, my, sxx, syy, sxy] = [&x, &y, &xx, &yy, &xy].map(|p| filter_valid(p, w, h, &taps));
        let n = mx.len();
        let mut sum = 0.0;
        for i in 0..n {
            let (ux, uy) = (mx[i], my[i]);
            let vx = sxx[i] - ux * ux;
            let vy = syy[i] - uy * uy;
            let cov = sxy[i] - ux * uy;
            sum += ((2.0 * ux * uy + SSIM_C1) * (2.0 * cov + SSIM_C2))
                / ((ux * ux + uy * uy + SSIM_C1) * (vx + vy + SSIM_C2));
        }
        total += sum / n as f64;
    }
    Ok(total / 3.0)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    /// `+∞` for identical images; serialized as `null`.
    pub psnr: f64,
    pub ssim: f64,
    pub pixel_count: usize,
}

/// PSNR and, when the image is large enough for the window, SSIM.
pub fn evaluate(a: &Image, b: &Image) -> Result<MetricReport> {
    let psnr = psnr(a, b)?;
    let ssim = if a.width() >= SSIM_WINDOW && a.height() >= SSIM_WINDOW { ssim(a, b)? } else { f64::NAN };
    Ok(MetricReport { psnr, ssim, pixel_count: a.width() * a.height() })
}

/// Byte sizes in the model file format.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StorageReport {
    pub header_bytes: usize,
    pub shared_bytes: usize,
    /// Size of each scene record, in training order.
    pub per_scene_bytes: Vec<usize>,
    /// Bytes of learnable and noise scalars in one scene record.
    pub per_scene_parameter_bytes: usize,
    pub total_bytes: usize,
}

impl StorageReport {
    /// Projected file size for `n` scenes, assuming records the size of the last one.
    pub fn extrapolate(&self, n: usize) -> usize {
        let record = self.per_scene_bytes.last().copied().unwrap_or(0);
        self.header_bytes + self.shared_bytes + n * record
    }
}

pub fn storage_report<T: Scalar>(model: &FactorizedModel<T>) -> StorageReport {
    let c = model.config();
    let per_scene_bytes: Vec<usize> =
        model.scenes().iter().map(|s| scene_record_bytes(c, &s.id, s.setup.frusta.len())).collect();
    let shared = shared_bytes(c);
    StorageReport {
        header_bytes: HEADER_BYTES,
        shared_bytes: shared,
        total_bytes: HEADER_BYTES + shared + per_scene_bytes.iter().sum::<usize>(),
        per_scene_bytes,
        per_scene_parameter_bytes: 4 * c.per_scene_parameters(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identical_images_are_infinite() {
        let a = Image::filled(4, 4, [0.2, 0.4, 0.6]);
        assert_eq!(psnr(&a, &a).unwrap(), f64::INFINITY);
    }

    #[test]
    fn uniform_offset_is_twenty_db() {
        let a = Image::filled(4, 4, [0.2, 0.4, 0.6]);
        let b = Image::filled(4, 4, [0.3, 0.5, 0.7]);
        assert!((psnr(&a, &b).unwrap() - 20.0).abs() < 1e-9);
    }

    #[test]
    fn checkerboard_against_black() {
        let data = (0..16).flat_map(|i| [((i + i / 4) % 2) as f64; 3]).collect();
        let a = Image::new(4, 4, data).unwrap();
        let b = Image::filled(4, 4, [0.0; 3]);
        assert!((psnr(&a, &b).unwrap() - 10.0 * 2f64.log10()).abs() < 1e-12);
    }

    #[test]
    fn dimension_mismatch() {
        assert!(psnr(&Image::filled(2, 2, [0.0; 3]), &Image::filled(2, 3, [0.0; 3])).is_err());
    }

    #[test]
    fn ssim_self_is_one_and_small_rejected() {
        let data = (0..12 * 12 * 3).map(|i| ((i * 37) % 11) as f64 / 10.0).collect();
        let a = Image::new(12, 12, data).unwrap();
        assert!((ssim(&a, &a).unwrap() - 1.0).abs() < 1e-12);
        assert!(ssim(&Image::filled(10, 10, [0.0; 3]), &Image::filled(10, 10, [0.0; 3])).is_err());
    }

    #[test]
    fn gaussian_taps_normalized() {
        let t = gaussian_taps();
        assert!((t.iter().sum::<f64>() - 1.0).abs() < 1e-15);
        assert_eq!(t[0], t[10]);
    }
}
