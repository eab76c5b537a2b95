//! Full-reference fidelity metrics on images in `[0, 1]`.
//!
//! SSIM is the canonical single-scale form: 11x11 Gaussian window with
//! sigma 1.5, `C1 = (0.01 L)^2`, `C2 = (0.03 L)^2`, `L = 1`, evaluated at every
//! position where the window fits, per channel, then averaged.

use crate::error::{shape_err, Result};
use crate::image::ImageBuffer;

/// PSNR reported for identical images.
pub const PSNR_CAP_DB: f64 = 99.0;
pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;

fn same_size(a: &ImageBuffer, b: &ImageBuffer) -> Result<()> {
    if a.width() != b.width() || a.height() != b.height() {
        return shape_err(format!("image sizes differ: {}x{} vs {}x{}", a.width(), a.height(), b.width(), b.height()));
    }
    Ok(())
}

pub fn mse(pred: &ImageBuffer, reference: &ImageBuffer) -> Result<f64> {
    same_size(pred, reference)?;
    let n = pred.data().len() as f64;
    Ok(pred.data().iter().zip(reference.data()).map(|(&a, &b)| (a as f64 - b as f64).powi(2)).sum::<f64>() / n)
}

/// `10 log10(max^2 / MSE)`, capped at [`PSNR_CAP_DB`].
pub fn psnr(pred: &ImageBuffer, reference: &ImageBuffer, max: f64) -> Result<f64> {
    let m = mse(pred, reference)?;
    if m == 0.0 {
        return Ok(PSNR_CAP_DB);
    }
    Ok((10.0 * (max * max / m).log10()).min(PSNR_CAP_DB))
}

pub fn gaussian_window() -> [f64; SSIM_WINDOW] {
    let mut w = [0.0; SSIM_WINDOW];
    let c = (SSIM_WINDOW / 2) as f64;
    for (i, v) in w.iter_mut().enumerate() {
        let d = i as f64 - c;
        *v = (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    let total: f64 = w.iter().sum();
    w.iter_mut().for_each(|v| *v /= total);
    w
}

/// Valid-region separable filtering of a `w x h` plane.
fn filter_valid(plane: &[f64], w: usize, h: usize, kernel: &[f64]) -> Vec<f64> {
    let k = kernel.len();
    let (ow, oh) = (w - k + 1, h - k + 1);
    let mut rows = vec![0.0; ow * h];
    for y in 0..h {
        for x in 0..ow {
            rows[y * ow + x] = kernel.iter().enumerate().map(|(i, kv)| kv * plane[y * w + x + i]).sum();
        }
    }
    let mut out = vec![0.0; ow * oh];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = kernel.iter().enumerate().map(|(i, kv)| kv * rows[(y + i) * ow + x]).sum();
        }
    }
    out
}

pub fn ssim(pred: &ImageBuffer, reference: &ImageBuffer) -> Result<f64> {
    same_size(pred, reference)?;
    let (w, h) = (pred.width(), pred.height());
    if w < SSIM_WINDOW || h < SSIM_WINDOW {
        return shape_err(format!("ssim needs at least {SSIM_WINDOW}x{SSIM_WINDOW}, got {w}x{h}"));
    }
    let kernel = gaussian_window();
    let c1 = 0.01f64.powi(2);
    let c2 = 0.03f64.powi(2);
    let mut total = 0.0;
    for ch in 0..3 {
        let x: Vec<f64> = pred.data().iter().skip(ch).step_by(3).map(|&v| v as f64).collect();
        let y: Vec<f64> = reference.data().iter().skip(ch).step_by(3).map(|&v| v as f64).collect();
        let xx: Vec<f64> = x.iter().map(|v| v * v).collect();
        let yy: Vec<f64> = y.iter().map(|v| v * v).collect();
        let xy: Vec<f64> = x.iter().zip(&y).map(|(a, b)| a * b).collect();
        let [mx, my, sxx, syy, sxy] = [&x, &y, &xx, &yy, &xy].map(|p| filter_valid(p, w, h, &kernel));
        let mut acc = 0.0;
        for i in 0..mx.len() {
            let (ux, uy) = (mx[i], my[i]);
            let vx = sxx[i] - ux * ux;
            let vy = syy[i] - uy * uy;
            let cov = sxy[i] - ux * uy;
            acc += ((2.0 * ux * uy + c1) * (2.0 * cov + c2)) / ((ux * ux + uy * uy + c1) * (vx + vy + c2));
        }
        total += acc / mx.len() as f64;
    }
    Ok(total / 3.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    fn noise(w: usize, h: usize, seed: u64) -> ImageBuffer {
        let mut rng = Rng::new(seed);
        ImageBuffer::new(w, h, (0..w * h * 3).map(|_| rng.uniform() as f32).collect()).unwrap()
    }

    #[test]
    fn psnr_closed_forms() {
        let zero = ImageBuffer::filled(4, 4, [0.0; 3]);
        let half = ImageBuffer::filled(4, 4, [0.5; 3]);
        let one = ImageBuffer::filled(4, 4, [1.0; 3]);
        assert_eq!(psnr(&half, &half, 1.0).unwrap(), PSNR_CAP_DB);
        assert!((psnr(&zero, &half, 1.0).unwrap() - 6.0206).abs() < 1e-4);
        assert!(psnr(&zero, &one, 1.0).unwrap().abs() < 1e-12);
        assert!(psnr(&zero, &ImageBuffer::filled(3, 4, [0.0; 3]), 1.0).is_err());
    }

    #[test]
    fn psnr_symmetric() {
        let a = noise(8, 6, 1);
        let b = noise(8, 6, 2);
        assert_eq!(psnr(&a, &b, 1.0).unwrap(), psnr(&b, &a, 1.0).unwrap());
    }

    #[test]
    fn ssim_identity_and_constants() {
        let a = noise(24, 20, 3);
        assert!((ssim(&a, &a).unwrap() - 1.0).abs() < 1e-6);
        let c = ImageBuffer::filled(16, 16, [0.3, 0.6, 0.9]);
        assert!((ssim(&c, &c).unwrap() - 1.0).abs() < 1e-12);
        assert!(ssim(&noise(10, 30, 1), &noise(10, 30, 2)).is_err());
    }

    #[test]
    fn window_normalised() {
        let w = gaussian_window();
        assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert_eq!(w[0], w[10]);
    }
}
