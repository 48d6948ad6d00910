//! Image quality metrics on `[0,1]` images.

use crate::error::{Error, Result};
use crate::render::Image;

/// Reported for identical images.
pub const PSNR_CAP: f64 = 99.0;

const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;
const SSIM_C1: f64 = 0.01 * 0.01;
const SSIM_C2: f64 = 0.03 * 0.03;

fn check(a: &Image, b: &Image) -> Result<()> {
    if !a.same_shape(b) {
        return Err(Error::Dimension {
            context: "image shapes",
            expected: a.data.len(),
            actual: b.data.len(),
        });
    }
    Ok(())
}

pub fn mse(a: &Image, b: &Image) -> Result<f64> {
    check(a, b)?;
    if a.data.is_empty() {
        return Ok(0.0);
    }
    let s: f64 = a
        .data
        .iter()
        .zip(&b.data)
        .map(|(&x, &y)| {
            let d = x as f64 - y as f64;
            d * d
        })
        .sum();
    Ok(s / a.data.len() as f64)
}

pub fn psnr_from_mse(m: f64) -> f64 {
    if m <= 0.0 {
        PSNR_CAP
    } else {
        (-10.0 * m.log10()).min(PSNR_CAP)
    }
}

/// `−10·log10(MSE)`, capped at [`PSNR_CAP`].
pub fn psnr(a: &Image, b: &Image) -> Result<f64> {
    Ok(psnr_from_mse(mse(a, b)?))
}

fn gaussian_kernel() -> [f64; SSIM_WINDOW] {
    let mut k = [0.0; SSIM_WINDOW];
    let c = (SSIM_WINDOW / 2) as f64;
    for (i, v) in k.iter_mut().enumerate() {
        let x = i as f64 - c;
        *v = (-x * x / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    let s: f64 = k.iter().sum();
    k.map(|v| v / s)
}

/// Separable Gaussian filter, valid region only.
fn filter(src: &[f64], w: usize, h: usize, k: &[f64; SSIM_WINDOW]) -> (Vec<f64>, usize, usize) {
    let ow = w + 1 - SSIM_WINDOW;
    let oh = h + 1 - SSIM_WINDOW;
    let mut tmp = vec![0.0; ow * h];
    for y in 0..h {
        for x in 0..ow {
            tmp[y * ow + x] = (0..SSIM_WINDOW).map(|i| k[i] * src[y * w + x + i]).sum();
        }
    }
    let mut out = vec![0.0; ow * oh];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = (0..SSIM_WINDOW).map(|i| k[i] * tmp[(y + i) * ow + x]).sum();
        }
    }
    (out, ow, oh)
}

/// Mean SSIM with an 11×11 Gaussian window (σ = 1.5), averaged over channels.
pub fn ssim(a: &Image, b: &Image) -> Result<f64> {
    check(a, b)?;
    let (w, h, c) = (a.width as usize, a.height as usize, a.channels as usize);
    if w < SSIM_WINDOW || h < SSIM_WINDOW {
        return Err(Error::Config(format!("SSIM needs images of at least {SSIM_WINDOW}x{SSIM_WINDOW}")));
    }
    let k = gaussian_kernel();
    let mut total = 0.0;
    for ch in 0..c {
        let x: Vec<f64> = (0..w * h).map(|i| a.data[i * c + ch] as f64).collect();
        let y: Vec<f64> = (0..w * h).map(|i| b.data[i * c + ch] as f64).collect();
        let xx: Vec<f64> = x.iter().map(|v| v * v).collect();
        let yy: Vec<f64> = y.iter().map(|v| v * v).collect();
        let xy: Vec<f64> = x.iter().zip(&y).map(|(p, q)| p * q).collect();
        let (mx, ow, oh) = filter(&x, w, h, &k);
        let (my, _, _) = filter(&y, w, h, &k);
        let (sxx, _, _) = filter(&xx, w, h, &k);
        let (syy, _, _) = filter(&yy, w, h, &k);
        let (sxy, _, _) = filter(&xy, w, h, &k);
        let mut acc = 0.0;
        for i in 0..ow * oh {
            let (m1, m2) = (mx[i], my[i]);
            let v1 = sxx[i] - m1 * m1;
            let v2 = syy[i] - m2 * m2;
            let cov = sxy[i] - m1 * m2;
            acc += ((2.0 * m1 * m2 + SSIM_C1) * (2.0 * cov + SSIM_C2))
                / ((m1 * m1 + m2 * m2 + SSIM_C1) * (v1 + v2 + SSIM_C2));
        }
        total += acc / (ow * oh) as f64;
    }
    Ok(total / c as f64)
}

/// `(1 − SSIM) / 2`.
pub fn d_ssim(a: &Image, b: &Image) -> Result<f64> {
    Ok(((1.0 - ssim(a, b)?) / 2.0).clamp(0.0, 1.0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn noisy(base: &Image, amp: f32, seed: u64) -> Image {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut o = base.clone();
        for v in &mut o.data {
            *v = (*v + amp * (rng.random::<f32>() - 0.5)).clamp(0.0, 1.0);
        }
        o
    }

    fn pattern() -> Image {
        let mut im = Image::new(24, 20, 3);
        for y in 0..20 {
            for x in 0..24 {
                let p = im.pixel_mut(x, y);
                p[0] = x as f32 / 24.0;
                p[1] = y as f32 / 20.0;
                p[2] = ((x + y) % 5) as f32 / 4.0;
            }
        }
        im
    }

    #[test]
    fn identical_images() {
        let a = pattern();
        assert_eq!(psnr(&a, &a).unwrap(), PSNR_CAP);
        assert!(d_ssim(&a, &a).unwrap().abs() < 1e-12);
    }

    #[test]
    fn uniform_offset_gives_twenty_db() {
        let a = Image::filled(16, 16, 3, 0.25);
        let b = Image::filled(16, 16, 3, 0.35);
        assert!((psnr(&a, &b).unwrap() - 20.0).abs() < 1e-5);
        assert_eq!(psnr(&a, &b).unwrap(), psnr(&b, &a).unwrap());
    }

    #[test]
    fn ssim_is_monotone_in_noise() {
        let a = pattern();
        let small = ssim(&a, &noisy(&a, 0.05, 1)).unwrap();
        let large = ssim(&a, &noisy(&a, 0.6, 1)).unwrap();
        assert!(large < small && small < 1.0);
        assert!((-1.0..=1.0).contains(&large));
    }

    #[test]
    fn shape_mismatch_errors() {
        assert!(psnr(&Image::new(4, 4, 3), &Image::new(4, 5, 3)).is_err());
        assert!(ssim(&Image::new(4, 4, 3), &Image::new(4, 4, 3)).is_err());
    }
}
