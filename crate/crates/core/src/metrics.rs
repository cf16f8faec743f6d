//! PSNR and single-scale SSIM on [0, 1] grayscale frames.

use crate::frame::{Frame, FrameError};

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
const SSIM_K1: f64 = 0.01;
const SSIM_K2: f64 = 0.03;

pub fn mse(a: &Frame, b: &Frame) -> Result<f64, FrameError> {
    a.check_same_shape(b)?;
    let sum: f64 = a
        .data
        .iter()
        .zip(&b.data)
        .map(|(&x, &y)| {
            let d = x as f64 - y as f64;
            d * d
        })
        .sum();
    Ok(sum / a.data.len().max(1) as f64)
}

/// Peak 1. Identical frames give `f64::INFINITY`.
pub fn psnr(a: &Frame, b: &Frame) -> Result<f64, FrameError> {
    psnr_with_peak(a, b, 1.0)
}

pub fn psnr_with_peak(a: &Frame, b: &Frame, peak: f64) -> Result<f64, FrameError> {
    let m = mse(a, b)?;
    if m == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (peak * peak / m).log10())
}

/// Normalized 1-D Gaussian taps; the 2-D window is their outer product.
pub fn gaussian_taps(size: usize, sigma: f64) -> Vec<f64> {
    let c = (size as f64 - 1.0) / 2.0;
    let raw: Vec<f64> = (0..size)
        .map(|i| {
            let d = i as f64 - c;
            (-d * d / (2.0 * sigma * sigma)).exp()
        })
        .collect();
    let s: f64 = raw.iter().sum();
    raw.into_iter().map(|v| v / s).collect()
}

/// Mean SSIM over every fully-contained 11x11 window (Gaussian weights,
/// sigma 1.5, K1 = 0.01, K2 = 0.03, peak 1).
pub fn ssim(a: &Frame, b: &Frame) -> Result<f64, FrameError> {
    a.check_same_shape(b)?;
    let (h, w) = a.shape();
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(FrameError::Format(format!(
            "ssim needs at least {SSIM_WINDOW}x{SSIM_WINDOW}, got {h}x{w}"
        )));
    }
    let taps = gaussian_taps(SSIM_WINDOW, SSIM_SIGMA);
    let (oh, ow) = (h - SSIM_WINDOW + 1, w - SSIM_WINDOW + 1);

    // Separable valid-mode filtering: rows first, then columns.
    let filter = |img: &dyn Fn(usize) -> f64| -> Vec<f64> {
        let mut rows = vec![0.0; h * ow];
        for y in 0..h {
            for x in 0..ow {
                rows[y * ow + x] = (0..SSIM_WINDOW).map(|k| taps[k] * img(y * w + x + k)).sum();
            }
        }
        let mut out = vec![0.0; oh * ow];
        for y in 0..oh {
            for x in 0..ow {
                out[y * ow + x] = (0..SSIM_WINDOW).map(|k| taps[k] * rows[(y + k) * ow + x]).sum();
            }
        }
        out
    };
    let av = |i: usize| a.data[i] as f64;
    let bv = |i: usize| b.data[i] as f64;
    let mu_a = filter(&av);
    let mu_b = filter(&bv);
    let aa = filter(&|i| av(i) * av(i));
    let bb = filter(&|i| bv(i) * bv(i));
    let ab = filter(&|i| av(i) * bv(i));

    let c1 = SSIM_K1 * SSIM_K1;
    let c2 = SSIM_K2 * SSIM_K2;
    let total: f64 = (0..oh * ow)
        .map(|i| {
            let (ma, mb) = (mu_a[i], mu_b[i]);
            let va = aa[i] - ma * ma;
            let vb = bb[i] - mb * mb;
            let cov = ab[i] - ma * mb;
            ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2))
        })
        .sum();
    Ok(total / (oh * ow) as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_frame(rng: &mut ChaCha8Rng, h: usize, w: usize) -> Frame {
        Frame::new(h, w, (0..h * w).map(|_| rng.random::<f32>()).collect()).unwrap()
    }

    /// Direct per-window evaluation with an explicit 2-D kernel.
    fn ssim_reference(a: &Frame, b: &Frame) -> f64 {
        let n = SSIM_WINDOW;
        let c = (n as f64 - 1.0) / 2.0;
        let mut k2 = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..n {
                let d2 = (i as f64 - c).powi(2) + (j as f64 - c).powi(2);
                k2[i * n + j] = (-d2 / (2.0 * 1.5 * 1.5)).exp();
            }
        }
        let s: f64 = k2.iter().sum();
        k2.iter_mut().for_each(|v| *v /= s);
        let (h, w) = a.shape();
        let mut total = 0.0;
        let mut count = 0;
        for y in 0..=h - n {
            for x in 0..=w - n {
                let (mut ma, mut mb) = (0.0, 0.0);
                for i in 0..n {
                    for j in 0..n {
                        ma += k2[i * n + j] * a.get(y + i, x + j) as f64;
                        mb += k2[i * n + j] * b.get(y + i, x + j) as f64;
                    }
                }
                let (mut va, mut vb, mut cov) = (0.0, 0.0, 0.0);
                for i in 0..n {
                    for j in 0..n {
                        let da = a.get(y + i, x + j) as f64 - ma;
                        let db = b.get(y + i, x + j) as f64 - mb;
                        va += k2[i * n + j] * da * da;
                        vb += k2[i * n + j] * db * db;
                        cov += k2[i * n + j] * da * db;
                    }
                }
                let c1 = 0.01f64.powi(2);
                let c2 = 0.03f64.powi(2);
                total += ((2.0 * ma * mb + c1) * (2.0 * cov + c2))
                    / ((ma * ma + mb * mb + c1) * (va + vb + c2));
                count += 1;
            }
        }
        total / count as f64
    }

    #[test]
    fn psnr_cases() {
        let a = Frame::filled(4, 4, 0.5);
        assert_eq!(psnr(&a, &a).unwrap(), f64::INFINITY);
        let b = Frame::filled(4, 4, 0.6);
        let db = psnr(&a, &b).unwrap();
        assert!((db - 20.0).abs() < 1e-5, "{db}");
        assert_eq!(db, psnr(&b, &a).unwrap());
        assert!(psnr(&a, &Frame::filled(4, 5, 0.5)).is_err());
    }

    #[test]
    fn ssim_identity_and_bounds() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..5 {
            let a = random_frame(&mut rng, 16, 19);
            assert!((ssim(&a, &a).unwrap() - 1.0).abs() < 1e-9);
            let b = random_frame(&mut rng, 16, 19);
            let s = ssim(&a, &b).unwrap();
            assert!((-1.0..=1.0).contains(&s));
            let inv = Frame::new(16, 19, a.data.iter().map(|v| 1.0 - v).collect()).unwrap();
            assert!((-1.0..=1.0).contains(&ssim(&a, &inv).unwrap()));
        }
    }

    #[test]
    fn ssim_matches_direct_formula() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for (h, w) in [(11, 11), (14, 17), (24, 20)] {
            let a = random_frame(&mut rng, h, w);
            let b = random_frame(&mut rng, h, w);
            let fast = ssim(&a, &b).unwrap();
            let slow = ssim_reference(&a, &b);
            assert!((fast - slow).abs() < 1e-6, "{fast} vs {slow}");
        }
    }

    #[test]
    fn ssim_rejects_small_images() {
        let a = Frame::filled(10, 30, 0.1);
        assert!(ssim(&a, &a).is_err());
    }
}
