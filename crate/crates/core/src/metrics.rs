//! PSNR and SSIM on `[0, 1]` images.

use crate::error::{Error, Result};
use crate::image::to_luma_bt601;
use crate::tensor::Tensor;

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;

fn same_shape(a: &Tensor, b: &Tensor, what: &str) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(format!(
            "{what}: shapes {:?} and {:?} differ",
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
}

pub fn mse(a: &Tensor, b: &Tensor) -> Result<f64> {
    same_shape(a, b, "mse")?;
    let sum: f64 = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| {
            let d = x as f64 - y as f64;
            d * d
        })
        .sum();
    Ok(sum / a.len() as f64)
}

/// `10 log10(1 / mse)` in dB for peak value 1. Identical inputs give
/// `f64::INFINITY`. With `on_y`, both `(3, H, W)` inputs are first reduced
/// to BT.601 luma.
pub fn psnr(a: &Tensor, b: &Tensor, on_y: bool) -> Result<f64> {
    same_shape(a, b, "psnr")?;
    let m = if on_y {
        mse(&to_luma_bt601(a)?, &to_luma_bt601(b)?)?
    } else {
        mse(a, b)?
    };
    Ok(if m == 0.0 {
        f64::INFINITY
    } else {
        -10.0 * m.log10()
    })
}

/// Normalized 1-D Gaussian taps of the SSIM window.
pub fn gaussian_window() -> [f64; SSIM_WINDOW] {
    let mut g = [0f64; SSIM_WINDOW];
    let c = (SSIM_WINDOW / 2) as f64;
    for (i, v) in g.iter_mut().enumerate() {
        let d = i as f64 - c;
        *v = (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    let s: f64 = g.iter().sum();
    g.map(|v| v / s)
}

/// Valid-mode separable Gaussian filter of an `h x w` plane.
fn filter_valid(p: &[f64], h: usize, w: usize, g: &[f64; SSIM_WINDOW]) -> Vec<f64> {
    let (oh, ow) = (h - SSIM_WINDOW + 1, w - SSIM_WINDOW + 1);
    let mut mid = vec![0f64; h * ow];
    for y in 0..h {
        for x in 0..ow {
            mid[y * ow + x] = (0..SSIM_WINDOW).map(|i| g[i] * p[y * w + x + i]).sum();
        }
    }
    let mut out = vec![0f64; oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = (0..SSIM_WINDOW).map(|i| g[i] * mid[(y + i) * ow + x]).sum();
        }
    }
    out
}

/// Mean SSIM of two single-channel images with an 11x11 Gaussian window
/// (sigma 1.5), `K1 = 0.01`, `K2 = 0.03` and dynamic range 1, over the
/// valid window positions.
pub fn ssim(a: &Tensor, b: &Tensor) -> Result<f64> {
    same_shape(a, b, "ssim")?;
    let (c, h, w) = a.dims3()?;
    if c != 1 {
        return Err(Error::shape(format!("ssim needs one channel, got {c}")));
    }
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::shape(format!(
            "ssim needs at least {SSIM_WINDOW}x{SSIM_WINDOW}, got {h}x{w}"
        )));
    }
    let g = gaussian_window();
    let pa: Vec<f64> = a.data().iter().map(|&v| v as f64).collect();
    let pb: Vec<f64> = b.data().iter().map(|&v| v as f64).collect();
    let prod = |x: &[f64], y: &[f64]| -> Vec<f64> { x.iter().zip(y).map(|(p, q)| p * q).collect() };

    let mu_a = filter_valid(&pa, h, w, &g);
    let mu_b = filter_valid(&pb, h, w, &g);
    let e_aa = filter_valid(&prod(&pa, &pa), h, w, &g);
    let e_bb = filter_valid(&prod(&pb, &pb), h, w, &g);
    let e_ab = filter_valid(&prod(&pa, &pb), h, w, &g);

    let c1 = (SSIM_K1 * 1.0).powi(2);
    let c2 = (SSIM_K2 * 1.0).powi(2);
    let n = mu_a.len();
    let total: f64 = (0..n)
        .map(|i| {
            let (ma, mb) = (mu_a[i], mu_b[i]);
            let va = e_aa[i] - ma * ma;
            let vb = e_bb[i] - mb * mb;
            let cov = e_ab[i] - ma * mb;
            ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2))
        })
        .sum();
    Ok(total / n as f64)
}

/// PSNR and SSIM of two RGB `(3, H, W)` images on the luma channel.
pub fn evaluate_y(a: &Tensor, b: &Tensor) -> Result<(f64, f64)> {
    let (ya, yb) = (to_luma_bt601(a)?, to_luma_bt601(b)?);
    Ok((psnr(&ya, &yb, false)?, ssim(&ya, &yb)?))
}

/// `inf` for an infinite PSNR, otherwise four decimals.
pub fn format_db(v: f64) -> String {
    if v.is_infinite() {
        "inf".to_string()
    } else {
        format!("{v:.4}")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn random(h: usize, w: usize, seed: u64) -> Tensor {
        let mut s = seed.wrapping_mul(0x9E3779B97F4A7C15) | 1;
        Tensor::from_fn3(1, h, w, |_, _, _| {
            s ^= s << 13;
            s ^= s >> 7;
            s ^= s << 17;
            (s >> 40) as f32 / (1u64 << 24) as f32
        })
        .unwrap()
    }

    #[test]
    fn psnr_closed_form_and_inf() {
        let a = random(12, 9, 1).map(|v| v * 0.9).unwrap();
        let b = a.map(|v| v + 0.1).unwrap();
        assert!((psnr(&a, &b, false).unwrap() - 20.0).abs() < 1e-4);
        assert!(psnr(&a, &a, false).unwrap().is_infinite());
        assert_eq!(format_db(f64::INFINITY), "inf");
        assert!(psnr(&a, &random(3, 3, 1), false).is_err());
    }

    #[test]
    fn ssim_identity_and_size_checks() {
        let a = random(16, 20, 3);
        assert!((ssim(&a, &a).unwrap() - 1.0).abs() < 1e-9);
        assert!(ssim(&random(10, 20, 1), &random(10, 20, 2)).is_err());
        let rgb = Tensor::zeros(vec![3, 12, 12]).unwrap();
        assert!(ssim(&rgb, &rgb).is_err());
    }

    #[test]
    fn inverted_checkerboard_is_dissimilar() {
        let a = Tensor::from_fn3(1, 16, 16, |_, y, x| ((x + y) % 2) as f32).unwrap();
        let b = a.map(|v| 1.0 - v).unwrap();
        assert!(ssim(&a, &b).unwrap() < 0.1);
    }

    #[test]
    fn window_is_normalized_and_symmetric() {
        let g = gaussian_window();
        assert!((g.iter().sum::<f64>() - 1.0).abs() < 1e-15);
        for i in 0..SSIM_WINDOW {
            assert_eq!(g[i], g[SSIM_WINDOW - 1 - i]);
        }
    }

    proptest::proptest! {
        #[test]
        fn metrics_are_symmetric_and_bounded(seed in proptest::prelude::any::<u64>(), h in 11usize..24, w in 11usize..24) {
            let (a, b) = (random(h, w, seed), random(h, w, seed ^ 9));
            proptest::prop_assert_eq!(psnr(&a, &b, false).unwrap(), psnr(&b, &a, false).unwrap());
            let (s1, s2) = (ssim(&a, &b).unwrap(), ssim(&b, &a).unwrap());
            proptest::prop_assert!((s1 - s2).abs() < 1e-12);
            proptest::prop_assert!((-1.0..=1.0).contains(&s1));
        }
    }
}
