//! Bicubic and bilinear resampling with half-pixel centers.
//!
//! Output pixel `i` samples source coordinate `(i + 0.5) * in / out - 0.5`.
//! Taps falling outside the image are clamped to the border.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Cubic convolution parameter (Catmull-Rom).
pub const CUBIC_A: f64 = -0.5;

/// Axis-uniform rational scale factor `numerator / denominator`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ScaleSpec {
    numerator: usize,
    denominator: usize,
}

impl ScaleSpec {
    pub fn new(numerator: usize, denominator: usize) -> Result<Self> {
        if numerator == 0 || denominator == 0 {
            return Err(Error::Param(format!(
                "scale {numerator}/{denominator} must be positive"
            )));
        }
        Ok(ScaleSpec {
            numerator,
            denominator,
        })
    }

    pub fn up(factor: usize) -> Result<Self> {
        Self::new(factor, 1)
    }

    pub fn down(factor: usize) -> Result<Self> {
        Self::new(1, factor)
    }

    /// `round(n * factor)`, halves rounded up.
    pub fn apply(&self, n: usize) -> usize {
        (2 * n * self.numerator + self.denominator) / (2 * self.denominator)
    }
}

/// Keys cubic convolution kernel.
pub fn cubic_weight(x: f64) -> f64 {
    let a = CUBIC_A;
    let x = x.abs();
    if x <= 1.0 {
        ((a + 2.0) * x - (a + 3.0)) * x * x + 1.0
    } else if x < 2.0 {
        ((a * x - 5.0 * a) * x + 8.0 * a) * x - 4.0 * a
    } else {
        0.0
    }
}

struct Taps<const N: usize> {
    index: Vec<[usize; N]>,
    weight: Vec<[f32; N]>,
}

fn source_coord(i: usize, in_len: usize, out_len: usize) -> f64 {
    (i as f64 + 0.5) * (in_len as f64 / out_len as f64) - 0.5
}

fn cubic_taps(in_len: usize, out_len: usize) -> Taps<4> {
    let mut index = Vec::with_capacity(out_len);
    let mut weight = Vec::with_capacity(out_len);
    for i in 0..out_len {
        let src = source_coord(i, in_len, out_len);
        let base = src.floor();
        let mut idx = [0usize; 4];
        let mut w = [0f64; 4];
        for (t, (ix, wt)) in idx.iter_mut().zip(w.iter_mut()).enumerate() {
            let p = base + t as f64 - 1.0;
            *ix = p.clamp(0.0, (in_len - 1) as f64) as usize;
            *wt = cubic_weight(src - p);
        }
        let sum: f64 = w.iter().sum();
        index.push(idx);
        weight.push(w.map(|v| (v / sum) as f32));
    }
    Taps { index, weight }
}

fn linear_taps(in_len: usize, out_len: usize) -> Taps<2> {
    let mut index = Vec::with_capacity(out_len);
    let mut weight = Vec::with_capacity(out_len);
    for i in 0..out_len {
        let src = source_coord(i, in_len, out_len).clamp(0.0, (in_len - 1) as f64);
        let lo = src.floor() as usize;
        let hi = (lo + 1).min(in_len - 1);
        let frac = (src - lo as f64) as f32;
        index.push([lo, hi]);
        weight.push([1.0 - frac, frac]);
    }
    Taps { index, weight }
}

fn separable<const N: usize>(
    t: &Tensor,
    out_h: usize,
    out_w: usize,
    rows: &Taps<N>,
    cols: &Taps<N>,
) -> Result<Tensor> {
    let (c, h, w) = t.dims3()?;
    let mut out = vec![0f32; c * out_h * out_w];
    out.par_chunks_mut(out_h * out_w)
        .enumerate()
        .for_each(|(ci, dst)| {
            let src = t.channel(ci);
            // Horizontal pass into an (h, out_w) buffer, then vertical.
            let mut mid = vec![0f32; h * out_w];
            for y in 0..h {
                let row = &src[y * w..(y + 1) * w];
                let mrow = &mut mid[y * out_w..(y + 1) * out_w];
                for (x, m) in mrow.iter_mut().enumerate() {
                    let (idx, wt) = (&cols.index[x], &cols.weight[x]);
                    let mut acc = 0f32;
                    for t in 0..N {
                        acc += wt[t] * row[idx[t]];
                    }
                    *m = acc;
                }
            }
            for y in 0..out_h {
                let (idx, wt) = (&rows.index[y], &rows.weight[y]);
                let drow = &mut dst[y * out_w..(y + 1) * out_w];
                for (t, &i) in idx.iter().enumerate() {
                    let wv = wt[t];
                    let mrow = &mid[i * out_w..(i + 1) * out_w];
                    for (d, &m) in drow.iter_mut().zip(mrow) {
                        *d += wv * m;
                    }
                }
            }
        });
    Tensor::from_raw(vec![c, out_h, out_w], out)?.finite_or("resample")
}

/// Bicubic resize of a `(C, H, W)` tensor to explicit output dimensions.
pub fn bicubic_resize_to(t: &Tensor, out_h: usize, out_w: usize) -> Result<Tensor> {
    let (_, h, w) = t.dims3()?;
    if out_h == 0 || out_w == 0 {
        return Err(Error::shape(format!(
            "bicubic resize of {h}x{w} to {out_h}x{out_w} has an empty output"
        )));
    }
    separable(
        t,
        out_h,
        out_w,
        &cubic_taps(h, out_h),
        &cubic_taps(w, out_w),
    )
}

/// Bicubic resize by a rational factor; output dims are `round(n * factor)`.
pub fn bicubic_resize(t: &Tensor, spec: ScaleSpec) -> Result<Tensor> {
    let (_, h, w) = t.dims3()?;
    bicubic_resize_to(t, spec.apply(h), spec.apply(w))
}

/// Bilinear resize to explicit output dimensions.
pub fn bilinear_resize_to(t: &Tensor, out_h: usize, out_w: usize) -> Result<Tensor> {
    let (_, h, w) = t.dims3()?;
    if out_h == 0 || out_w == 0 {
        return Err(Error::shape(format!(
            "bilinear resize of {h}x{w} to {out_h}x{out_w} has an empty output"
        )));
    }
    separable(
        t,
        out_h,
        out_w,
        &linear_taps(h, out_h),
        &linear_taps(w, out_w),
    )
}

fn mirror(i: usize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n - 1);
    let m = i % period;
    if m < n {
        m
    } else {
        period - m
    }
}

/// Bicubic downsample by `factor` followed by bicubic upsample by `factor`.
///
/// Sizes that are not multiples of `factor` are reflect-padded on the bottom
/// and right edges first, and the result is cropped back, so the output
/// shape always equals the input shape.
pub fn down_up(t: &Tensor, factor: usize) -> Result<Tensor> {
    if factor == 0 {
        return Err(Error::Param("down_up factor must be positive".into()));
    }
    let (c, h, w) = t.dims3()?;
    if factor == 1 {
        return Ok(t.clone());
    }
    let ph = h.div_ceil(factor) * factor;
    let pw = w.div_ceil(factor) * factor;
    let padded = if (ph, pw) == (h, w) {
        t.clone()
    } else {
        Tensor::from_fn3(c, ph, pw, |ci, y, x| t.at3(ci, mirror(y, h), mirror(x, w)))?
    };
    let low = bicubic_resize_to(&padded, ph / factor, pw / factor)?;
    let up = bicubic_resize_to(&low, ph, pw)?;
    if (ph, pw) == (h, w) {
        Ok(up)
    } else {
        Tensor::from_fn3(c, h, w, |ci, y, x| up.at3(ci, y, x))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp(c: usize, h: usize, w: usize) -> Tensor {
        Tensor::from_fn3(c, h, w, |ci, y, x| {
            (ci as f32 + 1.0) * (0.1 * x as f32 + 0.07 * y as f32)
        })
        .unwrap()
    }

    /// Direct two-dimensional kernel sum with clamped taps.
    fn bicubic_oracle(t: &Tensor, oh: usize, ow: usize) -> Tensor {
        let (c, h, w) = t.dims3().unwrap();
        Tensor::from_fn3(c, oh, ow, |ci, oy, ox| {
            let sy = (oy as f64 + 0.5) * h as f64 / oh as f64 - 0.5;
            let sx = (ox as f64 + 0.5) * w as f64 / ow as f64 - 0.5;
            let (mut acc, mut norm) = (0f64, 0f64);
            for j in -1..=2 {
                for i in -1..=2 {
                    let py = sy.floor() + j as f64;
                    let px = sx.floor() + i as f64;
                    let wgt = cubic_weight(sy - py) * cubic_weight(sx - px);
                    let yy = py.clamp(0.0, (h - 1) as f64) as usize;
                    let xx = px.clamp(0.0, (w - 1) as f64) as usize;
                    acc += wgt * t.at3(ci, yy, xx) as f64;
                    norm += wgt;
                }
            }
            (acc / norm) as f32
        })
        .unwrap()
    }

    #[test]
    fn kernel_values() {
        assert_eq!(cubic_weight(0.0), 1.0);
        assert_eq!(cubic_weight(1.0), 0.0);
        assert_eq!(cubic_weight(2.0), 0.0);
        assert!((cubic_weight(0.5) - 0.5625).abs() < 1e-12);
        assert!((cubic_weight(1.5) + 0.0625).abs() < 1e-12);
    }

    #[test]
    fn identity_at_unit_scale() {
        let t = ramp(2, 5, 7);
        let out = bicubic_resize(&t, ScaleSpec::up(1).unwrap()).unwrap();
        for (a, b) in out.data().iter().zip(t.data()) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn constants_are_preserved() {
        let t = Tensor::full(vec![2, 6, 5], 0.37).unwrap();
        for spec in [(2, 1), (1, 2), (4, 1), (1, 4), (3, 2), (2, 3)] {
            let out = bicubic_resize(&t, ScaleSpec::new(spec.0, spec.1).unwrap()).unwrap();
            assert!(
                out.data().iter().all(|v| (v - 0.37).abs() < 1e-6),
                "{spec:?}"
            );
        }
        let out = bilinear_resize_to(&t, 13, 3).unwrap();
        assert!(out.data().iter().all(|v| (v - 0.37).abs() < 1e-6));
    }

    #[test]
    fn upsampled_ramp_matches_kernel_sum_oracle() {
        let t = Tensor::from_fn3(1, 8, 8, |_, y, x| (x * 8 + y) as f32 / 64.0).unwrap();
        let out = bicubic_resize(&t, ScaleSpec::up(2).unwrap()).unwrap();
        assert_eq!(out.shape(), &[1, 16, 16]);
        let oracle = bicubic_oracle(&t, 16, 16);
        for (a, b) in out.data().iter().zip(oracle.data()) {
            assert!((a - b).abs() < 1e-5, "{a} vs {b}");
        }
    }

    #[test]
    fn non_integer_factors_match_oracle() {
        let t = Tensor::from_fn3(2, 7, 9, |c, y, x| {
            ((c * 31 + y * 7 + x * 3) % 11) as f32 / 10.0
        })
        .unwrap();
        for (oh, ow) in [(3, 4), (11, 5), (14, 18)] {
            let out = bicubic_resize_to(&t, oh, ow).unwrap();
            let oracle = bicubic_oracle(&t, oh, ow);
            for (a, b) in out.data().iter().zip(oracle.data()) {
                assert!((a - b).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn empty_output_is_an_error() {
        let t = Tensor::zeros(vec![1, 2, 2]).unwrap();
        assert!(bicubic_resize(&t, ScaleSpec::down(8).unwrap()).is_err());
        assert!(ScaleSpec::new(0, 1).is_err());
    }

    #[test]
    fn down_up_preserves_shape_and_constants() {
        let t = Tensor::full(vec![3, 13, 10], 0.25).unwrap();
        let out = down_up(&t, 4).unwrap();
        assert_eq!(out.shape(), t.shape());
        assert!(out.data().iter().all(|v| (v - 0.25).abs() < 1e-6));
        let r = ramp(1, 9, 6);
        assert_eq!(down_up(&r, 1).unwrap(), r);
    }

    #[test]
    fn bilinear_interpolates_between_centers() {
        let t = Tensor::new(vec![1, 1, 2], vec![0.0, 1.0]).unwrap();
        let out = bilinear_resize_to(&t, 1, 4).unwrap();
        assert_eq!(out.data(), &[0.0, 0.25, 0.75, 1.0]);
    }

    proptest::proptest! {
        #[test]
        fn constant_maps_stay_constant(v in 0.0f32..1.0, h in 1usize..12, w in 1usize..12, oh in 1usize..30, ow in 1usize..30) {
            let t = Tensor::full(vec![2, h, w], v).unwrap();
            let out = bicubic_resize_to(&t, oh, ow).unwrap();
            proptest::prop_assert!(out.data().iter().all(|x| (x - v).abs() <= 1e-6));
        }

        #[test]
        fn down_up_keeps_shape(h in 1usize..40, w in 1usize..40, f in 1usize..5) {
            let t = ramp(1, h, w);
            let out = down_up(&t, f).unwrap();
            proptest::prop_assert_eq!(out.shape(), t.shape());
        }
    }

    #[test]
    fn down_up_smooths_a_checkerboard() {
        let t = Tensor::from_fn3(1, 160, 160, |_, y, x| ((x + y) % 2) as f32).unwrap();
        let before = crate::gradient::gradient_density(&t).unwrap().sum();
        let after = crate::gradient::gradient_density(&down_up(&t, 4).unwrap())
            .unwrap()
            .sum();
        assert!(after < before, "{after} >= {before}");
    }
}
