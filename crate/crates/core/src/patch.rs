//! Overlapping window extraction (unfold) and normalized overlap-add (fold).
//!
//! Windows are enumerated row-major over their origins in the zero-padded
//! grid. Each patch vector is the window flattened channel-major, then
//! row-major, the same order as [`Tensor`] itself.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Window size, stride and zero padding, in pixels.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct PatchGeometry {
    pub window: usize,
    pub stride: usize,
    pub padding: usize,
}

impl PatchGeometry {
    pub fn new(window: usize, stride: usize, padding: usize) -> Result<Self> {
        if window == 0 || stride == 0 {
            return Err(Error::Geometry(format!(
                "window {window} and stride {stride} must be at least 1"
            )));
        }
        if padding >= window {
            return Err(Error::Geometry(format!(
                "padding {padding} must be smaller than window {window}"
            )));
        }
        Ok(PatchGeometry {
            window,
            stride,
            padding,
        })
    }

    /// Window 6, stride 2, padding 2.
    pub fn default_search() -> Self {
        PatchGeometry {
            window: 6,
            stride: 2,
            padding: 2,
        }
    }

    /// Every parameter multiplied by `factor`; used to address the same
    /// patch grid on a feature map `factor` times larger.
    pub fn scaled(&self, factor: usize) -> Self {
        PatchGeometry {
            window: self.window * factor,
            stride: self.stride * factor,
            padding: self.padding * factor,
        }
    }

    /// Number of window origins along an axis of length `n`, or `None` when
    /// the window does not fit the padded axis.
    pub fn patches_along(&self, n: usize) -> Option<usize> {
        let padded = n + 2 * self.padding;
        (padded >= self.window).then(|| (padded - self.window) / self.stride + 1)
    }

    pub fn patch_len(&self, channels: usize) -> usize {
        channels * self.window * self.window
    }
}

/// `(n_h, n_w, n_h * n_w)` for a `(C, H, W)` map.
pub fn patch_count(
    dims: (usize, usize, usize),
    g: &PatchGeometry,
) -> Result<(usize, usize, usize)> {
    let (_, h, w) = dims;
    match (g.patches_along(h), g.patches_along(w)) {
        (Some(nh), Some(nw)) => Ok((nh, nw, nh * nw)),
        _ => Err(Error::Geometry(format!(
            "window {} does not fit {h}x{w} padded by {}",
            g.window, g.padding
        ))),
    }
}

/// Flattened patch matrix plus the geometry and map dimensions it folds to.
///
/// `dims` names the `(C, H, W)` map the rows are laid out over. The row
/// count is only checked against it when the set is folded, so a gathered
/// set may be relabelled onto another grid with [`PatchSet::with_dims`].
#[derive(Clone, Debug, PartialEq)]
pub struct PatchSet {
    patches: Tensor,
    geometry: PatchGeometry,
    dims: (usize, usize, usize),
}

impl PatchSet {
    pub fn new(
        patches: Tensor,
        geometry: PatchGeometry,
        dims: (usize, usize, usize),
    ) -> Result<Self> {
        let (_, len) = patches.dims2()?;
        if len != geometry.patch_len(dims.0) {
            return Err(Error::shape(format!(
                "patch length {len} does not match {} channels with window {}",
                dims.0, geometry.window
            )));
        }
        Ok(PatchSet {
            patches,
            geometry,
            dims,
        })
    }

    pub fn patches(&self) -> &Tensor {
        &self.patches
    }

    pub fn geometry(&self) -> PatchGeometry {
        self.geometry
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        self.dims
    }

    pub fn len(&self) -> usize {
        self.patches.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn patch_len(&self) -> usize {
        self.patches.shape()[1]
    }

    pub fn row(&self, i: usize) -> &[f32] {
        self.patches.row(i)
    }

    /// Same rows, laid out over another map with the same channel count.
    pub fn with_dims(self, dims: (usize, usize, usize)) -> Result<Self> {
        if dims.0 != self.dims.0 {
            return Err(Error::shape(format!(
                "cannot relabel {} channel patches as {} channels",
                self.dims.0, dims.0
            )));
        }
        Ok(PatchSet { dims, ..self })
    }
}

/// Extracts every window of `g` from the zero-padded map.
pub fn unfold(t: &Tensor, g: &PatchGeometry) -> Result<PatchSet> {
    let dims @ (c, h, w) = t.dims3()?;
    let (_, nw, n) = patch_count(dims, g)?;
    let (k, s, p) = (g.window, g.stride, g.padding);
    let len = g.patch_len(c);
    let mut data = vec![0f32; n * len];
    data.par_chunks_mut(len).enumerate().for_each(|(i, row)| {
        let oy = (i / nw) * s;
        let ox = (i % nw) * s;
        for ci in 0..c {
            let plane = t.channel(ci);
            for dy in 0..k {
                let y = oy + dy;
                if y < p || y - p >= h {
                    continue;
                }
                let src_row = &plane[(y - p) * w..(y - p + 1) * w];
                let dst = &mut row[(ci * k + dy) * k..(ci * k + dy + 1) * k];
                for (dx, d) in dst.iter_mut().enumerate() {
                    let x = ox + dx;
                    if x >= p && x - p < w {
                        *d = src_row[x - p];
                    }
                }
            }
        }
    });
    PatchSet::new(Tensor::from_raw(vec![n, len], data)?, *g, dims)
}

/// Number of windows covering each pixel of an `(H, W)` map, row-major.
pub fn coverage(h: usize, w: usize, g: &PatchGeometry) -> Result<Vec<u32>> {
    let (nh, nw, _) = patch_count((1, h, w), g)?;
    let (k, s, p) = (g.window, g.stride, g.padding);
    let mut count = vec![0u32; h * w];
    for py in 0..nh {
        for px in 0..nw {
            for dy in 0..k {
                let y = py * s + dy;
                if y < p || y - p >= h {
                    continue;
                }
                for dx in 0..k {
                    let x = px * s + dx;
                    if x >= p && x - p < w {
                        count[(y - p) * w + (x - p)] += 1;
                    }
                }
            }
        }
    }
    Ok(count)
}

/// Overlap-adds the windows back onto the map and divides by coverage.
/// Pixels no window covers are zero.
pub fn fold(ps: &PatchSet) -> Result<Tensor> {
    let (c, h, w) = ps.dims;
    let g = ps.geometry;
    let (nh, nw, n) = patch_count(ps.dims, &g)?;
    if n != ps.len() {
        return Err(Error::Geometry(format!(
            "{} patches cannot fold onto a {nh}x{nw} grid over {h}x{w}",
            ps.len()
        )));
    }
    let (k, s, p) = (g.window, g.stride, g.padding);
    let count = coverage(h, w, &g)?;
    let mut out = vec![0f32; c * h * w];
    out.par_chunks_mut(h * w)
        .enumerate()
        .for_each(|(ci, plane)| {
            for i in 0..n {
                let row = ps.row(i);
                let oy = (i / nw) * s;
                let ox = (i % nw) * s;
                for dy in 0..k {
                    let y = oy + dy;
                    if y < p || y - p >= h {
                        continue;
                    }
                    let src = &row[(ci * k + dy) * k..(ci * k + dy + 1) * k];
                    for (dx, &v) in src.iter().enumerate() {
                        let x = ox + dx;
                        if x >= p && x - p < w {
                            plane[(y - p) * w + (x - p)] += v;
                        }
                    }
                }
            }
            for (v, &cnt) in plane.iter_mut().zip(&count) {
                if cnt > 0 {
                    *v /= cnt as f32;
                }
            }
        });
    Tensor::from_raw(vec![c, h, w], out)?.finite_or("fold")
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn random_map(c: usize, h: usize, w: usize, seed: u64) -> Tensor {
        let mut s = seed.wrapping_mul(0x9E3779B97F4A7C15) | 1;
        Tensor::from_fn3(c, h, w, |_, _, _| {
            s ^= s << 13;
            s ^= s >> 7;
            s ^= s << 17;
            (s >> 40) as f32 / (1u64 << 24) as f32 - 0.5
        })
        .unwrap()
    }

    /// Window copy by explicit index arithmetic on the unpadded map.
    fn unfold_oracle(t: &Tensor, k: usize, s: usize, p: usize) -> Vec<Vec<f32>> {
        let (c, h, w) = t.dims3().unwrap();
        let nh = (h + 2 * p - k) / s + 1;
        let nw = (w + 2 * p - k) / s + 1;
        let mut rows = Vec::new();
        for py in 0..nh {
            for px in 0..nw {
                let mut row = Vec::new();
                for ci in 0..c {
                    for dy in 0..k {
                        for dx in 0..k {
                            let y = (py * s + dy) as isize - p as isize;
                            let x = (px * s + dx) as isize - p as isize;
                            let inside = y >= 0 && x >= 0 && (y as usize) < h && (x as usize) < w;
                            row.push(if inside {
                                t.at3(ci, y as usize, x as usize)
                            } else {
                                0.0
                            });
                        }
                    }
                }
                rows.push(row);
            }
        }
        rows
    }

    #[test]
    fn counts_from_the_formula() {
        let g = PatchGeometry::new(3, 1, 1).unwrap();
        assert_eq!(patch_count((1, 4, 4), &g).unwrap(), (4, 4, 16));
        assert_eq!(patch_count((256, 40, 40), &g).unwrap().2, 1600);
        assert_eq!(patch_count((1, 160, 160), &g).unwrap().2, 25600);
        let g = PatchGeometry::default_search();
        assert_eq!(patch_count((256, 40, 40), &g).unwrap(), (20, 20, 400));
        let tiles = PatchGeometry::new(4, 4, 0).unwrap();
        assert_eq!(patch_count((1, 12, 8), &tiles).unwrap(), (3, 2, 6));
    }

    #[test]
    fn invalid_geometries() {
        assert!(PatchGeometry::new(0, 1, 0).is_err());
        assert!(PatchGeometry::new(3, 0, 0).is_err());
        assert!(PatchGeometry::new(3, 1, 3).is_err());
        let g = PatchGeometry::new(6, 1, 1).unwrap();
        let t = Tensor::zeros(vec![1, 3, 3]).unwrap();
        assert!(matches!(unfold(&t, &g), Err(Error::Geometry(_))));
    }

    #[test]
    fn unfold_matches_index_oracle_exhaustively() {
        let t = random_map(2, 7, 9, 3);
        for k in 1..=4 {
            for s in 1..=3 {
                for p in 0..=2.min(k - 1) {
                    let g = PatchGeometry::new(k, s, p).unwrap();
                    let ps = unfold(&t, &g).unwrap();
                    let oracle = unfold_oracle(&t, k, s, p);
                    assert_eq!(ps.len(), oracle.len());
                    for (i, row) in oracle.iter().enumerate() {
                        assert_eq!(ps.row(i), &row[..], "k={k} s={s} p={p} row {i}");
                    }
                }
            }
        }
    }

    #[test]
    fn coverage_matches_brute_force_count() {
        let g = PatchGeometry::new(3, 2, 1).unwrap();
        let count = coverage(5, 5, &g).unwrap();
        // For each pixel, count the origins whose window contains it.
        let origins: Vec<isize> = (0..3).map(|o| 2 * o - 1).collect();
        for y in 0..5isize {
            for x in 0..5isize {
                let mut n = 0;
                for &oy in &origins {
                    for &ox in &origins {
                        if (oy..oy + 3).contains(&y) && (ox..ox + 3).contains(&x) {
                            n += 1;
                        }
                    }
                }
                assert_eq!(count[(y * 5 + x) as usize], n, "pixel ({y}, {x})");
            }
        }
        assert_eq!(count[0], 1);
        assert_eq!(count[6], 4);
    }

    #[test]
    fn single_patch_folds_to_itself() {
        let t = random_map(3, 5, 5, 11);
        let g = PatchGeometry::new(5, 1, 0).unwrap();
        let ps = unfold(&t, &g).unwrap();
        assert_eq!(ps.len(), 1);
        assert_eq!(ps.row(0), t.data());
        assert_eq!(fold(&ps).unwrap(), t);
    }

    #[test]
    fn fold_rejects_inconsistent_rows() {
        let t = random_map(1, 6, 6, 2);
        let ps = unfold(&t, &PatchGeometry::new(2, 2, 0).unwrap()).unwrap();
        let relabelled = ps.with_dims((1, 8, 8)).unwrap();
        assert!(matches!(fold(&relabelled), Err(Error::Geometry(_))));
    }

    proptest! {
        #[test]
        fn fold_inverts_unfold_with_full_coverage(
            c in 1usize..3, h in 1usize..12, w in 1usize..12,
            k in 1usize..5, s in 1usize..4, p in 0usize..3, seed in any::<u64>(),
        ) {
            prop_assume!(p < k);
            let g = PatchGeometry::new(k, s, p).unwrap();
            prop_assume!(patch_count((c, h, w), &g).is_ok());
            let cov = coverage(h, w, &g).unwrap();
            let t = random_map(c, h, w, seed);
            let ps = unfold(&t, &g).unwrap();
            prop_assert_eq!(ps.len(), patch_count((c, h, w), &g).unwrap().2);
            let back = fold(&ps).unwrap();
            for ci in 0..c {
                for i in 0..h * w {
                    let (a, b) = (back.channel(ci)[i], t.channel(ci)[i]);
                    if cov[i] > 0 {
                        prop_assert!((a - b).abs() <= 1e-6);
                    } else {
                        prop_assert_eq!(a, 0.0);
                    }
                }
            }
        }
    }
}
