//! Two-stage patch correlation search and texture gathering.
//!
//! Stage one correlates every query patch against every key patch and keeps
//! the arg-max key per query. The selected keys form a new candidate set
//! (one row per query, duplicates kept), and stage two re-correlates every
//! query against that whole set, keeping the `u` best per query. Re-search
//! indices are composed with the stage-one indices so they address the
//! original key rows, which are also the value rows to gather textures from.
//!
//! Scores use one fixed arithmetic recipe so that results are reproducible
//! bit for bit:
//!
//! * a patch is normalized by its Euclidean norm accumulated in `f64`, each
//!   component divided in `f64` and rounded to `f32`;
//! * a patch whose norm is below [`ZERO_NORM`] becomes the zero vector, so it
//!   correlates as exactly `0` with everything;
//! * a score is the sequential `f64` sum of component products in patch
//!   order, rounded to `f32`.
//!
//! Ties in arg-max and top-`u` go to the lowest key index.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::patch::{fold, patch_count, unfold, PatchGeometry, PatchSet};
use crate::tensor::{IndexTensor, Tensor};

/// Norm below which a patch is treated as all-zero.
pub const ZERO_NORM: f64 = 1e-12;

/// Slack allowed on the `[-1, 1]` bound of normalized scores.
pub const SCORE_BOUND_EPS: f32 = 1e-5;

/// Row-wise unit vectors of a patch set, flattened.
pub fn normalize_rows(ps: &PatchSet) -> Vec<f32> {
    let len = ps.patch_len();
    let mut out = vec![0f32; ps.len() * len];
    out.par_chunks_mut(len).enumerate().for_each(|(i, dst)| {
        let row = ps.row(i);
        let norm = row
            .iter()
            .fold(0f64, |acc, &v| acc + v as f64 * v as f64)
            .sqrt();
        if norm >= ZERO_NORM {
            for (d, &v) in dst.iter_mut().zip(row) {
                *d = (v as f64 / norm) as f32;
            }
        }
    });
    out
}

#[inline]
fn dot(a: &[f32], b: &[f32]) -> f32 {
    let mut acc = 0f64;
    for (&x, &y) in a.iter().zip(b) {
        acc += x as f64 * y as f64;
    }
    acc as f32
}

/// Query-by-key matrix of normalized inner products.
#[derive(Clone, Debug, PartialEq)]
pub struct CorrelationMatrix {
    values: Tensor,
}

impl CorrelationMatrix {
    pub fn values(&self) -> &Tensor {
        &self.values
    }

    pub fn n_queries(&self) -> usize {
        self.values.shape()[0]
    }

    pub fn n_keys(&self) -> usize {
        self.values.shape()[1]
    }

    pub fn row(&self, i: usize) -> &[f32] {
        self.values.row(i)
    }
}

fn check_lengths(q: &PatchSet, k: &PatchSet) -> Result<()> {
    if q.patch_len() != k.patch_len() {
        return Err(Error::shape(format!(
            "query patches have length {} but key patches {}",
            q.patch_len(),
            k.patch_len()
        )));
    }
    Ok(())
}

/// Materializes the full `N_q x N_k` correlation matrix.
pub fn correlate(q: &PatchSet, k: &PatchSet) -> Result<CorrelationMatrix> {
    check_lengths(q, k)?;
    correlate_normalized(&normalize_rows(q), &normalize_rows(k), q.patch_len())
}

/// Correlation matrix of rows already passed through [`normalize_rows`],
/// each `len` long.
pub fn correlate_normalized(qn: &[f32], kn: &[f32], len: usize) -> Result<CorrelationMatrix> {
    if len == 0 || !qn.len().is_multiple_of(len) || !kn.len().is_multiple_of(len) {
        return Err(Error::shape(format!(
            "buffers of {} and {} values do not split into rows of {len}",
            qn.len(),
            kn.len()
        )));
    }
    let (n_q, n_k) = (qn.len() / len, kn.len() / len);
    let mut values = vec![0f32; n_q * n_k];
    values
        .par_chunks_mut(n_k.max(1))
        .zip(qn.par_chunks(len))
        .for_each(|(dst, qi)| {
            for (d, kj) in dst.iter_mut().zip(kn.chunks(len)) {
                *d = dot(qi, kj);
            }
        });
    Ok(CorrelationMatrix {
        values: Tensor::from_raw(vec![n_q, n_k], values)?,
    })
}

/// Best `u` entries of a score row: descending score, then ascending index.
pub fn top_u_of_row(scores: impl IntoIterator<Item = f32>, u: usize) -> Vec<(usize, f32)> {
    let mut best: Vec<(usize, f32)> = Vec::with_capacity(u + 1);
    for (j, s) in scores.into_iter().enumerate() {
        if best.len() == u && s <= best[u - 1].1 {
            continue;
        }
        let pos = best.partition_point(|&(_, b)| b >= s);
        best.insert(pos, (j, s));
        best.truncate(u);
    }
    best
}

/// Per-row arg-max, lowest index on ties.
pub fn hard_select(c: &CorrelationMatrix) -> IndexTensor {
    let idx: Vec<usize> = (0..c.n_queries())
        .into_par_iter()
        .map(|i| top_u_of_row(c.row(i).iter().copied(), 1)[0].0)
        .collect();
    IndexTensor::new(vec![idx.len()], idx).expect("correlation matrices are non-empty")
}

/// Copies rows of `src` in the order given by `idx`. The result keeps
/// `src`'s geometry and dims; relabel with [`PatchSet::with_dims`] before
/// folding onto another grid.
pub fn gather(src: &PatchSet, idx: &[usize]) -> Result<PatchSet> {
    if idx.is_empty() {
        return Err(Error::Param("gather with no indices".into()));
    }
    if let Some(&bad) = idx.iter().find(|&&i| i >= src.len()) {
        return Err(Error::Param(format!(
            "gather index {bad} out of range for {} patches",
            src.len()
        )));
    }
    let len = src.patch_len();
    let mut data = vec![0f32; idx.len() * len];
    data.par_chunks_mut(len)
        .zip(idx.par_iter())
        .for_each(|(dst, &i)| dst.copy_from_slice(src.row(i)));
    PatchSet::new(
        Tensor::from_raw(vec![idx.len(), len], data)?,
        src.geometry(),
        src.dims(),
    )
}

/// Hard indices `H` and soft scores `S`, both `(u, N_q)`.
///
/// Row `t` holds the `t`-th best match of every query, so each column of
/// `S` is non-increasing.
#[derive(Clone, Debug, PartialEq)]
pub struct MatchResult {
    indices: IndexTensor,
    scores: Tensor,
    grid: (usize, usize),
}

impl MatchResult {
    fn from_rows(rows: Vec<Vec<(usize, f32)>>, u: usize, grid: (usize, usize)) -> Result<Self> {
        let n_q = rows.len();
        let mut indices = vec![0usize; u * n_q];
        let mut scores = vec![0f32; u * n_q];
        for (i, row) in rows.iter().enumerate() {
            for (t, &(j, s)) in row.iter().enumerate() {
                indices[t * n_q + i] = j;
                scores[t * n_q + i] = s;
            }
        }
        Ok(MatchResult {
            indices: IndexTensor::new(vec![u, n_q], indices)?,
            scores: Tensor::from_raw(vec![u, n_q], scores)?,
            grid,
        })
    }

    pub fn indices(&self) -> &IndexTensor {
        &self.indices
    }

    pub fn scores(&self) -> &Tensor {
        &self.scores
    }

    pub fn top_u(&self) -> usize {
        self.indices.shape()[0]
    }

    pub fn n_queries(&self) -> usize {
        self.indices.shape()[1]
    }

    /// `(n_h, n_w)` patch grid of the queries; `n_h * n_w == n_queries()`.
    pub fn grid(&self) -> (usize, usize) {
        self.grid
    }

    pub fn index_row(&self, t: usize) -> &[usize] {
        self.indices.row(t)
    }

    pub fn score_row(&self, t: usize) -> &[f32] {
        self.scores.row(t)
    }

    /// Sends every index through `map`: `H[t, i] -> map[H[t, i]]`.
    pub fn remap(&self, map: &[usize]) -> Result<Self> {
        let data = self
            .indices
            .data()
            .iter()
            .map(|&j| {
                map.get(j).copied().ok_or_else(|| {
                    Error::Param(format!("remap index {j} out of range {}", map.len()))
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(MatchResult {
            indices: IndexTensor::new(self.indices.shape().to_vec(), data)?,
            scores: self.scores.clone(),
            grid: self.grid,
        })
    }
}

fn grid_of(q: &PatchSet) -> (usize, usize) {
    match patch_count(q.dims(), &q.geometry()) {
        Ok((nh, nw, n)) if n == q.len() => (nh, nw),
        _ => (1, q.len()),
    }
}

fn top_u_rows(q: &PatchSet, k: &PatchSet, u: usize) -> Result<Vec<Vec<(usize, f32)>>> {
    check_lengths(q, k)?;
    if u == 0 || u > k.len() {
        return Err(Error::Param(format!(
            "top-u of {u} needs 1 <= u <= {} candidates",
            k.len()
        )));
    }
    let len = q.patch_len();
    let (qn, kn) = (normalize_rows(q), normalize_rows(k));
    Ok(qn
        .par_chunks(len)
        .map(|qi| top_u_of_row(kn.chunks(len).map(|kj| dot(qi, kj)), u))
        .collect())
}

/// Stage-two search: the `u` best rows of `k_selected` for every query.
/// Indices address rows of `k_selected`.
pub fn research_topk(q: &PatchSet, k_selected: &PatchSet, u: usize) -> Result<MatchResult> {
    let rows = top_u_rows(q, k_selected, u)?;
    MatchResult::from_rows(rows, u, grid_of(q))
}

/// Gathered value patches `T_1 .. T_u`, laid out over the query grid.
#[derive(Clone, Debug, PartialEq)]
pub struct TextureStack {
    layers: Vec<PatchSet>,
}

impl TextureStack {
    pub fn layers(&self) -> &[PatchSet] {
        &self.layers
    }

    pub fn len(&self) -> usize {
        self.layers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.layers.is_empty()
    }

    /// Folds every layer back into a `(C, H, W)` map.
    pub fn fold_maps(&self) -> Result<Vec<Tensor>> {
        self.layers.iter().map(fold).collect()
    }
}

/// Integer ratio between a value map and the key map, per axis.
fn scale_between(key: (usize, usize), value: (usize, usize)) -> Result<usize> {
    let (hk, wk) = key;
    let (hv, wv) = value;
    if hv % hk == 0 && wv % wk == 0 && hv / hk == wv / wk && hv >= hk {
        Ok(hv / hk)
    } else {
        Err(Error::shape(format!(
            "value map {hv}x{wv} is not an integer multiple of key map {hk}x{wk}"
        )))
    }
}

/// Gathers value patches for every row of `indices` (`(u, N_q)`, addressing
/// key rows). `value` is unfolded with `g` scaled by its size ratio to the
/// key map, and the textures are laid out over the query map scaled the
/// same way.
pub fn transfer(
    value: &Tensor,
    key_hw: (usize, usize),
    query_hw: (usize, usize),
    g: &PatchGeometry,
    indices: &IndexTensor,
) -> Result<TextureStack> {
    let (cv, hv, wv) = value.dims3()?;
    let f = scale_between(key_hw, (hv, wv))?;
    let gv = g.scaled(f);
    let vp = unfold(value, &gv)?;
    let (_, _, n_k) = patch_count((1, key_hw.0, key_hw.1), g)?;
    if vp.len() != n_k {
        return Err(Error::Geometry(format!(
            "value map yields {} patches but the key map has {n_k}",
            vp.len()
        )));
    }
    let target = (cv, f * query_hw.0, f * query_hw.1);
    let (u, _) = (indices.shape()[0], indices.shape()[1]);
    let layers = (0..u)
        .map(|t| gather(&vp, indices.row(t))?.with_dims(target))
        .collect::<Result<Vec<_>>>()?;
    Ok(TextureStack { layers })
}

/// Everything the two-stage search produces.
#[derive(Clone, Debug)]
pub struct SearchOutcome {
    /// Stage-one arg-max key index per query (`H'`).
    pub stage1: Vec<usize>,
    /// Top-`u` result with indices remapped to original key rows.
    pub result: MatchResult,
    pub textures: TextureStack,
}

/// Full search: unfold, correlate, arg-max, gather, re-search top-`u`,
/// remap, and gather textures from `v`.
///
/// `q` and `k` must share a channel count. `v` may be an integer multiple
/// of `k`'s spatial size; its patches are then taken with the scaled
/// geometry so rows line up with `k`'s.
pub fn two_stage_search(
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    g: &PatchGeometry,
    u: usize,
) -> Result<SearchOutcome> {
    let (_, hq, wq) = q.dims3()?;
    let (_, hk, wk) = k.dims3()?;
    let (stage1, result) = search_indices(q, k, g, u)?;
    let textures = transfer(v, (hk, wk), (hq, wq), g, result.indices())?;
    Ok(SearchOutcome {
        stage1,
        result,
        textures,
    })
}

/// Both search stages without texture gathering. Returns the stage-one
/// index vector and the remapped top-`u` result.
pub fn search_indices(
    q: &Tensor,
    k: &Tensor,
    g: &PatchGeometry,
    u: usize,
) -> Result<(Vec<usize>, MatchResult)> {
    let qp = unfold(q, g)?;
    let kp = unfold(k, g)?;
    if u == 0 || u > qp.len() {
        return Err(Error::Param(format!(
            "top-u of {u} needs 1 <= u <= {} selected patches",
            qp.len()
        )));
    }
    let stage1: Vec<usize> = top_u_rows(&qp, &kp, 1)?
        .into_iter()
        .map(|row| row[0].0)
        .collect();
    let k_selected = gather(&kp, &stage1)?;
    let local = research_topk(&qp, &k_selected, u)?;
    let result = local.remap(&stage1)?;
    Ok((stage1, result))
}

/// Histogram of scores over `[-1, 1]` in `bins` equal buckets.
pub fn score_histogram(scores: &[f32], bins: usize) -> Vec<usize> {
    let mut hist = vec![0usize; bins];
    for &s in scores {
        let pos = ((s.clamp(-1.0, 1.0) + 1.0) / 2.0 * bins as f32) as usize;
        hist[pos.min(bins - 1)] += 1;
    }
    hist
}
