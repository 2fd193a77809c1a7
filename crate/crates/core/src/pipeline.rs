//! End-to-end forward super-resolution at a fixed 4x scale.

use std::path::PathBuf;

use crate::error::{Error, Result, StageContext};
use crate::features::{extract_features, Extractor, FeaturePyramid, Role};
use crate::gradient::{grad_feature_extractor, gradient_density};
use crate::image::{from_tensor, to_tensor, ImageU8};
use crate::matcher::{search_indices, transfer, MatchResult};
use crate::patch::PatchGeometry;
use crate::resample::{bicubic_resize_to, bilinear_resize_to, down_up};
use crate::synthesis::{
    csfi, gde_merge, ife_forward, merge_ftt, CsfiOutput, NetworkLayout, Networks,
};
use crate::tensor::Tensor;
use crate::weights::WeightManifest;

pub const SCALE: usize = 4;
pub const DEFAULT_SEED: u64 = 0;

/// Everything that selects the pipeline's behaviour.
#[derive(Clone, Debug, PartialEq)]
pub struct PipelineConfig {
    pub geometry: PatchGeometry,
    pub top_u: usize,
    pub extractor: Extractor,
    /// Weight manifest; seeded random weights when absent.
    pub manifest: Option<PathBuf>,
    pub seed: u64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            geometry: PatchGeometry::default_search(),
            top_u: 1,
            extractor: Extractor::BuiltinRandom { seed: DEFAULT_SEED },
            manifest: None,
            seed: DEFAULT_SEED,
        }
    }
}

fn parse_num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value.parse().map_err(|_| {
        Error::Config(format!(
            "`{key}` expects a non-negative integer, got `{value}`"
        ))
    })
}

impl PipelineConfig {
    /// Parses `key = value` lines. Blank lines and `#` comments are
    /// skipped; unknown keys are errors. `extractor` may name
    /// `builtin-random` without a seed, which then follows `seed`.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = PipelineConfig::default();
        let (mut k, mut s, mut p) = (
            cfg.geometry.window,
            cfg.geometry.stride,
            cfg.geometry.padding,
        );
        let mut extractor = None;
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .map(|(a, b)| (a.trim(), b.trim()))
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value", n + 1)))?;
            match key {
                "window" => k = parse_num(key, value)?,
                "stride" => s = parse_num(key, value)?,
                "pad" => p = parse_num(key, value)?,
                "top_u" => cfg.top_u = parse_num(key, value)?,
                "seed" => cfg.seed = parse_num(key, value)?,
                "extractor" => extractor = Some(value.to_string()),
                "manifest" => cfg.manifest = Some(value.into()),
                other => {
                    return Err(Error::Config(format!(
                        "line {}: unknown key `{other}`",
                        n + 1
                    )))
                }
            }
        }
        cfg.geometry = PatchGeometry::new(k, s, p)?;
        cfg.extractor =
            Extractor::parse(extractor.as_deref().unwrap_or("builtin-random"), cfg.seed)?;
        if cfg.top_u == 0 {
            return Err(Error::Config("top_u must be at least 1".into()));
        }
        Ok(cfg)
    }

    /// Loads the manifest if one is configured, otherwise draws seeded
    /// random weights.
    pub fn networks(&self) -> Result<Networks> {
        let layout = NetworkLayout::new(self.top_u);
        match &self.manifest {
            Some(path) => Networks::from_manifest(&WeightManifest::load(path)?, layout),
            None => Networks::random(layout, self.seed),
        }
    }
}

/// Intermediate results of one forward run, exposed for inspection.
#[derive(Clone, Debug)]
pub struct PipelineTrace {
    pub lr_up: Tensor,
    pub ref_du: Tensor,
    pub query: FeaturePyramid,
    pub key: FeaturePyramid,
    pub value: FeaturePyramid,
    pub stage1: Vec<usize>,
    pub matches: MatchResult,
    /// Folded textures per level (index level - 1), one map per rank.
    pub textures: [Vec<Tensor>; 3],
    /// Pixel-resolution score maps per level, one per rank.
    pub score_maps: [Vec<Tensor>; 3],
    pub features: [Tensor; 3],
    pub merged: [Tensor; 3],
    pub csfi: CsfiOutput,
    pub gradient: Tensor,
    pub gradient_features: Tensor,
    /// Clamped to `[0, 1]`.
    pub sr: Tensor,
}

/// Reshapes each score row to the query patch grid and resizes it
/// bilinearly to `(h, w)`.
pub fn score_maps(m: &MatchResult, h: usize, w: usize) -> Result<Vec<Tensor>> {
    let (nh, nw) = m.grid();
    (0..m.top_u())
        .map(|t| {
            let grid = Tensor::new(vec![1, nh, nw], m.score_row(t).to_vec())?;
            bilinear_resize_to(&grid, h, w)
        })
        .collect()
}

/// Crops the reference so its sides are multiples of the scale; the key
/// pyramid then divides the value pyramid evenly at every level.
fn crop_reference(t: &Tensor) -> Result<Tensor> {
    let (c, h, w) = t.dims3()?;
    let (ch, cw) = (h - h % SCALE, w - w % SCALE);
    if ch == 0 || cw == 0 {
        return Err(Error::shape(format!(
            "reference {h}x{w} is smaller than {SCALE}x{SCALE}"
        )));
    }
    if (ch, cw) == (h, w) {
        return Ok(t.clone());
    }
    Tensor::from_fn3(c, ch, cw, |ci, y, x| t.at3(ci, y, x))
}

/// Search result between an LR image and a reference, without synthesis.
#[derive(Clone, Debug)]
pub struct MatchRun {
    pub stage1: Vec<usize>,
    pub result: MatchResult,
    pub n_keys: usize,
}

/// Matches the deepest query features of the upsampled `lr` against the
/// deepest key features of the degraded reference.
pub fn match_images(lr: &Tensor, reference: &Tensor, cfg: &PipelineConfig) -> Result<MatchRun> {
    let (_, h, w) = lr.dims3().stage("input")?;
    let reference = crop_reference(reference).stage("input")?;
    let lr_up = bicubic_resize_to(lr, h * SCALE, w * SCALE).stage("resample")?;
    let ref_du = down_up(&reference, SCALE).stage("resample")?;
    let query = extract_features(&lr_up, &cfg.extractor, Role::Query).stage("features")?;
    let key = extract_features(&ref_du, &cfg.extractor, Role::Key).stage("features")?;
    let (_, hk, wk) = key.level(3).dims3()?;
    let (stage1, result) =
        search_indices(query.level(3), key.level(3), &cfg.geometry, cfg.top_u).stage("search")?;
    let (_, _, n_keys) = crate::patch::patch_count((1, hk, wk), &cfg.geometry).stage("search")?;
    Ok(MatchRun {
        stage1,
        result,
        n_keys,
    })
}

/// Runs the pipeline on `(3, h, w)` and `(3, H, W)` tensors in `[0, 1]`.
pub fn run_traced(
    lr: &Tensor,
    reference: &Tensor,
    cfg: &PipelineConfig,
    nets: &Networks,
) -> Result<PipelineTrace> {
    let (c, h, w) = lr.dims3().stage("input")?;
    if c != 3 || reference.dims3().stage("input")?.0 != 3 {
        return Err(Error::shape("inputs must be RGB")).stage("input");
    }
    let reference = crop_reference(reference).stage("input")?;
    let (oh, ow) = (h * SCALE, w * SCALE);

    let lr_up = bicubic_resize_to(lr, oh, ow).stage("resample")?;
    let ref_du = down_up(&reference, SCALE).stage("resample")?;

    let query = extract_features(&lr_up, &cfg.extractor, Role::Query).stage("features")?;
    let key = extract_features(&ref_du, &cfg.extractor, Role::Key).stage("features")?;
    let value = extract_features(&reference, &cfg.extractor, Role::Value).stage("features")?;

    let (_, hq, wq) = query.level(3).dims3()?;
    let (_, hk, wk) = key.level(3).dims3()?;
    let (stage1, matches) =
        search_indices(query.level(3), key.level(3), &cfg.geometry, cfg.top_u).stage("search")?;
    if matches.top_u() != nets.layout.top_u {
        return Err(Error::Param(format!(
            "networks expect top_u = {}, search used {}",
            nets.layout.top_u,
            matches.top_u()
        )))
        .stage("search");
    }

    let lr_features = ife_forward(lr, &nets.ife).stage("ife")?;
    let mut textures: [Vec<Tensor>; 3] = Default::default();
    let mut maps: [Vec<Tensor>; 3] = Default::default();
    let mut features: Vec<Tensor> = Vec::with_capacity(3);
    let mut merged: Vec<Tensor> = Vec::with_capacity(3);
    for level in 1..=3 {
        let (_, lh, lw) = query.level(level).dims3()?;
        let stack = transfer(
            value.level(level),
            (hk, wk),
            (hq, wq),
            &cfg.geometry,
            matches.indices(),
        )
        .stage("transfer")?;
        textures[level - 1] = stack.fold_maps().stage("transfer")?;
        maps[level - 1] = score_maps(&matches, lh, lw).stage("transfer")?;
        let f = if (lh, lw) == (h, w) {
            lr_features.clone()
        } else {
            bicubic_resize_to(&lr_features, lh, lw).stage("ife")?
        };
        let m = merge_ftt(
            &f,
            &textures[level - 1],
            &maps[level - 1],
            &nets.merge[level - 1],
        )
        .stage("merge")?;
        features.push(f);
        merged.push(m);
    }
    let csfi_out = csfi([&merged[0], &merged[1], &merged[2]], &nets.csfi).stage("csfi")?;

    let gradient = gradient_density(&lr_up).stage("gradient")?;
    let gradient_features = grad_feature_extractor(&gradient, &nets.gfe).stage("gradient")?;
    let [t1, t2, t3] = &csfi_out.textures;
    let sr = gde_merge(&gradient_features, &csfi_out.x_tt, [t1, t2, t3], &nets.gde)
        .stage("gde")?
        .clamp(0.0, 1.0)
        .stage("gde")?;

    let into3 = |v: Vec<Tensor>| -> [Tensor; 3] { v.try_into().expect("three levels") };
    Ok(PipelineTrace {
        lr_up,
        ref_du,
        query,
        key,
        value,
        stage1,
        matches,
        textures,
        score_maps: maps,
        features: into3(features),
        merged: into3(merged),
        csfi: csfi_out,
        gradient,
        gradient_features,
        sr,
    })
}

/// Super-resolves `lr` 4x using textures from `reference`.
pub fn run_pipeline(lr: &ImageU8, reference: &ImageU8, cfg: &PipelineConfig) -> Result<ImageU8> {
    let nets = cfg.networks().stage("weights")?;
    let trace = run_traced(&to_tensor(lr), &to_tensor(reference), cfg, &nets)?;
    from_tensor(&trace.sr).stage("encode")
}
