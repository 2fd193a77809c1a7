//! Forward networks of the super-resolution pipeline: the initial feature
//! extractor, the soft-attention texture merge, cross-scale integration and
//! the gradient-density enhancing decoder.
//!
//! Levels are numbered by feature pyramid depth: level 1 is the output
//! resolution, level 2 half of it and level 3 a quarter.

use crate::error::{Error, Result};
use crate::features::LEVEL_CHANNELS;
use crate::gradient::GfeParams;
use crate::nn::{
    conv3x3_forward, conv3x3_strided, relu, residual_stack, ConvParams, ResBlockParams,
};
use crate::resample::bicubic_resize_to;
use crate::tensor::Tensor;
use crate::weights::{LayerSpec, WeightManifest};

pub const TRUNK_CHANNELS: usize = 64;
pub const IFE_BLOCKS: usize = 4;
pub const GFE_BLOCKS: usize = 4;
/// Residual trunk depth per level (1, 2, 3) of cross-scale integration.
pub const CSFI_DEPTHS: [usize; 3] = [4, 8, 16];
/// Residual depth of each decoder stage, coarse to fine.
pub const GDE_DEPTHS: [usize; 3] = [9, 9, 9];

/// Channel widths and texture count that fix every layer's shape.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct NetworkLayout {
    pub channels: usize,
    pub top_u: usize,
    pub texture_channels: [usize; 3],
}

impl NetworkLayout {
    pub fn new(top_u: usize) -> Self {
        NetworkLayout {
            channels: TRUNK_CHANNELS,
            top_u,
            texture_channels: LEVEL_CHANNELS,
        }
    }

    /// Every convolution the pipeline loads, in a fixed order.
    pub fn layers(&self) -> Vec<LayerSpec> {
        let c = self.channels;
        let mut v = Vec::new();
        let blocks = |v: &mut Vec<LayerSpec>, prefix: &str, n: usize| {
            for b in 0..n {
                v.push(LayerSpec::new(format!("{prefix}.rb{b}.conv1"), c, c));
                v.push(LayerSpec::new(format!("{prefix}.rb{b}.conv2"), c, c));
            }
        };

        v.push(LayerSpec::new("ife.head", 3, c));
        blocks(&mut v, "ife", IFE_BLOCKS);
        v.push(LayerSpec::new("ife.tail", c, c));

        for level in 1..=3 {
            for i in 1..=self.top_u {
                v.push(LayerSpec::new(
                    format!("merge.l{level}.t{i}"),
                    c + self.texture_channels[level - 1],
                    c,
                ));
            }
        }

        for name in [
            "csfi.down.l1_l2",
            "csfi.down.l2_l3",
            "csfi.down.l1_l3a",
            "csfi.down.l1_l3b",
        ] {
            v.push(LayerSpec::new(name, c, c));
        }
        for level in 1..=3 {
            v.push(LayerSpec::new(format!("csfi.exchange.l{level}"), 3 * c, c));
            blocks(
                &mut v,
                &format!("csfi.trunk.l{level}"),
                CSFI_DEPTHS[level - 1],
            );
            v.push(LayerSpec::new(format!("csfi.tail.l{level}"), c, c));
        }
        v.push(LayerSpec::new("csfi.fuse", 3 * c, c));

        v.push(LayerSpec::new("gfe.head", 3, c));
        blocks(&mut v, "gfe", GFE_BLOCKS);
        v.push(LayerSpec::new("gfe.down1", c, c));
        v.push(LayerSpec::new("gfe.down2", c, c));

        for stage in 1..=3 {
            v.push(LayerSpec::new(format!("gde.in{stage}"), 2 * c, c));
            blocks(&mut v, &format!("gde.s{stage}"), GDE_DEPTHS[stage - 1]);
        }
        v.push(LayerSpec::new("gde.out", 2 * c, 3));
        v
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct IfeParams {
    pub head: ConvParams,
    pub blocks: Vec<ResBlockParams>,
    pub tail: ConvParams,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CsfiParams {
    pub down_l1_l2: ConvParams,
    pub down_l2_l3: ConvParams,
    pub down_l1_l3: [ConvParams; 2],
    /// Indexed by level - 1.
    pub exchange: [ConvParams; 3],
    pub trunks: [Vec<ResBlockParams>; 3],
    pub tails: [ConvParams; 3],
    pub fuse: ConvParams,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GdeParams {
    /// Input convs of the coarse, middle and fine stages.
    pub inputs: [ConvParams; 3],
    pub blocks: [Vec<ResBlockParams>; 3],
    pub out: ConvParams,
}

/// All pipeline parameters, assembled from a validated manifest.
#[derive(Clone, Debug, PartialEq)]
pub struct Networks {
    pub layout: NetworkLayout,
    pub ife: IfeParams,
    /// `merge[level - 1][i - 1]` is `Conv_i` at that level.
    pub merge: [Vec<ConvParams>; 3],
    pub csfi: CsfiParams,
    pub gfe: GfeParams,
    pub gde: GdeParams,
}

impl Networks {
    pub fn from_manifest(m: &WeightManifest, layout: NetworkLayout) -> Result<Self> {
        m.validate(&layout.layers())?;
        let conv = |name: &str| m.get(name).cloned();
        let blocks = |prefix: &str, n: usize| -> Result<Vec<ResBlockParams>> {
            (0..n)
                .map(|b| {
                    ResBlockParams::new(
                        conv(&format!("{prefix}.rb{b}.conv1"))?,
                        conv(&format!("{prefix}.rb{b}.conv2"))?,
                    )
                })
                .collect()
        };
        let per_level = |f: &dyn Fn(usize) -> Result<ConvParams>| -> Result<[ConvParams; 3]> {
            Ok([f(1)?, f(2)?, f(3)?])
        };

        let merge = [1, 2, 3].map(|level| {
            (1..=layout.top_u)
                .map(|i| conv(&format!("merge.l{level}.t{i}")))
                .collect::<Result<Vec<_>>>()
        });
        let [m1, m2, m3] = merge;

        Ok(Networks {
            layout,
            ife: IfeParams {
                head: conv("ife.head")?,
                blocks: blocks("ife", IFE_BLOCKS)?,
                tail: conv("ife.tail")?,
            },
            merge: [m1?, m2?, m3?],
            csfi: CsfiParams {
                down_l1_l2: conv("csfi.down.l1_l2")?,
                down_l2_l3: conv("csfi.down.l2_l3")?,
                down_l1_l3: [conv("csfi.down.l1_l3a")?, conv("csfi.down.l1_l3b")?],
                exchange: per_level(&|l| conv(&format!("csfi.exchange.l{l}")))?,
                trunks: [
                    blocks("csfi.trunk.l1", CSFI_DEPTHS[0])?,
                    blocks("csfi.trunk.l2", CSFI_DEPTHS[1])?,
                    blocks("csfi.trunk.l3", CSFI_DEPTHS[2])?,
                ],
                tails: per_level(&|l| conv(&format!("csfi.tail.l{l}")))?,
                fuse: conv("csfi.fuse")?,
            },
            gfe: GfeParams {
                head: conv("gfe.head")?,
                blocks: blocks("gfe", GFE_BLOCKS)?,
                down1: conv("gfe.down1")?,
                down2: conv("gfe.down2")?,
            },
            gde: GdeParams {
                inputs: per_level(&|s| conv(&format!("gde.in{s}")))?,
                blocks: [
                    blocks("gde.s1", GDE_DEPTHS[0])?,
                    blocks("gde.s2", GDE_DEPTHS[1])?,
                    blocks("gde.s3", GDE_DEPTHS[2])?,
                ],
                out: conv("gde.out")?,
            },
        })
    }

    /// Seeded random parameters for `layout`.
    pub fn random(layout: NetworkLayout, seed: u64) -> Result<Self> {
        Self::from_manifest(&WeightManifest::random(&layout.layers(), seed)?, layout)
    }
}

/// `h + tail(RB*(h))` with `h = relu(head(x))`.
pub fn ife_forward(x: &Tensor, p: &IfeParams) -> Result<Tensor> {
    let h = relu(&conv3x3_forward(x, &p.head)?)?;
    let body = conv3x3_forward(&residual_stack(&h, &p.blocks)?, &p.tail)?;
    h.add(&body)
}

fn spatial(t: &Tensor) -> Result<(usize, usize)> {
    let (_, h, w) = t.dims3()?;
    Ok((h, w))
}

fn resize_like(t: &Tensor, like: &Tensor) -> Result<Tensor> {
    let (h, w) = spatial(like)?;
    if spatial(t)? == (h, w) {
        return Ok(t.clone());
    }
    bicubic_resize_to(t, h, w)
}

/// `F + sum_i Conv_i(Concat(F, T_i * S_i)) * S_i`.
///
/// `textures[i]` is `T_i` folded to `F`'s spatial size and `scores[i]` the
/// `(1, H, W)` soft-attention map broadcast over channels.
pub fn merge_ftt(
    f: &Tensor,
    textures: &[Tensor],
    scores: &[Tensor],
    convs: &[ConvParams],
) -> Result<Tensor> {
    if textures.len() != scores.len() || textures.len() != convs.len() {
        return Err(Error::shape(format!(
            "merge needs matching counts: {} textures, {} score maps, {} convs",
            textures.len(),
            scores.len(),
            convs.len()
        )));
    }
    let (c, h, w) = f.dims3()?;
    let mut out = f.clone();
    for ((t, s), conv) in textures.iter().zip(scores).zip(convs) {
        if spatial(t)? != (h, w) {
            return Err(Error::shape(format!(
                "texture {:?} does not match features {c}x{h}x{w}",
                t.shape()
            )));
        }
        let weighted = t.mul_broadcast_channels(s)?;
        let branch = conv3x3_forward(&Tensor::concat_channels(&[f, &weighted])?, conv)?;
        if branch.shape() != f.shape() {
            return Err(Error::shape(format!(
                "merge conv yields {:?}, features are {:?}",
                branch.shape(),
                f.shape()
            )));
        }
        out = out.add(&branch.mul_broadcast_channels(s)?)?;
    }
    Ok(out)
}

/// Results of cross-scale integration.
#[derive(Clone, Debug, PartialEq)]
pub struct CsfiOutput {
    pub x_tt: Tensor,
    /// Synthesized textures at levels 1, 2 and 3.
    pub textures: [Tensor; 3],
}

/// Cross-scale feature integration over merged maps at levels 1, 2, 3.
///
/// Each level first takes in the other two (bicubic upsampling from coarser
/// levels, stride-2 convolutions from finer ones) through a residual
/// exchange conv, then runs its own residual trunk. The fused output
/// `x_TT` combines all three levels at full resolution.
pub fn csfi(merged: [&Tensor; 3], p: &CsfiParams) -> Result<CsfiOutput> {
    let [f1, f2, f3] = merged;
    let (h2, h3) = (spatial(f2)?, spatial(f3)?);
    let f1_to_l2 = conv3x3_strided(f1, &p.down_l1_l2, 2)?;
    let f2_to_l3 = conv3x3_strided(f2, &p.down_l2_l3, 2)?;
    let f1_to_l3 = conv3x3_strided(
        &relu(&conv3x3_strided(f1, &p.down_l1_l3[0], 2)?)?,
        &p.down_l1_l3[1],
        2,
    )?;
    if spatial(&f1_to_l2)? != h2 || spatial(&f2_to_l3)? != h3 || spatial(&f1_to_l3)? != h3 {
        return Err(Error::shape(format!(
            "levels {:?}, {:?}, {:?} are not successive halvings",
            f1.shape(),
            f2.shape(),
            f3.shape()
        )));
    }

    let exchange = |base: &Tensor, others: [&Tensor; 2], conv: &ConvParams| -> Result<Tensor> {
        let mixed = conv3x3_forward(
            &Tensor::concat_channels(&[base, others[0], others[1]])?,
            conv,
        )?;
        base.add(&mixed)
    };
    let e1 = exchange(
        f1,
        [&resize_like(f2, f1)?, &resize_like(f3, f1)?],
        &p.exchange[0],
    )?;
    let e2 = exchange(f2, [&resize_like(f3, f2)?, &f1_to_l2], &p.exchange[1])?;
    let e3 = exchange(f3, [&f2_to_l3, &f1_to_l3], &p.exchange[2])?;

    let trunk = |e: &Tensor, level: usize| -> Result<Tensor> {
        let body = residual_stack(e, &p.trunks[level])?;
        e.add(&conv3x3_forward(&body, &p.tails[level])?)
    };
    let t1 = trunk(&e1, 0)?;
    let t2 = trunk(&e2, 1)?;
    let t3 = trunk(&e3, 2)?;

    let fused = conv3x3_forward(
        &Tensor::concat_channels(&[&t1, &resize_like(&t2, &t1)?, &resize_like(&t3, &t1)?])?,
        &p.fuse,
    )?;
    let x_tt = t1.add(&fused)?;
    Ok(CsfiOutput {
        x_tt,
        textures: [t1, t2, t3],
    })
}

/// Coarse-to-fine gradient-density enhancing decoder:
///
/// ```text
/// x1 = RB1(Conv(Concat(F_g, T3)))
/// x2 = RB2(Conv(Concat(up(x1), T2)))
/// x3 = RB3(Conv(Concat(up(x2), T1)))
/// SR = Conv(Concat(x3, x_TT))
/// ```
///
/// `up` is 2x bicubic resampling to the next level's size.
pub fn gde_merge(
    f_g: &Tensor,
    x_tt: &Tensor,
    textures: [&Tensor; 3],
    p: &GdeParams,
) -> Result<Tensor> {
    let [t1, t2, t3] = textures;
    if spatial(f_g)? != spatial(t3)? {
        return Err(Error::shape(format!(
            "gradient features {:?} do not match level-3 textures {:?}",
            f_g.shape(),
            t3.shape()
        )));
    }
    if spatial(x_tt)? != spatial(t1)? {
        return Err(Error::shape(format!(
            "x_TT {:?} does not match level-1 textures {:?}",
            x_tt.shape(),
            t1.shape()
        )));
    }
    let stage = |prev: &Tensor, tex: &Tensor, i: usize| -> Result<Tensor> {
        let x = conv3x3_forward(&Tensor::concat_channels(&[prev, tex])?, &p.inputs[i])?;
        residual_stack(&x, &p.blocks[i])
    };
    let x1 = stage(f_g, t3, 0)?;
    let x2 = stage(&resize_like(&x1, t2)?, t2, 1)?;
    let x3 = stage(&resize_like(&x2, t1)?, t1, 2)?;
    conv3x3_forward(&Tensor::concat_channels(&[&x3, x_tt])?, &p.out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn map(c: usize, h: usize, w: usize, seed: u64) -> Tensor {
        let mut s = seed.wrapping_mul(0x9E3779B97F4A7C15) | 1;
        Tensor::from_fn3(c, h, w, |_, _, _| {
            s ^= s << 13;
            s ^= s >> 7;
            s ^= s << 17;
            (s >> 40) as f32 / (1u64 << 24) as f32 - 0.5
        })
        .unwrap()
    }

    fn small_layout(u: usize) -> NetworkLayout {
        NetworkLayout {
            channels: 4,
            top_u: u,
            texture_channels: [2, 3, 5],
        }
    }

    #[test]
    fn layout_names_are_unique_and_assemble() {
        let layout = NetworkLayout::new(2);
        let layers = layout.layers();
        let mut names: Vec<_> = layers.iter().map(|l| l.name.clone()).collect();
        names.sort();
        names.dedup();
        assert_eq!(names.len(), layers.len());
        let small = small_layout(3);
        let nets = Networks::random(small, 1).unwrap();
        assert_eq!(nets.merge[2].len(), 3);
        assert_eq!(nets.csfi.trunks[2].len(), 16);
        assert_eq!(
            nets.gde.blocks.iter().map(Vec::len).collect::<Vec<_>>(),
            vec![9, 9, 9]
        );
    }

    #[test]
    fn missing_layer_is_a_manifest_error() {
        let layout = small_layout(1);
        let mut specs = layout.layers();
        specs.retain(|s| s.name != "csfi.fuse");
        let m = WeightManifest::zeros(&specs).unwrap();
        assert!(matches!(
            Networks::from_manifest(&m, layout),
            Err(Error::Manifest(_))
        ));
    }

    #[test]
    fn zero_scores_leave_features_untouched() {
        let f = map(4, 6, 5, 1);
        let tex = vec![map(3, 6, 5, 2), map(3, 6, 5, 3)];
        let s = vec![Tensor::zeros(vec![1, 6, 5]).unwrap(); 2];
        let nets = Networks::random(small_layout(2), 9).unwrap();
        let out = merge_ftt(&f, &tex, &s, &nets.merge[1]).unwrap();
        assert!(out.bit_eq(&f));
    }

    #[test]
    fn unit_scores_with_zero_convs_are_identity() {
        let f = map(4, 3, 3, 4);
        let tex = vec![map(2, 3, 3, 5)];
        let s = vec![Tensor::full(vec![1, 3, 3], 1.0).unwrap()];
        let out = merge_ftt(&f, &tex, &s, &[ConvParams::zeros(6, 4).unwrap()]).unwrap();
        assert_eq!(out, f);
    }

    #[test]
    fn merge_matches_scalar_oracle() {
        let (c, ct, h, w) = (3, 2, 4, 5);
        let f = map(c, h, w, 10);
        let tex = vec![map(ct, h, w, 11), map(ct, h, w, 12)];
        let s = vec![map(1, h, w, 13), map(1, h, w, 14)];
        let nets = Networks::random(
            NetworkLayout {
                channels: c,
                top_u: 2,
                texture_channels: [ct, ct, ct],
            },
            5,
        )
        .unwrap();
        let convs = &nets.merge[0];
        let out = merge_ftt(&f, &tex, &s, convs).unwrap();

        let expect = Tensor::from_fn3(c, h, w, |o, y, x| {
            let mut acc = f.at3(o, y, x) as f64;
            for i in 0..2 {
                let wt = convs[i].weight();
                let mut conv = convs[i].bias().data()[o] as f64;
                for ci in 0..c + ct {
                    for ky in 0..3 {
                        for kx in 0..3 {
                            let (sy, sx) =
                                (y as isize + ky as isize - 1, x as isize + kx as isize - 1);
                            if sy < 0 || sx < 0 || sy >= h as isize || sx >= w as isize {
                                continue;
                            }
                            let (sy, sx) = (sy as usize, sx as usize);
                            let input = if ci < c {
                                f.at3(ci, sy, sx)
                            } else {
                                tex[i].at3(ci - c, sy, sx) * s[i].at3(0, sy, sx)
                            };
                            conv += wt.data()[((o * (c + ct) + ci) * 3 + ky) * 3 + kx] as f64
                                * input as f64;
                        }
                    }
                }
                acc += conv * s[i].at3(0, y, x) as f64;
            }
            acc as f32
        })
        .unwrap();
        for (a, b) in out.data().iter().zip(expect.data()) {
            assert!((a - b).abs() < 1e-5);
        }
    }

    #[test]
    fn zero_weight_csfi_is_its_skip_path() {
        let layout = small_layout(1);
        let nets =
            Networks::from_manifest(&WeightManifest::zeros(&layout.layers()).unwrap(), layout)
                .unwrap();
        let f1 = map(4, 16, 12, 1);
        let f2 = map(4, 8, 6, 2);
        let f3 = map(4, 4, 3, 3);
        let out = csfi([&f1, &f2, &f3], &nets.csfi).unwrap();
        assert_eq!(out.x_tt, f1);
        assert_eq!(out.textures, [f1.clone(), f2.clone(), f3.clone()]);
        assert!(csfi([&f1, &f1, &f3], &nets.csfi).is_err());
    }

    #[test]
    fn gde_shapes_and_bias_output() {
        let layout = small_layout(1);
        let mut m = WeightManifest::random(&layout.layers(), 3).unwrap();
        let bias = Tensor::new(vec![3], vec![0.25, 0.5, 0.75]).unwrap();
        m.insert(
            "gde.out",
            ConvParams::new(Tensor::zeros(vec![3, 8, 3, 3]).unwrap(), bias).unwrap(),
        );
        let nets = Networks::from_manifest(&m, layout).unwrap();
        let (t1, t2, t3) = (map(4, 20, 16, 1), map(4, 10, 8, 2), map(4, 5, 4, 3));
        let f_g = map(4, 5, 4, 4);
        let sr = gde_merge(&f_g, &t1, [&t1, &t2, &t3], &nets.gde).unwrap();
        assert_eq!(sr.shape(), &[3, 20, 16]);
        assert!(sr.channel(2).iter().all(|&v| v == 0.75));
        assert!(gde_merge(&t2, &t1, [&t1, &t2, &t3], &nets.gde).is_err());
    }

    #[test]
    fn ife_zero_weights_is_relu_of_bias() {
        let layout = small_layout(1);
        let nets =
            Networks::from_manifest(&WeightManifest::zeros(&layout.layers()).unwrap(), layout)
                .unwrap();
        let f = ife_forward(&map(3, 5, 5, 1), &nets.ife).unwrap();
        assert_eq!(f.shape(), &[4, 5, 5]);
        assert!(f.data().iter().all(|&v| v == 0.0));
    }

    proptest::proptest! {
        #![proptest_config(proptest::prelude::ProptestConfig::with_cases(32))]
        #[test]
        fn zero_scores_are_an_exact_identity(seed in proptest::prelude::any::<u64>(), h in 1usize..9, w in 1usize..9, u in 1usize..4) {
            let f = map(4, h, w, seed);
            let tex: Vec<_> = (0..u).map(|i| map(3, h, w, seed ^ (i as u64 + 1))).collect();
            let s = vec![Tensor::zeros(vec![1, h, w]).unwrap(); u];
            let nets = Networks::random(small_layout(u), seed).unwrap();
            let out = merge_ftt(&f, &tex, &s, &nets.merge[1]).unwrap();
            proptest::prop_assert!(out.bit_eq(&f));
        }
    }
}
