//! Three-level feature pyramids and the pluggable extractors producing them.
//!
//! Level 1 is at the input resolution with 64 channels, level 2 at half
//! resolution with 128 and level 3 at a quarter with 256. Halving rounds up.

use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::gradient::gradient_density;
use crate::image::to_luma_bt601;
use crate::nn::{conv3x3_forward, relu, ConvParams};
use crate::tensor::Tensor;
use crate::tnsr::load_tensor;

pub const LEVEL_CHANNELS: [usize; 3] = [64, 128, 256];

/// Spatial size after one halving (rounded up).
pub fn half(n: usize) -> usize {
    n.div_ceil(2)
}

/// Feature maps at scales 1, 1/2 and 1/4.
#[derive(Clone, Debug, PartialEq)]
pub struct FeaturePyramid {
    levels: [Tensor; 3],
}

impl FeaturePyramid {
    /// Validates channel widths and the halving between consecutive levels.
    pub fn new(levels: [Tensor; 3]) -> Result<Self> {
        let (_, mut h, mut w) = levels[0].dims3()?;
        for (i, t) in levels.iter().enumerate() {
            let (c, th, tw) = t.dims3()?;
            if c != LEVEL_CHANNELS[i] || (th, tw) != (h, w) {
                return Err(Error::shape(format!(
                    "pyramid level {} is {c}x{th}x{tw}, expected {}x{h}x{w}",
                    i + 1,
                    LEVEL_CHANNELS[i]
                )));
            }
            h = half(h);
            w = half(w);
        }
        Ok(FeaturePyramid { levels })
    }

    /// Level `1..=3`.
    pub fn level(&self, i: usize) -> &Tensor {
        &self.levels[i - 1]
    }

    pub fn levels(&self) -> &[Tensor; 3] {
        &self.levels
    }
}

/// Which image a pyramid is extracted from; selects files for the file
/// plugin.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Role {
    Query,
    Key,
    Value,
}

impl Role {
    pub fn as_str(&self) -> &'static str {
        match self {
            Role::Query => "query",
            Role::Key => "key",
            Role::Value => "value",
        }
    }
}

/// Feature extractor plugins.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Extractor {
    /// Precomputed pyramids in `dir/{role}_l{1,2,3}.tnsr`.
    File { dir: PathBuf },
    /// Fixed-seed random 3x3 projections with ReLU and 2x2 average pooling.
    BuiltinRandom { seed: u64 },
    /// Pixels, luma and Sobel responses at each scale, tiled to the level
    /// width.
    BuiltinHandcrafted,
}

impl Extractor {
    /// `file:DIR`, `builtin-random[:SEED]` or `builtin-handcrafted`.
    pub fn parse(s: &str, default_seed: u64) -> Result<Self> {
        if let Some(dir) = s.strip_prefix("file:") {
            return Ok(Extractor::File { dir: dir.into() });
        }
        match s.split_once(':') {
            Some(("builtin-random", seed)) => seed
                .parse()
                .map(|seed| Extractor::BuiltinRandom { seed })
                .map_err(|_| Error::Config(format!("bad extractor seed `{seed}`"))),
            None if s == "builtin-random" => Ok(Extractor::BuiltinRandom { seed: default_seed }),
            None if s == "builtin-handcrafted" => Ok(Extractor::BuiltinHandcrafted),
            _ => Err(Error::Config(format!("unknown extractor `{s}`"))),
        }
    }

    pub fn name(&self) -> String {
        match self {
            Extractor::File { dir } => format!("file:{}", dir.display()),
            Extractor::BuiltinRandom { seed } => format!("builtin-random:{seed}"),
            Extractor::BuiltinHandcrafted => "builtin-handcrafted".into(),
        }
    }
}

pub fn pyramid_paths(dir: &Path, role: Role) -> [PathBuf; 3] {
    [1, 2, 3].map(|l| dir.join(format!("{}_l{l}.tnsr", role.as_str())))
}

/// Runs `extractor` on a `(3, H, W)` image.
pub fn extract_features(img: &Tensor, extractor: &Extractor, role: Role) -> Result<FeaturePyramid> {
    let (c, h, w) = img.dims3()?;
    if c != 3 {
        return Err(Error::shape(format!(
            "feature extraction needs an RGB image, got {c} channels"
        )));
    }
    let pyramid = match extractor {
        Extractor::File { dir } => {
            let [a, b, c] = pyramid_paths(dir, role);
            FeaturePyramid::new([load_tensor(a)?, load_tensor(b)?, load_tensor(c)?])?
        }
        Extractor::BuiltinRandom { seed } => random_pyramid(img, *seed)?,
        Extractor::BuiltinHandcrafted => handcrafted_pyramid(img)?,
    };
    let (_, ph, pw) = pyramid.level(1).dims3()?;
    if (ph, pw) != (h, w) {
        return Err(Error::shape(format!(
            "pyramid level 1 is {ph}x{pw} but the image is {h}x{w}"
        )));
    }
    Ok(pyramid)
}

/// 2x2 mean pooling; odd trailing rows and columns average what exists.
pub fn avg_pool2(t: &Tensor) -> Result<Tensor> {
    let (c, h, w) = t.dims3()?;
    let (oh, ow) = (half(h), half(w));
    Tensor::from_fn3(c, oh, ow, |ci, y, x| {
        let (mut s, mut n) = (0f32, 0f32);
        for yy in 2 * y..(2 * y + 2).min(h) {
            for xx in 2 * x..(2 * x + 2).min(w) {
                s += t.at3(ci, yy, xx);
                n += 1.0;
            }
        }
        s / n
    })
}

/// Uniform `[-scale, scale]` conv parameters from a seeded stream.
pub(crate) fn seeded_conv(
    rng: &mut ChaCha8Rng,
    c_in: usize,
    c_out: usize,
    scale: f32,
) -> Result<ConvParams> {
    let w = (0..c_out * c_in * 9)
        .map(|_| rng.gen_range(-scale..=scale))
        .collect();
    let b = (0..c_out).map(|_| rng.gen_range(-scale..=scale)).collect();
    ConvParams::new(
        Tensor::new(vec![c_out, c_in, 3, 3], w)?,
        Tensor::new(vec![c_out], b)?,
    )
}

fn random_pyramid(img: &Tensor, seed: u64) -> Result<FeaturePyramid> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut c_in = 3;
    let mut x = img.clone();
    let mut levels = Vec::with_capacity(3);
    for (i, &c_out) in LEVEL_CHANNELS.iter().enumerate() {
        if i > 0 {
            x = avg_pool2(&x)?;
        }
        let scale = (3.0 / (c_in as f32 * 9.0)).sqrt();
        let conv = seeded_conv(&mut rng, c_in, c_out, scale)?;
        x = relu(&conv3x3_forward(&x, &conv)?)?;
        levels.push(x.clone());
        c_in = c_out;
    }
    let [a, b, c]: [Tensor; 3] = levels.try_into().expect("three levels");
    FeaturePyramid::new([a, b, c])
}

/// Signed Sobel responses of one plane with clamp-to-edge borders.
fn sobel_xy(t: &Tensor) -> Result<(Tensor, Tensor)> {
    let (c, h, w) = t.dims3()?;
    let at = |ci: usize, y: isize, x: isize| {
        t.at3(
            ci,
            y.clamp(0, h as isize - 1) as usize,
            x.clamp(0, w as isize - 1) as usize,
        )
    };
    let gx = Tensor::from_fn3(c, h, w, |ci, y, x| {
        let (y, x) = (y as isize, x as isize);
        (at(ci, y - 1, x + 1) - at(ci, y - 1, x - 1))
            + 2.0 * (at(ci, y, x + 1) - at(ci, y, x - 1))
            + (at(ci, y + 1, x + 1) - at(ci, y + 1, x - 1))
    })?;
    let gy = Tensor::from_fn3(c, h, w, |ci, y, x| {
        let (y, x) = (y as isize, x as isize);
        (at(ci, y - 1, x - 1) - at(ci, y + 1, x - 1))
            + 2.0 * (at(ci, y - 1, x) - at(ci, y + 1, x))
            + (at(ci, y - 1, x + 1) - at(ci, y + 1, x + 1))
    })?;
    Ok((gx, gy))
}

fn handcrafted_level(img: &Tensor, channels: usize) -> Result<Tensor> {
    let (gx, gy) = sobel_xy(img)?;
    let base =
        Tensor::concat_channels(&[img, &to_luma_bt601(img)?, &gx, &gy, &gradient_density(img)?])?;
    let (bc, h, w) = base.dims3()?;
    let plane = h * w;
    let mut data = Vec::with_capacity(channels * plane);
    for c in 0..channels {
        data.extend_from_slice(base.channel(c % bc));
    }
    Tensor::new(vec![channels, h, w], data)
}

fn handcrafted_pyramid(img: &Tensor) -> Result<FeaturePyramid> {
    let l2 = avg_pool2(img)?;
    let l3 = avg_pool2(&l2)?;
    FeaturePyramid::new([
        handcrafted_level(img, LEVEL_CHANNELS[0])?,
        handcrafted_level(&l2, LEVEL_CHANNELS[1])?,
        handcrafted_level(&l3, LEVEL_CHANNELS[2])?,
    ])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tnsr::save_tensor;

    fn image(h: usize, w: usize) -> Tensor {
        Tensor::from_fn3(3, h, w, |c, y, x| {
            ((c * 7 + y * 3 + x * 5) % 13) as f32 / 12.0
        })
        .unwrap()
    }

    #[test]
    fn builtin_shapes() {
        let img = image(32, 32);
        for ex in [
            Extractor::BuiltinRandom { seed: 1 },
            Extractor::BuiltinHandcrafted,
        ] {
            let p = extract_features(&img, &ex, Role::Query).unwrap();
            assert_eq!(p.level(1).shape(), &[64, 32, 32]);
            assert_eq!(p.level(2).shape(), &[128, 16, 16]);
            assert_eq!(p.level(3).shape(), &[256, 8, 8]);
        }
        let p = extract_features(&image(10, 7), &Extractor::BuiltinHandcrafted, Role::Key).unwrap();
        assert_eq!(p.level(3).shape(), &[256, 3, 2]);
    }

    #[test]
    fn builtins_are_deterministic() {
        let img = image(16, 12);
        let ex = Extractor::BuiltinRandom { seed: 7 };
        let a = extract_features(&img, &ex, Role::Value).unwrap();
        let b = extract_features(&img, &ex, Role::Value).unwrap();
        for l in 1..=3 {
            assert!(a.level(l).bit_eq(b.level(l)));
        }
        let other =
            extract_features(&img, &Extractor::BuiltinRandom { seed: 8 }, Role::Value).unwrap();
        assert_ne!(a, other);
    }

    #[test]
    fn file_plugin_passthrough_and_validation() {
        let dir = tempfile::tempdir().unwrap();
        let img = image(8, 8);
        let p = extract_features(&img, &Extractor::BuiltinRandom { seed: 3 }, Role::Key).unwrap();
        for (path, t) in pyramid_paths(dir.path(), Role::Key).iter().zip(p.levels()) {
            save_tensor(path, t).unwrap();
        }
        let ex = Extractor::File {
            dir: dir.path().to_path_buf(),
        };
        assert_eq!(extract_features(&img, &ex, Role::Key).unwrap(), p);
        // Wrong image size for the stored pyramid.
        assert!(extract_features(&image(16, 16), &ex, Role::Key).is_err());
        // Wrong channel count on level 2.
        save_tensor(
            &pyramid_paths(dir.path(), Role::Key)[1],
            &Tensor::zeros(vec![64, 4, 4]).unwrap(),
        )
        .unwrap();
        assert!(matches!(
            extract_features(&img, &ex, Role::Key),
            Err(Error::Shape(_))
        ));
        // Missing files.
        assert!(extract_features(&img, &ex, Role::Query).is_err());
    }

    #[test]
    fn extractor_names_parse() {
        assert_eq!(
            Extractor::parse("builtin-random", 5).unwrap(),
            Extractor::BuiltinRandom { seed: 5 }
        );
        assert_eq!(
            Extractor::parse("builtin-random:9", 5).unwrap(),
            Extractor::BuiltinRandom { seed: 9 }
        );
        assert_eq!(
            Extractor::parse("builtin-handcrafted", 0).unwrap(),
            Extractor::BuiltinHandcrafted
        );
        assert_eq!(
            Extractor::parse("file:/tmp/x", 0).unwrap(),
            Extractor::File {
                dir: "/tmp/x".into()
            }
        );
        assert!(Extractor::parse("vgg19", 0).is_err());
    }

    #[test]
    fn pooling_handles_odd_sizes() {
        let t = Tensor::new(vec![1, 1, 3], vec![1.0, 3.0, 5.0]).unwrap();
        assert_eq!(avg_pool2(&t).unwrap().data(), &[2.0, 5.0]);
    }
}
