//! Named convolution parameters and the on-disk manifest that lists them.
//!
//! A manifest is a text file of `key = relative/path.tnsr` lines. Keys are
//! `<layer>.weight` and `<layer>.bias`; a missing bias means zeros. Blank
//! lines and lines starting with `#` are ignored. Paths are relative to the
//! manifest's directory.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::features::seeded_conv;
use crate::nn::ConvParams;
use crate::tensor::Tensor;
use crate::tnsr::{load_tensor, save_tensor};

/// Range of the seeded uniform initialization used without a manifest.
pub const INIT_RANGE: f32 = 0.1;

/// A 3x3 convolution a network expects to find in the manifest.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LayerSpec {
    pub name: String,
    pub c_in: usize,
    pub c_out: usize,
}

impl LayerSpec {
    pub fn new(name: impl Into<String>, c_in: usize, c_out: usize) -> Self {
        LayerSpec {
            name: name.into(),
            c_in,
            c_out,
        }
    }
}

fn fnv1a(s: &str) -> u64 {
    s.bytes().fold(0xcbf29ce484222325u64, |h, b| {
        (h ^ b as u64).wrapping_mul(0x100000001b3)
    })
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct WeightManifest {
    layers: BTreeMap<String, ConvParams>,
}

impl WeightManifest {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, params: ConvParams) {
        self.layers.insert(name.into(), params);
    }

    pub fn get(&self, name: &str) -> Result<&ConvParams> {
        self.layers
            .get(name)
            .ok_or_else(|| Error::Manifest(format!("layer `{name}` is missing")))
    }

    pub fn len(&self) -> usize {
        self.layers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.layers.is_empty()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.layers.keys().map(String::as_str)
    }

    /// Seeded uniform `[-0.1, 0.1]` weights and biases. Each layer draws from
    /// its own stream keyed by name, so adding layers never changes others.
    pub fn random(specs: &[LayerSpec], seed: u64) -> Result<Self> {
        let mut m = Self::new();
        for s in specs {
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ fnv1a(&s.name));
            m.insert(
                s.name.clone(),
                seeded_conv(&mut rng, s.c_in, s.c_out, INIT_RANGE)?,
            );
        }
        Ok(m)
    }

    pub fn zeros(specs: &[LayerSpec]) -> Result<Self> {
        let mut m = Self::new();
        for s in specs {
            m.insert(s.name.clone(), ConvParams::zeros(s.c_in, s.c_out)?);
        }
        Ok(m)
    }

    /// Every spec is present with matching channel counts.
    pub fn validate(&self, specs: &[LayerSpec]) -> Result<()> {
        for s in specs {
            let p = self.get(&s.name)?;
            if (p.c_in(), p.c_out()) != (s.c_in, s.c_out) {
                return Err(Error::Manifest(format!(
                    "layer `{}` maps {} -> {} channels, expected {} -> {}",
                    s.name,
                    p.c_in(),
                    p.c_out(),
                    s.c_in,
                    s.c_out
                )));
            }
        }
        Ok(())
    }

    pub fn load(manifest: impl AsRef<Path>) -> Result<Self> {
        let manifest = manifest.as_ref();
        let text = fs::read_to_string(manifest).map_err(|e| Error::io(manifest, e))?;
        let base = manifest.parent().unwrap_or(Path::new("."));
        let mut weights: BTreeMap<String, PathBuf> = BTreeMap::new();
        let mut biases: BTreeMap<String, PathBuf> = BTreeMap::new();
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, path) = line
                .split_once('=')
                .ok_or_else(|| Error::Manifest(format!("line {}: expected `key = path`", n + 1)))?;
            let (key, path) = (key.trim(), base.join(path.trim()));
            let (map, layer) = if let Some(l) = key.strip_suffix(".weight") {
                (&mut weights, l)
            } else if let Some(l) = key.strip_suffix(".bias") {
                (&mut biases, l)
            } else {
                return Err(Error::Manifest(format!(
                    "line {}: key `{key}` must end in .weight or .bias",
                    n + 1
                )));
            };
            if map.insert(layer.to_string(), path).is_some() {
                return Err(Error::Manifest(format!(
                    "line {}: duplicate key `{key}`",
                    n + 1
                )));
            }
        }
        if let Some(orphan) = biases.keys().find(|k| !weights.contains_key(*k)) {
            return Err(Error::Manifest(format!(
                "bias for `{orphan}` has no weight"
            )));
        }
        let mut m = Self::new();
        for (layer, wpath) in weights {
            let w = load_tensor(&wpath)?;
            let b = match biases.get(&layer) {
                Some(p) => load_tensor(p)?,
                None => Tensor::zeros(vec![w.shape()[0]])?,
            };
            let params = ConvParams::new(w, b)
                .map_err(|e| Error::Manifest(format!("layer `{layer}`: {e}")))?;
            m.insert(layer, params);
        }
        Ok(m)
    }

    /// Writes every layer as two TNSR files plus `manifest.txt` into `dir`
    /// and returns the manifest path.
    pub fn save(&self, dir: impl AsRef<Path>) -> Result<PathBuf> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut text = String::new();
        for (name, p) in &self.layers {
            let (wf, bf) = (format!("{name}.weight.tnsr"), format!("{name}.bias.tnsr"));
            save_tensor(dir.join(&wf), p.weight())?;
            save_tensor(dir.join(&bf), p.bias())?;
            text.push_str(&format!("{name}.weight = {wf}\n{name}.bias = {bf}\n"));
        }
        let path = dir.join("manifest.txt");
        fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
        Ok(path)
    }
}
