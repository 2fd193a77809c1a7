//! Training objectives, evaluated forward only.

use crate::error::{Error, Result};
use crate::features::FeaturePyramid;
use crate::gradient::gradient_density;
use crate::tensor::Tensor;

fn mean_abs_diff(a: &Tensor, b: &Tensor, what: &str) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(Error::shape(format!(
            "{what}: shapes {:?} and {:?} differ",
            a.shape(),
            b.shape()
        )));
    }
    let s: f64 = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| (x as f64 - y as f64).abs())
        .sum();
    Ok(s / a.len() as f64)
}

/// `(chw)^-1 ||SR - HR||_1`.
pub fn l1_rec(sr: &Tensor, hr: &Tensor) -> Result<f64> {
    mean_abs_diff(sr, hr, "l1_rec")
}

/// Mean absolute feature difference at pyramid `level` (1..=3).
pub fn perceptual_loss(sr: &FeaturePyramid, hr: &FeaturePyramid, level: usize) -> Result<f64> {
    if !(1..=3).contains(&level) {
        return Err(Error::Param(format!(
            "pyramid level {level} is not in 1..=3"
        )));
    }
    mean_abs_diff(sr.level(level), hr.level(level), "perceptual_loss")
}

/// Mean absolute difference of gradient densities.
pub fn grad_loss(sr: &Tensor, hr: &Tensor) -> Result<f64> {
    mean_abs_diff(&gradient_density(sr)?, &gradient_density(hr)?, "grad_loss")
}

/// Critic values supplied by the caller: on generated samples, on real
/// samples, and gradient norms at the interpolates.
#[derive(Clone, Debug, PartialEq)]
pub struct CriticOutputs {
    pub generated: Vec<f64>,
    pub real: Vec<f64>,
    pub grad_norms: Vec<f64>,
}

impl CriticOutputs {
    pub fn new(generated: Vec<f64>, real: Vec<f64>, grad_norms: Vec<f64>) -> Result<Self> {
        let n = generated.len();
        if n == 0 || real.len() != n || grad_norms.len() != n {
            return Err(Error::shape(format!(
                "critic batches must be equal and non-empty: {} generated, {} real, {} norms",
                n,
                real.len(),
                grad_norms.len()
            )));
        }
        if grad_norms.iter().any(|&g| g.is_nan() || g < 0.0) {
            return Err(Error::Param("gradient norms must be non-negative".into()));
        }
        Ok(CriticOutputs {
            generated,
            real,
            grad_norms,
        })
    }
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// `mean((||grad|| - 1)^2)`.
pub fn gradient_penalty(c: &CriticOutputs) -> f64 {
    mean(
        &c.grad_norms
            .iter()
            .map(|g| (g - 1.0) * (g - 1.0))
            .collect::<Vec<_>>(),
    )
}

/// WGAN-GP critic and generator losses `(L_D, L_G)`.
pub fn wgan_gp_losses(c: &CriticOutputs, lambda: f64) -> (f64, f64) {
    let l_d = mean(&c.generated) - mean(&c.real) + lambda * gradient_penalty(c);
    let l_g = -mean(&c.generated);
    (l_d, l_g)
}

/// Coefficients of reconstruction, perceptual, gradient and adversarial
/// terms.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub rec: f64,
    pub perc: f64,
    pub grad: f64,
    pub adv: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            rec: 1.0,
            perc: 1e-2,
            grad: 1e-3,
            adv: 1e-3,
        }
    }
}

impl LossWeights {
    pub fn new(rec: f64, perc: f64, grad: f64, adv: f64) -> Result<Self> {
        if [rec, perc, grad, adv]
            .iter()
            .any(|&w| !w.is_finite() || w < 0.0)
        {
            return Err(Error::Param(
                "loss weights must be finite and non-negative".into(),
            ));
        }
        Ok(LossWeights {
            rec,
            perc,
            grad,
            adv,
        })
    }
}

/// Already-evaluated loss terms.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossParts {
    pub rec: f64,
    pub perc: f64,
    pub grad: f64,
    pub adv: f64,
}

pub fn total_loss(parts: &LossParts, w: &LossWeights) -> f64 {
    w.rec * parts.rec + w.perc * parts.perc + w.grad * parts.grad + w.adv * parts.adv
}
