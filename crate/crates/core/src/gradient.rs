//! Sobel gradient density and the gradient feature extractor.

use crate::error::{Error, Result};
use crate::nn::{
    conv3x3_forward, conv3x3_strided, relu, residual_stack, ConvParams, ResBlockParams,
};
use crate::tensor::Tensor;

/// Horizontal and vertical 3x3 Sobel kernels, applied as cross-correlation.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SobelKernels {
    pub kx: [[f32; 3]; 3],
    pub ky: [[f32; 3]; 3],
}

pub const SOBEL: SobelKernels = SobelKernels {
    kx: [[-1.0, 0.0, 1.0], [-2.0, 0.0, 2.0], [-1.0, 0.0, 1.0]],
    ky: [[1.0, 2.0, 1.0], [0.0, 0.0, 0.0], [-1.0, -2.0, -1.0]],
};

/// Per-channel `sqrt((Kx * I)^2 + (Ky * I)^2)` with clamp-to-edge borders.
///
/// Both responses are evaluated as sums of pixel differences, so a constant
/// image maps to exactly zero.
pub fn gradient_density(img: &Tensor) -> Result<Tensor> {
    let (c, h, w) = img.dims3()?;
    let mut out = Vec::with_capacity(c * h * w);
    for ci in 0..c {
        let p = img.channel(ci);
        let at = |y: usize, x: usize| p[y * w + x];
        for y in 0..h {
            let (ym, yp) = (y.saturating_sub(1), (y + 1).min(h - 1));
            for x in 0..w {
                let (xm, xp) = (x.saturating_sub(1), (x + 1).min(w - 1));
                let gx = (at(ym, xp) - at(ym, xm))
                    + 2.0 * (at(y, xp) - at(y, xm))
                    + (at(yp, xp) - at(yp, xm));
                let gy = (at(ym, xm) - at(yp, xm))
                    + 2.0 * (at(ym, x) - at(yp, x))
                    + (at(ym, xp) - at(yp, xp));
                out.push((gx * gx + gy * gy).sqrt());
            }
        }
    }
    Tensor::from_raw(vec![c, h, w], out)?.finite_or("gradient_density")
}

/// Gradient feature extractor: head conv, residual blocks, then two
/// stride-2 convolutions down to a quarter of the input resolution.
#[derive(Clone, Debug, PartialEq)]
pub struct GfeParams {
    pub head: ConvParams,
    pub blocks: Vec<ResBlockParams>,
    pub down1: ConvParams,
    pub down2: ConvParams,
}

/// `down2(relu(down1(RB*(relu(head(g))))))`.
pub fn grad_feature_extractor(g: &Tensor, p: &GfeParams) -> Result<Tensor> {
    if p.blocks.iter().any(|b| b.channels() != p.head.c_out()) {
        return Err(Error::shape("GFE residual width differs from head output"));
    }
    let x = relu(&conv3x3_forward(g, &p.head)?)?;
    let x = residual_stack(&x, &p.blocks)?;
    let x = relu(&conv3x3_strided(&x, &p.down1, 2)?)?;
    conv3x3_strided(&x, &p.down2, 2)
}
