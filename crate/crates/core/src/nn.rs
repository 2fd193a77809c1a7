//! Forward-only 3x3 convolution and residual blocks.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Output channels computed per parallel task. Fixed so the arithmetic does
/// not depend on the worker count.
const COUT_CHUNK: usize = 16;
/// Upper bound on im2col buffer elements per band of output rows.
const BAND_ELEMS: usize = 1 << 22;

/// Weights `(C_out, C_in, 3, 3)` and bias `(C_out)` of a 3x3 convolution.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvParams {
    weight: Tensor,
    bias: Tensor,
}

impl ConvParams {
    pub fn new(weight: Tensor, bias: Tensor) -> Result<Self> {
        let [c_out, _, kh, kw] = weight.shape()[..] else {
            return Err(Error::shape(format!(
                "conv weight must be rank 4, got {:?}",
                weight.shape()
            )));
        };
        if (kh, kw) != (3, 3) {
            return Err(Error::shape(format!("conv kernels are 3x3, got {kh}x{kw}")));
        }
        if bias.shape() != [c_out] {
            return Err(Error::shape(format!(
                "bias shape {:?} does not match {c_out} output channels",
                bias.shape()
            )));
        }
        Ok(ConvParams { weight, bias })
    }

    pub fn zeros(c_in: usize, c_out: usize) -> Result<Self> {
        Self::new(
            Tensor::zeros(vec![c_out, c_in, 3, 3])?,
            Tensor::zeros(vec![c_out])?,
        )
    }

    pub fn weight(&self) -> &Tensor {
        &self.weight
    }

    pub fn bias(&self) -> &Tensor {
        &self.bias
    }

    pub fn c_in(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn c_out(&self) -> usize {
        self.weight.shape()[0]
    }
}

/// Shape-preserving 3x3 convolution (stride 1, zero padding 1).
pub fn conv3x3_forward(x: &Tensor, p: &ConvParams) -> Result<Tensor> {
    conv3x3_strided(x, p, 1)
}

/// 3x3 cross-correlation with zero padding 1. Output size is
/// `(n - 1) / stride + 1` per axis.
pub fn conv3x3_strided(x: &Tensor, p: &ConvParams, stride: usize) -> Result<Tensor> {
    let (c_in, h, w) = x.dims3()?;
    if c_in != p.c_in() {
        return Err(Error::shape(format!(
            "conv expects {} input channels, got {c_in}",
            p.c_in()
        )));
    }
    if stride == 0 {
        return Err(Error::Param("conv stride must be positive".into()));
    }
    let c_out = p.c_out();
    let oh = (h - 1) / stride + 1;
    let ow = (w - 1) / stride + 1;
    let kdim = c_in * 9;
    let band = (BAND_ELEMS / (kdim * ow)).clamp(1, oh);
    let weights = p.weight.data();
    let bias = p.bias.data();
    let mut out = vec![0f32; c_out * oh * ow];

    let mut cols = Vec::new();
    let mut tile = Vec::new();
    for y0 in (0..oh).step_by(band) {
        let rows = band.min(oh - y0);
        let n = rows * ow;
        cols.clear();
        cols.resize(kdim * n, 0f32);
        cols.par_chunks_mut(n).enumerate().for_each(|(r, dst)| {
            let ci = r / 9;
            let (ky, kx) = ((r % 9) / 3, r % 3);
            let plane = x.channel(ci);
            for oy in 0..rows {
                let sy = ((y0 + oy) * stride + ky) as isize - 1;
                if sy < 0 || sy as usize >= h {
                    continue;
                }
                let src = &plane[sy as usize * w..(sy as usize + 1) * w];
                let drow = &mut dst[oy * ow..(oy + 1) * ow];
                for (ox, d) in drow.iter_mut().enumerate() {
                    let sx = (ox * stride + kx) as isize - 1;
                    if sx >= 0 && (sx as usize) < w {
                        *d = src[sx as usize];
                    }
                }
            }
        });

        tile.clear();
        tile.resize(c_out * n, 0f32);
        tile.par_chunks_mut(COUT_CHUNK * n)
            .enumerate()
            .for_each(|(chunk, dst)| {
                let o0 = chunk * COUT_CHUNK;
                let m = dst.len() / n;
                for (o, row) in dst.chunks_mut(n).enumerate() {
                    row.fill(bias[o0 + o]);
                }
                // SAFETY: `a` is m x kdim row-major, `b` is kdim x n row-major and
                // `c` is m x n row-major; all three slices have exactly that length.
                unsafe {
                    matrixmultiply::sgemm(
                        m,
                        kdim,
                        n,
                        1.0,
                        weights[o0 * kdim..].as_ptr(),
                        kdim as isize,
                        1,
                        cols.as_ptr(),
                        n as isize,
                        1,
                        1.0,
                        dst.as_mut_ptr(),
                        n as isize,
                        1,
                    );
                }
            });
        for o in 0..c_out {
            out[o * oh * ow + y0 * ow..][..n].copy_from_slice(&tile[o * n..(o + 1) * n]);
        }
    }
    Tensor::from_raw(vec![c_out, oh, ow], out)?.finite_or("conv3x3")
}

pub fn relu(x: &Tensor) -> Result<Tensor> {
    x.map(|v| v.max(0.0))
}

/// Two shape-preserving convolutions of a residual block.
#[derive(Clone, Debug, PartialEq)]
pub struct ResBlockParams {
    pub conv1: ConvParams,
    pub conv2: ConvParams,
}

impl ResBlockParams {
    pub fn new(conv1: ConvParams, conv2: ConvParams) -> Result<Self> {
        let c = conv1.c_in();
        if conv1.c_out() != c || conv2.c_in() != c || conv2.c_out() != c {
            return Err(Error::shape(format!(
                "residual block convs must all map {c} -> {c} channels"
            )));
        }
        Ok(ResBlockParams { conv1, conv2 })
    }

    pub fn channels(&self) -> usize {
        self.conv1.c_in()
    }
}

/// `x + conv2(relu(conv1(x)))`.
pub fn residual_block(x: &Tensor, p: &ResBlockParams) -> Result<Tensor> {
    let branch = conv3x3_forward(&relu(&conv3x3_forward(x, &p.conv1)?)?, &p.conv2)?;
    x.add(&branch)
}

/// Applies residual blocks in order.
pub fn residual_stack(x: &Tensor, blocks: &[ResBlockParams]) -> Result<Tensor> {
    let mut cur = x.clone();
    for b in blocks {
        cur = residual_block(&cur, b)?;
    }
    Ok(cur)
}
