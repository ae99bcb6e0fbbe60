//! Inference kernels: convolution (standard, depthwise, pointwise), batch
//! normalization and its folding into a preceding convolution, PReLU/ReLU,
//! fully-connected, residual addition and flatten.
//!
//! Convolutions are cross-correlations. Every output element is accumulated
//! from `0.0` in the fixed order input channel, kernel row, kernel column, with
//! the bias added last. Parallelism only ever splits work across output
//! elements, so results do not depend on the thread count.

use std::borrow::Cow;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const BN_EPSILON: f32 = 1e-5;
pub const PRELU_INIT_SLOPE: f32 = 0.25;

#[derive(Clone, Debug, PartialEq)]
pub struct ConvParams {
    /// `[Cout, Cin, kH, kW]`
    pub kernel: Tensor,
    /// `[Cout]`
    pub bias: Option<Tensor>,
    pub stride: usize,
    pub padding: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DwConvParams {
    /// `[C, 1, kH, kW]`
    pub kernel: Tensor,
    pub stride: usize,
    pub padding: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BatchNormParams {
    pub gamma: Tensor,
    pub beta: Tensor,
    pub running_mean: Tensor,
    pub running_var: Tensor,
    pub epsilon: f32,
}

impl BatchNormParams {
    /// gamma=1, beta=0, mean=0, var=1.
    pub fn identity(channels: usize, epsilon: f32) -> Result<Self> {
        Ok(Self {
            gamma: Tensor::full(&[channels], 1.0)?,
            beta: Tensor::zeros(&[channels])?,
            running_mean: Tensor::zeros(&[channels])?,
            running_var: Tensor::full(&[channels], 1.0)?,
            epsilon,
        })
    }

    pub fn channels(&self) -> usize {
        self.gamma.len()
    }

    /// Per-channel `(scale, shift)` with `bn(x) = scale * x + shift`.
    fn scale_shift(&self) -> Result<(Vec<f32>, Vec<f32>)> {
        let c = self.channels();
        for t in [&self.beta, &self.running_mean, &self.running_var] {
            if t.len() != c {
                return Err(Error::DimMismatch { expected: c, actual: t.len() });
            }
        }
        if self.epsilon.is_nan() || self.epsilon < 0.0 {
            return Err(Error::InvalidParam(format!("batchnorm epsilon {} < 0", self.epsilon)));
        }
        let mut scale = Vec::with_capacity(c);
        let mut shift = Vec::with_capacity(c);
        for i in 0..c {
            let var = self.running_var.data()[i];
            if var.is_nan() || var < 0.0 {
                return Err(Error::InvalidParam(format!("running_var[{i}] = {var} is negative")));
            }
            let denom = (var + self.epsilon).sqrt();
            if denom == 0.0 {
                return Err(Error::InvalidParam(format!("running_var[{i}] + epsilon is zero")));
            }
            let s = self.gamma.data()[i] / denom;
            scale.push(s);
            shift.push(self.beta.data()[i] - self.running_mean.data()[i] * s);
        }
        Ok((scale, shift))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PReLUParams {
    pub slopes: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FcParams {
    /// `[out_dim, in_dim]`
    pub weight: Tensor,
    /// `[out_dim]`
    pub bias: Tensor,
}

/// `floor((input + 2*pad - kernel) / stride) + 1`, or an error when that is < 1.
pub fn conv_out_dim(input: usize, kernel: usize, stride: usize, pad: usize) -> Result<usize> {
    let padded = input + 2 * pad;
    if stride == 0 || kernel == 0 || padded < kernel {
        return Err(Error::EmptyOutput { input, kernel, stride, pad });
    }
    Ok((padded - kernel) / stride + 1)
}

/// Unrolls one image `[C, H, W]` into a `[C*kh*kw, oh*ow]` column matrix.
/// Rows are ordered (channel, kernel row, kernel column); padding reads as zero.
#[allow(clippy::too_many_arguments)]
fn im2col(
    img: &[f32],
    (c, h, w): (usize, usize, usize),
    (kh, kw): (usize, usize),
    stride: usize,
    pad: usize,
    (oh, ow): (usize, usize),
) -> Vec<f32> {
    let plane = oh * ow;
    let mut cols = vec![0.0f32; c * kh * kw * plane];
    for ch in 0..c {
        let src = &img[ch * h * w..(ch + 1) * h * w];
        for i in 0..kh {
            for j in 0..kw {
                let row = &mut cols[((ch * kh + i) * kw + j) * plane..][..plane];
                for y in 0..oh {
                    let ih = (y * stride + i) as isize - pad as isize;
                    if ih < 0 || ih as usize >= h {
                        continue;
                    }
                    let src_row = &src[ih as usize * w..(ih as usize + 1) * w];
                    let dst = &mut row[y * ow..(y + 1) * ow];
                    for (z, d) in dst.iter_mut().enumerate() {
                        let iw = (z * stride + j) as isize - pad as isize;
                        if iw >= 0 && (iw as usize) < w {
                            *d = src_row[iw as usize];
                        }
                    }
                }
            }
        }
    }
    cols
}

pub fn conv2d(x: &Tensor, p: &ConvParams) -> Result<Tensor> {
    let (n, cin, h, w) = x.dims4()?;
    let (cout, kcin, kh, kw) = p.kernel.dims4()?;
    if kcin != cin {
        return Err(Error::ChannelMismatch { expected: kcin, actual: cin });
    }
    if let Some(b) = &p.bias {
        if b.len() != cout {
            return Err(Error::DimMismatch { expected: cout, actual: b.len() });
        }
    }
    let oh = conv_out_dim(h, kh, p.stride, p.padding)?;
    let ow = conv_out_dim(w, kw, p.stride, p.padding)?;
    let plane = oh * ow;
    let k_len = cin * kh * kw;
    let kd = p.kernel.data();
    let bias = p.bias.as_ref().map(|b| b.data());

    let mut out = vec![0.0f32; n * cout * plane];
    for (b, out_b) in out.chunks_exact_mut(cout * plane).enumerate() {
        let img = &x.data()[b * cin * h * w..(b + 1) * cin * h * w];
        let pointwise = kh == 1 && kw == 1 && p.stride == 1 && p.padding == 0;
        let cols: Cow<[f32]> = if pointwise {
            Cow::Borrowed(img)
        } else {
            Cow::Owned(im2col(img, (cin, h, w), (kh, kw), p.stride, p.padding, (oh, ow)))
        };
        out_b.par_chunks_mut(plane).enumerate().for_each(|(co, row)| {
            let weights = &kd[co * k_len..(co + 1) * k_len];
            for (k, &wv) in weights.iter().enumerate() {
                let col = &cols[k * plane..(k + 1) * plane];
                for (o, &v) in row.iter_mut().zip(col) {
                    *o += wv * v;
                }
            }
            if let Some(bias) = bias {
                let bv = bias[co];
                for o in row.iter_mut() {
                    *o += bv;
                }
            }
        });
    }
    Tensor::new(&[n, cout, oh, ow], out)
}

pub fn dwconv2d(x: &Tensor, p: &DwConvParams) -> Result<Tensor> {
    let (n, c, h, w) = x.dims4()?;
    let (kc, kin, kh, kw) = p.kernel.dims4()?;
    if kin != 1 {
        return Err(Error::InvalidParam(format!("depthwise kernel must be [C,1,kH,kW], got {:?}", p.kernel.shape())));
    }
    if kc != c {
        return Err(Error::ChannelMismatch { expected: kc, actual: c });
    }
    let (s, pad) = (p.stride, p.padding);
    let oh = conv_out_dim(h, kh, s, pad)?;
    let ow = conv_out_dim(w, kw, s, pad)?;
    let kd = p.kernel.data();
    let xd = x.data();

    let mut out = vec![0.0f32; n * c * oh * ow];
    out.par_chunks_mut(oh * ow).enumerate().for_each(|(plane_idx, dst)| {
        let ch = plane_idx % c;
        let src = &xd[plane_idx * h * w..(plane_idx + 1) * h * w];
        let filt = &kd[ch * kh * kw..(ch + 1) * kh * kw];
        for i in 0..kh {
            for j in 0..kw {
                let wv = filt[i * kw + j];
                // columns z with 0 <= z*s + j - pad < w
                let z_lo = if pad > j { (pad - j).div_ceil(s) } else { 0 };
                let z_hi = ow.min((w + pad).saturating_sub(j).div_ceil(s));
                if z_lo >= z_hi {
                    continue;
                }
                for y in 0..oh {
                    let ih = (y * s + i) as isize - pad as isize;
                    if ih < 0 || ih as usize >= h {
                        continue;
                    }
                    let src_row = &src[ih as usize * w..(ih as usize + 1) * w];
                    let dst_row = &mut dst[y * ow..(y + 1) * ow];
                    for z in z_lo..z_hi {
                        dst_row[z] += wv * src_row[z * s + j - pad];
                    }
                }
            }
        }
    });
    Tensor::new(&[n, c, oh, ow], out)
}

/// Inference-mode batch norm: `gamma * (x - mean) / sqrt(var + eps) + beta`.
pub fn batchnorm(x: &Tensor, p: &BatchNormParams) -> Result<Tensor> {
    let (_, c, h, w) = x.dims4()?;
    if p.channels() != c {
        return Err(Error::ChannelMismatch { expected: p.channels(), actual: c });
    }
    // validates lengths and variances
    p.scale_shift()?;
    let plane = h * w;
    let mut out = x.clone();
    for (idx, chunk) in out.data_mut().chunks_exact_mut(plane).enumerate() {
        let ch = idx % c;
        let g = p.gamma.data()[ch];
        let b = p.beta.data()[ch];
        let m = p.running_mean.data()[ch];
        let d = (p.running_var.data()[ch] + p.epsilon).sqrt();
        for v in chunk {
            *v = g * (*v - m) / d + b;
        }
    }
    Ok(out)
}

/// Folds an inference batch norm into the preceding convolution, producing a
/// biased convolution with `conv'(x) == bn(conv(x))` up to rounding.
pub fn fold_bn(conv: &ConvParams, bn: &BatchNormParams) -> Result<ConvParams> {
    let (cout, cin, kh, kw) = conv.kernel.dims4()?;
    if bn.channels() != cout {
        return Err(Error::ChannelMismatch { expected: cout, actual: bn.channels() });
    }
    let (scale, shift) = bn.scale_shift()?;
    let per_out = cin * kh * kw;
    let mut kernel = conv.kernel.clone();
    for (co, row) in kernel.data_mut().chunks_exact_mut(per_out).enumerate() {
        for v in row {
            *v *= scale[co];
        }
    }
    let bias = (0..cout)
        .map(|co| {
            let b = conv.bias.as_ref().map_or(0.0, |b| b.data()[co]);
            b * scale[co] + shift[co]
        })
        .collect();
    Ok(ConvParams { kernel, bias: Some(Tensor::vector(bias)?), stride: conv.stride, padding: conv.padding })
}

pub fn prelu(x: &Tensor, p: &PReLUParams) -> Result<Tensor> {
    let (_, c, h, w) = x.dims4()?;
    if p.slopes.len() != c {
        return Err(Error::ChannelMismatch { expected: p.slopes.len(), actual: c });
    }
    let mut out = x.clone();
    for (idx, chunk) in out.data_mut().chunks_exact_mut(h * w).enumerate() {
        let a = p.slopes.data()[idx % c];
        for v in chunk {
            if *v < 0.0 {
                *v *= a;
            }
        }
    }
    Ok(out)
}

pub fn relu(x: &Tensor) -> Tensor {
    let mut out = x.clone();
    for v in out.data_mut() {
        *v = v.max(0.0);
    }
    out
}

/// `weight · x + bias` for a single vector.
pub fn fully_connected(x: &Tensor, p: &FcParams) -> Result<Tensor> {
    x.expect_rank(1)?;
    let rows = fc_rows(x.data(), p)?;
    Tensor::vector(rows)
}

/// Row-wise [`fully_connected`] over a `[N, in_dim]` batch.
pub fn fully_connected_batch(x: &Tensor, p: &FcParams) -> Result<Tensor> {
    x.expect_rank(2)?;
    let n = x.shape()[0];
    let in_dim = x.shape()[1];
    let mut data = Vec::new();
    for row in x.data().chunks_exact(in_dim) {
        data.extend(fc_rows(row, p)?);
    }
    let out_dim = data.len() / n;
    Tensor::new(&[n, out_dim], data)
}

fn fc_rows(x: &[f32], p: &FcParams) -> Result<Vec<f32>> {
    p.weight.expect_rank(2)?;
    let (out_dim, in_dim) = (p.weight.shape()[0], p.weight.shape()[1]);
    if x.len() != in_dim {
        return Err(Error::DimMismatch { expected: in_dim, actual: x.len() });
    }
    if p.bias.len() != out_dim {
        return Err(Error::DimMismatch { expected: out_dim, actual: p.bias.len() });
    }
    let bias = p.bias.data();
    Ok(p.weight
        .data()
        .par_chunks_exact(in_dim)
        .enumerate()
        .map(|(o, wrow)| {
            let mut sum = 0.0f32;
            for (wv, xv) in wrow.iter().zip(x) {
                sum += wv * xv;
            }
            sum + bias[o]
        })
        .collect())
}

pub fn residual_add(x: &Tensor, y: &Tensor) -> Result<Tensor> {
    if x.shape() != y.shape() {
        return Err(Error::ShapeMismatch(x.shape().to_vec(), y.shape().to_vec()));
    }
    let data = x.data().iter().zip(y.data()).map(|(a, b)| a + b).collect();
    Tensor::new(x.shape(), data)
}

/// `[N, C, H, W] -> [N, C*H*W]`, each sample flattened in C, H, W order.
pub fn flatten(x: &Tensor) -> Result<Tensor> {
    let (n, c, h, w) = x.dims4()?;
    x.clone().reshape(&[n, c * h * w])
}
