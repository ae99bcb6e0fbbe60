//! Brute-force reference kernels.
//!
//! Direct nested loops with no blocking, no im2col and no parallelism. Each
//! output element is accumulated from `0.0` in the order input channel, kernel
//! row, kernel column, and the bias (if any) is added last. Nothing here calls
//! into [`crate::ops`]; only the parameter types are shared.

use crate::error::{Error, Result};
use crate::ops::{ConvParams, DwConvParams, FcParams};
use crate::tensor::Tensor;

fn out_dim(input: usize, k: usize, s: usize, pad: usize) -> Result<usize> {
    let padded = input + 2 * pad;
    if s == 0 || padded < k {
        return Err(Error::EmptyOutput { input, kernel: k, stride: s, pad });
    }
    Ok((padded - k) / s + 1)
}

/// Reads `x[n, c, ih, iw]` where `ih`/`iw` are in padded coordinates.
fn padded_at(x: &[f32], dims: (usize, usize, usize, usize), n: usize, c: usize, ih: isize, iw: isize) -> Option<f32> {
    let (_, ch, h, w) = dims;
    if ih < 0 || iw < 0 || ih as usize >= h || iw as usize >= w {
        return None;
    }
    Some(x[((n * ch + c) * h + ih as usize) * w + iw as usize])
}

pub fn naive_conv2d(x: &Tensor, p: &ConvParams) -> Result<Tensor> {
    let [n, cin, h, w] = <[usize; 4]>::try_from(x.shape())
        .map_err(|_| Error::Rank { expected: 4, shape: x.shape().to_vec() })?;
    let [cout, kcin, kh, kw] = <[usize; 4]>::try_from(p.kernel.shape())
        .map_err(|_| Error::Rank { expected: 4, shape: p.kernel.shape().to_vec() })?;
    if kcin != cin {
        return Err(Error::ChannelMismatch { expected: kcin, actual: cin });
    }
    let oh = out_dim(h, kh, p.stride, p.padding)?;
    let ow = out_dim(w, kw, p.stride, p.padding)?;
    let xd = x.data();
    let kd = p.kernel.data();
    let mut out = vec![0.0f32; n * cout * oh * ow];
    for b in 0..n {
        for co in 0..cout {
            for y in 0..oh {
                for z in 0..ow {
                    let mut sum = 0.0f32;
                    for ci in 0..cin {
                        for i in 0..kh {
                            for j in 0..kw {
                                let ih = (y * p.stride + i) as isize - p.padding as isize;
                                let iw = (z * p.stride + j) as isize - p.padding as isize;
                                if let Some(v) = padded_at(xd, (n, cin, h, w), b, ci, ih, iw) {
                                    sum += v * kd[((co * cin + ci) * kh + i) * kw + j];
                                }
                            }
                        }
                    }
                    if let Some(bias) = &p.bias {
                        sum += bias.data()[co];
                    }
                    out[((b * cout + co) * oh + y) * ow + z] = sum;
                }
            }
        }
    }
    Tensor::new(&[n, cout, oh, ow], out)
}

pub fn naive_dwconv2d(x: &Tensor, p: &DwConvParams) -> Result<Tensor> {
    let [n, c, h, w] = <[usize; 4]>::try_from(x.shape())
        .map_err(|_| Error::Rank { expected: 4, shape: x.shape().to_vec() })?;
    let [kc, one, kh, kw] = <[usize; 4]>::try_from(p.kernel.shape())
        .map_err(|_| Error::Rank { expected: 4, shape: p.kernel.shape().to_vec() })?;
    if kc != c || one != 1 {
        return Err(Error::ChannelMismatch { expected: kc, actual: c });
    }
    let oh = out_dim(h, kh, p.stride, p.padding)?;
    let ow = out_dim(w, kw, p.stride, p.padding)?;
    let xd = x.data();
    let kd = p.kernel.data();
    let mut out = vec![0.0f32; n * c * oh * ow];
    for b in 0..n {
        for ch in 0..c {
            for y in 0..oh {
                for z in 0..ow {
                    let mut sum = 0.0f32;
                    for i in 0..kh {
                        for j in 0..kw {
                            let ih = (y * p.stride + i) as isize - p.padding as isize;
                            let iw = (z * p.stride + j) as isize - p.padding as isize;
                            if let Some(v) = padded_at(xd, (n, c, h, w), b, ch, ih, iw) {
                                sum += v * kd[(ch * kh + i) * kw + j];
                            }
                        }
                    }
                    out[((b * c + ch) * oh + y) * ow + z] = sum;
                }
            }
        }
    }
    Tensor::new(&[n, c, oh, ow], out)
}

pub fn naive_fc(x: &Tensor, p: &FcParams) -> Result<Tensor> {
    let [out_dim, in_dim] = <[usize; 2]>::try_from(p.weight.shape())
        .map_err(|_| Error::Rank { expected: 2, shape: p.weight.shape().to_vec() })?;
    if x.rank() != 1 || x.len() != in_dim {
        return Err(Error::DimMismatch { expected: in_dim, actual: x.len() });
    }
    if p.bias.len() != out_dim {
        return Err(Error::DimMismatch { expected: out_dim, actual: p.bias.len() });
    }
    let mut out = Vec::with_capacity(out_dim);
    for o in 0..out_dim {
        let mut sum = 0.0f32;
        for i in 0..in_dim {
            sum += p.weight.data()[o * in_dim + i] * x.data()[i];
        }
        out.push(sum + p.bias.data()[o]);
    }
    Tensor::vector(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hand_case_two_by_two() {
        let x = Tensor::new(&[1, 1, 2, 2], vec![1., 2., 3., 4.]).unwrap();
        let k = Tensor::new(&[1, 1, 2, 2], vec![1., 0., 0., 1.]).unwrap();
        let p = ConvParams { kernel: k, bias: None, stride: 1, padding: 0 };
        let y = naive_conv2d(&x, &p).unwrap();
        assert_eq!(y.shape(), &[1, 1, 1, 1]);
        assert_eq!(y.data(), &[5.0]);
    }

    #[test]
    fn identity_kernels_copy_input() {
        let x = Tensor::from_fn(&[2, 3, 4, 5], |i| (i as f32 * 0.37).sin()).unwrap();
        let mut k = vec![0.0; 9];
        for c in 0..3 {
            k[c * 3 + c] = 1.0;
        }
        let p = ConvParams { kernel: Tensor::new(&[3, 3, 1, 1], k).unwrap(), bias: None, stride: 1, padding: 0 };
        assert_eq!(naive_conv2d(&x, &p).unwrap(), x);

        let mut dk = vec![0.0; 27];
        for c in 0..3 {
            dk[c * 9 + 4] = 1.0;
        }
        let dp = DwConvParams { kernel: Tensor::new(&[3, 1, 3, 3], dk).unwrap(), stride: 1, padding: 1 };
        assert_eq!(naive_dwconv2d(&x, &dp).unwrap(), x);

        let mut w = vec![0.0; 16];
        for i in 0..4 {
            w[i * 4 + i] = 1.0;
        }
        let fp = FcParams { weight: Tensor::new(&[4, 4], w).unwrap(), bias: Tensor::zeros(&[4]).unwrap() };
        let v = Tensor::vector(vec![1.5, -2.0, 0.25, 8.0]).unwrap();
        assert_eq!(naive_fc(&v, &fp).unwrap(), v);
    }

    #[test]
    fn rejects_mismatches() {
        let x = Tensor::zeros(&[1, 2, 4, 4]).unwrap();
        let p = ConvParams { kernel: Tensor::zeros(&[1, 3, 3, 3]).unwrap(), bias: None, stride: 1, padding: 1 };
        assert!(naive_conv2d(&x, &p).is_err());
        let dp = DwConvParams { kernel: Tensor::zeros(&[3, 1, 3, 3]).unwrap(), stride: 1, padding: 1 };
        assert!(naive_dwconv2d(&x, &dp).is_err());
        let big = ConvParams { kernel: Tensor::zeros(&[1, 2, 3, 3]).unwrap(), bias: None, stride: 1, padding: 0 };
        assert!(naive_conv2d(&Tensor::zeros(&[1, 2, 2, 2]).unwrap(), &big).is_err());
    }
}
