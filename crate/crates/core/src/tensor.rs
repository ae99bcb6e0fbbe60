//! Dense `f32` tensor with a single fixed layout.
//!
//! Activations are `[N, C, H, W]`, row-major with `W` varying fastest. Lower
//! ranks (1..=3) are used for vectors, matrices and kernel banks. There are no
//! strided views and no broadcasting; every tensor owns its contiguous buffer.

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
}

fn check_shape(shape: &[usize]) -> Result<usize> {
    if shape.is_empty() || shape.len() > 4 || shape.contains(&0) {
        return Err(Error::InvalidShape(shape.to_vec()));
    }
    Ok(shape.iter().product())
}

impl Tensor {
    pub fn new(shape: &[usize], data: Vec<f32>) -> Result<Self> {
        let len = check_shape(shape)?;
        if len != data.len() {
            return Err(Error::DataLength { shape: shape.to_vec(), len: data.len() });
        }
        Ok(Self { shape: shape.to_vec(), data })
    }

    pub fn zeros(shape: &[usize]) -> Result<Self> {
        let len = check_shape(shape)?;
        Ok(Self { shape: shape.to_vec(), data: vec![0.0; len] })
    }

    pub fn full(shape: &[usize], value: f32) -> Result<Self> {
        let len = check_shape(shape)?;
        Ok(Self { shape: shape.to_vec(), data: vec![value; len] })
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> f32) -> Result<Self> {
        let len = check_shape(shape)?;
        Ok(Self { shape: shape.to_vec(), data: (0..len).map(&mut f).collect() })
    }

    pub fn vector(data: Vec<f32>) -> Result<Self> {
        let n = data.len();
        Self::new(&[n], data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    /// Same buffer, new shape. The element count must be preserved.
    pub fn reshape(self, shape: &[usize]) -> Result<Self> {
        Self::new(shape, self.data)
    }

    /// Unpacks an `[N, C, H, W]` shape.
    pub fn dims4(&self) -> Result<(usize, usize, usize, usize)> {
        match *self.shape.as_slice() {
            [n, c, h, w] => Ok((n, c, h, w)),
            _ => Err(Error::Rank { expected: 4, shape: self.shape.clone() }),
        }
    }

    pub(crate) fn expect_rank(&self, rank: usize) -> Result<()> {
        if self.rank() != rank {
            return Err(Error::Rank { expected: rank, shape: self.shape.clone() });
        }
        Ok(())
    }

    /// Errors if any element is NaN or infinite.
    pub fn validate_finite(&self, what: &str) -> Result<()> {
        if self.data.iter().all(|v| v.is_finite()) {
            Ok(())
        } else {
            Err(Error::NonFinite(what.to_string()))
        }
    }

    /// Row `i` of the outermost dimension, as an owned tensor with that axis dropped
    /// (rank-1 tensors yield a length-1 vector).
    pub fn sample(&self, i: usize) -> Result<Tensor> {
        let outer = self.shape[0];
        if i >= outer {
            return Err(Error::InvalidParam(format!("index {i} out of range for outer dim {outer}")));
        }
        let inner = self.len() / outer;
        let shape: Vec<usize> = if self.rank() == 1 { vec![1] } else { self.shape[1..].to_vec() };
        Tensor::new(&shape, self.data[i * inner..(i + 1) * inner].to_vec())
    }

    /// Concatenates tensors of identical shape along a new (or existing, for
    /// rank-4 `N`) outer axis. Inputs of shape `[1, ...]` are stacked on that axis.
    pub fn stack(parts: &[Tensor]) -> Result<Tensor> {
        let first = parts
            .first()
            .ok_or_else(|| Error::InvalidParam("cannot stack zero tensors".into()))?;
        let mut data = Vec::with_capacity(first.len() * parts.len());
        for p in parts {
            if p.shape != first.shape {
                return Err(Error::ShapeMismatch(first.shape.clone(), p.shape.clone()));
            }
            data.extend_from_slice(&p.data);
        }
        let mut shape = first.shape.clone();
        if shape[0] == 1 && shape.len() > 1 {
            shape[0] = parts.len();
        } else {
            shape.insert(0, parts.len());
        }
        Tensor::new(&shape, data)
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> Result<f32> {
        if self.shape != other.shape {
            return Err(Error::ShapeMismatch(self.shape.clone(), other.shape.clone()));
        }
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f32::max))
    }

    pub fn l2_norm(&self) -> f32 {
        let sum: f64 = self.data.iter().map(|&v| f64::from(v) * f64::from(v)).sum();
        sum.sqrt() as f32
    }
}

pub fn zeros(shape: &[usize]) -> Result<Tensor> {
    Tensor::zeros(shape)
}

/// Left-right mirror: `out[n,c,h,w] = in[n,c,h,W-1-w]`.
pub fn hflip(t: &Tensor) -> Result<Tensor> {
    let (_, _, _, w) = t.dims4()?;
    let mut data = t.data.clone();
    for row in data.chunks_exact_mut(w) {
        row.reverse();
    }
    Tensor::new(&t.shape, data)
}

pub fn l2_normalize(v: &Tensor) -> Result<Tensor> {
    v.expect_rank(1)?;
    let norm = v.l2_norm();
    if norm == 0.0 || !norm.is_finite() {
        return Err(Error::ZeroVector);
    }
    let data = v.data.iter().map(|x| x / norm).collect();
    Tensor::new(&v.shape, data)
}

/// `max |a - b| <= atol`.
pub fn allclose(a: &Tensor, b: &Tensor, atol: f32) -> Result<bool> {
    Ok(a.max_abs_diff(b)? <= atol)
}
