//! Randomized comparisons of the optimized kernels against [`crate::oracle`].
//!
//! Instances are drawn from a seeded ChaCha8 stream, so every run of a given
//! `(count, seed)` checks the same cases.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::Result;
use crate::ops::{self, BatchNormParams, ConvParams, DwConvParams, FcParams, BN_EPSILON};
use crate::oracle;
use crate::tensor::Tensor;

/// Outcome of one randomized suite.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CrossCheck {
    pub instances: usize,
    pub max_abs_diff: f32,
    /// Instances whose outputs matched bit for bit.
    pub bitwise_equal: usize,
}

impl CrossCheck {
    pub fn within(&self, atol: f32) -> bool {
        self.max_abs_diff <= atol
    }
}

struct Tally(CrossCheck);

impl Tally {
    fn new() -> Self {
        Self(CrossCheck { instances: 0, max_abs_diff: 0.0, bitwise_equal: 0 })
    }

    fn add(&mut self, a: &Tensor, b: &Tensor) -> Result<()> {
        let d = a.max_abs_diff(b)?;
        self.0.instances += 1;
        self.0.max_abs_diff = self.0.max_abs_diff.max(if d.is_nan() { f32::INFINITY } else { d });
        if a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits()) {
            self.0.bitwise_equal += 1;
        }
        Ok(())
    }
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize]) -> Result<Tensor> {
    Tensor::from_fn(shape, |_| rng.random_range(-1.0f32..1.0))
}

/// Geometry with `N <= 2`, channels `<= 8`, spatial `<= 16`, `k` in {1, 3},
/// stride in {1, 2}, padding in {0, 1}, redrawn until the output is non-empty.
fn geometry(rng: &mut ChaCha8Rng) -> (usize, usize, usize, usize, usize, usize, usize) {
    loop {
        let n = rng.random_range(1..=2);
        let c = rng.random_range(1..=8);
        let h = rng.random_range(1..=16);
        let w = rng.random_range(1..=16);
        let k = if rng.random_bool(0.5) { 1 } else { 3 };
        let s = rng.random_range(1..=2);
        let pad = rng.random_range(0..=1);
        if h + 2 * pad >= k && w + 2 * pad >= k {
            return (n, c, h, w, k, s, pad);
        }
    }
}

fn random_conv(rng: &mut ChaCha8Rng) -> Result<(Tensor, ConvParams)> {
    let (n, cin, h, w, k, stride, padding) = geometry(rng);
    let cout = rng.random_range(1..=8);
    let x = uniform(rng, &[n, cin, h, w])?;
    let kernel = uniform(rng, &[cout, cin, k, k])?;
    let bias = if rng.random_bool(0.5) { Some(uniform(rng, &[cout])?) } else { None };
    Ok((x, ConvParams { kernel, bias, stride, padding }))
}

pub fn conv2d_vs_oracle(count: usize, seed: u64) -> Result<CrossCheck> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut t = Tally::new();
    for _ in 0..count {
        let (x, p) = random_conv(&mut rng)?;
        t.add(&ops::conv2d(&x, &p)?, &oracle::naive_conv2d(&x, &p)?)?;
    }
    Ok(t.0)
}

pub fn dwconv2d_vs_oracle(count: usize, seed: u64) -> Result<CrossCheck> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut t = Tally::new();
    for _ in 0..count {
        let (n, c, h, w, k, stride, padding) = geometry(&mut rng);
        let x = uniform(&mut rng, &[n, c, h, w])?;
        let p = DwConvParams { kernel: uniform(&mut rng, &[c, 1, k, k])?, stride, padding };
        t.add(&ops::dwconv2d(&x, &p)?, &oracle::naive_dwconv2d(&x, &p)?)?;
    }
    Ok(t.0)
}

/// Dense layers with `in_dim <= 512` and `out_dim <= 64`.
pub fn fc_vs_oracle(count: usize, seed: u64) -> Result<CrossCheck> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut t = Tally::new();
    for _ in 0..count {
        let in_dim = rng.random_range(1..=512);
        let out_dim = rng.random_range(1..=64);
        let x = uniform(&mut rng, &[in_dim])?;
        let p = FcParams { weight: uniform(&mut rng, &[out_dim, in_dim])?, bias: uniform(&mut rng, &[out_dim])? };
        t.add(&ops::fully_connected(&x, &p)?, &oracle::naive_fc(&x, &p)?)?;
    }
    Ok(t.0)
}

/// `batchnorm(conv2d(x))` against `conv2d(x)` with the BN folded into the kernel.
pub fn bn_fold(count: usize, seed: u64) -> Result<CrossCheck> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut t = Tally::new();
    for _ in 0..count {
        let (x, conv) = random_conv(&mut rng)?;
        let c = conv.kernel.shape()[0];
        let bn = BatchNormParams {
            gamma: Tensor::from_fn(&[c], |_| rng.random_range(0.5f32..1.5))?,
            beta: uniform(&mut rng, &[c])?,
            running_mean: uniform(&mut rng, &[c])?,
            running_var: Tensor::from_fn(&[c], |_| rng.random_range(0.1f32..2.0))?,
            epsilon: BN_EPSILON,
        };
        let unfolded = ops::batchnorm(&ops::conv2d(&x, &conv)?, &bn)?;
        let folded = ops::conv2d(&x, &ops::fold_bn(&conv, &bn)?)?;
        t.add(&unfolded, &folded)?;
    }
    Ok(t.0)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn suites_are_deterministic_and_tight() {
        let a = conv2d_vs_oracle(20, 1).unwrap();
        assert_eq!(a, conv2d_vs_oracle(20, 1).unwrap());
        assert_eq!(a.instances, 20);
        assert!(a.within(1e-5));
        assert!(dwconv2d_vs_oracle(20, 2).unwrap().within(1e-5));
        assert!(fc_vs_oracle(10, 3).unwrap().within(1e-5));
        assert!(bn_fold(10, 4).unwrap().within(1e-5));
    }
}
