//! Forward execution of a [`NetworkSpec`] against a [`WeightStore`].

use std::sync::atomic::{AtomicUsize, Ordering};

use crate::error::{Error, Result};
use crate::graph::{FlipHeadSpec, LayerKind, NetworkSpec};
use crate::ops::{self, BatchNormParams, ConvParams, DwConvParams, FcParams, PReLUParams};
use crate::tensor::{hflip, Tensor};
use crate::weights::WeightStore;

#[derive(Clone, Debug)]
enum Op {
    Conv(ConvParams),
    DwConv(DwConvParams),
    BatchNorm(BatchNormParams),
    PRelu(PReLUParams),
    Relu,
    Fc(FcParams),
    ResidualBegin,
    ResidualEnd,
    Flatten,
}

#[derive(Clone, Debug)]
struct Step {
    name: String,
    op: Op,
}

fn prepare(layers: &[crate::graph::LayerSpec], weights: &WeightStore) -> Result<Vec<Step>> {
    layers
        .iter()
        .map(|l| {
            let op = match l.kind {
                LayerKind::Conv { stride, padding, bias, .. } => Op::Conv(weights.conv(&l.name, stride, padding, bias)?),
                LayerKind::DwConv { stride, padding, .. } => Op::DwConv(weights.dwconv(&l.name, stride, padding)?),
                LayerKind::BatchNorm { epsilon, .. } => Op::BatchNorm(weights.batchnorm(&l.name, epsilon)?),
                LayerKind::PRelu { .. } => Op::PRelu(weights.prelu(&l.name)?),
                LayerKind::Relu => Op::Relu,
                LayerKind::Fc { .. } => Op::Fc(weights.fc(&l.name)?),
                LayerKind::ResidualBegin => Op::ResidualBegin,
                LayerKind::ResidualEnd => Op::ResidualEnd,
                LayerKind::Flatten => Op::Flatten,
            };
            for b in l.bindings() {
                let t = weights.get(&b.name)?;
                if t.shape() != b.shape.as_slice() {
                    return Err(Error::WeightShape { name: b.name, expected: b.shape, actual: t.shape().to_vec() }
                        .in_layer(&l.name));
                }
            }
            Ok(Step { name: l.name.clone(), op })
        })
        .collect()
}

fn run(steps: &[Step], mut x: Tensor) -> Result<Tensor> {
    let mut shortcuts: Vec<Tensor> = Vec::new();
    for s in steps {
        let res = match &s.op {
            Op::Conv(p) => ops::conv2d(&x, p),
            Op::DwConv(p) => ops::dwconv2d(&x, p),
            Op::BatchNorm(p) => ops::batchnorm(&x, p),
            Op::PRelu(p) => ops::prelu(&x, p),
            Op::Relu => Ok(ops::relu(&x)),
            Op::Fc(p) => ops::fully_connected_batch(&x, p),
            Op::ResidualBegin => {
                shortcuts.push(x.clone());
                Ok(x)
            }
            Op::ResidualEnd => match shortcuts.pop() {
                Some(saved) => ops::residual_add(&x, &saved),
                None => Err(Error::InvalidBlock("shortcut end without begin".into())),
            },
            Op::Flatten => ops::flatten(&x),
        };
        x = res.map_err(|e| e.in_layer(&s.name))?;
    }
    Ok(x)
}

/// A network bound to its weights, with an optional flip head.
///
/// Counts backbone passes so callers can verify how many times the feature
/// extractor actually ran.
#[derive(Debug)]
pub struct Model {
    net: NetworkSpec,
    steps: Vec<Step>,
    head: Option<Vec<Step>>,
    passes: AtomicUsize,
}

impl Model {
    pub fn new(net: &NetworkSpec, weights: &WeightStore) -> Result<Self> {
        Ok(Self { net: net.clone(), steps: prepare(&net.layers, weights)?, head: None, passes: AtomicUsize::new(0) })
    }

    pub fn with_flip_head(net: &NetworkSpec, head: &FlipHeadSpec, weights: &WeightStore) -> Result<Self> {
        head.check_embedding(net)?;
        let mut m = Self::new(net, weights)?;
        m.head = Some(prepare(&head.layers(), weights)?);
        Ok(m)
    }

    pub fn net(&self) -> &NetworkSpec {
        &self.net
    }

    pub fn has_flip_head(&self) -> bool {
        self.head.is_some()
    }

    /// Number of backbone forward passes run so far.
    pub fn forward_passes(&self) -> usize {
        self.passes.load(Ordering::Relaxed)
    }

    /// `[N, C, H, W]` images to `[N, embedding_dim]` embeddings.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (_, c, h, w) = x.dims4().map_err(|e| e.in_layer("input"))?;
        if [c, h, w] != self.net.input_shape[..] {
            return Err(Error::ShapeMismatch(self.net.input_shape.clone(), vec![c, h, w]).in_layer("input"));
        }
        self.passes.fetch_add(1, Ordering::Relaxed);
        let out = run(&self.steps, x.clone())?;
        out.validate_finite("embedding")?;
        Ok(out)
    }

    /// Applies the flip head to `[N, D]` embeddings.
    pub fn predict_flipped(&self, features: &Tensor) -> Result<Tensor> {
        let head = self.head.as_ref().ok_or_else(|| Error::InvalidParam("model has no flip head".into()))?;
        features.expect_rank(2)?;
        if features.shape()[1] != self.net.embedding_dim {
            return Err(Error::DimMismatch { expected: self.net.embedding_dim, actual: features.shape()[1] });
        }
        run(head, features.clone())
    }

    /// `0.5 * (f + head(f))` with `f = forward(x)`; the backbone runs once.
    pub fn embed_with_flip(&self, x: &Tensor) -> Result<Tensor> {
        let f = self.forward(x)?;
        let predicted = self.predict_flipped(&f)?;
        let data = f.data().iter().zip(predicted.data()).map(|(a, b)| 0.5 * (a + b)).collect();
        Tensor::new(f.shape(), data)
    }

    /// Embeddings of `x` and of its mirror image, from two backbone passes.
    pub fn true_flip_features(&self, x: &Tensor) -> Result<(Tensor, Tensor)> {
        let f = self.forward(x)?;
        let f_mirror = self.forward(&hflip(x)?)?;
        Ok((f, f_mirror))
    }
}

pub fn forward(net: &NetworkSpec, weights: &WeightStore, x: &Tensor) -> Result<Tensor> {
    Model::new(net, weights)?.forward(x)
}

pub fn embed_with_flip(net: &NetworkSpec, head: &FlipHeadSpec, weights: &WeightStore, x: &Tensor) -> Result<Tensor> {
    Model::with_flip_head(net, head, weights)?.embed_with_flip(x)
}

pub fn true_flip_features(net: &NetworkSpec, weights: &WeightStore, x: &Tensor) -> Result<(Tensor, Tensor)> {
    Model::new(net, weights)?.true_flip_features(x)
}
