//! Declarative network description.
//!
//! A [`NetworkSpec`] is a flat, ordered list of [`LayerSpec`]s. Shortcuts are
//! expressed with `ResidualBegin`/`ResidualEnd` markers that bracket the body
//! of a residual bottleneck. Layers are grouped into [`Stage`]s, one per row
//! of the architecture table, so the stage-level shape trace can be compared
//! row-for-row with the reference layout.
//!
//! Per-sample shapes are `[C, H, W]` for feature maps and `[D]` after flatten.

use std::fmt;
use std::ops::Range;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::ops::{conv_out_dim, BN_EPSILON, PRELU_INIT_SLOPE};

pub const MOBIFACE: &str = "mobiface";
pub const MOBIFACE_FLIPPED: &str = "mobiface-flipped";
pub const MOBIFACE_INPUT: [usize; 3] = [3, 112, 112];
pub const EMBEDDING_DIM: usize = 512;
pub const EXPANSION: usize = 2;

#[derive(Clone, Debug, PartialEq)]
pub enum LayerKind {
    Conv { in_channels: usize, out_channels: usize, kernel: usize, stride: usize, padding: usize, bias: bool },
    DwConv { channels: usize, kernel: usize, stride: usize, padding: usize },
    BatchNorm { channels: usize, epsilon: f32 },
    PRelu { channels: usize },
    Relu,
    Fc { in_dim: usize, out_dim: usize },
    ResidualBegin,
    ResidualEnd,
    Flatten,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerSpec {
    pub name: String,
    pub kind: LayerKind,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamRole {
    Learnable,
    /// Running statistics; stored in weight files but not trained.
    Buffer,
}

/// How a freshly initialized tensor is filled.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    /// `N(0, 2 / fan_in)`
    HeNormal { fan_in: usize },
    Constant(f32),
}

#[derive(Clone, Debug, PartialEq)]
pub struct WeightBinding {
    pub name: String,
    pub shape: Vec<usize>,
    pub role: ParamRole,
    pub init: Init,
}

impl WeightBinding {
    fn new(name: String, shape: Vec<usize>, role: ParamRole, init: Init) -> Self {
        Self { name, shape, role, init }
    }

    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }
}

impl LayerSpec {
    pub fn new(name: impl Into<String>, kind: LayerKind) -> Self {
        Self { name: name.into(), kind }
    }

    pub fn weight_name(&self, suffix: &str) -> String {
        format!("{}.{}", self.name, suffix)
    }

    /// Tensors this layer reads from a weight store, in a fixed order.
    pub fn bindings(&self) -> Vec<WeightBinding> {
        use Init::*;
        use ParamRole::*;
        let n = |s: &str| self.weight_name(s);
        match self.kind {
            LayerKind::Conv { in_channels, out_channels, kernel, bias, .. } => {
                let fan_in = in_channels * kernel * kernel;
                let mut v = vec![WeightBinding::new(
                    n("weight"),
                    vec![out_channels, in_channels, kernel, kernel],
                    Learnable,
                    HeNormal { fan_in },
                )];
                if bias {
                    v.push(WeightBinding::new(n("bias"), vec![out_channels], Learnable, Constant(0.0)));
                }
                v
            }
            LayerKind::DwConv { channels, kernel, .. } => vec![WeightBinding::new(
                n("weight"),
                vec![channels, 1, kernel, kernel],
                Learnable,
                HeNormal { fan_in: kernel * kernel },
            )],
            LayerKind::BatchNorm { channels, .. } => vec![
                WeightBinding::new(n("gamma"), vec![channels], Learnable, Constant(1.0)),
                WeightBinding::new(n("beta"), vec![channels], Learnable, Constant(0.0)),
                WeightBinding::new(n("running_mean"), vec![channels], Buffer, Constant(0.0)),
                WeightBinding::new(n("running_var"), vec![channels], Buffer, Constant(1.0)),
            ],
            LayerKind::PRelu { channels } => {
                vec![WeightBinding::new(n("slope"), vec![channels], Learnable, Constant(PRELU_INIT_SLOPE))]
            }
            LayerKind::Fc { in_dim, out_dim } => vec![
                WeightBinding::new(n("weight"), vec![out_dim, in_dim], Learnable, HeNormal { fan_in: in_dim }),
                WeightBinding::new(n("bias"), vec![out_dim], Learnable, Constant(0.0)),
            ],
            LayerKind::Relu | LayerKind::ResidualBegin | LayerKind::ResidualEnd | LayerKind::Flatten => vec![],
        }
    }

    /// Per-sample output shape, ignoring residual bookkeeping.
    pub fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        let chw = |input: &[usize]| -> Result<(usize, usize, usize)> {
            match *input {
                [c, h, w] => Ok((c, h, w)),
                _ => Err(Error::Rank { expected: 3, shape: input.to_vec() }),
            }
        };
        match self.kind {
            LayerKind::Conv { in_channels, out_channels, kernel, stride, padding, .. } => {
                let (c, h, w) = chw(input)?;
                if c != in_channels {
                    return Err(Error::ChannelMismatch { expected: in_channels, actual: c });
                }
                Ok(vec![
                    out_channels,
                    conv_out_dim(h, kernel, stride, padding)?,
                    conv_out_dim(w, kernel, stride, padding)?,
                ])
            }
            LayerKind::DwConv { channels, kernel, stride, padding } => {
                let (c, h, w) = chw(input)?;
                if c != channels {
                    return Err(Error::ChannelMismatch { expected: channels, actual: c });
                }
                Ok(vec![c, conv_out_dim(h, kernel, stride, padding)?, conv_out_dim(w, kernel, stride, padding)?])
            }
            LayerKind::BatchNorm { channels, .. } | LayerKind::PRelu { channels } => {
                let (c, _, _) = chw(input)?;
                if c != channels {
                    return Err(Error::ChannelMismatch { expected: channels, actual: c });
                }
                Ok(input.to_vec())
            }
            LayerKind::Fc { in_dim, out_dim } => match *input {
                [d] if d == in_dim => Ok(vec![out_dim]),
                [d] => Err(Error::DimMismatch { expected: in_dim, actual: d }),
                _ => Err(Error::Rank { expected: 1, shape: input.to_vec() }),
            },
            LayerKind::Flatten => {
                let (c, h, w) = chw(input)?;
                Ok(vec![c * h * w])
            }
            LayerKind::Relu | LayerKind::ResidualBegin | LayerKind::ResidualEnd => Ok(input.to_vec()),
        }
    }

    pub fn stride(&self) -> usize {
        match self.kind {
            LayerKind::Conv { stride, .. } | LayerKind::DwConv { stride, .. } => stride,
            _ => 1,
        }
    }
}

/// Expansion bottleneck: 1x1 expand, 3x3 depthwise, 1x1 linear projection.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BlockSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    pub expansion: usize,
    pub stride: usize,
    pub residual: bool,
}

impl BlockSpec {
    /// Stride-2 bottleneck without shortcut.
    pub fn downsample(in_channels: usize, out_channels: usize, expansion: usize) -> Self {
        Self { in_channels, out_channels, expansion, stride: 2, residual: false }
    }

    /// Stride-1 bottleneck with identity shortcut.
    pub fn residual(channels: usize, expansion: usize) -> Self {
        Self { in_channels: channels, out_channels: channels, expansion, stride: 1, residual: true }
    }

    pub fn expanded_channels(&self) -> usize {
        self.in_channels * self.expansion
    }

    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0 || self.out_channels == 0 {
            return Err(Error::InvalidBlock("channel counts must be positive".into()));
        }
        if self.expansion < 1 {
            return Err(Error::InvalidBlock("expansion factor must be >= 1".into()));
        }
        if !matches!(self.stride, 1 | 2) {
            return Err(Error::InvalidBlock(format!("stride must be 1 or 2, got {}", self.stride)));
        }
        if self.residual && self.stride != 1 {
            return Err(Error::InvalidBlock("residual block requires stride 1".into()));
        }
        if self.residual && self.in_channels != self.out_channels {
            return Err(Error::InvalidBlock(format!(
                "residual block requires in == out channels, got {} -> {}",
                self.in_channels, self.out_channels
            )));
        }
        Ok(())
    }
}

fn conv_bn(out: &mut Vec<LayerSpec>, prefix: &str, cin: usize, cout: usize, kernel: usize, stride: usize) {
    out.push(LayerSpec::new(
        format!("{prefix}.conv"),
        LayerKind::Conv { in_channels: cin, out_channels: cout, kernel, stride, padding: kernel / 2, bias: false },
    ));
    out.push(LayerSpec::new(format!("{prefix}.bn"), LayerKind::BatchNorm { channels: cout, epsilon: BN_EPSILON }));
}

fn prelu(out: &mut Vec<LayerSpec>, prefix: &str, channels: usize) {
    out.push(LayerSpec::new(format!("{prefix}.prelu"), LayerKind::PRelu { channels }));
}

/// Expands a [`BlockSpec`] into layers named under `prefix`.
///
/// Expand and depthwise stages are followed by BN and PReLU; the projection
/// gets BN only. Residual blocks are bracketed by shortcut markers.
pub fn build_bottleneck(prefix: &str, spec: &BlockSpec) -> Result<Vec<LayerSpec>> {
    spec.validate()?;
    let hidden = spec.expanded_channels();
    let mut layers = Vec::with_capacity(10);
    if spec.residual {
        layers.push(LayerSpec::new(format!("{prefix}.shortcut_in"), LayerKind::ResidualBegin));
    }
    conv_bn(&mut layers, &format!("{prefix}.expand"), spec.in_channels, hidden, 1, 1);
    prelu(&mut layers, &format!("{prefix}.expand"), hidden);

    let dw = format!("{prefix}.dw");
    layers.push(LayerSpec::new(
        format!("{dw}.conv"),
        LayerKind::DwConv { channels: hidden, kernel: 3, stride: spec.stride, padding: 1 },
    ));
    layers.push(LayerSpec::new(format!("{dw}.bn"), LayerKind::BatchNorm { channels: hidden, epsilon: BN_EPSILON }));
    prelu(&mut layers, &dw, hidden);

    conv_bn(&mut layers, &format!("{prefix}.project"), hidden, spec.out_channels, 1, 1);
    if spec.residual {
        layers.push(LayerSpec::new(format!("{prefix}.shortcut_out"), LayerKind::ResidualEnd));
    }
    Ok(layers)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum StageKind {
    Conv,
    DwConv,
    Bottleneck,
    ResidualBottleneck,
    Pointwise,
    Fc,
}

/// One row of the architecture table: a contiguous run of layers.
#[derive(Clone, Debug, PartialEq)]
pub struct Stage {
    pub label: String,
    pub kind: StageKind,
    pub layers: Range<usize>,
    /// Number of bottleneck blocks (0 for plain layers).
    pub blocks: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct NetworkSpec {
    pub name: String,
    /// `[C, H, W]`
    pub input_shape: Vec<usize>,
    pub layers: Vec<LayerSpec>,
    pub stages: Vec<Stage>,
    pub embedding_dim: usize,
}

/// Incremental network construction with running shape tracking.
pub struct NetworkBuilder {
    name: String,
    input_shape: Vec<usize>,
    layers: Vec<LayerSpec>,
    stages: Vec<Stage>,
    shape: Vec<usize>,
    block_counter: usize,
}

impl NetworkBuilder {
    pub fn new(name: impl Into<String>, input_shape: [usize; 3]) -> Self {
        Self {
            name: name.into(),
            input_shape: input_shape.to_vec(),
            layers: Vec::new(),
            stages: Vec::new(),
            shape: input_shape.to_vec(),
            block_counter: 0,
        }
    }

    pub fn channels(&self) -> usize {
        self.shape[0]
    }

    fn push_stage(&mut self, label: String, kind: StageKind, layers: Vec<LayerSpec>, blocks: usize) -> Result<()> {
        let start = self.layers.len();
        let mut stack = Vec::new();
        for l in &layers {
            match l.kind {
                LayerKind::ResidualBegin => stack.push(self.shape.clone()),
                LayerKind::ResidualEnd => {
                    let saved = stack.pop().ok_or_else(|| Error::InvalidBlock("unbalanced shortcut".into()))?;
                    if saved != self.shape {
                        return Err(Error::ShapeMismatch(saved, self.shape.clone()).in_layer(&l.name));
                    }
                }
                _ => {}
            }
            self.shape = l.output_shape(&self.shape).map_err(|e| e.in_layer(&l.name))?;
        }
        self.layers.extend(layers);
        self.stages.push(Stage { label, kind, layers: start..self.layers.len(), blocks });
        Ok(())
    }

    /// kxk convolution (pad k/2, no bias) + BN + PReLU.
    pub fn conv_bn_prelu(mut self, name: &str, out_channels: usize, kernel: usize, stride: usize) -> Result<Self> {
        let mut layers = Vec::new();
        conv_bn(&mut layers, name, self.channels(), out_channels, kernel, stride);
        prelu(&mut layers, name, out_channels);
        let label = format!("{kernel}x{kernel} Conv{}, {out_channels}", if stride == 2 { ", /2" } else { "" });
        let kind = if kernel == 1 { StageKind::Pointwise } else { StageKind::Conv };
        self.push_stage(label, kind, layers, 0)?;
        Ok(self)
    }

    /// kxk depthwise convolution + BN + PReLU.
    pub fn dwconv_bn_prelu(mut self, name: &str, kernel: usize, stride: usize) -> Result<Self> {
        let c = self.channels();
        let layers = vec![
            LayerSpec::new(format!("{name}.conv"), LayerKind::DwConv { channels: c, kernel, stride, padding: kernel / 2 }),
            LayerSpec::new(format!("{name}.bn"), LayerKind::BatchNorm { channels: c, epsilon: BN_EPSILON }),
            LayerSpec::new(format!("{name}.prelu"), LayerKind::PRelu { channels: c }),
        ];
        let label = format!("{kernel}x{kernel} DWconv{}, {c}", if stride == 2 { ", /2" } else { "" });
        self.push_stage(label, StageKind::DwConv, layers, 0)?;
        Ok(self)
    }

    /// `count` identical bottleneck blocks as one stage.
    pub fn blocks(mut self, spec: BlockSpec, count: usize) -> Result<Self> {
        if spec.in_channels != self.channels() {
            return Err(Error::ChannelMismatch { expected: spec.in_channels, actual: self.channels() });
        }
        let mut layers = Vec::new();
        for _ in 0..count {
            self.block_counter += 1;
            layers.extend(build_bottleneck(&format!("block{:02}", self.block_counter), &spec)?);
        }
        let (kind, tag) = if spec.residual {
            (StageKind::ResidualBottleneck, "RBlock")
        } else {
            (StageKind::Bottleneck, "Block")
        };
        let label = format!(
            "{tag} {count}x {{1x1 Conv, {h}; 3x3 DWconv{s}, {h}; 1x1 Conv, Linear, {o}}}",
            h = spec.expanded_channels(),
            s = if spec.stride == 2 { ", /2" } else { "" },
            o = spec.out_channels,
        );
        self.push_stage(label, kind, layers, count)?;
        Ok(self)
    }

    /// Flatten followed by a biased fully-connected layer.
    pub fn flatten_fc(mut self, name: &str, out_dim: usize) -> Result<Self> {
        let in_dim: usize = self.shape.iter().product();
        let layers = vec![
            LayerSpec::new(format!("{name}.flatten"), LayerKind::Flatten),
            LayerSpec::new(name, LayerKind::Fc { in_dim, out_dim }),
        ];
        self.push_stage(format!("{out_dim}-d FC"), StageKind::Fc, layers, 0)?;
        Ok(self)
    }

    pub fn build(self) -> Result<NetworkSpec> {
        let embedding_dim = match *self.shape.as_slice() {
            [d] => d,
            _ => self.shape.iter().product(),
        };
        let net = NetworkSpec {
            name: self.name,
            input_shape: self.input_shape,
            layers: self.layers,
            stages: self.stages,
            embedding_dim,
        };
        net.validate()?;
        Ok(net)
    }
}

/// The 112x112 face-embedding network: fast downsampling to 7x7 within the
/// first three bottlenecks, expansion factor 2 everywhere, FC embedding head.
pub fn build_mobiface() -> NetworkSpec {
    let t = EXPANSION;
    NetworkBuilder::new(MOBIFACE, MOBIFACE_INPUT)
        .conv_bn_prelu("stem", 64, 3, 2)
        .and_then(|b| b.dwconv_bn_prelu("stem_dw", 3, 1))
        .and_then(|b| b.blocks(BlockSpec::downsample(64, 64, t), 1))
        .and_then(|b| b.blocks(BlockSpec::residual(64, t), 2))
        .and_then(|b| b.blocks(BlockSpec::downsample(64, 128, t), 1))
        .and_then(|b| b.blocks(BlockSpec::residual(128, t), 3))
        .and_then(|b| b.blocks(BlockSpec::downsample(128, 256, t), 1))
        .and_then(|b| b.blocks(BlockSpec::residual(256, t), 6))
        .and_then(|b| b.conv_bn_prelu("embed_conv", 512, 1, 1))
        .and_then(|b| b.flatten_fc("fc", EMBEDDING_DIM))
        .and_then(NetworkBuilder::build)
        .expect("stock architecture is well-formed")
}

impl NetworkSpec {
    pub fn validate(&self) -> Result<()> {
        let mut seen = std::collections::HashSet::new();
        for l in &self.layers {
            if !seen.insert(l.name.as_str()) {
                return Err(Error::DuplicateName(l.name.clone()));
            }
        }
        let mut names = std::collections::HashSet::new();
        for b in self.weight_bindings() {
            if !names.insert(b.name.clone()) {
                return Err(Error::DuplicateName(b.name));
            }
        }
        let trace = shape_trace(self)?;
        let out = trace.last().map_or(&self.input_shape, |(_, s)| s);
        let numel: usize = out.iter().product();
        if numel != self.embedding_dim {
            return Err(Error::DimMismatch { expected: self.embedding_dim, actual: numel });
        }
        Ok(())
    }

    pub fn weight_bindings(&self) -> Vec<WeightBinding> {
        self.layers.iter().flat_map(LayerSpec::bindings).collect()
    }

    /// Bottleneck block specs in network order, recovered from the layers.
    pub fn block_specs(&self) -> Vec<BlockSpec> {
        let mut out = Vec::new();
        let mut i = 0;
        while i < self.layers.len() {
            let residual = matches!(self.layers[i].kind, LayerKind::ResidualBegin);
            let start = if residual { i + 1 } else { i };
            if let (Some(expand), Some(dw), Some(project)) =
                (self.layers.get(start), self.layers.get(start + 3), self.layers.get(start + 6))
            {
                let is_block = expand.name.ends_with(".expand.conv") && dw.name.ends_with(".dw.conv");
                if let (
                    true,
                    LayerKind::Conv { in_channels, out_channels: hidden, .. },
                    LayerKind::DwConv { stride, .. },
                    LayerKind::Conv { out_channels, .. },
                ) = (is_block, &expand.kind, &dw.kind, &project.kind)
                {
                    out.push(BlockSpec {
                        in_channels: *in_channels,
                        out_channels: *out_channels,
                        expansion: hidden / in_channels,
                        stride: *stride,
                        residual,
                    });
                    i = start + 8 + usize::from(residual);
                    continue;
                }
            }
            i += 1;
        }
        out
    }
}

/// Two fully-connected layers predicting the mirrored image's embedding from
/// the original one: FC, ReLU, FC (linear output).
#[derive(Clone, Debug, PartialEq)]
pub struct FlipHeadSpec {
    pub dim: usize,
    pub hidden: usize,
}

impl FlipHeadSpec {
    pub fn new(dim: usize) -> Self {
        Self { dim, hidden: dim }
    }

    pub fn layers(&self) -> Vec<LayerSpec> {
        vec![
            LayerSpec::new("flip.fc1", LayerKind::Fc { in_dim: self.dim, out_dim: self.hidden }),
            LayerSpec::new("flip.relu", LayerKind::Relu),
            LayerSpec::new("flip.fc2", LayerKind::Fc { in_dim: self.hidden, out_dim: self.dim }),
        ]
    }

    pub fn weight_bindings(&self) -> Vec<WeightBinding> {
        self.layers().iter().flat_map(LayerSpec::bindings).collect()
    }

    pub fn check_embedding(&self, net: &NetworkSpec) -> Result<()> {
        if self.dim != net.embedding_dim {
            return Err(Error::DimMismatch { expected: net.embedding_dim, actual: self.dim });
        }
        Ok(())
    }
}

/// A backbone plus the optional flip head, addressable by name.
#[derive(Clone, Debug, PartialEq)]
pub struct Architecture {
    pub net: NetworkSpec,
    pub flip_head: Option<FlipHeadSpec>,
}

impl Architecture {
    pub const NAMES: [&'static str; 2] = [MOBIFACE, MOBIFACE_FLIPPED];

    pub fn by_name(name: &str) -> Result<Self> {
        match name {
            MOBIFACE => Ok(Self { net: build_mobiface(), flip_head: None }),
            MOBIFACE_FLIPPED => Ok(Self { net: build_mobiface(), flip_head: Some(FlipHeadSpec::new(EMBEDDING_DIM)) }),
            other => Err(Error::UnknownArch(other.to_string())),
        }
    }

    pub fn name(&self) -> &str {
        if self.flip_head.is_some() {
            MOBIFACE_FLIPPED
        } else {
            &self.net.name
        }
    }

    pub fn weight_bindings(&self) -> Vec<WeightBinding> {
        let mut v = self.net.weight_bindings();
        if let Some(head) = &self.flip_head {
            v.extend(head.weight_bindings());
        }
        v
    }
}

impl From<NetworkSpec> for Architecture {
    fn from(net: NetworkSpec) -> Self {
        Self { net, flip_head: None }
    }
}

/// Per-layer output shapes, propagated symbolically from `net.input_shape`.
/// Fails on the first inconsistent layer, naming it.
pub fn shape_trace(net: &NetworkSpec) -> Result<Vec<(String, Vec<usize>)>> {
    let mut shape = net.input_shape.clone();
    if shape.len() != 3 || shape.contains(&0) {
        return Err(Error::InvalidShape(shape).in_layer("input"));
    }
    let mut stack: Vec<Vec<usize>> = Vec::new();
    let mut out = Vec::with_capacity(net.layers.len());
    for l in &net.layers {
        match l.kind {
            LayerKind::ResidualBegin => stack.push(shape.clone()),
            LayerKind::ResidualEnd => {
                let saved = stack
                    .pop()
                    .ok_or_else(|| Error::InvalidBlock("shortcut end without begin".into()).in_layer(&l.name))?;
                if saved != shape {
                    return Err(Error::ShapeMismatch(saved, shape).in_layer(&l.name));
                }
            }
            _ => {}
        }
        shape = l.output_shape(&shape).map_err(|e| e.in_layer(&l.name))?;
        out.push((l.name.clone(), shape.clone()));
    }
    if !stack.is_empty() {
        return Err(Error::InvalidBlock("unterminated shortcut".into()).in_layer(&net.name));
    }
    Ok(out)
}

/// One checkpoint of the stage-level trace.
#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct StageShape {
    /// Stage label, or `"output"` for the final embedding.
    pub label: String,
    /// Per-sample `[C, H, W]` or `[D]`.
    pub shape: Vec<usize>,
}

impl StageShape {
    /// `H×W×C` for feature maps, `D` for vectors.
    pub fn hwc(&self) -> String {
        match *self.shape.as_slice() {
            [c, h, w] => format!("{h}×{w}×{c}"),
            _ => self.shape.iter().map(usize::to_string).collect::<Vec<_>>().join("×"),
        }
    }
}

impl fmt::Display for StageShape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:<14} {}", self.hwc(), self.label)
    }
}

/// Input shape of every stage followed by the network output.
pub fn stage_trace(net: &NetworkSpec) -> Result<Vec<StageShape>> {
    let trace = shape_trace(net)?;
    let mut out = Vec::with_capacity(net.stages.len() + 1);
    for st in &net.stages {
        let shape = if st.layers.start == 0 { net.input_shape.clone() } else { trace[st.layers.start - 1].1.clone() };
        out.push(StageShape { label: st.label.clone(), shape });
    }
    let last = trace.last().map_or_else(|| net.input_shape.clone(), |(_, s)| s.clone());
    out.push(StageShape { label: "output".into(), shape: last });
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bottleneck_channel_sequence() {
        let layers = build_bottleneck("b", &BlockSpec::downsample(64, 64, 2)).unwrap();
        let mut shape = vec![64, 56, 56];
        let mut channels = vec![64];
        for l in &layers {
            shape = l.output_shape(&shape).unwrap();
            if matches!(l.kind, LayerKind::Conv { .. } | LayerKind::DwConv { .. }) {
                channels.push(shape[0]);
            }
        }
        assert_eq!(channels, vec![64, 128, 128, 64]);
        assert_eq!(shape, vec![64, 28, 28]);
        // projection is linear: BN follows, nothing after it
        assert!(matches!(layers.last().unwrap().kind, LayerKind::BatchNorm { .. }));
        assert_eq!(layers.iter().filter(|l| matches!(l.kind, LayerKind::PRelu { .. })).count(), 2);
    }

    #[test]
    fn residual_bottleneck_preserves_shape() {
        let layers = build_bottleneck("r", &BlockSpec::residual(128, 2)).unwrap();
        assert!(matches!(layers.first().unwrap().kind, LayerKind::ResidualBegin));
        assert!(matches!(layers.last().unwrap().kind, LayerKind::ResidualEnd));
        let shape = layers.iter().try_fold(vec![128, 14, 14], |s, l| l.output_shape(&s)).unwrap();
        assert_eq!(shape, vec![128, 14, 14]);
    }

    #[test]
    fn invalid_blocks_rejected() {
        let bad_stride = BlockSpec { in_channels: 64, out_channels: 64, expansion: 2, stride: 2, residual: true };
        assert!(build_bottleneck("x", &bad_stride).is_err());
        let bad_channels = BlockSpec { in_channels: 64, out_channels: 128, expansion: 2, stride: 1, residual: true };
        assert!(build_bottleneck("x", &bad_channels).is_err());
        let bad_t = BlockSpec { expansion: 0, ..BlockSpec::residual(8, 1) };
        assert!(build_bottleneck("x", &bad_t).is_err());
    }

    #[test]
    fn mobiface_stage_trace_matches_table() {
        let net = build_mobiface();
        let got: Vec<Vec<usize>> = stage_trace(&net).unwrap().into_iter().map(|s| s.shape).collect();
        let want: Vec<Vec<usize>> = vec![
            vec![3, 112, 112],
            vec![64, 56, 56],
            vec![64, 56, 56],
            vec![64, 28, 28],
            vec![64, 28, 28],
            vec![128, 14, 14],
            vec![128, 14, 14],
            vec![256, 7, 7],
            vec![256, 7, 7],
            vec![512, 7, 7],
            vec![512],
        ];
        assert_eq!(got, want);
        assert_eq!(net.embedding_dim, 512);
    }

    #[test]
    fn mobiface_block_census() {
        let blocks = build_mobiface().block_specs();
        assert_eq!(blocks.len(), 14);
        assert_eq!(blocks.iter().filter(|b| b.stride == 2 && !b.residual).count(), 3);
        assert_eq!(blocks.iter().filter(|b| b.residual).count(), 11);
        assert!(blocks.iter().all(|b| b.expansion == 2 && b.expanded_channels() == 2 * b.in_channels));
    }

    #[test]
    fn residual_blocks_are_shape_preserving() {
        let net = build_mobiface();
        let trace = shape_trace(&net).unwrap();
        let mut open = None;
        for (i, l) in net.layers.iter().enumerate() {
            match l.kind {
                LayerKind::ResidualBegin => open = Some(trace[i - 1].1.clone()),
                LayerKind::ResidualEnd => assert_eq!(open.take().unwrap(), trace[i].1),
                _ => {}
            }
        }
    }

    #[test]
    fn single_conv_trace() {
        let net = NetworkBuilder::new("tiny", [3, 8, 8])
            .conv_bn_prelu("c", 4, 3, 2)
            .unwrap()
            .build()
            .unwrap();
        let trace = shape_trace(&net).unwrap();
        assert_eq!(trace[0], ("c.conv".to_string(), vec![4, 4, 4]));
    }

    #[test]
    fn inconsistent_fc_names_layer() {
        let mut net = build_mobiface();
        let fc = net.layers.iter_mut().find(|l| l.name == "fc").unwrap();
        fc.kind = LayerKind::Fc { in_dim: 1000, out_dim: 512 };
        let err = shape_trace(&net).unwrap_err();
        assert!(matches!(&err, Error::Layer { layer, .. } if layer == "fc"), "{err}");
    }

    #[test]
    fn weight_names_unique() {
        let arch = Architecture::by_name(MOBIFACE_FLIPPED).unwrap();
        let b = arch.weight_bindings();
        let set: std::collections::HashSet<_> = b.iter().map(|x| &x.name).collect();
        assert_eq!(set.len(), b.len());
        assert!(Architecture::by_name("resnet").is_err());
    }

    #[test]
    fn flip_head_dims() {
        let head = FlipHeadSpec::new(512);
        assert!(head.check_embedding(&build_mobiface()).is_ok());
        assert!(FlipHeadSpec::new(256).check_embedding(&build_mobiface()).is_err());
        let kinds: Vec<_> = head.layers().into_iter().map(|l| l.kind).collect();
        assert!(matches!(kinds[1], LayerKind::Relu));
        assert!(matches!(kinds[2], LayerKind::Fc { in_dim: 512, out_dim: 512 }));
    }
}
