//! Static cost model: per-layer parameters, multiply-accumulates and
//! activation memory, plus a check of the fast-downsampling schedule.
//!
//! Conventions (1 MAC = 2 FLOPs):
//! - conv: `H'·W'·k²·Cin·Cout` MACs, `k²·Cin·Cout (+Cout)` params
//! - depthwise conv: `H'·W'·k²·C` MACs, `k²·C` params
//! - FC: `in·out` MACs, `in·out + out` params
//! - BN and PReLU: one MAC per output element; BN has `2·C` learnable
//!   params plus `2·C` running-stat buffers, PReLU has `C`
//! - ReLU, flatten and shortcut bookkeeping: free
//!
//! Activation bytes are `4 · numel(output)` per sample.

use std::fmt::Write as _;

use serde::Serialize;

use crate::error::Result;
use crate::graph::{shape_trace, Architecture, LayerKind, LayerSpec, NetworkSpec, ParamRole, StageKind};

pub const BYTES_PER_FLOAT: usize = 4;

/// Published fp32 model sizes, in megabytes, for the stock architectures.
pub fn reported_size_mb(arch: &str) -> Option<f64> {
    match arch {
        crate::graph::MOBIFACE => Some(9.3),
        crate::graph::MOBIFACE_FLIPPED => Some(11.3),
        _ => None,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LayerCost {
    pub layer: String,
    pub shape: Vec<usize>,
    /// Learnable parameters.
    pub params: usize,
    /// Non-learnable stored floats (BN running statistics).
    pub buffers: usize,
    pub macs: usize,
    pub act_bytes: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize)]
pub struct Totals {
    pub params: usize,
    pub buffers: usize,
    pub macs: usize,
    pub act_bytes: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct DownsamplingEvent {
    pub layer: String,
    pub in_spatial: (usize, usize),
    pub out_spatial: (usize, usize),
}

/// Expectations for a fast-downsampling schedule.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub struct FastDownsamplingRule {
    pub expected_reductions: usize,
    /// Spatial side length the network must reach and then keep.
    pub target_spatial: usize,
    /// Blocks in the final residual stage, all run at `target_spatial`.
    pub final_stage_blocks: usize,
}

pub const MOBIFACE_RULE: FastDownsamplingRule =
    FastDownsamplingRule { expected_reductions: 4, target_spatial: 7, final_stage_blocks: 6 };

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct DownsamplingReport {
    pub events: Vec<DownsamplingEvent>,
    pub rule: FastDownsamplingRule,
    /// Exactly `expected_reductions` consecutive halvings ending at the target.
    pub reductions_ok: bool,
    /// No reduction once the target spatial size is reached.
    pub none_after_target: bool,
    /// The final residual stage has the expected block count and runs at the target size.
    pub final_stage_at_target: bool,
}

impl DownsamplingReport {
    pub fn passed(&self) -> bool {
        self.reductions_ok && self.none_after_target && self.final_stage_at_target
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SizeNote {
    pub computed_bytes: usize,
    pub computed_mb: f64,
    pub reported_mb: f64,
    pub largest_layer: String,
    pub largest_layer_params: usize,
    pub message: String,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ArchReport {
    pub arch: String,
    pub rows: Vec<LayerCost>,
    pub totals: Totals,
    pub peak_act_bytes: usize,
    pub peak_layer: String,
    pub downsampling: DownsamplingReport,
    pub size_note: Option<SizeNote>,
}

fn layer_cost(l: &LayerSpec, out: &[usize]) -> (usize, usize, usize) {
    let numel: usize = out.iter().product();
    let spatial = |s: &[usize]| if s.len() == 3 { s[1] * s[2] } else { 1 };
    let (mut params, mut buffers) = (0, 0);
    for b in l.bindings() {
        match b.role {
            ParamRole::Learnable => params += b.numel(),
            ParamRole::Buffer => buffers += b.numel(),
        }
    }
    let macs = match l.kind {
        LayerKind::Conv { in_channels, out_channels, kernel, .. } => {
            spatial(out) * kernel * kernel * in_channels * out_channels
        }
        LayerKind::DwConv { channels, kernel, .. } => spatial(out) * kernel * kernel * channels,
        LayerKind::Fc { in_dim, out_dim } => in_dim * out_dim,
        LayerKind::BatchNorm { .. } | LayerKind::PRelu { .. } => numel,
        LayerKind::Relu | LayerKind::Flatten | LayerKind::ResidualBegin | LayerKind::ResidualEnd => 0,
    };
    (params, buffers, macs)
}

fn cost_rows(layers: &[LayerSpec], trace: &[(String, Vec<usize>)]) -> Vec<LayerCost> {
    layers
        .iter()
        .zip(trace)
        .map(|(l, (_, out))| {
            let (params, buffers, macs) = layer_cost(l, out);
            LayerCost {
                layer: l.name.clone(),
                shape: out.clone(),
                params,
                buffers,
                macs,
                act_bytes: out.iter().product::<usize>() * BYTES_PER_FLOAT,
            }
        })
        .collect()
}

/// Per-layer rows for the backbone and, when present, the flip head.
fn arch_rows(arch: &Architecture) -> Result<Vec<LayerCost>> {
    let trace = shape_trace(&arch.net)?;
    let mut rows = cost_rows(&arch.net.layers, &trace);
    if let Some(head) = &arch.flip_head {
        head.check_embedding(&arch.net)?;
        let layers = head.layers();
        let mut shape = vec![head.dim];
        let mut htrace = Vec::new();
        for l in &layers {
            shape = l.output_shape(&shape).map_err(|e| e.in_layer(&l.name))?;
            htrace.push((l.name.clone(), shape.clone()));
        }
        rows.extend(cost_rows(&layers, &htrace));
    }
    Ok(rows)
}

fn totals(rows: &[LayerCost]) -> Totals {
    rows.iter().fold(Totals::default(), |t, r| Totals {
        params: t.params + r.params,
        buffers: t.buffers + r.buffers,
        macs: t.macs + r.macs,
        act_bytes: t.act_bytes + r.act_bytes,
    })
}

/// `(layer, learnable, buffers)`.
pub type ParamRow = (String, usize, usize);

/// Per-layer `(name, learnable, buffers)` and the totals of both.
pub fn count_params(net: &NetworkSpec) -> Result<(Vec<ParamRow>, usize, usize)> {
    let rows = arch_rows(&Architecture::from(net.clone()))?;
    let t = totals(&rows);
    Ok((rows.into_iter().map(|r| (r.layer, r.params, r.buffers)).collect(), t.params, t.buffers))
}

pub fn count_macs(net: &NetworkSpec) -> Result<(Vec<(String, usize)>, usize)> {
    let rows = arch_rows(&Architecture::from(net.clone()))?;
    let total = rows.iter().map(|r| r.macs).sum();
    Ok((rows.into_iter().map(|r| (r.layer, r.macs)).collect(), total))
}

/// `(peak bytes, peak layer, per-layer (name, output bytes))`.
pub type ActivationMemory = (usize, String, Vec<(String, usize)>);

/// Peak of `input + output` bytes over consecutive layers, with the layer
/// where it occurs, and the per-layer output bytes.
pub fn activation_memory(net: &NetworkSpec) -> Result<ActivationMemory> {
    let rows = arch_rows(&Architecture::from(net.clone()))?;
    let (peak, layer) = peak_activation(net, &rows);
    Ok((peak, layer, rows.into_iter().map(|r| (r.layer, r.act_bytes)).collect()))
}

fn peak_activation(net: &NetworkSpec, rows: &[LayerCost]) -> (usize, String) {
    let mut prev = net.input_shape.iter().product::<usize>() * BYTES_PER_FLOAT;
    let mut best = (0, String::new());
    for r in rows {
        let pair = prev + r.act_bytes;
        if pair > best.0 {
            best = (pair, r.layer.clone());
        }
        prev = r.act_bytes;
    }
    best
}

pub fn downsampling_report(net: &NetworkSpec, rule: FastDownsamplingRule) -> Result<DownsamplingReport> {
    let trace = shape_trace(net)?;
    let spatial = |s: &[usize]| if s.len() == 3 { Some((s[1], s[2])) } else { None };
    let mut events = Vec::new();
    let mut prev = net.input_shape.clone();
    let mut layer_in = Vec::with_capacity(trace.len());
    for (name, out) in &trace {
        layer_in.push(prev.clone());
        if let (Some(a), Some(b)) = (spatial(&prev), spatial(out)) {
            if b.0 < a.0 || b.1 < a.1 {
                events.push(DownsamplingEvent { layer: name.clone(), in_spatial: a, out_spatial: b });
            }
        }
        prev = out.clone();
    }

    let t = rule.target_spatial;
    let chained = events.windows(2).all(|w| w[0].out_spatial == w[1].in_spatial);
    let halvings = events.iter().all(|e| e.out_spatial.0 == e.in_spatial.0.div_ceil(2));
    let reaches = events.last().is_some_and(|e| e.out_spatial == (t, t));
    let reductions_ok = events.len() == rule.expected_reductions && chained && halvings && reaches;
    let none_after_target = events.iter().all(|e| e.in_spatial.0 > t && e.in_spatial.1 > t);

    let final_stage_at_target = net
        .stages
        .iter()
        .rev()
        .find(|s| s.kind == StageKind::ResidualBottleneck)
        .is_some_and(|s| {
            s.blocks == rule.final_stage_blocks
                && s.layers.clone().all(|i| {
                    spatial(&layer_in[i]) == Some((t, t)) && spatial(&trace[i].1) == Some((t, t))
                })
        });

    Ok(DownsamplingReport { events, rule, reductions_ok, none_after_target, final_stage_at_target })
}

/// Full report for a named architecture.
pub fn analyze(arch: &Architecture) -> Result<ArchReport> {
    let rows = arch_rows(arch)?;
    let totals = totals(&rows);
    let (peak_act_bytes, peak_layer) = peak_activation(&arch.net, &rows);
    let downsampling = downsampling_report(&arch.net, MOBIFACE_RULE)?;
    let size_note = reported_size_mb(arch.name()).map(|reported_mb| {
        let computed_bytes = (totals.params + totals.buffers) * BYTES_PER_FLOAT;
        let computed_mb = computed_bytes as f64 / 1e6;
        let largest = rows.iter().max_by_key(|r| r.params).expect("non-empty network");
        let message = format!(
            "computed fp32 size {computed_mb:.1} MB differs from the reported {reported_mb} MB; \
             layer `{}` alone holds {} params ({:.1} MB)",
            largest.layer,
            largest.params,
            (largest.params * BYTES_PER_FLOAT) as f64 / 1e6,
        );
        SizeNote {
            computed_bytes,
            computed_mb,
            reported_mb,
            largest_layer: largest.layer.clone(),
            largest_layer_params: largest.params,
            message,
        }
    });
    Ok(ArchReport { arch: arch.name().to_string(), rows, totals, peak_act_bytes, peak_layer, downsampling, size_note })
}

fn fmt_shape(s: &[usize]) -> String {
    s.iter().map(usize::to_string).collect::<Vec<_>>().join("x")
}

impl ArchReport {
    /// Aligned text table (per sample, 1 MAC = 2 FLOPs).
    pub fn to_table(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "architecture: {}   (MACs are multiply-accumulates; 1 MAC = 2 FLOPs)", self.arch);
        let _ = writeln!(out, "{:<28} {:>12} {:>12} {:>9} {:>14} {:>12}", "layer", "shape", "params", "buffers", "macs", "act_bytes");
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{:<28} {:>12} {:>12} {:>9} {:>14} {:>12}",
                r.layer,
                fmt_shape(&r.shape),
                r.params,
                r.buffers,
                r.macs,
                r.act_bytes
            );
        }
        let t = &self.totals;
        let _ = writeln!(out, "{:<28} {:>12} {:>12} {:>9} {:>14} {:>12}", "TOTAL", "", t.params, t.buffers, t.macs, t.act_bytes);
        let _ = writeln!(out, "peak activation (input+output): {} bytes at `{}`", self.peak_act_bytes, self.peak_layer);
        let _ = writeln!(out, "downsampling events:");
        for e in &self.downsampling.events {
            let _ = writeln!(
                out,
                "  {:<26} {}x{} -> {}x{}",
                e.layer, e.in_spatial.0, e.in_spatial.1, e.out_spatial.0, e.out_spatial.1
            );
        }
        let d = &self.downsampling;
        let _ = writeln!(
            out,
            "fast-downsampling checks: reductions={} none_after_{}x{}={} final_stage_at_{}x{}={}",
            d.reductions_ok, d.rule.target_spatial, d.rule.target_spatial, d.none_after_target,
            d.rule.target_spatial, d.rule.target_spatial, d.final_stage_at_target
        );
        if let Some(n) = &self.size_note {
            let _ = writeln!(out, "NOTE: {}", n.message);
        }
        out
    }
}
