//! Static operation counting for quantized graphs.
//!
//! Every baseline multiply-accumulate becomes exactly one accumulation. In a
//! ternary layer those are sign-controlled additions of 8-bit activations and
//! each block of `N` input-channel kernels (`N * K^2` accumulations) costs one
//! 8-bit multiply by the cluster scale. 8-bit and 4-bit weight layers keep one
//! multiply per accumulation. Requantization and batch-norm work is reported
//! separately as overhead and does not enter the replacement ratio.

use std::fmt::Write as _;
use std::ops::{Add, AddAssign};

use serde::Serialize;

use crate::error::Result;
use crate::model_io::{LayerKind, LayerShape, LayerSpec, ModelGraph};
use crate::ternarizer::{QuantConfig, WeightBits};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct OpCounts {
    pub macs_fp32: u64,
    pub mults_8bit: u64,
    pub accs_ternary: u64,
    pub accs_8bit: u64,
    /// int4 per-output scale multiplies (overhead).
    pub scale_mults: u64,
    /// batch-norm affine multiplies (overhead).
    pub bn_mults: u64,
    /// shift/round/saturate steps (overhead).
    pub requant_ops: u64,
}

impl OpCounts {
    /// `1 - mults / macs`, 0 for layers without MACs.
    pub fn replaced_ratio(&self) -> f64 {
        if self.macs_fp32 == 0 {
            0.0
        } else {
            1.0 - self.mults_8bit as f64 / self.macs_fp32 as f64
        }
    }

    pub fn scaled(self, k: u64) -> Self {
        Self {
            macs_fp32: self.macs_fp32 * k,
            mults_8bit: self.mults_8bit * k,
            accs_ternary: self.accs_ternary * k,
            accs_8bit: self.accs_8bit * k,
            scale_mults: self.scale_mults * k,
            bn_mults: self.bn_mults * k,
            requant_ops: self.requant_ops * k,
        }
    }
}

impl Add for OpCounts {
    type Output = Self;
    fn add(self, o: Self) -> Self {
        Self {
            macs_fp32: self.macs_fp32 + o.macs_fp32,
            mults_8bit: self.mults_8bit + o.mults_8bit,
            accs_ternary: self.accs_ternary + o.accs_ternary,
            accs_8bit: self.accs_8bit + o.accs_8bit,
            scale_mults: self.scale_mults + o.scale_mults,
            bn_mults: self.bn_mults + o.bn_mults,
            requant_ops: self.requant_ops + o.requant_ops,
        }
    }
}

impl AddAssign for OpCounts {
    fn add_assign(&mut self, o: Self) {
        *self = *self + o;
    }
}

/// Weight encoding a conv/fc layer executes with.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LayerEncoding {
    Int8,
    Ternary { block: usize },
    Int4,
}

/// Encoding from the layer's stored quantization, or from `config` for
/// layers that are still full precision.
pub fn layer_encoding(spec: &LayerSpec, config: &QuantConfig) -> LayerEncoding {
    if spec.first_conv {
        return LayerEncoding::Int8;
    }
    if let Some(q) = spec.quant {
        return match q.bits {
            2 => LayerEncoding::Ternary { block: q.cluster_size.max(1) },
            4 => LayerEncoding::Int4,
            _ => LayerEncoding::Int8,
        };
    }
    if spec.kind == LayerKind::Fc && !config.quantize_fc {
        return LayerEncoding::Int8;
    }
    match config.weight_bits {
        WeightBits::Ternary => LayerEncoding::Ternary { block: config.cluster_size.max(1) },
        WeightBits::Int4 => LayerEncoding::Int4,
    }
}

/// Counts for one batch item.
pub fn count_layer(spec: &LayerSpec, shape: &LayerShape, config: &QuantConfig) -> OpCounts {
    match spec.kind {
        LayerKind::Conv | LayerKind::Fc => {
            let c_in = shape.in_features(spec.kind) as u64;
            let d = spec.out_channels as u64;
            let k2 = if spec.kind == LayerKind::Conv { (spec.kernel * spec.kernel) as u64 } else { 1 };
            let outputs = d * shape.out_positions() as u64;
            let macs = outputs * c_in * k2;
            let base = OpCounts { macs_fp32: macs, requant_ops: outputs, ..OpCounts::default() };
            match layer_encoding(spec, config) {
                LayerEncoding::Int8 => OpCounts { mults_8bit: macs, accs_8bit: macs, ..base },
                LayerEncoding::Int4 => OpCounts { mults_8bit: macs, accs_8bit: macs, scale_mults: outputs, ..base },
                LayerEncoding::Ternary { block } => {
                    OpCounts { mults_8bit: outputs * c_in.div_ceil(block as u64), accs_ternary: macs, ..base }
                }
            }
        }
        LayerKind::BatchNorm => {
            let n = shape.output.iter().product::<usize>() as u64;
            OpCounts { bn_mults: n, requant_ops: n, ..OpCounts::default() }
        }
        LayerKind::Relu | LayerKind::MaxPool | LayerKind::AvgPool => OpCounts::default(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LayerCounts {
    pub name: String,
    pub kind: &'static str,
    pub counts: OpCounts,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct OpCountReport {
    pub layers: Vec<LayerCounts>,
    /// Sum over all layers.
    pub total: OpCounts,
}

pub const CSV_HEADER: &str =
    "layer,kind,macs_fp32,mults_8bit,accs_ternary,accs_8bit,replaced_ratio,scale_mults,bn_mults,requant_ops";

impl OpCountReport {
    pub fn from_layers(layers: Vec<LayerCounts>) -> Self {
        let total = layers.iter().fold(OpCounts::default(), |a, l| a + l.counts);
        Self { layers, total }
    }

    /// Aggregate `1 - mults/macs` over conv and fc layers, weighted by MACs.
    pub fn replaced_ratio(&self) -> f64 {
        self.total.replaced_ratio()
    }

    pub fn get(&self, name: &str) -> Option<&OpCounts> {
        self.layers.iter().find(|l| l.name == name).map(|l| &l.counts)
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from(CSV_HEADER);
        s.push('\n');
        let mut row = |name: &str, kind: &str, c: &OpCounts| {
            writeln!(
                s,
                "{name},{kind},{},{},{},{},{:.6},{},{},{}",
                c.macs_fp32,
                c.mults_8bit,
                c.accs_ternary,
                c.accs_8bit,
                c.replaced_ratio(),
                c.scale_mults,
                c.bn_mults,
                c.requant_ops
            )
            .unwrap();
        };
        for l in &self.layers {
            row(&l.name, l.kind, &l.counts);
        }
        row("TOTAL", "-", &self.total);
        s
    }

    pub fn to_table(&self) -> String {
        let mut s = String::new();
        writeln!(s, "# replaced ratio = 1 - mults_8bit / macs_fp32, MAC-weighted over conv+fc layers").unwrap();
        writeln!(
            s,
            "{:<16} {:<9} {:>14} {:>14} {:>14} {:>14} {:>9} {:>12} {:>12} {:>12}",
            "layer",
            "kind",
            "macs_fp32",
            "mults_8bit",
            "accs_ternary",
            "accs_8bit",
            "replaced",
            "scale_mults",
            "bn_mults",
            "requant"
        )
        .unwrap();
        let mut row = |name: &str, kind: &str, c: &OpCounts| {
            writeln!(
                s,
                "{:<16} {:<9} {:>14} {:>14} {:>14} {:>14} {:>8.2}% {:>12} {:>12} {:>12}",
                name,
                kind,
                c.macs_fp32,
                c.mults_8bit,
                c.accs_ternary,
                c.accs_8bit,
                100.0 * c.replaced_ratio(),
                c.scale_mults,
                c.bn_mults,
                c.requant_ops
            )
            .unwrap();
        };
        for l in &self.layers {
            row(&l.name, l.kind, &l.counts);
        }
        row("TOTAL", "-", &self.total);
        s
    }
}

/// Per-layer static counts for one batch item.
pub fn count_graph(graph: &ModelGraph, config: &QuantConfig) -> Result<OpCountReport> {
    let shapes = graph.shapes()?;
    let layers = graph
        .layers
        .iter()
        .zip(&shapes)
        .map(|(l, s)| LayerCounts { name: l.name.clone(), kind: l.kind.keyword(), counts: count_layer(l, s, config) })
        .collect();
    Ok(OpCountReport::from_layers(layers))
}

#[cfg(test)]
mod tests {
    use super::*;

    // a 1x1 first conv feeding the layer under test `c`
    fn conv_graph(c_in: usize, k: usize, hw: usize, d: usize) -> ModelGraph {
        let mut g = ModelGraph::new("x", vec![c_in, hw, hw]);
        g.push(LayerSpec::conv("f", "x", c_in, 1, 1, 0).first());
        g.push(LayerSpec::conv("c", "f", d, k, 1, k / 2));
        g
    }

    #[test]
    fn three_by_three_cluster_of_four() {
        // one output value over 4 input channels: 36 accumulations, 1 multiply
        let g = conv_graph(4, 3, 1, 1);
        let shapes = g.shapes().unwrap();
        let c = count_layer(&g.layers[1], &shapes[1], &QuantConfig::ternary(4));
        assert_eq!((c.accs_ternary, c.mults_8bit), (36, 1));
        assert_eq!(c.accs_ternary + c.accs_8bit, c.macs_fp32);
    }

    #[test]
    fn one_by_one_cluster_of_64() {
        let g = conv_graph(256, 1, 7, 32);
        let r = count_graph(&g, &QuantConfig::ternary(64)).unwrap();
        let c = r.get("c").unwrap();
        assert_eq!(c.replaced_ratio(), 1.0 - 1.0 / 64.0);
    }

    #[test]
    fn n1_k1_replaces_nothing() {
        let g = conv_graph(8, 1, 4, 8);
        let r = count_graph(&g, &QuantConfig::ternary(1)).unwrap();
        assert_eq!(r.get("c").unwrap().replaced_ratio(), 0.0);
        assert_eq!(r.replaced_ratio(), 0.0);
    }

    #[test]
    fn first_conv_is_all_multiplies() {
        let g = conv_graph(8, 3, 4, 8);
        let r = count_graph(&g, &QuantConfig::ternary(4)).unwrap();
        let f = r.get("f").unwrap();
        assert_eq!(f.mults_8bit, f.macs_fp32);
        assert_eq!(f.accs_8bit, f.macs_fp32);
    }

    #[test]
    fn ragged_input_blocks_count_once() {
        // 6 input channels, N = 4 -> blocks of 4 and 2 -> 2 multiplies per output
        let g = conv_graph(6, 1, 1, 1);
        let r = count_graph(&g, &QuantConfig::ternary(4)).unwrap();
        assert_eq!(r.get("c").unwrap().mults_8bit, 2);
    }

    #[test]
    fn csv_has_documented_columns() {
        let g = conv_graph(4, 3, 2, 2);
        let csv = count_graph(&g, &QuantConfig::ternary(4)).unwrap().to_csv();
        let mut lines = csv.lines();
        assert_eq!(lines.next().unwrap(), CSV_HEADER);
        assert_eq!(lines.count(), 3);
    }
}
