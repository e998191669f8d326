//! End-to-end post-training quantization: weights, batch-norm statistics,
//! activation formats.

use serde::Serialize;

use crate::engine::{self, apply_recomputed_batchnorm, Mode, Plan};
use crate::error::{Error, Result};
use crate::fixed_point::{apply_formats, calibrate, MaxAbs};
use crate::model_io::{
    graph::codes_name, graph::scales_name, LayerKind, Model, TensorRecord, TensorStore, WeightQuant,
};
use crate::perf::{layer_encoding, LayerEncoding};
use crate::tensor::Tensor;
use crate::ternarizer::{quantize_layer, quantize_layer_int4, quantize_weights_int8, QuantConfig};

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LayerQuantReport {
    pub layer: String,
    /// "int8", "ternary" or "int4"
    pub encoding: &'static str,
    pub clusters: usize,
    pub scale_exponent: i32,
    /// Squared error of the cluster search (unquantized scales).
    pub search_error: f64,
    /// Squared error of the stored weights (8-bit scales), `||W - deq||²`.
    pub error: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct QuantReport {
    pub cluster_size: usize,
    pub weight_bits: u8,
    pub layers: Vec<LayerQuantReport>,
}

impl QuantReport {
    /// Summed stored-weight error over the layers quantized below 8 bits.
    pub fn total_error(&self) -> f64 {
        self.layers.iter().filter(|l| l.encoding != "int8").map(|l| l.error).sum()
    }

    pub fn total_search_error(&self) -> f64 {
        self.layers.iter().filter(|l| l.encoding != "int8").map(|l| l.search_error).sum()
    }

    pub fn to_table(&self) -> String {
        let mut s = format!(
            "{:<16} {:>8} {:>8} {:>6} {:>14} {:>14}\n",
            "layer", "encoding", "clusters", "exp", "search_err", "stored_err"
        );
        for l in &self.layers {
            s += &format!(
                "{:<16} {:>8} {:>8} {:>6} {:>14.6e} {:>14.6e}\n",
                l.layer, l.encoding, l.clusters, l.scale_exponent, l.search_error, l.error
            );
        }
        s += &format!(
            "{:<16} {:>8} {:>8} {:>6} {:>14.6e} {:>14.6e}\n",
            "total",
            "",
            "",
            "",
            self.total_search_error(),
            self.total_error()
        );
        s
    }
}

fn sq_err(a: &Tensor, b: &Tensor) -> f64 {
    a.data.iter().zip(&b.data).map(|(&x, &y)| (x as f64 - y as f64).powi(2)).sum()
}

/// Quantize every float conv/fc layer: the first convolution (and fc layers
/// unless configured otherwise) to 8-bit fixed point, the rest to clustered
/// ternary or 4-bit codes. Returns the quantized model and per-layer errors.
pub fn quantize_model(model: &Model, config: &QuantConfig) -> Result<(Model, QuantReport)> {
    let mut graph = model.graph.clone();
    let mut replaced = Vec::new();
    let mut added = Vec::new();
    let mut layers = Vec::new();
    for l in graph.layers.iter_mut().filter(|l| matches!(l.kind, LayerKind::Conv | LayerKind::Fc)) {
        if l.quant.is_some() {
            return Err(Error::Config(format!("layer `{}` is already quantized", l.name)));
        }
        let wname = l.weight.clone().expect("compute layer has weights");
        let w = model.tensors.tensor(&l.name, &wname)?;
        let codes = codes_name(&l.name);
        let report = match layer_encoding(l, config) {
            LayerEncoding::Int8 => {
                let q = quantize_weights_int8(&w)?;
                added.push(TensorRecord::from_i8(&codes, &w.shape, &q.mantissas));
                l.quant = Some(WeightQuant { bits: 8, cluster_size: 0, exponent: q.exponent });
                LayerQuantReport {
                    layer: l.name.clone(),
                    encoding: "int8",
                    clusters: 0,
                    scale_exponent: q.exponent,
                    search_error: sq_err(&w, &q.dequantize()),
                    error: sq_err(&w, &q.dequantize()),
                }
            }
            LayerEncoding::Ternary { .. } => {
                let q = quantize_layer(&w, config)?;
                added.push(TensorRecord::from_ternary(&codes, &w.shape, &q.codes()?)?);
                added.push(scale_record(&l.name, &q.scale_mantissas()));
                l.quant = Some(WeightQuant { bits: 2, cluster_size: config.cluster_size, exponent: q.exponent });
                LayerQuantReport {
                    layer: l.name.clone(),
                    encoding: "ternary",
                    clusters: q.clusters.len(),
                    scale_exponent: q.exponent,
                    search_error: q.error(),
                    error: sq_err(&w, &q.dequantize()?),
                }
            }
            LayerEncoding::Int4 => {
                let q = quantize_layer_int4(&w, config)?;
                added.push(TensorRecord::from_i8(&codes, &w.shape, &q.codes()));
                added.push(scale_record(&l.name, &q.scale_mantissas()));
                l.quant = Some(WeightQuant { bits: 4, cluster_size: config.cluster_size, exponent: q.exponent });
                LayerQuantReport {
                    layer: l.name.clone(),
                    encoding: "int4",
                    clusters: q.clusters.len(),
                    scale_exponent: q.exponent,
                    search_error: q.error(&w),
                    error: sq_err(&w, &q.dequantize()),
                }
            }
        };
        l.weight = Some(codes);
        replaced.push(wname);
        layers.push(report);
    }
    let mut records: Vec<TensorRecord> =
        model.tensors.records().iter().filter(|r| !replaced.contains(&r.name)).cloned().collect();
    records.extend(added);
    let quantized = Model::new(graph, TensorStore::from_records(records)?)?;
    let report = QuantReport { cluster_size: config.cluster_size, weight_bits: config.weight_bits.bits(), layers };
    Ok((quantized, report))
}

fn scale_record(layer: &str, mantissas: &[u8]) -> TensorRecord {
    let m: Vec<i8> = mantissas.iter().map(|&m| m as i8).collect();
    TensorRecord::from_i8(scales_name(layer), &[m.len()], &m)
}

/// Recompute batch-norm statistics on the quantized network, then calibrate
/// activation formats on the result. The returned model runs in every mode.
pub fn prepare_integer(quantized: &Model, calibration: &[Tensor]) -> Result<Model> {
    let mut m = quantized.clone();
    apply_recomputed_batchnorm(&mut m, calibration)?;
    let formats = calibrate(&m, calibration, &MaxAbs)?;
    apply_formats(&mut m, &formats);
    Ok(m)
}

/// Calibrate activation formats only, leaving batch-norm untouched.
pub fn calibrate_only(model: &Model, calibration: &[Tensor]) -> Result<Model> {
    let mut m = model.clone();
    let formats = calibrate(&m, calibration, &MaxAbs)?;
    apply_formats(&mut m, &formats);
    Ok(m)
}

/// Quantize, recompute BN and calibrate in one go.
pub fn post_training_quantize(
    model: &Model,
    config: &QuantConfig,
    calibration: &[Tensor],
) -> Result<(Model, QuantReport)> {
    let (q, report) = quantize_model(model, config)?;
    Ok((prepare_integer(&q, calibration)?, report))
}

/// Top-1 accuracy of `model` in `mode` over labelled batches.
pub fn evaluate(model: &Model, mode: Mode, batches: &[(Tensor, Vec<usize>)]) -> Result<f64> {
    engine::accuracy(&Plan::new(model, mode)?, batches)
}
