//! Sequential model graph and its line-oriented text manifest.
//!
//! One layer per line: `kind name key=value ...`; `#` starts a comment.
//!
//! ```text
//! input x shape=1,16,16 afmt=e-5
//! conv c1 weight=c1.w k=3 stride=1 pad=1 out=8 first=true
//! batchnorm bn1 mean=bn1.mean var=bn1.var gamma=bn1.gamma beta=bn1.beta eps=1e-5
//! relu r1
//! fc fc weight=fc.w bias=fc.b out=10
//! ```
//!
//! Keys: `in` (input tensor, defaults to the previous layer), `weight`, `bias`,
//! `k`, `stride`, `pad`, `out`, `first`, batch-norm `mean/var/gamma/beta/eps`,
//! quantized weights `wbits` (2, 4 or 8), `n` (cluster size), `wexp`
//! (scale exponent), and `afmt=e<int>` (output activation exponent).

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::model_io::container::{DType, TensorStore};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LayerKind {
    Conv,
    Fc,
    BatchNorm,
    Relu,
    MaxPool,
    AvgPool,
}

impl LayerKind {
    pub fn keyword(self) -> &'static str {
        match self {
            LayerKind::Conv => "conv",
            LayerKind::Fc => "fc",
            LayerKind::BatchNorm => "batchnorm",
            LayerKind::Relu => "relu",
            LayerKind::MaxPool => "maxpool",
            LayerKind::AvgPool => "avgpool",
        }
    }

    fn parse(s: &str) -> Option<Self> {
        Some(match s {
            "conv" => LayerKind::Conv,
            "fc" => LayerKind::Fc,
            "batchnorm" | "bn" => LayerKind::BatchNorm,
            "relu" => LayerKind::Relu,
            "maxpool" => LayerKind::MaxPool,
            "avgpool" => LayerKind::AvgPool,
            _ => return None,
        })
    }

    pub fn is_compute(self) -> bool {
        matches!(self, LayerKind::Conv | LayerKind::Fc)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BnRefs {
    pub mean: String,
    pub var: String,
    pub gamma: String,
    pub beta: String,
    pub eps: f32,
}

impl BnRefs {
    pub fn for_layer(name: &str) -> Self {
        Self {
            mean: format!("{name}.mean"),
            var: format!("{name}.var"),
            gamma: format!("{name}.gamma"),
            beta: format!("{name}.beta"),
            eps: 1e-5,
        }
    }
}

/// How a conv/fc layer's weights are stored once quantized.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct WeightQuant {
    /// 2 (ternary clusters), 4 (int4 clusters) or 8 (plain 8-bit fixed point).
    pub bits: u8,
    /// Filters per cluster; unused for 8-bit weights.
    pub cluster_size: usize,
    /// Shared power-of-two exponent of the per-cluster scales (or of the
    /// 8-bit weights themselves).
    pub exponent: i32,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerSpec {
    pub kind: LayerKind,
    pub name: String,
    pub input: String,
    pub weight: Option<String>,
    pub bias: Option<String>,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub out_channels: usize,
    pub first_conv: bool,
    pub bn: Option<BnRefs>,
    pub quant: Option<WeightQuant>,
    pub afmt: Option<i32>,
}

impl LayerSpec {
    fn bare(kind: LayerKind, name: &str, input: &str) -> Self {
        Self {
            kind,
            name: name.to_string(),
            input: input.to_string(),
            weight: None,
            bias: None,
            kernel: 1,
            stride: 1,
            padding: 0,
            out_channels: 0,
            first_conv: false,
            bn: None,
            quant: None,
            afmt: None,
        }
    }

    pub fn conv(name: &str, input: &str, out: usize, k: usize, stride: usize, pad: usize) -> Self {
        Self {
            weight: Some(format!("{name}.w")),
            kernel: k,
            stride,
            padding: pad,
            out_channels: out,
            ..Self::bare(LayerKind::Conv, name, input)
        }
    }

    pub fn fc(name: &str, input: &str, out: usize) -> Self {
        Self {
            weight: Some(format!("{name}.w")),
            bias: Some(format!("{name}.b")),
            out_channels: out,
            ..Self::bare(LayerKind::Fc, name, input)
        }
    }

    pub fn batchnorm(name: &str, input: &str) -> Self {
        Self { bn: Some(BnRefs::for_layer(name)), ..Self::bare(LayerKind::BatchNorm, name, input) }
    }

    pub fn relu(name: &str, input: &str) -> Self {
        Self::bare(LayerKind::Relu, name, input)
    }

    pub fn pool(kind: LayerKind, name: &str, input: &str, k: usize, stride: usize) -> Self {
        Self { kernel: k, stride, ..Self::bare(kind, name, input) }
    }

    pub fn first(mut self) -> Self {
        self.first_conv = true;
        self
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct InputSpec {
    pub name: String,
    /// Per-item shape, without the batch dimension.
    pub shape: Vec<usize>,
    pub afmt: Option<i32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelGraph {
    pub input: InputSpec,
    pub layers: Vec<LayerSpec>,
}

/// Per-layer shape facts derived by propagating the input shape.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerShape {
    pub input: Vec<usize>,
    pub output: Vec<usize>,
}

impl LayerShape {
    /// Input channels for conv, flattened input features for fc.
    pub fn in_features(&self, kind: LayerKind) -> usize {
        match kind {
            LayerKind::Fc => self.input.iter().product(),
            _ => self.input.first().copied().unwrap_or(1),
        }
    }

    /// Output spatial positions per channel (1 for fc).
    pub fn out_positions(&self) -> usize {
        self.output.iter().skip(1).product::<usize>().max(1)
    }
}

fn pool_out(len: usize, k: usize, stride: usize, pad: usize) -> Option<usize> {
    let padded = len + 2 * pad;
    if k == 0 || stride == 0 || padded < k {
        return None;
    }
    Some((padded - k) / stride + 1)
}

impl ModelGraph {
    pub fn new(input_name: &str, shape: Vec<usize>) -> Self {
        Self { input: InputSpec { name: input_name.to_string(), shape, afmt: None }, layers: Vec::new() }
    }

    pub fn push(&mut self, layer: LayerSpec) -> &mut Self {
        self.layers.push(layer);
        self
    }

    pub fn layer(&self, name: &str) -> Option<&LayerSpec> {
        self.layers.iter().find(|l| l.name == name)
    }

    pub fn layer_mut(&mut self, name: &str) -> Option<&mut LayerSpec> {
        self.layers.iter_mut().find(|l| l.name == name)
    }

    /// Name of the tensor the graph produces.
    pub fn output_name(&self) -> &str {
        self.layers.last().map_or(&self.input.name, |l| &l.name)
    }

    /// Structural validation plus shape propagation. Returns the per-layer
    /// input/output shapes (batch dimension omitted).
    pub fn shapes(&self) -> Result<Vec<LayerShape>> {
        if self.input.shape.is_empty() || self.input.shape.contains(&0) {
            return Err(Error::InvalidGraph(format!(
                "input shape {:?} must be non-empty and positive",
                self.input.shape
            )));
        }
        let mut produced: Vec<(&str, Vec<usize>)> = vec![(self.input.name.as_str(), self.input.shape.clone())];
        let mut out = Vec::with_capacity(self.layers.len());
        let convs = self.layers.iter().filter(|l| l.kind == LayerKind::Conv).count();
        let firsts = self.layers.iter().filter(|l| l.first_conv).count();
        if convs > 0 && firsts != 1 {
            return Err(Error::InvalidGraph(format!(
                "exactly one conv layer must be marked first=true (found {firsts})"
            )));
        }
        for l in &self.layers {
            let err = |detail: String| Error::ShapeMismatch { layer: l.name.clone(), detail };
            if produced.iter().any(|(n, _)| *n == l.name) {
                return Err(Error::InvalidGraph(format!("duplicate layer name `{}`", l.name)));
            }
            if l.first_conv && l.kind != LayerKind::Conv {
                return Err(Error::InvalidGraph(format!("`{}`: only conv layers can be first", l.name)));
            }
            let input = produced
                .iter()
                .find(|(n, _)| *n == l.input)
                .map(|(_, s)| s.clone())
                .ok_or_else(|| Error::DanglingInput { layer: l.name.clone(), input: l.input.clone() })?;
            let output = match l.kind {
                LayerKind::Conv => {
                    if l.weight.is_none() || l.out_channels == 0 || l.kernel == 0 || l.stride == 0 {
                        return Err(err("conv needs weight, out>0, k>0 and stride>0".into()));
                    }
                    if input.len() != 3 {
                        return Err(err(format!("conv input must be [C,H,W], got {input:?}")));
                    }
                    let h = pool_out(input[1], l.kernel, l.stride, l.padding)
                        .ok_or_else(|| err(format!("kernel {} does not fit input {input:?}", l.kernel)))?;
                    let w = pool_out(input[2], l.kernel, l.stride, l.padding)
                        .ok_or_else(|| err(format!("kernel {} does not fit input {input:?}", l.kernel)))?;
                    vec![l.out_channels, h, w]
                }
                LayerKind::Fc => {
                    if l.weight.is_none() || l.out_channels == 0 {
                        return Err(err("fc needs weight and out>0".into()));
                    }
                    vec![l.out_channels]
                }
                LayerKind::BatchNorm => {
                    if l.bn.is_none() {
                        return Err(err("batchnorm needs mean/var/gamma/beta".into()));
                    }
                    input.clone()
                }
                LayerKind::Relu => input.clone(),
                LayerKind::MaxPool | LayerKind::AvgPool => {
                    if input.len() != 3 {
                        return Err(err(format!("pool input must be [C,H,W], got {input:?}")));
                    }
                    let h = pool_out(input[1], l.kernel, l.stride, l.padding)
                        .ok_or_else(|| err(format!("window {} does not fit input {input:?}", l.kernel)))?;
                    let w = pool_out(input[2], l.kernel, l.stride, l.padding)
                        .ok_or_else(|| err(format!("window {} does not fit input {input:?}", l.kernel)))?;
                    vec![input[0], h, w]
                }
            };
            produced.push((l.name.as_str(), output.clone()));
            out.push(LayerShape { input, output });
        }
        Ok(out)
    }

    /// Full validation against a companion container: structure, shapes,
    /// and every referenced tensor (existence, dtype and shape).
    pub fn validate(&self, store: &TensorStore) -> Result<Vec<LayerShape>> {
        let shapes = self.shapes()?;
        for (l, s) in self.layers.iter().zip(&shapes) {
            let err = |detail: String| Error::ShapeMismatch { layer: l.name.clone(), detail };
            let check = |name: &str, dtype: DType, want: &[usize]| -> Result<()> {
                let r = store.require(&l.name, name)?;
                if r.dtype != dtype {
                    return Err(err(format!("`{name}` has dtype {:?}, expected {:?}", r.dtype, dtype)));
                }
                if r.shape_usize() != want {
                    return Err(err(format!("`{name}` has shape {:?}, expected {want:?}", r.shape)));
                }
                Ok(())
            };
            match l.kind {
                LayerKind::Conv | LayerKind::Fc => {
                    let d = l.out_channels;
                    let want: Vec<usize> = if l.kind == LayerKind::Conv {
                        vec![d, s.in_features(l.kind), l.kernel, l.kernel]
                    } else {
                        vec![d, s.in_features(l.kind)]
                    };
                    let w = l.weight.as_deref().unwrap();
                    match l.quant {
                        None => check(w, DType::F32, &want)?,
                        Some(q) => {
                            let dtype = match q.bits {
                                2 => DType::Ternary2,
                                4 | 8 => DType::I8,
                                b => return Err(err(format!("unsupported wbits={b}"))),
                            };
                            check(w, dtype, &want)?;
                            if q.bits != 8 {
                                if q.cluster_size == 0 {
                                    return Err(err("quantized layer needs n>0".into()));
                                }
                                check(&scales_name(&l.name), DType::I8, &[d.div_ceil(q.cluster_size)])?;
                            }
                        }
                    }
                    if let Some(b) = &l.bias {
                        check(b, DType::F32, &[d])?;
                    }
                }
                LayerKind::BatchNorm => {
                    let bn = l.bn.as_ref().unwrap();
                    let c = s.input[0];
                    for name in [&bn.mean, &bn.var, &bn.gamma, &bn.beta] {
                        check(name, DType::F32, &[c])?;
                    }
                }
                _ => {}
            }
        }
        Ok(shapes)
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut input: Option<InputSpec> = None;
        let mut layers: Vec<LayerSpec> = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line_no = i + 1;
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let bad = |detail: String| Error::Manifest { line: line_no, detail };
            let mut words = line.split_whitespace();
            let kind = words.next().unwrap();
            let name = words.next().ok_or_else(|| bad("missing layer name".into()))?;
            let mut kv = Vec::new();
            for w in words {
                let (k, v) = w.split_once('=').ok_or_else(|| bad(format!("expected key=value, got `{w}`")))?;
                if kv.iter().any(|(kk, _)| *kk == k) {
                    return Err(bad(format!("key `{k}` given twice")));
                }
                kv.push((k, v));
            }
            let num = |k: &str, v: &str| -> Result<usize> {
                v.parse().map_err(|_| bad(format!("`{k}` expects a non-negative integer, got `{v}`")))
            };
            let int = |k: &str, v: &str| -> Result<i32> {
                v.parse().map_err(|_| bad(format!("`{k}` expects an integer, got `{v}`")))
            };
            let afmt = |v: &str| -> Result<i32> {
                v.strip_prefix('e')
                    .and_then(|s| s.parse().ok())
                    .ok_or_else(|| bad(format!("`afmt` expects e<int>, got `{v}`")))
            };

            if kind == "input" {
                if input.is_some() || !layers.is_empty() {
                    return Err(bad("`input` must appear once, before any layer".into()));
                }
                let mut spec = InputSpec { name: name.to_string(), shape: Vec::new(), afmt: None };
                for (k, v) in kv {
                    match k {
                        "shape" => {
                            spec.shape = v.split(',').map(|d| num(k, d)).collect::<Result<_>>()?;
                        }
                        "afmt" => spec.afmt = Some(afmt(v)?),
                        _ => return Err(bad(format!("unknown key `{k}` for input"))),
                    }
                }
                if spec.shape.is_empty() {
                    return Err(bad("input needs shape=".into()));
                }
                input = Some(spec);
                continue;
            }

            let kind = LayerKind::parse(kind).ok_or_else(|| bad(format!("unknown layer kind `{kind}`")))?;
            let prev = layers
                .last()
                .map(|l| l.name.clone())
                .or_else(|| input.as_ref().map(|i| i.name.clone()))
                .ok_or_else(|| bad("layer before `input` line".into()))?;
            let mut l = LayerSpec::bare(kind, name, &prev);
            let mut bn = BnRefs::for_layer(name);
            let (mut wbits, mut n, mut wexp) = (None, None, None);
            for (k, v) in kv {
                match k {
                    "in" => l.input = v.to_string(),
                    "weight" => l.weight = Some(v.to_string()),
                    "bias" => l.bias = Some(v.to_string()),
                    "k" => l.kernel = num(k, v)?,
                    "stride" => l.stride = num(k, v)?,
                    "pad" => l.padding = num(k, v)?,
                    "out" => l.out_channels = num(k, v)?,
                    "first" => {
                        l.first_conv = match v {
                            "true" => true,
                            "false" => false,
                            _ => return Err(bad(format!("`first` expects true/false, got `{v}`"))),
                        }
                    }
                    "mean" => bn.mean = v.to_string(),
                    "var" => bn.var = v.to_string(),
                    "gamma" => bn.gamma = v.to_string(),
                    "beta" => bn.beta = v.to_string(),
                    "eps" => bn.eps = v.parse().map_err(|_| bad(format!("bad eps `{v}`")))?,
                    "wbits" => wbits = Some(num(k, v)?),
                    "n" => n = Some(num(k, v)?),
                    "wexp" => wexp = Some(int(k, v)?),
                    "afmt" => l.afmt = Some(afmt(v)?),
                    _ => return Err(bad(format!("unknown key `{k}`"))),
                }
            }
            if kind == LayerKind::BatchNorm {
                l.bn = Some(bn);
            }
            if let Some(bits) = wbits {
                if !matches!(bits, 2 | 4 | 8) {
                    return Err(bad(format!("wbits must be 2, 4 or 8, got {bits}")));
                }
                l.quant = Some(WeightQuant {
                    bits: bits as u8,
                    cluster_size: n.unwrap_or(0),
                    exponent: wexp.ok_or_else(|| bad("quantized layer needs wexp=".into()))?,
                });
            } else if n.is_some() || wexp.is_some() {
                return Err(bad("`n`/`wexp` require `wbits`".into()));
            }
            layers.push(l);
        }
        let input = input.ok_or_else(|| Error::Manifest { line: 0, detail: "missing `input` line".into() })?;
        let g = ModelGraph { input, layers };
        g.shapes()?;
        Ok(g)
    }

    /// Canonical manifest text. `parse(to_manifest(g)) == g`.
    pub fn to_manifest(&self) -> String {
        let mut s = String::new();
        let shape: Vec<String> = self.input.shape.iter().map(|d| d.to_string()).collect();
        write!(s, "input {} shape={}", self.input.name, shape.join(",")).unwrap();
        if let Some(e) = self.input.afmt {
            write!(s, " afmt=e{e}").unwrap();
        }
        s.push('\n');
        let mut prev = self.input.name.as_str();
        for l in &self.layers {
            write!(s, "{} {}", l.kind.keyword(), l.name).unwrap();
            if l.input != prev {
                write!(s, " in={}", l.input).unwrap();
            }
            if let Some(w) = &l.weight {
                write!(s, " weight={w}").unwrap();
            }
            if let Some(b) = &l.bias {
                write!(s, " bias={b}").unwrap();
            }
            match l.kind {
                LayerKind::Conv | LayerKind::MaxPool | LayerKind::AvgPool => {
                    write!(s, " k={} stride={} pad={}", l.kernel, l.stride, l.padding).unwrap();
                }
                _ => {}
            }
            if l.kind.is_compute() {
                write!(s, " out={}", l.out_channels).unwrap();
            }
            if l.first_conv {
                s.push_str(" first=true");
            }
            if let Some(bn) = &l.bn {
                write!(s, " mean={} var={} gamma={} beta={} eps={:e}", bn.mean, bn.var, bn.gamma, bn.beta, bn.eps)
                    .unwrap();
            }
            if let Some(q) = l.quant {
                write!(s, " wbits={}", q.bits).unwrap();
                if q.bits != 8 {
                    write!(s, " n={}", q.cluster_size).unwrap();
                }
                write!(s, " wexp={}", q.exponent).unwrap();
            }
            if let Some(e) = l.afmt {
                write!(s, " afmt=e{e}").unwrap();
            }
            s.push('\n');
            prev = &l.name;
        }
        s
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_manifest())?;
        Ok(())
    }
}

/// Record name of a quantized layer's per-cluster scale mantissas.
pub fn scales_name(layer: &str) -> String {
    format!("{layer}.scales")
}

/// Record name of a quantized layer's weight codes.
pub fn codes_name(layer: &str) -> String {
    format!("{layer}.codes")
}

/// Parse and structurally validate a manifest file.
pub fn load_graph(path: impl AsRef<Path>) -> Result<ModelGraph> {
    ModelGraph::parse(&std::fs::read_to_string(path)?)
}
