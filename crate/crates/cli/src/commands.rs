use std::error::Error as StdError;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::json;

use qntz_core::engine::{Mode, Plan, RunOptions};
use qntz_core::finetune::data::{dataset_from_batches, load_batches};
use qntz_core::finetune::{self, EpochRecord, ToyArch, ToyData, ToyTask, TrainConfig, TrainState};
use qntz_core::model_io::{load_graph, Model, ModelGraph, TensorRecord, TensorStore};
use qntz_core::perf::{count_graph, OpCountReport};
use qntz_core::pipeline::{self, QuantReport};
use qntz_core::ternarizer::{QuantConfig, WeightBits};
use qntz_core::Tensor;

use crate::run_manifest::RunManifest;
use crate::{Cli, ClusterSize, Command, ModeArg, ModelArgs, OutModel, QuantArgs};

pub type CliResult<T = ()> = Result<T, Box<dyn StdError>>;

pub fn run(cli: &Cli) -> CliResult {
    match &cli.command {
        Command::Quantize { model, quant, out, calib, eval, json } => {
            quantize(model, *quant, out, calib.as_deref(), eval.as_deref(), json.as_deref())
        }
        Command::Calibrate { model, data, out, no_bn_recompute } => calibrate(model, data, out, *no_bn_recompute),
        Command::Infer { model, input, mode, out, dump_activations, top_k, json } => {
            infer(model, input, *mode, out, *dump_activations, *top_k, json.as_deref())
        }
        Command::Analyze { manifest, quant, csv, json } => analyze(manifest, *quant, csv.as_deref(), json.as_deref()),
        Command::Finetune { model, data, eval, epochs, lr, seed, batch_size, quant, calibration, out, csv } => {
            let cfg = FinetuneArgs {
                epochs: *epochs,
                lr: *lr,
                seed: *seed,
                batch_size: *batch_size,
                calibration: *calibration,
            };
            finetune_cmd(model, data, eval, cfg, *quant, out, csv.as_deref())
        }
        Command::Report { artifacts, csv, markdown } => report(artifacts, csv.as_deref(), *markdown),
        Command::Toy { out_dir, seed, epochs, train, test } => toy(out_dir, *seed, *epochs, *train, *test),
    }
}

fn with_path<T, E: std::fmt::Display>(path: &Path, r: Result<T, E>) -> CliResult<T> {
    r.map_err(|e| format!("{}: {e}", path.display()).into())
}

fn load_model(m: &ModelArgs) -> CliResult<Model> {
    Ok(Model::load(&m.manifest, &m.weights)?)
}

fn save_model(model: &Model, out: &OutModel, manifest: &RunManifest) -> CliResult {
    model.save(&out.out_manifest, &out.out)?;
    manifest.write_for(&out.out)?;
    Ok(())
}

fn load_store(path: &Path) -> CliResult<TensorStore> {
    with_path(path, TensorStore::load(path))
}

fn inputs_of(path: &Path) -> CliResult<Vec<Tensor>> {
    Ok(with_path(path, load_batches(&load_store(path)?))?.into_iter().map(|(x, _)| x).collect())
}

fn labelled(path: &Path) -> CliResult<Vec<(Tensor, Vec<usize>)>> {
    with_path(path, load_batches(&load_store(path)?))?
        .into_iter()
        .enumerate()
        .map(|(i, (x, y))| match y {
            Some(y) => Ok((x, y)),
            None => Err(format!("{}: batch {i} has no `label.{i}` record", path.display()).into()),
        })
        .collect()
}

/// Largest number of filters in any conv/fc layer.
fn widest_layer(graph: &ModelGraph) -> usize {
    graph.layers.iter().filter(|l| l.kind.is_compute()).map(|l| l.out_channels).max().unwrap_or(1).max(1)
}

fn quant_config(q: QuantArgs, graph: &ModelGraph) -> CliResult<QuantConfig> {
    let n = match q.cluster_size {
        ClusterSize::Filters(n) => n,
        ClusterSize::All => widest_layer(graph),
    };
    Ok(QuantConfig::new(n, WeightBits::from_bits(q.weight_bits)?)?.with_fc(q.quantize_fc))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> CliResult {
    fs::write(path, serde_json::to_string_pretty(value)? + "\n")?;
    Ok(())
}

#[derive(Serialize, Deserialize)]
pub struct QuantizeArtifact {
    pub run: serde_json::Value,
    pub report: ArtifactReport,
    pub float_accuracy: Option<f64>,
    pub accuracy: Option<f64>,
}

#[derive(Serialize, Deserialize)]
pub struct ArtifactReport {
    pub cluster_size: usize,
    pub weight_bits: u8,
    pub total_error: f64,
    pub total_search_error: f64,
    pub layers: serde_json::Value,
}

impl ArtifactReport {
    fn new(r: &QuantReport) -> Self {
        Self {
            cluster_size: r.cluster_size,
            weight_bits: r.weight_bits,
            total_error: r.total_error(),
            total_search_error: r.total_search_error(),
            layers: serde_json::to_value(&r.layers).expect("report serializes"),
        }
    }
}

fn quantize(
    m: &ModelArgs,
    q: QuantArgs,
    out: &OutModel,
    calib: Option<&Path>,
    eval: Option<&Path>,
    json_out: Option<&Path>,
) -> CliResult {
    let model = load_model(m)?;
    let cfg = quant_config(q, &model.graph)?;
    let (mut quantized, report) = pipeline::quantize_model(&model, &cfg)?;
    let mut inputs: Vec<&Path> = vec![&m.manifest, &m.weights];
    let (mut float_acc, mut acc) = (None, None);
    if let Some(c) = calib {
        inputs.push(c);
        quantized = pipeline::prepare_integer(&quantized, &inputs_of(c)?)?;
    }
    if let Some(e) = eval {
        inputs.push(e);
        let batches = labelled(e)?;
        float_acc = Some(pipeline::evaluate(&model, Mode::Float, &batches)?);
        acc = Some(pipeline::evaluate(&quantized, Mode::Integer, &batches)?);
    }
    print!("{}", report.to_table());
    if let (Some(f), Some(a)) = (float_acc, acc) {
        println!("accuracy: float {:.4}  integer {:.4}", f, a);
    }
    let manifest = RunManifest::new("quantize", json!({ "quant": cfg }), &inputs)?;
    save_model(&quantized, out, &manifest)?;
    if let Some(path) = json_out {
        let artifact = QuantizeArtifact {
            run: serde_json::to_value(&manifest)?,
            report: ArtifactReport::new(&report),
            float_accuracy: float_acc,
            accuracy: acc,
        };
        write_json(path, &artifact)?;
    }
    Ok(())
}

fn calibrate(m: &ModelArgs, data: &Path, out: &OutModel, no_bn: bool) -> CliResult {
    let model = load_model(m)?;
    let calib = inputs_of(data)?;
    let result =
        if no_bn { pipeline::calibrate_only(&model, &calib)? } else { pipeline::prepare_integer(&model, &calib)? };
    println!("{:<16} {:>10} {:>12}", "tensor", "exponent", "max_abs");
    let formats = std::iter::once((&result.graph.input.name, result.graph.input.afmt))
        .chain(result.graph.layers.iter().map(|l| (&l.name, l.afmt)));
    for (name, e) in formats {
        if let Some(e) = e {
            println!("{:<16} {:>10} {:>12.6}", name, e, 127.0 * 2f64.powi(e));
        }
    }
    let manifest = RunManifest::new(
        "calibrate",
        json!({ "bn_recompute": !no_bn, "batches": calib.len() }),
        &[&m.manifest, &m.weights, data],
    )?;
    save_model(&result, out, &manifest)
}

fn top_k(row: &[f32], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..row.len()).collect();
    idx.sort_by(|&a, &b| row[b].total_cmp(&row[a]).then(a.cmp(&b)));
    idx.truncate(k);
    idx
}

fn infer(
    m: &ModelArgs,
    input: &Path,
    mode: ModeArg,
    out: &Path,
    dump: bool,
    k: Option<usize>,
    json_out: Option<&Path>,
) -> CliResult {
    let model = load_model(m)?;
    let mode = match mode {
        ModeArg::Float => Mode::Float,
        ModeArg::Quant => Mode::QuantRef,
        ModeArg::Int => Mode::Integer,
    };
    let plan = Plan::new(&model, mode)?;
    let batches = with_path(input, load_batches(&load_store(input)?))?;
    let mut records = Vec::new();
    let mut counts: Option<OpCountReport> = None;
    let (mut hit, mut total, mut sample) = (0usize, 0usize, 0usize);
    let mut all_labelled = true;
    for (i, (x, y)) in batches.iter().enumerate() {
        let res = plan.run(x, RunOptions { dump_activations: dump })?;
        records.push(TensorRecord::from_tensor(format!("output.{i}"), &res.output));
        for (name, t) in &res.activations {
            records.push(TensorRecord::from_tensor(format!("act.{name}.{i}"), t));
        }
        if let Some(c) = res.counts {
            counts = Some(match counts {
                None => c,
                Some(acc) => OpCountReport::from_layers(
                    acc.layers
                        .into_iter()
                        .zip(c.layers)
                        .map(|(mut a, b)| {
                            a.counts += b.counts;
                            a
                        })
                        .collect(),
                ),
            });
        }
        // integer mode ranks the raw mantissas, exactly like accuracy()
        let scores = match &res.output_q {
            Some(q) => Tensor { shape: q.shape.clone(), data: q.data.iter().map(|&v| v as f32).collect() },
            None => res.output.clone(),
        };
        let pred = scores.argmax_rows();
        match y {
            Some(y) => {
                hit += pred.iter().zip(y).filter(|(p, l)| p == l).count();
                total += y.len();
            }
            None => all_labelled = false,
        }
        if let Some(k) = k {
            for b in 0..scores.batch() {
                let classes: Vec<String> = top_k(scores.item(b), k).iter().map(|c| c.to_string()).collect();
                println!("{sample}\t{}", classes.join(" "));
                sample += 1;
            }
        }
    }
    let accuracy = (all_labelled && total > 0).then(|| hit as f64 / total as f64);
    if let Some(a) = accuracy {
        println!("accuracy: {a:.4} ({hit}/{total})");
    }
    let manifest = RunManifest::new(
        "infer",
        json!({ "mode": format!("{mode:?}"), "dump_activations": dump }),
        &[&m.manifest, &m.weights, input],
    )?;
    TensorStore::from_records(records)?.save(out)?;
    manifest.write_for(out)?;
    if let Some(path) = json_out {
        write_json(path, &json!({ "run": manifest, "accuracy": accuracy, "op_counts": counts }))?;
    }
    Ok(())
}

fn analyze(manifest: &Path, q: QuantArgs, csv: Option<&Path>, json_out: Option<&Path>) -> CliResult {
    let graph = with_path(manifest, load_graph(manifest))?;
    let cfg = quant_config(q, &graph)?;
    let report = count_graph(&graph, &cfg)?;
    print!("{}", report.to_table());
    println!("replaced multiplications: {:.2}%", 100.0 * report.replaced_ratio());
    if let Some(path) = csv {
        fs::write(path, report.to_csv())?;
    }
    if let Some(path) = json_out {
        let run = RunManifest::new("analyze", json!({ "quant": cfg }), &[manifest])?;
        write_json(path, &json!({ "run": run, "replaced_ratio": report.replaced_ratio(), "report": report }))?;
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, Serialize)]
struct FinetuneArgs {
    epochs: usize,
    lr: f64,
    seed: u64,
    batch_size: usize,
    calibration: usize,
}

fn curve_csv(curve: &[EpochRecord]) -> String {
    let mut s = String::from("epoch,loss,accuracy\n");
    for r in curve {
        let loss = r.loss.map(|l| format!("{l:.6}")).unwrap_or_default();
        writeln!(s, "{},{},{:.6}", r.epoch, loss, r.accuracy).unwrap();
    }
    s
}

fn finetune_cmd(
    m: &ModelArgs,
    data: &Path,
    eval: &Path,
    a: FinetuneArgs,
    q: QuantArgs,
    out: &OutModel,
    csv: Option<&Path>,
) -> CliResult {
    if a.batch_size == 0 {
        return Err("--batch-size must be at least 1".into());
    }
    let model = load_model(m)?;
    let params = finetune::import_model(&model)?;
    let cfg = quant_config(q, &model.graph)?;
    let train = dataset_from_batches(&labelled(data)?)?;
    let test = dataset_from_batches(&labelled(eval)?)?;
    let arch = params.arch;
    let task = ToyTask {
        classes: arch.classes,
        size: arch.size,
        train: train.len(),
        test: test.len(),
        calibration: a.calibration.min(train.len()),
        ..ToyTask::default()
    };
    let toy = ToyData { task, train, test };
    let tc = TrainConfig { lr: a.lr, seed: a.seed, batch_size: a.batch_size, ..TrainConfig::finetune(cfg, a.epochs) };
    let mut state = TrainState::new(params);
    let curve = finetune::finetune(&mut state, &toy, &tc)?;
    println!("{:>5} {:>10} {:>9}", "epoch", "loss", "accuracy");
    for r in &curve {
        let loss = r.loss.map(|l| format!("{l:.5}")).unwrap_or_else(|| "-".into());
        println!("{:>5} {:>10} {:>9.4}", r.epoch, loss, r.accuracy);
    }
    let calib: Vec<Tensor> = toy.train.head(toy.task.calibration).batches(64).into_iter().map(|(x, _)| x).collect();
    let trained = finetune::export_model(&state.params, &calib)?;
    let manifest =
        RunManifest::new("finetune", json!({ "quant": cfg, "train": a }), &[&m.manifest, &m.weights, data, eval])?;
    save_model(&trained, out, &manifest)?;
    if let Some(path) = csv {
        fs::write(path, curve_csv(&curve))?;
    }
    Ok(())
}

struct ReportRow {
    name: String,
    bits: u8,
    n: usize,
    error: f64,
    search_error: f64,
    accuracy: Option<f64>,
    float_accuracy: Option<f64>,
}

fn opt(v: Option<f64>) -> String {
    v.map(|v| format!("{v:.4}")).unwrap_or_else(|| "-".into())
}

fn report(artifacts: &[PathBuf], csv: Option<&Path>, markdown: bool) -> CliResult {
    let mut rows = Vec::new();
    for path in artifacts {
        let text = with_path(path, fs::read_to_string(path))?;
        let a: QuantizeArtifact =
            serde_json::from_str(&text).map_err(|e| format!("{}: malformed artifact: {e}", path.display()))?;
        rows.push(ReportRow {
            name: path.display().to_string(),
            bits: a.report.weight_bits,
            n: a.report.cluster_size,
            error: a.report.total_error,
            search_error: a.report.total_search_error,
            accuracy: a.accuracy,
            float_accuracy: a.float_accuracy,
        });
    }
    rows.sort_by(|a, b| (a.bits, a.n).cmp(&(b.bits, b.n)).then_with(|| a.name.cmp(&b.name)));
    let header = ["artifact", "bits", "N", "total_error", "search_error", "accuracy", "float_accuracy"];
    let cells: Vec<[String; 7]> = rows
        .iter()
        .map(|r| {
            [
                r.name.clone(),
                r.bits.to_string(),
                r.n.to_string(),
                format!("{:.6e}", r.error),
                format!("{:.6e}", r.search_error),
                opt(r.accuracy),
                opt(r.float_accuracy),
            ]
        })
        .collect();
    if markdown {
        println!("| {} |", header.join(" | "));
        println!("|{}", "---|".repeat(header.len()));
        for c in &cells {
            println!("| {} |", c.join(" | "));
        }
    } else {
        let w = cells.iter().map(|c| c[0].len()).max().unwrap_or(0).max(8);
        let line = |c: &[&str]| {
            format!("{:<w$} {:>4} {:>6} {:>14} {:>14} {:>9} {:>14}", c[0], c[1], c[2], c[3], c[4], c[5], c[6])
        };
        println!("{}", line(&header));
        for c in &cells {
            println!("{}", line(&c.iter().map(String::as_str).collect::<Vec<_>>()));
        }
    }
    if let Some(path) = csv {
        let mut s = header.join(",") + "\n";
        for c in &cells {
            s += &(c.join(",") + "\n");
        }
        fs::write(path, s)?;
    }
    Ok(())
}

fn toy(out_dir: &Path, seed: u64, epochs: usize, train: usize, test: usize) -> CliResult {
    let task = ToyTask { seed, train, test, ..ToyTask::default() };
    if task.calibration > train {
        return Err(format!("--train must be at least {} (the calibration set)", task.calibration).into());
    }
    let data = task.generate()?;
    fs::create_dir_all(out_dir)?;
    data.train.to_store(64)?.save(out_dir.join("train.qntz"))?;
    data.train.head(task.calibration).to_store(64)?.save(out_dir.join("calib.qntz"))?;
    data.test.to_store(250)?.save(out_dir.join("test.qntz"))?;
    let init = finetune::toy_init(ToyArch::standard(), seed);
    let cfg = TrainConfig { seed, ..TrainConfig::float(epochs) };
    let (state, curve) = finetune::pretrain(&data, init, &cfg)?;
    println!("{:>5} {:>10} {:>9}", "epoch", "loss", "accuracy");
    for r in &curve {
        let loss = r.loss.map(|l| format!("{l:.5}")).unwrap_or_else(|| "-".into());
        println!("{:>5} {:>10} {:>9.4}", r.epoch, loss, r.accuracy);
    }
    let calib: Vec<Tensor> = data.train.head(task.calibration).batches(64).into_iter().map(|(x, _)| x).collect();
    let model = finetune::export_model(&state.params, &calib)?;
    let out = OutModel { out_manifest: out_dir.join("model.manifest"), out: out_dir.join("model.qntz") };
    let manifest = RunManifest::new("toy", json!({ "task": task, "train": cfg }), &[])?;
    save_model(&model, &out, &manifest)?;
    fs::write(out_dir.join("curve.csv"), curve_csv(&curve))?;
    Ok(())
}
