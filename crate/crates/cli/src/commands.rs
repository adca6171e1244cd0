//! Command implementations. Each returns the JSON printed on success.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::{json, Value};

use percsim_core::apps::{style_transfer, train_sr, SrConfig, SrGenerator, StyleConfig};
use percsim_core::codec::{compress, decompress, Codec};
use percsim_core::io::{load_manifest, rd_curves, write_sidecar, Cell, ManifestKind, ResultsTable, TableFormat};
use percsim_core::metric::{calibrate, cpips_distance, CalibrationConfig, MetricWeights};
use percsim_core::quality::{
    bd_delta, collect_rd_curve, psnr, ssim, two_afc_score, BdMode, LearnedCodec, RdCodec, TwoAfcTriplet,
};
use percsim_core::train::{run_phase, Dataset, DatasetConfig, TrainConfig};
use percsim_core::{Checkpoint, Error, ImageTensor, Result};

use crate::args::{Cli, Command, GlobalArgs};
use crate::plan;

pub fn dispatch(cli: &Cli) -> Result<Value> {
    let g = &cli.global;
    match &cli.command {
        Command::Train(a) => train(g, a),
        Command::Calibrate(a) => calibrate_cmd(g, a),
        Command::Distance(a) => distance(g, a),
        Command::Eval2afc(a) => eval_2afc(g, a),
        Command::RdCurve(a) => rd_curve(g, a),
        Command::Bd(a) => bd(g, a),
        Command::Compress(a) => compress_cmd(g, a),
        Command::Decompress(a) => decompress_cmd(g, a),
        Command::Style(a) => style(g, a),
        Command::SrTrain(_) => sr_train(g),
        Command::SrInfer(a) => sr_infer(g, a),
        Command::RunPlan(a) => plan::run(g, &a.plan),
        Command::ExportTables(a) => export_tables(g, a),
    }
}

// ---------------------------------------------------------------------------
// Helpers

/// Relative paths that do not exist as given resolve against the data root.
pub fn resolve(g: &GlobalArgs, path: &Path) -> PathBuf {
    match &g.data_dir {
        Some(root) if path.is_relative() && !path.exists() => root.join(path),
        _ => path.to_path_buf(),
    }
}

/// Overlay the `--config` JSON onto `defaults`; returns the merged value too.
fn load_config<T: Serialize + DeserializeOwned>(g: &GlobalArgs, defaults: T) -> Result<(T, Value)> {
    let mut base = serde_json::to_value(defaults)?;
    if let Some(path) = &g.config {
        let user: Value = serde_json::from_slice(&fs::read(path)?)?;
        merge(&mut base, user);
    }
    Ok((serde_json::from_value(base.clone())?, base))
}

fn merge(base: &mut Value, over: Value) {
    match (base, over) {
        (Value::Object(b), Value::Object(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) if slot.is_object() && v.is_object() => merge(slot, v),
                    _ => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (b, o) => *b = o,
    }
}

fn require_out(g: &GlobalArgs, what: &str) -> Result<PathBuf> {
    g.out.clone().ok_or_else(|| Error::Config(format!("{what} needs --out")))
}

fn write_artifact(path: &Path, bytes: &[u8], config: &Value, seed: u64) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    fs::write(path, bytes)?;
    write_sidecar(path, config, seed)?;
    Ok(())
}

fn save_png(path: &Path, img: &ImageTensor, config: &Value, seed: u64) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    img.save_png(path)?;
    write_sidecar(path, config, seed)?;
    Ok(())
}

fn load_codec(path: &Path) -> Result<Codec> {
    Codec::from_checkpoint(&Checkpoint::load(path)?)
}

/// Metric weights stored in the checkpoint, or all ones when absent.
fn metric_weights(codec: &Codec) -> MetricWeights {
    MetricWeights::from_params(&codec.params, codec).unwrap_or_else(|_| {
        log::warn!("checkpoint has no calibrated metric weights; using ones");
        MetricWeights::ones(codec)
    })
}

fn load_triplets(g: &GlobalArgs, manifest: &Path, kind: &str) -> Result<Vec<TwoAfcTriplet>> {
    let kind: ManifestKind = kind.parse()?;
    let records = load_manifest(resolve(g, manifest), kind)?.into_triplets()?;
    records
        .iter()
        .map(|r| r.load().map_err(|e| Error::Partial { item: r.reference.display().to_string(), source: Box::new(e) }))
        .collect()
}

fn table_format(path: &Path) -> Result<TableFormat> {
    match path.extension().and_then(|e| e.to_str()) {
        Some("json") => Ok(TableFormat::Json),
        Some("txt") | Some("md") => Ok(TableFormat::Text),
        Some("csv") => Ok(TableFormat::Csv),
        _ => Err(Error::Config(format!("cannot infer a table format from {}", path.display()))),
    }
}

fn with_dataset_root(g: &GlobalArgs, dataset: &mut DatasetConfig) {
    if let DatasetConfig::ImageDir { path, .. } = dataset {
        *path = resolve(g, path);
    }
}

// ---------------------------------------------------------------------------
// Commands

fn train(g: &GlobalArgs, a: &crate::args::TrainArgs) -> Result<Value> {
    let (mut cfg, _) = load_config(g, TrainConfig::default())?;
    if let Some(p) = &a.phase {
        cfg.phase = serde_json::from_value(Value::String(p.clone()))
            .map_err(|_| Error::Config(format!("unknown phase `{p}` (expected pretrain_cls, joint or finetune_hyper)")))?;
    }
    if let Some(e) = a.epochs {
        cfg.epochs = e;
    }
    if let Some(q) = a.quality {
        cfg.quality = q;
    }
    if let Some(s) = g.seed {
        cfg.seed = s;
    }
    if let Some(i) = &a.init {
        cfg.init = Some(i.clone());
    }
    with_dataset_root(g, &mut cfg.dataset);
    let out = require_out(g, "train")?;
    cfg.output_dir = Some(out.clone());
    let init = cfg.init.as_ref().map(Checkpoint::load).transpose()?;
    let outcome = run_phase(&cfg, init.as_ref())?;
    let config = serde_json::to_value(&cfg)?;
    for (name, ckpt) in [("last.nckp", &outcome.last), ("best.nckp", &outcome.best)] {
        write_artifact(&out.join(name), &ckpt.to_bytes()?, &config, cfg.seed)?;
    }
    let log_path = out.join("metrics.jsonl");
    if log_path.is_file() {
        write_sidecar(&log_path, &config, cfg.seed)?;
    }
    Ok(json!({
        "phase": cfg.phase,
        "epochs": outcome.log.len(),
        "last": outcome.log.last(),
        "checkpoint": out.join("last.nckp"),
        "best": out.join("best.nckp"),
    }))
}

fn calibrate_cmd(g: &GlobalArgs, a: &crate::args::CalibrateArgs) -> Result<Value> {
    let (mut cfg, _) = load_config(g, CalibrationConfig::default())?;
    if let Some(s) = g.seed {
        cfg.seed = s;
    }
    let out = require_out(g, "calibrate")?;
    let mut ckpt = Checkpoint::load(&a.model)?;
    let codec = Codec::from_checkpoint(&ckpt)?;
    let triplets = load_triplets(g, &a.manifest, &a.kind)?;
    let cal = calibrate(&codec, &triplets, &cfg)?;
    cal.weights.store_into(&mut ckpt.params);
    let calibrated = Codec::from_checkpoint(&ckpt)?;
    let score = two_afc_score(&triplets, |x, y| Ok(cpips_distance(x, y, &calibrated, &cal.weights)?.total))?;
    let config = json!({ "calibration": cfg, "model": a.model, "manifest": a.manifest });
    write_artifact(&out, &ckpt.to_bytes()?, &config, cfg.seed)?;
    Ok(json!({
        "checkpoint": out,
        "triplets": triplets.len(),
        "initial_loss": cal.losses.first(),
        "final_loss": cal.losses.last(),
        "train_2afc": score,
    }))
}

fn distance(g: &GlobalArgs, a: &crate::args::DistanceArgs) -> Result<Value> {
    let codec = load_codec(&a.model)?;
    let x = ImageTensor::load_png(resolve(g, &a.a))?;
    let y = ImageTensor::load_png(resolve(g, &a.b))?;
    let report = cpips_distance(&x, &y, &codec, &metric_weights(&codec))?;
    Ok(serde_json::to_value(report)?)
}

fn eval_2afc(g: &GlobalArgs, a: &crate::args::Eval2afcArgs) -> Result<Value> {
    if a.model.is_empty() && a.baseline.is_empty() {
        return Err(Error::Config("eval-2afc needs at least one --model or --baseline".into()));
    }
    let triplets = load_triplets(g, &a.manifest, &a.kind)?;
    let mut scores: Vec<(String, f64)> = Vec::new();
    for b in &a.baseline {
        let s = match b.as_str() {
            "psnr" => two_afc_score(&triplets, |x, y| Ok(-psnr(x, y, 1.0)?))?,
            "ssim" => two_afc_score(&triplets, |x, y| Ok(1.0 - ssim(x, y)?))?,
            other => return Err(Error::Config(format!("unknown baseline `{other}` (expected psnr or ssim)"))),
        };
        scores.push((b.to_uppercase(), s));
    }
    for m in &a.model {
        let codec = load_codec(m)?;
        let w = metric_weights(&codec);
        let s = two_afc_score(&triplets, |x, y| Ok(cpips_distance(x, y, &codec, &w)?.total))?;
        let label = m.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| m.display().to_string());
        scores.push((format!("CPIPS ({label})"), s));
    }
    let mut table = ResultsTable::new("2AFC accuracy (%)", vec![a.manifest.display().to_string()]);
    for (label, s) in &scores {
        table.push_row(label.clone(), vec![Cell::number(*s)])?;
    }
    table.mark_best();
    if let Some(out) = &g.out {
        let config = json!({ "models": a.model, "baselines": a.baseline, "manifest": a.manifest });
        write_artifact(out, &table.emit(table_format(out)?)?, &config, g.seed.unwrap_or(0))?;
    }
    let values: Vec<f64> = scores.iter().map(|(_, s)| *s).collect();
    let gap = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max) - values.iter().cloned().fold(f64::INFINITY, f64::min);
    Ok(json!({
        "triplets": triplets.len(),
        "scores": scores.iter().map(|(l, s)| json!({ "metric": l, "score": s })).collect::<Vec<_>>(),
        "gap": gap,
    }))
}

fn rd_curve(g: &GlobalArgs, a: &crate::args::RdCurveArgs) -> Result<Value> {
    let records = load_manifest(resolve(g, &a.images), ManifestKind::ImageDir)?.into_images()?;
    let images: Vec<(String, ImageTensor)> =
        records.iter().map(|r| Ok((r.name.clone(), ImageTensor::load_png(&r.path)?))).collect::<Result<_>>()?;
    let mut codecs = Vec::new();
    for m in &a.model {
        let ckpt = Checkpoint::load(m)?;
        let quality = ckpt.metadata.get("quality").and_then(Value::as_u64).unwrap_or(8) as u8;
        codecs.push((Codec::from_checkpoint(&ckpt)?, quality));
    }
    let learned: Vec<LearnedCodec<'_>> = codecs.iter().map(|(c, q)| LearnedCodec::new(c, *q)).collect::<Result<_>>()?;
    let refs: Vec<&dyn RdCodec> = learned.iter().map(|l| l as &dyn RdCodec).collect();
    let curve = collect_rd_curve(&a.label, &refs, &images)?;
    if let Some(out) = &g.out {
        let mut csv = String::from("label,bpp,psnr\n");
        for p in &curve.points {
            csv.push_str(&format!("{},{},{}\n", curve.label, p.bpp, p.psnr));
        }
        let config = json!({ "models": a.model, "images": a.images, "label": a.label });
        write_artifact(out, csv.as_bytes(), &config, g.seed.unwrap_or(0))?;
    }
    Ok(serde_json::to_value(curve)?)
}

fn bd(g: &GlobalArgs, a: &crate::args::BdArgs) -> Result<Value> {
    let curves = rd_curves(&load_manifest(resolve(g, &a.curves), ManifestKind::RdCsv)?.into_rd()?)?;
    let find = |label: &str| {
        curves.iter().find(|c| c.label == label).ok_or_else(|| Error::Config(format!("no curve labelled `{label}`")))
    };
    let (anchor, test) = (find(&a.anchor)?, find(&a.test)?);
    Ok(json!({
        "anchor": a.anchor,
        "test": a.test,
        "bd_rate_percent": bd_delta(anchor, test, BdMode::Rate)?,
        "bd_psnr_db": bd_delta(anchor, test, BdMode::Psnr)?,
    }))
}

fn compress_cmd(g: &GlobalArgs, a: &crate::args::CompressArgs) -> Result<Value> {
    let out = require_out(g, "compress")?;
    let codec = load_codec(&a.model)?;
    let img = ImageTensor::load_png(resolve(g, &a.input))?;
    let c = compress(&codec, &img, a.quality)?;
    let config = json!({ "model": a.model, "input": a.input, "quality": a.quality });
    write_artifact(&out, &c.bytes, &config, g.seed.unwrap_or(0))?;
    Ok(json!({
        "bytes": c.bytes.len(),
        "bpp": c.bpp(),
        "psnr": psnr(&img, &c.reconstruction, 1.0)?,
        "out": out,
    }))
}

fn decompress_cmd(g: &GlobalArgs, a: &crate::args::DecompressArgs) -> Result<Value> {
    let out = require_out(g, "decompress")?;
    let codec = load_codec(&a.model)?;
    let (img, _, header) = decompress(&codec, &fs::read(resolve(g, &a.input))?)?;
    let config = json!({ "model": a.model, "input": a.input });
    save_png(&out, &img, &config, g.seed.unwrap_or(0))?;
    Ok(json!({ "width": header.width, "height": header.height, "quality": header.quality, "out": out }))
}

fn style(g: &GlobalArgs, a: &crate::args::StyleArgs) -> Result<Value> {
    let out = require_out(g, "style")?;
    let codec = load_codec(&a.model)?;
    let (mut cfg, _) = load_config(g, StyleConfig::defaults_for(&codec))?;
    if let Some(s) = g.seed {
        cfg.seed = s;
    }
    let content = ImageTensor::load_png(resolve(g, &a.content))?;
    let style = ImageTensor::load_png(resolve(g, &a.style))?;
    let outcome = style_transfer(&content, &style, &codec, &cfg)?;
    let config = json!({ "style": cfg, "model": a.model, "content": a.content, "style_image": a.style });
    save_png(&out, &outcome.image, &config, cfg.seed)?;
    let trace_path = out.with_extension("trace.jsonl");
    let mut trace = fs::File::create(&trace_path)?;
    for s in &outcome.trace {
        writeln!(trace, "{}", serde_json::to_string(s)?)?;
    }
    write_sidecar(&trace_path, &config, cfg.seed)?;
    let (first, last) = (outcome.trace[0], outcome.trace[outcome.trace.len() - 1]);
    Ok(json!({
        "out": out,
        "trace": trace_path,
        "steps": last.step,
        "diverged": outcome.diverged,
        "initial": first,
        "final": last,
    }))
}

/// `sr-train` config: training settings plus the perceptual model and images.
#[derive(Serialize, serde::Deserialize)]
struct SrTrainFile {
    #[serde(flatten)]
    sr: SrConfig,
    /// Codec checkpoint providing the perceptual loss network.
    model: Option<PathBuf>,
    dataset: DatasetConfig,
}

fn sr_train(g: &GlobalArgs) -> Result<Value> {
    let out = require_out(g, "sr-train")?;
    let defaults = SrTrainFile { sr: SrConfig::default(), model: None, dataset: DatasetConfig::default() };
    let (mut file, _) = load_config(g, defaults)?;
    if let Some(s) = g.seed {
        file.sr.seed = s;
    }
    with_dataset_root(g, &mut file.dataset);
    let model = file.model.clone().ok_or_else(|| Error::Config("sr-train config needs `model`".into()))?;
    let codec = load_codec(&resolve(g, &model))?;
    let images = Dataset::load(&file.dataset)?.images;
    let outcome = train_sr(&images, &codec, &file.sr)?;
    let config = serde_json::to_value(&file)?;
    fs::create_dir_all(&out)?;
    let gen_path = out.join("generator.nckp");
    let ckpt = outcome.generator.to_checkpoint(json!({ "sr": file.sr }));
    write_artifact(&gen_path, &ckpt.to_bytes()?, &config, file.sr.seed)?;
    let log_path = out.join("metrics.jsonl");
    let mut log = String::new();
    for e in &outcome.log {
        log.push_str(&serde_json::to_string(e)?);
        log.push('\n');
    }
    write_artifact(&log_path, log.as_bytes(), &config, file.sr.seed)?;
    Ok(json!({
        "generator": gen_path,
        "epochs": outcome.log.len(),
        "last": outcome.log.last(),
        "baseline_psnr": outcome.baseline_psnr,
    }))
}

fn sr_infer(g: &GlobalArgs, a: &crate::args::SrInferArgs) -> Result<Value> {
    let out = require_out(g, "sr-infer")?;
    let generator = SrGenerator::from_checkpoint(&Checkpoint::load(&a.model)?)?;
    let lr = ImageTensor::load_png(resolve(g, &a.input))?;
    let sr = generator.upscale(&lr)?;
    let config = json!({ "model": a.model, "input": a.input });
    save_png(&out, &sr, &config, g.seed.unwrap_or(0))?;
    Ok(json!({ "out": out, "width": sr.width(), "height": sr.height() }))
}

fn export_tables(g: &GlobalArgs, a: &crate::args::ExportTablesArgs) -> Result<Value> {
    let format: TableFormat = a.format.parse()?;
    let mut rendered = Vec::new();
    for path in &a.input {
        let table = ResultsTable::parse(&fs::read(resolve(g, path))?, table_format(path)?)?;
        rendered.extend(table.emit(format)?);
        rendered.push(b'\n');
    }
    match &g.out {
        Some(out) => {
            let config = json!({ "inputs": a.input, "format": a.format });
            write_artifact(out, &rendered, &config, g.seed.unwrap_or(0))?;
            Ok(json!({ "tables": a.input.len(), "out": out }))
        }
        None => Ok(json!({ "tables": a.input.len(), "rendered": String::from_utf8_lossy(&rendered) })),
    }
}
