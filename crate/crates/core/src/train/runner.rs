//! Epoch loop, validation, metrics log and checkpoints.

use std::io::Write;
use std::path::Path;

use percsim_autograd::{clip_grad_norm, Adam, Graph, ParamBinding, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;

use super::config::{Phase, TrainConfig};
use super::data::Dataset;
use super::head::{accuracy_topk, ClassifierHead};
use super::loss::{batch_loss, LossParts, ObjectiveWeights};
use crate::checkpoint::Checkpoint;
use crate::codec::entropy::{self, FactorizedPrior, LikelihoodModel};
use crate::codec::Codec;
use crate::error::{Error, Result};
use crate::image::ImageTensor;
use crate::quality::psnr;

/// One line of the metrics log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean training objective over the epoch's batches.
    pub loss: f64,
    pub parts: LossParts,
    pub val_loss: Option<f64>,
    pub top1: Option<f64>,
    pub top5: Option<f64>,
    pub bpp: Option<f64>,
    pub psnr: Option<f64>,
}

pub struct TrainOutcome {
    /// Weights after the last epoch.
    pub last: Checkpoint,
    /// Weights with the lowest validation objective (training objective when
    /// there is no validation split).
    pub best: Checkpoint,
    pub log: Vec<EpochRecord>,
}

/// Validation summary of a codec on a labelled set (round quantization).
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub loss: f64,
    pub parts: LossParts,
    pub top1: Option<f64>,
    pub top5: Option<f64>,
    pub bpp: f64,
    pub psnr: f64,
}

fn trainable(phase: Phase) -> impl Fn(&str) -> bool {
    move |name: &str| match phase {
        Phase::PretrainCls => name.starts_with("g_a.") || name.starts_with("cls."),
        Phase::Joint | Phase::FinetuneHyper => !name.starts_with("metric."),
    }
}

fn stack(ds: &Dataset, idx: &[usize]) -> Result<Tensor> {
    let imgs: Vec<&ImageTensor> = idx.iter().map(|&i| &ds.images[i]).collect();
    ImageTensor::stack(&imgs)
}

/// Starting codec for a phase, with a classifier head when one is needed.
fn starting_point(cfg: &TrainConfig, init: Option<&Checkpoint>, num_classes: usize) -> Result<Codec> {
    let mut codec = match init {
        Some(ckpt) => Codec::from_checkpoint(ckpt)?,
        None if cfg.phase == Phase::PretrainCls => Codec::init(cfg.encoder.clone(), cfg.seed)?,
        None => return Err(Error::Config("the joint and fine-tuning phases need an initial checkpoint".into())),
    };
    let wants_head = cfg.phase == Phase::PretrainCls || cfg.beta_cls > 0.0;
    match ClassifierHead::from_params(&codec.params) {
        Some(h) if h.num_classes != num_classes || h.latent_channels != codec.spec.latent_channels => {
            return Err(Error::Config(format!(
                "checkpoint head has {} classes, dataset has {num_classes}",
                h.num_classes
            )))
        }
        Some(_) => {}
        None if wants_head => {
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0xC1A5);
            ClassifierHead::new(codec.spec.latent_channels, num_classes)?.init(&mut codec.params, &mut rng);
        }
        None => {}
    }
    Ok(codec)
}

fn metadata(cfg: &TrainConfig, num_classes: usize, epoch: usize) -> serde_json::Value {
    json!({
        "quality": cfg.quality,
        "lambda_rd": cfg.lambda(),
        "beta_cls": cfg.beta_cls,
        "phase": cfg.phase,
        "num_classes": num_classes,
        "epoch": epoch,
        "seed": cfg.seed,
    })
}

/// Train one phase. Zero epochs return `init` untouched with an empty log.
pub fn run_phase(cfg: &TrainConfig, init: Option<&Checkpoint>) -> Result<TrainOutcome> {
    cfg.validate()?;
    let data = Dataset::load(&cfg.dataset)?;
    run_phase_on(cfg, init, &data)
}

/// [`run_phase`] on an already loaded dataset.
pub fn run_phase_on(cfg: &TrainConfig, init: Option<&Checkpoint>, data: &Dataset) -> Result<TrainOutcome> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::Config("dataset is empty".into()));
    }
    let mut codec = starting_point(cfg, init, data.num_classes)?;
    if cfg.epochs == 0 {
        let ckpt = init.cloned().unwrap_or_else(|| codec.to_checkpoint(metadata(cfg, data.num_classes, 0)));
        return Ok(TrainOutcome { last: ckpt.clone(), best: ckpt, log: Vec::new() });
    }
    let (train, val) = data.split(cfg.validation_fraction);
    let head = ClassifierHead::from_params(&codec.params);
    let weights = ObjectiveWeights { phase: cfg.phase, lambda: cfg.lambda(), beta: cfg.beta_cls };
    let mut adam = Adam::new(cfg.lr);
    let mut order_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut noise_rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(1));
    let mut log_file = match &cfg.output_dir {
        Some(dir) => {
            std::fs::create_dir_all(dir)?;
            Some(std::fs::OpenOptions::new().create(true).append(true).open(dir.join("metrics.jsonl"))?)
        }
        None => None,
    };
    let mut log = Vec::new();
    let mut best: Option<(f64, Checkpoint)> = None;
    let mut last = codec.to_checkpoint(metadata(cfg, data.num_classes, 0));

    for epoch in 1..=cfg.epochs {
        adam.lr = cfg.lr_schedule.lr(cfg.lr, epoch, cfg.epochs);
        let mut sum = 0.0;
        let mut parts_sum = LossParts::default();
        let mut seen = 0usize;
        for idx in train.batches(cfg.batch, &mut order_rng) {
            let x = stack(&train, &idx)?;
            let labels: Vec<usize> = idx.iter().map(|&i| train.labels[i]).collect();
            let mut grads = {
                let g = Graph::new();
                let p = ParamBinding::new(&g, &codec.params, trainable(cfg.phase));
                let out = batch_loss(&codec, head.as_ref(), &p, &x, &labels, weights, &mut noise_rng);
                let parts = out.parts();
                parts.check(epoch)?;
                let total = out.total.item();
                if !total.is_finite() {
                    return Err(Error::TrainingAborted { epoch, part: "total".into() });
                }
                let n = idx.len() as f64;
                sum += total * n;
                parts_sum.rate += parts.rate * n;
                parts_sum.distortion += parts.distortion * n;
                parts_sum.cls += parts.cls * n;
                seen += idx.len();
                p.gradients(&g.backward(out.total))
            };
            if grads.values().any(|t| !t.all_finite()) {
                return Err(Error::TrainingAborted { epoch, part: "gradient".into() });
            }
            clip_grad_norm(&mut grads, cfg.grad_clip);
            adam.step(&mut codec.params, &grads);
        }
        let n = seen.max(1) as f64;
        let parts = LossParts { rate: parts_sum.rate / n, distortion: parts_sum.distortion / n, cls: parts_sum.cls / n };
        let loss = sum / n;
        let eval = if val.is_empty() { None } else { Some(evaluate(&codec, head.as_ref(), &val, cfg)?) };
        let record = EpochRecord {
            epoch,
            loss,
            parts,
            val_loss: eval.as_ref().map(|e| e.loss),
            top1: eval.as_ref().and_then(|e| e.top1),
            top5: eval.as_ref().and_then(|e| e.top5),
            bpp: eval.as_ref().filter(|_| cfg.phase != Phase::PretrainCls).map(|e| e.bpp),
            psnr: eval.as_ref().filter(|_| cfg.phase != Phase::PretrainCls).map(|e| e.psnr),
        };
        log::info!("epoch {epoch}: loss {loss:.4} top1 {:?}", record.top1);
        if let Some(f) = log_file.as_mut() {
            writeln!(f, "{}", serde_json::to_string(&record)?)?;
            f.flush()?;
        }
        last = codec.to_checkpoint(metadata(cfg, data.num_classes, epoch));
        let score = record.val_loss.unwrap_or(loss);
        if best.as_ref().is_none_or(|(b, _)| score < *b) {
            best = Some((score, last.clone()));
            if let Some(dir) = &cfg.output_dir {
                last.save(dir.join("best.nckp"))?;
            }
        }
        if let Some(dir) = &cfg.output_dir {
            last.save(dir.join("last.nckp"))?;
        }
        log.push(record);
    }
    let best = best.map(|(_, c)| c).unwrap_or_else(|| last.clone());
    Ok(TrainOutcome { last, best, log })
}

/// Round-mode validation of a codec on a labelled set.
pub fn evaluate(codec: &Codec, head: Option<&ClassifierHead>, data: &Dataset, cfg: &TrainConfig) -> Result<Evaluation> {
    let prior = FactorizedPrior::from_params(&codec.params)?;
    let mut all_logits = Vec::new();
    let mut parts = LossParts::default();
    let mut psnr_sum = 0.0;
    let n = data.len() as f64;
    let lik_bits = |t: &Tensor| -t.data().iter().map(|p| p.log2()).sum::<f64>();
    for idx in data.sequential(cfg.batch) {
        let x = stack(data, &idx)?;
        let labels: Vec<usize> = idx.iter().map(|&i| data.labels[i]).collect();
        let g = Graph::inference();
        let p = ParamBinding::frozen(&g, &codec.params);
        let y = codec.analysis(&p, g.constant(x.clone()), None).y;
        if let Some(h) = head {
            let logits = h.logits(&p, y);
            parts.cls += logits.cross_entropy(&labels).item() * idx.len() as f64;
            all_logits.push(logits.value().as_ref().clone());
        }
        if cfg.phase == Phase::PretrainCls {
            continue;
        }
        let y_hat = y.value().map(f64::round_ties_even);
        let z_hat = codec.hyper_analysis(&p, y).value().map(f64::round_ties_even);
        let sigma = codec.hyper_synthesis(&p, g.constant(z_hat.clone())).value();
        let x_hat = codec.synthesis(&p, g.constant(y_hat.clone())).value();
        for (b, &i) in idx.iter().enumerate() {
            let one = |t: &Tensor| {
                let s = &t.shape()[1..];
                let plane: usize = s.iter().product();
                Tensor::new(s, t.data()[b * plane..(b + 1) * plane].to_vec())
            };
            let (yb, zb, sb) = (one(&y_hat), one(&z_hat), one(&sigma));
            let bits = lik_bits(&entropy::likelihood(&yb, &LikelihoodModel::Gaussian(&sb))?)
                + lik_bits(&entropy::likelihood(&zb, &LikelihoodModel::Factorized(&prior))?);
            let img = &data.images[i];
            let rec = ImageTensor::from_batch(&x_hat, b)?.clamp01();
            parts.rate += bits / img.pixels() as f64;
            let mse = img.mse(&rec)?;
            parts.distortion += mse;
            psnr_sum += psnr(img, &rec, 1.0)?;
        }
    }
    parts.rate /= n;
    parts.distortion /= n;
    parts.cls /= n;
    let (top1, top5) = match head {
        Some(h) => {
            let refs: Vec<&Tensor> = all_logits.iter().collect();
            let logits = Tensor::concat(&refs, 0);
            let k5 = 5.min(h.num_classes);
            (Some(accuracy_topk(&logits, &data.labels, 1)?), Some(accuracy_topk(&logits, &data.labels, k5)?))
        }
        None => (None, None),
    };
    let loss = match cfg.phase {
        Phase::PretrainCls => parts.cls,
        _ => parts.total(cfg.lambda(), cfg.beta_cls),
    };
    Ok(Evaluation { loss, parts, top1, top5, bpp: parts.rate, psnr: psnr_sum / n })
}

/// Read a metrics log back, one record per line.
pub fn read_log(path: impl AsRef<Path>) -> Result<Vec<EpochRecord>> {
    let text = std::fs::read_to_string(path)?;
    text.lines().filter(|l| !l.trim().is_empty()).map(|l| Ok(serde_json::from_str(l)?)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::codec::EncoderSpec;
    use crate::train::config::DatasetConfig;

    fn tiny_cfg(phase: Phase, epochs: usize) -> TrainConfig {
        TrainConfig {
            phase,
            epochs,
            lr: 1e-3,
            batch: 4,
            dataset: DatasetConfig::Synthetic { images: 12, size: 16, classes: 3, seed: 1 },
            validation_fraction: 0.25,
            encoder: EncoderSpec::cpips_stages(&[4], 2, 4, 4),
            ..TrainConfig::default()
        }
    }

    #[test]
    fn zero_epochs_is_identity() {
        let cfg = tiny_cfg(Phase::Joint, 0);
        let init = Codec::init(cfg.encoder.clone(), 3).unwrap().to_checkpoint(json!({}));
        let out = run_phase(&cfg, Some(&init)).unwrap();
        assert!(out.log.is_empty());
        assert_eq!(out.last, init);
    }

    #[test]
    fn joint_needs_init() {
        assert!(matches!(run_phase(&tiny_cfg(Phase::Joint, 1), None), Err(Error::Config(_))));
    }

    #[test]
    fn runs_are_reproducible_and_logged() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = tiny_cfg(Phase::PretrainCls, 2);
        cfg.output_dir = Some(dir.path().to_path_buf());
        let a = run_phase(&cfg, None).unwrap();
        cfg.output_dir = None;
        let b = run_phase(&cfg, None).unwrap();
        assert_eq!(a.log[0].loss, b.log[0].loss);
        assert_eq!(read_log(dir.path().join("metrics.jsonl")).unwrap(), a.log);
        assert!(dir.path().join("best.nckp").exists() && dir.path().join("last.nckp").exists());

        let mut joint = tiny_cfg(Phase::Joint, 1);
        joint.lambda_rd = Some(0.01);
        let out = run_phase(&joint, Some(&a.last)).unwrap();
        let r = &out.log[0];
        assert!(r.bpp.unwrap() > 0.0 && r.psnr.unwrap() > 0.0 && r.top1.is_some());
    }
}
