//! Supervised training of a built detector on labelled images.

mod loss;
mod optim;
mod synth;

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

pub use loss::{detection_loss, diou_loss, gt_boxes, loss_and_grad, scale_for, GtBox, LossWeights};
pub use optim::{sgd_step, SgdConfig, SgdState};
pub use synth::{gen_synth_dataset, gen_synth_with, SynthConfig};

use crate::data::LabeledImage;
use crate::error::{Error, Result};
use crate::metrics::{map50, Detection, EvalReport, GroundTruth, Scene};
use crate::model::{decode, DecodeConfig, GraphSpec, Model, Variant, STRIDES};
use crate::nn::{save_checkpoint, Ctx, ParamStore};
use crate::tensor::{Tape, Tensor};

/// Keys understood by [`TrainConfig::parse`].
pub const TRAIN_KEYS: [&str; 12] = [
    "lr",
    "warmup_epochs",
    "momentum",
    "weight_decay",
    "batch_size",
    "patience",
    "max_epochs",
    "seed",
    "target_map",
    "box_weight",
    "obj_weight",
    "cls_weight",
];

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub lr: f64,
    pub warmup_epochs: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    /// Consecutive epochs without a new best validation mAP before stopping.
    pub patience: usize,
    pub max_epochs: usize,
    pub seed: u64,
    /// Stop as soon as validation mAP@0.5 reaches this value.
    pub target_map: Option<f64>,
    pub loss: LossWeights,
    pub decode: DecodeConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let sgd = SgdConfig::default();
        TrainConfig {
            lr: sgd.lr,
            warmup_epochs: sgd.warmup_epochs,
            momentum: sgd.momentum,
            weight_decay: sgd.weight_decay,
            batch_size: 16,
            patience: 50,
            max_epochs: 200,
            seed: 0,
            target_map: None,
            loss: LossWeights::default(),
            decode: DecodeConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn sgd(&self) -> SgdConfig {
        SgdConfig {
            lr: self.lr,
            momentum: self.momentum,
            weight_decay: self.weight_decay,
            warmup_epochs: self.warmup_epochs,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let reals = [
            ("lr", self.lr),
            ("warmup_epochs", self.warmup_epochs),
            ("momentum", self.momentum),
            ("weight_decay", self.weight_decay),
        ];
        for (name, v) in reals {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be positive, got {v}")));
            }
        }
        if self.batch_size == 0 || self.patience == 0 || self.max_epochs == 0 {
            return Err(Error::Config("batch_size, patience and max_epochs must be >= 1".into()));
        }
        Ok(())
    }

    /// Applies `key = value` lines over the defaults. Graph keys are skipped
    /// so one file can configure both.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = TrainConfig::default();
        for (line, key, value) in crate::model::config_pairs(text)? {
            let bad = |msg: String| Error::Parse {
                path: "<train config>".into(),
                line,
                msg: format!("{key}: {msg}"),
            };
            let num = |v: &str| v.parse::<f64>().map_err(|e| bad(e.to_string()));
            let int = |v: &str| v.parse::<usize>().map_err(|e| bad(e.to_string()));
            match key.as_str() {
                "lr" => cfg.lr = num(&value)?,
                "warmup_epochs" => cfg.warmup_epochs = num(&value)?,
                "momentum" => cfg.momentum = num(&value)?,
                "weight_decay" => cfg.weight_decay = num(&value)?,
                "batch_size" => cfg.batch_size = int(&value)?,
                "patience" => cfg.patience = int(&value)?,
                "max_epochs" => cfg.max_epochs = int(&value)?,
                "seed" => cfg.seed = value.parse().map_err(|e: std::num::ParseIntError| bad(e.to_string()))?,
                "target_map" => cfg.target_map = Some(num(&value)?),
                "box_weight" => cfg.loss.boxes = num(&value)?,
                "obj_weight" => cfg.loss.objectness = num(&value)?,
                "cls_weight" => cfg.loss.class = num(&value)?,
                k if crate::model::GRAPH_KEYS.contains(&k) => {}
                other => return Err(bad(format!("unknown key `{other}`"))),
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Input tensor and pixel targets of one image.
#[derive(Debug, Clone)]
pub struct Sample {
    pub input: Tensor,
    pub targets: Vec<GtBox>,
}

impl Sample {
    pub fn from_labeled(item: &LabeledImage) -> Self {
        Sample {
            input: item.image.to_tensor(),
            targets: gt_boxes(&item.annotations, item.image.width, item.image.height),
        }
    }
}

/// Validation-side patience counter.
#[derive(Debug, Clone, PartialEq)]
pub struct EarlyStop {
    pub patience: usize,
    pub best: Option<(usize, f64)>,
}

impl EarlyStop {
    pub fn new(patience: usize) -> Self {
        EarlyStop { patience, best: None }
    }

    /// Records the metric of 1-based `epoch`; returns `(improved, stop)`.
    pub fn update(&mut self, epoch: usize, metric: f64) -> (bool, bool) {
        let improved = self.best.is_none_or(|(_, b)| metric > b);
        if improved {
            self.best = Some((epoch, metric));
        }
        let best_epoch = self.best.map_or(epoch, |(e, _)| e);
        (improved, epoch - best_epoch >= self.patience)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Rate used for the last step of the epoch.
    pub lr: f64,
    /// Mean per-image loss over the epoch.
    pub train_loss: f64,
    pub val_map50: f64,
}

pub fn history_csv(history: &[EpochRecord]) -> String {
    let mut s = String::from("epoch,lr,train_loss,val_map50\n");
    for r in history {
        let _ = writeln!(s, "{},{:.6e},{:.6},{:.6}", r.epoch, r.lr, r.train_loss, r.val_map50);
    }
    s
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StopReason {
    MaxEpochs,
    Patience,
    TargetReached,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub history: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_map50: f64,
    pub best_params: ParamStore,
    pub stop: StopReason,
}

/// Worker pool sized by `FABME_THREADS`, else the available cores.
pub fn thread_pool() -> Result<rayon::ThreadPool> {
    let threads = std::env::var("FABME_THREADS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()));
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| Error::Invalid(format!("thread pool: {e}")))
}

/// Loss and per-parameter gradients of one image.
pub fn sample_gradients(model: &Model, sample: &Sample, weights: &LossWeights) -> Result<(f64, Vec<Vec<f64>>)> {
    let tape = Tape::new();
    let ctx = Ctx::new(&tape, &model.params, true);
    let heads = model.forward(&ctx, tape.constant(sample.input.clone()))?;
    let loss = detection_loss(
        &tape,
        &heads,
        &STRIDES,
        std::slice::from_ref(&sample.targets),
        model.spec.num_classes,
        weights,
    )?;
    let value = loss.value().data()[0];
    let grads = tape.backward(loss)?;
    Ok((value, ctx.param_grads(&grads)))
}

/// Detections of every image, paired with its ground truth.
pub fn predict(model: &Model, items: &[LabeledImage], cfg: &DecodeConfig) -> Result<Vec<Scene>> {
    items
        .iter()
        .map(|item| {
            let heads = model.infer(&item.image.to_tensor())?;
            let detections: Vec<Detection> = decode(&heads, &STRIDES, model.spec.num_classes, cfg)?.remove(0);
            let ground_truth = gt_boxes(&item.annotations, item.image.width, item.image.height)
                .into_iter()
                .map(|g| GroundTruth {
                    class_id: g.class_id,
                    bbox: g.bbox,
                })
                .collect();
            Ok(Scene {
                detections,
                ground_truth,
            })
        })
        .collect()
}

pub fn evaluate(model: &Model, items: &[LabeledImage], cfg: &DecodeConfig) -> Result<EvalReport> {
    map50(&predict(model, items, cfg)?, model.spec.num_classes)
}

/// Where [`train`] writes its artifacts.
#[derive(Debug, Clone)]
pub struct TrainOutput {
    pub dir: PathBuf,
}

impl TrainOutput {
    pub fn best_checkpoint(&self) -> PathBuf {
        self.dir.join("best.ckpt")
    }

    pub fn history(&self) -> PathBuf {
        self.dir.join("history.csv")
    }
}

/// Writes a checkpoint and its `<path>.graph` sidecar.
pub fn save_model(path: &Path, spec: &GraphSpec, params: &ParamStore) -> Result<()> {
    save_checkpoint(path, &params.records())?;
    std::fs::write(graph_sidecar(path), spec.to_config())?;
    Ok(())
}

/// Rebuilds a model from a checkpoint and its sidecar.
pub fn load_model(path: &Path) -> Result<Model> {
    let spec = GraphSpec::load(&graph_sidecar(path))?;
    let mut model = Model::build(spec)?;
    model.params.load(crate::nn::load_checkpoint(path)?)?;
    Ok(model)
}

pub fn graph_sidecar(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".graph");
    PathBuf::from(s)
}

/// Trains `model` in place, keeping the best-validation parameters.
///
/// `on_epoch` sees every record as it is produced. On a non-finite loss
/// the parameters before the failing step are saved as `last_finite.ckpt`
/// (when `out` is set) and training aborts.
pub fn train(
    model: &mut Model,
    train_set: &[LabeledImage],
    val_set: &[LabeledImage],
    cfg: &TrainConfig,
    out: Option<&TrainOutput>,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train_set.is_empty() || val_set.is_empty() {
        return Err(Error::Invalid("training and validation sets must be non-empty".into()));
    }
    if let Some(o) = out {
        std::fs::create_dir_all(&o.dir)?;
    }
    let samples: Vec<Sample> = train_set.iter().map(Sample::from_labeled).collect();
    let sgd = cfg.sgd();
    let mut state = SgdState::new(&model.params);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let pool = thread_pool()?;
    let mut order: Vec<usize> = (0..samples.len()).collect();
    let iters = samples.len().div_ceil(cfg.batch_size);
    let mut stopper = EarlyStop::new(cfg.patience);
    let mut history = Vec::new();
    let mut best_params = model.params.clone();
    let mut stop = StopReason::MaxEpochs;

    for epoch in 1..=cfg.max_epochs {
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut lr = 0.0;
        for (it, batch) in order.chunks(cfg.batch_size).enumerate() {
            let progress = (epoch - 1) as f64 + (it + 1) as f64 / iters as f64;
            lr = sgd.lr_at(progress);
            let m: &Model = model;
            let results: Vec<Result<(f64, Vec<Vec<f64>>)>> = pool.install(|| {
                batch
                    .par_iter()
                    .map(|&i| sample_gradients(m, &samples[i], &cfg.loss))
                    .collect()
            });
            let mut grads: Option<Vec<Vec<f64>>> = None;
            let mut batch_loss = 0.0;
            for r in results {
                let (l, g) = r.map_err(|e| diverged(epoch, e))?;
                batch_loss += l;
                match &mut grads {
                    None => grads = Some(g),
                    Some(acc) => {
                        for (a, b) in acc.iter_mut().zip(&g) {
                            for (x, y) in a.iter_mut().zip(b) {
                                *x += y;
                            }
                        }
                    }
                }
            }
            // batch mean, so the step size does not scale with batch_size
            let mut grads = grads.expect("batches are non-empty");
            let inv = 1.0 / batch.len() as f64;
            grads.iter_mut().flatten().for_each(|g| *g *= inv);
            let step = if batch_loss.is_finite() {
                sgd_step(&mut model.params, &grads, &mut state, &sgd, lr)
            } else {
                Err(Error::NonFinite {
                    op: "detection_loss".into(),
                })
            };
            if let Err(e) = step {
                if let Some(o) = out {
                    save_model(&o.dir.join("last_finite.ckpt"), &model.spec, &model.params)?;
                }
                return Err(diverged(epoch, e));
            }
            loss_sum += batch_loss;
        }

        let val_map50 = evaluate(model, val_set, &cfg.decode)?.map50;
        let record = EpochRecord {
            epoch,
            lr,
            train_loss: loss_sum / samples.len() as f64,
            val_map50,
        };
        on_epoch(&record);
        history.push(record);
        let (improved, patience_hit) = stopper.update(epoch, val_map50);
        if improved {
            best_params = model.params.clone();
            if let Some(o) = out {
                save_model(&o.best_checkpoint(), &model.spec, &best_params)?;
            }
        }
        if let Some(o) = out {
            std::fs::write(o.history(), history_csv(&history))?;
        }
        if cfg.target_map.is_some_and(|t| val_map50 >= t) {
            stop = StopReason::TargetReached;
            break;
        }
        if patience_hit {
            stop = StopReason::Patience;
            break;
        }
    }
    let (best_epoch, best_map50) = stopper.best.expect("at least one epoch ran");
    Ok(TrainOutcome {
        history,
        best_epoch,
        best_map50,
        best_params,
        stop,
    })
}

fn diverged(epoch: usize, e: Error) -> Error {
    Error::Diverged {
        epoch,
        msg: e.to_string(),
    }
}

/// One row of an ablation run.
#[derive(Debug, Clone, PartialEq)]
pub struct AblationRow {
    pub label: String,
    pub emca: bool,
    pub vmamba: String,
    pub params: usize,
    pub best_map50: f64,
    pub epochs: usize,
}

/// `model,emca,vmamba,params,map50_pct,epochs` rows.
pub fn ablation_csv(rows: &[AblationRow]) -> String {
    let mut s = String::from("model,emca,vmamba,params,map50_pct,epochs\n");
    for r in rows {
        let _ = writeln!(
            s,
            "{},{},{},{},{:.2},{}",
            r.label,
            r.emca,
            r.vmamba,
            r.params,
            r.best_map50 * 100.0,
            r.epochs
        );
    }
    s
}

/// The nano ablation ladder: baseline, then EMCA, then C2F-VMamba at C2F3.
pub const ABLATION_LADDER: [Variant; 3] = [Variant::Baseline, Variant::EmcaOnly, Variant::FabMe];

/// Trains `base` under each variant with identical data, config and seed.
///
/// With `out` set, each run writes into `out/<variant>/`.
pub fn run_ablation(
    base: &GraphSpec,
    variants: &[Variant],
    train_set: &[LabeledImage],
    val_set: &[LabeledImage],
    cfg: &TrainConfig,
    out: Option<&Path>,
    mut on_epoch: impl FnMut(Variant, &EpochRecord),
) -> Result<Vec<AblationRow>> {
    variants
        .iter()
        .map(|&variant| {
            let mut model = Model::build(base.clone().with_variant(variant))?;
            let dir = out.map(|o| TrainOutput {
                dir: o.join(variant.to_string()),
            });
            let outcome = train(&mut model, train_set, val_set, cfg, dir.as_ref(), |r| {
                on_epoch(variant, r)
            })?;
            let (emca, vmamba) = variant.toggles();
            Ok(AblationRow {
                label: variant.to_string(),
                emca,
                vmamba: vmamba.to_string(),
                params: model.count_params(),
                best_map50: outcome.best_map50,
                epochs: outcome.history.len(),
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn patience_stops_exactly() {
        let mut s = EarlyStop::new(50);
        assert_eq!(s.update(1, 0.3), (true, false));
        for e in 2..51 {
            assert_eq!(s.update(e, 0.2), (false, false), "epoch {e}");
        }
        assert_eq!(s.update(51, 0.3), (false, true));
    }

    #[test]
    fn config_parsing() {
        let cfg = TrainConfig::parse("lr = 0.01\nmax_epochs = 3\nvariant = fabme\ntarget_map = 0.5").unwrap();
        assert_eq!(cfg.lr, 0.01);
        assert_eq!(cfg.max_epochs, 3);
        assert_eq!(cfg.target_map, Some(0.5));
        assert!(TrainConfig::parse("patience = 0").is_err());
        assert!(TrainConfig::parse("lrate = 1").is_err());
    }

    #[test]
    fn stock_defaults() {
        let c = TrainConfig::default();
        assert_eq!(
            (
                c.lr,
                c.warmup_epochs,
                c.momentum,
                c.weight_decay,
                c.batch_size,
                c.patience
            ),
            (0.005, 3.0, 0.937, 1e-4, 16, 50)
        );
    }
}
