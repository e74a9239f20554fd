//! Epoch-level training and evaluation over annotated images.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::{augment, make_batch, random_ops, AnnotatedImage};
use crate::detnet::{evaluate_loss, train_step, LossConfig, Model, StepStats, INPUT_MULTIPLE};
use crate::error::Result;
use crate::nn::{Adam, AdamConfig};
use crate::postprocess::{decode, map_range_at, nms, Detection, EvalResult, GroundTruth, CONF_THRESHOLD, NMS_IOU_THRESHOLD};
use crate::tensor::Real;

/// Score floor for detections entering AP computation.
pub const AP_CONF_THRESHOLD: f64 = 0.001;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
    /// Apply a random augmentation chain to every sample.
    pub augment: bool,
    pub nms_iou: f64,
    /// Evaluate mAP every this many epochs (and always on the last); 0 disables.
    pub eval_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 100,
            batch_size: 8,
            lr: AdamConfig::default().lr,
            seed: 0,
            augment: false,
            nms_iou: NMS_IOU_THRESHOLD,
            eval_every: 10,
        }
    }
}

/// One line of the training log.
#[derive(Clone, Debug, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub step: u64,
    pub loss: f64,
    pub box_loss: f64,
    pub obj_loss: f64,
    pub cls_loss: f64,
    pub train_map50: Option<f64>,
    pub val_map50: Option<f64>,
}

impl EpochLog {
    pub fn to_record(&self) -> String {
        let f = |v: Option<f64>| v.map_or_else(|| "none".to_string(), |v| format!("{v:.6}"));
        format!(
            "epoch={} step={} loss={:.6} box={:.6} obj={:.6} cls={:.6} train_map50={} val_map50={}",
            self.epoch,
            self.step,
            self.loss,
            self.box_loss,
            self.obj_loss,
            self.cls_loss,
            f(self.train_map50),
            f(self.val_map50)
        )
    }
}

fn ground_truths(items: &[AnnotatedImage]) -> Vec<Vec<GroundTruth>> {
    items
        .iter()
        .map(|a| a.boxes.iter().map(|b| GroundTruth { bbox: b.bbox, class_id: b.class_id }).collect())
        .collect()
}

/// Detections per image after decode at `conf` and NMS at `nms_iou`.
pub fn predict<T: Real>(
    model: &Model<T>,
    items: &[AnnotatedImage],
    conf: f64,
    nms_iou: f64,
    batch_size: usize,
) -> Result<Vec<Vec<Detection>>> {
    let mut out = Vec::with_capacity(items.len());
    for chunk in items.chunks(batch_size.max(1)) {
        let refs: Vec<&AnnotatedImage> = chunk.iter().collect();
        let (x, _) = make_batch::<T>(&refs, INPUT_MULTIPLE)?;
        let preds = model.forward(&x)?;
        for (a, dets) in chunk.iter().zip(decode(&preds, &model.config, conf)?) {
            let (w, h) = (a.width() as f64, a.height() as f64);
            let inside = dets
                .into_iter()
                .map(|d| Detection { bbox: d.bbox.clip(w, h), ..d })
                .filter(|d| d.bbox.is_valid())
                .collect::<Vec<_>>();
            out.push(nms(&inside, nms_iou));
        }
    }
    Ok(out)
}

/// Metrics of `model` on `items`, with the detections they were computed from.
/// AP uses every detection above [`AP_CONF_THRESHOLD`]; precision and recall
/// are taken at the operating confidence `conf`.
pub fn evaluate<T: Real>(
    model: &Model<T>,
    items: &[AnnotatedImage],
    conf: f64,
    nms_iou: f64,
    batch_size: usize,
) -> Result<(EvalResult, Vec<Vec<Detection>>)> {
    let dets = predict(model, items, AP_CONF_THRESHOLD.min(conf), nms_iou, batch_size)?;
    let result = map_range_at(&dets, &ground_truths(items), model.config.num_classes, conf);
    Ok((result, dets))
}

/// Mean loss over `items` in batches, without updating anything.
pub fn dataset_loss<T: Real>(
    model: &Model<T>,
    items: &[AnnotatedImage],
    batch_size: usize,
    loss_cfg: &LossConfig,
) -> Result<f64> {
    let mut total = 0.0;
    for chunk in items.chunks(batch_size.max(1)) {
        let refs: Vec<&AnnotatedImage> = chunk.iter().collect();
        let (x, t) = make_batch::<T>(&refs, INPUT_MULTIPLE)?;
        total += evaluate_loss(model, &x, &t, loss_cfg)?.loss * chunk.len() as f64;
    }
    Ok(total / items.len().max(1) as f64)
}

/// Model, optimizer and epoch counter of one training run.
#[derive(Clone, Debug)]
pub struct Trainer<T> {
    pub model: Model<T>,
    pub optimizer: Adam<T>,
    pub config: TrainConfig,
    pub loss: LossConfig,
    /// Completed epochs.
    pub epoch: usize,
}

impl<T: Real> Trainer<T> {
    pub fn new(model: Model<T>, config: TrainConfig) -> Self {
        let optimizer = Adam::new(AdamConfig { lr: config.lr, ..AdamConfig::default() });
        Trainer { model, optimizer, config, loss: LossConfig::default(), epoch: 0 }
    }

    /// Sample order and augmentation of an epoch depend only on the seed and the
    /// epoch index, so a resumed run repeats an uninterrupted one.
    fn epoch_rng(&self) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(self.config.seed ^ (self.epoch as u64 + 1).wrapping_mul(0x9e37_79b9_7f4a_7c15))
    }

    /// One pass over `train` in shuffled batches. The loss columns are the
    /// sample-weighted means of the per-step losses.
    pub fn run_epoch(&mut self, train: &[AnnotatedImage]) -> Result<StepStats> {
        let mut rng = self.epoch_rng();
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut rng);
        let mut sum = StepStats { step: self.optimizer.step, loss: 0.0, box_loss: 0.0, obj_loss: 0.0, cls_loss: 0.0 };
        for chunk in order.chunks(self.config.batch_size.max(1)) {
            let samples: Vec<AnnotatedImage> = chunk
                .iter()
                .map(|&i| {
                    let a = &train[i];
                    if self.config.augment && rng.random_bool(0.8) {
                        augment(a, &random_ops(&mut rng, a.width(), a.height()))
                    } else {
                        a.clone()
                    }
                })
                .collect();
            let refs: Vec<&AnnotatedImage> = samples.iter().collect();
            let (x, t) = make_batch::<T>(&refs, INPUT_MULTIPLE)?;
            let s = train_step(&mut self.model, &mut self.optimizer, &x, &t, &self.loss)?;
            let k = chunk.len() as f64;
            sum.step = s.step;
            sum.loss += s.loss * k;
            sum.box_loss += s.box_loss * k;
            sum.obj_loss += s.obj_loss * k;
            sum.cls_loss += s.cls_loss * k;
        }
        let n = train.len().max(1) as f64;
        self.epoch += 1;
        Ok(StepStats {
            loss: sum.loss / n,
            box_loss: sum.box_loss / n,
            obj_loss: sum.obj_loss / n,
            cls_loss: sum.cls_loss / n,
            ..sum
        })
    }

    /// Trains until `config.epochs` are complete, calling `on_epoch` after each.
    /// Stops at the first error; the model then holds the last good parameters.
    pub fn fit(
        &mut self,
        train: &[AnnotatedImage],
        val: &[AnnotatedImage],
        mut on_epoch: impl FnMut(&Self, &EpochLog) -> Result<()>,
    ) -> Result<Vec<EpochLog>> {
        let mut logs = Vec::new();
        while self.epoch < self.config.epochs {
            let s = self.run_epoch(train)?;
            let every = self.config.eval_every;
            let due = every > 0 && (self.epoch % every == 0 || self.epoch == self.config.epochs);
            let map = |items: &[AnnotatedImage]| -> Result<Option<f64>> {
                if !due || items.is_empty() {
                    return Ok(None);
                }
                Ok(evaluate(&self.model, items, CONF_THRESHOLD, self.config.nms_iou, self.config.batch_size)?.0.map50)
            };
            let log = EpochLog {
                epoch: self.epoch,
                step: s.step,
                loss: s.loss,
                box_loss: s.box_loss,
                obj_loss: s.obj_loss,
                cls_loss: s.cls_loss,
                train_map50: map(train)?,
                val_map50: map(val)?,
            };
            on_epoch(self, &log)?;
            logs.push(log);
        }
        Ok(logs)
    }
}
