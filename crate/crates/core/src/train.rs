//! Training loop: SGD with momentum, warmup + cosine schedule, Cycle-EMA,
//! per-iteration label assignment and evaluation.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use image::RgbImage;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::assignment::{assign, AssignerConfig, AssignmentResult};
use crate::augment::{flip_and_crop, resize, AugmentConfig};
use crate::data::{images_to_tensor, Dataset};
use crate::error::{Error, Result};
use crate::geometry::{AnchorPoint, BBox, LabeledBox};
use crate::graph::{Graph, NodeId, NormMode};
use crate::head::{flatten_outputs, postprocess, unflatten_grads, Detection};
use crate::losses::{detection_loss, FlatPredictions, LossConfig};
use crate::metrics::{evaluate_map, ImageDetection, MapResult};
use crate::model::PicoDet;
use crate::params::ParamStore;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr0: f64,
    /// When set, the learning rate is `lr0 * batch_size / lr_reference_batch`.
    pub lr_reference_batch: Option<usize>,
    pub momentum: f64,
    pub weight_decay: f64,
    pub warmup_iters: usize,
    pub warmup_start_factor: f64,
    pub epochs: usize,
    /// Caps the schedule length in iterations.
    pub max_iters: Option<usize>,
    pub batch_size: usize,
    pub use_ema: bool,
    pub ema_decay: f64,
    /// Iterations between shadow resets; defaults to two epochs.
    pub ema_forget_step: Option<usize>,
    pub grad_clip: Option<f64>,
    pub log_interval: usize,
    /// Iterations between evaluations on the training set; 0 disables.
    pub eval_interval: usize,
    pub eval_size: u32,
    /// Stop once mAP@0.5 at an evaluation reaches this value.
    pub target_map50: Option<f64>,
    pub checkpoint_interval: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr0: 0.1,
            lr_reference_batch: Some(640),
            momentum: 0.9,
            weight_decay: 4e-5,
            warmup_iters: 500,
            warmup_start_factor: 0.1,
            epochs: 300,
            max_iters: None,
            batch_size: 16,
            use_ema: true,
            ema_decay: 0.9998,
            ema_forget_step: None,
            grad_clip: None,
            log_interval: 10,
            eval_interval: 0,
            eval_size: 416,
            target_map50: None,
            checkpoint_interval: 0,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> std::result::Result<(), String> {
        if !(self.lr0 > 0.0) {
            return Err(format!("lr0 must be positive, got {}", self.lr0));
        }
        if !(self.ema_decay > 0.0 && self.ema_decay < 1.0) {
            return Err(format!("ema_decay must lie in (0, 1), got {}", self.ema_decay));
        }
        if self.batch_size == 0 || self.epochs == 0 {
            return Err("batch_size and epochs must be positive".into());
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(format!("momentum must lie in [0, 1), got {}", self.momentum));
        }
        if self.lr_reference_batch == Some(0) || self.ema_forget_step == Some(0) {
            return Err("lr_reference_batch and ema_forget_step must be positive when set".into());
        }
        Ok(())
    }

    pub fn base_lr(&self) -> f64 {
        match self.lr_reference_batch {
            Some(r) => self.lr0 * self.batch_size as f64 / r as f64,
            None => self.lr0,
        }
    }

    pub fn iters_per_epoch(&self, dataset_len: usize) -> usize {
        dataset_len.div_ceil(self.batch_size).max(1)
    }

    pub fn total_iters(&self, dataset_len: usize) -> usize {
        let full = self.epochs * self.iters_per_epoch(dataset_len);
        self.max_iters.map_or(full, |m| m.min(full))
    }

    pub fn forget_step(&self, dataset_len: usize) -> usize {
        self.ema_forget_step.unwrap_or(2 * self.iters_per_epoch(dataset_len))
    }
}

/// `0.5 * lr0 * (1 + cos(pi * step / total))`.
pub fn cosine_lr(step: usize, total: usize, lr0: f64) -> Result<f64> {
    if step > total {
        return Err(Error::InvalidArgument(format!("step {step} beyond schedule length {total}")));
    }
    if total == 0 {
        return Ok(lr0);
    }
    Ok(0.5 * lr0 * (1.0 + (std::f64::consts::PI * step as f64 / total as f64).cos()))
}

/// Cosine schedule scaled by a linear warmup factor.
pub fn scheduled_lr(step: usize, total: usize, cfg: &TrainConfig) -> f64 {
    let lr = cosine_lr(step.min(total), total, cfg.base_lr()).expect("clamped step");
    if step < cfg.warmup_iters {
        let t = step as f64 / cfg.warmup_iters as f64;
        lr * (cfg.warmup_start_factor + (1.0 - cfg.warmup_start_factor) * t)
    } else {
        lr
    }
}

/// Exponential moving average of every parameter (running statistics
/// included) with a periodic reset of the shadow to the live weights.
#[derive(Debug, Clone)]
pub struct EmaState {
    pub shadow: Vec<Vec<f32>>,
    pub step: usize,
    pub decay: f64,
    pub forget_step: Option<usize>,
}

impl EmaState {
    pub fn new(store: &ParamStore, decay: f64, forget_step: Option<usize>) -> Self {
        EmaState { shadow: store.iter().map(|(_, p)| p.value.data().to_vec()).collect(), step: 0, decay, forget_step }
    }

    pub fn update(&mut self, store: &ParamStore) -> Result<()> {
        if store.len() != self.shadow.len() {
            return Err(Error::ShapeMismatch(format!("EMA tracks {} tensors, model has {}", self.shadow.len(), store.len())));
        }
        self.step += 1;
        let reset = self.forget_step.is_some_and(|f| self.step % f == 0);
        let d = self.decay as f32;
        for (sh, (_, p)) in self.shadow.iter_mut().zip(store.iter()) {
            let w = p.value.data();
            if sh.len() != w.len() {
                return Err(Error::ShapeMismatch(format!("EMA shadow of {} has the wrong size", p.name)));
            }
            if reset {
                sh.copy_from_slice(w);
            } else {
                for (s, &v) in sh.iter_mut().zip(w) {
                    *s = d * *s + (1.0 - d) * v;
                }
            }
        }
        Ok(())
    }

    /// A copy of `store` holding the shadow values.
    pub fn materialize(&self, store: &ParamStore) -> ParamStore {
        let mut out = store.clone();
        for (p, sh) in out.iter_mut().zip(&self.shadow) {
            p.value.data_mut().copy_from_slice(sh);
        }
        out
    }
}

/// SGD with heavy-ball momentum; L2 decay on convolution kernels only.
#[derive(Debug, Clone)]
pub struct Sgd {
    pub momentum: f64,
    pub weight_decay: f64,
    pub velocity: Vec<Vec<f32>>,
}

impl Sgd {
    pub fn new(store: &ParamStore, momentum: f64, weight_decay: f64) -> Self {
        Sgd { momentum, weight_decay, velocity: store.iter().map(|(_, p)| vec![0.0; p.value.numel()]).collect() }
    }

    pub fn step(&mut self, store: &mut ParamStore, lr: f64) {
        let (m, lr) = (self.momentum as f32, lr as f32);
        for (p, v) in store.iter_mut().zip(self.velocity.iter_mut()) {
            if !p.kind.is_trainable() {
                continue;
            }
            let wd = if p.kind.decays() { self.weight_decay as f32 } else { 0.0 };
            let grad = p.grad.data().to_vec();
            for ((w, vel), g) in p.value.data_mut().iter_mut().zip(v.iter_mut()).zip(grad) {
                *vel = m * *vel + g + wd * *w;
                *w -= lr * *vel;
            }
        }
    }
}

/// Loss terms of one iteration.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct StepLoss {
    pub total: f64,
    pub cls: f64,
    pub giou: f64,
    pub dfl: f64,
    pub num_positives: usize,
}

/// One line of the metrics log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub step: usize,
    pub lr: f64,
    pub loss_total: f64,
    pub loss_vfl: f64,
    pub loss_giou: f64,
    pub loss_dfl: f64,
    pub epoch: usize,
    #[serde(rename = "mAP", skip_serializing_if = "Option::is_none", default)]
    pub map: Option<f64>,
    #[serde(rename = "mAP50", skip_serializing_if = "Option::is_none", default)]
    pub map50: Option<f64>,
}

/// Anchor points for the level shapes of a forward pass, cached per shape.
#[derive(Debug, Default)]
pub struct AnchorCache {
    cache: BTreeMap<Vec<(usize, usize)>, Vec<AnchorPoint>>,
}

impl AnchorCache {
    pub fn get(&mut self, model: &PicoDet, shapes: &[(usize, usize)]) -> Result<&[AnchorPoint]> {
        if !self.cache.contains_key(shapes) {
            let anchors = model.anchors(shapes)?;
            self.cache.insert(shapes.to_vec(), anchors);
        }
        Ok(&self.cache[shapes])
    }
}

fn level_shapes(g: &Graph, outs: &[NodeId]) -> Vec<(usize, usize)> {
    outs.iter().map(|&o| (g.shape(o)[2], g.shape(o)[3])).collect()
}

/// Assignment on detached predictions.
pub fn assign_batch(
    preds: &[FlatPredictions],
    anchors: &[AnchorPoint],
    gts: &[Vec<LabeledBox>],
    assigner: &AssignerConfig,
    loss: &LossConfig,
) -> Vec<AssignmentResult> {
    preds
        .iter()
        .zip(gts)
        .map(|(p, boxes)| {
            let scores = p.scores();
            let pred_boxes = p.boxes(anchors);
            assign(&scores, p.num_classes, &pred_boxes, anchors, boxes, assigner, loss)
        })
        .collect()
}

/// Forward, assignment, loss and backward on one batch. Gradients are
/// accumulated into `store`; the caller steps the optimizer.
#[allow(clippy::too_many_arguments)]
pub fn forward_backward(
    model: &PicoDet,
    store: &mut ParamStore,
    images: Tensor,
    gts: &[Vec<LabeledBox>],
    ratios: &[f64],
    assigner: &AssignerConfig,
    loss_cfg: &LossConfig,
    anchors: &mut AnchorCache,
) -> Result<StepLoss> {
    let nc = model.cfg.head.num_classes;
    let bins = model.cfg.head.bins();
    let mut g = Graph::new(store, NormMode::Batch { update: true });
    let x = g.input(images);
    let outs = model.forward_with_ratios(&mut g, x, ratios);
    let shapes = level_shapes(&g, &outs);
    let out_shapes: Vec<[usize; 4]> = outs.iter().map(|&o| g.shape(o)).collect();
    let anchor_points = anchors.get(model, &shapes)?;
    let values: Vec<&Tensor> = outs.iter().map(|&o| g.value(o)).collect();
    let preds = flatten_outputs(&values, nc, bins);
    let assignments = assign_batch(&preds, anchor_points, gts, assigner, loss_cfg);
    let out = detection_loss(&preds, anchor_points, &assignments, gts, loss_cfg);
    let step_loss = StepLoss { total: out.total, cls: out.cls, giou: out.giou, dfl: out.dfl, num_positives: out.num_positives };
    if !step_loss.total.is_finite() {
        return Ok(step_loss);
    }
    let seeds = outs.into_iter().zip(unflatten_grads(&out.grads, &out_shapes)).collect();
    g.backward(seeds);
    Ok(step_loss)
}

/// Detections for a list of images at a square input size, in the
/// coordinates of the original images.
pub fn predict(
    model: &PicoDet,
    store: &mut ParamStore,
    images: &[RgbImage],
    size: u32,
    ratios: &[f64],
    norm: NormMode,
    batch_size: usize,
) -> Result<Vec<Vec<Detection>>> {
    let nc = model.cfg.head.num_classes;
    let bins = model.cfg.head.bins();
    let mut anchors = AnchorCache::default();
    let mut all = Vec::with_capacity(images.len());
    for chunk in images.chunks(batch_size.max(1)) {
        let resized: Vec<RgbImage> = chunk.iter().map(|im| resize(im, &[], size).0).collect();
        let refs: Vec<&RgbImage> = resized.iter().collect();
        let mut g = Graph::new(store, norm);
        let x = g.input(images_to_tensor(&refs));
        let outs = model.forward_with_ratios(&mut g, x, ratios);
        let shapes = level_shapes(&g, &outs);
        let anchor_points = anchors.get(model, &shapes)?.to_vec();
        let values: Vec<&Tensor> = outs.iter().map(|&o| g.value(o)).collect();
        let preds = flatten_outputs(&values, nc, bins);
        for (p, orig) in preds.iter().zip(chunk) {
            let (w, h) = orig.dimensions();
            let (sx, sy) = (w as f64 / size as f64, h as f64 / size as f64);
            let dets = postprocess(p, &anchor_points, (size as f64, size as f64), &model.cfg.head)
                .into_iter()
                .map(|d| Detection { bbox: BBox::new(d.bbox.x1 * sx, d.bbox.y1 * sy, d.bbox.x2 * sx, d.bbox.y2 * sy), ..d })
                .collect();
            all.push(dets);
        }
    }
    Ok(all)
}

/// mAP of the model on a dataset.
pub fn evaluate(
    model: &PicoDet,
    store: &mut ParamStore,
    dataset: &Dataset,
    size: u32,
    ratios: &[f64],
    norm: NormMode,
) -> Result<(MapResult, Vec<ImageDetection>)> {
    let dets = predict(model, store, &dataset.images, size, ratios, norm, 8)?;
    let flat: Vec<ImageDetection> = dataset
        .index
        .images
        .iter()
        .zip(dets)
        .flat_map(|(info, ds)| {
            ds.into_iter().map(move |d| ImageDetection { image_id: info.id, bbox: d.bbox, score: d.score, class_id: d.class_id })
        })
        .collect();
    let result = evaluate_map(&flat, &dataset.index.ground_truth(), model.cfg.head.num_classes)?;
    Ok((result, flat))
}

/// Draws one augmented batch: a shared input size, per-image flip/crop.
pub fn sample_batch<R: Rng>(
    dataset: &Dataset,
    boxes: &[Vec<LabeledBox>],
    indices: &[usize],
    rng: &mut R,
    aug: &AugmentConfig,
) -> (Tensor, Vec<Vec<LabeledBox>>) {
    let size = aug.input_sizes[rng.gen_range(0..aug.input_sizes.len())];
    let mut imgs = Vec::with_capacity(indices.len());
    let mut gts = Vec::with_capacity(indices.len());
    for &i in indices {
        let (im, bx) = flip_and_crop(&dataset.images[i], &boxes[i], rng, aug);
        let (im, bx) = resize(&im, &bx, size);
        imgs.push(im);
        gts.push(bx);
    }
    let refs: Vec<&RgbImage> = imgs.iter().collect();
    (images_to_tensor(&refs), gts)
}

/// Everything the training loop needs besides the data.
#[derive(Debug, Clone)]
pub struct TrainSetup {
    pub train: TrainConfig,
    pub augment: AugmentConfig,
    pub assigner: AssignerConfig,
    pub loss: LossConfig,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub steps: usize,
    pub records: Vec<MetricsRecord>,
    pub final_map: Option<MapResult>,
    pub reached_target: bool,
}

#[derive(Serialize)]
struct NanDump<'a> {
    step: usize,
    image_indices: &'a [usize],
    boxes: Vec<Vec<[f64; 5]>>,
    loss: StepLoss,
}

/// Trainer state that survives between iterations.
pub struct Trainer {
    pub model: PicoDet,
    pub store: ParamStore,
    pub opt: Sgd,
    pub ema: Option<EmaState>,
    pub setup: TrainSetup,
    pub step: usize,
    anchors: AnchorCache,
    rng: ChaCha8Rng,
}

impl Trainer {
    pub fn new(model: PicoDet, store: ParamStore, setup: TrainSetup, dataset_len: usize) -> Result<Self> {
        setup.train.validate().map_err(|m| Error::config("train", m))?;
        setup.augment.validate().map_err(|m| Error::config("augment", m))?;
        setup.assigner.validate().map_err(|m| Error::config("assigner", m))?;
        setup.loss.validate().map_err(|m| Error::config("loss", m))?;
        let opt = Sgd::new(&store, setup.train.momentum, setup.train.weight_decay);
        let ema =
            setup.train.use_ema.then(|| EmaState::new(&store, setup.train.ema_decay, Some(setup.train.forget_step(dataset_len))));
        let rng = ChaCha8Rng::seed_from_u64(setup.train.seed);
        Ok(Trainer { model, store, opt, ema, setup, step: 0, anchors: AnchorCache::default(), rng })
    }

    /// Weights used for evaluation: the EMA shadow when enabled.
    pub fn eval_store(&self) -> ParamStore {
        match &self.ema {
            Some(e) => e.materialize(&self.store),
            None => self.store.clone(),
        }
    }

    /// One optimizer step on an already prepared batch.
    pub fn train_step(&mut self, images: Tensor, gts: &[Vec<LabeledBox>], lr: f64) -> Result<StepLoss> {
        self.store.zero_grad();
        let ratios = self.model.cfg.backbone.ratios();
        let loss = forward_backward(
            &self.model,
            &mut self.store,
            images,
            gts,
            &ratios,
            &self.setup.assigner,
            &self.setup.loss,
            &mut self.anchors,
        )?;
        if !loss.total.is_finite() || !self.store.grads_finite() {
            return Err(Error::NonFiniteLoss { step: self.step, detail: format!("{loss:?}") });
        }
        if let Some(c) = self.setup.train.grad_clip {
            self.store.clip_grad_norm(c);
        }
        self.opt.step(&mut self.store, lr);
        if let Some(e) = &mut self.ema {
            e.update(&self.store)?;
        }
        self.step += 1;
        Ok(loss)
    }

    /// Runs the schedule, writing `metrics.jsonl` (and checkpoints) under
    /// `out_dir` when given.
    pub fn fit(&mut self, dataset: &Dataset, out_dir: Option<&Path>) -> Result<TrainOutcome> {
        self.fit_until(dataset, out_dir, None)
    }

    /// Like [`Trainer::fit`] but pauses after iteration `until`, leaving a
    /// resumable state behind.
    pub fn fit_until(&mut self, dataset: &Dataset, out_dir: Option<&Path>, until: Option<usize>) -> Result<TrainOutcome> {
        if dataset.is_empty() {
            return Err(Error::Dataset("training set is empty".into()));
        }
        let cfg = self.setup.train.clone();
        let n = dataset.len();
        let per_epoch = cfg.iters_per_epoch(n);
        let total = cfg.total_iters(n);
        let boxes = dataset.boxes();
        let mut log = match out_dir {
            Some(d) => {
                fs::create_dir_all(d).map_err(|e| Error::io(d, e))?;
                let p = d.join("metrics.jsonl");
                let f =
                    if self.step > 0 { fs::OpenOptions::new().append(true).create(true).open(&p) } else { fs::File::create(&p) };
                Some((f.map_err(|e| Error::io(&p, e))?, p))
            }
            None => None,
        };
        let mut records = Vec::new();
        let mut final_map = None;
        let mut reached = false;

        // replay the shuffles of completed epochs so resumed runs see the
        // same batches
        let mut order: Vec<usize> = (0..n).collect();
        let mut epoch_rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0xA5A5_5A5A);
        for _ in 0..self.step / per_epoch {
            order.shuffle(&mut epoch_rng);
        }

        let stop = until.map_or(total, |u| u.min(total));
        while self.step < stop {
            let epoch = self.step / per_epoch;
            let within = self.step % per_epoch;
            if within == 0 {
                order.shuffle(&mut epoch_rng);
            }
            let idx: Vec<usize> = order[within * cfg.batch_size..((within + 1) * cfg.batch_size).min(n)].to_vec();
            let (images, gts) = sample_batch(dataset, &boxes, &idx, &mut self.rng, &self.setup.augment);
            let lr = scheduled_lr(self.step, total, &cfg);
            let loss = match self.train_step(images, &gts, lr) {
                Ok(l) => l,
                Err(Error::NonFiniteLoss { step, detail }) => {
                    if let Some(d) = out_dir {
                        let dump = NanDump {
                            step,
                            image_indices: &idx,
                            boxes: gts
                                .iter()
                                .map(|bs| {
                                    bs.iter().map(|b| [b.bbox.x1, b.bbox.y1, b.bbox.x2, b.bbox.y2, b.class_id as f64]).collect()
                                })
                                .collect(),
                            loss: StepLoss { total: f64::NAN, cls: f64::NAN, giou: f64::NAN, dfl: f64::NAN, num_positives: 0 },
                        };
                        let p = d.join("nan_dump.json");
                        fs::write(&p, serde_json::to_string_pretty(&dump)?).map_err(|e| Error::io(&p, e))?;
                    }
                    return Err(Error::NonFiniteLoss { step, detail });
                }
                Err(e) => return Err(e),
            };

            let done = self.step;
            let eval_now = (cfg.eval_interval > 0 && done % cfg.eval_interval == 0) || done == total;
            let mut record = MetricsRecord {
                step: done,
                lr,
                loss_total: loss.total,
                loss_vfl: loss.cls,
                loss_giou: loss.giou,
                loss_dfl: loss.dfl,
                epoch,
                map: None,
                map50: None,
            };
            if eval_now && (cfg.eval_interval > 0 || cfg.target_map50.is_some()) {
                let mut eval_store = self.eval_store();
                let ratios = self.model.cfg.backbone.ratios();
                let (m, _) = evaluate(&self.model, &mut eval_store, dataset, cfg.eval_size, &ratios, NormMode::Running)?;
                record.map = Some(m.map);
                record.map50 = Some(m.map50);
                log::info!("step {done}: mAP {:.4} mAP@0.5 {:.4}", m.map, m.map50);
                reached = cfg.target_map50.is_some_and(|t| m.map50 >= t);
                final_map = Some(m);
            }
            if done % cfg.log_interval.max(1) == 0 || record.map.is_some() || done == total {
                if let Some((f, p)) = &mut log {
                    writeln!(f, "{}", serde_json::to_string(&record)?).map_err(|e| Error::io(p.as_path(), e))?;
                }
                log::debug!("step {done} lr {lr:.5} loss {:.4}", loss.total);
                records.push(record);
            }
            if let Some(d) = out_dir {
                if cfg.checkpoint_interval > 0 && done % cfg.checkpoint_interval == 0 {
                    self.save_state(d)?;
                }
            }
            if reached {
                break;
            }
        }
        if let Some(d) = out_dir {
            self.save_state(d)?;
        }
        Ok(TrainOutcome { steps: self.step, records, final_map, reached_target: reached })
    }

    fn meta(&self) -> serde_json::Value {
        serde_json::json!({ "model": self.model.cfg, "step": self.step })
    }

    /// Writes `model.ckpt` (evaluation weights) and `state/` for resuming.
    pub fn save_state(&self, dir: &Path) -> Result<()> {
        let state = dir.join("state");
        fs::create_dir_all(&state).map_err(|e| Error::io(&state, e))?;
        self.eval_store().save(&dir.join(MODEL_FILE), self.meta())?;
        self.store.save(&state.join("weights.ckpt"), self.meta())?;
        let mut vel = self.store.clone();
        for (p, v) in vel.iter_mut().zip(&self.opt.velocity) {
            p.value.data_mut().copy_from_slice(v);
        }
        vel.save(&state.join("momentum.ckpt"), self.meta())?;
        if let Some(e) = &self.ema {
            e.materialize(&self.store).save(&state.join("ema.ckpt"), self.meta())?;
        }
        let rng = serde_json::json!({ "rng_word_pos": self.rng.get_word_pos().to_string() });
        let p = state.join("rng.json");
        fs::write(&p, rng.to_string()).map_err(|e| Error::io(&p, e))?;
        Ok(())
    }

    /// Restores a state written by [`Trainer::save_state`].
    pub fn resume(&mut self, dir: &Path) -> Result<()> {
        let state = dir.join("state");
        let meta = self.store.load(&state.join("weights.ckpt"))?;
        self.step = meta["step"].as_u64().ok_or_else(|| Error::Checkpoint("checkpoint meta lacks a step".into()))? as usize;
        let mut vel = self.store.clone();
        vel.load(&state.join("momentum.ckpt"))?;
        for ((_, p), v) in vel.iter().zip(self.opt.velocity.iter_mut()) {
            v.copy_from_slice(p.value.data());
        }
        if let Some(e) = &mut self.ema {
            let mut sh = self.store.clone();
            sh.load(&state.join("ema.ckpt"))?;
            for ((_, p), s) in sh.iter().zip(e.shadow.iter_mut()) {
                s.copy_from_slice(p.value.data());
            }
            e.step = self.step;
        }
        let p = state.join("rng.json");
        let text = fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?;
        let v: serde_json::Value = serde_json::from_str(&text)?;
        let pos: u128 =
            v["rng_word_pos"].as_str().and_then(|s| s.parse().ok()).ok_or_else(|| Error::Checkpoint("bad rng state".into()))?;
        self.rng.set_word_pos(pos);
        Ok(())
    }
}

pub const MODEL_FILE: &str = "model.ckpt";

/// Output directory layout helper.
pub fn model_path(dir: &Path) -> PathBuf {
    dir.join(MODEL_FILE)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;
    use crate::params::ParamKind;

    #[test]
    fn cosine_examples() {
        assert_eq!(cosine_lr(0, 100, 0.1).unwrap(), 0.1);
        assert!(cosine_lr(100, 100, 0.1).unwrap().abs() < 1e-15);
        assert!((cosine_lr(50, 100, 0.1).unwrap() - 0.05).abs() < 1e-15);
        assert!(cosine_lr(101, 100, 0.1).is_err());
    }

    #[test]
    fn warmup_ramps_linearly() {
        let cfg =
            TrainConfig { lr0: 1.0, lr_reference_batch: None, warmup_iters: 10, warmup_start_factor: 0.0, ..Default::default() };
        assert_eq!(scheduled_lr(0, 1000, &cfg), 0.0);
        let lr5 = scheduled_lr(5, 1000, &cfg);
        assert!((lr5 - 0.5 * cosine_lr(5, 1000, 1.0).unwrap()).abs() < 1e-12);
        assert_eq!(scheduled_lr(10, 1000, &cfg), cosine_lr(10, 1000, 1.0).unwrap());
    }

    #[test]
    fn learning_rate_scales_with_batch() {
        let cfg = TrainConfig { batch_size: 64, ..Default::default() };
        assert!((cfg.base_lr() - 0.01).abs() < 1e-15);
    }

    fn one_param_store(v: f32) -> ParamStore {
        let mut s = ParamStore::new();
        s.add("w", ParamKind::Weight, Tensor::full([1, 1, 1, 1], v));
        s
    }

    #[test]
    fn ema_examples() {
        let mut store = one_param_store(1.0);
        let mut ema = EmaState::new(&store, 0.9, None);
        store.iter_mut().next().unwrap().value.data_mut()[0] = 0.0;
        ema.update(&store).unwrap();
        assert!((ema.shadow[0][0] - 0.9).abs() < 1e-7);

        let mut ema = EmaState::new(&one_param_store(1.0), 0.9, Some(3));
        for _ in 0..2 {
            ema.update(&store).unwrap();
        }
        assert!(ema.shadow[0][0] > 0.0);
        ema.update(&store).unwrap();
        assert_eq!(ema.shadow[0][0], 0.0);
    }

    #[test]
    fn ema_converges_geometrically_to_frozen_weights() {
        let store = one_param_store(2.0);
        let mut ema = EmaState::new(&one_param_store(0.0), 0.5, None);
        for k in 1..=10 {
            ema.update(&store).unwrap();
            let gap = (2.0 - ema.shadow[0][0]) as f64;
            assert!((gap - 2.0 * 0.5f64.powi(k)).abs() < 1e-6);
        }
    }

    #[test]
    fn ema_rejects_shape_mismatch() {
        let mut ema = EmaState::new(&one_param_store(0.0), 0.5, None);
        assert!(ema.update(&ParamStore::new()).is_err());
    }

    #[test]
    fn sgd_skips_decay_on_norm_and_bias() {
        let mut store = ParamStore::new();
        store.add("w", ParamKind::Weight, Tensor::full([1, 1, 1, 1], 1.0));
        store.add("b", ParamKind::Bias, Tensor::full([1, 1, 1, 1], 1.0));
        store.add("g", ParamKind::NormScale, Tensor::full([1, 1, 1, 1], 1.0));
        store.add("m", ParamKind::RunningMean, Tensor::full([1, 1, 1, 1], 1.0));
        store.iter_mut().filter(|p| p.kind.is_trainable()).for_each(|p| p.grad.data_mut()[0] = 0.0);
        let mut opt = Sgd::new(&store, 0.9, 0.5);
        opt.step(&mut store, 0.1);
        let vals: Vec<f32> = store.iter().map(|(_, p)| p.value.data()[0]).collect();
        assert!((vals[0] - 0.95).abs() < 1e-7);
        assert_eq!(&vals[1..], &[1.0, 1.0, 1.0]);
    }

    fn fixture_dataset() -> Dataset {
        let spec = crate::data::SynthSpec { num_images: 2, image_size: 64, ..Default::default() };
        let (index, images) = crate::data::render_synthetic(&spec);
        Dataset::in_memory(index, images)
    }

    fn tiny_setup() -> TrainSetup {
        TrainSetup {
            train: TrainConfig {
                lr0: 0.01,
                lr_reference_batch: None,
                batch_size: 2,
                epochs: 1,
                warmup_iters: 0,
                ..Default::default()
            },
            augment: AugmentConfig { input_sizes: vec![64], ..Default::default() },
            assigner: AssignerConfig::default(),
            loss: LossConfig::default(),
        }
    }

    #[test]
    fn one_iteration_smoke() {
        let ds = fixture_dataset();
        let cfg = ModelConfig::tiny(3);
        let mut store = ParamStore::new();
        let model = PicoDet::build(&cfg, &mut store, 1).unwrap();
        let mut trainer = Trainer::new(model, store, tiny_setup(), ds.len()).unwrap();
        let boxes = ds.boxes();
        let (images, gts) = sample_batch(&ds, &boxes, &[0, 1], &mut ChaCha8Rng::seed_from_u64(0), &trainer.setup.augment);
        let before = trainer.store.clone();
        let loss = trainer.train_step(images, &gts, 0.01).unwrap();
        assert!(loss.total.is_finite() && loss.total > 0.0);
        assert!(loss.num_positives > 0);
        assert!(trainer.store.grads_finite());
        let changed = trainer.store.iter().zip(before.iter()).filter(|((_, a), (_, b))| a.value != b.value).count();
        assert!(changed > 0);
    }

    #[test]
    fn resume_matches_uninterrupted_run() {
        let ds = fixture_dataset();
        let cfg = ModelConfig::tiny(3);
        let mut setup = tiny_setup();
        setup.train.epochs = 4;
        setup.train.log_interval = 1;
        let build = || {
            let mut store = ParamStore::new();
            let model = PicoDet::build(&cfg, &mut store, 1).unwrap();
            Trainer::new(model, store, setup.clone(), ds.len()).unwrap()
        };
        let dir = tempfile::tempdir().unwrap();
        let mut full = build();
        full.fit(&ds, Some(&dir.path().join("full"))).unwrap();

        let mut first = build();
        let part = dir.path().join("part");
        first.fit_until(&ds, Some(&part), Some(2)).unwrap();
        let mut second = build();
        second.resume(&part).unwrap();
        assert_eq!(second.step, 2);
        second.fit(&ds, Some(&part)).unwrap();
        for ((_, a), (_, b)) in full.store.iter().zip(second.store.iter()) {
            assert_eq!(a.value, b.value, "{}", a.name);
        }
    }
}
