//! Model construction, the training loop and dataset-level evaluation.

use std::time::{Duration, Instant};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use refdet_core::data::{apply_pixel_shift, resize_test, resize_train, Sample, Split};
use refdet_core::detector::{Detector, Profiler, TemplateMode, TrainInput};
use refdet_core::eval::{mean_average_precision, DetectionResult, GroundTruth, MapReport};
use refdet_core::optim::{default_warmup, LrSchedule, Optimizer};
use refdet_core::train::{train_step, LossValues, StepOptions};
use refdet_core::{ParamStore, Tensor};

use crate::config::ExperimentConfig;
use crate::error::{Error, Result};
use crate::manifest::Dataset;

/// Random streams derived from the experiment seed, one per purpose, so that
/// e.g. enabling per-epoch evaluation never perturbs training.
#[derive(Debug, Clone, Copy)]
enum Stream {
    Init = 1,
    Order = 2,
    Sampling = 3,
    Augment = 4,
}

fn rng_for(seed: u64, stream: Stream) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream as u64);
    rng
}

/// A detector together with its parameter values.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub detector: Detector,
    pub store: ParamStore,
}

impl Model {
    /// Freshly initialised parameters for `cfg`.
    pub fn new(cfg: &ExperimentConfig) -> Result<Self> {
        let dc = cfg.detector_config()?;
        let mut store = ParamStore::new();
        let detector = Detector::new(&dc, &mut store, &mut rng_for(cfg.seed, Stream::Init))?;
        Ok(Self { detector, store })
    }

    pub fn template_mode(&self) -> TemplateMode {
        self.detector.config.template
    }

    /// Switches between the plain detector and eval-time template re-scoring.
    /// Both use the same parameters, so no retraining is involved.
    pub fn set_rescoring(&mut self, on: bool) -> Result<()> {
        let mode = self.template_mode();
        if !matches!(mode, TemplateMode::None | TemplateMode::Post) {
            return Err(Error::Config(format!(
                "template re-scoring applies to plain detectors, not `{}` models",
                mode.name()
            )));
        }
        self.detector.config.template = if on { TemplateMode::Post } else { TemplateMode::None };
        Ok(())
    }

    /// Runs inference; the template is passed only when the mode uses it.
    pub fn detect(&self, sample: &Sample, prof: &mut dyn Profiler) -> Result<DetectionResult> {
        let image = sample.image.to_tensor();
        let template = if self.template_mode().requires_template() {
            let t = sample
                .template
                .as_ref()
                .ok_or_else(|| Error::Dataset(format!("`{}` needs template images", self.template_mode().name())))?;
            Some(t.to_tensor())
        } else {
            None
        };
        Ok(self.detector.detect(&self.store, &image, template.as_ref(), prof)?)
    }
}

/// Checks that `dataset` can feed a model built from `cfg`.
pub fn check_dataset(cfg: &ExperimentConfig, dataset: &Dataset) -> Result<()> {
    if dataset.num_classes() != cfg.model.num_classes {
        return Err(Error::Config(format!(
            "model.num_classes is {} but the dataset declares {} categories",
            cfg.model.num_classes,
            dataset.num_classes()
        )));
    }
    let mode = cfg.template_mode();
    if mode.requires_template() && !dataset.has_templates() {
        return Err(Error::Config(format!(
            "template mode `{}` needs a template for every sample, but the dataset has none for some",
            mode.name()
        )));
    }
    let train = dataset.split(Split::Train);
    if train.is_empty() {
        return Err(Error::Dataset("training split is empty".into()));
    }
    if mode == TemplateMode::PtgInter && !train.iter().any(|(_, s)| s.is_normal) {
        return Err(Error::Dataset(
            "ptg-inter trains its generator on normal samples, but none are in the training split".into(),
        ));
    }
    Ok(())
}

/// Losses and schedule state of one iteration.
#[derive(Debug, Clone, PartialEq)]
pub struct IterationLog {
    pub iteration: usize,
    /// 1-based epoch the iteration belongs to.
    pub epoch: usize,
    pub lr: f32,
    pub losses: LossValues,
    pub grad_norm: f32,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochLog {
    /// 1-based count of completed epochs.
    pub epoch: usize,
    pub iterations: usize,
    pub mean_loss: f32,
    pub elapsed: Duration,
}

/// Hooks called by [`train`]; the run directory writer and tests implement it.
pub trait TrainObserver {
    fn iteration(&mut self, _log: &IterationLog) -> Result<()> {
        Ok(())
    }

    fn epoch_end(&mut self, _log: &EpochLog, _model: &Model) -> Result<()> {
        Ok(())
    }
}

impl TrainObserver for () {}

/// Collects every iteration log in memory.
#[derive(Debug, Default)]
pub struct LossRecorder {
    pub iterations: Vec<IterationLog>,
}

impl TrainObserver for LossRecorder {
    fn iteration(&mut self, log: &IterationLog) -> Result<()> {
        self.iterations.push(log.clone());
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainSummary {
    pub iterations: usize,
    pub epochs: usize,
    pub last_losses: LossValues,
    pub elapsed: Duration,
}

/// Trains a fresh model on the training split of `dataset`.
pub fn train(
    cfg: &ExperimentConfig,
    dataset: &Dataset,
    observer: &mut dyn TrainObserver,
) -> Result<(Model, TrainSummary)> {
    cfg.validate()?;
    check_dataset(cfg, dataset)?;
    let mut model = Model::new(cfg)?;
    let t = &cfg.train;
    let resize = cfg.resize();
    let mode = cfg.template_mode();
    let train: Vec<&Sample> = dataset.split(Split::Train).into_iter().map(|(_, s)| s).collect();
    let normals: Vec<&Sample> = train.iter().copied().filter(|s| s.is_normal).collect();
    let per_epoch = train.len().div_ceil(t.batch_size);
    let mut total = per_epoch * t.epochs;
    if let Some(m) = t.max_iters {
        total = total.min(m);
    }
    let schedule = LrSchedule {
        base_lr: t.lr,
        warmup_iters: t.warmup_iters.unwrap_or_else(|| default_warmup(total)),
        warmup_ratio: t.warmup_ratio,
        milestones: t.decay_epochs.iter().map(|e| e * per_epoch).collect(),
        gamma: t.decay_factor,
    };
    let mut opt = Optimizer::new(t.optimizer_kind(), &model.store);
    let mut order_rng = rng_for(cfg.seed, Stream::Order);
    let mut sample_rng = rng_for(cfg.seed, Stream::Sampling);
    let mut aug_rng = rng_for(cfg.seed, Stream::Augment);
    let start = Instant::now();
    let mut iteration = 0;
    let mut epochs = 0;
    let mut last = LossValues::default();
    'outer: for epoch in 0..t.epochs {
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut order_rng);
        let mut sum = 0.0;
        let mut count = 0;
        for chunk in order.chunks(t.batch_size) {
            if iteration >= total {
                break 'outer;
            }
            let mut prepared = Vec::with_capacity(chunk.len());
            for &i in chunk {
                let mut s = resize_train(train[i], &resize, &mut aug_rng)?;
                if let Some([lo, hi]) = t.pixel_shift {
                    s = apply_pixel_shift(&s, lo, hi, &mut aug_rng)?;
                }
                let image = s.image.to_tensor();
                let template = match (&s.template, mode.requires_template()) {
                    (Some(t), true) => Some(t.to_tensor()),
                    _ => None,
                };
                let normal = if mode == TemplateMode::PtgInter {
                    let n = normals[aug_rng.random_range(0..normals.len())];
                    Some(resize_train(n, &resize, &mut aug_rng)?.image.to_tensor())
                } else {
                    None
                };
                prepared.push((s, image, template, normal));
            }
            let items: Vec<TrainInput<'_>> = prepared
                .iter()
                .map(|(s, image, template, _)| TrainInput {
                    image,
                    template: template.as_ref(),
                    boxes: &s.boxes,
                    labels: &s.labels,
                })
                .collect();
            let normal_refs: Vec<Option<&Tensor>> = prepared.iter().map(|p| p.3.as_ref()).collect();
            let lr = schedule.lr_at(iteration);
            let options = StepOptions {
                lr,
                clip_norm: t.clip_grad_norm,
            };
            let report = train_step(
                &model.detector,
                &mut model.store,
                &mut opt,
                &items,
                &normal_refs,
                options,
                &mut sample_rng,
            )?;
            if !report.losses.total.is_finite() {
                return Err(Error::Dataset(format!("loss diverged at iteration {iteration}")));
            }
            last = report.losses;
            sum += report.losses.total;
            count += 1;
            observer.iteration(&IterationLog {
                iteration,
                epoch: epoch + 1,
                lr,
                losses: report.losses,
                grad_norm: report.grad_norm,
            })?;
            iteration += 1;
        }
        epochs = epoch + 1;
        observer.epoch_end(
            &EpochLog {
                epoch: epochs,
                iterations: iteration,
                mean_loss: if count > 0 { sum / count as f32 } else { 0.0 },
                elapsed: start.elapsed(),
            },
            &model,
        )?;
    }
    Ok((
        model,
        TrainSummary {
            iterations: iteration,
            epochs,
            last_losses: last,
            elapsed: start.elapsed(),
        },
    ))
}

/// Test-time view of a split: optionally shifted (in original pixels, with a
/// fixed seed so every model sees the same corruption), then resized.
pub fn prepare_eval_set(cfg: &ExperimentConfig, samples: &[&Sample], shifted: bool) -> Result<Vec<Sample>> {
    if samples.is_empty() {
        return Err(Error::Dataset("evaluation split is empty".into()));
    }
    let resize = cfg.resize();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.eval.shift_seed);
    samples
        .iter()
        .map(|s| {
            let s = match (shifted, cfg.eval.shift_px) {
                (true, Some([lo, hi])) => apply_pixel_shift(s, lo, hi, &mut rng)?,
                (true, None) => {
                    return Err(Error::Config(
                        "shifted evaluation requested but eval.shift_px is unset".into(),
                    ))
                }
                (false, _) => (*s).clone(),
            };
            Ok(resize_test(&s, &resize)?)
        })
        .collect()
}

pub fn detect_all(model: &Model, samples: &[Sample], prof: &mut dyn Profiler) -> Result<Vec<DetectionResult>> {
    samples.iter().map(|s| model.detect(s, prof)).collect()
}

pub fn ground_truth(samples: &[Sample]) -> Vec<GroundTruth> {
    samples
        .iter()
        .map(|s| GroundTruth {
            boxes: s.boxes.clone(),
            labels: s.labels.clone(),
        })
        .collect()
}

/// mAP of `model` on already prepared samples.
pub fn evaluate(
    cfg: &ExperimentConfig,
    model: &Model,
    samples: &[Sample],
    prof: &mut dyn Profiler,
) -> Result<(MapReport, Vec<DetectionResult>)> {
    let dets = detect_all(model, samples, prof)?;
    let report = mean_average_precision(
        &dets,
        &ground_truth(samples),
        model.detector.config.num_classes,
        cfg.eval.iou_threshold,
        cfg.eval.ap_method(),
    )?;
    Ok((report, dets))
}
