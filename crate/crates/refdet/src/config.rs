//! Experiment configuration: a TOML schema with explicit defaults, validation
//! and a stable fingerprint of everything that shapes the trained weights.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use refdet_core::backbone::BackboneConfig;
use refdet_core::data::ResizeConfig;
use refdet_core::detector::{AnchorConfig, DetectorConfig, RoiConfig, RpnConfig, TemplateMode};
use refdet_core::eval::{ApMethod, PostprocessConfig};
use refdet_core::heads::{ContextMode, ProposalConfig, RoiHeadConfig, RoiSamplerConfig, RpnAssignConfig};
use refdet_core::optim::OptimizerKind;
use refdet_core::synth::{DefectKind, SynthConfig, TextureFamily};
use refdet_core::template::{NormalizationParams, PtgConfig, ReconstructionLoss};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Seeds parameter init, sampling, shuffling and augmentation.
    pub seed: u64,
    /// Run directory written by `train`.
    pub output_dir: PathBuf,
    pub data: DataSection,
    pub model: ModelSection,
    pub train: TrainSection,
    pub eval: EvalSection,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            output_dir: PathBuf::from("runs/default"),
            data: DataSection::default(),
            model: ModelSection::default(),
            train: TrainSection::default(),
            eval: EvalSection::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    /// JSONL manifest; relative paths inside it resolve against its directory.
    pub manifest: PathBuf,
    /// Short-edge range sampled per training image (inclusive).
    pub train_short_edge: [usize; 2],
    pub test_short_edge: usize,
    pub max_long_edge: usize,
    pub synth: SynthSection,
}

impl Default for DataSection {
    fn default() -> Self {
        Self {
            manifest: PathBuf::from("data/synth/manifest.jsonl"),
            train_short_edge: [64, 64],
            test_short_edge: 64,
            max_long_edge: 128,
            synth: SynthSection::default(),
        }
    }
}

/// Generator settings used by `generate-data`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthSection {
    pub width: usize,
    pub height: usize,
    pub num_train: usize,
    pub num_test: usize,
    pub normal_fraction: f32,
    pub train_textures: Vec<String>,
    pub test_textures: Vec<String>,
    pub defect_kinds: Vec<String>,
    pub max_defects: usize,
    pub defect_contrast: [f32; 2],
    pub texture_contrast: [f32; 2],
    pub texture_period: [f32; 2],
    pub defect_size: [f32; 2],
    pub sensor_noise: f32,
    pub visibility_threshold: f32,
}

impl Default for SynthSection {
    fn default() -> Self {
        Self::from_core(&SynthConfig::default())
    }
}

impl SynthSection {
    pub fn from_core(c: &SynthConfig) -> Self {
        let names = |v: &[TextureFamily]| v.iter().map(|t| t.name().to_string()).collect();
        Self {
            width: c.width,
            height: c.height,
            num_train: c.num_train,
            num_test: c.num_test,
            normal_fraction: c.normal_fraction,
            train_textures: names(&c.train_textures),
            test_textures: names(&c.test_textures),
            defect_kinds: c.defect_kinds.iter().map(|k| k.name().to_string()).collect(),
            max_defects: c.max_defects,
            defect_contrast: [c.defect_contrast.0, c.defect_contrast.1],
            texture_contrast: [c.texture_contrast.0, c.texture_contrast.1],
            texture_period: [c.texture_period.0, c.texture_period.1],
            defect_size: [c.defect_size.0, c.defect_size.1],
            sensor_noise: c.sensor_noise,
            visibility_threshold: c.visibility_threshold,
        }
    }

    pub fn to_core(&self) -> Result<SynthConfig> {
        let texture = |s: &String| match s.as_str() {
            "stripes" => Ok(TextureFamily::Stripes),
            "checkers" => Ok(TextureFamily::Checkers),
            "noise" => Ok(TextureFamily::Noise),
            "solid" => Ok(TextureFamily::Solid),
            other => Err(Error::Config(format!("unknown texture family `{other}`"))),
        };
        let kind = |s: &String| match s.as_str() {
            "scratch" => Ok(DefectKind::Scratch),
            "blob" => Ok(DefectKind::Blob),
            "stain" => Ok(DefectKind::Stain),
            other => Err(Error::Config(format!("unknown defect kind `{other}`"))),
        };
        let cfg = SynthConfig {
            width: self.width,
            height: self.height,
            num_train: self.num_train,
            num_test: self.num_test,
            normal_fraction: self.normal_fraction,
            train_textures: self.train_textures.iter().map(texture).collect::<Result<_>>()?,
            test_textures: self.test_textures.iter().map(texture).collect::<Result<_>>()?,
            defect_kinds: self.defect_kinds.iter().map(kind).collect::<Result<_>>()?,
            max_defects: self.max_defects,
            defect_contrast: (self.defect_contrast[0], self.defect_contrast[1]),
            texture_contrast: (self.texture_contrast[0], self.texture_contrast[1]),
            texture_period: (self.texture_period[0], self.texture_period[1]),
            defect_size: (self.defect_size[0], self.defect_size[1]),
            sensor_noise: self.sensor_noise,
            visibility_threshold: self.visibility_threshold,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TemplateModeName {
    None,
    Pre,
    Inter,
    Post,
    PtgInter,
}

impl From<TemplateModeName> for TemplateMode {
    fn from(m: TemplateModeName) -> Self {
        match m {
            TemplateModeName::None => TemplateMode::None,
            TemplateModeName::Pre => TemplateMode::Pre,
            TemplateModeName::Inter => TemplateMode::Inter,
            TemplateModeName::Post => TemplateMode::Post,
            TemplateModeName::PtgInter => TemplateMode::PtgInter,
        }
    }
}

impl From<TemplateMode> for TemplateModeName {
    fn from(m: TemplateMode) -> Self {
        match m {
            TemplateMode::None => TemplateModeName::None,
            TemplateMode::Pre => TemplateModeName::Pre,
            TemplateMode::Inter => TemplateModeName::Inter,
            TemplateMode::Post => TemplateModeName::Post,
            TemplateMode::PtgInter => TemplateModeName::PtgInter,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ContextModeName {
    Off,
    Concat,
    Only,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub num_classes: usize,
    pub stage_channels: [usize; 4],
    pub blocks_per_stage: usize,
    pub fpn_channels: usize,
    /// Anchor side length on P2..P5.
    pub anchor_sizes: [f32; 4],
    pub anchor_ratios: Vec<f32>,
    pub template: TemplateModeName,
    /// Detection gradients reach the template branch under `inter`.
    pub template_grad: bool,
    pub ptg: PtgSection,
    pub context: ContextSection,
    pub rpn: RpnSection,
    pub roi: RoiSection,
    pub postprocess: PostprocessSection,
    pub smooth_l1_beta: f32,
    pub pixel_mean: [f32; 3],
    pub pixel_std: [f32; 3],
}

impl Default for ModelSection {
    fn default() -> Self {
        let norm = NormalizationParams::default();
        Self {
            num_classes: 3,
            stage_channels: [16, 24, 32, 48],
            blocks_per_stage: 1,
            fpn_channels: 32,
            anchor_sizes: [12.0, 24.0, 48.0, 96.0],
            anchor_ratios: vec![0.5, 1.0, 2.0],
            template: TemplateModeName::None,
            template_grad: true,
            ptg: PtgSection::default(),
            context: ContextSection::default(),
            rpn: RpnSection::default(),
            roi: RoiSection::default(),
            postprocess: PostprocessSection::default(),
            smooth_l1_beta: 1.0,
            pixel_mean: norm.mean,
            pixel_std: norm.std,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PtgSection {
    pub hidden: usize,
    pub kernel: usize,
    /// `mse` or `l2`.
    pub loss: String,
    pub loss_weight: f32,
}

impl Default for PtgSection {
    fn default() -> Self {
        Self {
            hidden: 16,
            kernel: 3,
            loss: "mse".into(),
            loss_weight: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ContextSection {
    pub mode: ContextModeName,
    pub k: f32,
    pub share_fc: bool,
}

impl Default for ContextSection {
    fn default() -> Self {
        Self {
            mode: ContextModeName::Off,
            k: 1.5,
            share_fc: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RpnSection {
    pub pos_iou: f32,
    pub neg_iou: f32,
    pub force_best: bool,
    pub batch: usize,
    pub pos_fraction: f32,
    pub nms_threshold: f32,
    pub train_pre_nms: usize,
    pub train_post_nms: usize,
    pub test_pre_nms: usize,
    pub test_post_nms: usize,
}

impl Default for RpnSection {
    fn default() -> Self {
        let a = RpnAssignConfig::default();
        Self {
            pos_iou: a.pos_iou,
            neg_iou: a.neg_iou,
            force_best: a.force_best,
            batch: 64,
            pos_fraction: 0.5,
            nms_threshold: 0.7,
            train_pre_nms: 1000,
            train_post_nms: 200,
            test_pre_nms: 1000,
            test_post_nms: 100,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RoiSection {
    pub pooled: usize,
    pub sampling: usize,
    pub fc_dim: usize,
    /// Base constant of the proposal-to-level rule.
    pub canonical_scale: f32,
    pub batch: usize,
    pub max_positive: usize,
    pub pos_iou: f32,
    pub delta_stds: [f32; 4],
}

impl Default for RoiSection {
    fn default() -> Self {
        Self {
            pooled: 7,
            sampling: 2,
            fc_dim: 128,
            canonical_scale: 4.0,
            batch: 64,
            max_positive: 16,
            pos_iou: 0.5,
            delta_stds: [0.1, 0.1, 0.2, 0.2],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PostprocessSection {
    pub score_threshold: f32,
    pub nms_threshold: f32,
    pub max_detections: usize,
}

impl Default for PostprocessSection {
    fn default() -> Self {
        let p = PostprocessConfig::default();
        Self {
            score_threshold: p.score_threshold,
            nms_threshold: p.nms_threshold,
            max_detections: p.max_detections,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerName {
    Sgd,
    Adam,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub optimizer: OptimizerName,
    pub lr: f32,
    pub momentum: f32,
    pub weight_decay: f32,
    pub batch_size: usize,
    pub epochs: usize,
    /// Epochs (1-based, counted as completed) after which the lr decays.
    pub decay_epochs: Vec<usize>,
    pub decay_factor: f32,
    /// `None` means `min(500, 10% of all iterations)`.
    pub warmup_iters: Option<usize>,
    pub warmup_ratio: f32,
    pub clip_grad_norm: Option<f32>,
    /// Stop after this many iterations regardless of epochs.
    pub max_iters: Option<usize>,
    /// Evaluate on the test split after every epoch.
    pub eval_each_epoch: bool,
    pub checkpoint_every_epochs: usize,
    /// Random translation of training candidates (not templates), in pixels.
    pub pixel_shift: Option<[usize; 2]>,
}

impl Default for TrainSection {
    fn default() -> Self {
        Self {
            optimizer: OptimizerName::Adam,
            lr: 1e-3,
            momentum: 0.9,
            weight_decay: 1e-4,
            batch_size: 2,
            epochs: 12,
            decay_epochs: vec![8, 11],
            decay_factor: 0.1,
            warmup_iters: None,
            warmup_ratio: 0.001,
            clip_grad_norm: Some(10.0),
            max_iters: None,
            eval_each_epoch: false,
            checkpoint_every_epochs: 1,
            pixel_shift: None,
        }
    }
}

impl TrainSection {
    pub fn optimizer_kind(&self) -> OptimizerKind {
        match self.optimizer {
            OptimizerName::Sgd => OptimizerKind::Sgd {
                momentum: self.momentum,
                weight_decay: self.weight_decay,
            },
            OptimizerName::Adam => OptimizerKind::Adam {
                beta1: 0.9,
                beta2: 0.999,
                eps: 1e-8,
                weight_decay: self.weight_decay,
            },
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ApMethodName {
    AllPoint,
    ElevenPoint,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    pub iou_threshold: f32,
    pub ap_method: ApMethodName,
    /// Range of the per-axis translation used for the shifted test set.
    pub shift_px: Option<[usize; 2]>,
    /// Seed of the shift draws, so every model sees the same shifted set.
    pub shift_seed: u64,
    /// Score threshold for rendered overlays.
    pub render_threshold: f32,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self {
            iou_threshold: 0.5,
            ap_method: ApMethodName::AllPoint,
            shift_px: Some([5, 10]),
            shift_seed: 1234,
            render_threshold: 0.8,
        }
    }
}

impl EvalSection {
    pub fn ap_method(&self) -> ApMethod {
        match self.ap_method {
            ApMethodName::AllPoint => ApMethod::AllPoint,
            ApMethodName::ElevenPoint => ApMethod::ElevenPoint,
        }
    }
}

/// All config floats are `f32`; printing them through `f64` would show
/// widening noise (`0.699999988`). The shortest `f32` decimal parses back to
/// the identical `f32`.
fn shorten_floats(v: &mut toml::Value) {
    match v {
        toml::Value::Float(f) => *f = (*f as f32).to_string().parse().unwrap_or(*f),
        toml::Value::Array(a) => a.iter_mut().for_each(shorten_floats),
        toml::Value::Table(t) => t.iter_mut().for_each(|(_, x)| shorten_floats(x)),
        _ => {}
    }
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        let mut value = toml::Value::try_from(self).expect("config is always representable as TOML");
        shorten_floats(&mut value);
        toml::to_string(&value).expect("config is always representable as TOML")
    }

    /// Every default spelled out, as written by `--dump-defaults`.
    pub fn defaults_toml() -> String {
        Self::default().to_toml()
    }

    pub fn validate(&self) -> Result<()> {
        self.detector_config()?;
        self.data.synth.to_core()?;
        let t = &self.train;
        if t.batch_size == 0 {
            return Err(Error::Config("train.batch_size must be at least 1".into()));
        }
        if !(t.lr > 0.0) || !(t.decay_factor > 0.0) || !(0.0..=1.0).contains(&t.warmup_ratio) {
            return Err(Error::Config(
                "train.lr, decay_factor and warmup_ratio must be positive".into(),
            ));
        }
        if t.decay_epochs.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Config("train.decay_epochs must be strictly increasing".into()));
        }
        if let Some([lo, hi]) = t.pixel_shift {
            if lo > hi {
                return Err(Error::Config("train.pixel_shift range is reversed".into()));
            }
        }
        if let Some([lo, hi]) = self.eval.shift_px {
            if lo > hi {
                return Err(Error::Config("eval.shift_px range is reversed".into()));
            }
        }
        if !(0.0..=1.0).contains(&self.eval.iou_threshold) || !(0.0..=1.0).contains(&self.eval.render_threshold) {
            return Err(Error::Config("eval thresholds must lie in [0, 1]".into()));
        }
        let d = &self.data;
        if d.train_short_edge[0] == 0 || d.train_short_edge[0] > d.train_short_edge[1] {
            return Err(Error::Config("data.train_short_edge must be a non-empty range".into()));
        }
        if d.test_short_edge == 0 || d.max_long_edge == 0 {
            return Err(Error::Config("data edge sizes must be positive".into()));
        }
        Ok(())
    }

    pub fn template_mode(&self) -> TemplateMode {
        self.model.template.into()
    }

    pub fn resize(&self) -> ResizeConfig {
        ResizeConfig {
            train_short: (self.data.train_short_edge[0], self.data.train_short_edge[1]),
            test_short: self.data.test_short_edge,
            max_long: self.data.max_long_edge,
        }
    }

    /// The core detector configuration this experiment describes.
    pub fn detector_config(&self) -> Result<DetectorConfig> {
        let m = &self.model;
        let loss = match m.ptg.loss.as_str() {
            "mse" => ReconstructionLoss::Mse,
            "l2" => ReconstructionLoss::L2,
            other => return Err(Error::Config(format!("unknown ptg loss `{other}`"))),
        };
        let context = match m.context.mode {
            ContextModeName::Off => ContextMode::Off,
            ContextModeName::Concat => ContextMode::Concat,
            ContextModeName::Only => ContextMode::Only,
        };
        let r = &m.rpn;
        let cfg = DetectorConfig {
            num_classes: m.num_classes,
            backbone: BackboneConfig {
                in_channels: 3,
                stage_channels: m.stage_channels,
                blocks_per_stage: m.blocks_per_stage,
            },
            fpn_channels: m.fpn_channels,
            anchors: AnchorConfig {
                sizes: m.anchor_sizes,
                ratios: m.anchor_ratios.clone(),
            },
            rpn: RpnConfig {
                assign: RpnAssignConfig {
                    pos_iou: r.pos_iou,
                    neg_iou: r.neg_iou,
                    force_best: r.force_best,
                },
                batch: r.batch,
                pos_fraction: r.pos_fraction,
                train_proposals: ProposalConfig {
                    pre_nms_top: r.train_pre_nms,
                    post_nms_top: r.train_post_nms,
                    nms_threshold: r.nms_threshold,
                },
                test_proposals: ProposalConfig {
                    pre_nms_top: r.test_pre_nms,
                    post_nms_top: r.test_post_nms,
                    nms_threshold: r.nms_threshold,
                },
                delta_stds: [1.0; 4],
            },
            roi: RoiConfig {
                head: RoiHeadConfig {
                    pooled: m.roi.pooled,
                    sampling: m.roi.sampling,
                    fc_dim: m.roi.fc_dim,
                    canonical_scale: m.roi.canonical_scale,
                    context,
                    context_k: m.context.k,
                    share_context_fc: m.context.share_fc,
                },
                sampler: RoiSamplerConfig {
                    batch: m.roi.batch,
                    max_positive: m.roi.max_positive,
                },
                pos_iou: m.roi.pos_iou,
                delta_stds: m.roi.delta_stds,
            },
            template: m.template.into(),
            ptg: PtgConfig {
                hidden: m.ptg.hidden,
                kernel: m.ptg.kernel,
                loss,
                loss_weight: m.ptg.loss_weight,
            },
            normalization: NormalizationParams {
                mean: m.pixel_mean,
                std: m.pixel_std,
            },
            postprocess: PostprocessConfig {
                score_threshold: m.postprocess.score_threshold,
                nms_threshold: m.postprocess.nms_threshold,
                max_detections: m.postprocess.max_detections,
            },
            smooth_l1_beta: m.smooth_l1_beta,
            template_grad: m.template_grad,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// Hash of the settings that determine the parameter set and its values:
    /// model architecture, training recipe, data location and seed.
    ///
    /// Eval-only knobs are excluded, and so is the choice between `none` and
    /// `post`: both train the same network, and re-scoring is applied at
    /// evaluation time.
    pub fn fingerprint(&self) -> String {
        let mut model = self.model.clone();
        if model.template == TemplateModeName::Post {
            model.template = TemplateModeName::None;
        }
        model.postprocess = PostprocessSection::default();
        model.rpn.test_pre_nms = 0;
        model.rpn.test_post_nms = 0;
        #[derive(Serialize)]
        struct Key<'a> {
            seed: u64,
            manifest: &'a Path,
            train_short_edge: [usize; 2],
            model: &'a ModelSection,
            train: &'a TrainSection,
        }
        let mut train = self.train.clone();
        train.eval_each_epoch = false;
        train.checkpoint_every_epochs = 0;
        let key = Key {
            seed: self.seed,
            manifest: &self.data.manifest,
            train_short_edge: self.data.train_short_edge,
            model: &model,
            train: &train,
        };
        let text = toml::to_string(&key).expect("fingerprint key serializes");
        let digest = Sha256::digest(text.as_bytes());
        let mut out = String::with_capacity(16);
        for b in &digest[..8] {
            let _ = write!(out, "{b:02x}");
        }
        out
    }
}
