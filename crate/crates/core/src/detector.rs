//! Two-stage detector assembly: backbone, optional template reference at one
//! of three points, pyramid, RPN, ROI head with optional context regions.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;

use crate::backbone::{Backbone, BackboneConfig, FeaturePyramid, Fpn, StageFeatures, STAGE_STRIDES};
use crate::error::{invalid, shape_err, Result};
use crate::eval::{postprocess, DetectionResult, PostprocessConfig};
use crate::geometry::{generate_anchors, AnchorGrid, BBox, BoxCoder};
use crate::graph::{softmax_rows, Graph, Var};
use crate::heads::{
    assign_roi_labels, assign_rpn_labels, generate_proposals, roi_losses, rpn_losses, sample_anchors, sample_roi_batch,
    ContextMode, Proposal, ProposalConfig, RoiHead, RoiHeadConfig, RoiSamplerConfig, RpnAssignConfig, RpnHead,
    RpnLevelOutput,
};
use crate::params::ParamStore;
use crate::template::{
    mean_pre, subtract_stages, tr_post_rescore, tr_pre, NormalizationParams, PseudoTemplateGenerator, PtgConfig,
};
use crate::tensor::Tensor;

/// Where the template enters the detector.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum TemplateMode {
    #[default]
    None,
    /// Template-subtracted input image.
    Pre,
    /// Stage features minus template stage features.
    Inter,
    /// Eval-time re-scoring by region embedding similarity.
    Post,
    /// Stage features minus generated pseudo-template features.
    PtgInter,
}

impl TemplateMode {
    pub fn requires_template(self) -> bool {
        matches!(self, Self::Pre | Self::Inter | Self::Post)
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::None => "none",
            Self::Pre => "pre",
            Self::Inter => "inter",
            Self::Post => "post",
            Self::PtgInter => "ptg-inter",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AnchorConfig {
    /// Anchor side per level P2..P5.
    pub sizes: [f32; 4],
    /// Height/width ratios.
    pub ratios: Vec<f32>,
}

impl Default for AnchorConfig {
    fn default() -> Self {
        Self {
            sizes: [32.0, 64.0, 128.0, 256.0],
            ratios: vec![0.5, 1.0, 2.0],
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RpnConfig {
    pub assign: RpnAssignConfig,
    pub batch: usize,
    pub pos_fraction: f32,
    pub train_proposals: ProposalConfig,
    pub test_proposals: ProposalConfig,
    pub delta_stds: [f32; 4],
}

impl Default for RpnConfig {
    fn default() -> Self {
        Self {
            assign: RpnAssignConfig::default(),
            batch: 256,
            pos_fraction: 0.5,
            train_proposals: ProposalConfig::default(),
            test_proposals: ProposalConfig::default(),
            delta_stds: [1.0; 4],
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RoiConfig {
    pub head: RoiHeadConfig,
    pub sampler: RoiSamplerConfig,
    pub pos_iou: f32,
    pub delta_stds: [f32; 4],
}

impl Default for RoiConfig {
    fn default() -> Self {
        Self {
            head: RoiHeadConfig::default(),
            sampler: RoiSamplerConfig::default(),
            pos_iou: 0.5,
            delta_stds: [0.1, 0.1, 0.2, 0.2],
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DetectorConfig {
    pub num_classes: usize,
    pub backbone: BackboneConfig,
    pub fpn_channels: usize,
    pub anchors: AnchorConfig,
    pub rpn: RpnConfig,
    pub roi: RoiConfig,
    pub template: TemplateMode,
    pub ptg: PtgConfig,
    pub normalization: NormalizationParams,
    pub postprocess: PostprocessConfig,
    pub smooth_l1_beta: f32,
    /// Let detection gradients flow into the template branch of `Inter`.
    pub template_grad: bool,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        Self {
            num_classes: 3,
            backbone: BackboneConfig::default(),
            fpn_channels: 256,
            anchors: AnchorConfig::default(),
            rpn: RpnConfig::default(),
            roi: RoiConfig::default(),
            template: TemplateMode::None,
            ptg: PtgConfig::default(),
            normalization: NormalizationParams::default(),
            postprocess: PostprocessConfig::default(),
            smooth_l1_beta: 1.0,
            template_grad: true,
        }
    }
}

impl DetectorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_classes == 0 {
            return Err(invalid("num_classes must be at least 1"));
        }
        if self.anchors.ratios.is_empty() || self.anchors.ratios.iter().any(|r| !(*r > 0.0)) {
            return Err(invalid("anchor ratios must be positive and non-empty"));
        }
        if self.anchors.sizes.iter().any(|s| !(*s > 0.0)) {
            return Err(invalid("anchor sizes must be positive"));
        }
        if self.roi.head.context != ContextMode::Off && !(self.roi.head.context_k > 1.0) {
            return Err(invalid(format!(
                "context coefficient k must exceed 1, got {}",
                self.roi.head.context_k
            )));
        }
        if self.roi.head.pooled == 0 || self.roi.head.sampling == 0 || self.roi.head.fc_dim == 0 {
            return Err(invalid("roi head sizes must be positive"));
        }
        if self.roi.sampler.batch == 0 || self.rpn.batch == 0 {
            return Err(invalid("sampling batch sizes must be positive"));
        }
        if !(0.0..=1.0).contains(&self.rpn.pos_fraction) {
            return Err(invalid("rpn pos_fraction must lie in [0, 1]"));
        }
        if self.fpn_channels == 0 || self.backbone.stage_channels.contains(&0) {
            return Err(invalid("channel counts must be positive"));
        }
        if self.ptg.hidden == 0 || self.ptg.kernel == 0 || self.ptg.kernel.is_multiple_of(2) {
            return Err(invalid("ptg hidden width must be positive and kernel odd"));
        }
        self.normalization.validate()
    }
}

/// Inference stages reported to a [`Profiler`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Stage {
    Backbone,
    Ptg,
    Fpn,
    Rpn,
    RoiHead,
    Postprocess,
}

impl Stage {
    pub const ALL: [Stage; 6] = [
        Stage::Backbone,
        Stage::Ptg,
        Stage::Fpn,
        Stage::Rpn,
        Stage::RoiHead,
        Stage::Postprocess,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Backbone => "backbone",
            Stage::Ptg => "ptg",
            Stage::Fpn => "fpn",
            Stage::Rpn => "rpn",
            Stage::RoiHead => "roi_head",
            Stage::Postprocess => "postprocess",
        }
    }

    /// Parameter-name prefix owned by this stage.
    fn param_prefix(self) -> Option<&'static str> {
        match self {
            Stage::Backbone => Some("backbone/"),
            Stage::Ptg => Some("ptg/"),
            Stage::Fpn => Some("fpn/"),
            Stage::Rpn => Some("rpn/"),
            Stage::RoiHead => Some("roi/"),
            Stage::Postprocess => None,
        }
    }
}

/// Timing hooks around inference stages. Stages never nest.
pub trait Profiler {
    fn enter(&mut self, _stage: Stage) {}
    fn exit(&mut self, _stage: Stage) {}
}

impl Profiler for () {}

/// One training image with its annotations.
#[derive(Debug, Clone, Copy)]
pub struct TrainInput<'a> {
    /// `[3, H, W]` in 0..255.
    pub image: &'a Tensor,
    pub template: Option<&'a Tensor>,
    pub boxes: &'a [BBox],
    pub labels: &'a [usize],
}

/// Loss nodes of one image.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainLosses {
    pub rpn_cls: Var,
    pub rpn_reg: Var,
    pub roi_cls: Option<Var>,
    pub roi_reg: Option<Var>,
    pub ptg: Option<Var>,
    pub total: Var,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Detector {
    pub config: DetectorConfig,
    backbone: Backbone,
    fpn: Fpn,
    rpn: RpnHead,
    roi: RoiHead,
    ptg: Option<PseudoTemplateGenerator>,
}

impl Detector {
    /// Registers every parameter in `store` (generator parameters only in
    /// `PtgInter` mode).
    pub fn new<R: Rng + ?Sized>(config: &DetectorConfig, store: &mut ParamStore, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let backbone = Backbone::new(store, &config.backbone, rng);
        let fpn = Fpn::new(store, config.backbone.stage_channels, config.fpn_channels, rng);
        let ptg = (config.template == TemplateMode::PtgInter)
            .then(|| PseudoTemplateGenerator::new(store, config.backbone.stage_channels, &config.ptg, rng));
        let rpn = RpnHead::new(store, config.fpn_channels, config.anchors.ratios.len(), rng);
        let roi = RoiHead::new(store, config.fpn_channels, config.num_classes, &config.roi.head, rng);
        Ok(Self {
            config: config.clone(),
            backbone,
            fpn,
            rpn,
            roi,
            ptg,
        })
    }

    pub fn roi_head(&self) -> &RoiHead {
        &self.roi
    }

    pub fn has_ptg(&self) -> bool {
        self.ptg.is_some()
    }

    /// Parameter count per stage, in [`Stage::ALL`] order.
    pub fn parameter_counts(&self, store: &ParamStore) -> Vec<(Stage, usize)> {
        Stage::ALL
            .iter()
            .map(|&s| (s, s.param_prefix().map_or(0, |p| store.count_with_prefix(p))))
            .collect()
    }

    fn check_pair(image: &Tensor, template: Option<&Tensor>, mode: TemplateMode) -> Result<()> {
        let s = image.shape();
        if s.len() != 3 || s[0] != 3 {
            return Err(shape_err("image", &[3, 0, 0], s));
        }
        match template {
            Some(t) if t.shape() != s => Err(shape_err("template", s, t.shape())),
            None if mode.requires_template() => {
                Err(invalid(format!("template mode {} needs a template image", mode.name())))
            }
            _ => Ok(()),
        }
    }

    fn stages(&self, g: &mut Graph<'_>, input: Tensor, prof: &mut dyn Profiler) -> Result<StageFeatures> {
        prof.enter(Stage::Backbone);
        let x = g.input(input);
        let out = self.backbone.extract_stages(g, x);
        prof.exit(Stage::Backbone);
        out
    }

    /// Feature pyramid under the configured template mode. `Post` behaves as
    /// the plain detector here.
    pub fn pyramid(
        &self,
        g: &mut Graph<'_>,
        image: &Tensor,
        template: Option<&Tensor>,
        prof: &mut dyn Profiler,
    ) -> Result<FeaturePyramid> {
        let mode = self.config.template;
        Self::check_pair(image, template, mode)?;
        let norm = &self.config.normalization;
        let stages = match mode {
            TemplateMode::None | TemplateMode::Post => self.stages(g, mean_pre(image, norm)?, prof)?,
            TemplateMode::Pre => {
                let t = template.ok_or_else(|| invalid("missing template"))?;
                self.stages(g, tr_pre(image, t, norm)?, prof)?
            }
            TemplateMode::Inter => {
                let t = template.ok_or_else(|| invalid("missing template"))?;
                let si = self.stages(g, mean_pre(image, norm)?, prof)?;
                let mut st = self.stages(g, mean_pre(t, norm)?, prof)?;
                if !self.config.template_grad {
                    for v in st.0.iter_mut() {
                        *v = g.detach(*v);
                    }
                }
                subtract_stages(g, &si, &st)?
            }
            TemplateMode::PtgInter => {
                let si = self.stages(g, mean_pre(image, norm)?, prof)?;
                let ptg = self.ptg.as_ref().ok_or_else(|| invalid("generator missing"))?;
                prof.enter(Stage::Ptg);
                let pseudo = ptg.ptg_forward(g, &si);
                prof.exit(Stage::Ptg);
                subtract_stages(g, &si, &pseudo?)?
            }
        };
        prof.enter(Stage::Fpn);
        let p = self.fpn.build_fpn(g, &stages);
        prof.exit(Stage::Fpn);
        p
    }

    fn anchors_for(&self, g: &Graph<'_>, pyramid: &FeaturePyramid) -> Result<AnchorGrid> {
        let shapes: Vec<(usize, usize)> = pyramid
            .0
            .iter()
            .map(|&p| {
                let (_, h, w) = g.value(p).chw();
                (h, w)
            })
            .collect();
        let strides: Vec<f32> = STAGE_STRIDES.iter().map(|&s| s as f32).collect();
        generate_anchors(
            &shapes,
            &strides,
            &self.config.anchors.sizes,
            &self.config.anchors.ratios,
        )
    }

    fn proposals(
        &self,
        g: &Graph<'_>,
        outs: &[RpnLevelOutput],
        anchors: &AnchorGrid,
        w: f32,
        h: f32,
        cfg: &ProposalConfig,
    ) -> Result<Vec<Proposal>> {
        let obj: Vec<&[f32]> = outs.iter().map(|o| g.value(o.objectness).data()).collect();
        let del: Vec<&[f32]> = outs.iter().map(|o| g.value(o.deltas).data()).collect();
        let coder = BoxCoder::with_stds(self.config.rpn.delta_stds);
        generate_proposals(&obj, &del, anchors, &coder, w, h, cfg)
    }

    /// Builds every training loss for one image on a recording graph.
    ///
    /// `normal`, when given in `PtgInter` mode, is a defect-free image whose
    /// (detached) stage features supervise the generator.
    pub fn train_losses<R: Rng + ?Sized>(
        &self,
        g: &mut Graph<'_>,
        input: &TrainInput<'_>,
        normal: Option<&Tensor>,
        rng: &mut R,
    ) -> Result<TrainLosses> {
        if input.boxes.len() != input.labels.len() {
            return Err(invalid("boxes and labels differ in length"));
        }
        if input.labels.iter().any(|&l| l == 0 || l > self.config.num_classes) {
            return Err(invalid("label outside 1..=num_classes"));
        }
        let (_, h, w) = input.image.chw();
        let (wf, hf) = (w as f32, h as f32);
        let pyramid = self.pyramid(g, input.image, input.template, &mut ())?;
        let outs = self.rpn.rpn_forward(g, &pyramid)?;
        let anchors = self.anchors_for(g, &pyramid)?;
        let flat = anchors.flat();
        let labels = assign_rpn_labels(&flat, input.boxes, &self.config.rpn.assign);
        let (pos, neg) = sample_anchors(&labels, self.config.rpn.batch, self.config.rpn.pos_fraction, rng);
        let beta = self.config.smooth_l1_beta;
        let rpn_coder = BoxCoder::with_stds(self.config.rpn.delta_stds);
        let (rpn_cls, rpn_reg) = rpn_losses(g, &outs, &anchors, &labels, &pos, &neg, input.boxes, &rpn_coder, beta)?;

        let props: Vec<BBox> = self
            .proposals(g, &outs, &anchors, wf, hf, &self.config.rpn.train_proposals)?
            .into_iter()
            .map(|p| p.bbox)
            .collect();
        let roi_coder = BoxCoder::with_stds(self.config.roi.delta_stds);
        let assign = assign_roi_labels(&props, input.boxes, input.labels, self.config.roi.pos_iou, &roi_coder)?;
        let batch = sample_roi_batch(&assign, &self.config.roi.sampler, rng);
        let (roi_cls, roi_reg) = if batch.is_empty() {
            (None, None)
        } else {
            let boxes: Vec<BBox> = batch.indices.iter().map(|&i| assign.boxes[i]).collect();
            let out = self.roi.forward_boxes(g, &pyramid, &boxes, wf, hf)?;
            let (c, r) = roi_losses(g, &out, &batch, self.config.num_classes, beta)?;
            (Some(c), Some(r))
        };

        let ptg = match (&self.ptg, normal) {
            (Some(gen), Some(n)) => {
                let sn = self.stages(g, mean_pre(n, &self.config.normalization)?, &mut ())?;
                let mut detached = sn.0;
                for v in detached.iter_mut() {
                    *v = g.detach(*v);
                }
                Some(gen.ptg_loss(g, &StageFeatures(detached))?)
            }
            _ => None,
        };

        let mut terms = vec![(rpn_cls, 1.0), (rpn_reg, 1.0)];
        terms.extend(roi_cls.map(|v| (v, 1.0)));
        terms.extend(roi_reg.map(|v| (v, 1.0)));
        terms.extend(ptg.map(|v| (v, self.config.ptg.loss_weight)));
        let total = g.weighted_sum(&terms)?;
        Ok(TrainLosses {
            rpn_cls,
            rpn_reg,
            roi_cls,
            roi_reg,
            ptg,
            total,
        })
    }

    /// Runs inference on one `[3, H, W]` image (0..255 scale).
    pub fn detect(
        &self,
        store: &ParamStore,
        image: &Tensor,
        template: Option<&Tensor>,
        prof: &mut dyn Profiler,
    ) -> Result<DetectionResult> {
        Ok(self.detect_raw(store, image, template, prof)?.result)
    }

    /// Inference returning the pre-NMS region scores and boxes as well.
    pub fn detect_raw(
        &self,
        store: &ParamStore,
        image: &Tensor,
        template: Option<&Tensor>,
        prof: &mut dyn Profiler,
    ) -> Result<RawDetections> {
        let mut g = Graph::inference(store);
        let (_, h, w) = image.chw();
        let (wf, hf) = (w as f32, h as f32);
        let pyramid = self.pyramid(&mut g, image, template, prof)?;

        prof.enter(Stage::Rpn);
        let outs = self.rpn.rpn_forward(&mut g, &pyramid);
        let props = match outs {
            Ok(outs) => self
                .anchors_for(&g, &pyramid)
                .and_then(|anchors| self.proposals(&g, &outs, &anchors, wf, hf, &self.config.rpn.test_proposals)),
            Err(e) => Err(e),
        };
        prof.exit(Stage::Rpn);
        let proposals: Vec<BBox> = props?.into_iter().map(|p| p.bbox).collect();

        let c = self.config.num_classes;
        let k = c + 1;
        if proposals.is_empty() {
            return Ok(RawDetections {
                proposals,
                scores: Vec::new(),
                boxes: Vec::new(),
                result: DetectionResult::default(),
            });
        }

        prof.enter(Stage::RoiHead);
        let head = self.roi.forward_boxes(&mut g, &pyramid, &proposals, wf, hf);
        prof.exit(Stage::RoiHead);
        let head = head?;
        let mut scores = softmax_rows(g.value(head.cls_logits).data(), k);
        let deltas = g.value(head.deltas).data();
        let coder = BoxCoder::with_stds(self.config.roi.delta_stds);
        let mut boxes = Vec::with_capacity(proposals.len() * c);
        for (r, p) in proposals.iter().enumerate() {
            for cls in 0..c {
                let off = r * 4 * c + cls * 4;
                boxes.push(coder.decode(p, &deltas[off..off + 4]).clip(wf, hf));
            }
        }

        if self.config.template == TemplateMode::Post {
            let t = template.ok_or_else(|| invalid("template mode post needs a template image"))?;
            scores = self.tr_post_scores(&mut g, &scores, &proposals, head.region_embedding, t, prof)?;
        }

        prof.enter(Stage::Postprocess);
        let result = postprocess(&scores, &boxes, c, &self.config.postprocess);
        prof.exit(Stage::Postprocess);
        Ok(RawDetections {
            proposals,
            scores,
            boxes,
            result: result?,
        })
    }

    fn tr_post_scores(
        &self,
        g: &mut Graph<'_>,
        scores: &[f32],
        proposals: &[BBox],
        region_embedding: Option<Var>,
        template: &Tensor,
        prof: &mut dyn Profiler,
    ) -> Result<Vec<f32>> {
        let fi = match region_embedding {
            Some(v) => v,
            None => {
                return Err(invalid(
                    "template re-scoring needs region features; context-only heads are unsupported",
                ))
            }
        };
        let st = self.stages(g, mean_pre(template, &self.config.normalization)?, prof)?;
        prof.enter(Stage::Fpn);
        let pt = self.fpn.build_fpn(g, &st);
        prof.exit(Stage::Fpn);
        let pt = pt?;
        prof.enter(Stage::RoiHead);
        let ft = self
            .roi
            .roi_align(g, &pt, proposals)
            .and_then(|pooled| self.roi.region_embedding(g, pooled));
        prof.exit(Stage::RoiHead);
        let ft = ft?;
        let dim = self.config.roi.head.fc_dim;
        tr_post_rescore(
            scores,
            self.config.num_classes + 1,
            g.value(fi).data(),
            g.value(ft).data(),
            dim,
        )
    }
}

/// Inference output before and after post-processing.
#[derive(Debug, Clone, PartialEq)]
pub struct RawDetections {
    pub proposals: Vec<BBox>,
    /// `[n, c + 1]` softmax scores (re-scored under `Post`).
    pub scores: Vec<f32>,
    /// `[n, c]` decoded, clipped class-specific boxes.
    pub boxes: Vec<BBox>,
    pub result: DetectionResult,
}

/// Human-readable stage summary used by reports.
pub fn describe(config: &DetectorConfig) -> String {
    let ctx = match config.roi.head.context {
        ContextMode::Off => String::from("off"),
        ContextMode::Concat => format!("k={}", config.roi.head.context_k),
        ContextMode::Only => format!("only k={}", config.roi.head.context_k),
    };
    format!("template={} context={}", config.template.name(), ctx)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    pub(crate) fn tiny(mode: TemplateMode, ctx: ContextMode) -> DetectorConfig {
        let mut c = DetectorConfig {
            num_classes: 2,
            backbone: BackboneConfig {
                in_channels: 3,
                stage_channels: [4, 4, 8, 8],
                blocks_per_stage: 1,
            },
            fpn_channels: 8,
            template: mode,
            ..DetectorConfig::default()
        };
        c.anchors.sizes = [8.0, 16.0, 32.0, 64.0];
        c.ptg.hidden = 4;
        c.roi.head.fc_dim = 16;
        c.roi.head.context = ctx;
        c.roi.sampler = RoiSamplerConfig {
            batch: 16,
            max_positive: 4,
        };
        c.rpn.batch = 32;
        c
    }

    fn image(seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..3 * 40 * 48).map(|_| rng.random_range(0.0..255.0)).collect();
        Tensor::from_vec(&[3, 40, 48], data).unwrap()
    }

    #[test]
    fn every_mode_trains_and_detects() {
        let modes = [
            TemplateMode::None,
            TemplateMode::Pre,
            TemplateMode::Inter,
            TemplateMode::Post,
            TemplateMode::PtgInter,
        ];
        for mode in modes {
            for ctx in [ContextMode::Off, ContextMode::Concat] {
                let cfg = tiny(mode, ctx);
                let mut rng = ChaCha8Rng::seed_from_u64(3);
                let mut store = ParamStore::new();
                let det = Detector::new(&cfg, &mut store, &mut rng).unwrap();
                let (img, tpl) = (image(1), image(2));
                let boxes = [BBox::new(4.0, 4.0, 20.0, 14.0)];
                let input = TrainInput {
                    image: &img,
                    template: Some(&tpl),
                    boxes: &boxes,
                    labels: &[2],
                };
                let mut g = Graph::new(&store);
                let l = det.train_losses(&mut g, &input, Some(&tpl), &mut rng).unwrap();
                assert!(g.value(l.total).data()[0].is_finite());
                assert_eq!(l.ptg.is_some(), mode == TemplateMode::PtgInter);
                let grads = g.backward(l.total).params(&g);
                assert!(grads.global_norm() > 0.0);
                let r = det.detect(&store, &img, Some(&tpl), &mut ()).unwrap();
                assert!(r.detections.len() <= 100);
            }
        }
    }

    #[test]
    fn template_required_where_needed() {
        let cfg = tiny(TemplateMode::Pre, ContextMode::Off);
        let mut store = ParamStore::new();
        let det = Detector::new(&cfg, &mut store, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert!(det.detect(&store, &image(0), None, &mut ()).is_err());
    }

    #[test]
    fn context_k_must_exceed_one() {
        let mut cfg = tiny(TemplateMode::None, ContextMode::Concat);
        cfg.roi.head.context_k = 1.0;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn head_dims_follow_context_mode() {
        for (ctx, dim) in [
            (ContextMode::Off, 16),
            (ContextMode::Concat, 32),
            (ContextMode::Only, 16),
        ] {
            let cfg = tiny(TemplateMode::None, ctx);
            assert_eq!(cfg.roi.head.head_input_dim(), dim);
            let mut store = ParamStore::new();
            Detector::new(&cfg, &mut store, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
            assert_eq!(store.get("roi/cls/w").unwrap().shape(), &[3, dim]);
        }
    }

    #[test]
    fn ptg_params_only_in_ptg_mode() {
        let mut store = ParamStore::new();
        let cfg = tiny(TemplateMode::None, ContextMode::Off);
        let det = Detector::new(&cfg, &mut store, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert_eq!(store.count_with_prefix("ptg/"), 0);
        let counts = det.parameter_counts(&store);
        assert_eq!(counts.iter().map(|c| c.1).sum::<usize>(), store.total_count());
        let mut store = ParamStore::new();
        let cfg = tiny(TemplateMode::PtgInter, ContextMode::Off);
        Detector::new(&cfg, &mut store, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert!(store.count_with_prefix("ptg/") > 0);
    }
}
