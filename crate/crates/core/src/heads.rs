//! Region proposal network, label assignment and sampling, ROI head with
//! optional context-region features, and detection losses.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::Rng;

use crate::backbone::{map_level, FeaturePyramid, STAGE_STRIDES};
use crate::error::{invalid, Result};
use crate::geometry::{context_box, iou, nms, AnchorGrid, BBox, BoxCoder};
use crate::graph::{Graph, RoiSample, Var};
use crate::nn::{Conv2d, Init, Linear};
use crate::params::ParamStore;

/// Shared 3x3 conv, then 1x1 objectness (`A` channels) and 1x1 deltas (`4A`).
#[derive(Debug, Clone, PartialEq)]
pub struct RpnHead {
    pub num_anchors: usize,
    conv: Conv2d,
    cls: Conv2d,
    reg: Conv2d,
}

/// Raw RPN outputs for one pyramid level.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RpnLevelOutput {
    /// `[A, H, W]` logits.
    pub objectness: Var,
    /// `[4A, H, W]`, channel `a * 4 + k`.
    pub deltas: Var,
}

impl RpnHead {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, channels: usize, num_anchors: usize, rng: &mut R) -> Self {
        Self {
            num_anchors,
            conv: Conv2d::new(store, "rpn/conv", channels, channels, 3, 1, Init::Relu, rng),
            cls: Conv2d::new(store, "rpn/cls", channels, num_anchors, 1, 1, Init::Normal(0.01), rng),
            reg: Conv2d::new(
                store,
                "rpn/reg",
                channels,
                4 * num_anchors,
                1,
                1,
                Init::Normal(0.01),
                rng,
            ),
        }
    }

    pub fn rpn_forward(&self, g: &mut Graph<'_>, pyramid: &FeaturePyramid) -> Result<Vec<RpnLevelOutput>> {
        pyramid
            .0
            .iter()
            .map(|&p| {
                let h = self.conv.forward(g, p)?;
                let h = g.relu(h);
                Ok(RpnLevelOutput {
                    objectness: self.cls.forward(g, h)?,
                    deltas: self.reg.forward(g, h)?,
                })
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProposalConfig {
    pub pre_nms_top: usize,
    pub post_nms_top: usize,
    pub nms_threshold: f32,
}

impl Default for ProposalConfig {
    fn default() -> Self {
        Self {
            pre_nms_top: 20000,
            post_nms_top: 2000,
            nms_threshold: 0.7,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Proposal {
    pub bbox: BBox,
    /// Sigmoid objectness in `[0, 1]`.
    pub objectness: f32,
    /// Pyramid level (2..=5) of the source anchor.
    pub level: usize,
}

/// Decodes every anchor, clips to the image, keeps the top `pre_nms_top` by
/// objectness, applies NMS and returns at most `post_nms_top` proposals.
/// Boxes that clip to zero area are dropped.
///
/// `objectness[l]` holds level `l` logits in anchor order and `deltas[l]`
/// the matching `[4A, H, W]` buffer.
pub fn generate_proposals(
    objectness: &[&[f32]],
    deltas: &[&[f32]],
    anchors: &AnchorGrid,
    coder: &BoxCoder,
    image_w: f32,
    image_h: f32,
    config: &ProposalConfig,
) -> Result<Vec<Proposal>> {
    if objectness.len() != anchors.levels.len() || deltas.len() != anchors.levels.len() {
        return Err(invalid("generate_proposals: level count mismatch"));
    }
    let mut cands: Vec<(f32, usize, usize)> = Vec::with_capacity(anchors.len());
    for (l, level) in anchors.levels.iter().enumerate() {
        if objectness[l].len() != level.boxes.len() || deltas[l].len() != 4 * level.boxes.len() {
            return Err(invalid(format!("generate_proposals: level {l} size mismatch")));
        }
        for (i, &z) in objectness[l].iter().enumerate() {
            cands.push((z, l, i));
        }
    }
    // stable: ties keep anchor order
    cands.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap_or(core::cmp::Ordering::Equal));
    cands.truncate(config.pre_nms_top);
    let mut boxes = Vec::with_capacity(cands.len());
    let mut scores = Vec::with_capacity(cands.len());
    let mut levels = Vec::with_capacity(cands.len());
    for &(z, l, i) in &cands {
        let level = &anchors.levels[l];
        let hw = level.height * level.width;
        let (a, cell) = (i / hw, i % hw);
        let d = deltas[l];
        let dv = [
            d[(a * 4) * hw + cell],
            d[(a * 4 + 1) * hw + cell],
            d[(a * 4 + 2) * hw + cell],
            d[(a * 4 + 3) * hw + cell],
        ];
        let b = coder.decode(&level.boxes[i], &dv).clip(image_w, image_h);
        if b.width() > 0.0 && b.height() > 0.0 && b.x1.is_finite() && b.y1.is_finite() {
            boxes.push(b);
            scores.push(crate::graph::sigmoid(z));
            levels.push(l + 2);
        }
    }
    let keep = nms(&boxes, &scores, config.nms_threshold)?;
    Ok(keep
        .into_iter()
        .take(config.post_nms_top)
        .map(|k| Proposal {
            bbox: boxes[k],
            objectness: scores[k],
            level: levels[k],
        })
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AnchorLabel {
    /// Positive, matched to the given ground-truth index.
    Positive(usize),
    Negative,
    Ignore,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RpnAssignConfig {
    pub pos_iou: f32,
    pub neg_iou: f32,
    /// Force each ground truth's best anchor(s) positive.
    pub force_best: bool,
}

impl Default for RpnAssignConfig {
    fn default() -> Self {
        Self {
            pos_iou: 0.7,
            neg_iou: 0.1,
            force_best: true,
        }
    }
}

/// Max-IoU anchor labelling: `>= pos_iou` positive, `< neg_iou` negative,
/// everything else ignored. Ties in the argmax go to the lower gt index.
pub fn assign_rpn_labels(anchors: &[BBox], gt: &[BBox], config: &RpnAssignConfig) -> Vec<AnchorLabel> {
    if gt.is_empty() {
        return vec![AnchorLabel::Negative; anchors.len()];
    }
    let mut best_for_gt = vec![0.0f32; gt.len()];
    let mut labels = Vec::with_capacity(anchors.len());
    let mut ious = vec![0.0f32; gt.len()];
    let mut table: Vec<f32> = if config.force_best {
        Vec::with_capacity(anchors.len() * gt.len())
    } else {
        Vec::new()
    };
    for a in anchors {
        let (mut best, mut arg) = (-1.0f32, 0);
        for (gi, g) in gt.iter().enumerate() {
            let v = iou(a, g);
            ious[gi] = v;
            if v > best {
                best = v;
                arg = gi;
            }
            if v > best_for_gt[gi] {
                best_for_gt[gi] = v;
            }
        }
        if config.force_best {
            table.extend_from_slice(&ious);
        }
        labels.push(if best >= config.pos_iou {
            AnchorLabel::Positive(arg)
        } else if best < config.neg_iou {
            AnchorLabel::Negative
        } else {
            AnchorLabel::Ignore
        });
    }
    if config.force_best {
        for (ai, label) in labels.iter_mut().enumerate() {
            if matches!(label, AnchorLabel::Positive(_)) {
                continue;
            }
            let row = &table[ai * gt.len()..(ai + 1) * gt.len()];
            if let Some(gi) = (0..gt.len()).find(|&gi| row[gi] > 0.0 && row[gi] == best_for_gt[gi]) {
                *label = AnchorLabel::Positive(gi);
            }
        }
    }
    labels
}

/// Random anchor subset for the RPN losses: at most `batch * pos_fraction`
/// positives, negatives filling the rest, both without replacement.
pub fn sample_anchors<R: Rng + ?Sized>(
    labels: &[AnchorLabel],
    batch: usize,
    pos_fraction: f32,
    rng: &mut R,
) -> (Vec<usize>, Vec<usize>) {
    let mut pos: Vec<usize> = (0..labels.len())
        .filter(|&i| matches!(labels[i], AnchorLabel::Positive(_)))
        .collect();
    let mut neg: Vec<usize> = (0..labels.len())
        .filter(|&i| labels[i] == AnchorLabel::Negative)
        .collect();
    let max_pos = ((batch as f32) * pos_fraction) as usize;
    pos.shuffle(rng);
    pos.truncate(max_pos);
    neg.shuffle(rng);
    neg.truncate(batch.saturating_sub(pos.len()));
    pos.sort_unstable();
    neg.sort_unstable();
    (pos, neg)
}

/// Candidate regions after ground-truth augmentation with their labels.
#[derive(Debug, Clone, PartialEq)]
pub struct RoiAssignment {
    pub boxes: Vec<BBox>,
    /// `0` is background, `1..=c` categories.
    pub labels: Vec<usize>,
    /// Encoded regression targets, present for positives.
    pub targets: Vec<Option<[f32; 4]>>,
}

/// Appends every ground-truth box to the proposals and labels each region by
/// its best-overlapping ground truth (`>= pos_iou`), else background.
pub fn assign_roi_labels(
    proposals: &[BBox],
    gt_boxes: &[BBox],
    gt_labels: &[usize],
    pos_iou: f32,
    coder: &BoxCoder,
) -> Result<RoiAssignment> {
    if gt_boxes.len() != gt_labels.len() {
        return Err(invalid("assign_roi_labels: boxes and labels differ in length"));
    }
    if gt_labels.contains(&0) {
        return Err(invalid("assign_roi_labels: gt labels must be >= 1"));
    }
    let mut boxes: Vec<BBox> = proposals
        .iter()
        .copied()
        .filter(|b| b.width() > 0.0 && b.height() > 0.0)
        .collect();
    boxes.extend(gt_boxes.iter().copied().filter(|b| b.width() > 0.0 && b.height() > 0.0));
    let mut labels = Vec::with_capacity(boxes.len());
    let mut targets = Vec::with_capacity(boxes.len());
    for b in &boxes {
        let (mut best, mut arg) = (0.0f32, usize::MAX);
        for (gi, g) in gt_boxes.iter().enumerate() {
            let v = iou(b, g);
            if v > best {
                best = v;
                arg = gi;
            }
        }
        if arg != usize::MAX && best >= pos_iou {
            labels.push(gt_labels[arg]);
            targets.push(Some(coder.encode(b, &gt_boxes[arg])?));
        } else {
            labels.push(0);
            targets.push(None);
        }
    }
    Ok(RoiAssignment { boxes, labels, targets })
}

#[derive(Debug, Clone, PartialEq)]
pub struct RoiSamplerConfig {
    pub batch: usize,
    pub max_positive: usize,
}

impl Default for RoiSamplerConfig {
    fn default() -> Self {
        Self {
            batch: 512,
            max_positive: 128,
        }
    }
}

/// Sampled regions for one image.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct RoiBatch {
    /// Indices into [`RoiAssignment::boxes`]; negatives may repeat.
    pub indices: Vec<usize>,
    pub labels: Vec<usize>,
    pub positive: Vec<bool>,
    pub targets: Vec<Option<[f32; 4]>>,
}

impl RoiBatch {
    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn num_positive(&self) -> usize {
        self.positive.iter().filter(|p| **p).count()
    }
}

/// Up to `max_positive` positives, then negatives up to `batch` total.
/// Negatives are drawn with replacement only when too few exist.
pub fn sample_roi_batch<R: Rng + ?Sized>(assign: &RoiAssignment, config: &RoiSamplerConfig, rng: &mut R) -> RoiBatch {
    let mut pos: Vec<usize> = (0..assign.labels.len()).filter(|&i| assign.labels[i] > 0).collect();
    let mut neg: Vec<usize> = (0..assign.labels.len()).filter(|&i| assign.labels[i] == 0).collect();
    pos.shuffle(rng);
    pos.truncate(config.max_positive.min(config.batch));
    let want_neg = config.batch - pos.len();
    let mut chosen_neg = Vec::with_capacity(want_neg);
    if neg.len() >= want_neg {
        neg.shuffle(rng);
        chosen_neg.extend_from_slice(&neg[..want_neg]);
    } else if !neg.is_empty() {
        chosen_neg.extend_from_slice(&neg);
        while chosen_neg.len() < want_neg {
            chosen_neg.push(neg[rng.random_range(0..neg.len())]);
        }
    }
    let mut batch = RoiBatch::default();
    for &i in pos.iter().chain(&chosen_neg) {
        batch.indices.push(i);
        batch.labels.push(assign.labels[i]);
        batch.positive.push(assign.labels[i] > 0);
        batch.targets.push(assign.targets[i]);
    }
    batch
}

/// How context-region features enter the ROI head.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ContextMode {
    /// Region features only.
    #[default]
    Off,
    /// Region and context embeddings concatenated.
    Concat,
    /// Context embedding only.
    Only,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RoiHeadConfig {
    pub pooled: usize,
    pub sampling: usize,
    pub fc_dim: usize,
    /// Base constant of the level-mapping rule.
    pub canonical_scale: f32,
    pub context: ContextMode,
    /// Context box scale (`> 1`).
    pub context_k: f32,
    /// Region and context branches share their FC stack.
    pub share_context_fc: bool,
}

impl Default for RoiHeadConfig {
    fn default() -> Self {
        Self {
            pooled: 7,
            sampling: 2,
            fc_dim: 1024,
            canonical_scale: 56.0,
            context: ContextMode::Off,
            context_k: 1.5,
            share_context_fc: true,
        }
    }
}

impl RoiHeadConfig {
    /// Width of the vector fed to the classifier and regressor.
    pub fn head_input_dim(&self) -> usize {
        match self.context {
            ContextMode::Concat => 2 * self.fc_dim,
            ContextMode::Off | ContextMode::Only => self.fc_dim,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct FcStack {
    fc1: Linear,
    fc2: Linear,
}

/// Two-layer MLP head with class-specific box regression.
#[derive(Debug, Clone, PartialEq)]
pub struct RoiHead {
    pub config: RoiHeadConfig,
    pub num_classes: usize,
    pub in_channels: usize,
    region: FcStack,
    context: Option<FcStack>,
    cls: Linear,
    reg: Linear,
}

/// ROI head outputs.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RoiHeadOutput {
    /// `[n, c + 1]` logits.
    pub cls_logits: Var,
    /// `[n, 4c]` class-specific deltas.
    pub deltas: Var,
    /// `[n, fc_dim]` post-ReLU region embedding, if region features were pooled.
    pub region_embedding: Option<Var>,
}

impl RoiHead {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        in_channels: usize,
        num_classes: usize,
        config: &RoiHeadConfig,
        rng: &mut R,
    ) -> Self {
        let flat = in_channels * config.pooled * config.pooled;
        let d = config.fc_dim;
        let mk = |store: &mut ParamStore, prefix: &str, rng: &mut R| FcStack {
            fc1: Linear::new(store, &format!("{prefix}/fc1"), flat, d, Init::Relu, rng),
            fc2: Linear::new(store, &format!("{prefix}/fc2"), d, d, Init::Relu, rng),
        };
        let region = mk(store, "roi", rng);
        let context =
            (config.context != ContextMode::Off && !config.share_context_fc).then(|| mk(store, "roi/ctx", rng));
        let din = config.head_input_dim();
        let cls = Linear::new(store, "roi/cls", din, num_classes + 1, Init::Normal(0.01), rng);
        let reg = Linear::new(store, "roi/reg", din, 4 * num_classes, Init::Normal(0.001), rng);
        Self {
            config: config.clone(),
            num_classes,
            in_channels,
            region,
            context,
            cls,
            reg,
        }
    }

    /// Pools `[n, C, P, P]` features for each box at its mapped level.
    pub fn roi_align(&self, g: &mut Graph<'_>, pyramid: &FeaturePyramid, boxes: &[BBox]) -> Result<Var> {
        let mut rois = Vec::with_capacity(boxes.len());
        for b in boxes {
            let w = b.width().max(1e-3);
            let h = b.height().max(1e-3);
            let level = map_level(w, h, self.config.canonical_scale)?;
            let s = 1.0 / STAGE_STRIDES[level - 2] as f32;
            rois.push(RoiSample {
                level: level - 2,
                x1: b.x1 * s - 0.5,
                y1: b.y1 * s - 0.5,
                x2: b.x2 * s - 0.5,
                y2: b.y2 * s - 0.5,
            });
        }
        g.roi_align(&pyramid.0, &rois, self.config.pooled, self.config.sampling)
    }

    fn embed(&self, g: &mut Graph<'_>, pooled: Var, context: bool) -> Result<Var> {
        let s = g.shape(pooled).to_vec();
        let flat = g.reshape(pooled, &[s[0], s[1..].iter().product()])?;
        let stack = if context {
            self.context.as_ref().unwrap_or(&self.region)
        } else {
            &self.region
        };
        let h = stack.fc1.forward(g, flat)?;
        let h = g.relu(h);
        let h = stack.fc2.forward(g, h)?;
        Ok(g.relu(h))
    }

    /// Region embedding `f` (post-ReLU) for pooled features.
    pub fn region_embedding(&self, g: &mut Graph<'_>, pooled: Var) -> Result<Var> {
        self.embed(g, pooled, false)
    }

    /// Classification and regression from pooled region and/or context features.
    pub fn roi_head_forward(
        &self,
        g: &mut Graph<'_>,
        region: Option<Var>,
        context: Option<Var>,
    ) -> Result<RoiHeadOutput> {
        let region_embedding = match region {
            Some(r) => Some(self.embed(g, r, false)?),
            None => None,
        };
        let context_embedding = match context {
            Some(c) => Some(self.embed(g, c, true)?),
            None => None,
        };
        let x = match (self.config.context, region_embedding, context_embedding) {
            (ContextMode::Off, Some(r), _) => r,
            (ContextMode::Concat, Some(r), Some(c)) => g.concat_cols(r, c)?,
            (ContextMode::Only, _, Some(c)) => c,
            _ => {
                return Err(invalid(format!(
                    "roi head in {:?} mode got region={} context={}",
                    self.config.context,
                    region.is_some(),
                    context.is_some()
                )))
            }
        };
        Ok(RoiHeadOutput {
            cls_logits: self.cls.forward(g, x)?,
            deltas: self.reg.forward(g, x)?,
            region_embedding,
        })
    }

    /// Pools region and context features as the configured mode requires and
    /// runs the head.
    pub fn forward_boxes(
        &self,
        g: &mut Graph<'_>,
        pyramid: &FeaturePyramid,
        boxes: &[BBox],
        image_w: f32,
        image_h: f32,
    ) -> Result<RoiHeadOutput> {
        let region = if self.config.context == ContextMode::Only {
            None
        } else {
            Some(self.roi_align(g, pyramid, boxes)?)
        };
        let context = if self.config.context == ContextMode::Off {
            None
        } else {
            let ctx: Vec<BBox> = boxes
                .iter()
                .map(|b| context_box(b, self.config.context_k, image_w, image_h))
                .collect();
            Some(self.roi_align(g, pyramid, &ctx)?)
        };
        self.roi_head_forward(g, region, context)
    }
}

/// Scalar loss nodes of one training step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DetectionLosses {
    pub rpn_cls: Var,
    pub rpn_reg: Var,
    pub roi_cls: Var,
    pub roi_reg: Var,
}

/// RPN binary cross-entropy over sampled anchors and smooth-L1 over the
/// positive ones, each averaged over its own count.
#[allow(clippy::too_many_arguments)]
pub fn rpn_losses(
    g: &mut Graph<'_>,
    outputs: &[RpnLevelOutput],
    anchors: &AnchorGrid,
    labels: &[AnchorLabel],
    positives: &[usize],
    negatives: &[usize],
    gt: &[BBox],
    coder: &BoxCoder,
    beta: f32,
) -> Result<(Var, Var)> {
    let offsets = anchors.offsets();
    let locate = |flat: usize| {
        let l = offsets.iter().rposition(|&o| o <= flat).unwrap_or(0);
        (l, flat - offsets[l])
    };
    let n_levels = anchors.levels.len();
    let mut cls_targets: Vec<Vec<(usize, f32)>> = vec![Vec::new(); n_levels];
    let mut reg_targets: Vec<Vec<(usize, f32)>> = vec![Vec::new(); n_levels];
    for &i in positives {
        let (l, local) = locate(i);
        cls_targets[l].push((local, 1.0));
        let AnchorLabel::Positive(gi) = labels[i] else {
            return Err(invalid("rpn_losses: sampled positive is not labelled positive"));
        };
        let level = &anchors.levels[l];
        let t = coder.encode(&level.boxes[local], &gt[gi])?;
        let hw = level.height * level.width;
        let (a, cell) = (local / hw, local % hw);
        for (k, &tk) in t.iter().enumerate() {
            reg_targets[l].push(((a * 4 + k) * hw + cell, tk));
        }
    }
    for &i in negatives {
        let (l, local) = locate(i);
        cls_targets[l].push((local, 0.0));
    }
    let n_cls = (positives.len() + negatives.len()) as f32;
    let n_pos = positives.len() as f32;
    let mut cls_terms = Vec::with_capacity(n_levels);
    let mut reg_terms = Vec::with_capacity(n_levels);
    for (l, out) in outputs.iter().enumerate() {
        cls_terms.push((g.bce_with_logits(out.objectness, &cls_targets[l], n_cls), 1.0));
        reg_terms.push((g.smooth_l1(out.deltas, &reg_targets[l], beta, n_pos), 1.0));
    }
    Ok((g.weighted_sum(&cls_terms)?, g.weighted_sum(&reg_terms)?))
}

/// Softmax cross-entropy over the sampled regions and class-specific
/// smooth-L1 on the positive ones (target class deltas only).
pub fn roi_losses(
    g: &mut Graph<'_>,
    output: &RoiHeadOutput,
    batch: &RoiBatch,
    num_classes: usize,
    beta: f32,
) -> Result<(Var, Var)> {
    let cls = g.softmax_cross_entropy(output.cls_logits, &batch.labels)?;
    let mut targets = Vec::new();
    for (r, (&label, t)) in batch.labels.iter().zip(&batch.targets).enumerate() {
        if label == 0 {
            continue;
        }
        let t = t.ok_or_else(|| invalid("roi_losses: positive region without target"))?;
        let base = r * 4 * num_classes + (label - 1) * 4;
        for (k, &tk) in t.iter().enumerate() {
            targets.push((base + k, tk));
        }
    }
    let reg = g.smooth_l1(output.deltas, &targets, beta, batch.num_positive() as f32);
    Ok((cls, reg))
}
