//! One optimisation step over a mini-batch of images.

use alloc::vec::Vec;

use rand::Rng;

use crate::detector::{Detector, TrainInput};
use crate::error::Result;
use crate::graph::Graph;
use crate::optim::{clip_grad_norm, Optimizer};
use crate::params::{ParamGrads, ParamStore};
use crate::tensor::Tensor;

/// Batch-averaged loss values of one step.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LossValues {
    pub rpn_cls: f32,
    pub rpn_reg: f32,
    pub roi_cls: f32,
    pub roi_reg: f32,
    pub ptg: f32,
    pub total: f32,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct StepReport {
    pub losses: LossValues,
    pub grad_norm: f32,
    /// Images whose region batch came out empty (no ROI loss).
    pub roi_skipped: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepOptions {
    pub lr: f32,
    pub clip_norm: Option<f32>,
}

/// Accumulates gradients over `items`, averages them and applies the update.
/// `normals[i]`, if present, feeds the generator loss for image `i`.
pub fn train_step<R: Rng + ?Sized>(
    det: &Detector,
    store: &mut ParamStore,
    opt: &mut Optimizer,
    items: &[TrainInput<'_>],
    normals: &[Option<&Tensor>],
    options: StepOptions,
    rng: &mut R,
) -> Result<StepReport> {
    let mut report = StepReport::default();
    let mut acc = ParamGrads::new(store.len());
    let n = items.len().max(1) as f32;
    for (i, item) in items.iter().enumerate() {
        let mut g = Graph::new(store);
        let l = det.train_losses(&mut g, item, normals.get(i).copied().flatten(), rng)?;
        let v = |g: &Graph<'_>, x: Option<crate::graph::Var>| x.map_or(0.0, |x| g.value(x).data()[0]);
        let lv = &mut report.losses;
        lv.rpn_cls += v(&g, Some(l.rpn_cls)) / n;
        lv.rpn_reg += v(&g, Some(l.rpn_reg)) / n;
        lv.roi_cls += v(&g, l.roi_cls) / n;
        lv.roi_reg += v(&g, l.roi_reg) / n;
        lv.ptg += v(&g, l.ptg) / n;
        lv.total += v(&g, Some(l.total)) / n;
        if l.roi_cls.is_none() {
            report.roi_skipped += 1;
        }
        acc.accumulate(&g.backward(l.total).params(&g));
    }
    acc.scale(1.0 / n);
    report.grad_norm = match options.clip_norm {
        Some(c) => clip_grad_norm(&mut acc, c),
        None => acc.global_norm(),
    };
    opt.step(store, &acc, options.lr)?;
    Ok(report)
}

/// Flattened copy of every parameter, for bitwise comparisons.
pub fn snapshot(store: &ParamStore) -> Vec<f32> {
    store.iter().flat_map(|(_, _, t)| t.data().iter().copied()).collect()
}
