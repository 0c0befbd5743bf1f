//! Template reference processing: template-subtracted input normalisation,
//! feature-level subtraction before the pyramid, cosine re-scoring of region
//! scores, and the per-stage pseudo template generator.

use alloc::format;
use alloc::vec::Vec;

use rand::Rng;

use crate::backbone::{FeaturePyramid, Fpn, StageFeatures};
use crate::error::{invalid, shape_err, Result};
use crate::graph::{Graph, Var};
use crate::nn::{Conv2d, ConvTranspose2d, Init};
use crate::params::ParamStore;
use crate::tensor::Tensor;

/// Per-channel pixel mean and standard deviation (0..255 scale).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NormalizationParams {
    pub mean: [f32; 3],
    pub std: [f32; 3],
}

impl Default for NormalizationParams {
    /// ImageNet statistics in RGB order.
    fn default() -> Self {
        Self {
            mean: [123.675, 116.28, 103.53],
            std: [58.395, 57.12, 57.375],
        }
    }
}

impl NormalizationParams {
    pub fn validate(&self) -> Result<()> {
        if self.std.iter().any(|s| !(*s > 0.0)) {
            return Err(invalid("normalization std must be positive"));
        }
        Ok(())
    }
}

fn check_image(image: &Tensor) -> Result<(usize, usize, usize)> {
    let s = image.shape();
    if s.len() != 3 || s[0] != 3 {
        return Err(shape_err("image", &[3, 0, 0], s));
    }
    Ok((s[0], s[1], s[2]))
}

/// `(I - mean) / std` per channel.
pub fn mean_pre(image: &Tensor, params: &NormalizationParams) -> Result<Tensor> {
    params.validate()?;
    let (_, h, w) = check_image(image)?;
    let mut out = image.clone();
    for (c, plane) in out.data_mut().chunks_mut(h * w).enumerate() {
        let (m, s) = (params.mean[c], params.std[c]);
        plane.iter_mut().for_each(|v| *v = (*v - m) / s);
    }
    Ok(out)
}

/// `(I - T) / (2 std)` per channel.
pub fn tr_pre(image: &Tensor, template: &Tensor, params: &NormalizationParams) -> Result<Tensor> {
    params.validate()?;
    let (_, h, w) = check_image(image)?;
    if image.shape() != template.shape() {
        return Err(shape_err("tr_pre template", image.shape(), template.shape()));
    }
    let mut out = image.clone();
    for (c, (plane, tpl)) in out
        .data_mut()
        .chunks_mut(h * w)
        .zip(template.data().chunks(h * w))
        .enumerate()
    {
        let d = 2.0 * params.std[c];
        plane.iter_mut().zip(tpl).for_each(|(v, t)| *v = (*v - t) / d);
    }
    Ok(out)
}

/// Elementwise `C^I_i - C^T_i` for every stage.
pub fn subtract_stages(g: &mut Graph<'_>, stages_i: &StageFeatures, stages_t: &StageFeatures) -> Result<StageFeatures> {
    let mut out = stages_i.0;
    for (o, (&a, &b)) in out.iter_mut().zip(stages_i.0.iter().zip(&stages_t.0)) {
        *o = g.sub(a, b)?;
    }
    Ok(StageFeatures(out))
}

/// Pyramid built on template-subtracted stage features.
pub fn tr_inter(
    g: &mut Graph<'_>,
    fpn: &Fpn,
    stages_i: &StageFeatures,
    stages_t: &StageFeatures,
) -> Result<FeaturePyramid> {
    let diff = subtract_stages(g, stages_i, stages_t)?;
    fpn.build_fpn(g, &diff)
}

/// Cosine similarity; a zero vector is maximally dissimilar (0).
pub fn cosine(a: &[f32], b: &[f32]) -> f32 {
    let (mut dot, mut na, mut nb) = (0.0f64, 0.0f64, 0.0f64);
    for (&x, &y) in a.iter().zip(b) {
        dot += x as f64 * y as f64;
        na += x as f64 * x as f64;
        nb += y as f64 * y as f64;
    }
    if na <= 0.0 || nb <= 0.0 {
        return 0.0;
    }
    (dot / libm::sqrt(na * nb)) as f32
}

/// Scales each region's class scores by `1 - cos(F_I, F_T)`.
///
/// `scores` is `[n, classes]`, `feat_i` and `feat_t` are `[n, dim]`.
pub fn tr_post_rescore(scores: &[f32], classes: usize, feat_i: &[f32], feat_t: &[f32], dim: usize) -> Result<Vec<f32>> {
    if classes == 0 || !scores.len().is_multiple_of(classes) {
        return Err(invalid("tr_post_rescore: scores not divisible by class count"));
    }
    let n = scores.len() / classes;
    if feat_i.len() != n * dim || feat_t.len() != n * dim {
        return Err(shape_err(
            "tr_post_rescore features",
            &[n, dim],
            &[feat_i.len(), feat_t.len()],
        ));
    }
    let mut out = scores.to_vec();
    for r in 0..n {
        let cos = cosine(&feat_i[r * dim..(r + 1) * dim], &feat_t[r * dim..(r + 1) * dim]);
        let factor = (1.0 - cos).clamp(0.0, 1.0);
        out[r * classes..(r + 1) * classes]
            .iter_mut()
            .for_each(|s| *s *= factor);
    }
    Ok(out)
}

/// Reduction used by the generator's reconstruction loss.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ReconstructionLoss {
    /// Mean squared error per element, summed over stages.
    #[default]
    Mse,
    /// Euclidean norm of the residual, summed over stages.
    L2,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PtgConfig {
    pub hidden: usize,
    pub kernel: usize,
    pub loss: ReconstructionLoss,
    pub loss_weight: f32,
}

impl Default for PtgConfig {
    fn default() -> Self {
        Self {
            hidden: 256,
            kernel: 3,
            loss: ReconstructionLoss::Mse,
            loss_weight: 1.0,
        }
    }
}

/// Encoder-decoder for one stage: convs at strides 1, 2, 2 then transposed
/// convs at 2, 2, 1; ReLU after every layer but the last.
#[derive(Debug, Clone, PartialEq)]
pub struct StageGenerator {
    pub channels: usize,
    encoder: [Conv2d; 3],
    decoder: [ConvTranspose2d; 3],
}

impl StageGenerator {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        channels: usize,
        config: &PtgConfig,
        rng: &mut R,
    ) -> Self {
        let (h, k) = (config.hidden, config.kernel);
        let enc_strides = [1, 2, 2];
        let encoder = core::array::from_fn(|j| {
            let cin = if j == 0 { channels } else { h };
            Conv2d::new(
                store,
                &format!("{name}/enc{j}"),
                cin,
                h,
                k,
                enc_strides[j],
                Init::Relu,
                rng,
            )
        });
        let dec_strides = [2, 2, 1];
        let decoder = core::array::from_fn(|j| {
            let (cout, init) = if j == 2 {
                (channels, Init::Linear)
            } else {
                (h, Init::Relu)
            };
            ConvTranspose2d::new(store, &format!("{name}/dec{j}"), h, cout, k, dec_strides[j], init, rng)
        });
        Self {
            channels,
            encoder,
            decoder,
        }
    }

    pub fn forward(&self, g: &mut Graph<'_>, x: Var) -> Result<Var> {
        let (c, h, w) = g.value(x).chw();
        if c != self.channels {
            return Err(invalid(format!(
                "generator expects {} channels, got {c}",
                self.channels
            )));
        }
        let mut sizes = [(h, w); 4];
        let mut y = x;
        for (j, conv) in self.encoder.iter().enumerate() {
            y = conv.forward(g, y)?;
            y = g.relu(y);
            let (_, hh, ww) = g.value(y).chw();
            sizes[j + 1] = (hh, ww);
        }
        // decoder walks the encoder sizes back: s3 -> s2 -> s1 -> s0
        for (j, deconv) in self.decoder.iter().enumerate() {
            let (th, tw) = sizes[2 - j];
            y = deconv.forward_to(g, y, th, tw)?;
            if j < 2 {
                y = g.relu(y);
            }
        }
        Ok(y)
    }
}

/// One generator per backbone stage.
#[derive(Debug, Clone, PartialEq)]
pub struct PseudoTemplateGenerator {
    pub config: PtgConfig,
    generators: Vec<StageGenerator>,
}

impl PseudoTemplateGenerator {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        stage_channels: [usize; 4],
        config: &PtgConfig,
        rng: &mut R,
    ) -> Self {
        let generators = stage_channels
            .iter()
            .enumerate()
            .map(|(i, &c)| StageGenerator::new(store, &format!("ptg/g{}", i + 2), c, config, rng))
            .collect();
        Self {
            config: config.clone(),
            generators,
        }
    }

    pub fn generators(&self) -> &[StageGenerator] {
        &self.generators
    }

    /// Pseudo template features `G_i(C_i)` for every stage.
    pub fn ptg_forward(&self, g: &mut Graph<'_>, stages: &StageFeatures) -> Result<StageFeatures> {
        let mut out = stages.0;
        for (i, gen) in self.generators.iter().enumerate() {
            out[i] = gen.forward(g, stages.0[i])?;
        }
        Ok(StageFeatures(out))
    }

    /// Reconstruction loss of normal-sample features, summed over stages.
    pub fn ptg_loss(&self, g: &mut Graph<'_>, stages_n: &StageFeatures) -> Result<Var> {
        let recon = self.ptg_forward(g, stages_n)?;
        let mut terms = Vec::with_capacity(4);
        for i in 0..4 {
            let r = g.sub(stages_n.0[i], recon.0[i])?;
            let t = match self.config.loss {
                ReconstructionLoss::Mse => g.mean_square(r),
                ReconstructionLoss::L2 => g.l2_norm(r),
            };
            terms.push((t, 1.0));
        }
        g.weighted_sum(&terms)
    }

    /// Pyramid on `C_i - G_i(C_i)`.
    pub fn tr_inter_ptg(&self, g: &mut Graph<'_>, fpn: &Fpn, stages_i: &StageFeatures) -> Result<FeaturePyramid> {
        let pseudo = self.ptg_forward(g, stages_i)?;
        tr_inter(g, fpn, stages_i, &pseudo)
    }
}
