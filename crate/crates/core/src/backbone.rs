//! Four-stage convolutional backbone (strides 4/8/16/32) and the top-down
//! feature pyramid built on it.

use alloc::format;
use alloc::vec::Vec;

use rand::Rng;

use crate::error::{invalid, Error, Result};
use crate::graph::{Graph, Var};
use crate::nn::{Conv2d, Init};
use crate::params::ParamStore;

/// Strides of C2..C5 relative to the input.
pub const STAGE_STRIDES: [usize; 4] = [4, 8, 16, 32];

#[derive(Debug, Clone, PartialEq)]
pub struct BackboneConfig {
    pub in_channels: usize,
    /// Output channels of stages 2..5.
    pub stage_channels: [usize; 4],
    /// Conv blocks per stage; the first of each stage has stride 2.
    pub blocks_per_stage: usize,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            in_channels: 3,
            stage_channels: [32, 64, 128, 256],
            blocks_per_stage: 2,
        }
    }
}

/// Stage outputs `C2..C5` living on a graph.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StageFeatures(pub [Var; 4]);

/// Pyramid outputs `P2..P5` living on a graph.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FeaturePyramid(pub [Var; 4]);

#[derive(Debug, Clone, PartialEq)]
pub struct Backbone {
    pub config: BackboneConfig,
    stem: Conv2d,
    stages: Vec<Vec<Conv2d>>,
}

impl Backbone {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, config: &BackboneConfig, rng: &mut R) -> Self {
        let c0 = config.stage_channels[0];
        let stem = Conv2d::new(store, "backbone/stem", config.in_channels, c0, 3, 2, Init::Relu, rng);
        let mut stages = Vec::with_capacity(4);
        let mut cin = c0;
        for (s, &cout) in config.stage_channels.iter().enumerate() {
            let mut blocks = Vec::with_capacity(config.blocks_per_stage);
            for b in 0..config.blocks_per_stage.max(1) {
                let stride = if b == 0 { 2 } else { 1 };
                let name = format!("backbone/c{}/{}", s + 2, b);
                blocks.push(Conv2d::new(store, &name, cin, cout, 3, stride, Init::Relu, rng));
                cin = cout;
            }
            stages.push(blocks);
        }
        Self {
            config: config.clone(),
            stem,
            stages,
        }
    }

    /// Runs the backbone on a normalised `[C, H, W]` image.
    pub fn extract_stages(&self, g: &mut Graph<'_>, image: Var) -> Result<StageFeatures> {
        let (c, h, w) = g.value(image).chw();
        if h < 32 || w < 32 {
            return Err(Error::InputTooSmall { height: h, width: w });
        }
        if c != self.config.in_channels {
            return Err(invalid(format!(
                "backbone expects {} input channels, got {c}",
                self.config.in_channels
            )));
        }
        let mut x = self.stem.forward(g, image)?;
        x = g.relu(x);
        let mut out = [x; 4];
        for (s, blocks) in self.stages.iter().enumerate() {
            for conv in blocks {
                x = conv.forward(g, x)?;
                x = g.relu(x);
            }
            out[s] = x;
        }
        Ok(StageFeatures(out))
    }
}

/// Lateral 1x1 convs plus one 3x3 output conv shared by all levels.
#[derive(Debug, Clone, PartialEq)]
pub struct Fpn {
    pub channels: usize,
    laterals: [Conv2d; 4],
    output: Conv2d,
}

impl Fpn {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        stage_channels: [usize; 4],
        channels: usize,
        rng: &mut R,
    ) -> Self {
        let laterals = core::array::from_fn(|i| {
            let name = format!("fpn/lateral{}", i + 2);
            Conv2d::new(store, &name, stage_channels[i], channels, 1, 1, Init::Linear, rng)
        });
        let output = Conv2d::new(store, "fpn/out", channels, channels, 3, 1, Init::Linear, rng);
        Self {
            channels,
            laterals,
            output,
        }
    }

    pub fn output_conv(&self) -> &Conv2d {
        &self.output
    }

    /// `L5 = lat(C5)`, `L_i = lat(C_i) + up2(L_{i+1})`, `P_i = conv3x3(L_i)`.
    pub fn build_fpn(&self, g: &mut Graph<'_>, stages: &StageFeatures) -> Result<FeaturePyramid> {
        for (i, &c) in stages.0.iter().enumerate() {
            let got = g.value(c).chw().0;
            if got != self.laterals[i].in_channels {
                return Err(invalid(format!(
                    "fpn: C{} has {got} channels, weights expect {}",
                    i + 2,
                    self.laterals[i].in_channels
                )));
            }
        }
        let mut lat = [stages.0[3]; 4];
        lat[3] = self.laterals[3].forward(g, stages.0[3])?;
        for i in (0..3).rev() {
            let l = self.laterals[i].forward(g, stages.0[i])?;
            let (_, h, w) = g.value(l).chw();
            let up = g.upsample2x(lat[i + 1], h, w)?;
            lat[i] = g.add(l, up)?;
        }
        let mut out = lat;
        for i in 0..4 {
            out[i] = self.output.forward(g, lat[i])?;
        }
        Ok(FeaturePyramid(out))
    }
}

/// Pyramid level for a region of `w x h` pixels:
/// `floor(log2(sqrt(w h) / canonical))` clamped to `[2, 5]`.
pub fn map_level(w: f32, h: f32, canonical: f32) -> Result<usize> {
    if !(w > 0.0 && h > 0.0) {
        return Err(invalid("map_level: width and height must be positive"));
    }
    let raw = libm::floorf(libm::log2f(libm::sqrtf(w * h) / canonical));
    Ok(raw.clamp(2.0, 5.0) as usize)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small() -> BackboneConfig {
        BackboneConfig {
            in_channels: 3,
            stage_channels: [4, 4, 8, 8],
            blocks_per_stage: 1,
        }
    }

    #[test]
    fn stage_sizes_follow_ceil_division() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::new();
        let bb = Backbone::new(&mut store, &small(), &mut rng);
        for (h, w) in [(64usize, 64usize), (70, 33), (32, 45)] {
            let mut g = Graph::inference(&store);
            let x = g.input(Tensor::full(&[3, h, w], 0.5));
            let s = bb.extract_stages(&mut g, x).unwrap();
            for (i, stride) in STAGE_STRIDES.iter().enumerate() {
                let (c, sh, sw) = g.value(s.0[i]).chw();
                assert_eq!(c, small().stage_channels[i]);
                assert_eq!((sh, sw), (h.div_ceil(*stride), w.div_ceil(*stride)));
            }
        }
    }

    #[test]
    fn small_input_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::new();
        let bb = Backbone::new(&mut store, &small(), &mut rng);
        let mut g = Graph::inference(&store);
        let x = g.input(Tensor::zeros(&[3, 31, 64]));
        assert!(matches!(bb.extract_stages(&mut g, x), Err(Error::InputTooSmall { .. })));
    }

    #[test]
    fn map_level_examples() {
        assert_eq!(map_level(56.0, 56.0, 56.0).unwrap(), 2);
        assert_eq!(map_level(448.0, 448.0, 56.0).unwrap(), 3);
        assert_eq!(map_level(3584.0, 3584.0, 56.0).unwrap(), 5);
        assert!(map_level(0.0, 10.0, 56.0).is_err());
    }

    #[test]
    fn fpn_rejects_channel_mismatch() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::new();
        let fpn = Fpn::new(&mut store, [4, 4, 8, 8], 6, &mut rng);
        let mut g = Graph::inference(&store);
        let mk = |g: &mut Graph<'_>, c: usize, s: usize| g.input(Tensor::zeros(&[c, s, s]));
        let st = StageFeatures([mk(&mut g, 4, 8), mk(&mut g, 5, 4), mk(&mut g, 8, 2), mk(&mut g, 8, 1)]);
        assert!(fpn.build_fpn(&mut g, &st).is_err());
    }
}
