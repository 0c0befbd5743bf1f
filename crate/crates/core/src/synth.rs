//! Synthetic paired-template defect data.
//!
//! Every sample renders a procedural texture twice: once clean (the
//! template) and once with additive defects (the candidate). Both are
//! quantised from the same texture render, so before sensor noise the pair
//! differs only where a defect changed at least one channel value. Each box
//! is the tight bound of the pixels its defect changed.

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use core::f32::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::{Sample, Split};
use crate::error::{invalid, Result};
use crate::geometry::{iou, BBox};
use crate::image::RgbImage;
use crate::params::standard_normal;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum TextureFamily {
    Stripes,
    Checkers,
    Noise,
    Solid,
}

impl TextureFamily {
    pub fn name(self) -> &'static str {
        match self {
            Self::Stripes => "stripes",
            Self::Checkers => "checkers",
            Self::Noise => "noise",
            Self::Solid => "solid",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum DefectKind {
    /// Thin anti-aliased line segment.
    Scratch,
    /// Filled, rotated ellipse with a colour shift.
    Blob,
    /// Large, soft, low-contrast irregular patch.
    Stain,
}

impl DefectKind {
    pub fn name(self) -> &'static str {
        match self {
            Self::Scratch => "scratch",
            Self::Blob => "blob",
            Self::Stain => "stain",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthConfig {
    pub width: usize,
    pub height: usize,
    pub num_train: usize,
    pub num_test: usize,
    pub normal_fraction: f32,
    pub train_textures: Vec<TextureFamily>,
    /// Test textures; families absent from training model texture shift.
    pub test_textures: Vec<TextureFamily>,
    /// Category `i + 1` is `defect_kinds[i]`.
    pub defect_kinds: Vec<DefectKind>,
    pub max_defects: usize,
    /// Peak per-channel intensity change of a defect, sampled uniformly.
    pub defect_contrast: (f32, f32),
    /// Channel distance between the two texture colours, sampled uniformly.
    pub texture_contrast: (f32, f32),
    /// Texture period in pixels, sampled uniformly.
    pub texture_period: (f32, f32),
    /// Characteristic defect length, sampled log-uniformly so box areas are
    /// log-uniform too.
    pub defect_size: (f32, f32),
    /// Std of independent Gaussian noise added to image and template.
    pub sensor_noise: f32,
    /// Each defect must change some channel by more than this.
    pub visibility_threshold: f32,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            width: 64,
            height: 64,
            num_train: 600,
            num_test: 150,
            normal_fraction: 0.15,
            train_textures: vec![TextureFamily::Stripes, TextureFamily::Checkers, TextureFamily::Solid],
            test_textures: vec![
                TextureFamily::Stripes,
                TextureFamily::Checkers,
                TextureFamily::Noise,
                TextureFamily::Solid,
            ],
            defect_kinds: vec![DefectKind::Scratch, DefectKind::Blob, DefectKind::Stain],
            max_defects: 2,
            defect_contrast: (35.0, 60.0),
            texture_contrast: (40.0, 90.0),
            texture_period: (6.0, 18.0),
            defect_size: (8.0, 28.0),
            sensor_noise: 0.0,
            visibility_threshold: 20.0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_train + self.num_test == 0 {
            return Err(invalid("synthetic config produces zero images"));
        }
        if self.width < 16 || self.height < 16 {
            return Err(invalid("synthetic images must be at least 16x16"));
        }
        if self.defect_kinds.is_empty() || self.max_defects == 0 {
            return Err(invalid("need at least one defect kind and one defect per image"));
        }
        if (self.num_train > 0 && self.train_textures.is_empty())
            || (self.num_test > 0 && self.test_textures.is_empty())
        {
            return Err(invalid("texture family list is empty"));
        }
        if !(0.0..=1.0).contains(&self.normal_fraction) {
            return Err(invalid("normal_fraction must lie in [0, 1]"));
        }
        let ordered = |r: (f32, f32)| r.0 > 0.0 && r.0 <= r.1;
        if !ordered(self.defect_size) || !ordered(self.texture_period) || !ordered(self.defect_contrast) {
            return Err(invalid("size, period and contrast ranges must be positive and ordered"));
        }
        if !(self.texture_contrast.0 >= 0.0 && self.texture_contrast.0 <= self.texture_contrast.1) {
            return Err(invalid("texture contrast range must be ordered"));
        }
        if self.sensor_noise < 0.0 {
            return Err(invalid("sensor noise must be non-negative"));
        }
        if self.visibility_threshold >= self.defect_contrast.1 {
            return Err(invalid(
                "visibility threshold must be below the maximum defect contrast",
            ));
        }
        Ok(())
    }

    pub fn category_names(&self) -> Vec<String> {
        self.defect_kinds.iter().map(|k| String::from(k.name())).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthDataset {
    pub category_names: Vec<String>,
    pub samples: Vec<Sample>,
}

struct Texture {
    family: TextureFamily,
    c1: [f32; 3],
    c2: [f32; 3],
    period: f32,
    angle: f32,
    duty: f32,
    phase: f32,
    lattice: Vec<f32>,
    lattice_w: usize,
}

fn smoothstep(t: f32) -> f32 {
    let t = t.clamp(0.0, 1.0);
    t * t * (3.0 - 2.0 * t)
}

impl Texture {
    fn sample<R: Rng>(family: TextureFamily, cfg: &SynthConfig, rng: &mut R) -> Self {
        let c1: [f32; 3] = core::array::from_fn(|_| rng.random_range(70.0..180.0));
        let contrast = rng.random_range(cfg.texture_contrast.0..=cfg.texture_contrast.1);
        let sign = if rng.random::<bool>() { 1.0 } else { -1.0 };
        let tint: [f32; 3] = core::array::from_fn(|_| rng.random_range(0.7..1.0));
        let c2 = core::array::from_fn(|k| (c1[k] + sign * contrast * tint[k]).clamp(30.0, 225.0));
        let period = rng.random_range(cfg.texture_period.0..=cfg.texture_period.1);
        let lattice_w = (cfg.width.max(cfg.height) as f32 / period) as usize + 3;
        let lattice = if family == TextureFamily::Noise {
            (0..5 * lattice_w * lattice_w).map(|_| rng.random::<f32>()).collect()
        } else {
            Vec::new()
        };
        Self {
            family,
            c1,
            c2,
            period,
            angle: rng.random_range(0.0..PI),
            duty: rng.random_range(0.2..0.5),
            phase: rng.random_range(0.0..1.0),
            lattice,
            lattice_w,
        }
    }

    fn lattice_at(&self, octave: usize, x: f32, y: f32) -> f32 {
        // octave 0 is an n x n grid, octave 1 a 2n x 2n grid stored after it
        let n = self.lattice_w * (1 + octave);
        let base = octave * self.lattice_w * self.lattice_w;
        let (xi, yi) = (x as usize, y as usize);
        let (fx, fy) = (smoothstep(x - xi as f32), smoothstep(y - yi as f32));
        let v = |i: usize, j: usize| self.lattice[base + (j % n) * n + (i % n)];
        let top = v(xi, yi) * (1.0 - fx) + v(xi + 1, yi) * fx;
        let bot = v(xi, yi + 1) * (1.0 - fx) + v(xi + 1, yi + 1) * fx;
        top * (1.0 - fy) + bot * fy
    }

    /// Mix weight toward `c2` at pixel center `(x, y)`.
    fn weight(&self, x: f32, y: f32) -> f32 {
        let (s, c) = (libm::sinf(self.angle), libm::cosf(self.angle));
        let u = x * c + y * s;
        let v = -x * s + y * c;
        match self.family {
            TextureFamily::Solid => 0.0,
            TextureFamily::Stripes => {
                // soft-edged bar of width duty * period
                let q = u / self.period + self.phase;
                let t = q - libm::floorf(q);
                let d = (t - 0.5).abs() * self.period;
                smoothstep(self.duty * self.period * 0.5 + 0.5 - d)
            }
            TextureFamily::Checkers => {
                let a = libm::sinf(PI * (u / self.period + self.phase));
                let b = libm::sinf(PI * (v / self.period + self.phase));
                smoothstep(0.5 + 3.0 * a * b)
            }
            TextureFamily::Noise => {
                let p = self.period;
                let n0 = self.lattice_at(0, x / p, y / p);
                let n1 = self.lattice_at(1, 2.0 * x / p, 2.0 * y / p);
                smoothstep((0.65 * n0 + 0.35 * n1 - 0.5) * 3.0 + 0.5)
            }
        }
    }

    fn render(&self, w: usize, h: usize) -> Vec<[f32; 3]> {
        let mut out = Vec::with_capacity(w * h);
        for y in 0..h {
            for x in 0..w {
                let t = self.weight(x as f32 + 0.5, y as f32 + 0.5);
                out.push(core::array::from_fn(|k| self.c1[k] + (self.c2[k] - self.c1[k]) * t));
            }
        }
        out
    }
}

/// Coverage mask of one defect over the image, values in `[0, 1]`.
fn defect_mask<R: Rng>(kind: DefectKind, cfg: &SynthConfig, rng: &mut R) -> Vec<f32> {
    let (w, h) = (cfg.width, cfg.height);
    let (lo, hi) = cfg.defect_size;
    let size = libm::expf(rng.random_range(libm::logf(lo)..=libm::logf(hi)));
    let margin = 2.0;
    let cx = rng.random_range(margin..w as f32 - margin);
    let cy = rng.random_range(margin..h as f32 - margin);
    let theta = rng.random_range(0.0..PI);
    let (s, c) = (libm::sinf(theta), libm::cosf(theta));
    let mut mask = vec![0.0f32; w * h];
    match kind {
        DefectKind::Scratch => {
            let half = 0.5 * size;
            let width = rng.random_range(1.2..2.2f32);
            let (ax, ay) = (cx - half * c, cy - half * s);
            let (bx, by) = (cx + half * c, cy + half * s);
            let (dx, dy) = (bx - ax, by - ay);
            let len2 = dx * dx + dy * dy;
            for y in 0..h {
                for x in 0..w {
                    let (px, py) = (x as f32 + 0.5, y as f32 + 0.5);
                    let t = (((px - ax) * dx + (py - ay) * dy) / len2).clamp(0.0, 1.0);
                    let (qx, qy) = (ax + t * dx - px, ay + t * dy - py);
                    let d = libm::sqrtf(qx * qx + qy * qy);
                    mask[y * w + x] = (0.5 * width + 0.5 - d).clamp(0.0, 1.0);
                }
            }
        }
        DefectKind::Blob => {
            let rx = 0.5 * size;
            let ry = rx * rng.random_range(0.6..1.6f32);
            let rmin = rx.min(ry);
            for y in 0..h {
                for x in 0..w {
                    let (px, py) = (x as f32 + 0.5 - cx, y as f32 + 0.5 - cy);
                    let (u, v) = (px * c + py * s, -px * s + py * c);
                    let rho = libm::sqrtf((u / rx) * (u / rx) + (v / ry) * (v / ry));
                    mask[y * w + x] = ((1.0 - rho) * rmin + 0.5).clamp(0.0, 1.0);
                }
            }
        }
        DefectKind::Stain => {
            let r = 0.6 * size;
            let psi = rng.random_range(0.0..2.0 * PI);
            for y in 0..h {
                for x in 0..w {
                    let (px, py) = (x as f32 + 0.5 - cx, y as f32 + 0.5 - cy);
                    let phi = libm::atan2f(py, px);
                    let rr = r * (1.0 + 0.25 * libm::sinf(3.0 * phi + psi));
                    let rho = libm::sqrtf(px * px + py * py) / rr;
                    mask[y * w + x] = smoothstep(2.0 * (1.0 - rho));
                }
            }
        }
    }
    mask
}

fn defect_shift<R: Rng>(kind: DefectKind, cfg: &SynthConfig, rng: &mut R) -> [f32; 3] {
    let contrast = rng.random_range(cfg.defect_contrast.0..=cfg.defect_contrast.1);
    let sign = if rng.random::<bool>() { 1.0 } else { -1.0 };
    match kind {
        DefectKind::Scratch => [sign * contrast; 3],
        DefectKind::Blob => {
            let dir: [f32; 3] = core::array::from_fn(|_| rng.random_range(-1.0..1.0f32));
            let m = dir.iter().fold(0.0f32, |a, v| a.max(v.abs())).max(1e-3);
            core::array::from_fn(|k| sign * contrast * dir[k] / m)
        }
        DefectKind::Stain => {
            let c = 0.6 * contrast;
            [-c, -0.7 * c, -0.35 * c]
        }
    }
}

fn quantize(v: f32) -> u8 {
    libm::roundf(v).clamp(0.0, 255.0) as u8
}

struct Rendered {
    image: Vec<[u8; 3]>,
    template: Vec<[u8; 3]>,
    boxes: Vec<BBox>,
    labels: Vec<usize>,
}

fn render_sample<R: Rng>(cfg: &SynthConfig, family: TextureFamily, normal: bool, rng: &mut R) -> Rendered {
    let (w, h) = (cfg.width, cfg.height);
    let texture = Texture::sample(family, cfg, rng);
    let template: Vec<[u8; 3]> = texture.render(w, h).iter().map(|p| p.map(quantize)).collect();
    let mut image: Vec<[f32; 3]> = template.iter().map(|p| p.map(|v| v as f32)).collect();
    let mut boxes: Vec<BBox> = Vec::new();
    let mut labels = Vec::new();
    if !normal {
        let count = rng.random_range(1..=cfg.max_defects);
        for _ in 0..count {
            for _attempt in 0..20 {
                let ki = rng.random_range(0..cfg.defect_kinds.len());
                let kind = cfg.defect_kinds[ki];
                let mask = defect_mask(kind, cfg, rng);
                let shift = defect_shift(kind, cfg, rng);
                let (mut x0, mut y0, mut x1, mut y1) = (usize::MAX, usize::MAX, 0, 0);
                let mut peak = 0.0f32;
                for (i, &m) in mask.iter().enumerate() {
                    let change = shift.iter().fold(0.0f32, |a, s| a.max((m * s).abs()));
                    if change >= 0.5 {
                        let (x, y) = (i % w, i / w);
                        x0 = x0.min(x);
                        y0 = y0.min(y);
                        x1 = x1.max(x + 1);
                        y1 = y1.max(y + 1);
                        peak = peak.max(change);
                    }
                }
                if x0 == usize::MAX || peak <= cfg.visibility_threshold {
                    continue;
                }
                let b = BBox::new(x0 as f32, y0 as f32, x1 as f32, y1 as f32);
                if boxes.iter().any(|o| iou(o, &b) > 0.1) {
                    continue;
                }
                for (px, &m) in image.iter_mut().zip(&mask) {
                    // pixels the box rule skipped stay untouched so that
                    // rounding cannot leak a change outside the box
                    if shift.iter().any(|s| (m * s).abs() >= 0.5) {
                        for k in 0..3 {
                            px[k] += m * shift[k];
                        }
                    }
                }
                boxes.push(b);
                labels.push(ki + 1);
                break;
            }
        }
    }
    let mut image: Vec<[u8; 3]> = image.iter().map(|p| p.map(quantize)).collect();
    let mut template = template;
    if cfg.sensor_noise > 0.0 {
        for px in image.iter_mut().chain(template.iter_mut()) {
            for v in px.iter_mut() {
                *v = quantize(*v as f32 + cfg.sensor_noise * standard_normal(rng));
            }
        }
    }
    Rendered {
        image,
        template,
        boxes,
        labels,
    }
}

fn to_image(w: usize, h: usize, px: &[[u8; 3]]) -> RgbImage {
    RgbImage {
        width: w,
        height: h,
        data: px.iter().flat_map(|p| p.iter().copied()).collect(),
    }
}

/// Renders the whole dataset. Sample `i` depends only on `(seed, i)`.
pub fn synth_generate(config: &SynthConfig, seed: u64) -> Result<SynthDataset> {
    config.validate()?;
    let total = config.num_train + config.num_test;
    let mut samples = Vec::with_capacity(total);
    for i in 0..total {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(i as u64 + 1);
        let split = if i < config.num_train {
            Split::Train
        } else {
            Split::Test
        };
        let families = match split {
            Split::Train => &config.train_textures,
            Split::Test => &config.test_textures,
        };
        let family = families[rng.random_range(0..families.len())];
        let normal = rng.random::<f32>() < config.normal_fraction;
        let r = render_sample(config, family, normal, &mut rng);
        samples.push(Sample {
            image: to_image(config.width, config.height, &r.image),
            template: Some(to_image(config.width, config.height, &r.template)),
            boxes: r.boxes,
            labels: r.labels,
            is_normal: normal,
            split,
        });
    }
    Ok(SynthDataset {
        category_names: config.category_names(),
        samples,
    })
}
