//! In-memory samples, the train/test resize policy and pixel-shift corruption.

use alloc::format;
use alloc::vec::Vec;

use rand::Rng;

use crate::error::{invalid, Result};
use crate::geometry::BBox;
use crate::image::RgbImage;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub enum Split {
    #[default]
    Train,
    Test,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

/// A candidate image with its optional aligned template and annotations.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub image: RgbImage,
    pub template: Option<RgbImage>,
    pub boxes: Vec<BBox>,
    /// Category ids in `1..=c`, parallel to `boxes`.
    pub labels: Vec<usize>,
    pub is_normal: bool,
    pub split: Split,
}

impl Sample {
    pub fn validate(&self, num_classes: usize) -> Result<()> {
        if self.boxes.len() != self.labels.len() {
            return Err(invalid("sample has different numbers of boxes and labels"));
        }
        if self.is_normal && !self.boxes.is_empty() {
            return Err(invalid("sample is marked normal but has boxes"));
        }
        if let Some(&l) = self.labels.iter().find(|&&l| l == 0 || l > num_classes) {
            return Err(invalid(format!("category id {l} outside 1..={num_classes}")));
        }
        if let Some(t) = &self.template {
            if (t.width, t.height) != (self.image.width, self.image.height) {
                return Err(invalid(format!(
                    "template is {}x{} but image is {}x{}",
                    t.width, t.height, self.image.width, self.image.height
                )));
            }
        }
        Ok(())
    }

    /// Resizes image and template to `(width, height)` and scales the boxes
    /// by the per-axis factors.
    pub fn resized(&self, width: usize, height: usize) -> Result<Self> {
        let sx = width as f32 / self.image.width as f32;
        let sy = height as f32 / self.image.height as f32;
        Ok(Self {
            image: self.image.resize(width, height)?,
            template: self.template.as_ref().map(|t| t.resize(width, height)).transpose()?,
            boxes: self.boxes.iter().map(|b| b.scale(sx, sy)).collect(),
            labels: self.labels.clone(),
            is_normal: self.is_normal,
            split: self.split,
        })
    }
}

/// Short-edge targets and the long-edge cap.
#[derive(Debug, Clone, PartialEq)]
pub struct ResizeConfig {
    /// Inclusive range sampled uniformly per training image.
    pub train_short: (usize, usize),
    pub test_short: usize,
    pub max_long: usize,
}

impl Default for ResizeConfig {
    fn default() -> Self {
        Self {
            train_short: (600, 1000),
            test_short: 800,
            max_long: 1600,
        }
    }
}

/// Output `(width, height)` for a short-edge target under a long-edge cap.
/// When the cap binds it wins and the short edge shrinks (rounded down).
pub fn target_size(width: usize, height: usize, short: usize, max_long: usize) -> (usize, usize) {
    let (s, l) = if width <= height {
        (width, height)
    } else {
        (height, width)
    };
    let (ns, nl) = if l * short > max_long * s {
        ((s * max_long / l).max(1), max_long)
    } else {
        (short, (l * short / s).max(1))
    };
    if width <= height {
        (ns, nl)
    } else {
        (nl, ns)
    }
}

pub fn resize_test(sample: &Sample, config: &ResizeConfig) -> Result<Sample> {
    let (w, h) = target_size(
        sample.image.width,
        sample.image.height,
        config.test_short,
        config.max_long,
    );
    sample.resized(w, h)
}

pub fn resize_train<R: Rng + ?Sized>(sample: &Sample, config: &ResizeConfig, rng: &mut R) -> Result<Sample> {
    let (lo, hi) = config.train_short;
    if lo > hi || lo == 0 {
        return Err(invalid("train short-edge range is empty"));
    }
    let short = rng.random_range(lo..=hi);
    let (w, h) = target_size(sample.image.width, sample.image.height, short, config.max_long);
    sample.resized(w, h)
}

fn reflect(i: isize, n: usize) -> usize {
    let n = n as isize;
    if n == 1 {
        return 0;
    }
    let period = 2 * (n - 1);
    let mut m = i.rem_euclid(period);
    if m >= n {
        m = period - m;
    }
    m as usize
}

/// Translates the candidate image by `(dx, dy)` with reflected borders;
/// boxes move with it and are clipped, and boxes that vanish are dropped.
pub fn shift_sample(sample: &Sample, dx: isize, dy: isize) -> Result<Sample> {
    let (w, h) = (sample.image.width, sample.image.height);
    if dx.unsigned_abs() >= w || dy.unsigned_abs() >= h {
        return Err(invalid(format!("shift ({dx}, {dy}) exceeds image size {w}x{h}")));
    }
    let mut image = RgbImage::new(w, h);
    for y in 0..h {
        let sy = reflect(y as isize - dy, h);
        for x in 0..w {
            image.put(x, y, sample.image.get(reflect(x as isize - dx, w), sy));
        }
    }
    let mut boxes = Vec::with_capacity(sample.boxes.len());
    let mut labels = Vec::with_capacity(sample.labels.len());
    for (b, &l) in sample.boxes.iter().zip(&sample.labels) {
        let nb = b.translate(dx as f32, dy as f32).clip(w as f32, h as f32);
        if nb.width() > 0.0 && nb.height() > 0.0 {
            boxes.push(nb);
            labels.push(l);
        }
    }
    Ok(Sample {
        image,
        template: sample.template.clone(),
        boxes,
        labels,
        is_normal: sample.is_normal,
        split: sample.split,
    })
}

/// Random per-axis integer offset with magnitude in `[min_px, max_px]` and
/// random sign, applied by [`shift_sample`].
pub fn apply_pixel_shift<R: Rng + ?Sized>(
    sample: &Sample,
    min_px: usize,
    max_px: usize,
    rng: &mut R,
) -> Result<Sample> {
    if min_px > max_px {
        return Err(invalid("pixel shift range is empty"));
    }
    let draw = |rng: &mut R| {
        let m = rng.random_range(min_px..=max_px) as isize;
        if rng.random::<bool>() {
            m
        } else {
            -m
        }
    };
    let dx = draw(rng);
    let dy = draw(rng);
    shift_sample(sample, dx, dy)
}
