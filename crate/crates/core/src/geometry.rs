//! Axis-aligned box arithmetic: IoU, greedy NMS, delta coding, context boxes
//! and anchor grids.
//!
//! Boxes are half-open pixel intervals `[x1, x2) x [y1, y2)` with area
//! `(x2 - x1) * (y2 - y1)`, no `+1` correction.

use alloc::vec::Vec;
use core::cmp::Ordering;

use crate::error::{invalid, Result};

/// Largest log-scale a decoded delta may apply (`ln(1000 / 16)`).
pub const DELTA_CLAMP: f32 = 4.135_166_6;

/// Axis-aligned rectangle in corner encoding.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct BBox {
    pub x1: f32,
    pub y1: f32,
    pub x2: f32,
    pub y2: f32,
}

impl BBox {
    pub const fn new(x1: f32, y1: f32, x2: f32, y2: f32) -> Self {
        Self { x1, y1, x2, y2 }
    }

    /// Builds a box from its center-size encoding.
    pub fn from_center(cx: f32, cy: f32, w: f32, h: f32) -> Self {
        Self {
            x1: cx - 0.5 * w,
            y1: cy - 0.5 * h,
            x2: cx + 0.5 * w,
            y2: cy + 0.5 * h,
        }
    }

    /// `(cx, cy, w, h)`.
    pub fn to_center(&self) -> (f32, f32, f32, f32) {
        let w = self.x2 - self.x1;
        let h = self.y2 - self.y1;
        (self.x1 + 0.5 * w, self.y1 + 0.5 * h, w, h)
    }

    pub fn width(&self) -> f32 {
        self.x2 - self.x1
    }

    pub fn height(&self) -> f32 {
        self.y2 - self.y1
    }

    pub fn area(&self) -> f32 {
        self.width().max(0.0) * self.height().max(0.0)
    }

    pub fn is_valid(&self) -> bool {
        self.x2 >= self.x1 && self.y2 >= self.y1
    }

    /// Clips corners to `[0, width] x [0, height]`.
    pub fn clip(&self, width: f32, height: f32) -> Self {
        let cx = |v: f32| v.clamp(0.0, width);
        let cy = |v: f32| v.clamp(0.0, height);
        let x1 = cx(self.x1);
        let y1 = cy(self.y1);
        Self {
            x1,
            y1,
            x2: cx(self.x2).max(x1),
            y2: cy(self.y2).max(y1),
        }
    }

    pub fn translate(&self, dx: f32, dy: f32) -> Self {
        Self::new(self.x1 + dx, self.y1 + dy, self.x2 + dx, self.y2 + dy)
    }

    pub fn scale(&self, sx: f32, sy: f32) -> Self {
        Self::new(self.x1 * sx, self.y1 * sy, self.x2 * sx, self.y2 * sy)
    }

    pub fn as_array(&self) -> [f32; 4] {
        [self.x1, self.y1, self.x2, self.y2]
    }
}

/// Intersection over union. Zero-area boxes give 0.
pub fn iou(a: &BBox, b: &BBox) -> f32 {
    let iw = a.x2.min(b.x2) - a.x1.max(b.x1);
    let ih = a.y2.min(b.y2) - a.y1.max(b.y1);
    if iw <= 0.0 || ih <= 0.0 {
        return 0.0;
    }
    let inter = iw * ih;
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        0.0
    } else {
        (inter / union).clamp(0.0, 1.0)
    }
}

/// Indices sorted by descending score; ties keep the lower index first.
pub fn argsort_desc(scores: &[f32]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap_or(Ordering::Equal));
    order
}

/// Greedy non-maximum suppression.
///
/// Returns kept indices in descending score order. A box is dropped when its
/// IoU with an already kept box exceeds `threshold`.
pub fn nms(boxes: &[BBox], scores: &[f32], threshold: f32) -> Result<Vec<usize>> {
    if boxes.len() != scores.len() {
        return Err(invalid(alloc::format!(
            "nms: {} boxes but {} scores",
            boxes.len(),
            scores.len()
        )));
    }
    let order = argsort_desc(scores);
    let mut suppressed = alloc::vec![false; boxes.len()];
    let mut keep = Vec::new();
    for (pos, &i) in order.iter().enumerate() {
        if suppressed[i] {
            continue;
        }
        keep.push(i);
        for &j in &order[pos + 1..] {
            if !suppressed[j] && iou(&boxes[i], &boxes[j]) > threshold {
                suppressed[j] = true;
            }
        }
    }
    Ok(keep)
}

/// Delta parameterisation `dx = (cx_t - cx_a) / w_a`, `dw = ln(w_t / w_a)`,
/// each component standardised by `(d - mean) / std`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoxCoder {
    pub means: [f32; 4],
    pub stds: [f32; 4],
}

impl Default for BoxCoder {
    fn default() -> Self {
        Self::unit()
    }
}

impl BoxCoder {
    pub const fn unit() -> Self {
        Self {
            means: [0.0; 4],
            stds: [1.0; 4],
        }
    }

    pub const fn with_stds(stds: [f32; 4]) -> Self {
        Self { means: [0.0; 4], stds }
    }

    pub fn encode(&self, anchor: &BBox, target: &BBox) -> Result<[f32; 4]> {
        let (ax, ay, aw, ah) = anchor.to_center();
        let (tx, ty, tw, th) = target.to_center();
        if !(aw > 0.0 && ah > 0.0) {
            return Err(invalid("encode_deltas: anchor must have positive size"));
        }
        if !(tw > 0.0 && th > 0.0) {
            return Err(invalid("encode_deltas: target must have positive size"));
        }
        let raw = [(tx - ax) / aw, (ty - ay) / ah, libm::logf(tw / aw), libm::logf(th / ah)];
        let mut out = [0.0; 4];
        for k in 0..4 {
            out[k] = (raw[k] - self.means[k]) / self.stds[k];
        }
        Ok(out)
    }

    pub fn decode(&self, anchor: &BBox, deltas: &[f32]) -> BBox {
        let (ax, ay, aw, ah) = anchor.to_center();
        let d = |k: usize| deltas[k] * self.stds[k] + self.means[k];
        let dw = d(2).min(DELTA_CLAMP);
        let dh = d(3).min(DELTA_CLAMP);
        BBox::from_center(ax + d(0) * aw, ay + d(1) * ah, aw * libm::expf(dw), ah * libm::expf(dh))
    }
}

/// Unstandardised delta encoding of `target` relative to `anchor`.
pub fn encode_deltas(anchor: &BBox, target: &BBox) -> Result<[f32; 4]> {
    BoxCoder::unit().encode(anchor, target)
}

/// Inverse of [`encode_deltas`].
pub fn decode_deltas(anchor: &BBox, deltas: &[f32; 4]) -> BBox {
    BoxCoder::unit().decode(anchor, deltas)
}

/// Concentric box scaled by `k`, corner-clipped to the image.
///
/// Clipping acts on each corner independently, so the center moves when the
/// scaled box crosses a border.
pub fn context_box(r: &BBox, k: f32, image_w: f32, image_h: f32) -> BBox {
    let (cx, cy, w, h) = r.to_center();
    BBox::from_center(cx, cy, k * w, k * h).clip(image_w, image_h)
}

/// Anchors for one pyramid level, ordered `(ratio, row, col)` so they line up
/// with a channel-major `[A, H, W]` head output.
#[derive(Debug, Clone, PartialEq)]
pub struct LevelAnchors {
    pub height: usize,
    pub width: usize,
    pub stride: f32,
    pub num_ratios: usize,
    pub boxes: Vec<BBox>,
}

impl LevelAnchors {
    /// Flat index of anchor `(a, i, j)`.
    pub fn index(&self, a: usize, i: usize, j: usize) -> usize {
        (a * self.height + i) * self.width + j
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AnchorGrid {
    pub levels: Vec<LevelAnchors>,
}

impl AnchorGrid {
    pub fn len(&self) -> usize {
        self.levels.iter().map(|l| l.boxes.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// All anchors concatenated level by level.
    pub fn flat(&self) -> Vec<BBox> {
        self.levels.iter().flat_map(|l| l.boxes.iter().copied()).collect()
    }

    /// Start offset of each level in [`flat`](Self::flat) order.
    pub fn offsets(&self) -> Vec<usize> {
        let mut acc = 0;
        self.levels
            .iter()
            .map(|l| {
                let o = acc;
                acc += l.boxes.len();
                o
            })
            .collect()
    }
}

/// Builds the anchor grid.
///
/// `ratios` are height/width ratios; every ratio keeps the area at `size^2`.
/// Cell `(i, j)` of a level is centered at `((j + 0.5) * stride, (i + 0.5) * stride)`.
pub fn generate_anchors(
    level_shapes: &[(usize, usize)],
    strides: &[f32],
    sizes: &[f32],
    ratios: &[f32],
) -> Result<AnchorGrid> {
    if level_shapes.len() != strides.len() || level_shapes.len() != sizes.len() {
        return Err(invalid(alloc::format!(
            "generate_anchors: {} levels, {} strides, {} sizes",
            level_shapes.len(),
            strides.len(),
            sizes.len()
        )));
    }
    if ratios.is_empty() || ratios.iter().any(|r| !(*r > 0.0)) {
        return Err(invalid("generate_anchors: ratios must be positive"));
    }
    let mut levels = Vec::with_capacity(level_shapes.len());
    for ((&(h, w), &stride), &size) in level_shapes.iter().zip(strides).zip(sizes) {
        if h == 0 || w == 0 {
            return Err(invalid("generate_anchors: level shapes must be positive"));
        }
        let mut boxes = Vec::with_capacity(h * w * ratios.len());
        for &r in ratios {
            let sr = libm::sqrtf(r);
            let aw = size / sr;
            let ah = size * sr;
            for i in 0..h {
                for j in 0..w {
                    let cx = (j as f32 + 0.5) * stride;
                    let cy = (i as f32 + 0.5) * stride;
                    boxes.push(BBox::from_center(cx, cy, aw, ah));
                }
            }
        }
        levels.push(LevelAnchors {
            height: h,
            width: w,
            stride,
            num_ratios: ratios.len(),
            boxes,
        });
    }
    Ok(AnchorGrid { levels })
}
