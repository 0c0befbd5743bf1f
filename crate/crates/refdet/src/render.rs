//! Detection export and box overlays.
//!
//! Export format: one JSON object per detection and line,
//!
//! ```text
//! {"image":"test_00003","category":2,"category_name":"blob","score":0.93,"bbox":[10.5,4.0,22.0,17.25]}
//! ```
//!
//! with `bbox` as `[x1, y1, x2, y2]` in pixels of the original (unresized)
//! image. Overlays are drawn from the very same records.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use refdet_core::eval::{Detection, DetectionResult};
use refdet_core::image::RgbImage;
use refdet_core::BBox;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionRecord {
    pub image: String,
    pub category: usize,
    pub category_name: String,
    pub score: f32,
    pub bbox: [f32; 4],
}

impl DetectionRecord {
    pub fn bbox(&self) -> BBox {
        let [x1, y1, x2, y2] = self.bbox;
        BBox::new(x1, y1, x2, y2)
    }
}

/// Maps detections from a resized frame back to the original one.
pub fn rescale(result: &DetectionResult, sx: f32, sy: f32) -> DetectionResult {
    DetectionResult {
        detections: result
            .detections
            .iter()
            .map(|d| Detection {
                bbox: d.bbox.scale(sx, sy),
                ..*d
            })
            .collect(),
    }
}

pub fn records(image: &str, result: &DetectionResult, categories: &[String]) -> Vec<DetectionRecord> {
    result
        .detections
        .iter()
        .map(|d| DetectionRecord {
            image: image.to_string(),
            category: d.category,
            category_name: categories.get(d.category - 1).cloned().unwrap_or_default(),
            score: d.score,
            bbox: [d.bbox.x1, d.bbox.y1, d.bbox.x2, d.bbox.y2],
        })
        .collect()
}

pub fn write_records(path: &Path, records: &[DetectionRecord]) -> Result<()> {
    let f = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(f);
    for r in records {
        serde_json::to_writer(&mut w, r).map_err(|e| Error::io(path, e.into()))?;
        writeln!(w).map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

const PALETTE: [[u8; 3]; 6] = [
    [255, 40, 40],
    [40, 220, 40],
    [60, 120, 255],
    [255, 200, 0],
    [255, 0, 255],
    [0, 230, 230],
];

pub fn category_color(category: usize) -> [u8; 3] {
    PALETTE[(category.saturating_sub(1)) % PALETTE.len()]
}

/// Pixel rectangle `[x0, x1) x [y0, y1)` covered by a box outline, clamped
/// to the image.
pub fn pixel_rect(b: &BBox, width: usize, height: usize) -> Option<(usize, usize, usize, usize)> {
    let clamp = |v: f32, n: usize| (v.round().max(0.0) as usize).min(n);
    let (x0, x1) = (clamp(b.x1, width), clamp(b.x2, width));
    let (y0, y1) = (clamp(b.y1, height), clamp(b.y2, height));
    (x0 < x1 && y0 < y1).then_some((x0, x1, y0, y1))
}

/// Copy of `image` with one-pixel outlines for records scoring at least
/// `threshold`. With nothing above the threshold the copy is unchanged.
pub fn draw_overlay(image: &RgbImage, records: &[DetectionRecord], threshold: f32) -> RgbImage {
    let mut out = image.clone();
    for r in records.iter().filter(|r| r.score >= threshold) {
        let Some((x0, x1, y0, y1)) = pixel_rect(&r.bbox(), image.width, image.height) else {
            continue;
        };
        let c = category_color(r.category);
        for x in x0..x1 {
            out.put(x, y0, c);
            out.put(x, y1 - 1, c);
        }
        for y in y0..y1 {
            out.put(x0, y, c);
            out.put(x1 - 1, y, c);
        }
    }
    out
}
