//! Versioned JSONL dataset manifests with PNG images.
//!
//! A dataset directory looks like
//!
//! ```text
//! root/
//!   manifest.jsonl
//!   images/<id>.png
//!   templates/<id>.png
//! ```
//!
//! The first manifest line is a header, every further line one sample:
//!
//! ```text
//! {"format":"refdet-manifest","version":1,"categories":["scratch","blob","stain"],"generator":{"seed":7,"config_sha256":"…"}}
//! {"id":"train_00000","split":"train","image":"images/train_00000.png","template":"templates/train_00000.png","normal":false,"annotations":[{"bbox":[3.0,4.0,20.0,11.0],"category":1}]}
//! ```
//!
//! Boxes are `[x1, y1, x2, y2]` in pixels of the stored image, category ids
//! are 1-based indices into `categories`, and image paths are relative to the
//! manifest's directory. `template` may be `null` for datasets without
//! references (only `none` and `ptg-inter` models accept those).
//!
//! # Converting Tianchi-style annotations
//!
//! The aluminium and fabric inspection sets distribute per-image JSON (or a
//! single COCO-like file) with `bbox` as `[x, y, w, h]` or corner lists, a
//! defect name per box and, for fabric, a matching template image per
//! candidate. The mapping is:
//!
//! | source field                 | manifest field                          |
//! |------------------------------|-----------------------------------------|
//! | image file name (stem)       | `id`                                    |
//! | candidate image              | `image`, copied or linked into `images/`|
//! | template image, if shipped   | `template` under `templates/`           |
//! | `bbox` `[x, y, w, h]`        | `bbox` `[x, y, x + w, y + h]`           |
//! | defect name                  | `category` = 1 + index in `categories`  |
//! | "normal" / no annotations    | `normal: true`, `annotations: []`       |
//! | train / test folder          | `split`                                 |
//!
//! Images must be converted to 8-bit RGB PNG. Any tool that emits the lines
//! above (for example a short script over the source JSON) is a valid
//! adapter; [`load_manifest`] then performs every consistency check.

use std::collections::HashSet;
use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use refdet_core::data::{Sample, Split};
use refdet_core::image::RgbImage;
use refdet_core::BBox;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const FORMAT: &str = "refdet-manifest";
pub const VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.jsonl";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GeneratorInfo {
    pub seed: u64,
    pub config_sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    format: String,
    version: u32,
    categories: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    generator: Option<GeneratorInfo>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Annotation {
    bbox: [f32; 4],
    category: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Record {
    id: String,
    split: String,
    image: String,
    template: Option<String>,
    normal: bool,
    annotations: Vec<Annotation>,
}

/// A loaded dataset: samples in manifest order with their ids.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub categories: Vec<String>,
    pub generator: Option<GeneratorInfo>,
    pub ids: Vec<String>,
    pub samples: Vec<Sample>,
}

impl Dataset {
    pub fn num_classes(&self) -> usize {
        self.categories.len()
    }

    pub fn split(&self, split: Split) -> Vec<(&str, &Sample)> {
        self.ids
            .iter()
            .zip(&self.samples)
            .filter(|(_, s)| s.split == split)
            .map(|(id, s)| (id.as_str(), s))
            .collect()
    }

    pub fn has_templates(&self) -> bool {
        self.samples.iter().all(|s| s.template.is_some())
    }
}

pub fn read_png(path: &Path) -> Result<RgbImage> {
    let img = image::open(path).map_err(|e| Error::Image {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;
    let rgb = img.to_rgb8();
    let (w, h) = rgb.dimensions();
    Ok(RgbImage::from_raw(w as usize, h as usize, rgb.into_raw())?)
}

pub fn write_png(path: &Path, im: &RgbImage) -> Result<()> {
    let buf = image::RgbImage::from_raw(im.width as u32, im.height as u32, im.data.clone())
        .expect("RgbImage buffer length matches its dimensions");
    buf.save_with_format(path, image::ImageFormat::Png)
        .map_err(|e| Error::Image {
            path: path.to_path_buf(),
            message: e.to_string(),
        })
}

/// Writes `images/`, `templates/` and the manifest under `root` and returns
/// the manifest path. Ids become file stems.
pub fn write_dataset(root: &Path, dataset: &Dataset) -> Result<PathBuf> {
    if dataset.ids.len() != dataset.samples.len() {
        return Err(Error::Dataset("ids and samples differ in length".into()));
    }
    for dir in ["images", "templates"] {
        let d = root.join(dir);
        fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
    }
    let path = root.join(MANIFEST_FILE);
    let file = File::create(&path).map_err(|e| Error::io(&path, e))?;
    let mut out = BufWriter::new(file);
    let header = Header {
        format: FORMAT.into(),
        version: VERSION,
        categories: dataset.categories.clone(),
        generator: dataset.generator.clone(),
    };
    let mut line = |v: String| writeln!(out, "{v}").map_err(|e| Error::io(&path, e));
    line(serde_json::to_string(&header).expect("header serializes"))?;
    for (id, s) in dataset.ids.iter().zip(&dataset.samples) {
        s.validate(dataset.categories.len())?;
        let image = format!("images/{id}.png");
        write_png(&root.join(&image), &s.image)?;
        let template = match &s.template {
            Some(t) => {
                let rel = format!("templates/{id}.png");
                write_png(&root.join(&rel), t)?;
                Some(rel)
            }
            None => None,
        };
        let rec = Record {
            id: id.clone(),
            split: s.split.name().into(),
            image,
            template,
            normal: s.is_normal,
            annotations: s
                .boxes
                .iter()
                .zip(&s.labels)
                .map(|(b, &c)| Annotation {
                    bbox: [b.x1, b.y1, b.x2, b.y2],
                    category: c,
                })
                .collect(),
        };
        line(serde_json::to_string(&rec).expect("record serializes"))?;
    }
    out.flush().map_err(|e| Error::io(&path, e))?;
    Ok(path)
}

/// Reads and validates a manifest and every image it references.
pub fn load_manifest(path: &Path) -> Result<Dataset> {
    let root = path.parent().unwrap_or(Path::new("."));
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let err = |line: usize, message: String| Error::Manifest {
        path: path.to_path_buf(),
        line,
        message,
    };
    let mut lines = BufReader::new(file).lines().enumerate();
    let (_, first) = lines.next().ok_or_else(|| err(1, "empty manifest".into()))?;
    let first = first.map_err(|e| Error::io(path, e))?;
    let header: Header = serde_json::from_str(&first).map_err(|e| err(1, format!("bad header: {e}")))?;
    if header.format != FORMAT {
        return Err(err(1, format!("format is `{}`, expected `{FORMAT}`", header.format)));
    }
    if header.version != VERSION {
        return Err(err(1, format!("unsupported manifest version {}", header.version)));
    }
    if header.categories.is_empty() {
        return Err(err(1, "no categories declared".into()));
    }
    let c = header.categories.len();
    let mut ids = Vec::new();
    let mut samples = Vec::new();
    let mut seen = HashSet::new();
    for (i, text) in lines {
        let n = i + 1;
        let text = text.map_err(|e| Error::io(path, e))?;
        if text.trim().is_empty() {
            continue;
        }
        let rec: Record = serde_json::from_str(&text).map_err(|e| err(n, e.to_string()))?;
        if !seen.insert(rec.id.clone()) {
            return Err(err(n, format!("duplicate id `{}`", rec.id)));
        }
        let split = match rec.split.as_str() {
            "train" => Split::Train,
            "test" => Split::Test,
            other => return Err(err(n, format!("unknown split `{other}`"))),
        };
        if rec.normal && !rec.annotations.is_empty() {
            return Err(err(
                n,
                format!("`{}` is marked normal but has {} boxes", rec.id, rec.annotations.len()),
            ));
        }
        let mut boxes = Vec::with_capacity(rec.annotations.len());
        let mut labels = Vec::with_capacity(rec.annotations.len());
        for a in &rec.annotations {
            if a.category == 0 || a.category > c {
                return Err(err(n, format!("unknown category id {} (have 1..={c})", a.category)));
            }
            let [x1, y1, x2, y2] = a.bbox;
            if !(x1 < x2 && y1 < y2) || a.bbox.iter().any(|v| !v.is_finite()) {
                return Err(err(n, format!("degenerate box {:?}", a.bbox)));
            }
            boxes.push(BBox::new(x1, y1, x2, y2));
            labels.push(a.category);
        }
        let load = |rel: &str| {
            let p = root.join(rel);
            if !p.is_file() {
                return Err(err(n, format!("missing image file {}", p.display())));
            }
            read_png(&p)
        };
        let image = load(&rec.image)?;
        let template = rec.template.as_deref().map(load).transpose()?;
        let sample = Sample {
            image,
            template,
            boxes,
            labels,
            is_normal: rec.normal,
            split,
        };
        sample.validate(c).map_err(|e| err(n, e.to_string()))?;
        ids.push(rec.id);
        samples.push(sample);
    }
    Ok(Dataset {
        categories: header.categories,
        generator: header.generator,
        ids,
        samples,
    })
}

/// Default sample ids: `<split>_<index within split>`.
pub fn default_ids(samples: &[Sample]) -> Vec<String> {
    let (mut tr, mut te) = (0, 0);
    samples
        .iter()
        .map(|s| {
            let k = match s.split {
                Split::Train => &mut tr,
                Split::Test => &mut te,
            };
            *k += 1;
            format!("{}_{:05}", s.split.name(), *k - 1)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use refdet_core::synth::{synth_generate, SynthConfig};

    fn small() -> Dataset {
        let cfg = SynthConfig {
            width: 32,
            height: 24,
            num_train: 4,
            num_test: 3,
            ..SynthConfig::default()
        };
        let ds = synth_generate(&cfg, 5).unwrap();
        Dataset {
            categories: ds.category_names,
            generator: Some(GeneratorInfo {
                seed: 5,
                config_sha256: "abc".into(),
            }),
            ids: default_ids(&ds.samples),
            samples: ds.samples,
        }
    }

    #[test]
    fn round_trip_equals_original() {
        let dir = tempfile::tempdir().unwrap();
        let ds = small();
        let path = write_dataset(dir.path(), &ds).unwrap();
        assert!(dir.path().join("images/train_00000.png").is_file());
        assert!(dir.path().join("templates/test_00002.png").is_file());
        assert_eq!(load_manifest(&path).unwrap(), ds);
    }

    #[test]
    fn missing_image_names_the_path() {
        let dir = tempfile::tempdir().unwrap();
        let path = write_dataset(dir.path(), &small()).unwrap();
        fs::remove_file(dir.path().join("images/test_00001.png")).unwrap();
        let msg = load_manifest(&path).unwrap_err().to_string();
        assert!(msg.contains("images/test_00001.png"), "{msg}");
    }

    fn rewrite(path: &Path, line: usize, f: impl Fn(&mut serde_json::Value)) {
        let text = fs::read_to_string(path).unwrap();
        let mut lines: Vec<String> = text.lines().map(String::from).collect();
        let mut v: serde_json::Value = serde_json::from_str(&lines[line]).unwrap();
        f(&mut v);
        lines[line] = v.to_string();
        fs::write(path, lines.join("\n")).unwrap();
    }

    #[test]
    fn contradictions_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let ds = small();
        let path = write_dataset(dir.path(), &ds).unwrap();
        let normal = ds.samples.iter().position(|s| !s.is_normal).unwrap() + 1;
        rewrite(&path, normal, |v| v["normal"] = true.into());
        let msg = load_manifest(&path).unwrap_err().to_string();
        assert!(msg.contains("marked normal"), "{msg}");

        let path = write_dataset(dir.path(), &ds).unwrap();
        rewrite(&path, normal, |v| v["annotations"][0]["category"] = 9.into());
        let msg = load_manifest(&path).unwrap_err().to_string();
        assert!(msg.contains("unknown category id 9"), "{msg}");

        let path = write_dataset(dir.path(), &ds).unwrap();
        rewrite(&path, 0, |v| v["version"] = 2.into());
        assert!(load_manifest(&path).unwrap_err().to_string().contains("version 2"));
    }
}
