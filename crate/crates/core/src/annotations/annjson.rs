//! The native JSON layout.
//!
//! ```json
//! {
//!   "classes": ["nodule", "mass"],
//!   "annotators": ["r1", "r2"],
//!   "images": [{"id": "img_0", "width": 64, "height": 64, "pixels": "images/img_0.pgm", "split": "train"}],
//!   "annotations": [
//!     {"image_id": "img_0", "annotator_id": "r1", "class": "mass",
//!      "x_min": 3.0, "y_min": 4.0, "x_max": 20.0, "y_max": 18.5, "score": 1.0},
//!     {"image_id": "img_0", "annotator_id": "r2"}
//!   ]
//! }
//! ```
//!
//! A record without `class` and coordinates marks an image the annotator
//! reviewed without finding anything. Fused label sets use the same layout
//! with a `wbf_config` object instead of `annotators`, and per-record
//! `confidence`, `support` and `contributors` fields.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{ingest_box, ImageRecord, LabeledBox, MultiAnnotatorDataset, Split};
use crate::error::{Error, Result};
use crate::fusion::{FusedBox, FusedDataset, WbfConfig};
use crate::geometry::BBox;

#[derive(Debug, Serialize, Deserialize)]
struct ImageEntry {
    id: String,
    width: usize,
    height: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pixels: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    split: Option<Split>,
}

#[derive(Debug, Serialize, Deserialize)]
struct AnnotationEntry {
    image_id: String,
    annotator_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    class: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    x_min: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    y_min: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    x_max: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    y_max: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    score: Option<f64>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct DatasetFile {
    classes: Vec<String>,
    annotators: Vec<String>,
    images: Vec<ImageEntry>,
    annotations: Vec<AnnotationEntry>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    provenance: Option<serde_json::Value>,
}

#[derive(Debug, Serialize, Deserialize)]
struct FusedEntry {
    image_id: String,
    class: String,
    x_min: f64,
    y_min: f64,
    x_max: f64,
    y_max: f64,
    confidence: f64,
    support: usize,
    contributors: Vec<String>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct FusedFile {
    classes: Vec<String>,
    images: Vec<ImageEntry>,
    wbf_config: WbfConfig,
    annotations: Vec<FusedEntry>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    provenance: Option<serde_json::Value>,
}

fn json_error(path: &Path, e: serde_json::Error) -> Error {
    use serde_json::error::Category;
    match e.classify() {
        Category::Data => Error::Schema(format!("{}: {e}", path.display())),
        Category::Io => Error::io(path, e.into()),
        Category::Syntax | Category::Eof => Error::Parse {
            location: format!("{}:{}:{}", path.display(), e.line(), e.column()),
            message: e.to_string(),
        },
    }
}

fn read(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

fn write(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn image_records(entries: Vec<ImageEntry>) -> Vec<ImageRecord> {
    entries
        .into_iter()
        .map(|e| ImageRecord {
            image_id: e.id,
            width: e.width,
            height: e.height,
            pixel_path: e.pixels,
            split: e.split,
        })
        .collect()
}

fn image_entries(images: &[ImageRecord]) -> Vec<ImageEntry> {
    images
        .iter()
        .map(|r| ImageEntry {
            id: r.image_id.clone(),
            width: r.width,
            height: r.height,
            pixels: r.pixel_path.clone(),
            split: r.split,
        })
        .collect()
}

pub fn parse_dataset(text: &str, origin: &Path) -> Result<MultiAnnotatorDataset> {
    let file: DatasetFile = serde_json::from_str(text).map_err(|e| json_error(origin, e))?;
    let mut ds = MultiAnnotatorDataset {
        classes: file.classes,
        annotators: file.annotators,
        images: image_records(file.images),
        annotations: BTreeMap::new(),
        provenance: file.provenance,
    };
    // image and annotator checks first so record errors below can assume them
    let probe = MultiAnnotatorDataset {
        annotations: BTreeMap::new(),
        ..ds.clone()
    };
    probe.validate()?;
    let images: BTreeMap<&str, &ImageRecord> =
        ds.images.iter().map(|r| (r.image_id.as_str(), r)).collect();

    for (idx, rec) in file.annotations.into_iter().enumerate() {
        let location = format!(
            "{}: annotations[{idx}] (image_id={}, annotator_id={})",
            origin.display(),
            rec.image_id,
            rec.annotator_id
        );
        let err = |message: String| Error::Parse {
            location: location.clone(),
            message,
        };
        let img = *images
            .get(rec.image_id.as_str())
            .ok_or_else(|| Error::MissingImage(rec.image_id.clone()))?;
        if !ds.annotators.contains(&rec.annotator_id) {
            return Err(Error::UnknownAnnotator(rec.annotator_id));
        }
        let key = (rec.image_id.clone(), rec.annotator_id.clone());
        let coords = [rec.x_min, rec.y_min, rec.x_max, rec.y_max];
        let Some(class) = rec.class else {
            if coords.iter().any(Option::is_some) || rec.score.is_some() {
                return Err(err("coordinates given without a class".into()));
            }
            ds.annotations.entry(key).or_default();
            continue;
        };
        let class_id = ds
            .class_index(&class)
            .ok_or_else(|| Error::UnknownClass(class.clone()))?;
        let coords = match coords {
            [Some(a), Some(b), Some(c), Some(d)] => [a, b, c, d],
            _ => return Err(err("missing box coordinate".into())),
        };
        let score = rec.score.unwrap_or(1.0);
        if !(0.0..=1.0).contains(&score) {
            return Err(err(format!("score {score} outside [0, 1]")));
        }
        let bbox = ingest_box(coords, img).map_err(err)?;
        ds.annotations.entry(key).or_default().push(LabeledBox {
            bbox,
            class_id,
            score,
        });
    }
    ds.validate()?;
    Ok(ds)
}

pub fn load_dataset(path: &Path) -> Result<MultiAnnotatorDataset> {
    parse_dataset(&read(path)?, path)
}

pub fn dataset_to_string(ds: &MultiAnnotatorDataset) -> Result<String> {
    let mut annotations = Vec::new();
    for img in &ds.images {
        for annotator in &ds.annotators {
            let Some(boxes) = ds
                .annotations
                .get(&(img.image_id.clone(), annotator.clone()))
            else {
                continue;
            };
            if boxes.is_empty() {
                annotations.push(AnnotationEntry {
                    image_id: img.image_id.clone(),
                    annotator_id: annotator.clone(),
                    class: None,
                    x_min: None,
                    y_min: None,
                    x_max: None,
                    y_max: None,
                    score: None,
                });
            }
            for b in boxes {
                annotations.push(AnnotationEntry {
                    image_id: img.image_id.clone(),
                    annotator_id: annotator.clone(),
                    class: Some(ds.classes[b.class_id].clone()),
                    x_min: Some(b.bbox.x_min),
                    y_min: Some(b.bbox.y_min),
                    x_max: Some(b.bbox.x_max),
                    y_max: Some(b.bbox.y_max),
                    score: Some(b.score),
                });
            }
        }
    }
    let file = DatasetFile {
        classes: ds.classes.clone(),
        annotators: ds.annotators.clone(),
        images: image_entries(&ds.images),
        annotations,
        provenance: ds.provenance.clone(),
    };
    let mut text = serde_json::to_string_pretty(&file)?;
    text.push('\n');
    Ok(text)
}

pub fn save_dataset(ds: &MultiAnnotatorDataset, path: &Path) -> Result<()> {
    write(path, &dataset_to_string(ds)?)
}

pub fn parse_fused(text: &str, origin: &Path) -> Result<FusedDataset> {
    let file: FusedFile = serde_json::from_str(text).map_err(|e| json_error(origin, e))?;
    file.wbf_config.validate()?;
    let images = image_records(file.images);
    let mut fused: BTreeMap<String, Vec<FusedBox>> = images
        .iter()
        .map(|r| (r.image_id.clone(), Vec::new()))
        .collect();
    for (idx, rec) in file.annotations.into_iter().enumerate() {
        let location = format!("{}: annotations[{idx}]", origin.display());
        let err = |message: String| Error::Parse {
            location: location.clone(),
            message,
        };
        let img = images
            .iter()
            .find(|r| r.image_id == rec.image_id)
            .ok_or_else(|| Error::MissingImage(rec.image_id.clone()))?;
        let class_id = file
            .classes
            .iter()
            .position(|c| *c == rec.class)
            .ok_or_else(|| Error::UnknownClass(rec.class.clone()))?;
        let bbox = BBox::from_coords([rec.x_min, rec.y_min, rec.x_max, rec.y_max]);
        bbox.validate().map_err(|e| err(e.to_string()))?;
        if bbox.x_min < 0.0
            || bbox.y_min < 0.0
            || bbox.x_max > img.width as f64
            || bbox.y_max > img.height as f64
        {
            return Err(err("fused box outside its image".into()));
        }
        if !(0.0..=1.0).contains(&rec.confidence) {
            return Err(err(format!("confidence {} outside [0, 1]", rec.confidence)));
        }
        if rec.support == 0 {
            return Err(err("support must be at least 1".into()));
        }
        let contributors: BTreeSet<String> = rec.contributors.into_iter().collect();
        fused.get_mut(&rec.image_id).expect("image present").push(FusedBox {
            bbox,
            class_id,
            confidence: rec.confidence,
            support: rec.support,
            contributors,
        });
    }
    Ok(FusedDataset {
        classes: file.classes,
        images,
        fused,
        config: file.wbf_config,
        provenance: file.provenance,
    })
}

pub fn fused_to_string(fd: &FusedDataset) -> Result<String> {
    let mut annotations = Vec::new();
    for img in &fd.images {
        for b in fd.fused.get(&img.image_id).into_iter().flatten() {
            annotations.push(FusedEntry {
                image_id: img.image_id.clone(),
                class: fd.classes[b.class_id].clone(),
                x_min: b.bbox.x_min,
                y_min: b.bbox.y_min,
                x_max: b.bbox.x_max,
                y_max: b.bbox.y_max,
                confidence: b.confidence,
                support: b.support,
                contributors: b.contributors.iter().cloned().collect(),
            });
        }
    }
    let file = FusedFile {
        classes: fd.classes.clone(),
        images: image_entries(&fd.images),
        wbf_config: fd.config.clone(),
        annotations,
        provenance: fd.provenance.clone(),
    };
    let mut text = serde_json::to_string_pretty(&file)?;
    text.push('\n');
    Ok(text)
}

pub fn save_fused(fd: &FusedDataset, path: &Path) -> Result<()> {
    write(path, &fused_to_string(fd)?)
}

pub fn load_fused(path: &Path) -> Result<FusedDataset> {
    parse_fused(&read(path)?, path)
}
