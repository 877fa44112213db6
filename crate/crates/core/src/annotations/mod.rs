//! Images, per-annotator box sets and their on-disk formats.
//!
//! Two dataset formats are understood:
//!
//! * `annjson`, the native JSON layout (see [`annjson`]);
//! * `vindr-csv`, one row per radiologist box with an `images.csv` sidecar
//!   carrying image dimensions (see [`vindr`]).
//!
//! Pixel data is grayscale binary PGM (see [`pgm`]).

pub mod annjson;
pub mod pgm;
pub mod vindr;

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{clip_to_image, BBox};

pub use annjson::{load_fused, save_fused};
pub use pgm::{load_image_pixels, GrayImage};

/// One annotator's box.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LabeledBox {
    pub bbox: BBox,
    pub class_id: usize,
    /// Annotator-supplied confidence in `[0, 1]`; 1.0 when the source has none.
    pub score: f64,
}

impl LabeledBox {
    pub fn new(bbox: BBox, class_id: usize) -> Self {
        LabeledBox {
            bbox,
            class_id,
            score: 1.0,
        }
    }

    pub fn with_score(mut self, score: f64) -> Self {
        self.score = score;
        self
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ImageRecord {
    pub image_id: String,
    pub width: usize,
    pub height: usize,
    pub pixel_path: Option<PathBuf>,
    pub split: Option<Split>,
}

impl ImageRecord {
    pub fn new(image_id: impl Into<String>, width: usize, height: usize) -> Self {
        ImageRecord {
            image_id: image_id.into(),
            width,
            height,
            pixel_path: None,
            split: None,
        }
    }
}

/// Key of the annotation map: `(image_id, annotator_id)`.
pub type AnnotationKey = (String, String);

/// Images plus the box sets each annotator drew on them.
///
/// A key present with an empty list means the annotator reviewed the image and
/// found nothing; an absent key means the annotator never saw the image.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct MultiAnnotatorDataset {
    pub classes: Vec<String>,
    pub annotators: Vec<String>,
    pub images: Vec<ImageRecord>,
    pub annotations: BTreeMap<AnnotationKey, Vec<LabeledBox>>,
    /// Free-form resolved configuration of whatever produced the file.
    pub provenance: Option<serde_json::Value>,
}

/// Supported dataset layouts for [`load_dataset`].
#[derive(Debug, Clone, PartialEq, Default)]
pub enum DatasetFormat {
    #[default]
    AnnJson,
    /// `images` defaults to `images.csv` next to the label file; `classes`
    /// defaults to the class names in order of first appearance.
    VindrCsv {
        images: Option<PathBuf>,
        classes: Option<Vec<String>>,
    },
}

pub fn load_dataset(path: &Path, format: &DatasetFormat) -> Result<MultiAnnotatorDataset> {
    match format {
        DatasetFormat::AnnJson => annjson::load_dataset(path),
        DatasetFormat::VindrCsv { images, classes } => {
            let sidecar = images.clone().unwrap_or_else(|| {
                path.parent()
                    .unwrap_or_else(|| Path::new("."))
                    .join("images.csv")
            });
            vindr::load(path, &sidecar, classes.as_deref())
        }
    }
}

impl MultiAnnotatorDataset {
    pub fn num_classes(&self) -> usize {
        self.classes.len()
    }

    pub fn image(&self, image_id: &str) -> Option<&ImageRecord> {
        self.images.iter().find(|r| r.image_id == image_id)
    }

    pub fn class_index(&self, name: &str) -> Option<usize> {
        self.classes.iter().position(|c| c == name)
    }

    /// Boxes per annotator for one image, only for annotators that reviewed it.
    pub fn boxes_by_annotator(&self, image_id: &str) -> BTreeMap<String, Vec<LabeledBox>> {
        self.annotators
            .iter()
            .filter_map(|a| {
                self.annotations
                    .get(&(image_id.to_string(), a.clone()))
                    .map(|boxes| (a.clone(), boxes.clone()))
            })
            .collect()
    }

    /// All boxes drawn on an image, pooled over annotators in annotator order.
    pub fn pooled_boxes(&self, image_id: &str) -> Vec<LabeledBox> {
        self.boxes_by_annotator(image_id)
            .into_values()
            .flatten()
            .collect()
    }

    /// Restricts the dataset to images whose split matches.
    pub fn filter_split(&self, split: Split) -> MultiAnnotatorDataset {
        let images: Vec<ImageRecord> = self
            .images
            .iter()
            .filter(|r| r.split == Some(split))
            .cloned()
            .collect();
        let keep: std::collections::BTreeSet<&str> =
            images.iter().map(|r| r.image_id.as_str()).collect();
        let annotations = self
            .annotations
            .iter()
            .filter(|((img, _), _)| keep.contains(img.as_str()))
            .map(|(k, v)| (k.clone(), v.clone()))
            .collect();
        MultiAnnotatorDataset {
            classes: self.classes.clone(),
            annotators: self.annotators.clone(),
            images,
            annotations,
            provenance: self.provenance.clone(),
        }
    }

    /// Checks every domain invariant. Boxes must already be clipped.
    pub fn validate(&self) -> Result<()> {
        if self.classes.is_empty() {
            return Err(Error::Schema("dataset has no classes".into()));
        }
        let mut seen = std::collections::BTreeSet::new();
        for img in &self.images {
            if !seen.insert(img.image_id.as_str()) {
                return Err(Error::Schema(format!("duplicate image id `{}`", img.image_id)));
            }
            if img.width == 0 || img.height == 0 {
                return Err(Error::Schema(format!(
                    "image `{}` has zero width or height",
                    img.image_id
                )));
            }
        }
        let mut annotators = std::collections::BTreeSet::new();
        for a in &self.annotators {
            if !annotators.insert(a.as_str()) {
                return Err(Error::Schema(format!("duplicate annotator id `{a}`")));
            }
        }
        for ((image_id, annotator), boxes) in &self.annotations {
            let img = self
                .image(image_id)
                .ok_or_else(|| Error::MissingImage(image_id.clone()))?;
            if !annotators.contains(annotator.as_str()) {
                return Err(Error::UnknownAnnotator(annotator.clone()));
            }
            for b in boxes {
                check_labeled_box(b, img, self.classes.len())
                    .map_err(|m| Error::invalid(format!("{image_id}/{annotator}: {m}")))?;
            }
        }
        Ok(())
    }
}

fn check_labeled_box(b: &LabeledBox, img: &ImageRecord, num_classes: usize) -> Result<(), String> {
    b.bbox.validate().map_err(|e| e.to_string())?;
    if b.bbox.is_degenerate() {
        return Err(format!("zero-area box {:?}", b.bbox.coords()));
    }
    if b.class_id >= num_classes {
        return Err(format!("class id {} out of range", b.class_id));
    }
    if !(0.0..=1.0).contains(&b.score) {
        return Err(format!("score {} outside [0, 1]", b.score));
    }
    let (w, h) = (img.width as f64, img.height as f64);
    if b.bbox.x_min < 0.0 || b.bbox.y_min < 0.0 || b.bbox.x_max > w || b.bbox.y_max > h {
        return Err(format!("box {:?} outside {}x{} image", b.bbox.coords(), w, h));
    }
    Ok(())
}

/// Validates raw coordinates and clips them to the image, the common path of
/// every loader. Returns a message suitable for a parse-error location.
pub(crate) fn ingest_box(
    coords: [f64; 4],
    img: &ImageRecord,
) -> std::result::Result<BBox, String> {
    let raw = BBox::from_coords(coords);
    if !raw.is_finite() {
        return Err("non-finite coordinate".into());
    }
    if raw.x_max < raw.x_min {
        return Err(format!("x_max {} < x_min {}", raw.x_max, raw.x_min));
    }
    if raw.y_max < raw.y_min {
        return Err(format!("y_max {} < y_min {}", raw.y_max, raw.y_min));
    }
    let clipped = clip_to_image(&raw, img.width as f64, img.height as f64);
    if clipped.is_degenerate() {
        return Err(format!(
            "box {:?} has zero area inside the {}x{} image",
            coords, img.width, img.height
        ));
    }
    Ok(clipped)
}
