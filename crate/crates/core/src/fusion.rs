//! Weighted Boxes Fusion across annotators.
//!
//! Same-class boxes from every annotator of an image are clustered by IoU
//! against each cluster's running fused box. A cluster's box is the
//! score-weighted mean of its members; its confidence is the mean (or max) of
//! member scores, rescaled by how many of the `t` annotators agreed. That
//! rescaled confidence is the consensus weight consumed by the training loss.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BTreeSet};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::annotations::{ImageRecord, LabeledBox, MultiAnnotatorDataset};
use crate::error::{Error, Result};
use crate::geometry::{clip_to_image, iou, BBox};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ConfMode {
    #[default]
    Avg,
    Max,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum RescaleMode {
    /// `c * min(t, N) / t`
    #[default]
    MinOverT,
    /// `min(1, c * N / t)`
    NOverT,
    None,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WbfConfig {
    pub iou_threshold: f64,
    #[serde(default)]
    pub conf_mode: ConfMode,
    #[serde(default)]
    pub rescale_mode: RescaleMode,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub t_override: Option<usize>,
}

impl Default for WbfConfig {
    fn default() -> Self {
        WbfConfig {
            iou_threshold: 0.55,
            conf_mode: ConfMode::Avg,
            rescale_mode: RescaleMode::MinOverT,
            t_override: None,
        }
    }
}

impl WbfConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.iou_threshold > 0.0 && self.iou_threshold < 1.0) {
            return Err(Error::invalid(format!(
                "WBF iou_threshold {} not in (0, 1)",
                self.iou_threshold
            )));
        }
        if self.t_override == Some(0) {
            return Err(Error::invalid("WBF t_override must be positive"));
        }
        Ok(())
    }
}

/// An estimated ground-truth box with its consensus confidence.
#[derive(Debug, Clone, PartialEq)]
pub struct FusedBox {
    pub bbox: BBox,
    pub class_id: usize,
    pub confidence: f64,
    /// Cluster size.
    pub support: usize,
    pub contributors: BTreeSet<String>,
}

impl FusedBox {
    /// Wraps a raw annotation as a confidence-1.0 singleton, the form in
    /// which unfused label sets are fed to training.
    pub fn from_labeled(b: &LabeledBox, annotator: &str) -> Self {
        FusedBox {
            bbox: b.bbox,
            class_id: b.class_id,
            confidence: 1.0,
            support: 1,
            contributors: BTreeSet::from([annotator.to_string()]),
        }
    }

    pub fn to_labeled(&self) -> LabeledBox {
        LabeledBox {
            bbox: self.bbox,
            class_id: self.class_id,
            score: self.confidence,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FusedDataset {
    pub classes: Vec<String>,
    pub images: Vec<ImageRecord>,
    /// Every image id is present, possibly with an empty list.
    pub fused: BTreeMap<String, Vec<FusedBox>>,
    pub config: WbfConfig,
    pub provenance: Option<serde_json::Value>,
}

impl FusedDataset {
    pub fn empty(classes: Vec<String>, images: Vec<ImageRecord>, config: WbfConfig) -> Self {
        let fused = images
            .iter()
            .map(|r| (r.image_id.clone(), Vec::new()))
            .collect();
        FusedDataset {
            classes,
            images,
            fused,
            config,
            provenance: None,
        }
    }

    pub fn boxes(&self, image_id: &str) -> &[FusedBox] {
        self.fused.get(image_id).map(Vec::as_slice).unwrap_or(&[])
    }
}

struct Member<'a> {
    bbox: BBox,
    score: f64,
    annotator: &'a str,
}

struct Cluster<'a> {
    members: Vec<Member<'a>>,
    fused: BBox,
    confidence: f64,
}

impl<'a> Cluster<'a> {
    fn new(m: Member<'a>) -> Self {
        let mut c = Cluster {
            members: vec![],
            fused: m.bbox,
            confidence: m.score,
        };
        c.push(m, ConfMode::Avg);
        c
    }

    fn push(&mut self, m: Member<'a>, mode: ConfMode) {
        self.members.push(m);
        self.refit(mode);
    }

    fn refit(&mut self, mode: ConfMode) {
        let total: f64 = self.members.iter().map(|m| m.score).sum();
        let mut coords = [0.0; 4];
        for (j, slot) in coords.iter_mut().enumerate() {
            let (lo, hi) = self.members.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), m| {
                let v = m.bbox.coords()[j];
                (lo.min(v), hi.max(v))
            });
            let mean = if total > 0.0 {
                self.members
                    .iter()
                    .map(|m| m.score * m.bbox.coords()[j])
                    .sum::<f64>()
                    / total
            } else {
                self.members.iter().map(|m| m.bbox.coords()[j]).sum::<f64>()
                    / self.members.len() as f64
            };
            // rounding can step a hair outside the members' envelope
            *slot = mean.clamp(lo, hi);
        }
        self.fused = BBox::from_coords(coords);

        let (lo, hi) = self.members.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), m| {
            (lo.min(m.score), hi.max(m.score))
        });
        self.confidence = match mode {
            ConfMode::Avg => (total / self.members.len() as f64).clamp(lo, hi),
            ConfMode::Max => hi,
        };
    }
}

fn rescale(confidence: f64, support: usize, t: usize, mode: RescaleMode) -> f64 {
    let c = match mode {
        RescaleMode::MinOverT if support >= t => confidence,
        RescaleMode::MinOverT => confidence * support as f64 / t as f64,
        RescaleMode::NOverT => (confidence * support as f64 / t as f64).min(1.0),
        RescaleMode::None => confidence,
    };
    c.clamp(0.0, 1.0)
}

/// Fuses one image's annotations. `t` is the number of annotators the
/// agreement is measured against. Output is sorted by
/// `(class_id, confidence desc, coordinates)`.
pub fn fuse_image(
    boxes_by_annotator: &BTreeMap<String, Vec<LabeledBox>>,
    t: usize,
    cfg: &WbfConfig,
) -> Result<Vec<FusedBox>> {
    if t < 1 {
        return Err(Error::invalid("annotator count t must be at least 1"));
    }
    cfg.validate()?;

    let mut by_class: BTreeMap<usize, Vec<Member>> = BTreeMap::new();
    for (annotator, boxes) in boxes_by_annotator {
        for b in boxes {
            b.bbox.validate()?;
            by_class.entry(b.class_id).or_default().push(Member {
                bbox: b.bbox,
                score: b.score,
                annotator,
            });
        }
    }

    let mut out = Vec::new();
    for (class_id, mut members) in by_class {
        members.sort_by(|a, b| {
            b.score
                .total_cmp(&a.score)
                .then_with(|| a.annotator.cmp(b.annotator))
                .then_with(|| a.bbox.lex_cmp(&b.bbox))
        });
        let mut clusters: Vec<Cluster> = Vec::new();
        for m in members {
            match clusters
                .iter_mut()
                .find(|c| iou(&c.fused, &m.bbox) > cfg.iou_threshold)
            {
                Some(c) => c.push(m, cfg.conf_mode),
                None => clusters.push(Cluster::new(m)),
            }
        }
        out.extend(clusters.into_iter().map(|c| {
            let support = c.members.len();
            FusedBox {
                bbox: c.fused,
                class_id,
                confidence: rescale(c.confidence, support, t, cfg.rescale_mode),
                support,
                contributors: c.members.iter().map(|m| m.annotator.to_string()).collect(),
            }
        }));
    }
    out.sort_by(compare_fused);
    Ok(out)
}

fn compare_fused(a: &FusedBox, b: &FusedBox) -> Ordering {
    a.class_id
        .cmp(&b.class_id)
        .then_with(|| b.confidence.total_cmp(&a.confidence))
        .then_with(|| a.bbox.lex_cmp(&b.bbox))
}

/// Fuses every image of a dataset; fused boxes are clipped to their image.
pub fn fuse_dataset(ds: &MultiAnnotatorDataset, cfg: &WbfConfig) -> Result<FusedDataset> {
    cfg.validate()?;
    let t = cfg.t_override.unwrap_or(ds.annotators.len()).max(1);
    let fused: Vec<(String, Vec<FusedBox>)> = ds
        .images
        .par_iter()
        .map(|img| {
            let mut boxes = fuse_image(&ds.boxes_by_annotator(&img.image_id), t, cfg)?;
            for b in &mut boxes {
                b.bbox = clip_to_image(&b.bbox, img.width as f64, img.height as f64);
            }
            Ok((img.image_id.clone(), boxes))
        })
        .collect::<Result<_>>()?;
    Ok(FusedDataset {
        classes: ds.classes.clone(),
        images: ds.images.clone(),
        fused: fused.into_iter().collect(),
        config: cfg.clone(),
        provenance: None,
    })
}

/// Fuses several detectors' outputs on one image; each model counts as one
/// annotator and the fused confidences become detection scores.
pub fn fuse_predictions(per_model: &[Vec<LabeledBox>], cfg: &WbfConfig) -> Result<Vec<LabeledBox>> {
    if per_model.is_empty() {
        return Err(Error::invalid("ensemble needs at least one model"));
    }
    let by_model: BTreeMap<String, Vec<LabeledBox>> = per_model
        .iter()
        .enumerate()
        .map(|(i, p)| (format!("model_{i:04}"), p.clone()))
        .collect();
    let t = cfg.t_override.unwrap_or(per_model.len());
    let mut fused: Vec<LabeledBox> = fuse_image(&by_model, t, cfg)?
        .iter()
        .map(FusedBox::to_labeled)
        .collect();
    fused.sort_by(|a, b| {
        b.score
            .total_cmp(&a.score)
            .then_with(|| a.class_id.cmp(&b.class_id))
            .then_with(|| a.bbox.lex_cmp(&b.bbox))
    });
    Ok(fused)
}
