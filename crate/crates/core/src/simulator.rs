//! Synthetic scenes with known boxes and parametric annotator noise.
//!
//! A scene is a set of non-overlapping rectangles, each filled with its
//! class's intensity, on a Gaussian-noise background. Annotators see the true
//! rectangles through an [`AnnotatorProfile`]: boxes can be missed, jittered,
//! relabelled, and spurious boxes can appear.

use std::collections::BTreeMap;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::annotations::{annjson, GrayImage, ImageRecord, LabeledBox, MultiAnnotatorDataset, Split};
use crate::error::{Error, Result};
use crate::geometry::BBox;
use crate::rng::{fnv1a64, substream, SplitMix64};

/// Placement attempts per object before giving up.
const PLACEMENT_RETRIES: usize = 100;
/// Minimum gap between rectangles so same-class objects stay separable.
const OBJECT_GAP: f64 = 2.0;
/// Smallest side a jittered annotation collapses to.
const MIN_JITTERED_SIDE: f64 = 2.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneConfig {
    pub width: usize,
    pub height: usize,
    pub num_classes: usize,
    pub objects_min: usize,
    pub objects_max: usize,
    pub size_min: usize,
    pub size_max: usize,
    /// One fill intensity per class.
    pub intensity_per_class: Vec<u8>,
    pub background_intensity: u8,
    pub background_noise_sigma: f64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        SceneConfig {
            width: 64,
            height: 64,
            num_classes: 2,
            objects_min: 1,
            objects_max: 3,
            size_min: 10,
            size_max: 24,
            intensity_per_class: default_intensities(2),
            background_intensity: 50,
            background_noise_sigma: 8.0,
        }
    }
}

/// Class intensities spread evenly over `[130, 220]`, brightest first.
pub fn default_intensities(num_classes: usize) -> Vec<u8> {
    if num_classes <= 1 {
        return vec![200; num_classes];
    }
    (0..num_classes)
        .map(|k| (220.0 - 90.0 * k as f64 / (num_classes - 1) as f64).round() as u8)
        .collect()
}

impl SceneConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::invalid(m));
        if self.width == 0 || self.height == 0 {
            return bad("scene width and height must be positive".into());
        }
        if self.num_classes == 0 {
            return bad("num_classes must be at least 1".into());
        }
        if self.objects_min > self.objects_max {
            return bad(format!(
                "empty object count range {}..{}",
                self.objects_min, self.objects_max
            ));
        }
        if self.size_min == 0 || self.size_min > self.size_max {
            return bad(format!("empty object size range {}..{}", self.size_min, self.size_max));
        }
        if self.size_max > self.width || self.size_max > self.height {
            return bad(format!(
                "object size {} does not fit a {}x{} image",
                self.size_max, self.width, self.height
            ));
        }
        if self.intensity_per_class.len() != self.num_classes {
            return bad(format!(
                "{} class intensities for {} classes",
                self.intensity_per_class.len(),
                self.num_classes
            ));
        }
        if !(self.background_noise_sigma >= 0.0 && self.background_noise_sigma.is_finite()) {
            return bad("background_noise_sigma must be non-negative".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct AnnotatorProfile {
    /// Std-dev of Gaussian noise added to each coordinate, in pixels.
    pub jitter_sigma: f64,
    pub miss_rate: f64,
    /// Poisson mean of spurious boxes per image.
    pub spurious_rate: f64,
    pub class_confusion: f64,
}

impl AnnotatorProfile {
    pub fn new(jitter_sigma: f64, miss_rate: f64, spurious_rate: f64) -> Self {
        AnnotatorProfile {
            jitter_sigma,
            miss_rate,
            spurious_rate,
            class_confusion: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let prob = |v: f64| (0.0..=1.0).contains(&v);
        if !prob(self.miss_rate) || !prob(self.class_confusion) {
            return Err(Error::invalid("annotator probabilities must lie in [0, 1]"));
        }
        if !(self.jitter_sigma >= 0.0 && self.jitter_sigma.is_finite())
            || !(self.spurious_rate >= 0.0 && self.spurious_rate.is_finite())
        {
            return Err(Error::invalid("annotator rates must be non-negative"));
        }
        Ok(())
    }
}

/// The three annotators of the standard corpus: increasing jitter, shared
/// miss and spurious rates.
pub fn standard_profiles() -> Vec<AnnotatorProfile> {
    [1.5, 2.5, 3.5]
        .into_iter()
        .map(|sigma| AnnotatorProfile::new(sigma, 0.1, 0.1))
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub pixels: GrayImage,
    pub boxes: Vec<LabeledBox>,
}

fn random_rect(rng: &mut SplitMix64, cfg: &SceneConfig) -> BBox {
    let w = rng.range_inclusive(cfg.size_min, cfg.size_max);
    let h = rng.range_inclusive(cfg.size_min, cfg.size_max);
    let x = rng.range_inclusive(0, cfg.width - w);
    let y = rng.range_inclusive(0, cfg.height - h);
    BBox::from_coords([x as f64, y as f64, (x + w) as f64, (y + h) as f64])
}

pub fn generate_scene(seed: u64, cfg: &SceneConfig) -> Result<Scene> {
    cfg.validate()?;
    let mut rng = SplitMix64::new(seed);
    let requested = rng.range_inclusive(cfg.objects_min, cfg.objects_max);
    let mut boxes: Vec<LabeledBox> = Vec::with_capacity(requested);
    for _ in 0..requested {
        let mut placed = false;
        for _ in 0..PLACEMENT_RETRIES {
            let class_id = rng.below(cfg.num_classes as u64) as usize;
            let rect = random_rect(&mut rng, cfg);
            let padded = BBox::from_coords([
                rect.x_min - OBJECT_GAP,
                rect.y_min - OBJECT_GAP,
                rect.x_max + OBJECT_GAP,
                rect.y_max + OBJECT_GAP,
            ]);
            if boxes.iter().all(|b| b.bbox.intersection_area(&padded) == 0.0) {
                boxes.push(LabeledBox::new(rect, class_id));
                placed = true;
                break;
            }
        }
        if !placed {
            return Err(Error::Placement {
                requested,
                placed: boxes.len(),
            });
        }
    }

    let mut fill = vec![cfg.background_intensity as f64; cfg.width * cfg.height];
    for b in &boxes {
        let level = cfg.intensity_per_class[b.class_id] as f64;
        for y in b.bbox.y_min as usize..b.bbox.y_max as usize {
            for x in b.bbox.x_min as usize..b.bbox.x_max as usize {
                fill[y * cfg.width + x] = level;
            }
        }
    }
    let data = fill
        .into_iter()
        .map(|v| {
            let noisy = v + cfg.background_noise_sigma * rng.normal();
            noisy.round().clamp(0.0, 255.0) as u8
        })
        .collect();
    Ok(Scene {
        pixels: GrayImage::new(cfg.width, cfg.height, data),
        boxes,
    })
}

/// Orders, clamps and widens one axis of a jittered box.
fn settle_axis(a: f64, b: f64, limit: f64) -> (f64, f64) {
    let (lo, hi) = (a.min(b).clamp(0.0, limit), a.max(b).clamp(0.0, limit));
    if hi - lo >= MIN_JITTERED_SIDE {
        return (lo, hi);
    }
    let start = ((lo + hi) / 2.0 - MIN_JITTERED_SIDE / 2.0).clamp(0.0, limit - MIN_JITTERED_SIDE);
    (start, start + MIN_JITTERED_SIDE)
}

/// One annotator's view of the true boxes.
pub fn corrupt_annotations(
    truth: &[LabeledBox],
    profile: &AnnotatorProfile,
    cfg: &SceneConfig,
    seed: u64,
) -> Vec<LabeledBox> {
    let mut rng = SplitMix64::new(seed);
    let (w, h) = (cfg.width as f64, cfg.height as f64);
    let mut out = Vec::with_capacity(truth.len());
    for b in truth {
        let missed = rng.uniform() < profile.miss_rate;
        let noise = [rng.normal(), rng.normal(), rng.normal(), rng.normal()];
        let confused = rng.uniform() < profile.class_confusion;
        let other = rng.below(cfg.num_classes.max(2) as u64 - 1) as usize;
        if missed {
            continue;
        }
        let c = b.bbox.coords();
        let j = |i: usize| c[i] + profile.jitter_sigma * noise[i];
        let (x0, x1) = settle_axis(j(0), j(2), w);
        let (y0, y1) = settle_axis(j(1), j(3), h);
        let class_id = if confused && cfg.num_classes > 1 {
            if other >= b.class_id {
                other + 1
            } else {
                other
            }
        } else {
            b.class_id
        };
        out.push(LabeledBox {
            bbox: BBox::from_coords([x0, y0, x1, y1]),
            class_id,
            score: b.score,
        });
    }
    for _ in 0..rng.poisson(profile.spurious_rate) {
        let class_id = rng.below(cfg.num_classes as u64) as usize;
        out.push(LabeledBox::new(random_rect(&mut rng, cfg), class_id));
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusConfig {
    pub n_images: usize,
    pub seed: u64,
    /// Fraction of images held out for evaluation.
    pub test_fraction: f64,
    pub scene: SceneConfig,
    pub profiles: Vec<AnnotatorProfile>,
}

impl CorpusConfig {
    /// 250 images, 200/50 split, three noisy annotators.
    pub fn standard(seed: u64) -> Self {
        CorpusConfig {
            n_images: 250,
            seed,
            test_fraction: 0.2,
            scene: SceneConfig::default(),
            profiles: standard_profiles(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.scene.validate()?;
        if self.profiles.is_empty() {
            return Err(Error::invalid("at least one annotator profile is required"));
        }
        for p in &self.profiles {
            p.validate()?;
        }
        if !(0.0..=1.0).contains(&self.test_fraction) {
            return Err(Error::invalid("test_fraction must lie in [0, 1]"));
        }
        Ok(())
    }
}

/// Multi-annotator dataset plus the hidden true boxes and in-memory pixels.
#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    pub dataset: MultiAnnotatorDataset,
    /// Generating boxes per image; never written into the dataset file.
    pub truth: BTreeMap<String, Vec<LabeledBox>>,
    pub pixels: BTreeMap<String, GrayImage>,
}

pub fn image_id(index: usize) -> String {
    format!("img_{index:05}")
}

pub fn annotator_id(index: usize) -> String {
    format!("annotator_{}", index + 1)
}

/// The `round(n * test_fraction)` ids with the smallest FNV-1a hash are held out.
pub fn test_split(ids: &[String], test_fraction: f64) -> std::collections::BTreeSet<String> {
    let n_test = (ids.len() as f64 * test_fraction).round() as usize;
    let mut ranked: Vec<(u64, &String)> = ids.iter().map(|id| (fnv1a64(id.as_bytes()), id)).collect();
    ranked.sort();
    ranked.into_iter().take(n_test).map(|(_, id)| id.clone()).collect()
}

pub fn build_corpus(cfg: &CorpusConfig) -> Result<Corpus> {
    cfg.validate()?;
    let scene = &cfg.scene;
    let generated: Vec<(Scene, Vec<Vec<LabeledBox>>)> = (0..cfg.n_images)
        .into_par_iter()
        .map(|i| {
            let image_seed = substream(cfg.seed, i as u64);
            let s = generate_scene(substream(image_seed, 0), scene)?;
            let views = cfg
                .profiles
                .iter()
                .enumerate()
                .map(|(j, p)| corrupt_annotations(&s.boxes, p, scene, substream(image_seed, j as u64 + 1)))
                .collect();
            Ok((s, views))
        })
        .collect::<Result<_>>()?;

    let ids: Vec<String> = (0..cfg.n_images).map(image_id).collect();
    let held_out = test_split(&ids, cfg.test_fraction);
    let annotators: Vec<String> = (0..cfg.profiles.len()).map(annotator_id).collect();

    let mut dataset = MultiAnnotatorDataset {
        classes: (0..scene.num_classes).map(|k| format!("class_{k}")).collect(),
        annotators: annotators.clone(),
        provenance: Some(serde_json::to_value(cfg)?),
        ..Default::default()
    };
    let mut truth = BTreeMap::new();
    let mut pixels = BTreeMap::new();
    for (id, (s, views)) in ids.iter().zip(generated) {
        dataset.images.push(ImageRecord {
            pixel_path: Some(format!("images/{id}.pgm").into()),
            split: Some(if held_out.contains(id) { Split::Test } else { Split::Train }),
            ..ImageRecord::new(id.clone(), scene.width, scene.height)
        });
        for (a, boxes) in annotators.iter().zip(views) {
            dataset.annotations.insert((id.clone(), a.clone()), boxes);
        }
        truth.insert(id.clone(), s.boxes);
        pixels.insert(id.clone(), s.pixels);
    }
    Ok(Corpus {
        dataset,
        truth,
        pixels,
    })
}

impl Corpus {
    /// The true boxes as a one-annotator dataset, for writing `truth.annjson`.
    pub fn truth_dataset(&self) -> MultiAnnotatorDataset {
        let reference = "reference".to_string();
        MultiAnnotatorDataset {
            classes: self.dataset.classes.clone(),
            annotators: vec![reference.clone()],
            images: self.dataset.images.clone(),
            annotations: self
                .truth
                .iter()
                .map(|(id, boxes)| ((id.clone(), reference.clone()), boxes.clone()))
                .collect(),
            provenance: self.dataset.provenance.clone(),
        }
    }

    /// Writes `dataset.annjson`, `truth.annjson` and `images/*.pgm` under `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        annjson::save_dataset(&self.dataset, &dir.join("dataset.annjson"))?;
        annjson::save_dataset(&self.truth_dataset(), &dir.join("truth.annjson"))?;
        for rec in &self.dataset.images {
            let rel = rec.pixel_path.as_ref().expect("simulated images carry pixel paths");
            self.pixels[&rec.image_id].save_pgm(&dir.join(rel))?;
        }
        Ok(())
    }
}
