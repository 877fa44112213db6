//! A small anchor-grid detector trained by preconditioned gradient descent.
//!
//! Every anchor is described by the mean intensities of an 8x8 grid of cells
//! laid over a context window centred on the anchor, together with their
//! squares so that a class of middling brightness is linearly separable from
//! both darker background and brighter objects. One linear head per
//! anchor size maps the standardized features (plus a bias) to `K + 1` class
//! logits and four box offsets. Training minimises the anchor objective of
//! [`crate::loss`], weighted or not.

use std::cmp::Ordering;
use std::path::Path;

use nalgebra::{Cholesky, DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::annotations::{GrayImage, LabeledBox};
use crate::error::{Error, Result};
use crate::fusion::FusedBox;
use crate::geometry::{clip_to_image, iou, BBox};
use crate::loss::{self, decode_offsets, encode_targets, softmax, AnchorTargets, BackgroundWeight, LossConfig, LossVariant, Prediction};
use crate::rng::{substream, SplitMix64};

/// Side of the resampled feature patch.
pub const PATCH: usize = 8;
/// Feature dimension (without bias): cell means, then their squares.
pub const FEATURES: usize = 2 * PATCH * PATCH;
const MODEL_FORMAT: &str = "annofuse-detector";
const MODEL_VERSION: u32 = 1;
/// Ridge added to the feature correlation matrix before factorising it.
const RIDGE: f64 = 1e-2;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnchorGrid {
    pub stride: usize,
    /// Square anchor sides.
    pub sizes: Vec<f64>,
    /// Side of the feature window relative to the anchor side.
    pub context: f64,
}

impl Default for AnchorGrid {
    fn default() -> Self {
        AnchorGrid {
            stride: 4,
            sizes: vec![12.0, 20.0, 28.0],
            context: 1.5,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Anchor {
    /// Anchor rectangle clipped to the image; targets are encoded against it.
    pub bbox: BBox,
    /// Centre of the unclipped anchor.
    pub center: (f64, f64),
    pub size_index: usize,
}

impl AnchorGrid {
    pub fn validate(&self) -> Result<()> {
        if self.stride == 0 || self.sizes.is_empty() {
            return Err(Error::invalid("anchor grid needs a positive stride and at least one size"));
        }
        if !self.sizes.iter().all(|s| *s > 0.0 && s.is_finite()) || !(1.0..).contains(&self.context) {
            return Err(Error::invalid("anchor sizes must be positive and context >= 1"));
        }
        Ok(())
    }

    pub fn cells(&self, width: usize, height: usize) -> (usize, usize) {
        (width.div_ceil(self.stride), height.div_ceil(self.stride))
    }

    /// Anchors in `(row, column, size)` order.
    pub fn anchors(&self, width: usize, height: usize) -> Vec<Anchor> {
        let (cols, rows) = self.cells(width, height);
        let s = self.stride as f64;
        let mut out = Vec::with_capacity(cols * rows * self.sizes.len());
        for r in 0..rows {
            for c in 0..cols {
                let center = ((c as f64 + 0.5) * s, (r as f64 + 0.5) * s);
                for (size_index, side) in self.sizes.iter().enumerate() {
                    let raw = BBox::from_center(center.0, center.1, *side, *side);
                    out.push(Anchor {
                        bbox: clip_to_image(&raw, width as f64, height as f64),
                        center,
                        size_index,
                    });
                }
            }
        }
        out
    }
}

/// Summed-area table over `(width + 1) x (height + 1)` corners.
struct Integral {
    width: usize,
    height: usize,
    sums: Vec<f64>,
}

impl Integral {
    fn new(img: &GrayImage) -> Self {
        let (w, h) = (img.width, img.height);
        let mut sums = vec![0.0; (w + 1) * (h + 1)];
        for y in 0..h {
            let mut row = 0.0;
            for x in 0..w {
                row += img.get(x, y) as f64 / 255.0;
                sums[(y + 1) * (w + 1) + x + 1] = sums[y * (w + 1) + x + 1] + row;
            }
        }
        Integral {
            width: w,
            height: h,
            sums,
        }
    }

    fn corner(&self, x: usize, y: usize) -> f64 {
        self.sums[y * (self.width + 1) + x]
    }

    /// Integral over `[0, x] x [0, y]`; exact for the piecewise-constant image.
    fn at(&self, x: f64, y: f64) -> f64 {
        let x = x.clamp(0.0, self.width as f64);
        let y = y.clamp(0.0, self.height as f64);
        let (x0, y0) = ((x.floor() as usize).min(self.width.saturating_sub(1)), (y.floor() as usize).min(self.height.saturating_sub(1)));
        let (fx, fy) = (x - x0 as f64, y - y0 as f64);
        let top = self.corner(x0, y0) * (1.0 - fx) + self.corner(x0 + 1, y0) * fx;
        let bottom = self.corner(x0, y0 + 1) * (1.0 - fx) + self.corner(x0 + 1, y0 + 1) * fx;
        top * (1.0 - fy) + bottom * fy
    }

    /// Mean intensity over a rectangle; area outside the image reads as 0.
    fn mean(&self, b: &BBox) -> f64 {
        let s = self.at(b.x_max, b.y_max) - self.at(b.x_min, b.y_max) - self.at(b.x_max, b.y_min)
            + self.at(b.x_min, b.y_min);
        s / b.area()
    }
}

/// Raw (unstandardized) features of every anchor of one image.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    pub width: usize,
    pub height: usize,
    /// `anchors.len() * FEATURES` values.
    pub values: Vec<f64>,
}

impl FeatureMap {
    pub fn row(&self, anchor: usize) -> &[f64] {
        &self.values[anchor * FEATURES..(anchor + 1) * FEATURES]
    }
}

pub fn extract_features(grid: &AnchorGrid, anchors: &[Anchor], img: &GrayImage) -> FeatureMap {
    let integral = Integral::new(img);
    let mut values = Vec::with_capacity(anchors.len() * FEATURES);
    for a in anchors {
        let side = grid.sizes[a.size_index] * grid.context;
        let cell = side / PATCH as f64;
        let (x0, y0) = (a.center.0 - side / 2.0, a.center.1 - side / 2.0);
        for r in 0..PATCH {
            for c in 0..PATCH {
                let b = BBox::from_coords([
                    x0 + c as f64 * cell,
                    y0 + r as f64 * cell,
                    x0 + (c + 1) as f64 * cell,
                    y0 + (r + 1) as f64 * cell,
                ]);
                values.push(integral.mean(&b));
            }
        }
        let start = values.len() - PATCH * PATCH;
        for j in start..values.len() {
            values.push(values[j] * values[j]);
        }
    }
    FeatureMap {
        width: img.width,
        height: img.height,
        values,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub seed: u64,
    pub loss_variant: LossVariant,
    pub loss: LossConfig,
    /// Images per gradient step.
    pub batch: usize,
    pub grid: AnchorGrid,
}

impl TrainConfig {
    /// Defaults for the detector; the anchor gate sits at the 0.4 overlap
    /// used for scoring rather than the loss module's 0.5, and background
    /// anchors carry their image's mean consensus under eq2.
    pub fn new(num_classes: usize) -> Self {
        TrainConfig {
            epochs: 30,
            learning_rate: 1.0,
            seed: 0,
            loss_variant: LossVariant::Eq1,
            loss: LossConfig {
                eta: 0.4,
                background_weight: BackgroundWeight::MeanC,
                ..LossConfig::new(num_classes)
            },
            batch: 4,
            grid: AnchorGrid::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.loss.validate()?;
        self.grid.validate()?;
        if self.epochs == 0 || self.batch == 0 {
            return Err(Error::invalid("epochs and batch must be positive"));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::invalid("learning_rate must be positive"));
        }
        Ok(())
    }
}

/// One linear head per anchor size.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Head {
    pub feature_mean: Vec<f64>,
    pub feature_scale: Vec<f64>,
    /// Row-major `outputs x (FEATURES + 1)`; the last column is the bias.
    pub weights: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectorModel {
    pub format: String,
    pub version: u32,
    pub num_classes: usize,
    pub image_width: usize,
    pub image_height: usize,
    pub config: TrainConfig,
    pub heads: Vec<Head>,
}

impl DetectorModel {
    /// Outputs per anchor: `K + 1` logits then four offsets.
    pub fn outputs(&self) -> usize {
        self.num_classes + 5
    }

    fn zeros(num_classes: usize, width: usize, height: usize, cfg: &TrainConfig) -> Self {
        let outputs = num_classes + 5;
        let head = Head {
            feature_mean: vec![0.0; FEATURES],
            feature_scale: vec![1.0; FEATURES],
            weights: vec![0.0; outputs * (FEATURES + 1)],
        };
        DetectorModel {
            format: MODEL_FORMAT.into(),
            version: MODEL_VERSION,
            num_classes,
            image_width: width,
            image_height: height,
            config: cfg.clone(),
            heads: vec![head; cfg.grid.sizes.len()],
        }
    }

    pub fn anchors(&self) -> Vec<Anchor> {
        self.config.grid.anchors(self.image_width, self.image_height)
    }

    fn standardize(&self, head: &Head, raw: &[f64], out: &mut [f64; FEATURES + 1]) {
        for j in 0..FEATURES {
            out[j] = (raw[j] - head.feature_mean[j]) / head.feature_scale[j];
        }
        out[FEATURES] = 1.0;
    }

    fn forward(&self, head: &Head, x: &[f64; FEATURES + 1]) -> (Vec<f64>, [f64; 4]) {
        let k1 = self.num_classes + 1;
        let dot = |o: usize| -> f64 {
            let row = &head.weights[o * (FEATURES + 1)..(o + 1) * (FEATURES + 1)];
            row.iter().zip(x.iter()).map(|(w, v)| w * v).sum()
        };
        let logits = (0..k1).map(dot).collect();
        let offsets = [dot(k1), dot(k1 + 1), dot(k1 + 2), dot(k1 + 3)];
        (logits, offsets)
    }

    /// Raw outputs for every anchor of an image.
    pub fn infer(&self, anchors: &[Anchor], features: &FeatureMap) -> Prediction {
        let mut x = [0.0; FEATURES + 1];
        let mut pred = Prediction {
            class_logits: Vec::with_capacity(anchors.len()),
            box_offsets: Vec::with_capacity(anchors.len()),
        };
        for (i, a) in anchors.iter().enumerate() {
            let head = &self.heads[a.size_index];
            self.standardize(head, features.row(i), &mut x);
            let (l, o) = self.forward(head, &x);
            pred.class_logits.push(l);
            pred.box_offsets.push(o);
        }
        pred
    }

    pub fn to_json(&self) -> Result<String> {
        let mut s = serde_json::to_string(self)?;
        s.push('\n');
        Ok(s)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let m: DetectorModel = serde_json::from_str(text)?;
        if m.format != MODEL_FORMAT || m.version != MODEL_VERSION {
            return Err(Error::Schema(format!(
                "unsupported model format {} v{}",
                m.format, m.version
            )));
        }
        m.config.validate()?;
        let expect = m.outputs() * (FEATURES + 1);
        if m.heads.len() != m.config.grid.sizes.len()
            || m.heads.iter().any(|h| {
                h.weights.len() != expect || h.feature_mean.len() != FEATURES || h.feature_scale.len() != FEATURES
            })
        {
            return Err(Error::Schema("model weight shapes do not match its config".into()));
        }
        Ok(m)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }
}

/// Pixels plus the label boxes to fit (confidence-1.0 for raw annotations).
#[derive(Debug, Clone)]
pub struct TrainingImage<'a> {
    pub pixels: &'a GrayImage,
    pub labels: Vec<FusedBox>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    pub model: DetectorModel,
    /// Mean minibatch loss of each epoch.
    pub loss_trace: Vec<f64>,
}

pub fn train(images: &[TrainingImage], num_classes: usize, cfg: &TrainConfig) -> Result<TrainOutcome> {
    let first = images.first().ok_or_else(|| Error::invalid("empty training set"))?;
    let (w, h) = (first.pixels.width, first.pixels.height);
    let anchors = cfg.grid.anchors(w, h);
    let mut features = Vec::with_capacity(images.len());
    for img in images {
        if img.pixels.width != w || img.pixels.height != h {
            return Err(Error::invalid("training images must share one size"));
        }
        features.push(extract_features(&cfg.grid, &anchors, img.pixels));
    }
    let labels: Vec<&[FusedBox]> = images.iter().map(|i| i.labels.as_slice()).collect();
    train_on_features(&features, &labels, num_classes, cfg)
}

/// [`train`] over precomputed feature maps (one per image, in order).
pub fn train_on_features(
    features: &[FeatureMap],
    labels: &[&[FusedBox]],
    num_classes: usize,
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if cfg.loss.num_classes != num_classes {
        return Err(Error::invalid("loss config class count differs from the dataset"));
    }
    if features.is_empty() {
        return Err(Error::invalid("empty training set"));
    }
    if features.len() != labels.len() {
        return Err(Error::invalid("features and labels differ in length"));
    }
    let (w, h) = (features[0].width, features[0].height);
    let anchors = cfg.grid.anchors(w, h);
    let anchor_boxes: Vec<BBox> = anchors.iter().map(|a| a.bbox).collect();
    let targets: Vec<AnchorTargets> = labels
        .iter()
        .map(|l| encode_targets(&anchor_boxes, l, &cfg.loss))
        .collect::<Result<_>>()?;

    let mut model = DetectorModel::zeros(num_classes, w, h, cfg);
    fit_standardization(&mut model, &anchors, features);
    let factors = correlation_factors(&model, &anchors, features)?;
    // parameters in whitened coordinates; `model.heads` holds their image
    let mut whitened: Vec<Vec<f64>> = model.heads.iter().map(|hd| vec![0.0; hd.weights.len()]).collect();

    let outputs = model.outputs();
    let k1 = num_classes + 1;
    let mut order: Vec<usize> = (0..features.len()).collect();
    let mut trace = Vec::with_capacity(cfg.epochs);
    let mut grads: Vec<Vec<f64>> = vec![vec![0.0; outputs * (FEATURES + 1)]; model.heads.len()];
    let mut x = [0.0; FEATURES + 1];

    for epoch in 0..cfg.epochs {
        SplitMix64::new(substream(cfg.seed, epoch as u64)).shuffle(&mut order);
        let mut epoch_loss = 0.0;
        let mut steps = 0usize;
        for batch in order.chunks(cfg.batch) {
            let mut pred = Prediction::default();
            let mut batch_targets = AnchorTargets::default();
            for &i in batch {
                let p = model.infer(&anchors, &features[i]);
                pred.class_logits.extend(p.class_logits);
                pred.box_offsets.extend(p.box_offsets);
                batch_targets.extend(&targets[i]);
            }
            let failure = |e: Error| Error::Training {
                epoch,
                message: e.to_string(),
            };
            let value = loss::loss(&pred, &batch_targets, &cfg.loss, cfg.loss_variant)
                .map_err(failure)?
                .total;
            if !value.is_finite() {
                return Err(Error::Training {
                    epoch,
                    message: "loss diverged".into(),
                });
            }
            let g = loss::loss_gradient(&pred, &batch_targets, &cfg.loss, cfg.loss_variant).map_err(failure)?;

            grads.iter_mut().for_each(|gw| gw.iter_mut().for_each(|v| *v = 0.0));
            let mut row = 0;
            for &i in batch {
                for (a, anchor) in anchors.iter().enumerate() {
                    let head = &model.heads[anchor.size_index];
                    model.standardize(head, features[i].row(a), &mut x);
                    let gw = &mut grads[anchor.size_index];
                    let dl = &g.class_logits[row];
                    let dt = &g.box_offsets[row];
                    for o in 0..outputs {
                        let d = if o < k1 { dl[o] } else { dt[o - k1] };
                        if d != 0.0 {
                            let slot = &mut gw[o * (FEATURES + 1)..(o + 1) * (FEATURES + 1)];
                            for (s, v) in slot.iter_mut().zip(x.iter()) {
                                *s += d * v;
                            }
                        }
                    }
                    row += 1;
                }
            }
            for ((head, gw), (v, l)) in model.heads.iter_mut().zip(&grads).zip(whitened.iter_mut().zip(&factors)) {
                for o in 0..outputs {
                    let at = o * (FEATURES + 1);
                    let g = DVector::from_column_slice(&gw[at..at + FEATURES]);
                    let gv = l.solve_lower_triangular(&g).expect("factor has a positive diagonal");
                    for (vj, gj) in v[at..at + FEATURES].iter_mut().zip(gv.iter()) {
                        *vj -= cfg.learning_rate * gj;
                    }
                    v[at + FEATURES] -= cfg.learning_rate * gw[at + FEATURES];
                    let wv = l
                        .tr_solve_lower_triangular(&DVector::from_column_slice(&v[at..at + FEATURES]))
                        .expect("factor has a positive diagonal");
                    head.weights[at..at + FEATURES].copy_from_slice(wv.as_slice());
                    head.weights[at + FEATURES] = v[at + FEATURES];
                }
            }
            epoch_loss += value;
            steps += 1;
        }
        trace.push(epoch_loss / steps as f64);
    }
    Ok(TrainOutcome {
        model,
        loss_trace: trace,
    })
}

/// Per-head feature mean and standard deviation over all training anchors.
fn fit_standardization(model: &mut DetectorModel, anchors: &[Anchor], features: &[FeatureMap]) {
    let heads = model.heads.len();
    let mut sum = vec![[0.0; FEATURES]; heads];
    let mut sq = vec![[0.0; FEATURES]; heads];
    let mut count = vec![0usize; heads];
    for fm in features {
        for (a, anchor) in anchors.iter().enumerate() {
            let k = anchor.size_index;
            count[k] += 1;
            for (j, v) in fm.row(a).iter().enumerate() {
                sum[k][j] += v;
                sq[k][j] += v * v;
            }
        }
    }
    for (k, head) in model.heads.iter_mut().enumerate() {
        let n = count[k].max(1) as f64;
        for j in 0..FEATURES {
            let mean = sum[k][j] / n;
            let var = (sq[k][j] / n - mean * mean).max(0.0);
            head.feature_mean[j] = mean;
            head.feature_scale[j] = var.sqrt().max(1e-3);
        }
    }
}

/// Cholesky factor `L` of each head's ridged feature correlation matrix.
///
/// Descent runs on `v` with weights `L^-T v`, which is plain gradient descent
/// on the whitened features `L^-1 z`: one learning rate then suits every
/// direction even though neighbouring cells are strongly correlated.
fn correlation_factors(model: &DetectorModel, anchors: &[Anchor], features: &[FeatureMap]) -> Result<Vec<DMatrix<f64>>> {
    const CHUNK: usize = 2048;
    let mut x = [0.0; FEATURES + 1];
    let mut out = Vec::with_capacity(model.heads.len());
    for (k, head) in model.heads.iter().enumerate() {
        let mut corr = DMatrix::<f64>::zeros(FEATURES, FEATURES);
        let mut chunk: Vec<f64> = Vec::with_capacity(CHUNK * FEATURES);
        let mut n = 0usize;
        let flush = |chunk: &mut Vec<f64>, corr: &mut DMatrix<f64>| {
            if !chunk.is_empty() {
                let z = DMatrix::from_column_slice(FEATURES, chunk.len() / FEATURES, chunk);
                corr.gemm(1.0, &z, &z.transpose(), 1.0);
                chunk.clear();
            }
        };
        for fm in features {
            for (a, anchor) in anchors.iter().enumerate() {
                if anchor.size_index != k {
                    continue;
                }
                model.standardize(head, fm.row(a), &mut x);
                chunk.extend_from_slice(&x[..FEATURES]);
                n += 1;
                if chunk.len() == CHUNK * FEATURES {
                    flush(&mut chunk, &mut corr);
                }
            }
        }
        flush(&mut chunk, &mut corr);
        corr /= n.max(1) as f64;
        for j in 0..FEATURES {
            corr[(j, j)] += RIDGE;
        }
        let chol = Cholesky::new(corr).ok_or_else(|| Error::Training {
            epoch: 0,
            message: "feature correlation matrix is not positive definite".into(),
        })?;
        out.push(chol.l());
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PredictConfig {
    pub score_threshold: f64,
    pub nms_iou: f64,
}

impl Default for PredictConfig {
    fn default() -> Self {
        PredictConfig {
            score_threshold: 0.3,
            nms_iou: 0.45,
        }
    }
}

fn by_score_desc(a: &LabeledBox, b: &LabeledBox) -> Ordering {
    b.score
        .total_cmp(&a.score)
        .then_with(|| a.class_id.cmp(&b.class_id))
        .then_with(|| a.bbox.lex_cmp(&b.bbox))
}

/// Greedy per-class non-maximum suppression; returns boxes by score desc.
pub fn nms(mut dets: Vec<LabeledBox>, iou_threshold: f64) -> Vec<LabeledBox> {
    dets.sort_by(by_score_desc);
    let mut kept: Vec<LabeledBox> = Vec::new();
    for d in dets {
        if kept
            .iter()
            .all(|k| k.class_id != d.class_id || iou(&k.bbox, &d.bbox) <= iou_threshold)
        {
            kept.push(d);
        }
    }
    kept
}

/// Detections from precomputed features.
pub fn predict_features(
    model: &DetectorModel,
    anchors: &[Anchor],
    features: &FeatureMap,
    cfg: &PredictConfig,
) -> Vec<LabeledBox> {
    let pred = model.infer(anchors, features);
    let bg = model.num_classes;
    let (w, h) = (model.image_width as f64, model.image_height as f64);
    let mut dets = Vec::new();
    for ((logits, offsets), anchor) in pred.class_logits.iter().zip(&pred.box_offsets).zip(anchors) {
        let p = softmax(logits);
        // lowest index wins among foreground ties; background wins any tie
        let (class_id, score) = p[..bg]
            .iter()
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |best, (k, v)| if *v > best.1 { (k, *v) } else { best });
        if score <= p[bg] || score < cfg.score_threshold {
            continue;
        }
        let bbox = clip_to_image(&decode_offsets(&anchor.bbox, offsets), w, h);
        if bbox.is_degenerate() || !bbox.is_finite() {
            continue;
        }
        dets.push(LabeledBox {
            bbox,
            class_id,
            score,
        });
    }
    nms(dets, cfg.nms_iou)
}

pub fn predict(model: &DetectorModel, pixels: &GrayImage, cfg: &PredictConfig) -> Result<Vec<LabeledBox>> {
    if pixels.width != model.image_width || pixels.height != model.image_height {
        return Err(Error::DimensionMismatch {
            image_id: String::new(),
            expected_width: model.image_width,
            expected_height: model.image_height,
            width: pixels.width,
            height: pixels.height,
        });
    }
    let anchors = model.anchors();
    let features = extract_features(&model.config.grid, &anchors, pixels);
    Ok(predict_features(model, &anchors, &features, cfg))
}
