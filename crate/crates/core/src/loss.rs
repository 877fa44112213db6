//! Anchor target encoding and the detection objective.
//!
//! Per anchor the objective is
//!
//! ```text
//! term = CE(logits, class_target) + beta * matched * SmoothL1(offsets - box_target)
//! ```
//!
//! where `matched` opens only when the anchor's best IoU with a label box
//! exceeds `eta`. The consensus-weighted variant multiplies each anchor term
//! by the confidence `c` of the fused box it was assigned to. Both variants are
//! averaged over all anchors, matched and background alike.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fusion::FusedBox;
use crate::geometry::{iou, BBox};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum BackgroundWeight {
    /// Background anchors weigh 1.0.
    #[default]
    Unit,
    /// Background anchors weigh the mean fused confidence of their image.
    MeanC,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum LossVariant {
    /// Unweighted objective.
    #[default]
    Eq1,
    /// Every anchor term scaled by its consensus confidence.
    Eq2,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    /// IoU gate for the localisation term (strict `>`).
    pub eta: f64,
    /// Localisation/classification balance.
    pub beta: f64,
    pub num_classes: usize,
    #[serde(default)]
    pub background_weight: BackgroundWeight,
}

impl LossConfig {
    pub fn new(num_classes: usize) -> Self {
        LossConfig {
            eta: 0.5,
            beta: 1.0,
            num_classes,
            background_weight: BackgroundWeight::Unit,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.eta > 0.0 && self.eta < 1.0) {
            return Err(Error::invalid(format!("eta {} not in (0, 1)", self.eta)));
        }
        if !(self.beta > 0.0 && self.beta.is_finite()) {
            return Err(Error::invalid(format!("beta {} must be positive", self.beta)));
        }
        if self.num_classes == 0 {
            return Err(Error::invalid("num_classes must be at least 1"));
        }
        Ok(())
    }

    /// Index of the background class in the logit vector.
    pub fn background(&self) -> usize {
        self.num_classes
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AnchorTarget {
    pub anchor: BBox,
    pub matched: bool,
    /// `num_classes` denotes background.
    pub class_target: usize,
    /// `(tx, ty, tw, th)`; `Some` exactly when `matched`.
    pub box_target: Option<[f64; 4]>,
    pub weight: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct AnchorTargets {
    pub anchors: Vec<AnchorTarget>,
}

impl AnchorTargets {
    pub fn len(&self) -> usize {
        self.anchors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.anchors.is_empty()
    }

    pub fn num_matched(&self) -> usize {
        self.anchors.iter().filter(|a| a.matched).count()
    }

    /// Concatenation, used to form minibatches over several images.
    pub fn extend(&mut self, other: &AnchorTargets) {
        self.anchors.extend(other.anchors.iter().cloned());
    }
}

/// Raw detector outputs for a set of anchors.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Prediction {
    /// Per anchor, `num_classes + 1` pre-softmax scores; background is last.
    pub class_logits: Vec<Vec<f64>>,
    pub box_offsets: Vec<[f64; 4]>,
}

impl Prediction {
    pub fn len(&self) -> usize {
        self.box_offsets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.box_offsets.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AnchorLoss {
    pub cls: f64,
    /// Smooth-L1 value, already gated (0 for unmatched anchors).
    pub loc: f64,
    /// Weight applied to the anchor term (1 for the unweighted variant).
    pub weight: f64,
    pub term: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossBreakdown {
    pub total: f64,
    pub per_anchor: Vec<AnchorLoss>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossGradient {
    pub class_logits: Vec<Vec<f64>>,
    pub box_offsets: Vec<[f64; 4]>,
}

/// Center/log-size offsets of `target` relative to `anchor`.
pub fn encode_offsets(anchor: &BBox, target: &BBox) -> [f64; 4] {
    let (acx, acy) = anchor.center();
    let (tcx, tcy) = target.center();
    let (aw, ah) = (anchor.width(), anchor.height());
    [
        (tcx - acx) / aw,
        (tcy - acy) / ah,
        (target.width() / aw).ln(),
        (target.height() / ah).ln(),
    ]
}

/// Inverse of [`encode_offsets`].
pub fn decode_offsets(anchor: &BBox, offsets: &[f64; 4]) -> BBox {
    let (acx, acy) = anchor.center();
    let (aw, ah) = (anchor.width(), anchor.height());
    BBox::from_center(
        acx + offsets[0] * aw,
        acy + offsets[1] * ah,
        aw * offsets[2].exp(),
        ah * offsets[3].exp(),
    )
}

/// Assigns each anchor its maximum-IoU label box (first one on ties) and
/// opens the localisation gate when that IoU exceeds `eta`.
pub fn encode_targets(anchors: &[BBox], fused: &[FusedBox], cfg: &LossConfig) -> Result<AnchorTargets> {
    cfg.validate()?;
    if anchors.is_empty() {
        return Err(Error::invalid("no anchors"));
    }
    for a in anchors {
        a.validate()?;
        if a.is_degenerate() {
            return Err(Error::invalid(format!("zero-area anchor {:?}", a.coords())));
        }
    }
    for f in fused {
        f.bbox.validate()?;
        if f.bbox.is_degenerate() {
            return Err(Error::invalid(format!(
                "fused box {:?} has zero width or height",
                f.bbox.coords()
            )));
        }
        if f.class_id >= cfg.num_classes {
            return Err(Error::invalid(format!("fused class {} out of range", f.class_id)));
        }
    }
    let background_weight = match cfg.background_weight {
        BackgroundWeight::Unit => 1.0,
        BackgroundWeight::MeanC if fused.is_empty() => 1.0,
        BackgroundWeight::MeanC => {
            (fused.iter().map(|f| f.confidence).sum::<f64>() / fused.len() as f64).clamp(0.0, 1.0)
        }
    };

    let anchors = anchors
        .iter()
        .map(|a| {
            let best = fused
                .iter()
                .map(|f| (iou(a, &f.bbox), f))
                .fold(None::<(f64, &FusedBox)>, |best, cur| match best {
                    Some(b) if b.0 >= cur.0 => Some(b),
                    _ => Some(cur),
                });
            match best {
                Some((overlap, f)) if overlap > cfg.eta => AnchorTarget {
                    anchor: *a,
                    matched: true,
                    class_target: f.class_id,
                    box_target: Some(encode_offsets(a, &f.bbox)),
                    weight: f.confidence,
                },
                _ => AnchorTarget {
                    anchor: *a,
                    matched: false,
                    class_target: cfg.background(),
                    box_target: None,
                    weight: background_weight,
                },
            }
        })
        .collect();
    Ok(AnchorTargets { anchors })
}

fn check_shapes(pred: &Prediction, targets: &AnchorTargets, cfg: &LossConfig) -> Result<()> {
    cfg.validate()?;
    if pred.class_logits.len() != targets.len() || pred.box_offsets.len() != targets.len() {
        return Err(Error::invalid(format!(
            "prediction covers {} anchors, targets {}",
            pred.len(),
            targets.len()
        )));
    }
    if targets.is_empty() {
        return Err(Error::invalid("no anchors"));
    }
    for (i, (logits, offsets)) in pred.class_logits.iter().zip(&pred.box_offsets).enumerate() {
        if logits.len() != cfg.num_classes + 1 {
            return Err(Error::invalid(format!(
                "anchor {i}: {} logits, expected {}",
                logits.len(),
                cfg.num_classes + 1
            )));
        }
        if !logits.iter().chain(offsets.iter()).all(|v| v.is_finite()) {
            return Err(Error::invalid(format!("anchor {i}: non-finite prediction")));
        }
    }
    for (i, t) in targets.anchors.iter().enumerate() {
        if t.class_target > cfg.num_classes || !(0.0..=1.0).contains(&t.weight) {
            return Err(Error::invalid(format!("anchor {i}: malformed target")));
        }
        if t.matched != t.box_target.is_some() {
            return Err(Error::invalid(format!("anchor {i}: gate and box target disagree")));
        }
        if let Some(bt) = t.box_target {
            if !bt.iter().all(|v| v.is_finite()) || t.class_target >= cfg.num_classes {
                return Err(Error::invalid(format!("anchor {i}: malformed matched target")));
            }
        }
    }
    Ok(())
}

/// `ln(sum(exp(logits)))`, shifted by the max for stability.
fn log_sum_exp(logits: &[f64]) -> f64 {
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    m + logits.iter().map(|l| (l - m).exp()).sum::<f64>().ln()
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let lse = log_sum_exp(logits);
    logits.iter().map(|l| (l - lse).exp()).collect()
}

fn smooth_l1(d: f64) -> f64 {
    if d.abs() < 1.0 {
        0.5 * d * d
    } else {
        d.abs() - 0.5
    }
}

fn smooth_l1_grad(d: f64) -> f64 {
    if d.abs() < 1.0 {
        d
    } else {
        d.signum()
    }
}

fn anchor_loss(logits: &[f64], offsets: &[f64; 4], t: &AnchorTarget, beta: f64, weight: f64) -> AnchorLoss {
    let cls = log_sum_exp(logits) - logits[t.class_target];
    let loc = match t.box_target {
        Some(bt) => offsets.iter().zip(bt.iter()).map(|(o, b)| smooth_l1(o - b)).sum(),
        None => 0.0,
    };
    AnchorLoss {
        cls,
        loc,
        weight,
        term: weight * (cls + beta * loc),
    }
}

fn weight_for(t: &AnchorTarget, variant: LossVariant) -> f64 {
    match variant {
        LossVariant::Eq1 => 1.0,
        LossVariant::Eq2 => t.weight,
    }
}

/// Mean anchor loss for either variant. Summation runs in anchor order.
pub fn loss(
    pred: &Prediction,
    targets: &AnchorTargets,
    cfg: &LossConfig,
    variant: LossVariant,
) -> Result<LossBreakdown> {
    check_shapes(pred, targets, cfg)?;
    let per_anchor: Vec<AnchorLoss> = pred
        .class_logits
        .iter()
        .zip(&pred.box_offsets)
        .zip(&targets.anchors)
        .map(|((l, o), t)| match variant {
            // kept separate so the unweighted sum involves no multiplication
            LossVariant::Eq1 => {
                let a = anchor_loss(l, o, t, cfg.beta, 1.0);
                AnchorLoss {
                    term: a.cls + cfg.beta * a.loc,
                    ..a
                }
            }
            LossVariant::Eq2 => anchor_loss(l, o, t, cfg.beta, t.weight),
        })
        .collect();
    let total = per_anchor.iter().map(|a| a.term).sum::<f64>() / per_anchor.len() as f64;
    Ok(LossBreakdown { total, per_anchor })
}

/// Unweighted objective.
pub fn loss_eq1(pred: &Prediction, targets: &AnchorTargets, cfg: &LossConfig) -> Result<LossBreakdown> {
    loss(pred, targets, cfg, LossVariant::Eq1)
}

/// Consensus-weighted objective.
pub fn loss_eq2(pred: &Prediction, targets: &AnchorTargets, cfg: &LossConfig) -> Result<LossBreakdown> {
    loss(pred, targets, cfg, LossVariant::Eq2)
}

/// Exact gradient of [`loss`] with respect to logits and offsets.
pub fn loss_gradient(
    pred: &Prediction,
    targets: &AnchorTargets,
    cfg: &LossConfig,
    variant: LossVariant,
) -> Result<LossGradient> {
    check_shapes(pred, targets, cfg)?;
    let inv_n = 1.0 / targets.len() as f64;
    let mut class_logits = Vec::with_capacity(targets.len());
    let mut box_offsets = Vec::with_capacity(targets.len());
    for ((logits, offsets), t) in pred.class_logits.iter().zip(&pred.box_offsets).zip(&targets.anchors) {
        let scale = weight_for(t, variant) * inv_n;
        let mut g = softmax(logits);
        g[t.class_target] -= 1.0;
        g.iter_mut().for_each(|v| *v *= scale);
        class_logits.push(g);

        let mut go = [0.0; 4];
        if let Some(bt) = t.box_target {
            for j in 0..4 {
                go[j] = scale * cfg.beta * smooth_l1_grad(offsets[j] - bt[j]);
            }
        }
        box_offsets.push(go);
    }
    Ok(LossGradient {
        class_logits,
        box_offsets,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::BTreeSet;

    fn fused(c: [f64; 4], class_id: usize, confidence: f64) -> FusedBox {
        FusedBox {
            bbox: BBox::from_coords(c),
            class_id,
            confidence,
            support: 1,
            contributors: BTreeSet::new(),
        }
    }

    #[test]
    fn identical_anchor_has_zero_offsets() {
        let anchor = BBox::from_coords([0.0, 0.0, 8.0, 8.0]);
        let t = encode_targets(&[anchor], &[fused([0.0, 0.0, 8.0, 8.0], 1, 0.667)], &LossConfig::new(2)).unwrap();
        let a = &t.anchors[0];
        assert!(a.matched);
        assert_eq!(a.class_target, 1);
        assert_eq!(a.box_target, Some([0.0, 0.0, 0.0, 0.0]));
        assert_eq!(a.weight, 0.667);
    }

    #[test]
    fn low_overlap_is_background() {
        // IoU(0..10, 7..17 in x) = 30 / 170
        let anchor = BBox::from_coords([0.0, 0.0, 10.0, 10.0]);
        let t = encode_targets(&[anchor], &[fused([7.0, 0.0, 17.0, 10.0], 0, 0.9)], &LossConfig::new(2)).unwrap();
        assert!(!t.anchors[0].matched);
        assert_eq!(t.anchors[0].class_target, 2);
        assert_eq!(t.anchors[0].box_target, None);
        assert_eq!(t.anchors[0].weight, 1.0);
    }

    #[test]
    fn gate_is_strict() {
        // IoU exactly 0.5: 0..10 vs 0..5 (area 50 / 100)
        let anchor = BBox::from_coords([0.0, 0.0, 10.0, 10.0]);
        let t = encode_targets(&[anchor], &[fused([0.0, 0.0, 5.0, 10.0], 0, 1.0)], &LossConfig::new(1)).unwrap();
        assert!(!t.anchors[0].matched);
    }

    #[test]
    fn empty_fused_all_background_and_mean_c() {
        let anchors = [BBox::from_coords([0.0, 0.0, 4.0, 4.0]), BBox::from_coords([4.0, 4.0, 8.0, 8.0])];
        let t = encode_targets(&anchors, &[], &LossConfig::new(3)).unwrap();
        assert!(t.anchors.iter().all(|a| !a.matched && a.class_target == 3));

        let cfg = LossConfig {
            background_weight: BackgroundWeight::MeanC,
            ..LossConfig::new(2)
        };
        let f = [fused([20.0, 20.0, 30.0, 30.0], 0, 0.25), fused([40.0, 40.0, 50.0, 50.0], 1, 0.75)];
        let t = encode_targets(&anchors, &f, &cfg).unwrap();
        assert!(t.anchors.iter().all(|a| a.weight == 0.5));
    }

    #[test]
    fn degenerate_fused_box_rejected() {
        let anchor = BBox::from_coords([0.0, 0.0, 8.0, 8.0]);
        let err = encode_targets(&[anchor], &[fused([2.0, 2.0, 2.0, 6.0], 0, 1.0)], &LossConfig::new(1));
        assert!(matches!(err, Err(Error::InvalidInput(_))));
        assert!(encode_targets(&[], &[], &LossConfig::new(1)).is_err());
    }

    #[test]
    fn offsets_round_trip() {
        let a = BBox::from_coords([2.0, 3.0, 14.0, 11.0]);
        let b = BBox::from_coords([4.5, 1.0, 20.0, 9.0]);
        let back = decode_offsets(&a, &encode_offsets(&a, &b));
        for (x, y) in back.coords().iter().zip(b.coords()) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    fn background_target(k: usize) -> AnchorTarget {
        AnchorTarget {
            anchor: BBox::from_coords([0.0, 0.0, 1.0, 1.0]),
            matched: false,
            class_target: k,
            box_target: None,
            weight: 1.0,
        }
    }

    #[test]
    fn uniform_logits_background() {
        let pred = Prediction {
            class_logits: vec![vec![0.0, 0.0, 0.0]],
            box_offsets: vec![[3.0, -2.0, 0.5, 9.0]],
        };
        let targets = AnchorTargets {
            anchors: vec![background_target(2)],
        };
        let l = loss_eq1(&pred, &targets, &LossConfig::new(2)).unwrap();
        assert!((l.total - 3f64.ln()).abs() < 1e-15);
        assert_eq!(l.per_anchor[0].loc, 0.0);
    }

    #[test]
    fn smooth_l1_half_offset() {
        let pred = Prediction {
            class_logits: vec![vec![40.0, 0.0, 0.0]],
            box_offsets: vec![[0.5, 0.0, 0.0, 0.0]],
        };
        let targets = AnchorTargets {
            anchors: vec![AnchorTarget {
                matched: true,
                class_target: 0,
                box_target: Some([0.0; 4]),
                ..background_target(2)
            }],
        };
        let l = loss_eq1(&pred, &targets, &LossConfig::new(2)).unwrap();
        assert!((l.total - 0.125).abs() < 1e-12);
    }

    #[test]
    fn perfect_prediction_near_zero() {
        let pred = Prediction {
            class_logits: vec![vec![0.0, 20.0], vec![20.0, 0.0]],
            box_offsets: vec![[0.0; 4], [0.1, -0.2, 0.3, 0.0]],
        };
        let targets = AnchorTargets {
            anchors: vec![
                background_target(1),
                AnchorTarget {
                    matched: true,
                    class_target: 0,
                    box_target: Some([0.1, -0.2, 0.3, 0.0]),
                    ..background_target(1)
                },
            ],
        };
        let cfg = LossConfig::new(1);
        let l = loss_eq1(&pred, &targets, &cfg).unwrap();
        assert!(l.total < 1e-3);
        let g = loss_gradient(&pred, &targets, &cfg, LossVariant::Eq1).unwrap();
        let norm: f64 = g
            .class_logits
            .iter()
            .flatten()
            .chain(g.box_offsets.iter().flatten())
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt();
        assert!(norm < 1e-6, "{norm}");
    }

    #[test]
    fn zero_weight_anchor_has_zero_gradient() {
        let pred = Prediction {
            class_logits: vec![vec![1.0, -2.0]],
            box_offsets: vec![[0.3, 0.0, 2.0, 0.0]],
        };
        let targets = AnchorTargets {
            anchors: vec![AnchorTarget {
                matched: true,
                class_target: 0,
                box_target: Some([0.0; 4]),
                weight: 0.0,
                ..background_target(1)
            }],
        };
        let cfg = LossConfig::new(1);
        let g = loss_gradient(&pred, &targets, &cfg, LossVariant::Eq2).unwrap();
        assert!(g.class_logits[0].iter().chain(&g.box_offsets[0]).all(|v| *v == 0.0));
        assert_eq!(loss_eq2(&pred, &targets, &cfg).unwrap().total, 0.0);
    }

    #[test]
    fn shape_and_finiteness_errors() {
        let cfg = LossConfig::new(2);
        let targets = AnchorTargets {
            anchors: vec![background_target(2)],
        };
        let short = Prediction {
            class_logits: vec![vec![0.0, 0.0]],
            box_offsets: vec![[0.0; 4]],
        };
        assert!(loss_eq1(&short, &targets, &cfg).is_err());
        let nan = Prediction {
            class_logits: vec![vec![0.0, f64::NAN, 0.0]],
            box_offsets: vec![[0.0; 4]],
        };
        assert!(loss_eq2(&nan, &targets, &cfg).is_err());
        assert!(loss_eq1(&Prediction::default(), &AnchorTargets::default(), &cfg).is_err());
    }
}
