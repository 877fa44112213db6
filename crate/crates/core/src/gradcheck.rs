//! Finite-difference audit of the loss gradients.
//!
//! Random small instances are drawn from a seeded stream; every analytic
//! partial derivative of both loss variants is compared with a central
//! difference. Offsets within a margin of the smooth-L1 kink at `|d| = 1` are
//! redrawn, since the one-sided slopes differ there.

use serde::Serialize;

use crate::error::Result;
use crate::geometry::BBox;
use crate::loss::{loss, loss_gradient, AnchorTarget, AnchorTargets, LossConfig, LossVariant, Prediction};
use crate::rng::{substream, SplitMix64};

const KINK_MARGIN: f64 = 1e-3;
/// Denominator floor of the relative error.
const REL_FLOOR: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct AuditConfig {
    pub instances: usize,
    pub seed: u64,
    pub step: f64,
    pub tolerance: f64,
}

impl Default for AuditConfig {
    fn default() -> Self {
        AuditConfig {
            instances: 100,
            seed: 0,
            step: 1e-5,
            tolerance: 1e-5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AuditReport {
    pub config: AuditConfig,
    pub components: usize,
    pub max_rel_error_eq1: f64,
    pub max_rel_error_eq2: f64,
    /// Instances where the weighted loss with all weights 1 differed from
    /// the unweighted one in any bit.
    pub reduction_mismatches: usize,
}

impl AuditReport {
    pub fn passed(&self) -> bool {
        self.max_rel_error_eq1 <= self.config.tolerance
            && self.max_rel_error_eq2 <= self.config.tolerance
            && self.reduction_mismatches == 0
    }
}

/// A random instance with 1..=8 anchors and 1..=4 classes.
pub fn random_instance(seed: u64) -> (Prediction, AnchorTargets, LossConfig) {
    let mut rng = SplitMix64::new(seed);
    let num_classes = 1 + rng.below(4) as usize;
    let n = 1 + rng.below(8) as usize;
    let cfg = LossConfig {
        beta: 0.25 + 2.0 * rng.uniform(),
        ..LossConfig::new(num_classes)
    };
    let mut pred = Prediction::default();
    let mut targets = AnchorTargets::default();
    for _ in 0..n {
        pred.class_logits
            .push((0..=num_classes).map(|_| 1.5 * rng.normal()).collect());
        let matched = rng.uniform() < 0.6;
        let mut offsets = [0.0; 4];
        let mut box_target = [0.0; 4];
        for j in 0..4 {
            loop {
                offsets[j] = 1.5 * rng.normal();
                box_target[j] = 0.5 * rng.normal();
                if ((offsets[j] - box_target[j]).abs() - 1.0).abs() > KINK_MARGIN {
                    break;
                }
            }
        }
        pred.box_offsets.push(offsets);
        targets.anchors.push(AnchorTarget {
            anchor: BBox::from_coords([0.0, 0.0, 1.0, 1.0]),
            matched,
            class_target: if matched {
                rng.below(num_classes as u64) as usize
            } else {
                num_classes
            },
            box_target: matched.then_some(box_target),
            weight: 0.05 + 0.95 * rng.uniform(),
        });
    }
    (pred, targets, cfg)
}

fn rel_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

fn max_error(pred: &Prediction, targets: &AnchorTargets, cfg: &LossConfig, variant: LossVariant, h: f64) -> Result<(f64, usize)> {
    let grad = loss_gradient(pred, targets, cfg, variant)?;
    let f = |p: &Prediction| loss(p, targets, cfg, variant).map(|b| b.total);
    let mut worst = 0.0f64;
    let mut count = 0;
    let mut probe = pred.clone();
    for i in 0..pred.len() {
        for k in 0..pred.class_logits[i].len() {
            let x = pred.class_logits[i][k];
            probe.class_logits[i][k] = x + h;
            let up = f(&probe)?;
            probe.class_logits[i][k] = x - h;
            let down = f(&probe)?;
            probe.class_logits[i][k] = x;
            worst = worst.max(rel_error(grad.class_logits[i][k], (up - down) / (2.0 * h)));
            count += 1;
        }
        for j in 0..4 {
            let x = pred.box_offsets[i][j];
            probe.box_offsets[i][j] = x + h;
            let up = f(&probe)?;
            probe.box_offsets[i][j] = x - h;
            let down = f(&probe)?;
            probe.box_offsets[i][j] = x;
            worst = worst.max(rel_error(grad.box_offsets[i][j], (up - down) / (2.0 * h)));
            count += 1;
        }
    }
    Ok((worst, count))
}

pub fn audit(cfg: &AuditConfig) -> Result<AuditReport> {
    let mut report = AuditReport {
        config: *cfg,
        components: 0,
        max_rel_error_eq1: 0.0,
        max_rel_error_eq2: 0.0,
        reduction_mismatches: 0,
    };
    for i in 0..cfg.instances {
        let (pred, mut targets, loss_cfg) = random_instance(substream(cfg.seed, i as u64));
        let (e1, n1) = max_error(&pred, &targets, &loss_cfg, LossVariant::Eq1, cfg.step)?;
        let (e2, n2) = max_error(&pred, &targets, &loss_cfg, LossVariant::Eq2, cfg.step)?;
        report.max_rel_error_eq1 = report.max_rel_error_eq1.max(e1);
        report.max_rel_error_eq2 = report.max_rel_error_eq2.max(e2);
        report.components += n1 + n2;

        targets.anchors.iter_mut().for_each(|t| t.weight = 1.0);
        let a = loss(&pred, &targets, &loss_cfg, LossVariant::Eq1)?.total;
        let b = loss(&pred, &targets, &loss_cfg, LossVariant::Eq2)?.total;
        if a.to_bits() != b.to_bits() {
            report.reduction_mismatches += 1;
        }
    }
    Ok(report)
}
