//! The method comparison: pooled labels, one model per annotator, their
//! prediction ensemble, and consensus-weighted training on fused labels, all
//! scored against held-out true boxes.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::annotations::{LabeledBox, MultiAnnotatorDataset, Split};
use crate::detector::{self, extract_features, FeatureMap, PredictConfig, TrainConfig};
use crate::error::Result;
use crate::evaluation::{map_at, EvalReport, DEFAULT_MAP_IOU, REFERENCE_MAP};
use crate::fusion::{fuse_dataset, fuse_predictions, FusedBox, WbfConfig};
use crate::loss::LossVariant;
use crate::simulator::{build_corpus, Corpus, CorpusConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompareConfig {
    pub corpus: CorpusConfig,
    pub seeds: Vec<u64>,
    pub wbf: WbfConfig,
    /// Shared by every method; the loss variant is set per method.
    pub train: TrainConfig,
    pub predict: PredictConfig,
    pub map_iou: f64,
}

impl CompareConfig {
    /// The standard desk-scale setup over seeds `0..n_seeds`.
    pub fn standard(n_seeds: u64) -> Self {
        let corpus = CorpusConfig::standard(0);
        let train = TrainConfig::new(corpus.scene.num_classes);
        CompareConfig {
            corpus,
            seeds: (0..n_seeds).collect(),
            wbf: WbfConfig::default(),
            train,
            predict: PredictConfig {
                score_threshold: 0.05,
                ..PredictConfig::default()
            },
            map_iou: DEFAULT_MAP_IOU,
        }
    }
}

/// Row labels in report order for `t` annotators.
pub fn method_labels(t: usize) -> Vec<String> {
    let mut labels = vec!["Baseline".to_string()];
    labels.extend((1..=t).map(|i| format!("Annotator #{i}")));
    labels.push("Ensemble".into());
    labels.push("Ours".into());
    labels
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SeedResult {
    pub seed: u64,
    /// One report per method, in [`method_labels`] order.
    pub reports: Vec<EvalReport>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CompareReport {
    pub config: CompareConfig,
    pub methods: Vec<String>,
    pub seeds: Vec<SeedResult>,
}

type Labels = BTreeMap<String, Vec<FusedBox>>;

fn wrap(boxes: &[LabeledBox], annotator: &str) -> Vec<FusedBox> {
    boxes.iter().map(|b| FusedBox::from_labeled(b, annotator)).collect()
}

/// Every annotator's boxes as confidence-1.0 labels, without fusion.
pub fn pooled_labels(ds: &MultiAnnotatorDataset) -> Labels {
    ds.images
        .iter()
        .map(|img| {
            let labels = ds
                .boxes_by_annotator(&img.image_id)
                .iter()
                .flat_map(|(a, boxes)| wrap(boxes, a))
                .collect();
            (img.image_id.clone(), labels)
        })
        .collect()
}

/// One annotator's boxes as confidence-1.0 labels.
pub fn annotator_labels(ds: &MultiAnnotatorDataset, annotator: &str) -> Labels {
    ds.images
        .iter()
        .map(|img| {
            let key = (img.image_id.clone(), annotator.to_string());
            let boxes = ds.annotations.get(&key).map(Vec::as_slice).unwrap_or(&[]);
            (img.image_id.clone(), wrap(boxes, annotator))
        })
        .collect()
}

struct Prepared<'a> {
    corpus: &'a Corpus,
    train_ids: Vec<String>,
    test_ids: Vec<String>,
    features: BTreeMap<String, FeatureMap>,
    anchors: Vec<detector::Anchor>,
}

impl Prepared<'_> {
    fn train_model(&self, labels: &Labels, cfg: &TrainConfig) -> Result<detector::DetectorModel> {
        let feats: Vec<FeatureMap> = self.train_ids.iter().map(|id| self.features[id].clone()).collect();
        let lab: Vec<&[FusedBox]> = self.train_ids.iter().map(|id| labels[id].as_slice()).collect();
        let k = self.corpus.dataset.num_classes();
        Ok(detector::train_on_features(&feats, &lab, k, cfg)?.model)
    }

    fn predict_all(&self, model: &detector::DetectorModel, cfg: &PredictConfig) -> BTreeMap<String, Vec<LabeledBox>> {
        self.test_ids
            .iter()
            .map(|id| {
                let dets = detector::predict_features(model, &self.anchors, &self.features[id], cfg);
                (id.clone(), dets)
            })
            .collect()
    }

    fn evaluate(&self, method: &str, preds: &BTreeMap<String, Vec<LabeledBox>>, iou: f64) -> Result<EvalReport> {
        let truth: BTreeMap<String, Vec<LabeledBox>> = self
            .test_ids
            .iter()
            .map(|id| (id.clone(), self.corpus.truth[id].clone()))
            .collect();
        let mut r = map_at(preds, &truth, self.corpus.dataset.num_classes(), iou)?;
        r.method = method.to_string();
        Ok(r)
    }
}

enum Job {
    Pooled,
    Annotator(usize),
    Fused,
}

/// Runs every method for one corpus seed.
pub fn run_seed(cfg: &CompareConfig, seed: u64) -> Result<SeedResult> {
    let corpus_cfg = CorpusConfig {
        seed,
        ..cfg.corpus.clone()
    };
    let corpus = build_corpus(&corpus_cfg)?;
    let ds = &corpus.dataset;
    let ids_of = |split| -> Vec<String> {
        ds.images
            .iter()
            .filter(|r| r.split == Some(split))
            .map(|r| r.image_id.clone())
            .collect()
    };
    let train_ids = ids_of(Split::Train);
    let test_ids = ids_of(Split::Test);
    let scene = &corpus_cfg.scene;
    let anchors = cfg.train.grid.anchors(scene.width, scene.height);
    let features = corpus
        .pixels
        .iter()
        .map(|(id, px)| (id.clone(), extract_features(&cfg.train.grid, &anchors, px)))
        .collect();
    let prep = Prepared {
        corpus: &corpus,
        train_ids,
        test_ids,
        features,
        anchors,
    };

    let train_split = ds.filter_split(Split::Train);
    let t = ds.annotators.len();
    let mut jobs = vec![Job::Pooled];
    jobs.extend((0..t).map(Job::Annotator));
    jobs.push(Job::Fused);

    let models: Vec<detector::DetectorModel> = jobs
        .par_iter()
        .map(|job| {
            let mut train_cfg = TrainConfig {
                seed,
                ..cfg.train.clone()
            };
            let labels = match job {
                Job::Pooled => pooled_labels(&train_split),
                Job::Annotator(j) => annotator_labels(&train_split, &ds.annotators[*j]),
                Job::Fused => {
                    train_cfg.loss_variant = LossVariant::Eq2;
                    fuse_dataset(&train_split, &cfg.wbf)?.fused
                }
            };
            prep.train_model(&labels, &train_cfg)
        })
        .collect::<Result<_>>()?;

    let preds: Vec<BTreeMap<String, Vec<LabeledBox>>> =
        models.iter().map(|m| prep.predict_all(m, &cfg.predict)).collect();
    let labels = method_labels(t);
    let mut reports = Vec::with_capacity(labels.len());
    reports.push(prep.evaluate(&labels[0], &preds[0], cfg.map_iou)?);
    for j in 0..t {
        reports.push(prep.evaluate(&labels[1 + j], &preds[1 + j], cfg.map_iou)?);
    }
    let ensemble_cfg = WbfConfig {
        t_override: None,
        ..cfg.wbf.clone()
    };
    let ensemble: BTreeMap<String, Vec<LabeledBox>> = prep
        .test_ids
        .iter()
        .map(|id| {
            let per_model: Vec<Vec<LabeledBox>> = preds[1..=t].iter().map(|p| p[id].clone()).collect();
            Ok((id.clone(), fuse_predictions(&per_model, &ensemble_cfg)?))
        })
        .collect::<Result<_>>()?;
    reports.push(prep.evaluate(&labels[t + 1], &ensemble, cfg.map_iou)?);
    reports.push(prep.evaluate(&labels[t + 2], &preds[t + 1], cfg.map_iou)?);
    Ok(SeedResult { seed, reports })
}

pub fn compare(cfg: &CompareConfig) -> Result<CompareReport> {
    cfg.corpus.validate()?;
    cfg.wbf.validate()?;
    cfg.train.validate()?;
    let seeds = cfg
        .seeds
        .par_iter()
        .map(|s| run_seed(cfg, *s))
        .collect::<Result<Vec<_>>>()?;
    Ok(CompareReport {
        config: cfg.clone(),
        methods: method_labels(cfg.corpus.profiles.len()),
        seeds,
    })
}

/// Sample mean and standard deviation (n - 1 denominator; 0 for one sample).
pub fn mean_sd(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

impl CompareReport {
    /// mAP of every seed for the method at `index`.
    pub fn method_maps(&self, index: usize) -> Vec<f64> {
        self.seeds.iter().map(|s| s.reports[index].map).collect()
    }

    pub fn mean_map(&self, method: &str) -> Option<f64> {
        let i = self.methods.iter().position(|m| m == method)?;
        Some(mean_sd(&self.method_maps(i)).0)
    }

    /// Tab-separated table: per-seed rows grouped by method, then `mean` and
    /// `sd` rows per method. Comment lines carry the resolved config and the
    /// full-scale reference values.
    pub fn to_tsv(&self) -> Result<String> {
        let k = self.config.corpus.scene.num_classes;
        let fmt = |v: f64| format!("{v:.6}");
        let mut out = String::new();
        writeln!(out, "# config: {}", serde_json::to_string(&self.config)?).unwrap();
        let reference: Vec<String> = REFERENCE_MAP.iter().map(|(m, v)| format!("{m}={v}")).collect();
        writeln!(out, "# reference_map@0.4 (full-scale, not reproduced): {}", reference.join("; ")).unwrap();
        let mut header = vec!["method".to_string(), "seed".into(), "mAP".into()];
        header.extend((0..k).map(|c| format!("AP_class_{c}")));
        writeln!(out, "{}", header.join("\t")).unwrap();

        for (i, method) in self.methods.iter().enumerate() {
            for s in &self.seeds {
                let r = &s.reports[i];
                let mut row = vec![method.clone(), s.seed.to_string(), fmt(r.map)];
                row.extend(r.per_class_ap.iter().map(|ap| ap.map_or("NA".to_string(), fmt)));
                writeln!(out, "{}", row.join("\t")).unwrap();
            }
        }
        for (i, method) in self.methods.iter().enumerate() {
            let maps = self.method_maps(i);
            let per_class: Vec<(f64, f64)> = (0..k)
                .map(|c| {
                    let v: Vec<f64> = self.seeds.iter().filter_map(|s| s.reports[i].per_class_ap[c]).collect();
                    mean_sd(&v)
                })
                .collect();
            let (m, sd) = mean_sd(&maps);
            let mut mean_row = vec![method.clone(), "mean".into(), fmt(m)];
            mean_row.extend(per_class.iter().map(|p| fmt(p.0)));
            let mut sd_row = vec![method.clone(), "sd".into(), fmt(sd)];
            sd_row.extend(per_class.iter().map(|p| fmt(p.1)));
            writeln!(out, "{}", mean_row.join("\t")).unwrap();
            writeln!(out, "{}", sd_row.join("\t")).unwrap();
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn labels_for_three_annotators() {
        assert_eq!(
            method_labels(3),
            vec!["Baseline", "Annotator #1", "Annotator #2", "Annotator #3", "Ensemble", "Ours"]
        );
    }

    #[test]
    fn mean_sd_sample() {
        let (m, sd) = mean_sd(&[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(m, 2.5);
        assert!((sd - (5.0f64 / 3.0).sqrt()).abs() < 1e-15);
        assert_eq!(mean_sd(&[0.7]), (0.7, 0.0));
    }

    #[test]
    fn reference_values_match_method_labels() {
        let labels = method_labels(3);
        for ((name, _), label) in REFERENCE_MAP.iter().zip(&labels) {
            assert_eq!(name, label);
        }
    }
}
