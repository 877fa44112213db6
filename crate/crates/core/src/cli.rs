//! The `annofuse` command line.
//!
//! Exit codes: 0 on success, 1 on runtime errors, 2 on argument errors (with a
//! one-line diagnostic on stderr).

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::json;

use crate::annotations::{self, annjson, load_image_pixels, DatasetFormat, GrayImage, LabeledBox, MultiAnnotatorDataset, Split};
use crate::detector::{self, AnchorGrid, DetectorModel, PredictConfig, TrainConfig, TrainingImage};
use crate::error::{Error, Result};
use crate::evaluation::map_at;
use crate::experiment::{annotator_labels, compare, pooled_labels, CompareConfig};
use crate::fusion::{fuse_dataset, ConfMode, FusedBox, RescaleMode, WbfConfig};
use crate::gradcheck::{audit, AuditConfig};
use crate::loss::{BackgroundWeight, LossConfig, LossVariant};
use crate::render::{render_svg, BoxSet};
use crate::simulator::{build_corpus, AnnotatorProfile, CorpusConfig, SceneConfig};

fn parse_f64(s: &str) -> std::result::Result<f64, String> {
    s.trim()
        .parse::<f64>()
        .ok()
        .filter(|v| v.is_finite())
        .ok_or_else(|| format!("`{s}` is not a finite number"))
}

fn open_unit(s: &str) -> std::result::Result<f64, String> {
    let v = parse_f64(s)?;
    if v > 0.0 && v < 1.0 {
        Ok(v)
    } else {
        Err(format!("{v} is outside the valid range (0, 1)"))
    }
}

fn probability(s: &str) -> std::result::Result<f64, String> {
    let v = parse_f64(s)?;
    if (0.0..=1.0).contains(&v) {
        Ok(v)
    } else {
        Err(format!("{v} is outside the valid range [0, 1]"))
    }
}

fn positive(s: &str) -> std::result::Result<f64, String> {
    let v = parse_f64(s)?;
    if v > 0.0 {
        Ok(v)
    } else {
        Err(format!("{v} is outside the valid range (0, inf)"))
    }
}

fn non_negative(s: &str) -> std::result::Result<f64, String> {
    let v = parse_f64(s)?;
    if v >= 0.0 {
        Ok(v)
    } else {
        Err(format!("{v} is outside the valid range [0, inf)"))
    }
}

fn at_least_one(s: &str) -> std::result::Result<f64, String> {
    let v = parse_f64(s)?;
    if v >= 1.0 {
        Ok(v)
    } else {
        Err(format!("{v} is outside the valid range [1, inf)"))
    }
}

fn count(s: &str) -> std::result::Result<usize, String> {
    match s.trim().parse::<usize>() {
        Ok(v) if v > 0 => Ok(v),
        _ => Err(format!("`{s}` is not a positive integer")),
    }
}

#[derive(Parser, Debug)]
#[command(
    name = "annofuse",
    version,
    about = "Fuse multi-annotator boxes, train consensus-weighted detectors, and score them"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic multi-annotator corpus with hidden true boxes.
    Simulate(SimulateArgs),
    /// Fuse every image's annotator boxes into consensus labels.
    Fuse(FuseArgs),
    /// Train a detector on pooled, single-annotator or fused labels.
    Train(TrainArgs),
    /// Run a trained detector over a dataset's images.
    Predict(PredictArgs),
    /// Score predictions against reference boxes with mAP.
    Eval(EvalArgs),
    /// Run the full method comparison over several corpus seeds.
    Compare(CompareArgs),
    /// Draw box sets over an image as SVG.
    Render(RenderArgs),
    /// Check the loss gradients against finite differences.
    LossCheck(LossCheckArgs),
}

#[derive(Args, Debug, Clone)]
struct SceneArgs {
    /// Image width in pixels.
    #[arg(long, default_value_t = 64, value_parser = count)]
    width: usize,
    /// Image height in pixels.
    #[arg(long, default_value_t = 64, value_parser = count)]
    height: usize,
    /// Number of object classes.
    #[arg(long, default_value_t = 2, value_parser = count)]
    classes: usize,
    /// Fewest objects per image.
    #[arg(long, default_value_t = 1)]
    objects_min: usize,
    /// Most objects per image.
    #[arg(long, default_value_t = 3)]
    objects_max: usize,
    /// Smallest object side in pixels.
    #[arg(long, default_value_t = 10, value_parser = count)]
    size_min: usize,
    /// Largest object side in pixels.
    #[arg(long, default_value_t = 24, value_parser = count)]
    size_max: usize,
    /// Background intensity (0-255).
    #[arg(long, default_value_t = 50)]
    background: u8,
    /// Std-dev of the Gaussian pixel noise.
    #[arg(long, default_value_t = 8.0, value_parser = non_negative)]
    noise_sigma: f64,
}

impl SceneArgs {
    fn config(&self) -> SceneConfig {
        SceneConfig {
            width: self.width,
            height: self.height,
            num_classes: self.classes,
            objects_min: self.objects_min,
            objects_max: self.objects_max,
            size_min: self.size_min,
            size_max: self.size_max,
            intensity_per_class: crate::simulator::default_intensities(self.classes),
            background_intensity: self.background,
            background_noise_sigma: self.noise_sigma,
        }
    }
}

/// One annotator per `--jitter` entry; the other lists hold one value for
/// every annotator or one value each.
#[derive(Args, Debug, Clone)]
struct ProfileArgs {
    /// Per-annotator coordinate noise std-dev in pixels.
    #[arg(long, value_delimiter = ',', default_value = "1.5,2.5,3.5", value_parser = non_negative)]
    jitter: Vec<f64>,
    /// Probability that an annotator misses a true box.
    #[arg(long, value_delimiter = ',', default_value = "0.1", value_parser = probability)]
    miss_rate: Vec<f64>,
    /// Expected spurious boxes per image and annotator.
    #[arg(long, value_delimiter = ',', default_value = "0.1", value_parser = non_negative)]
    spurious_rate: Vec<f64>,
    /// Probability of relabelling a box to another class.
    #[arg(long, value_delimiter = ',', default_value = "0", value_parser = probability)]
    class_confusion: Vec<f64>,
}

impl ProfileArgs {
    fn profiles(&self) -> std::result::Result<Vec<AnnotatorProfile>, String> {
        let t = self.jitter.len();
        let pick = |name: &str, v: &[f64], i: usize| -> std::result::Result<f64, String> {
            match v.len() {
                1 => Ok(v[0]),
                n if n == t => Ok(v[i]),
                n => Err(format!("--{name} has {n} values; expected 1 or {t} (one per --jitter entry)")),
            }
        };
        (0..t)
            .map(|i| {
                Ok(AnnotatorProfile {
                    jitter_sigma: self.jitter[i],
                    miss_rate: pick("miss-rate", &self.miss_rate, i)?,
                    spurious_rate: pick("spurious-rate", &self.spurious_rate, i)?,
                    class_confusion: pick("class-confusion", &self.class_confusion, i)?,
                })
            })
            .collect()
    }
}

#[derive(Args, Debug, Clone)]
struct CorpusArgs {
    /// Corpus seed.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Number of images.
    #[arg(long, default_value_t = 250, value_parser = count)]
    n_images: usize,
    /// Fraction of images held out for testing.
    #[arg(long, default_value_t = 0.2, value_parser = probability)]
    test_fraction: f64,
    #[command(flatten)]
    scene: SceneArgs,
    #[command(flatten)]
    profiles: ProfileArgs,
}

impl CorpusArgs {
    fn config(&self) -> std::result::Result<CorpusConfig, String> {
        Ok(CorpusConfig {
            n_images: self.n_images,
            seed: self.seed,
            test_fraction: self.test_fraction,
            scene: self.scene.config(),
            profiles: self.profiles.profiles()?,
        })
    }
}

#[derive(Args, Debug)]
struct SimulateArgs {
    #[command(flatten)]
    corpus: CorpusArgs,
    /// Output directory (dataset.annjson, truth.annjson, images/).
    #[arg(long)]
    out: PathBuf,
}

#[derive(ValueEnum, Debug, Clone, Copy)]
enum ConfModeArg {
    Avg,
    Max,
}

#[derive(ValueEnum, Debug, Clone, Copy)]
#[value(rename_all = "snake_case")]
enum RescaleArg {
    MinOverT,
    NOverT,
    None,
}

#[derive(Args, Debug, Clone)]
struct WbfArgs {
    /// Clustering IoU threshold, strictly exceeded to join a cluster.
    #[arg(long, default_value_t = 0.55, value_parser = open_unit)]
    iou_thr: f64,
    /// Cluster confidence: mean or max of member scores.
    #[arg(long, value_enum, default_value = "avg")]
    conf_mode: ConfModeArg,
    /// Rescaling of cluster confidence by annotator agreement.
    #[arg(long, value_enum, default_value = "min_over_t")]
    rescale_mode: RescaleArg,
    /// Number of annotators to rescale by (default: all in the file).
    #[arg(long, value_parser = count)]
    t: Option<usize>,
}

impl WbfArgs {
    fn config(&self) -> WbfConfig {
        WbfConfig {
            iou_threshold: self.iou_thr,
            conf_mode: match self.conf_mode {
                ConfModeArg::Avg => ConfMode::Avg,
                ConfModeArg::Max => ConfMode::Max,
            },
            rescale_mode: match self.rescale_mode {
                RescaleArg::MinOverT => RescaleMode::MinOverT,
                RescaleArg::NOverT => RescaleMode::NOverT,
                RescaleArg::None => RescaleMode::None,
            },
            t_override: self.t,
        }
    }
}

#[derive(ValueEnum, Debug, Clone, Copy)]
enum FormatArg {
    Annjson,
    VindrCsv,
}

#[derive(Args, Debug)]
struct FuseArgs {
    /// Multi-annotator dataset.
    #[arg(long)]
    data: PathBuf,
    #[arg(long, value_enum, default_value = "annjson")]
    format: FormatArg,
    /// vindr-csv image sidecar (default: images.csv next to --data).
    #[arg(long)]
    images: Option<PathBuf>,
    /// vindr-csv class list (default: order of first appearance).
    #[arg(long, value_delimiter = ',')]
    class_names: Option<Vec<String>>,
    #[command(flatten)]
    wbf: WbfArgs,
    /// Output fused label file.
    #[arg(long)]
    out: PathBuf,
}

#[derive(ValueEnum, Debug, Clone, Copy, PartialEq)]
enum WeightingArg {
    Eq1,
    Eq2,
}

#[derive(ValueEnum, Debug, Clone, Copy)]
#[value(rename_all = "snake_case")]
enum BackgroundArg {
    Unit,
    MeanC,
}

#[derive(Args, Debug, Clone)]
struct DetectorArgs {
    /// Anchor gate: an anchor is matched when its IoU exceeds this.
    #[arg(long, default_value_t = 0.4, value_parser = open_unit)]
    eta: f64,
    /// Weight of the localisation term.
    #[arg(long, default_value_t = 1.0, value_parser = positive)]
    beta: f64,
    /// Weight of background anchors under eq2.
    #[arg(long, value_enum, default_value = "mean_c")]
    background_weight: BackgroundArg,
    #[arg(long, default_value_t = 30, value_parser = count)]
    epochs: usize,
    #[arg(long, default_value_t = 1.0, value_parser = positive)]
    lr: f64,
    /// Images per gradient step.
    #[arg(long, default_value_t = 4, value_parser = count)]
    batch: usize,
    /// Anchor grid stride in pixels.
    #[arg(long, default_value_t = 4, value_parser = count)]
    stride: usize,
    /// Square anchor sides in pixels.
    #[arg(long, value_delimiter = ',', default_value = "12,20,28", value_parser = positive)]
    anchor_sizes: Vec<f64>,
    /// Feature window side relative to the anchor side.
    #[arg(long, default_value_t = 1.5, value_parser = at_least_one)]
    context: f64,
}

impl DetectorArgs {
    fn config(&self, num_classes: usize, seed: u64, variant: LossVariant) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs,
            learning_rate: self.lr,
            seed,
            loss_variant: variant,
            loss: LossConfig {
                eta: self.eta,
                beta: self.beta,
                num_classes,
                background_weight: match self.background_weight {
                    BackgroundArg::Unit => BackgroundWeight::Unit,
                    BackgroundArg::MeanC => BackgroundWeight::MeanC,
                },
            },
            batch: self.batch,
            grid: AnchorGrid {
                stride: self.stride,
                sizes: self.anchor_sizes.clone(),
                context: self.context,
            },
        }
    }
}

#[derive(ValueEnum, Debug, Clone, Copy, PartialEq)]
enum SplitArg {
    Train,
    Test,
    All,
}

impl SplitArg {
    fn keeps(self, s: Option<Split>) -> bool {
        match self {
            SplitArg::All => true,
            SplitArg::Train => s == Some(Split::Train),
            SplitArg::Test => s == Some(Split::Test),
        }
    }
}

#[derive(Args, Debug)]
struct TrainArgs {
    /// annjson dataset whose images carry pixel paths.
    #[arg(long)]
    data: PathBuf,
    /// Fused label file to train on (default: pooled annotator boxes).
    #[arg(long, conflicts_with = "annotator")]
    labels: Option<PathBuf>,
    /// Train on a single annotator's boxes.
    #[arg(long)]
    annotator: Option<String>,
    /// Images to train on.
    #[arg(long, value_enum, default_value = "train")]
    split: SplitArg,
    /// Loss: eq1 unweighted, eq2 scaled by fused confidence.
    #[arg(long, value_enum, default_value = "eq1")]
    weighting: WeightingArg,
    /// Minibatch shuffling seed.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[command(flatten)]
    detector: DetectorArgs,
    /// Output model file.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug, Clone)]
struct PredictArgsShared {
    /// Lowest class probability kept.
    #[arg(long, default_value_t = 0.3, value_parser = probability)]
    score_thr: f64,
    /// NMS suppresses same-class boxes overlapping a kept one by more than this.
    #[arg(long, default_value_t = 0.45, value_parser = open_unit)]
    nms_iou: f64,
}

#[derive(Args, Debug)]
struct PredictArgs {
    #[arg(long)]
    model: PathBuf,
    /// annjson dataset whose images carry pixel paths.
    #[arg(long)]
    data: PathBuf,
    #[arg(long, value_enum, default_value = "test")]
    split: SplitArg,
    #[command(flatten)]
    predict: PredictArgsShared,
    /// Output predictions (annjson, annotator `model`).
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct EvalArgs {
    /// Predictions (annjson); boxes of all its annotators are pooled.
    #[arg(long)]
    pred: PathBuf,
    /// Reference boxes (annjson), e.g. truth.annjson.
    #[arg(long)]
    truth: PathBuf,
    /// IoU at or above which a prediction is a true positive.
    #[arg(long, default_value_t = 0.4, value_parser = open_unit)]
    map_iou: f64,
    /// Also write the report as JSON.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct CompareArgs {
    /// Number of corpus seeds, run as 0..N.
    #[arg(long, default_value_t = 5, value_parser = count)]
    seeds: usize,
    /// Number of images per corpus.
    #[arg(long, default_value_t = 250, value_parser = count)]
    n_images: usize,
    #[arg(long, default_value_t = 0.2, value_parser = probability)]
    test_fraction: f64,
    #[command(flatten)]
    scene: SceneArgs,
    #[command(flatten)]
    profiles: ProfileArgs,
    #[command(flatten)]
    wbf: WbfArgs,
    #[command(flatten)]
    detector: DetectorArgs,
    /// Lowest class probability kept.
    #[arg(long, default_value_t = 0.05, value_parser = probability)]
    score_thr: f64,
    #[arg(long, default_value_t = 0.45, value_parser = open_unit)]
    nms_iou: f64,
    #[arg(long, default_value_t = 0.4, value_parser = open_unit)]
    map_iou: f64,
    /// Output TSV (default: stdout).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct RenderArgs {
    /// Binary PGM image.
    #[arg(long)]
    image: PathBuf,
    /// Box files (annjson datasets, fused files or predictions); every
    /// annotator of a dataset becomes its own set.
    #[arg(long = "boxes")]
    boxes: Vec<PathBuf>,
    /// Image id inside the box files (default: the image file stem).
    #[arg(long)]
    image_id: Option<String>,
    /// Display size of one pixel.
    #[arg(long, default_value_t = 8.0, value_parser = positive)]
    scale: f64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct LossCheckArgs {
    #[arg(long, default_value_t = 100, value_parser = count)]
    instances: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Central-difference step.
    #[arg(long, default_value_t = 1e-5, value_parser = positive)]
    step: f64,
    /// Largest accepted componentwise relative error.
    #[arg(long, default_value_t = 1e-5, value_parser = positive)]
    tol: f64,
}

enum Failure {
    Usage(String),
    Runtime(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Runtime(e)
    }
}

type CliResult = std::result::Result<(), Failure>;

/// Parses `args` (program name first), runs the subcommand and returns the
/// process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                print!("{e}");
                return 0;
            }
            let text = e.to_string();
            eprintln!("{}", text.lines().next().unwrap_or("error: invalid arguments"));
            return 2;
        }
    };
    let outcome = match cli.command {
        Command::Simulate(a) => simulate(&a),
        Command::Fuse(a) => fuse(&a),
        Command::Train(a) => train(&a),
        Command::Predict(a) => predict(&a),
        Command::Eval(a) => eval(&a),
        Command::Compare(a) => run_compare(&a),
        Command::Render(a) => render(&a),
        Command::LossCheck(a) => loss_check(&a),
    };
    match outcome {
        Ok(()) => 0,
        Err(Failure::Usage(m)) => {
            eprintln!("error: {m}");
            2
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e}");
            1
        }
    }
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn base_dir(path: &Path) -> &Path {
    path.parent().unwrap_or_else(|| Path::new("."))
}

fn simulate(a: &SimulateArgs) -> CliResult {
    let cfg = a.corpus.config().map_err(Failure::Usage)?;
    let corpus = build_corpus(&cfg)?;
    corpus.write(&a.out)?;
    println!(
        "wrote {} images, {} annotators to {}",
        corpus.dataset.images.len(),
        corpus.dataset.annotators.len(),
        a.out.display()
    );
    Ok(())
}

fn fuse(a: &FuseArgs) -> CliResult {
    let format = match a.format {
        FormatArg::Annjson => DatasetFormat::AnnJson,
        FormatArg::VindrCsv => DatasetFormat::VindrCsv {
            images: a.images.clone(),
            classes: a.class_names.clone(),
        },
    };
    let ds = annotations::load_dataset(&a.data, &format)?;
    let mut fused = fuse_dataset(&ds, &a.wbf.config())?;
    fused.provenance = ds.provenance.clone();
    annjson::save_fused(&fused, &a.out)?;
    let n: usize = fused.fused.values().map(Vec::len).sum();
    println!("fused {} images into {n} boxes -> {}", fused.images.len(), a.out.display());
    Ok(())
}

fn load_pixels(ds: &MultiAnnotatorDataset, data: &Path, ids: &[String]) -> Result<BTreeMap<String, GrayImage>> {
    ids.iter()
        .map(|id| {
            let rec = ds.image(id).expect("id taken from the dataset");
            Ok((id.clone(), load_image_pixels(rec, base_dir(data))?))
        })
        .collect()
}

fn train(a: &TrainArgs) -> CliResult {
    let ds = annjson::load_dataset(&a.data)?;
    let ids: Vec<String> = ds
        .images
        .iter()
        .filter(|r| a.split.keeps(r.split))
        .map(|r| r.image_id.clone())
        .collect();
    if ids.is_empty() {
        return Err(Error::invalid("no images in the selected split").into());
    }
    let labels: BTreeMap<String, Vec<FusedBox>> = match (&a.labels, &a.annotator) {
        (Some(path), _) => {
            let fused = annjson::load_fused(path)?;
            if fused.classes != ds.classes {
                return Err(Error::invalid("fused label classes differ from the dataset's").into());
            }
            fused.fused
        }
        (None, Some(annotator)) => {
            if !ds.annotators.contains(annotator) {
                return Err(Error::UnknownAnnotator(annotator.clone()).into());
            }
            annotator_labels(&ds, annotator)
        }
        (None, None) => pooled_labels(&ds),
    };
    let variant = match a.weighting {
        WeightingArg::Eq1 => LossVariant::Eq1,
        WeightingArg::Eq2 => LossVariant::Eq2,
    };
    let cfg = a.detector.config(ds.num_classes(), a.seed, variant);
    let pixels = load_pixels(&ds, &a.data, &ids)?;
    let items: Vec<TrainingImage> = ids
        .iter()
        .map(|id| TrainingImage {
            pixels: &pixels[id],
            labels: labels.get(id).cloned().unwrap_or_default(),
        })
        .collect();
    let out = detector::train(&items, ds.num_classes(), &cfg)?;
    out.model.save(&a.out)?;
    let first = out.loss_trace.first().copied().unwrap_or(f64::NAN);
    let last = out.loss_trace.last().copied().unwrap_or(f64::NAN);
    println!(
        "trained on {} images, loss {first:.6} -> {last:.6}, model -> {}",
        items.len(),
        a.out.display()
    );
    Ok(())
}

fn predict(a: &PredictArgs) -> CliResult {
    let model = DetectorModel::load(&a.model)?;
    let ds = annjson::load_dataset(&a.data)?;
    if ds.num_classes() != model.num_classes {
        return Err(Error::invalid("model and dataset class counts differ").into());
    }
    let cfg = PredictConfig {
        score_threshold: a.predict.score_thr,
        nms_iou: a.predict.nms_iou,
    };
    let images: Vec<_> = ds.images.iter().filter(|r| a.split.keeps(r.split)).cloned().collect();
    let annotator = "model".to_string();
    let mut out = MultiAnnotatorDataset {
        classes: ds.classes.clone(),
        annotators: vec![annotator.clone()],
        images: images.clone(),
        provenance: Some(json!({ "predict": cfg, "model": model.config })),
        ..Default::default()
    };
    for rec in &images {
        let px = load_image_pixels(rec, base_dir(&a.data))?;
        let dets = detector::predict(&model, &px, &cfg).map_err(|e| match e {
            Error::DimensionMismatch {
                expected_width,
                expected_height,
                width,
                height,
                ..
            } => Error::DimensionMismatch {
                image_id: rec.image_id.clone(),
                expected_width,
                expected_height,
                width,
                height,
            },
            other => other,
        })?;
        out.annotations.insert((rec.image_id.clone(), annotator.clone()), dets);
    }
    annjson::save_dataset(&out, &a.out)?;
    let n: usize = out.annotations.values().map(Vec::len).sum();
    println!("{n} detections on {} images -> {}", images.len(), a.out.display());
    Ok(())
}

fn pooled(ds: &MultiAnnotatorDataset) -> BTreeMap<String, Vec<LabeledBox>> {
    ds.images
        .iter()
        .map(|r| (r.image_id.clone(), ds.pooled_boxes(&r.image_id)))
        .collect()
}

fn eval(a: &EvalArgs) -> CliResult {
    let pred = annjson::load_dataset(&a.pred)?;
    let truth = annjson::load_dataset(&a.truth)?;
    if pred.classes != truth.classes {
        return Err(Error::invalid("prediction and reference class lists differ").into());
    }
    let truth_boxes = pooled(&truth);
    let preds = pooled(&pred);
    let mut gts = BTreeMap::new();
    for id in preds.keys() {
        let boxes = truth_boxes.get(id).ok_or_else(|| Error::MissingImage(id.clone()))?;
        gts.insert(id.clone(), boxes.clone());
    }
    let mut report = map_at(&preds, &gts, truth.num_classes(), a.map_iou)?;
    report.method = "predictions".into();
    let mut line = format!("mAP@{}\t{:.6}", a.map_iou, report.map);
    for (c, ap) in truth.classes.iter().zip(&report.per_class_ap) {
        line.push_str(&format!("\tAP[{c}]\t{}", ap.map_or("NA".to_string(), |v| format!("{v:.6}"))));
    }
    println!("{line}");
    if let Some(out) = &a.out {
        let mut text = serde_json::to_string_pretty(&json!({
            "report": report,
            "classes": truth.classes,
            "prediction_provenance": pred.provenance,
        }))
        .map_err(Error::from)?;
        text.push('\n');
        write_file(out, &text)?;
    }
    Ok(())
}

fn run_compare(a: &CompareArgs) -> CliResult {
    let corpus = CorpusConfig {
        n_images: a.n_images,
        seed: 0,
        test_fraction: a.test_fraction,
        scene: a.scene.config(),
        profiles: a.profiles.profiles().map_err(Failure::Usage)?,
    };
    let cfg = CompareConfig {
        seeds: (0..a.seeds as u64).collect(),
        wbf: a.wbf.config(),
        train: a.detector.config(corpus.scene.num_classes, 0, LossVariant::Eq1),
        predict: PredictConfig {
            score_threshold: a.score_thr,
            nms_iou: a.nms_iou,
        },
        map_iou: a.map_iou,
        corpus,
    };
    let report = compare(&cfg)?;
    let tsv = report.to_tsv()?;
    match &a.out {
        Some(path) => {
            write_file(path, &tsv)?;
            for m in &report.methods {
                println!("{m}\t{:.6}", report.mean_map(m).unwrap_or(f64::NAN));
            }
        }
        None => print!("{tsv}"),
    }
    Ok(())
}

/// Box sets of one image from an annjson dataset or fused file.
fn box_sets(path: &Path, image_id: &str) -> Result<(Vec<String>, Vec<BoxSet>)> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let stem = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    match annjson::parse_dataset(&text, path) {
        Ok(ds) => {
            if ds.image(image_id).is_none() {
                return Err(Error::MissingImage(image_id.to_string()));
            }
            let sets = ds
                .boxes_by_annotator(image_id)
                .into_iter()
                .map(|(a, boxes)| BoxSet { name: a, boxes })
                .collect();
            Ok((ds.classes, sets))
        }
        Err(Error::Schema(_)) => {
            let fd = annjson::parse_fused(&text, path)?;
            if !fd.fused.contains_key(image_id) {
                return Err(Error::MissingImage(image_id.to_string()));
            }
            let boxes = fd.boxes(image_id).iter().map(FusedBox::to_labeled).collect();
            Ok((fd.classes, vec![BoxSet { name: stem, boxes }]))
        }
        Err(e) => Err(e),
    }
}

fn render(a: &RenderArgs) -> CliResult {
    let bytes = std::fs::read(&a.image).map_err(|e| Error::io(&a.image, e))?;
    let img = annotations::pgm::parse_pgm(&bytes)?;
    let image_id = match &a.image_id {
        Some(id) => id.clone(),
        None => a
            .image
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default(),
    };
    let mut classes: Vec<String> = Vec::new();
    let mut sets = Vec::new();
    for path in &a.boxes {
        let (c, s) = box_sets(path, &image_id)?;
        if classes.is_empty() {
            classes = c;
        }
        sets.extend(s);
    }
    write_file(&a.out, &render_svg(&img, &sets, &classes, a.scale))?;
    println!("{} box sets -> {}", sets.len(), a.out.display());
    Ok(())
}

fn loss_check(a: &LossCheckArgs) -> CliResult {
    let cfg = AuditConfig {
        instances: a.instances,
        seed: a.seed,
        step: a.step,
        tolerance: a.tol,
    };
    let report = audit(&cfg)?;
    println!(
        "{} instances, {} partials: max rel error eq1 {:.3e}, eq2 {:.3e}; unit-weight mismatches {} -> {}",
        cfg.instances,
        report.components,
        report.max_rel_error_eq1,
        report.max_rel_error_eq2,
        report.reduction_mismatches,
        if report.passed() { "PASS" } else { "FAIL" }
    );
    if report.passed() {
        Ok(())
    } else {
        Err(Error::invalid("gradient audit failed").into())
    }
}
