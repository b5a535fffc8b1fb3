//! The `fundusq` command line.
//!
//! Settings resolve as command-line flags, then `FUNDUSQ_*` environment
//! variables, then the `--config` JSON file. Reports are printed to stdout
//! and written as `<stage>-<seed>.json` under the output directory.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::datasets::{
    load_manifest, stratified_split, synth_corpus, BinaryLabel, DatasetError, DatasetManifest,
    Split, SplitSpec, SynthConfig,
};
use crate::explain::{grad_cam, write_cam_artifacts, CamOptions, ExplainError};
use crate::imaging::{preprocess, ImageTensor, ImagingError, PreprocessConfig};
use crate::metrics::{
    binary_report, linear_fit_r2, outliers, regression_report_raw, wilcoxon_signed_rank,
    BinaryReport, EvalReport, LinearFit, MetricsError, Outlier, WilcoxonResult,
    DEFAULT_OUTLIER_CUTOFF, DEFAULT_THRESHOLD,
};
use crate::qmodel::{load_checkpoint, BackboneKind, HeadKind, ModelConfig, ModelError, ModelStage};
use crate::scale::{export_labels, ExportPolicy, ScaleError};
use crate::service::{serve, AnnotationLog, ServiceConfig, ServiceError};
use crate::training::{
    generate_pseudo_labels, predict_split, pretrain_classification, train_regression,
    train_student, LossKind, RegressionInit, StageReport, TrainConfig, TrainEnv, TrainingError,
};

pub mod plots;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config: {0}")]
    Config(String),
    #[error("stage {stage}: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<CliError>,
    },
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Imaging(#[from] ImagingError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Training(#[from] TrainingError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Explain(#[from] ExplainError),
    #[error(transparent)]
    Scale(#[from] ScaleError),
    #[error(transparent)]
    Service(#[from] ServiceError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error("plot: {0}")]
    Plot(String),
}

pub type Result<T> = std::result::Result<T, CliError>;

#[derive(Debug, Parser)]
#[command(
    name = "fundusq",
    version,
    about = "Continuous fundus image quality grading"
)]
pub struct Cli {
    /// JSON run configuration; unknown keys are rejected.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory for reports, checkpoints and plots.
    #[arg(long = "out-dir", global = true)]
    pub out_dir: Option<PathBuf>,
    #[arg(long, global = true)]
    pub log_level: Option<String>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum SplitArg {
    Train,
    Validation,
    Test,
    All,
}

impl SplitArg {
    fn split(self) -> Option<Split> {
        match self {
            SplitArg::Train => Some(Split::Train),
            SplitArg::Validation => Some(Split::Validation),
            SplitArg::Test => Some(Split::Test),
            SplitArg::All => None,
        }
    }
}

#[derive(Debug, clap::Args, Default)]
pub struct TrainFlags {
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub patience: Option<usize>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Writes preprocessed copies of every image in a manifest.
    Preprocess {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        target_size: Option<usize>,
    },
    /// Stratified train/validation/test split of a quality manifest.
    Split {
        #[arg(long)]
        manifest: PathBuf,
        /// Three integers: train,validation,test.
        #[arg(long, value_delimiter = ',', conflicts_with = "fractions")]
        counts: Option<Vec<usize>>,
        /// Three reals summing to 1.
        #[arg(long, value_delimiter = ',')]
        fractions: Option<Vec<f64>>,
        #[arg(long)]
        output: PathBuf,
    },
    /// Renders a synthetic corpus with known quality.
    Synth {
        #[arg(long)]
        n: usize,
        #[arg(long)]
        image_size: Option<u32>,
        #[arg(long)]
        trinary: bool,
        #[arg(long)]
        binary: bool,
    },
    /// Stage I: 3-class pre-training.
    Pretrain {
        #[arg(long)]
        manifest: PathBuf,
        #[command(flatten)]
        train: TrainFlags,
    },
    /// Stage II: regression fine-tuning.
    Train {
        #[arg(long)]
        manifest: PathBuf,
        /// Stage-I checkpoint; random initialization when omitted.
        #[arg(long)]
        init: Option<PathBuf>,
        #[command(flatten)]
        train: TrainFlags,
    },
    /// Scores an unlabeled manifest with a teacher checkpoint.
    PseudoLabel {
        #[arg(long)]
        teacher: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        output: PathBuf,
    },
    /// Stage III: student training on labeled plus pseudo-labeled data.
    TrainStudent {
        #[arg(long)]
        teacher: PathBuf,
        #[arg(long)]
        labeled: PathBuf,
        #[arg(long)]
        pseudo: PathBuf,
        #[command(flatten)]
        train: TrainFlags,
    },
    /// Regression metrics of a checkpoint on one split.
    Evaluate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long, value_enum, default_value = "test")]
        split: SplitArg,
        /// Second checkpoint to compare against (Wilcoxon signed-rank).
        #[arg(long)]
        compare: Option<PathBuf>,
    },
    /// Thresholded Good/Poor metrics on a binary-labeled manifest.
    ExternalEval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        threshold: Option<f64>,
        /// Also report thresholds 5.0, 5.5, ..., 8.0.
        #[arg(long)]
        sweep: bool,
    },
    /// Grad-CAM overlay for one image.
    Gradcam {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        layer: Option<String>,
        #[arg(long, default_value_t = 0.4)]
        alpha: f32,
        #[arg(long)]
        invert: bool,
        /// Also write the raw heatmap as .npy.
        #[arg(long)]
        npy: bool,
    },
    /// Runs the HTTP service.
    Serve {
        #[arg(long)]
        listen: Option<String>,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        scale: Option<String>,
        #[arg(long)]
        queue: Option<PathBuf>,
        #[arg(long)]
        annotation_log: Option<PathBuf>,
    },
    /// Turns an annotation log into a quality manifest.
    ExportLabels {
        #[arg(long)]
        log: PathBuf,
        #[arg(long, value_enum)]
        policy: Option<PolicyArg>,
        /// Manifest supplying image URIs for annotated ids.
        #[arg(long)]
        queue: Option<PathBuf>,
        #[arg(long)]
        output: PathBuf,
    },
    /// Stages I to III in order.
    Pipeline,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum PolicyArg {
    LatestWins,
    Average,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    pub trinary_manifest: PathBuf,
    pub quality_manifest: PathBuf,
    #[serde(default)]
    pub unlabeled_manifest: Option<PathBuf>,
}

/// Contents of the `--config` file.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: Option<u64>,
    pub out_dir: Option<PathBuf>,
    pub log_level: Option<String>,
    pub preprocess: Option<PreprocessConfig>,
    pub model: Option<ModelConfig>,
    /// Shared training settings; the per-stage sections override it.
    pub train: Option<TrainConfig>,
    pub pretrain: Option<TrainConfig>,
    pub regression: Option<TrainConfig>,
    pub student: Option<TrainConfig>,
    /// Applied by `pipeline` to manifests without a split assignment.
    pub split: Option<SplitSpec>,
    pub synth: Option<SynthConfig>,
    pub service: Option<ServiceConfig>,
    pub pipeline: Option<PipelineConfig>,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        serde_json::from_str(&text)
            .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
    }
}

/// Global settings after precedence is applied.
#[derive(Debug, Clone)]
pub struct Resolved {
    pub seed: u64,
    pub out_dir: PathBuf,
    pub log_level: String,
    pub file: RunConfig,
}

fn env_var(key: &str) -> Option<String> {
    std::env::var(key).ok().filter(|v| !v.is_empty())
}

impl Resolved {
    pub fn new(cli: &Cli, env: impl Fn(&str) -> Option<String>) -> Result<Self> {
        let file = match &cli.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        let env_seed = env("FUNDUSQ_SEED")
            .map(|v| {
                v.parse::<u64>()
                    .map_err(|_| CliError::Config(format!("FUNDUSQ_SEED={v}")))
            })
            .transpose()?;
        Ok(Self {
            seed: cli.seed.or(env_seed).or(file.seed).unwrap_or(0),
            out_dir: cli
                .out_dir
                .clone()
                .or_else(|| env("FUNDUSQ_OUT_DIR").map(PathBuf::from))
                .or_else(|| file.out_dir.clone())
                .unwrap_or_else(|| PathBuf::from("runs")),
            log_level: cli
                .log_level
                .clone()
                .or_else(|| env("FUNDUSQ_LOG"))
                .or_else(|| file.log_level.clone())
                .unwrap_or_else(|| "info".into()),
            file,
        })
    }

    fn preprocess(&self) -> PreprocessConfig {
        self.file.preprocess.clone().unwrap_or_default()
    }

    fn model(&self) -> ModelConfig {
        let pre = self.preprocess();
        let mut m = self.file.model.clone().unwrap_or_else(|| {
            ModelConfig::new(
                BackboneKind::InceptionV3Like,
                HeadKind::Classify3,
                pre.target_size,
            )
        });
        m.seed = self.seed;
        m
    }

    fn train_config(&self, stage: ModelStage, flags: &TrainFlags) -> TrainConfig {
        let section = match stage {
            ModelStage::Pretrain => &self.file.pretrain,
            ModelStage::Regression => &self.file.regression,
            ModelStage::Student => &self.file.student,
        };
        let mut c = section
            .clone()
            .or_else(|| self.file.train.clone())
            .unwrap_or_default();
        c.loss = match stage {
            ModelStage::Pretrain => LossKind::CategoricalCrossEntropy,
            _ => LossKind::Rmse,
        };
        c.seed = self.seed;
        if let Some(v) = flags.epochs {
            c.max_epochs = v;
        }
        if let Some(v) = flags.batch_size {
            c.batch_size = v;
        }
        if let Some(v) = flags.lr {
            c.optimizer.learning_rate = v;
        }
        if let Some(v) = flags.patience {
            c.patience = v;
        }
        c
    }

    fn env(&self, image_root: &Path) -> TrainEnv {
        TrainEnv::new(image_root, &self.out_dir)
    }

    fn report_path(&self, stage: &str) -> PathBuf {
        self.out_dir.join(format!("{stage}-{}.json", self.seed))
    }

    fn emit<T: Serialize>(&self, stage: &str, report: &T) -> Result<PathBuf> {
        fs::create_dir_all(&self.out_dir)?;
        let text = serde_json::to_string_pretty(report)?;
        let path = self.report_path(stage);
        fs::write(&path, &text)?;
        println!("{text}");
        Ok(path)
    }
}

/// Directory that relative image URIs in `manifest` resolve against.
fn manifest_root(manifest: &Path) -> PathBuf {
    manifest
        .parent()
        .filter(|p| !p.as_os_str().is_empty())
        .map(Path::to_path_buf)
        .unwrap_or_else(|| PathBuf::from("."))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub checkpoint: PathBuf,
    pub model_version: String,
    pub mae: f64,
    pub wilcoxon: WilcoxonResult,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationOutput {
    pub checkpoint: PathBuf,
    pub model_version: String,
    pub stage: ModelStage,
    pub split: String,
    pub report: EvalReport,
    pub fit: Option<LinearFit>,
    pub outliers: Vec<Outlier>,
    pub comparison: Option<Comparison>,
}

/// Model version, stage, ids, predictions and references.
type Scored = (String, ModelStage, Vec<String>, Vec<f64>, Vec<f64>);

fn scored(
    checkpoint: &Path,
    manifest: &DatasetManifest,
    split: Option<Split>,
    root: &Path,
) -> Result<Scored> {
    let (model, meta) = load_checkpoint(checkpoint)?;
    let (ids, predicted, reference) = predict_split(&model, manifest, split, root)?;
    let reference = ids
        .iter()
        .zip(reference)
        .map(|(id, r)| r.ok_or_else(|| DatasetError::MissingQuality(id.clone())))
        .collect::<std::result::Result<Vec<_>, _>>()?;
    Ok((meta.content_hash, meta.stage, ids, predicted, reference))
}

/// Regression evaluation of `checkpoint` on `split` of `manifest_path`.
pub fn evaluate(
    resolved: &Resolved,
    checkpoint: &Path,
    manifest_path: &Path,
    split: SplitArg,
    compare: Option<&Path>,
) -> Result<EvaluationOutput> {
    let manifest = load_manifest(manifest_path)?;
    let root = manifest_root(manifest_path);
    let (version, stage, ids, predicted, reference) =
        scored(checkpoint, &manifest, split.split(), &root)?;
    let report = regression_report_raw(&predicted, &reference, resolved.seed)?;
    let fit = linear_fit_r2(&predicted, &reference).ok();
    let comparison = match compare {
        Some(other) => {
            let (v2, _, _, p2, _) = scored(other, &manifest, split.split(), &root)?;
            let r2 = regression_report_raw(&p2, &reference, resolved.seed)?;
            Some(Comparison {
                checkpoint: other.to_path_buf(),
                model_version: v2,
                mae: r2.mae,
                wilcoxon: wilcoxon_signed_rank(
                    &report.per_sample_abs_errors,
                    &r2.per_sample_abs_errors,
                )?,
            })
        }
        None => None,
    };
    let out = EvaluationOutput {
        checkpoint: checkpoint.to_path_buf(),
        model_version: version,
        stage,
        split: format!("{split:?}").to_lowercase(),
        outliers: outliers(&predicted, &reference, &ids, DEFAULT_OUTLIER_CUTOFF)?,
        report,
        fit,
        comparison,
    };
    fs::create_dir_all(&resolved.out_dir)?;
    let plot = resolved
        .out_dir
        .join(format!("evaluate-{}-scatter.svg", resolved.seed));
    plots::scatter_with_fit(&plot, &predicted, &reference, out.fit.as_ref())
        .map_err(|e| CliError::Plot(e.to_string()))?;
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassStats {
    pub n: usize,
    pub mean: f64,
    pub sd: f64,
    pub min: f64,
    pub max: f64,
}

impl ClassStats {
    fn of(v: &[f64]) -> Option<Self> {
        if v.is_empty() {
            return None;
        }
        let n = v.len();
        let mean = v.iter().sum::<f64>() / n as f64;
        let sd = if n > 1 {
            (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
        } else {
            0.0
        };
        Some(Self {
            n,
            mean,
            sd,
            min: v.iter().copied().fold(f64::INFINITY, f64::min),
            max: v.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExternalEvalOutput {
    pub checkpoint: PathBuf,
    pub model_version: String,
    pub report: BinaryReport,
    pub per_class: BTreeMap<String, ClassStats>,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub sweep: Vec<BinaryReport>,
}

/// Thresholds 5.0, 5.5, ..., 8.0.
pub fn sweep_thresholds() -> Vec<f64> {
    (10..=16).map(|k| k as f64 / 2.0).collect()
}

pub fn external_eval(
    resolved: &Resolved,
    checkpoint: &Path,
    manifest_path: &Path,
    threshold: f64,
    sweep: bool,
) -> Result<ExternalEvalOutput> {
    let manifest = load_manifest(manifest_path)?;
    let root = manifest_root(manifest_path);
    let (model, meta) = load_checkpoint(checkpoint)?;
    let (ids, predicted, _) = predict_split(&model, &manifest, None, &root)?;
    let labels: Vec<BinaryLabel> = manifest
        .records
        .iter()
        .map(|r| {
            r.binary.ok_or_else(|| DatasetError::Validation {
                id: r.id.clone(),
                message: "binary label missing".into(),
            })
        })
        .collect::<std::result::Result<_, _>>()?;
    debug_assert_eq!(ids.len(), labels.len());
    let scores: Vec<f64> = predicted.iter().map(|s| s.clamp(1.0, 10.0)).collect();
    let report = binary_report(&scores, &labels, threshold)?;
    let class = |want: BinaryLabel| -> Vec<f64> {
        scores
            .iter()
            .zip(&labels)
            .filter(|(_, l)| **l == want)
            .map(|(s, _)| *s)
            .collect()
    };
    let (good, poor) = (class(BinaryLabel::Good), class(BinaryLabel::Poor));
    let mut per_class = BTreeMap::new();
    for (name, v) in [("good", &good), ("poor", &poor)] {
        if let Some(s) = ClassStats::of(v) {
            per_class.insert(name.to_string(), s);
        }
    }
    let sweep = if sweep {
        sweep_thresholds()
            .into_iter()
            .map(|t| binary_report(&scores, &labels, t))
            .collect::<std::result::Result<_, _>>()?
    } else {
        Vec::new()
    };
    fs::create_dir_all(&resolved.out_dir)?;
    let plot = resolved
        .out_dir
        .join(format!("external-eval-{}-hist.svg", resolved.seed));
    plots::class_histograms(&plot, &good, &poor).map_err(|e| CliError::Plot(e.to_string()))?;
    Ok(ExternalEvalOutput {
        checkpoint: checkpoint.to_path_buf(),
        model_version: meta.content_hash,
        report,
        per_class,
        sweep,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineReport {
    pub stages: Vec<StageReport>,
    pub regression_test_mae: f64,
    pub student_test_mae: Option<f64>,
    pub final_checkpoint: PathBuf,
    /// Set when stage III was skipped.
    pub note: Option<String>,
}

fn in_stage<T>(stage: &'static str, r: Result<T>) -> Result<T> {
    r.map_err(|e| CliError::Stage {
        stage,
        source: Box::new(e),
    })
}

fn ensure_split(manifest: DatasetManifest, spec: &SplitSpec) -> Result<DatasetManifest> {
    if manifest.split_assignment.is_some() {
        return Ok(manifest);
    }
    Ok(stratified_split(&manifest, spec)?)
}

fn default_split(seed: u64) -> SplitSpec {
    // proportions of a 932/104/209 split
    SplitSpec::fractions(932.0 / 1245.0, 104.0 / 1245.0, 209.0 / 1245.0, seed)
}

fn test_mae(model_path: &Path, manifest: &DatasetManifest, root: &Path, seed: u64) -> Result<f64> {
    let (_, _, _, predicted, reference) = scored(model_path, manifest, Some(Split::Test), root)?;
    Ok(regression_report_raw(&predicted, &reference, seed)?.mae)
}

/// Stage I, II and (when an unlabeled manifest exists) III.
pub fn pipeline(resolved: &Resolved) -> Result<PipelineReport> {
    let cfg = resolved
        .file
        .pipeline
        .clone()
        .ok_or_else(|| CliError::Config("`pipeline` section missing".into()))?;
    let spec = resolved
        .file
        .split
        .clone()
        .unwrap_or_else(|| default_split(resolved.seed));
    let pre = resolved.preprocess();
    let flags = TrainFlags::default();

    let trinary_root = manifest_root(&cfg.trinary_manifest);
    let stage1 = in_stage(
        "pretrain",
        (|| {
            let m = ensure_split(load_manifest(&cfg.trinary_manifest)?, &spec)?;
            let c = resolved.train_config(ModelStage::Pretrain, &flags);
            Ok(pretrain_classification(
                &resolved.model(),
                &pre,
                &m,
                &c,
                &resolved.env(&trinary_root),
            )?)
        })(),
    )?;
    log::info!("stage I done: {}", stage1.report.checkpoint.display());

    let quality_root = manifest_root(&cfg.quality_manifest);
    let quality = in_stage(
        "regression",
        ensure_split(load_manifest(&cfg.quality_manifest)?, &spec),
    )?;
    let stage2 = in_stage(
        "regression",
        (|| {
            let c = resolved.train_config(ModelStage::Regression, &flags);
            let init = RegressionInit::Checkpoint(stage1.report.checkpoint.clone());
            Ok(train_regression(
                &init,
                &quality,
                &c,
                &resolved.env(&quality_root),
            )?)
        })(),
    )?;
    let regression_test_mae = in_stage(
        "regression",
        test_mae(
            &stage2.report.checkpoint,
            &quality,
            &quality_root,
            resolved.seed,
        ),
    )?;
    let mut stages = vec![stage1.report, stage2.report.clone()];

    let unlabeled = cfg.unlabeled_manifest.as_ref().filter(|p| p.exists());
    let Some(unlabeled_path) = unlabeled else {
        let note = match &cfg.unlabeled_manifest {
            Some(p) => format!(
                "unlabeled manifest {} not found; stopped after stage II",
                p.display()
            ),
            None => "no unlabeled manifest configured; stopped after stage II".to_string(),
        };
        log::warn!("{note}");
        return Ok(PipelineReport {
            stages,
            regression_test_mae,
            student_test_mae: None,
            final_checkpoint: stage2.report.checkpoint,
            note: Some(note),
        });
    };

    let stage3 = in_stage(
        "student",
        (|| {
            let unlabeled = load_manifest(unlabeled_path)?;
            let pseudo = generate_pseudo_labels(
                &stage2.report.checkpoint,
                &unlabeled,
                &manifest_root(unlabeled_path),
            )?;
            // pseudo records keep URIs relative to their own manifest
            let pseudo = rebase_uris(pseudo, &manifest_root(unlabeled_path), &quality_root);
            pseudo.save(
                resolved
                    .out_dir
                    .join(format!("pseudo-{}.jsonl", resolved.seed)),
            )?;
            let c = resolved.train_config(ModelStage::Student, &flags);
            Ok(train_student(
                &stage2.report.checkpoint,
                &quality,
                &pseudo,
                &c,
                &resolved.env(&quality_root),
            )?)
        })(),
    )?;
    let student_test_mae = in_stage(
        "student",
        test_mae(
            &stage3.report.checkpoint,
            &quality,
            &quality_root,
            resolved.seed,
        ),
    )?;
    let final_checkpoint = stage3.report.checkpoint.clone();
    stages.push(stage3.report);
    Ok(PipelineReport {
        stages,
        regression_test_mae,
        student_test_mae: Some(student_test_mae),
        final_checkpoint,
        note: None,
    })
}

/// Makes relative URIs written against `from` resolve from `to`.
fn rebase_uris(mut manifest: DatasetManifest, from: &Path, to: &Path) -> DatasetManifest {
    if from == to {
        return manifest;
    }
    for r in &mut manifest.records {
        let abs = crate::datasets::resolve_uri(from, &r.image_uri);
        let abs = fs::canonicalize(&abs).unwrap_or(abs);
        r.image_uri = abs.to_string_lossy().into_owned();
    }
    let _ = to;
    manifest
}

fn preprocess_command(
    resolved: &Resolved,
    manifest_path: &Path,
    target_size: Option<usize>,
) -> Result<serde_json::Value> {
    let mut cfg = resolved.preprocess();
    if let Some(s) = target_size {
        cfg.target_size = s;
    }
    cfg.validate()?;
    let manifest = load_manifest(manifest_path)?;
    let root = manifest_root(manifest_path);
    let out_dir = resolved.out_dir.join("preprocessed");
    fs::create_dir_all(&out_dir)?;
    let mut out = manifest.clone();
    let mut rejected = Vec::new();
    out.records.clear();
    for r in &manifest.records {
        let img = ImageTensor::open(crate::datasets::resolve_uri(&root, &r.image_uri))?;
        match preprocess(&img, &cfg) {
            Ok(p) => {
                let name = format!("{}.png", r.id);
                p.to_rgb8()
                    .save(out_dir.join(&name))
                    .map_err(ImagingError::from)?;
                let mut rec = r.clone();
                rec.image_uri = name;
                out.records.push(rec);
            }
            Err(ImagingError::AllBlackImage) => rejected.push(r.id.clone()),
            Err(e) => return Err(e.into()),
        }
    }
    if let Some(splits) = &mut out.split_assignment {
        splits.retain(|id, _| !rejected.contains(id));
    }
    out.save(out_dir.join("manifest.jsonl"))?;
    Ok(serde_json::json!({
        "preprocess": cfg,
        "written": out.records.len(),
        "rejected_all_black": rejected,
        "manifest": out_dir.join("manifest.jsonl"),
    }))
}

pub fn run(cli: Cli) -> Result<()> {
    let resolved = Resolved::new(&cli, env_var)?;
    let _ = env_logger::Builder::new()
        .parse_filters(&resolved.log_level)
        .try_init();
    match cli.command {
        Command::Preprocess {
            manifest,
            target_size,
        } => {
            let report = preprocess_command(&resolved, &manifest, target_size)?;
            resolved.emit("preprocess", &report)?;
        }
        Command::Split {
            manifest,
            counts,
            fractions,
            output,
        } => {
            let m = load_manifest(&manifest)?;
            let three = |n: usize| {
                if n == 3 {
                    Ok(())
                } else {
                    Err(CliError::Config(format!(
                        "split needs three sizes, got {n}"
                    )))
                }
            };
            let spec = match (counts, fractions) {
                (Some(c), _) => {
                    three(c.len())?;
                    SplitSpec::counts(c[0], c[1], c[2], resolved.seed)
                }
                (None, Some(f)) => {
                    three(f.len())?;
                    SplitSpec::fractions(f[0], f[1], f[2], resolved.seed)
                }
                (None, None) => resolved
                    .file
                    .split
                    .clone()
                    .unwrap_or_else(|| default_split(resolved.seed)),
            };
            let split = stratified_split(&m, &spec)?;
            split.save(&output)?;
            let sizes = split.split_sizes();
            resolved.emit(
                "split",
                &serde_json::json!({"train": sizes[0], "validation": sizes[1], "test": sizes[2], "output": output}),
            )?;
        }
        Command::Synth {
            n,
            image_size,
            trinary,
            binary,
        } => {
            let mut cfg = resolved.file.synth.clone().unwrap_or_default();
            if let Some(s) = image_size {
                cfg.image_size = s;
            }
            cfg.with_trinary |= trinary;
            cfg.with_binary |= binary;
            let dir = resolved.out_dir.join("synth");
            let corpus = synth_corpus(&cfg, n, resolved.seed, &dir)?;
            let path = dir.join("manifest.jsonl");
            corpus.manifest.save(&path)?;
            resolved.emit(
                "synth",
                &serde_json::json!({"records": n, "manifest": path}),
            )?;
        }
        Command::Pretrain { manifest, train } => {
            let m = load_manifest(&manifest)?;
            let c = resolved.train_config(ModelStage::Pretrain, &train);
            let out = pretrain_classification(
                &resolved.model(),
                &resolved.preprocess(),
                &m,
                &c,
                &resolved.env(&manifest_root(&manifest)),
            )?;
            println!("{}", serde_json::to_string_pretty(&out.report)?);
        }
        Command::Train {
            manifest,
            init,
            train,
        } => {
            let m = load_manifest(&manifest)?;
            let c = resolved.train_config(ModelStage::Regression, &train);
            let init = match init {
                Some(p) => RegressionInit::Checkpoint(p),
                None => RegressionInit::Random {
                    model: resolved.model(),
                    preprocess: resolved.preprocess(),
                },
            };
            let out = train_regression(&init, &m, &c, &resolved.env(&manifest_root(&manifest)))?;
            println!("{}", serde_json::to_string_pretty(&out.report)?);
        }
        Command::PseudoLabel {
            teacher,
            manifest,
            output,
        } => {
            let m = load_manifest(&manifest)?;
            let pseudo = generate_pseudo_labels(&teacher, &m, &manifest_root(&manifest))?;
            let pseudo = rebase_uris(pseudo, &manifest_root(&manifest), &manifest_root(&output));
            pseudo.save(&output)?;
            resolved.emit(
                "pseudo-label",
                &serde_json::json!({"records": pseudo.len(), "output": output}),
            )?;
        }
        Command::TrainStudent {
            teacher,
            labeled,
            pseudo,
            train,
        } => {
            let l = load_manifest(&labeled)?;
            let p = load_manifest(&pseudo)?;
            let p = rebase_uris(p, &manifest_root(&pseudo), &manifest_root(&labeled));
            let c = resolved.train_config(ModelStage::Student, &train);
            let out = train_student(
                &teacher,
                &l,
                &p,
                &c,
                &resolved.env(&manifest_root(&labeled)),
            )?;
            println!("{}", serde_json::to_string_pretty(&out.report)?);
        }
        Command::Evaluate {
            checkpoint,
            manifest,
            split,
            compare,
        } => {
            let out = evaluate(&resolved, &checkpoint, &manifest, split, compare.as_deref())?;
            resolved.emit("evaluate", &out)?;
        }
        Command::ExternalEval {
            checkpoint,
            manifest,
            threshold,
            sweep,
        } => {
            let out = external_eval(
                &resolved,
                &checkpoint,
                &manifest,
                threshold.unwrap_or(DEFAULT_THRESHOLD),
                sweep,
            )?;
            resolved.emit("external-eval", &out)?;
        }
        Command::Gradcam {
            checkpoint,
            image,
            layer,
            alpha,
            invert,
            npy,
        } => {
            let (model, _) = load_checkpoint(&checkpoint)?;
            let input = preprocess(&ImageTensor::open(&image)?, model.preprocess_config())?;
            let mut heatmap = grad_cam(&model, &input, layer.as_deref(), CamOptions { invert })?;
            let stem = image
                .file_stem()
                .map_or("image".into(), |s| s.to_string_lossy().into_owned());
            heatmap.image_ref = stem.clone();
            fs::create_dir_all(&resolved.out_dir)?;
            let png = resolved.out_dir.join(format!("gradcam-{stem}.png"));
            let npy_path = npy.then(|| resolved.out_dir.join(format!("gradcam-{stem}.npy")));
            write_cam_artifacts(&heatmap, &input, alpha, &png, npy_path.as_deref())?;
            resolved.emit(
                "gradcam",
                &serde_json::json!({"layer": heatmap.source_layer, "overlay": png, "heatmap": npy_path}),
            )?;
        }
        Command::Serve {
            listen,
            checkpoint,
            scale,
            queue,
            annotation_log,
        } => {
            let mut cfg = resolved.file.service.clone().unwrap_or_default();
            cfg.apply_env(env_var)?;
            if let Some(v) = listen {
                cfg.listen = v;
            }
            if let Some(v) = checkpoint {
                cfg.checkpoint = Some(v);
            }
            if let Some(v) = scale {
                cfg.scale = Some(v);
            }
            if let Some(v) = queue {
                cfg.queue_manifest = Some(v);
            }
            if let Some(v) = annotation_log {
                cfg.annotation_log = v;
            }
            let rt = tokio::runtime::Runtime::new()?;
            rt.block_on(serve(cfg))?;
        }
        Command::ExportLabels {
            log,
            policy,
            queue,
            output,
        } => {
            let policy = match policy {
                Some(PolicyArg::Average) => ExportPolicy::Average,
                Some(PolicyArg::LatestWins) => ExportPolicy::LatestWins,
                None => resolved
                    .file
                    .service
                    .as_ref()
                    .map(|s| s.export_policy)
                    .unwrap_or_default(),
            };
            let records = AnnotationLog::open(&log)?.records().to_vec();
            let catalog = queue.as_ref().map(load_manifest).transpose()?;
            let manifest = export_labels(&records, policy, catalog.as_ref());
            manifest.save(&output)?;
            resolved.emit(
                "export-labels",
                &serde_json::json!({"annotations": records.len(), "records": manifest.len(), "policy": policy, "output": output}),
            )?;
        }
        Command::Pipeline => {
            let report = pipeline(&resolved)?;
            resolved.emit("pipeline", &report)?;
        }
    }
    Ok(())
}

/// Parses the process arguments and runs; errors go to stderr with a
/// nonzero exit status.
pub fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            let mut source = std::error::Error::source(&e);
            while let Some(s) = source {
                eprintln!("  caused by: {s}");
                source = s.source();
            }
            ExitCode::FAILURE
        }
    }
}
