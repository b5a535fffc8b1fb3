//! The three development stages: classification pre-training, regression
//! fine-tuning, and teacher/student training on pseudo-labels.

use std::collections::{BTreeSet, HashMap};
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use candle_core::{DType, Device, Tensor};
use candle_nn::{AdamW, Optimizer, ParamsAdamW};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::datasets::{
    merge_pseudo, resolve_uri, DatasetError, DatasetManifest, FundusRecord, MergePolicy,
    QualityScore, Split,
};
use crate::imaging::{preprocess, ImageTensor, ImagingError, PreprocessConfig};
use crate::qmodel::{
    build_model, images_to_tensor, load_checkpoint, predict_scores, save_checkpoint, HeadKind,
    MetricsSnapshot, ModelCheckpoint, ModelConfig, ModelError, ModelStage, QualityModel,
};

const RMSE_EPS: f64 = 1e-8;
const EVAL_BATCH: usize = 64;

#[derive(Debug, Error)]
pub enum TrainingError {
    #[error("record {id} lacks a {kind} label")]
    MissingLabels { id: String, kind: &'static str },
    #[error("{0:?} split is empty")]
    EmptySplit(Split),
    #[error("manifest has no split assignment")]
    MissingSplit,
    #[error("checkpoint stage is {found}, expected {expected}")]
    WrongStage {
        expected: &'static str,
        found: ModelStage,
    },
    #[error("invalid training config: {0}")]
    InvalidConfig(String),
    #[error("image {id}: {source}")]
    Image { id: String, source: ImagingError },
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Candle(#[from] candle_core::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, TrainingError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    CategoricalCrossEntropy,
    Rmse,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StudentInit {
    #[default]
    Teacher,
    Random,
    /// Stage-I weights with a fresh regression head; needs `pretrain_checkpoint`.
    Pretrain,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub loss: LossKind,
    pub optimizer: AdamConfig,
    pub batch_size: usize,
    pub max_epochs: usize,
    /// Epochs without validation improvement before stopping.
    pub patience: usize,
    pub seed: u64,
    /// Leading backbone stages excluded from optimization.
    pub freeze_stages: usize,
    pub student_init: StudentInit,
    pub pretrain_checkpoint: Option<PathBuf>,
    pub merge_policy: MergePolicy,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            loss: LossKind::Rmse,
            optimizer: AdamConfig::default(),
            batch_size: 32,
            max_epochs: 100,
            patience: 10,
            seed: 0,
            freeze_stages: 0,
            student_init: StudentInit::default(),
            pretrain_checkpoint: None,
            merge_policy: MergePolicy::default(),
        }
    }
}

impl TrainConfig {
    pub fn classification() -> Self {
        Self {
            loss: LossKind::CategoricalCrossEntropy,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let o = &self.optimizer;
        if !(o.learning_rate > 0.0) {
            return Err(TrainingError::InvalidConfig(
                "learning_rate must be > 0".into(),
            ));
        }
        if !(0.0..1.0).contains(&o.beta1) || !(0.0..1.0).contains(&o.beta2) || !(o.epsilon > 0.0) {
            return Err(TrainingError::InvalidConfig(
                "Adam betas must be in [0, 1) and epsilon > 0".into(),
            ));
        }
        if self.batch_size == 0 {
            return Err(TrainingError::InvalidConfig(
                "batch_size must be >= 1".into(),
            ));
        }
        if self.max_epochs == 0 {
            return Err(TrainingError::InvalidConfig(
                "max_epochs must be >= 1".into(),
            ));
        }
        Ok(())
    }

    fn expect_loss(&self, loss: LossKind) -> Result<()> {
        if self.loss != loss {
            return Err(TrainingError::InvalidConfig(format!(
                "this stage trains with {loss:?}, config says {:?}",
                self.loss
            )));
        }
        Ok(())
    }
}

/// Where a stage reads images from and writes artifacts to.
#[derive(Debug, Clone)]
pub struct TrainEnv {
    /// Base directory for relative image URIs.
    pub image_root: PathBuf,
    pub out_dir: PathBuf,
    /// Record ids used for gradient steps are collected when set.
    pub audit: bool,
}

impl TrainEnv {
    pub fn new(image_root: impl Into<PathBuf>, out_dir: impl Into<PathBuf>) -> Self {
        Self {
            image_root: image_root.into(),
            out_dir: out_dir.into(),
            audit: false,
        }
    }

    pub fn with_audit(mut self) -> Self {
        self.audit = true;
        self
    }

    pub fn artifact(&self, stage: ModelStage, seed: u64, ext: &str) -> PathBuf {
        self.out_dir.join(format!("{stage}-{seed}.{ext}"))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_objective: f64,
    pub wall_time: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageReport {
    pub stage: ModelStage,
    pub seed: u64,
    pub epochs_run: usize,
    pub best_epoch: usize,
    /// `accuracy` (maximized) or `mae` (minimized).
    pub objective: String,
    pub best_validation_objective: f64,
    pub checkpoint: PathBuf,
    pub model_version: String,
    pub train_records: usize,
    pub validation_records: usize,
    pub history: Vec<EpochRecord>,
    pub wall_time: f64,
}

#[derive(Debug)]
pub struct StageOutput {
    pub model: QualityModel,
    pub checkpoint: ModelCheckpoint,
    pub report: StageReport,
    /// Ids of every record that contributed to a gradient step; empty
    /// unless auditing is enabled.
    pub audit: BTreeSet<String>,
}

/// Loads and preprocesses the images of `records`.
pub fn load_images(
    records: &[&FundusRecord],
    image_root: &Path,
    config: &PreprocessConfig,
) -> Result<Vec<ImageTensor>> {
    records
        .iter()
        .map(|r| {
            let path = resolve_uri(image_root, &r.image_uri);
            let wrap = |source| TrainingError::Image {
                id: r.id.clone(),
                source,
            };
            let raw = ImageTensor::open(&path).map_err(wrap)?;
            preprocess(&raw, config).map_err(wrap)
        })
        .collect()
}

#[derive(Clone, Copy)]
enum Task {
    Classify,
    Regress,
}

struct Example {
    id: String,
    image: ImageTensor,
    class: u32,
    score: f32,
}

fn split_records(manifest: &DatasetManifest, split: Split) -> Result<Vec<&FundusRecord>> {
    if manifest.split_assignment.is_none() {
        return Err(TrainingError::MissingSplit);
    }
    let records: Vec<&FundusRecord> = manifest.records_in(split).collect();
    if records.is_empty() {
        return Err(TrainingError::EmptySplit(split));
    }
    Ok(records)
}

fn examples(
    records: &[&FundusRecord],
    task: Task,
    env: &TrainEnv,
    pre: &PreprocessConfig,
) -> Result<Vec<Example>> {
    for r in records {
        let present = match task {
            Task::Classify => r.trinary.is_some(),
            Task::Regress => r.quality.is_some(),
        };
        if !present {
            return Err(TrainingError::MissingLabels {
                id: r.id.clone(),
                kind: match task {
                    Task::Classify => "trinary",
                    Task::Regress => "quality",
                },
            });
        }
    }
    let images = load_images(records, &env.image_root, pre)?;
    Ok(records
        .iter()
        .zip(images)
        .map(|(r, image)| Example {
            id: r.id.clone(),
            image,
            class: r.trinary.map_or(0, |t| t.index() as u32),
            score: r.quality.map_or(0.0, |q| q.value() as f32),
        })
        .collect())
}

/// Per-batch RMSE with a small epsilon under the root.
pub fn rmse_loss(pred: &Tensor, target: &Tensor) -> candle_core::Result<Tensor> {
    (pred
        .flatten_all()?
        .sub(&target.flatten_all()?)?
        .sqr()?
        .mean_all()?
        + RMSE_EPS)?
        .sqrt()
}

fn batch_tensors(model: &QualityModel, batch: &[&Example], task: Task) -> Result<(Tensor, Tensor)> {
    let images: Vec<ImageTensor> = batch.iter().map(|e| e.image.clone()).collect();
    let x = images_to_tensor(&images, model.config().input_size)?;
    let y = match task {
        Task::Classify => Tensor::from_vec(
            batch.iter().map(|e| e.class).collect(),
            batch.len(),
            &Device::Cpu,
        )?,
        Task::Regress => Tensor::from_vec(
            batch.iter().map(|e| e.score).collect(),
            batch.len(),
            &Device::Cpu,
        )?,
    };
    Ok((x, y))
}

fn batch_loss(
    model: &QualityModel,
    x: &Tensor,
    y: &Tensor,
    task: Task,
    train: bool,
) -> Result<Tensor> {
    let out = model.forward_t(x, train)?;
    Ok(match task {
        Task::Classify => candle_nn::loss::cross_entropy(&out, y)?,
        Task::Regress => rmse_loss(&out, y)?,
    })
}

/// Validation accuracy (classification) or MAE (regression), inference mode.
fn evaluate(model: &QualityModel, data: &[Example], task: Task) -> Result<f64> {
    let mut hits = 0.0;
    let mut abs_err = 0.0;
    for chunk in data.chunks(EVAL_BATCH) {
        let refs: Vec<&Example> = chunk.iter().collect();
        let (x, y) = batch_tensors(model, &refs, task)?;
        let out = model.forward_t(&x, false)?;
        match task {
            Task::Classify => {
                let pred = out.argmax(1)?.to_vec1::<u32>()?;
                let truth = y.to_vec1::<u32>()?;
                hits += pred.iter().zip(&truth).filter(|(a, b)| a == b).count() as f64;
            }
            Task::Regress => {
                let pred = out.flatten_all()?.to_vec1::<f32>()?;
                let truth = y.to_vec1::<f32>()?;
                abs_err += pred
                    .iter()
                    .zip(&truth)
                    .map(|(p, t)| (p - t).abs() as f64)
                    .sum::<f64>();
            }
        }
    }
    let n = data.len() as f64;
    Ok(match task {
        Task::Classify => hits / n,
        Task::Regress => abs_err / n,
    })
}

struct FitResult {
    history: Vec<EpochRecord>,
    best_epoch: usize,
    best: f64,
    audit: BTreeSet<String>,
}

fn fit(
    model: &QualityModel,
    train: &[Example],
    val: &[Example],
    task: Task,
    config: &TrainConfig,
    audit: bool,
) -> Result<FitResult> {
    let vars = model.trainable_vars(config.freeze_stages);
    let o = config.optimizer;
    let mut opt = AdamW::new(
        vars,
        ParamsAdamW {
            lr: o.learning_rate,
            beta1: o.beta1,
            beta2: o.beta2,
            eps: o.epsilon,
            weight_decay: 0.0,
        },
    )?;
    let better = |new: f64, best: f64| match task {
        Task::Classify => new > best,
        Task::Regress => new < best,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut history = Vec::new();
    let mut best: Option<(usize, f64, _)> = None;
    let mut seen = BTreeSet::new();
    let start = Instant::now();
    for epoch in 0..config.max_epochs {
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        for idx in order.chunks(config.batch_size) {
            let batch: Vec<&Example> = idx.iter().map(|&i| &train[i]).collect();
            if audit {
                seen.extend(batch.iter().map(|e| e.id.clone()));
            }
            let (x, y) = batch_tensors(model, &batch, task)?;
            let loss = batch_loss(model, &x, &y, task, true)?;
            opt.backward_step(&loss)?;
            loss_sum += loss.to_dtype(DType::F64)?.to_scalar::<f64>()? * batch.len() as f64;
        }
        let objective = evaluate(model, val, task)?;
        let record = EpochRecord {
            epoch,
            train_loss: loss_sum / train.len() as f64,
            val_objective: objective,
            wall_time: start.elapsed().as_secs_f64(),
        };
        log::info!(
            "epoch {epoch}: train_loss {:.4} val {:.4}",
            record.train_loss,
            record.val_objective
        );
        history.push(record);
        match &best {
            Some((_, b, _)) if !better(objective, *b) => {}
            _ => best = Some((epoch, objective, model.snapshot()?)),
        }
        let best_epoch = best.as_ref().map_or(0, |b| b.0);
        if epoch - best_epoch > config.patience {
            log::info!("early stop at epoch {epoch}; best epoch {best_epoch}");
            break;
        }
    }
    let (best_epoch, best_value, snapshot) = best.expect("at least one epoch");
    model.restore(&snapshot)?;
    Ok(FitResult {
        history,
        best_epoch,
        best: best_value,
        audit: seen,
    })
}

fn write_history(path: &Path, history: &[EpochRecord]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in history {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn run_stage(
    model: QualityModel,
    stage: ModelStage,
    manifest: &DatasetManifest,
    task: Task,
    config: &TrainConfig,
    env: &TrainEnv,
) -> Result<StageOutput> {
    let started = Instant::now();
    let train_records = split_records(manifest, Split::Train)?;
    let val_records = split_records(manifest, Split::Validation)?;
    let pre = model.preprocess_config().clone();
    let train = examples(&train_records, task, env, &pre)?;
    let val = examples(&val_records, task, env, &pre)?;
    let fit = fit(&model, &train, &val, task, config, env.audit)?;

    fs::create_dir_all(&env.out_dir)?;
    let ckpt_path = env.artifact(stage, config.seed, "ckpt");
    let objective = match task {
        Task::Classify => "accuracy",
        Task::Regress => "mae",
    };
    let checkpoint = save_checkpoint(
        &model,
        stage,
        Some(MetricsSnapshot {
            objective: objective.into(),
            value: fit.best,
            epoch: fit.best_epoch,
        }),
        &ckpt_path,
    )?;
    write_history(&env.artifact(stage, config.seed, "csv"), &fit.history)?;
    let report = StageReport {
        stage,
        seed: config.seed,
        epochs_run: fit.history.len(),
        best_epoch: fit.best_epoch,
        objective: objective.into(),
        best_validation_objective: fit.best,
        checkpoint: ckpt_path,
        model_version: checkpoint.content_hash.clone(),
        train_records: train.len(),
        validation_records: val.len(),
        history: fit.history,
        wall_time: started.elapsed().as_secs_f64(),
    };
    fs::write(
        env.artifact(stage, config.seed, "json"),
        serde_json::to_string_pretty(&report)?,
    )?;
    Ok(StageOutput {
        model,
        checkpoint,
        report,
        audit: fit.audit,
    })
}

/// Stage I: trains a 3-class head with categorical cross-entropy and keeps
/// the epoch with the best validation accuracy.
pub fn pretrain_classification(
    model_config: &ModelConfig,
    preprocess: &PreprocessConfig,
    manifest: &DatasetManifest,
    config: &TrainConfig,
    env: &TrainEnv,
) -> Result<StageOutput> {
    config.validate()?;
    config.expect_loss(LossKind::CategoricalCrossEntropy)?;
    let mut mc = model_config.clone();
    mc.head = HeadKind::Classify3;
    let model = build_model(&mc, preprocess)?;
    run_stage(
        model,
        ModelStage::Pretrain,
        manifest,
        Task::Classify,
        config,
        env,
    )
}

/// Starting point for stage II.
#[derive(Debug, Clone)]
pub enum RegressionInit {
    /// A stage-I checkpoint; its head is replaced.
    Checkpoint(PathBuf),
    /// Random weights (ablation without pre-training).
    Random {
        model: ModelConfig,
        preprocess: PreprocessConfig,
    },
}

fn require_stage(meta: &ModelCheckpoint, expected: ModelStage) -> Result<()> {
    if meta.stage != expected {
        return Err(TrainingError::WrongStage {
            expected: match expected {
                ModelStage::Pretrain => "pretrain",
                ModelStage::Regression => "regression",
                ModelStage::Student => "student",
            },
            found: meta.stage,
        });
    }
    Ok(())
}

fn regression_model(init: &RegressionInit, seed: u64) -> Result<QualityModel> {
    match init {
        RegressionInit::Checkpoint(path) => {
            let (mut model, meta) = load_checkpoint(path)?;
            require_stage(&meta, ModelStage::Pretrain)?;
            model.swap_head_regression(seed)?;
            Ok(model)
        }
        RegressionInit::Random { model, preprocess } => {
            let mut mc = model.clone();
            mc.head = HeadKind::Regress1;
            mc.seed = seed;
            Ok(build_model(&mc, preprocess)?)
        }
    }
}

/// Stage II: fresh regression head, per-batch RMSE loss, checkpoint chosen
/// by validation MAE.
pub fn train_regression(
    init: &RegressionInit,
    manifest: &DatasetManifest,
    config: &TrainConfig,
    env: &TrainEnv,
) -> Result<StageOutput> {
    config.validate()?;
    config.expect_loss(LossKind::Rmse)?;
    let model = regression_model(init, config.seed)?;
    run_stage(
        model,
        ModelStage::Regression,
        manifest,
        Task::Regress,
        config,
        env,
    )
}

/// Scores every record with the teacher. Labels are clamped to `[1, 10]`
/// and kept continuous.
pub fn generate_pseudo_labels(
    teacher: &Path,
    unlabeled: &DatasetManifest,
    image_root: &Path,
) -> Result<DatasetManifest> {
    let (model, meta) = load_checkpoint(teacher)?;
    require_stage(&meta, ModelStage::Regression)?;
    pseudo_label_with(&model, unlabeled, image_root)
}

/// Pseudo-labels `unlabeled` with an in-memory regression model.
pub fn pseudo_label_with(
    model: &QualityModel,
    unlabeled: &DatasetManifest,
    image_root: &Path,
) -> Result<DatasetManifest> {
    let mut records = Vec::with_capacity(unlabeled.len());
    for chunk in unlabeled.records.chunks(EVAL_BATCH) {
        let refs: Vec<&FundusRecord> = chunk.iter().collect();
        let images = load_images(&refs, image_root, model.preprocess_config())?;
        let scores = predict_scores(model, &images)?;
        for (r, s) in chunk.iter().zip(scores) {
            let mut r = r.clone();
            r.quality = Some(QualityScore::clamped(s as f64));
            r.pseudo = true;
            records.push(r);
        }
    }
    let mut out = DatasetManifest::new(format!("{}-pseudo", unlabeled.header.source), records);
    out.split_assignment = None;
    Ok(out)
}

/// Stage III: merges labeled and pseudo-labeled data and trains a student,
/// selected by validation MAE.
pub fn train_student(
    teacher: &Path,
    labeled: &DatasetManifest,
    pseudo: &DatasetManifest,
    config: &TrainConfig,
    env: &TrainEnv,
) -> Result<StageOutput> {
    config.validate()?;
    config.expect_loss(LossKind::Rmse)?;
    let (teacher_model, meta) = load_checkpoint(teacher)?;
    require_stage(&meta, ModelStage::Regression)?;
    let merged = merge_pseudo(labeled, pseudo, &config.merge_policy)?;
    let model = match config.student_init {
        StudentInit::Teacher => teacher_model,
        StudentInit::Random => {
            let mut m = teacher_model;
            m.reinitialize(config.seed)?;
            m
        }
        StudentInit::Pretrain => {
            let path = config.pretrain_checkpoint.clone().ok_or_else(|| {
                TrainingError::InvalidConfig(
                    "student_init=pretrain needs pretrain_checkpoint".into(),
                )
            })?;
            regression_model(&RegressionInit::Checkpoint(path), config.seed)?
        }
    };
    run_stage(
        model,
        ModelStage::Student,
        &merged,
        Task::Regress,
        config,
        env,
    )
}

/// Record ids, predicted scores and reference scores where labeled.
pub type SplitPredictions = (Vec<String>, Vec<f64>, Vec<Option<f64>>);

/// Scores the records of `split` and returns `(ids, predicted, reference)`.
pub fn predict_split(
    model: &QualityModel,
    manifest: &DatasetManifest,
    split: Option<Split>,
    image_root: &Path,
) -> Result<SplitPredictions> {
    let records: Vec<&FundusRecord> = match split {
        Some(s) => manifest.records_in(s).collect(),
        None => manifest.records.iter().collect(),
    };
    let mut ids = Vec::with_capacity(records.len());
    let mut predicted = Vec::with_capacity(records.len());
    let mut reference = Vec::with_capacity(records.len());
    for chunk in records.chunks(EVAL_BATCH) {
        let images = load_images(chunk, image_root, model.preprocess_config())?;
        let scores = predict_scores(model, &images)?;
        for (r, s) in chunk.iter().zip(scores) {
            ids.push(r.id.clone());
            predicted.push(s as f64);
            reference.push(r.quality.map(|q| q.value()));
        }
    }
    Ok((ids, predicted, reference))
}

/// Preprocessed images keyed by record id, for repeated evaluation.
pub fn image_cache(
    manifest: &DatasetManifest,
    image_root: &Path,
    config: &PreprocessConfig,
) -> Result<HashMap<String, ImageTensor>> {
    let refs: Vec<&FundusRecord> = manifest.records.iter().collect();
    let images = load_images(&refs, image_root, config)?;
    Ok(refs.iter().map(|r| r.id.clone()).zip(images).collect())
}
