//! The quality network: a convolutional backbone with a swappable head
//! (3-class classification for pre-training, single-output regression for
//! scoring), plus checkpoint serialization and ONNX export.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::io::Write;
use std::path::Path;

use candle_core::{Device, Tensor, Var};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::imaging::{ImageTensor, PreprocessConfig, CHANNELS};

pub mod backbone;
pub mod layers;
pub mod onnx;

use backbone::{NamedStage, INCEPTION_MIN_INPUT};
use layers::{global_avg_pool, Init, Linear, ParamStore};

pub const IMAGENET_WEIGHTS_ENV: &str = "FUNDUSQ_IMAGENET_WEIGHTS";
const CHECKPOINT_MAGIC: &[u8; 8] = b"FUNDUSQ\x01";
const CHECKPOINT_FORMAT: u32 = 1;
/// Initial regression output: the midpoint of the grading scale.
const REGRESSION_BIAS_INIT: f64 = 5.5;
const PREDICT_CHUNK: usize = 64;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("unsupported model config: {0}")]
    UnsupportedConfig(String),
    #[error("operation requires a {expected} head")]
    WrongHead { expected: HeadKind },
    #[error("input shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("corrupt checkpoint: {0}")]
    Corrupt(String),
    #[error("unknown layer {0}")]
    UnknownLayer(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Candle(#[from] candle_core::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, ModelError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackboneKind {
    InceptionV3Like,
    SmallCnnTest,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadKind {
    Classify3,
    Regress1,
}

impl std::fmt::Display for HeadKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            HeadKind::Classify3 => "classify3",
            HeadKind::Regress1 => "regress1",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum PretrainedInit {
    #[default]
    Random,
    Imagenet,
    Checkpoint,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub backbone: BackboneKind,
    #[serde(default = "default_input_size")]
    pub input_size: usize,
    pub head: HeadKind,
    #[serde(default)]
    pub pretrained_init: PretrainedInit,
    #[serde(default)]
    pub seed: u64,
    /// Width of the fully-connected layer feeding the regression neuron.
    #[serde(default = "default_hidden")]
    pub regression_hidden: usize,
}

fn default_input_size() -> usize {
    224
}

fn default_hidden() -> usize {
    256
}

impl ModelConfig {
    pub fn new(backbone: BackboneKind, head: HeadKind, input_size: usize) -> Self {
        Self {
            backbone,
            input_size,
            head,
            pretrained_init: PretrainedInit::Random,
            seed: 0,
            regression_hidden: default_hidden(),
        }
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelStage {
    Pretrain,
    Regression,
    Student,
}

impl std::fmt::Display for ModelStage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            ModelStage::Pretrain => "pretrain",
            ModelStage::Regression => "regression",
            ModelStage::Student => "student",
        })
    }
}

enum Head {
    Classify(Linear),
    Regress { hidden: Linear, out: Linear },
}

impl Head {
    fn kind(&self) -> HeadKind {
        match self {
            Head::Classify(_) => HeadKind::Classify3,
            Head::Regress { .. } => HeadKind::Regress1,
        }
    }

    fn build(
        store: &mut ParamStore,
        kind: HeadKind,
        features: usize,
        hidden: usize,
    ) -> Result<Self> {
        Ok(match kind {
            HeadKind::Classify3 => Head::Classify(Linear::new(store, "head.fc", features, 3)?),
            HeadKind::Regress1 => Head::Regress {
                hidden: Linear::new(store, "head.hidden", features, hidden)?,
                out: Linear::with_bias(
                    store,
                    "head.out",
                    hidden,
                    1,
                    Init::Const(REGRESSION_BIAS_INIT),
                )?,
            },
        })
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        match self {
            Head::Classify(fc) => fc.forward(x),
            Head::Regress { hidden, out } => out.forward(&hidden.forward(x)?.relu()?),
        }
    }
}

/// A backbone plus head, with the preprocessing its inputs must follow.
pub struct QualityModel {
    config: ModelConfig,
    preprocess: PreprocessConfig,
    store: ParamStore,
    stages: Vec<NamedStage>,
    head: Head,
    feature_dim: usize,
}

impl std::fmt::Debug for QualityModel {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("QualityModel")
            .field("config", &self.config)
            .field("preprocess", &self.preprocess)
            .field("params", &self.store.vars().len())
            .finish()
    }
}

fn assemble(
    config: ModelConfig,
    preprocess: PreprocessConfig,
    mut store: ParamStore,
) -> Result<QualityModel> {
    if config.input_size != preprocess.target_size {
        return Err(ModelError::UnsupportedConfig(format!(
            "input_size {} differs from preprocess target_size {}",
            config.input_size, preprocess.target_size
        )));
    }
    preprocess
        .validate()
        .map_err(|e| ModelError::UnsupportedConfig(e.to_string()))?;
    let (stages, feature_dim) = match config.backbone {
        BackboneKind::SmallCnnTest => backbone::small_cnn(&mut store)?,
        BackboneKind::InceptionV3Like => {
            if config.input_size < INCEPTION_MIN_INPUT {
                return Err(ModelError::UnsupportedConfig(format!(
                    "inception_v3_like needs input_size >= {INCEPTION_MIN_INPUT}"
                )));
            }
            backbone::inception_v3(&mut store)?
        }
    };
    if config.regression_hidden == 0 {
        return Err(ModelError::UnsupportedConfig(
            "regression_hidden must be >= 1".into(),
        ));
    }
    let head = Head::build(
        &mut store,
        config.head,
        feature_dim,
        config.regression_hidden,
    )?;
    Ok(QualityModel {
        config,
        preprocess,
        store,
        stages,
        head,
        feature_dim,
    })
}

/// Builds a freshly initialized model. Random initialization is a pure
/// function of `config.seed`.
pub fn build_model(config: &ModelConfig, preprocess: &PreprocessConfig) -> Result<QualityModel> {
    match config.pretrained_init {
        PretrainedInit::Random => assemble(
            config.clone(),
            preprocess.clone(),
            ParamStore::seeded(config.seed),
        ),
        PretrainedInit::Imagenet => {
            let path = std::env::var(IMAGENET_WEIGHTS_ENV).map_err(|_| {
                ModelError::UnsupportedConfig(format!(
                    "ImageNet weights unavailable: set {IMAGENET_WEIGHTS_ENV} to a safetensors file with backbone.* tensors"
                ))
            })?;
            let random = assemble(
                config.clone(),
                preprocess.clone(),
                ParamStore::seeded(config.seed),
            )?;
            let loaded = candle_core::safetensors::load(path, &Device::Cpu)?;
            for (name, var) in random.store.vars() {
                if let Some(t) = loaded.get(name).filter(|_| name.starts_with("backbone.")) {
                    if t.dims() != var.dims() {
                        return Err(ModelError::UnsupportedConfig(format!(
                            "ImageNet tensor {name} has shape {:?}",
                            t.dims()
                        )));
                    }
                    var.set(&t.to_dtype(candle_core::DType::F32)?)?;
                }
            }
            Ok(random)
        }
        PretrainedInit::Checkpoint => Err(ModelError::UnsupportedConfig(
            "checkpoint initialization goes through load_checkpoint".into(),
        )),
    }
}

/// Stacks normalized images into an `(N, 3, H, W)` tensor.
pub fn images_to_tensor(images: &[ImageTensor], size: usize) -> Result<Tensor> {
    let mut data: Vec<f32> = Vec::with_capacity(images.len() * CHANNELS * size * size);
    for (i, img) in images.iter().enumerate() {
        if !img.is_normalized() {
            return Err(ModelError::ShapeMismatch(format!(
                "input {i} is not normalized; run the checkpoint's preprocessing first"
            )));
        }
        if img.height() != size || img.width() != size {
            return Err(ModelError::ShapeMismatch(format!(
                "input {i} is {}x{}, model expects {size}x{size}",
                img.height(),
                img.width()
            )));
        }
        // HWC -> CHW
        let px = img.data();
        for c in 0..CHANNELS {
            data.extend(px.iter().skip(c).step_by(CHANNELS));
        }
    }
    Ok(Tensor::from_vec(
        data,
        (images.len(), CHANNELS, size, size),
        &Device::Cpu,
    )?)
}

impl QualityModel {
    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn preprocess_config(&self) -> &PreprocessConfig {
        &self.preprocess
    }

    pub fn head_kind(&self) -> HeadKind {
        self.head.kind()
    }

    pub fn feature_dim(&self) -> usize {
        self.feature_dim
    }

    pub fn layer_names(&self) -> Vec<&'static str> {
        self.stages.iter().map(|s| s.name).collect()
    }

    /// Last backbone stage, the default Grad-CAM target.
    pub fn last_layer(&self) -> &'static str {
        self.stages.last().expect("backbone has stages").name
    }

    fn stage_index(&self, layer: &str) -> Result<usize> {
        self.stages
            .iter()
            .position(|s| s.name == layer)
            .ok_or_else(|| ModelError::UnknownLayer(layer.to_string()))
    }

    fn run_stages(
        &self,
        mut x: Tensor,
        range: std::ops::Range<usize>,
        train: bool,
    ) -> Result<Tensor> {
        for s in &self.stages[range] {
            x = s.stage.forward_t(&x, train)?;
        }
        Ok(x)
    }

    /// Output of the named stage for an `(N, 3, H, W)` batch.
    pub fn feature_map(&self, x: &Tensor, layer: &str, train: bool) -> Result<Tensor> {
        let idx = self.stage_index(layer)?;
        self.run_stages(x.clone(), 0..idx + 1, train)
    }

    /// Runs the rest of the network from the output of `layer`.
    pub fn forward_from(&self, feature_map: &Tensor, layer: &str, train: bool) -> Result<Tensor> {
        let idx = self.stage_index(layer)?;
        let maps = self.run_stages(feature_map.clone(), idx + 1..self.stages.len(), train)?;
        self.head.forward(&global_avg_pool(&maps)?)
    }

    /// Globally pooled backbone features, `(N, feature_dim)`.
    pub fn backbone_features(&self, x: &Tensor, train: bool) -> Result<Tensor> {
        global_avg_pool(&self.run_stages(x.clone(), 0..self.stages.len(), train)?)
    }

    /// Raw head output: `(N, 3)` logits or `(N, 1)` scores.
    pub fn forward_t(&self, x: &Tensor, train: bool) -> Result<Tensor> {
        self.head.forward(&self.backbone_features(x, train)?)
    }

    /// Parameters that receive gradients. The first `freeze_stages` backbone
    /// stages are excluded, as are batch-norm running statistics.
    pub fn trainable_vars(&self, freeze_stages: usize) -> Vec<Var> {
        let frozen: Vec<String> = self
            .stages
            .iter()
            .take(freeze_stages)
            .map(|s| format!("backbone.{}.", s.name))
            .collect();
        self.store
            .vars()
            .iter()
            .filter(|(k, _)| !k.ends_with("running_mean") && !k.ends_with("running_var"))
            .filter(|(k, _)| !frozen.iter().any(|p| k.starts_with(p)))
            .map(|(_, v)| v.clone())
            .collect()
    }

    pub fn snapshot(&self) -> Result<BTreeMap<String, Tensor>> {
        self.store.snapshot()
    }

    pub fn restore(&self, snapshot: &BTreeMap<String, Tensor>) -> Result<()> {
        self.store.restore(snapshot)
    }

    pub fn param_count(&self) -> usize {
        self.store.vars().values().map(|v| v.elem_count()).sum()
    }

    /// Replaces a classification head with a freshly initialized
    /// fully-connected layer feeding a single output neuron. Backbone
    /// parameters are untouched.
    pub fn swap_head_regression(&mut self, seed: u64) -> Result<()> {
        if self.head.kind() != HeadKind::Classify3 {
            return Err(ModelError::WrongHead {
                expected: HeadKind::Classify3,
            });
        }
        self.store.remove_prefix("head.");
        self.store.set_seed(seed);
        self.head = Head::build(
            &mut self.store,
            HeadKind::Regress1,
            self.feature_dim,
            self.config.regression_hidden,
        )?;
        self.config.head = HeadKind::Regress1;
        Ok(())
    }

    /// Re-draws every parameter from `seed`, keeping the architecture.
    pub fn reinitialize(&mut self, seed: u64) -> Result<()> {
        let mut config = self.config.clone();
        config.seed = seed;
        config.pretrained_init = PretrainedInit::Random;
        *self = assemble(config, self.preprocess.clone(), ParamStore::seeded(seed))?;
        Ok(())
    }

    /// Serialized weights (safetensors) and their SHA-256.
    fn weights_blob(&self) -> Result<(Vec<u8>, String)> {
        let snapshot = self.store.snapshot()?;
        let blob = safetensors::serialize(snapshot.iter(), None)
            .map_err(|e| ModelError::Corrupt(format!("serialize: {e}")))?;
        let hash = hex::encode(Sha256::digest(&blob));
        Ok((blob, hash))
    }

    /// Content hash of the current weights, used as the model version.
    pub fn weights_hash(&self) -> Result<String> {
        Ok(self.weights_blob()?.1)
    }

    /// Exports the inference graph to ONNX bytes.
    pub fn export_onnx(&self) -> Result<Vec<u8>> {
        let mut g = onnx::GraphBuilder::new();
        let mut y = "input".to_string();
        for s in &self.stages {
            y = s.stage.export(&mut g, &y)?;
        }
        y = g.node("GlobalAveragePool", "", vec![y], vec![]);
        y = g.node(
            "Flatten",
            "",
            vec![y],
            vec![onnx::GraphBuilder::int("axis", 1)],
        );
        let (out_name, width) = match &self.head {
            Head::Classify(fc) => {
                fc.export(&mut g, &y)?;
                ("logits", 3)
            }
            Head::Regress { hidden, out } => {
                let h = hidden.export(&mut g, &y)?;
                let r = g.node("Relu", "", vec![h], vec![]);
                out.export(&mut g, &r)?;
                ("score", 1)
            }
        };
        g.rename_last_output(out_name);
        let s = self.config.input_size as i64;
        let doc = serde_json::to_string(&self.preprocess)?;
        let model = g.finish(
            onnx::value_info("input", &[None, Some(3), Some(s), Some(s)]),
            onnx::value_info(out_name, &[None, Some(width)]),
            doc,
        );
        Ok(onnx::encode(&model))
    }
}

/// Scores a batch of preprocessed images with a regression model.
///
/// Inference mode: batch-norm uses running statistics, so each output
/// depends only on its own input.
pub fn predict_scores(model: &QualityModel, batch: &[ImageTensor]) -> Result<Vec<f32>> {
    if model.head_kind() != HeadKind::Regress1 {
        return Err(ModelError::WrongHead {
            expected: HeadKind::Regress1,
        });
    }
    let mut out = Vec::with_capacity(batch.len());
    for chunk in batch.chunks(PREDICT_CHUNK) {
        let x = images_to_tensor(chunk, model.config.input_size)?;
        let y = model
            .forward_t(&x, false)?
            .flatten_all()?
            .to_vec1::<f32>()?;
        out.extend(y);
    }
    if let Some(i) = out.iter().position(|v| !v.is_finite()) {
        return Err(ModelError::ShapeMismatch(format!(
            "non-finite score for input {i}"
        )));
    }
    Ok(out)
}

/// Class logits for a batch, `(N, 3)` row-major.
pub fn predict_logits(model: &QualityModel, batch: &[ImageTensor]) -> Result<Vec<[f32; 3]>> {
    if model.head_kind() != HeadKind::Classify3 {
        return Err(ModelError::WrongHead {
            expected: HeadKind::Classify3,
        });
    }
    let mut out = Vec::with_capacity(batch.len());
    for chunk in batch.chunks(PREDICT_CHUNK) {
        let x = images_to_tensor(chunk, model.config.input_size)?;
        for row in model.forward_t(&x, false)?.to_vec2::<f32>()? {
            out.push([row[0], row[1], row[2]]);
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsSnapshot {
    pub objective: String,
    pub value: f64,
    pub epoch: usize,
}

/// Checkpoint manifest entry: everything about a model except its weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelCheckpoint {
    pub format_version: u32,
    pub config: ModelConfig,
    pub preprocess: PreprocessConfig,
    pub stage: ModelStage,
    pub metrics_snapshot: Option<MetricsSnapshot>,
    pub created: String,
    /// SHA-256 of the weights blob; doubles as the model version.
    pub content_hash: String,
    pub weights_ref: String,
}

/// Writes `model` as a single checkpoint file (atomic rename).
///
/// Layout: 8-byte magic, u64 LE manifest length, manifest JSON, u64 LE blob
/// length, safetensors blob.
pub fn save_checkpoint(
    model: &QualityModel,
    stage: ModelStage,
    metrics_snapshot: Option<MetricsSnapshot>,
    path: impl AsRef<Path>,
) -> Result<ModelCheckpoint> {
    let path = path.as_ref();
    let (blob, hash) = model.weights_blob()?;
    let meta = ModelCheckpoint {
        format_version: CHECKPOINT_FORMAT,
        config: model.config.clone(),
        preprocess: model.preprocess.clone(),
        stage,
        metrics_snapshot,
        created: chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Secs, true),
        weights_ref: format!("inline:sha256:{hash}"),
        content_hash: hash,
    };
    let manifest = serde_json::to_vec(&meta)?;
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    let tmp = path.with_extension("ckpt.tmp");
    {
        let mut f = std::io::BufWriter::new(fs::File::create(&tmp)?);
        f.write_all(CHECKPOINT_MAGIC)?;
        f.write_all(&(manifest.len() as u64).to_le_bytes())?;
        f.write_all(&manifest)?;
        f.write_all(&(blob.len() as u64).to_le_bytes())?;
        f.write_all(&blob)?;
        f.flush()?;
        f.get_ref().sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(meta)
}

fn take<'a>(bytes: &mut &'a [u8], n: usize, what: &str) -> Result<&'a [u8]> {
    if bytes.len() < n {
        return Err(ModelError::Corrupt(format!("truncated {what}")));
    }
    let (head, rest) = bytes.split_at(n);
    *bytes = rest;
    Ok(head)
}

fn take_len(bytes: &mut &[u8], what: &str) -> Result<usize> {
    let raw = take(bytes, 8, what)?;
    Ok(u64::from_le_bytes(raw.try_into().expect("8 bytes")) as usize)
}

/// Reads only the manifest entry of a checkpoint, verifying the weights hash.
pub fn read_checkpoint_meta(bytes: &[u8]) -> Result<(ModelCheckpoint, &[u8])> {
    let mut rest = bytes;
    if take(&mut rest, CHECKPOINT_MAGIC.len(), "magic")? != CHECKPOINT_MAGIC {
        return Err(ModelError::Corrupt("bad magic".into()));
    }
    let mlen = take_len(&mut rest, "manifest length")?;
    let manifest = take(&mut rest, mlen, "manifest")?;
    let meta: ModelCheckpoint = serde_json::from_slice(manifest)
        .map_err(|e| ModelError::Corrupt(format!("manifest: {e}")))?;
    let blen = take_len(&mut rest, "weights length")?;
    let blob = take(&mut rest, blen, "weights")?;
    if !rest.is_empty() {
        return Err(ModelError::Corrupt("trailing bytes".into()));
    }
    let hash = hex::encode(Sha256::digest(blob));
    if hash != meta.content_hash {
        return Err(ModelError::Corrupt("content hash mismatch".into()));
    }
    Ok((meta, blob))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<(QualityModel, ModelCheckpoint)> {
    let bytes = fs::read(path)?;
    let (meta, blob) = read_checkpoint_meta(&bytes)?;
    let tensors: HashMap<String, Tensor> =
        candle_core::safetensors::load_buffer(blob, &Device::Cpu)
            .map_err(|e| ModelError::Corrupt(format!("weights: {e}")))?;
    let mut model = assemble(
        meta.config.clone(),
        meta.preprocess.clone(),
        ParamStore::preloaded(tensors),
    )?;
    let unused = model.store.end_preload();
    if !unused.is_empty() {
        return Err(ModelError::Corrupt(format!(
            "unexpected tensors: {unused:?}"
        )));
    }
    Ok((model, meta))
}
