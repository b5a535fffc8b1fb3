//! Grad-CAM saliency for the regression output and heatmap overlays.

use std::path::Path;

use candle_core::{DType, Device, Tensor, Var, D};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::imaging::{bilinear, ImageTensor, CHANNELS};
use crate::qmodel::{images_to_tensor, ModelError, QualityModel};

#[derive(Debug, Error)]
pub enum ExplainError {
    #[error("unknown layer {0}")]
    UnknownLayer(String),
    #[error("model output has {0} elements; Grad-CAM needs a scalar")]
    NonScalarOutput(usize),
    #[error("dimension mismatch: heatmap {heatmap:?} vs image {image:?}")]
    DimensionMismatch {
        heatmap: (usize, usize),
        image: (usize, usize),
    },
    #[error("alpha {0} not in [0, 1]")]
    InvalidAlpha(f32),
    #[error("layer output has shape {0:?}; expected (1, C, h, w)")]
    NotAFeatureMap(Vec<usize>),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Candle(#[from] candle_core::Error),
    #[error(transparent)]
    Image(#[from] image::ImageError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, ExplainError>;

/// A network that can be split at a named feature map.
pub trait CamModel {
    fn cam_layers(&self) -> Vec<String>;

    /// Layer used when none is requested: the last feature map.
    fn default_cam_layer(&self) -> String {
        self.cam_layers().last().cloned().unwrap_or_default()
    }

    /// Activations of `layer` for input `x` of shape `(1, C, H, W)`.
    fn cam_features(&self, x: &Tensor, layer: &str) -> Result<Tensor>;

    /// Model output computed from the activations of `layer`.
    fn cam_output(&self, features: &Tensor, layer: &str) -> Result<Tensor>;
}

impl CamModel for QualityModel {
    fn cam_layers(&self) -> Vec<String> {
        self.layer_names().into_iter().map(String::from).collect()
    }

    fn cam_features(&self, x: &Tensor, layer: &str) -> Result<Tensor> {
        self.feature_map(x, layer, false).map_err(map_layer_err)
    }

    fn cam_output(&self, features: &Tensor, layer: &str) -> Result<Tensor> {
        self.forward_from(features, layer, false)
            .map_err(map_layer_err)
    }
}

fn map_layer_err(e: ModelError) -> ExplainError {
    match e {
        ModelError::UnknownLayer(l) => ExplainError::UnknownLayer(l),
        other => other.into(),
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CamOptions {
    /// Negate gradients to highlight regions that lower the score.
    pub invert: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CamHeatmap {
    pub height: usize,
    pub width: usize,
    /// Row-major values in `[0, 1]`.
    pub values: Vec<f32>,
    pub source_layer: String,
    pub image_ref: String,
}

impl CamHeatmap {
    pub fn at(&self, y: usize, x: usize) -> f32 {
        self.values[y * self.width + x]
    }

    /// Mean value over the rectangle `[y0, y1) x [x0, x1)`.
    pub fn region_mean(&self, y0: usize, y1: usize, x0: usize, x1: usize) -> f32 {
        let mut sum = 0.0;
        for y in y0..y1 {
            for x in x0..x1 {
                sum += self.at(y, x);
            }
        }
        sum / ((y1 - y0) * (x1 - x0)) as f32
    }

    pub fn resized(&self, height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            values: bilinear(&self.values, self.height, self.width, 1, height, width),
            ..self.clone()
        }
    }

    /// Writes the map as a `.npy` float32 array of shape `(H, W)`.
    pub fn write_npy(&self, path: impl AsRef<Path>) -> Result<()> {
        let t = Tensor::from_slice(&self.values, (self.height, self.width), &Device::Cpu)?;
        t.write_npy(path)?;
        Ok(())
    }
}

/// Activations of `layer` and the gradient of the scalar output with respect
/// to them, both `(1, C, h, w)`.
pub fn layer_gradients<M: CamModel + ?Sized>(
    model: &M,
    x: &Tensor,
    layer: &str,
) -> Result<(Tensor, Tensor)> {
    if !model.cam_layers().iter().any(|l| l == layer) {
        return Err(ExplainError::UnknownLayer(layer.to_string()));
    }
    let feats = model.cam_features(x, layer)?;
    if feats.rank() != 4 || feats.dim(0)? != 1 {
        return Err(ExplainError::NotAFeatureMap(feats.dims().to_vec()));
    }
    // A fresh leaf, so the gradient store keeps its gradient.
    let leaf = Var::from_tensor(&feats.detach())?;
    let out = model.cam_output(leaf.as_tensor(), layer)?;
    if out.elem_count() != 1 {
        return Err(ExplainError::NonScalarOutput(out.elem_count()));
    }
    let grads = out.sum_all()?.backward()?;
    let grad = match grads.get(leaf.as_tensor()) {
        Some(g) => g.clone(),
        None => leaf.zeros_like()?,
    };
    Ok((feats, grad))
}

/// Grad-CAM on an input tensor of shape `(1, C, H, W)`.
pub fn grad_cam_tensor<M: CamModel + ?Sized>(
    model: &M,
    x: &Tensor,
    layer: Option<&str>,
    options: CamOptions,
) -> Result<CamHeatmap> {
    let layer = layer
        .map(String::from)
        .unwrap_or_else(|| model.default_cam_layer());
    let (feats, grad) = layer_gradients(model, x, &layer)?;
    let grad = if options.invert { grad.neg()? } else { grad };
    let (_, c, h, w) = feats.dims4()?;
    let weights = grad.mean_keepdim(D::Minus1)?.mean_keepdim(D::Minus2)?;
    let raw = feats
        .broadcast_mul(&weights)?
        .sum(1)?
        .relu()?
        .reshape((h, w))?
        .to_dtype(DType::F32)?
        .flatten_all()?
        .to_vec1::<f32>()?;
    debug_assert!(c > 0);
    let (out_h, out_w) = (x.dim(2)?, x.dim(3)?);
    let up = bilinear(&raw, h, w, 1, out_h, out_w);
    Ok(CamHeatmap {
        height: out_h,
        width: out_w,
        values: min_max_normalize(up),
        source_layer: layer,
        image_ref: String::new(),
    })
}

/// Grad-CAM for a preprocessed image scored by a regression model.
pub fn grad_cam(
    model: &QualityModel,
    input: &ImageTensor,
    layer: Option<&str>,
    options: CamOptions,
) -> Result<CamHeatmap> {
    let x = images_to_tensor(std::slice::from_ref(input), model.config().input_size)?;
    grad_cam_tensor(model, &x, layer, options)
}

/// Scales to `[0, 1]`; a constant map becomes all zeros.
pub fn min_max_normalize(mut values: Vec<f32>) -> Vec<f32> {
    let lo = values.iter().copied().fold(f32::INFINITY, f32::min);
    let hi = values.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let span = hi - lo;
    if !(span > 0.0) || !span.is_finite() {
        values.iter_mut().for_each(|v| *v = 0.0);
        return values;
    }
    values
        .iter_mut()
        .for_each(|v| *v = ((*v - lo) / span).clamp(0.0, 1.0));
    values
}

/// Viridis color for `v` in `[0, 1]`, as 8-bit RGB.
pub fn colormap(v: f32) -> [u8; 3] {
    let c = colorous::VIRIDIS.eval_continuous(v.clamp(0.0, 1.0) as f64);
    [c.r, c.g, c.b]
}

/// Blends the color-mapped heatmap over `image`:
/// `(1 - alpha) * pixel + alpha * color`, in the image's value range.
pub fn overlay(heatmap: &CamHeatmap, image: &ImageTensor, alpha: f32) -> Result<ImageTensor> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(ExplainError::InvalidAlpha(alpha));
    }
    if (heatmap.height, heatmap.width) != (image.height(), image.width()) {
        return Err(ExplainError::DimensionMismatch {
            heatmap: (heatmap.height, heatmap.width),
            image: (image.height(), image.width()),
        });
    }
    let scale = if image.is_normalized() {
        1.0 / 255.0
    } else {
        1.0
    };
    let mut data = Vec::with_capacity(image.data().len());
    for (px, &v) in image.data().chunks_exact(CHANNELS).zip(&heatmap.values) {
        let color = colormap(v);
        for c in 0..CHANNELS {
            data.push((1.0 - alpha) * px[c] + alpha * (color[c] as f32 * scale));
        }
    }
    ImageTensor::new(image.height(), image.width(), data, image.is_normalized())
        .map_err(|e| ExplainError::Io(std::io::Error::other(e.to_string())))
}

/// A small two-layer convolutional network with a linear read-out.
///
/// Layers: `conv1 -> relu` (layer "conv1"), `conv2 -> relu` (layer
/// "conv2"), then per-channel global mean and a dot product with `head`.
/// Used to check saliency against hand-computable cases; works in any float
/// dtype.
#[derive(Debug, Clone)]
pub struct ToyCamNet {
    pub conv1: Tensor,
    pub conv2: Option<Tensor>,
    pub head: Tensor,
}

impl ToyCamNet {
    fn conv(x: &Tensor, k: &Tensor) -> Result<Tensor> {
        let pad = k.dim(2)? / 2;
        Ok(x.conv2d(k, pad, 1, 1, 1)?.relu()?)
    }

    fn head(&self, f: &Tensor) -> Result<Tensor> {
        let pooled = f.mean(D::Minus1)?.mean(D::Minus1)?;
        Ok(pooled.matmul(&self.head.unsqueeze(1)?)?)
    }
}

impl CamModel for ToyCamNet {
    fn cam_layers(&self) -> Vec<String> {
        let mut layers = vec!["conv1".to_string()];
        if self.conv2.is_some() {
            layers.push("conv2".into());
        }
        layers
    }

    fn cam_features(&self, x: &Tensor, layer: &str) -> Result<Tensor> {
        let f1 = Self::conv(x, &self.conv1)?;
        match (layer, &self.conv2) {
            ("conv1", _) => Ok(f1),
            ("conv2", Some(k)) => Self::conv(&f1, k),
            _ => Err(ExplainError::UnknownLayer(layer.into())),
        }
    }

    fn cam_output(&self, features: &Tensor, layer: &str) -> Result<Tensor> {
        match (layer, &self.conv2) {
            ("conv1", Some(k)) => self.head(&Self::conv(features, k)?),
            ("conv1", None) | ("conv2", Some(_)) => self.head(features),
            _ => Err(ExplainError::UnknownLayer(layer.into())),
        }
    }
}

/// Writes an overlay PNG and, optionally, the raw heatmap as `.npy`.
pub fn write_cam_artifacts(
    heatmap: &CamHeatmap,
    image: &ImageTensor,
    alpha: f32,
    png: impl AsRef<Path>,
    npy: Option<&Path>,
) -> Result<()> {
    overlay(heatmap, image, alpha)?.to_rgb8().save(png)?;
    if let Some(npy) = npy {
        heatmap.write_npy(npy)?;
    }
    Ok(())
}
