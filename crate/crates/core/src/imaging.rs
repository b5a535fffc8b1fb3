//! Deterministic, augmentation-free preprocessing of fundus photographs.
//!
//! The pipeline is `crop_black_borders -> square_pad -> resize -> /255`.
//! Every stage is a pure function of its inputs, so a [`PreprocessConfig`]
//! stored next to model weights replays training-time preprocessing exactly.

use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const CHANNELS: usize = 3;

#[derive(Debug, Error)]
pub enum ImagingError {
    #[error("image contains no pixel brighter than the border threshold")]
    AllBlackImage,
    #[error("invalid image dimensions {height}x{width}")]
    InvalidDimensions { height: usize, width: usize },
    #[error("buffer of {got} values does not match {height}x{width}x3")]
    BufferSize {
        height: usize,
        width: usize,
        got: usize,
    },
    #[error("operation requires a {expected} image")]
    WrongRange { expected: &'static str },
    #[error("invalid preprocess config: {0}")]
    InvalidConfig(String),
    #[error("failed to decode image: {0}")]
    Decode(#[from] image::ImageError),
}

pub type Result<T> = std::result::Result<T, ImagingError>;

/// RGB raster stored row-major, channels interleaved (HWC).
///
/// Raw tensors hold values in `[0, 255]`, normalized ones in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageTensor {
    height: usize,
    width: usize,
    data: Vec<f32>,
    normalized: bool,
}

impl ImageTensor {
    pub fn new(height: usize, width: usize, data: Vec<f32>, normalized: bool) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(ImagingError::InvalidDimensions { height, width });
        }
        if data.len() != height * width * CHANNELS {
            return Err(ImagingError::BufferSize {
                height,
                width,
                got: data.len(),
            });
        }
        let hi = if normalized { 1.0 } else { 255.0 };
        if data.iter().any(|v| !(0.0..=hi).contains(v)) {
            return Err(ImagingError::WrongRange {
                expected: if normalized { "[0,1]" } else { "[0,255]" },
            });
        }
        Ok(Self {
            height,
            width,
            data,
            normalized,
        })
    }

    /// Raw image filled with a single RGB value.
    pub fn filled(height: usize, width: usize, rgb: [f32; 3]) -> Result<Self> {
        let data = (0..height * width).flat_map(|_| rgb).collect();
        Self::new(height, width, data, false)
    }

    pub fn from_rgb8(img: &image::RgbImage) -> Self {
        let (w, h) = img.dimensions();
        let data = img.as_raw().iter().map(|&v| v as f32).collect();
        Self {
            height: h as usize,
            width: w as usize,
            data,
            normalized: false,
        }
    }

    /// Decodes PNG/JPEG bytes into a raw tensor.
    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let img = image::load_from_memory(bytes)?;
        Ok(Self::from_rgb8(&img.to_rgb8()))
    }

    pub fn open(path: impl AsRef<Path>) -> Result<Self> {
        let img = image::open(path)?;
        Ok(Self::from_rgb8(&img.to_rgb8()))
    }

    /// Converts to 8-bit RGB, rescaling normalized tensors and rounding.
    pub fn to_rgb8(&self) -> image::RgbImage {
        let scale = if self.normalized { 255.0 } else { 1.0 };
        let buf = self
            .data
            .iter()
            .map(|v| (v * scale).round().clamp(0.0, 255.0) as u8)
            .collect();
        image::RgbImage::from_raw(self.width as u32, self.height as u32, buf)
            .expect("buffer length checked at construction")
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn is_normalized(&self) -> bool {
        self.normalized
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    #[inline]
    pub fn pixel(&self, y: usize, x: usize) -> [f32; 3] {
        let i = (y * self.width + x) * CHANNELS;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().map(|&v| v as f64).sum()
    }

    fn pixel_max(&self, y: usize, x: usize) -> f32 {
        let [r, g, b] = self.pixel(y, x);
        r.max(g).max(b)
    }

    fn sub_image(&self, top: usize, left: usize, height: usize, width: usize) -> Self {
        let mut data = Vec::with_capacity(height * width * CHANNELS);
        for y in top..top + height {
            let start = (y * self.width + left) * CHANNELS;
            data.extend_from_slice(&self.data[start..start + width * CHANNELS]);
        }
        Self {
            height,
            width,
            data,
            normalized: self.normalized,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Interpolation {
    #[default]
    Bilinear,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Squaring {
    #[default]
    PadBlack,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PreprocessConfig {
    pub target_size: usize,
    pub border_threshold: u8,
    #[serde(default)]
    pub interpolation: Interpolation,
    #[serde(default)]
    pub squaring: Squaring,
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        Self {
            target_size: 224,
            border_threshold: 10,
            interpolation: Interpolation::Bilinear,
            squaring: Squaring::PadBlack,
        }
    }
}

impl PreprocessConfig {
    pub fn with_target_size(target_size: usize) -> Self {
        Self {
            target_size,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.target_size < 32 {
            return Err(ImagingError::InvalidConfig(format!(
                "target_size must be >= 32, got {}",
                self.target_size
            )));
        }
        Ok(())
    }
}

/// Strips outer rows and columns whose brightest channel never exceeds
/// `threshold`. Dark rows inside the content are kept.
pub fn crop_black_borders(image: &ImageTensor, threshold: u8) -> Result<ImageTensor> {
    if image.normalized {
        return Err(ImagingError::WrongRange { expected: "raw" });
    }
    let t = threshold as f32;
    let row_dark = |y: usize| (0..image.width).all(|x| image.pixel_max(y, x) <= t);

    let Some(top) = (0..image.height).find(|&y| !row_dark(y)) else {
        return Err(ImagingError::AllBlackImage);
    };
    let bottom = (0..image.height)
        .rev()
        .find(|&y| !row_dark(y))
        .unwrap_or(top);
    let col_dark = |x: usize| (top..=bottom).all(|y| image.pixel_max(y, x) <= t);
    let left = (0..image.width)
        .find(|&x| !col_dark(x))
        .ok_or(ImagingError::AllBlackImage)?;
    let right = (0..image.width)
        .rev()
        .find(|&x| !col_dark(x))
        .unwrap_or(left);

    Ok(image.sub_image(top, left, bottom - top + 1, right - left + 1))
}

/// Zero-pads the shorter axis so the image becomes square, content centered.
pub fn square_pad(image: &ImageTensor) -> ImageTensor {
    let side = image.height.max(image.width);
    if image.height == image.width {
        return image.clone();
    }
    let top = (side - image.height) / 2;
    let left = (side - image.width) / 2;
    let mut data = vec![0.0; side * side * CHANNELS];
    let row_len = image.width * CHANNELS;
    for y in 0..image.height {
        let src = y * row_len;
        let dst = ((y + top) * side + left) * CHANNELS;
        data[dst..dst + row_len].copy_from_slice(&image.data[src..src + row_len]);
    }
    ImageTensor {
        height: side,
        width: side,
        data,
        normalized: image.normalized,
    }
}

/// Bilinear resample of a planar/interleaved buffer with `channels` values
/// per pixel, half-pixel centers and edge clamping.
pub(crate) fn bilinear(
    src: &[f32],
    src_h: usize,
    src_w: usize,
    channels: usize,
    dst_h: usize,
    dst_w: usize,
) -> Vec<f32> {
    let axis = |dst: usize, src_len: usize| -> Vec<(usize, usize, f32)> {
        let scale = src_len as f32 / dst as f32;
        (0..dst)
            .map(|i| {
                let pos = ((i as f32 + 0.5) * scale - 0.5).max(0.0);
                let lo = (pos.floor() as usize).min(src_len - 1);
                let hi = (lo + 1).min(src_len - 1);
                (lo, hi, pos - lo as f32)
            })
            .collect()
    };
    let ys = axis(dst_h, src_h);
    let xs = axis(dst_w, src_w);
    let mut out = Vec::with_capacity(dst_h * dst_w * channels);
    for &(y0, y1, fy) in &ys {
        for &(x0, x1, fx) in &xs {
            for c in 0..channels {
                let at = |y: usize, x: usize| src[(y * src_w + x) * channels + c];
                let top = at(y0, x0) + (at(y0, x1) - at(y0, x0)) * fx;
                let bot = at(y1, x0) + (at(y1, x1) - at(y1, x0)) * fx;
                out.push(top + (bot - top) * fy);
            }
        }
    }
    out
}

/// Bilinear resize to `size x size`.
pub fn resize(image: &ImageTensor, size: usize) -> ImageTensor {
    let size = size.max(1);
    let hi = if image.normalized { 1.0 } else { 255.0 };
    let data = bilinear(&image.data, image.height, image.width, CHANNELS, size, size)
        .into_iter()
        // guards against 1-ulp excursions past the representable range
        .map(|v| v.clamp(0.0, hi))
        .collect();
    ImageTensor {
        height: size,
        width: size,
        data,
        normalized: image.normalized,
    }
}

pub fn normalize(image: &ImageTensor) -> ImageTensor {
    if image.normalized {
        return image.clone();
    }
    ImageTensor {
        height: image.height,
        width: image.width,
        data: image.data.iter().map(|v| v / 255.0).collect(),
        normalized: true,
    }
}

/// Full preprocessing chain: crop, square, resize, scale into `[0, 1]`.
pub fn preprocess(image: &ImageTensor, config: &PreprocessConfig) -> Result<ImageTensor> {
    config.validate()?;
    let cropped = crop_black_borders(image, config.border_threshold)?;
    let squared = match config.squaring {
        Squaring::PadBlack => square_pad(&cropped),
    };
    let resized = match config.interpolation {
        Interpolation::Bilinear => resize(&squared, config.target_size),
    };
    Ok(normalize(&resized))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn framed(h: usize, w: usize, frame: usize, value: f32) -> ImageTensor {
        let mut data = vec![0.0; h * w * 3];
        for y in frame..h - frame {
            for x in frame..w - frame {
                let i = (y * w + x) * 3;
                data[i..i + 3].copy_from_slice(&[value, value * 0.5, value * 0.25]);
            }
        }
        ImageTensor::new(h, w, data, false).unwrap()
    }

    #[test]
    fn crop_removes_frame_around_disc() {
        // bright 80x80 disc inside a 10 px black frame
        let mut img = framed(100, 100, 10, 0.0);
        let mut bright = 0;
        for y in 10..90 {
            for x in 10..90 {
                let i = (y * 100 + x) * 3;
                let dy = y as f32 - 49.5;
                let dx = x as f32 - 49.5;
                // disc touches every edge of the 80x80 box
                let v = if dx * dx + dy * dy <= 40.0 * 40.0 {
                    200.0
                } else {
                    0.0
                };
                if v > 0.0 {
                    bright += 1;
                }
                img.data[i] = v;
            }
        }
        let out = crop_black_borders(&img, 10).unwrap();
        assert_eq!((out.height(), out.width()), (80, 80));
        let counted = (0..80)
            .flat_map(|y| (0..80).map(move |x| (y, x)))
            .filter(|&(y, x)| out.pixel(y, x)[0] > 0.0)
            .count();
        assert_eq!(counted, bright);
    }

    #[test]
    fn crop_identity_without_dark_border() {
        let img = ImageTensor::filled(7, 9, [30.0, 40.0, 50.0]).unwrap();
        assert_eq!(crop_black_borders(&img, 10).unwrap(), img);
    }

    #[test]
    fn crop_keeps_interior_dark_rows() {
        let mut img = ImageTensor::filled(5, 5, [100.0; 3]).unwrap();
        for x in 0..5 {
            let i = (2 * 5 + x) * 3;
            img.data[i..i + 3].fill(0.0);
        }
        assert_eq!(crop_black_borders(&img, 10).unwrap(), img);
    }

    #[test]
    fn crop_all_black_fails() {
        let img = ImageTensor::filled(64, 64, [0.0; 3]).unwrap();
        assert!(matches!(
            crop_black_borders(&img, 10),
            Err(ImagingError::AllBlackImage)
        ));
    }

    #[test]
    fn crop_rejects_normalized_input() {
        let img = normalize(&ImageTensor::filled(4, 4, [100.0; 3]).unwrap());
        assert!(crop_black_borders(&img, 10).is_err());
    }

    #[test]
    fn pad_centers_and_conserves_sum() {
        let img = ImageTensor::filled(80, 100, [1.0, 2.0, 3.0]).unwrap();
        let out = square_pad(&img);
        assert_eq!((out.height(), out.width()), (100, 100));
        assert_eq!(out.sum(), img.sum());
        for y in 0..100 {
            let expect = if (10..90).contains(&y) { 1.0 } else { 0.0 };
            assert_eq!(out.pixel(y, 50)[0], expect, "row {y}");
        }
    }

    #[test]
    fn pad_square_is_identity() {
        let img = ImageTensor::filled(64, 64, [5.0; 3]).unwrap();
        assert_eq!(square_pad(&img), img);
    }

    #[test]
    fn pad_extreme_aspect() {
        let img = ImageTensor::filled(1, 5, [9.0; 3]).unwrap();
        let out = square_pad(&img);
        assert_eq!((out.height(), out.width()), (5, 5));
        for y in 0..5 {
            for x in 0..5 {
                let expect = if y == 2 { 9.0 } else { 0.0 };
                assert_eq!(out.pixel(y, x)[1], expect);
            }
        }
    }

    #[test]
    fn resize_shape_and_constant() {
        let img = ImageTensor::filled(50, 50, [77.0, 12.0, 200.0]).unwrap();
        let out = resize(&img, 224);
        assert_eq!((out.height(), out.width()), (224, 224));
        assert!(out.data().chunks(3).all(|p| p == [77.0, 12.0, 200.0]));
        assert_eq!(
            resize(&ImageTensor::filled(100, 100, [1.0; 3]).unwrap(), 224).height(),
            224
        );
    }

    #[test]
    fn resize_checkerboard_upsample() {
        // [[0, 255], [255, 0]] -> 4x4. With half-pixel centers the source
        // coordinates are -0.25 (clamped to 0), 0.25, 0.75, 1.25 (clamped to 1)
        // so row/col 1 sits at 0.25, row/col 2 at 0.75.
        let data = [0.0, 255.0, 255.0, 0.0]
            .iter()
            .flat_map(|&v| [v; 3])
            .collect();
        let img = ImageTensor::new(2, 2, data, false).unwrap();
        let out = resize(&img, 4);
        assert_eq!(out.pixel(0, 0)[0], 0.0);
        assert_eq!(out.pixel(0, 3)[0], 255.0);
        assert_eq!(out.pixel(3, 0)[0], 255.0);
        assert_eq!(out.pixel(3, 3)[0], 0.0);
        // f(y, x) = 255 * (x + y - 2xy) on the unit square
        let f = |y: f32, x: f32| 255.0 * (x + y - 2.0 * x * y);
        assert!((out.pixel(1, 1)[0] - f(0.25, 0.25)).abs() < 1e-3);
        assert!((out.pixel(1, 2)[0] - f(0.25, 0.75)).abs() < 1e-3);
        for y in 1..3 {
            for x in 1..3 {
                let v = out.pixel(y, x)[0];
                assert!(v > 0.0 && v < 255.0);
            }
        }
    }

    #[test]
    fn preprocess_contract_and_determinism() {
        let img = framed(120, 90, 6, 180.0);
        let cfg = PreprocessConfig::default();
        let a = preprocess(&img, &cfg).unwrap();
        let b = preprocess(&img, &cfg).unwrap();
        assert_eq!((a.height(), a.width()), (224, 224));
        assert!(a.is_normalized());
        assert!(a.data().iter().all(|v| (0.0..=1.0).contains(v)));
        assert_eq!(
            a.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            b.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        );
    }

    #[test]
    fn config_rejects_tiny_target() {
        let img = framed(40, 40, 2, 100.0);
        assert!(matches!(
            preprocess(&img, &PreprocessConfig::with_target_size(16)),
            Err(ImagingError::InvalidConfig(_))
        ));
    }

    #[test]
    fn config_json_round_trip() {
        let cfg = PreprocessConfig::with_target_size(299);
        let s = serde_json::to_string(&cfg).unwrap();
        assert_eq!(serde_json::from_str::<PreprocessConfig>(&s).unwrap(), cfg);
    }
}
