//! Synthetic fundus-like corpus for desk-scale experiments.
//!
//! Each raster is a bright disc on a black field with an optic-disc spot and
//! vessel strokes, degraded by blur, darkening and noise that all scale with a
//! single severity in `[0, 1]`. The ground-truth grade is a monotone map of
//! severity snapped to the half-point grid.

use std::f32::consts::PI;
use std::fs;
use std::path::Path;

use image::{Rgb32FImage, RgbImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{
    snap_half, BinaryLabel, DatasetManifest, FundusRecord, QualityScore, Result, TrinaryLabel,
    MAX_SCORE, MIN_SCORE,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    /// Raster side length in pixels.
    pub image_size: u32,
    /// Gaussian blur sigma at severity 1, relative to a 128 px raster.
    pub blur_max: f32,
    /// Fractional brightness loss at severity 1.
    pub brightness_drop: f32,
    /// Additive noise standard deviation (0..255 scale) at severity 1.
    pub noise_max: f32,
    /// Severities are drawn uniformly from this range.
    pub severity_range: (f64, f64),
    pub with_quality: bool,
    pub with_trinary: bool,
    pub with_binary: bool,
    pub id_prefix: String,
    pub source: String,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            image_size: 96,
            blur_max: 3.0,
            brightness_drop: 0.6,
            noise_max: 24.0,
            severity_range: (0.0, 1.0),
            with_quality: true,
            with_trinary: false,
            with_binary: false,
            id_prefix: "syn".into(),
            source: "synthetic".into(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct SynthCorpus {
    pub manifest: DatasetManifest,
    /// Severity used for each record, aligned with `manifest.records`.
    pub severities: Vec<f64>,
}

/// Monotone non-increasing map from severity to grade: 0 gives 10, 1 gives 1.
pub fn severity_to_score(severity: f64) -> QualityScore {
    let s = severity.clamp(0.0, 1.0);
    let raw = MAX_SCORE - (MAX_SCORE - MIN_SCORE) * s;
    QualityScore::clamped(snap_half(raw))
}

pub fn trinary_for(score: QualityScore) -> TrinaryLabel {
    match score.value() {
        v if v >= 7.0 => TrinaryLabel::Good,
        v if v >= 4.0 => TrinaryLabel::Usable,
        _ => TrinaryLabel::Reject,
    }
}

pub fn binary_for(score: QualityScore, threshold: f64) -> BinaryLabel {
    if score.value() >= threshold {
        BinaryLabel::Good
    } else {
        BinaryLabel::Poor
    }
}

/// Renders one degraded raster.
pub fn render(config: &SynthConfig, severity: f64, rng: &mut ChaCha8Rng) -> RgbImage {
    let size = config.image_size.max(16);
    let n = size as f32;
    let s = severity.clamp(0.0, 1.0) as f32;
    let mut img = Rgb32FImage::new(size, size);

    let cx = n / 2.0 + rng.gen_range(-0.02..0.02) * n;
    let cy = n / 2.0 + rng.gen_range(-0.02..0.02) * n;
    let radius = 0.42 * n;
    let base = [
        170.0 + rng.gen_range(-15.0..15.0),
        70.0 + rng.gen_range(-10.0..10.0),
        35.0 + rng.gen_range(-8.0..8.0f32),
    ];
    let disc_angle = rng.gen_range(0.0..2.0 * PI);
    let (dx, dy) = (disc_angle.cos() * 0.22 * n, disc_angle.sin() * 0.22 * n);
    let (ox, oy) = (cx + dx, cy + dy);
    let disc_r = 0.08 * n;
    let (mx, my) = (cx - dx * 0.9, cy - dy * 0.9);

    for (x, y, p) in img.enumerate_pixels_mut() {
        let (fx, fy) = (x as f32 + 0.5, y as f32 + 0.5);
        let d = ((fx - cx).powi(2) + (fy - cy).powi(2)).sqrt() / radius;
        if d > 1.0 {
            continue;
        }
        let shade = 1.0 - 0.35 * d * d;
        let mut c = base.map(|v| v * shade);
        let dm = ((fx - mx).powi(2) + (fy - my).powi(2)).sqrt() / (0.1 * n);
        if dm < 1.0 {
            let k = 0.35 * (1.0 - dm);
            c = c.map(|v| v * (1.0 - k));
        }
        let dd = ((fx - ox).powi(2) + (fy - oy).powi(2)).sqrt() / disc_r;
        if dd < 1.0 {
            let k = (1.0 - dd * dd).sqrt();
            let disc = [250.0, 225.0, 160.0];
            for i in 0..3 {
                c[i] += (disc[i] - c[i]) * k;
            }
        }
        p.0 = c;
    }

    // vessels radiate from the optic disc as slowly turning strokes
    let vessels = rng.gen_range(4..7);
    for v in 0..vessels {
        let mut heading =
            disc_angle + PI + (v as f32 - vessels as f32 / 2.0) * 0.7 + rng.gen_range(-0.2..0.2);
        let (mut px, mut py) = (ox, oy);
        let width = rng.gen_range(0.6..1.4f32) * n / 96.0;
        let steps = (0.55 * n) as usize;
        for _ in 0..steps {
            heading += rng.gen_range(-0.08..0.08);
            px += heading.cos();
            py += heading.sin();
            stamp(&mut img, px, py, width, cx, cy, radius);
        }
    }

    let mut img = if s > 0.0 && config.blur_max > 0.0 {
        let sigma = config.blur_max * s * n / 128.0;
        if sigma > 0.05 {
            image::imageops::blur(&img, sigma)
        } else {
            img
        }
    } else {
        img
    };

    let gain = 1.0 - config.brightness_drop * s;
    let noise = Normal::new(0.0, (config.noise_max * s).max(1e-6)).expect("valid sd");
    for (x, y, p) in img.enumerate_pixels_mut() {
        let (fx, fy) = (x as f32 + 0.5, y as f32 + 0.5);
        let inside = ((fx - cx).powi(2) + (fy - cy).powi(2)).sqrt() <= radius;
        if !inside {
            p.0 = [0.0; 3];
            continue;
        }
        for c in p.0.iter_mut() {
            let jitter = if s > 0.0 { noise.sample(rng) } else { 0.0 };
            // keep the retina above the border threshold so cropping is stable
            *c = (*c * gain + jitter).clamp(16.0, 255.0);
        }
    }
    RgbImage::from_fn(size, size, |x, y| {
        let p = img.get_pixel(x, y).0;
        image::Rgb(p.map(|v| v.round().clamp(0.0, 255.0) as u8))
    })
}

fn stamp(img: &mut Rgb32FImage, px: f32, py: f32, width: f32, cx: f32, cy: f32, radius: f32) {
    let r = width.max(0.5);
    let (w, h) = img.dimensions();
    let x0 = (px - r - 1.0).floor().max(0.0) as u32;
    let y0 = (py - r - 1.0).floor().max(0.0) as u32;
    let x1 = ((px + r + 1.0).ceil() as u32).min(w.saturating_sub(1));
    let y1 = ((py + r + 1.0).ceil() as u32).min(h.saturating_sub(1));
    for y in y0..=y1 {
        for x in x0..=x1 {
            let (fx, fy) = (x as f32 + 0.5, y as f32 + 0.5);
            if ((fx - cx).powi(2) + (fy - cy).powi(2)).sqrt() > radius {
                continue;
            }
            let d = ((fx - px).powi(2) + (fy - py).powi(2)).sqrt();
            if d <= r {
                let p = img.get_pixel_mut(x, y);
                p.0 = [p.0[0] * 0.62, p.0[1] * 0.45, p.0[2] * 0.5];
            }
        }
    }
}

/// Generates `n` degraded rasters as PNG files under `out_dir` and returns a
/// manifest whose URIs are relative to `out_dir`.
pub fn synth_corpus(
    config: &SynthConfig,
    n: usize,
    seed: u64,
    out_dir: impl AsRef<Path>,
) -> Result<SynthCorpus> {
    let out_dir = out_dir.as_ref();
    fs::create_dir_all(out_dir)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (lo, hi) = config.severity_range;
    let mut records = Vec::with_capacity(n);
    let mut severities = Vec::with_capacity(n);
    for i in 0..n {
        let severity = if hi > lo { rng.gen_range(lo..=hi) } else { lo };
        let img = render(config, severity, &mut rng);
        let name = format!("{}_{i:05}.png", config.id_prefix);
        img.save(out_dir.join(&name))?;
        let score = severity_to_score(severity);
        let mut rec =
            FundusRecord::new(format!("{}-{i:05}", config.id_prefix), name, &config.source);
        if config.with_quality {
            rec.quality = Some(score);
        }
        if config.with_trinary {
            rec.trinary = Some(trinary_for(score));
        }
        if config.with_binary {
            rec.binary = Some(binary_for(score, 6.5));
        }
        records.push(rec);
        severities.push(severity);
    }
    Ok(SynthCorpus {
        manifest: DatasetManifest::new(config.source.clone(), records),
        severities,
    })
}
