//! Grad-CAM for a freshly initialized model on a synthetic image, written
//! as an overlay PNG and a `.npy` heatmap.
//!
//! cargo run --example gradcam -- [out_dir]

use std::path::PathBuf;

use fundusq::datasets::{resolve_uri, synth_corpus, SynthConfig};
use fundusq::explain::{grad_cam, write_cam_artifacts, CamOptions};
use fundusq::imaging::{preprocess, ImageTensor, PreprocessConfig};
use fundusq::qmodel::{build_model, BackboneKind, HeadKind, ModelConfig};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let out = PathBuf::from(
        std::env::args()
            .nth(1)
            .unwrap_or_else(|| "gradcam-out".into()),
    );
    std::fs::create_dir_all(&out)?;
    let corpus = synth_corpus(&SynthConfig::default(), 1, 5, &out)?;
    let record = &corpus.manifest.records[0];

    let pre = PreprocessConfig::with_target_size(96);
    let model = build_model(
        &ModelConfig::new(BackboneKind::SmallCnnTest, HeadKind::Regress1, 96),
        &pre,
    )?;
    let input = preprocess(
        &ImageTensor::open(resolve_uri(&out, &record.image_uri))?,
        &pre,
    )?;

    for layer in model.layer_names() {
        let heatmap = grad_cam(&model, &input, Some(layer), CamOptions::default())?;
        let png = out.join(format!("cam-{layer}.png"));
        write_cam_artifacts(
            &heatmap,
            &input,
            0.4,
            &png,
            Some(&out.join(format!("cam-{layer}.npy"))),
        )?;
        println!("{layer}: {}", png.display());
    }
    Ok(())
}
