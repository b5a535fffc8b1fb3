//! Crops, squares, resizes and normalizes one image, writing the result
//! next to it.
//!
//! cargo run --example preprocess -- <image> [target_size]

use fundusq::imaging::{preprocess, ImageTensor, PreprocessConfig};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut args = std::env::args().skip(1);
    let path = args
        .next()
        .ok_or("usage: preprocess <image> [target_size]")?;
    let size: usize = args.next().map_or(Ok(224), |a| a.parse())?;

    let img = ImageTensor::open(&path)?;
    let cfg = PreprocessConfig::with_target_size(size);
    let out = preprocess(&img, &cfg)?;
    let dst = std::path::Path::new(&path).with_extension("pre.png");
    out.to_rgb8().save(&dst)?;
    println!(
        "{}x{} -> {}x{} ({})",
        img.width(),
        img.height(),
        out.width(),
        out.height(),
        dst.display()
    );
    Ok(())
}
