//! Renders a synthetic quality-labeled corpus and splits it with score
//! stratification, printing per-split score histograms.
//!
//! cargo run --example split_manifest -- [n_images]

use fundusq::datasets::{
    score_histogram, stratified_split, synth_corpus, Split, SplitSpec, SynthConfig,
};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let n: usize = std::env::args().nth(1).map_or(Ok(1245), |a| a.parse())?;
    let dir = tempfile::tempdir()?;
    let cfg = SynthConfig {
        image_size: 32,
        ..SynthConfig::default()
    };
    let corpus = synth_corpus(&cfg, n, 11, dir.path())?;

    let spec = SplitSpec::fractions(932.0 / 1245.0, 104.0 / 1245.0, 209.0 / 1245.0, 11);
    let split = stratified_split(&corpus.manifest, &spec)?;
    for s in Split::ALL {
        let records: Vec<_> = split.records_in(s).cloned().collect();
        let hist = score_histogram(&records, 1.0);
        println!(
            "{s:?}: {} images, per-unit histogram {hist:?}",
            records.len()
        );
    }
    Ok(())
}
