//! Trains a small regression model on a synthetic corpus and reports the
//! held-out error.
//!
//! cargo run --example regression_synthetic -- [n_images] [epochs]

use fundusq::datasets::{stratified_split, synth_corpus, Split, SplitSpec, SynthConfig};
use fundusq::imaging::PreprocessConfig;
use fundusq::metrics::regression_report_raw;
use fundusq::qmodel::{BackboneKind, HeadKind, ModelConfig};
use fundusq::training::{predict_split, train_regression, RegressionInit, TrainConfig, TrainEnv};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let mut args = std::env::args().skip(1);
    let n: usize = args.next().map_or(Ok(600), |a| a.parse())?;
    let epochs: usize = args.next().map_or(Ok(15), |a| a.parse())?;

    let dir = tempfile::tempdir()?;
    let t0 = std::time::Instant::now();
    let corpus = synth_corpus(&SynthConfig::default(), n, 7, dir.path())?;
    let manifest = stratified_split(&corpus.manifest, &SplitSpec::fractions(0.75, 0.1, 0.15, 7))?;
    println!("rendered {n} images in {:.1}s", t0.elapsed().as_secs_f64());

    let init = RegressionInit::Random {
        model: ModelConfig::new(BackboneKind::SmallCnnTest, HeadKind::Regress1, 32),
        preprocess: PreprocessConfig::with_target_size(32),
    };
    let mut config = TrainConfig {
        batch_size: 16,
        max_epochs: epochs,
        ..TrainConfig::default()
    };
    config.optimizer.learning_rate = 1e-3;
    let env = TrainEnv::new(dir.path(), dir.path().join("runs"));
    let out = train_regression(&init, &manifest, &config, &env)?;
    println!(
        "best validation MAE {:.3} at epoch {} ({:.1}s)",
        out.report.best_validation_objective, out.report.best_epoch, out.report.wall_time
    );

    let (_, predicted, reference) =
        predict_split(&out.model, &manifest, Some(Split::Test), dir.path())?;
    let reference: Vec<f64> = reference.into_iter().flatten().collect();
    let report = regression_report_raw(&predicted, &reference, 0)?;
    println!(
        "test MAE {:.3} [{:.3}, {:.3}], RMSE {:.3}, max {:.3}",
        report.mae, report.ci95.0, report.ci95.1, report.rmse, report.max_error
    );
    Ok(())
}
