//! Classification pre-training, regression fine-tuning and pseudo-label
//! student training on synthetic data, with a Wilcoxon comparison of the
//! stage II and stage III test errors.
//!
//! cargo run --example three_stage -- [n_labeled] [n_unlabeled] [epochs]

use fundusq::datasets::{stratified_split, synth_corpus, Split, SplitSpec, SynthConfig};
use fundusq::imaging::PreprocessConfig;
use fundusq::metrics::{regression_report_raw, wilcoxon_signed_rank};
use fundusq::qmodel::{BackboneKind, HeadKind, ModelConfig, QualityModel};
use fundusq::training::{
    generate_pseudo_labels, predict_split, pretrain_classification, train_regression,
    train_student, RegressionInit, TrainConfig, TrainEnv,
};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let mut args = std::env::args().skip(1).map(|a| a.parse::<usize>());
    let n_labeled = args.next().unwrap_or(Ok(600))?;
    let n_unlabeled = args.next().unwrap_or(Ok(600))?;
    let epochs = args.next().unwrap_or(Ok(10))?;

    let dir = tempfile::tempdir()?;
    let root = dir.path();
    let labeled = SynthConfig {
        with_trinary: true,
        ..SynthConfig::default()
    };
    let unlabeled = SynthConfig {
        with_quality: false,
        id_prefix: "unl".into(),
        ..SynthConfig::default()
    };
    let spec = SplitSpec::fractions(0.75, 0.1, 0.15, 3);
    let manifest = stratified_split(&synth_corpus(&labeled, n_labeled, 1, root)?.manifest, &spec)?;
    let pool = synth_corpus(&unlabeled, n_unlabeled, 2, root)?.manifest;

    let model = ModelConfig::new(BackboneKind::SmallCnnTest, HeadKind::Classify3, 32).with_seed(3);
    let pre = PreprocessConfig::with_target_size(32);
    let mut cfg = TrainConfig {
        batch_size: 16,
        max_epochs: epochs,
        seed: 3,
        ..TrainConfig::classification()
    };
    cfg.optimizer.learning_rate = 1e-3;
    let env = TrainEnv::new(root, root.join("runs"));

    let stage1 = pretrain_classification(&model, &pre, &manifest, &cfg, &env)?;
    println!(
        "stage I  validation accuracy {:.3}",
        stage1.report.best_validation_objective
    );

    let reg_cfg = TrainConfig {
        loss: fundusq::training::LossKind::Rmse,
        ..cfg.clone()
    };
    let init = RegressionInit::Checkpoint(stage1.report.checkpoint.clone());
    let stage2 = train_regression(&init, &manifest, &reg_cfg, &env)?;
    let pseudo = generate_pseudo_labels(&stage2.report.checkpoint, &pool, root)?;
    let stage3 = train_student(
        &stage2.report.checkpoint,
        &manifest,
        &pseudo,
        &reg_cfg,
        &env,
    )?;

    let errors = |m: &QualityModel| -> Result<Vec<f64>, Box<dyn std::error::Error>> {
        let (_, p, r) = predict_split(m, &manifest, Some(Split::Test), root)?;
        let r: Vec<f64> = r.into_iter().flatten().collect();
        Ok(regression_report_raw(&p, &r, 0)?.per_sample_abs_errors)
    };
    let (e2, e3) = (errors(&stage2.model)?, errors(&stage3.model)?);
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    println!("stage II  test MAE {:.3}", mean(&e2));
    println!("stage III test MAE {:.3}", mean(&e3));
    let w = wilcoxon_signed_rank(&e2, &e3)?;
    println!(
        "Wilcoxon W={} p={:.4} ({:?})",
        w.statistic, w.p_two_sided, w.method
    );
    Ok(())
}
