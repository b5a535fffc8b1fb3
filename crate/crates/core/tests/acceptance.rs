//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! nonzero if any criterion fails.

use std::collections::BTreeMap;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::{Duration, Instant};

use axum::body::Body;
use axum::http::{Request, StatusCode};
use candle_core::{Device, Tensor};
use candle_nn::{AdamW, Optimizer, ParamsAdamW};
use proptest::prelude::*;
use proptest::test_runner::{Config as PropConfig, TestRunner};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};
use tower::ServiceExt;

use fundusq::cli::{pipeline, PipelineConfig, Resolved, RunConfig};
use fundusq::datasets::{
    merge_pseudo, resolve_uri, stratified_split, synth_corpus, BinaryLabel, DatasetManifest,
    FundusRecord, MergePolicy, Split, SplitSpec, SynthConfig,
};
use fundusq::explain::{
    grad_cam, grad_cam_tensor, layer_gradients, CamModel, CamOptions, ToyCamNet,
};
use fundusq::imaging::{
    crop_black_borders, preprocess, square_pad, ImageTensor, ImagingError, PreprocessConfig,
};
use fundusq::metrics::{
    auc, bootstrap_ci, relative_improvement, wilcoxon_signed_rank, BinaryReport,
};
use fundusq::qmodel::{
    build_model, images_to_tensor, predict_scores, read_checkpoint_meta, BackboneKind, HeadKind,
    ModelConfig, ModelStage,
};
use fundusq::service::{router, AppState, ServiceConfig, SystemClock};
use fundusq::training::{
    generate_pseudo_labels, load_images, predict_split, pretrain_classification, rmse_loss,
    train_regression, train_student, LossKind, RegressionInit, TrainConfig, TrainEnv,
};

type Outcome = Result<String, String>;

macro_rules! ensure {
    ($cond:expr, $($fmt:tt)+) => {
        let ok: bool = $cond;
        if !ok {
            return Err(format!($($fmt)+));
        }
    };
}

fn err<E: std::fmt::Display>(e: E) -> String {
    e.to_string()
}

struct Criterion {
    name: &'static str,
    limit: Duration,
    run: fn() -> Outcome,
}

fn main() {
    let criteria = [
        Criterion {
            name: "metric reproduction",
            limit: Duration::from_secs(1),
            run: metric_reproduction,
        },
        Criterion {
            name: "split arithmetic",
            limit: Duration::from_secs(5),
            run: split_arithmetic,
        },
        Criterion {
            name: "relative improvement",
            limit: Duration::from_secs(1),
            run: improvement_delta,
        },
        Criterion {
            name: "statistics oracles",
            limit: Duration::from_secs(120),
            run: statistics_oracles,
        },
        Criterion {
            name: "preprocessing invariants",
            limit: Duration::from_secs(120),
            run: preprocessing_invariants,
        },
        Criterion {
            name: "learnability and self-training",
            limit: Duration::from_secs(30 * 60),
            run: learnability,
        },
        Criterion {
            name: "grad-cam correctness",
            limit: Duration::from_secs(5 * 60),
            run: gradcam_correctness,
        },
        Criterion {
            name: "pipeline and service contract",
            limit: Duration::from_secs(10 * 60),
            run: pipeline_and_service,
        },
    ];
    let filter: Vec<String> = std::env::args()
        .skip(1)
        .filter(|a| !a.starts_with('-'))
        .collect();
    let mut failed = 0;
    for c in &criteria {
        if !filter.is_empty() && !filter.iter().any(|f| c.name.contains(f.as_str())) {
            continue;
        }
        let start = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(c.run)).unwrap_or_else(|p| {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(format!("panicked: {msg}"))
        });
        let elapsed = start.elapsed();
        let outcome = match outcome {
            Ok(d) if elapsed > c.limit => Err(format!("{d}; exceeded {:?}", c.limit)),
            other => other,
        };
        match outcome {
            Ok(detail) => println!("PASS {} ({:.1}s): {detail}", c.name, elapsed.as_secs_f64()),
            Err(detail) => {
                failed += 1;
                println!("FAIL {} ({:.1}s): {detail}", c.name, elapsed.as_secs_f64());
            }
        }
    }
    if failed > 0 {
        std::process::exit(1);
    }
}

fn metric_reproduction() -> Outcome {
    let r = BinaryReport::from_counts(6.5, 123, 0, 69, 2);
    ensure!(
        (r.accuracy - 0.990).abs() <= 0.001,
        "accuracy {}",
        r.accuracy
    );
    ensure!((r.mcc - 0.978).abs() <= 0.002, "mcc {}", r.mcc);
    ensure!(
        (r.sensitivity - 0.984).abs() <= 0.001,
        "sensitivity {}",
        r.sensitivity
    );
    ensure!(r.specificity == 1.0, "specificity {}", r.specificity);
    Ok(format!("accuracy {:.4}, MCC {:.4}", r.accuracy, r.mcc))
}

fn quality_records(prefix: &str, n: usize, seed: u64) -> Vec<FundusRecord> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|i| {
            let q = rng.gen_range(2..=20) as f64 / 2.0;
            FundusRecord::new(
                format!("{prefix}-{i:05}"),
                format!("{prefix}-{i:05}.png"),
                "synthetic",
            )
            .with_quality(q)
        })
        .collect()
}

fn split_arithmetic() -> Outcome {
    let manifest = DatasetManifest::new("clinical", quality_records("lab", 1245, 1));
    let split = stratified_split(&manifest, &SplitSpec::counts(932, 104, 209, 7)).map_err(err)?;
    ensure!(
        split.split_sizes() == [932, 104, 209],
        "stage II sizes {:?}",
        split.split_sizes()
    );

    let mut pseudo_records = quality_records("pseudo", 59_910, 2);
    for r in &mut pseudo_records {
        r.pseudo = true;
    }
    let pseudo = DatasetManifest::new("pseudo", pseudo_records);
    let merged = merge_pseudo(&split, &pseudo, &MergePolicy::default()).map_err(err)?;
    let sizes = merged.split_sizes();
    ensure!(sizes == [57_899, 3_047, 209], "stage III sizes {sizes:?}");
    let test_before: Vec<&str> = split
        .records_in(Split::Test)
        .map(|r| r.id.as_str())
        .collect();
    let test_after: Vec<&str> = merged
        .records_in(Split::Test)
        .map(|r| r.id.as_str())
        .collect();
    ensure!(test_before == test_after, "test split changed by merge");
    Ok(format!(
        "932/104/209 and {}/{}/{}",
        sizes[0], sizes[1], sizes[2]
    ))
}

fn improvement_delta() -> Outcome {
    let pct = relative_improvement(0.66, 0.61);
    ensure!((pct - 7.6).abs() <= 0.1, "{pct}");
    Ok(format!("{pct:.2}%"))
}

/// 1-based midranks by counting.
fn oracle_midranks(v: &[f64]) -> Vec<f64> {
    v.iter()
        .map(|x| {
            let less = v.iter().filter(|y| *y < x).count() as f64;
            let equal = v.iter().filter(|y| *y == x).count() as f64;
            less + (equal + 1.0) / 2.0
        })
        .collect()
}

/// Two-sided exact p by enumerating all 2^n sign assignments.
fn oracle_wilcoxon(a: &[f64], b: &[f64]) -> f64 {
    let d: Vec<f64> = a
        .iter()
        .zip(b)
        .map(|(x, y)| x - y)
        .filter(|d| *d != 0.0)
        .collect();
    let ranks = oracle_midranks(&d.iter().map(|x| x.abs()).collect::<Vec<_>>());
    let total: f64 = ranks.iter().sum();
    let w_plus: f64 = d
        .iter()
        .zip(&ranks)
        .filter(|(x, _)| **x > 0.0)
        .map(|(_, r)| r)
        .sum();
    let observed = w_plus.min(total - w_plus);
    let n = d.len();
    let extreme = (0u32..1 << n)
        .filter(|mask| {
            let w: f64 = (0..n)
                .filter(|i| mask & (1 << i) != 0)
                .map(|i| ranks[i])
                .sum();
            w.min(total - w) <= observed + 1e-9
        })
        .count();
    extreme as f64 / (1u64 << n) as f64
}

fn oracle_auc(scores: &[f64], labels: &[BinaryLabel]) -> f64 {
    let (mut sum, mut pairs) = (0.0, 0.0);
    for (sp, lp) in scores.iter().zip(labels) {
        for (sn, ln) in scores.iter().zip(labels) {
            if *lp == BinaryLabel::Good && *ln == BinaryLabel::Poor {
                pairs += 1.0;
                sum += if sp > sn {
                    1.0
                } else if sp == sn {
                    0.5
                } else {
                    0.0
                };
            }
        }
    }
    sum / pairs
}

fn statistics_oracles() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut checked = 0;
    while checked < 200 {
        let n = rng.gen_range(1..=10);
        // one decimal place so ties and zero differences occur
        let a: Vec<f64> = (0..n)
            .map(|_| (rng.gen_range(0.0..3.0f64) * 10.0).round() / 10.0)
            .collect();
        let b: Vec<f64> = (0..n)
            .map(|_| (rng.gen_range(0.0..3.0f64) * 10.0).round() / 10.0)
            .collect();
        if a == b {
            continue;
        }
        let got = wilcoxon_signed_rank(&a, &b).map_err(err)?;
        let want = oracle_wilcoxon(&a, &b);
        ensure!(
            (got.p_two_sided - want).abs() < 1e-12,
            "wilcoxon {a:?} {b:?}: {} vs {want}",
            got.p_two_sided
        );
        checked += 1;
    }

    for set in 0..200 {
        let n = rng.gen_range(2..60);
        let mut labels: Vec<BinaryLabel> = (0..n)
            .map(|_| {
                if rng.gen_bool(0.5) {
                    BinaryLabel::Good
                } else {
                    BinaryLabel::Poor
                }
            })
            .collect();
        labels[0] = BinaryLabel::Good;
        labels[1] = BinaryLabel::Poor;
        let scores: Vec<f64> = (0..n).map(|_| rng.gen_range(2..=20) as f64 / 2.0).collect();
        let got = auc(&scores, &labels).map_err(err)?;
        let want = oracle_auc(&scores, &labels);
        ensure!((got - want).abs() < 1e-12, "auc set {set}: {got} vs {want}");
    }

    let mut contained = 0;
    for suite in 0..100u64 {
        let n = rng.gen_range(5..200);
        let v: Vec<f64> = (0..n).map(|_| rng.gen_range(0.0..2.5)).collect();
        let mean = v.iter().sum::<f64>() / n as f64;
        let (lo, hi) = bootstrap_ci(&v, 1000, 0.95, suite).map_err(err)?;
        if lo <= mean && mean <= hi {
            contained += 1;
        }
    }
    ensure!(
        contained == 100,
        "CI contained the mean in {contained}/100 suites"
    );
    Ok("Wilcoxon 200/200, AUC 200/200, CI 100/100".into())
}

/// Dark frame with bright content somewhere inside.
fn raster(h: usize, w: usize, seed: u64) -> ImageTensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut data: Vec<f32> = (0..h * w * 3)
        .map(|_| rng.gen_range(0..=8) as f32)
        .collect();
    let (y0, x0) = (rng.gen_range(0..h), rng.gen_range(0..w));
    let (y1, x1) = (rng.gen_range(y0..h), rng.gen_range(x0..w));
    let disk = rng.gen_bool(0.5);
    let (cy, cx) = ((y0 + y1) as f32 / 2.0, (x0 + x1) as f32 / 2.0);
    let r = ((y1 - y0).min(x1 - x0) as f32 / 2.0).max(0.5);
    for y in y0..=y1 {
        for x in x0..=x1 {
            if disk && ((y as f32 - cy).powi(2) + (x as f32 - cx).powi(2)).sqrt() > r {
                continue;
            }
            for c in 0..3 {
                data[(y * w + x) * 3 + c] = rng.gen_range(0..=255) as f32;
            }
        }
    }
    // at least one pixel above the threshold
    data[(y0 * w + x0) * 3] = 200.0;
    ImageTensor::new(h, w, data, false).expect("valid raster")
}

fn bits(img: &ImageTensor) -> Vec<u32> {
    img.data().iter().map(|v| v.to_bits()).collect()
}

fn preprocessing_invariants() -> Outcome {
    let cfg = PreprocessConfig::with_target_size(32);
    let threshold = cfg.border_threshold;
    let mut runner = TestRunner::new(PropConfig {
        cases: 500,
        failure_persistence: None,
        ..PropConfig::default()
    });
    let result = runner.run(&(4usize..72, 4usize..72, any::<u64>()), |(h, w, seed)| {
        let img = raster(h, w, seed);
        let cropped = crop_black_borders(&img, threshold).expect("content present");
        let again = crop_black_borders(&cropped, threshold).expect("content present");
        prop_assert_eq!(&again, &cropped, "crop not idempotent");

        let padded = square_pad(&cropped);
        prop_assert_eq!(padded.height(), padded.width());
        prop_assert_eq!(padded.height(), cropped.height().max(cropped.width()));
        prop_assert_eq!(padded.sum(), cropped.sum(), "padding changed the pixel sum");

        let a = preprocess(&img, &cfg).expect("preprocess");
        let b = preprocess(&img, &cfg).expect("preprocess");
        prop_assert_eq!(bits(&a), bits(&b), "preprocess not deterministic");
        prop_assert_eq!((a.height(), a.width()), (32, 32));
        prop_assert!(a.data().iter().all(|v| (0.0..=1.0).contains(v)));

        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
        let black: Vec<f32> = (0..h * w * 3)
            .map(|_| rng.gen_range(0..=threshold) as f32)
            .collect();
        let black = ImageTensor::new(h, w, black, false).expect("valid raster");
        prop_assert!(matches!(
            preprocess(&black, &cfg),
            Err(ImagingError::AllBlackImage)
        ));
        Ok(())
    });
    result.map_err(err)?;
    Ok("500 rasters: crop idempotent, pad sum conserved, deterministic, all-black rejected".into())
}

fn small_model(head: HeadKind, seed: u64) -> ModelConfig {
    ModelConfig {
        regression_hidden: 64,
        ..ModelConfig::new(BackboneKind::SmallCnnTest, head, 32).with_seed(seed)
    }
}

fn stage_config(loss: LossKind, epochs: usize, seed: u64) -> TrainConfig {
    let mut c = TrainConfig {
        loss,
        batch_size: 16,
        max_epochs: epochs,
        patience: 4,
        seed,
        ..TrainConfig::default()
    };
    c.optimizer.learning_rate = 1e-3;
    c
}

fn test_mae(
    model: &fundusq::qmodel::QualityModel,
    manifest: &DatasetManifest,
    root: &Path,
) -> Result<f64, String> {
    let (_, p, r) = predict_split(model, manifest, Some(Split::Test), root).map_err(err)?;
    let r: Vec<f64> = r.into_iter().map(|v| v.expect("labeled")).collect();
    Ok(p.iter().zip(&r).map(|(a, b)| (a - b).abs()).sum::<f64>() / r.len() as f64)
}

fn overfit_one_batch(root: &Path) -> Result<f64, String> {
    let corpus = synth_corpus(
        &SynthConfig {
            image_size: 64,
            id_prefix: "fit".into(),
            ..SynthConfig::default()
        },
        8,
        99,
        root,
    )
    .map_err(err)?;
    let pre = PreprocessConfig::with_target_size(32);
    let refs: Vec<&FundusRecord> = corpus.manifest.records.iter().collect();
    let images = load_images(&refs, root, &pre).map_err(err)?;
    let targets: Vec<f32> = refs
        .iter()
        .map(|r| r.quality.expect("labeled").value() as f32)
        .collect();
    let model = build_model(&small_model(HeadKind::Regress1, 5), &pre).map_err(err)?;
    let x = images_to_tensor(&images, 32).map_err(err)?;
    let y = Tensor::from_vec(targets.clone(), 8, &Device::Cpu).map_err(err)?;
    let mut opt = AdamW::new(
        model.trainable_vars(0),
        ParamsAdamW {
            lr: 1e-3,
            weight_decay: 0.0,
            ..ParamsAdamW::default()
        },
    )
    .map_err(err)?;
    let mae = |model: &fundusq::qmodel::QualityModel| -> Result<f64, String> {
        let p = predict_scores(model, &images).map_err(err)?;
        Ok(p.iter()
            .zip(&targets)
            .map(|(a, b)| (a - b).abs() as f64)
            .sum::<f64>()
            / 8.0)
    };
    let mut last = f64::INFINITY;
    for step in 1..=1500 {
        let loss = rmse_loss(&model.forward_t(&x, true).map_err(err)?, &y).map_err(err)?;
        opt.backward_step(&loss).map_err(err)?;
        if step % 50 == 0 {
            last = mae(&model)?;
            if last < 0.1 {
                break;
            }
        }
    }
    Ok(last)
}

fn learnability() -> Outcome {
    let dir = tempfile::tempdir().map_err(err)?;
    let root = dir.path();
    let labeled_cfg = SynthConfig {
        image_size: 64,
        with_trinary: true,
        ..SynthConfig::default()
    };
    let unlabeled_cfg = SynthConfig {
        image_size: 64,
        with_quality: false,
        id_prefix: "unl".into(),
        ..SynthConfig::default()
    };
    let labeled = synth_corpus(&labeled_cfg, 2000, 11, root)
        .map_err(err)?
        .manifest;
    let manifest =
        stratified_split(&labeled, &SplitSpec::fractions(0.75, 0.1, 0.15, 11)).map_err(err)?;
    let pool = synth_corpus(&unlabeled_cfg, 2000, 12, root)
        .map_err(err)?
        .manifest;

    let pre = PreprocessConfig::with_target_size(32);
    let env = TrainEnv::new(root, root.join("runs"));
    let stage1 = pretrain_classification(
        &small_model(HeadKind::Classify3, 11),
        &pre,
        &manifest,
        &stage_config(LossKind::CategoricalCrossEntropy, 6, 11),
        &env,
    )
    .map_err(err)?;
    let reg = stage_config(LossKind::Rmse, 20, 11);
    let teacher = train_regression(
        &RegressionInit::Checkpoint(stage1.report.checkpoint.clone()),
        &manifest,
        &reg,
        &env,
    )
    .map_err(err)?;
    let teacher_mae = test_mae(&teacher.model, &manifest, root)?;
    let pseudo = generate_pseudo_labels(&teacher.report.checkpoint, &pool, root).map_err(err)?;
    let student = train_student(
        &teacher.report.checkpoint,
        &manifest,
        &pseudo,
        &stage_config(LossKind::Rmse, 12, 11),
        &env,
    )
    .map_err(err)?;
    let student_mae = test_mae(&student.model, &manifest, root)?;
    let overfit = overfit_one_batch(root)?;

    let detail = format!(
        "4000 images; stage II test MAE {teacher_mae:.3}, student {student_mae:.3}, 8-image overfit MAE {overfit:.3}"
    );
    ensure!(teacher_mae < 1.0, "{detail}: stage II MAE not < 1.0");
    ensure!(
        student_mae <= teacher_mae + 0.1,
        "{detail}: student worse than teacher + 0.1"
    );
    ensure!(overfit < 0.1, "{detail}: overfit MAE not < 0.1");
    Ok(detail)
}

fn toy_net(rng: &mut ChaCha8Rng, block_diagonal: bool) -> ToyCamNet {
    let dev = Device::Cpu;
    let mut kernel = |out: usize, inp: usize, k: usize| {
        let v: Vec<f64> = (0..out * inp * k * k)
            .map(|i| {
                let (o, c) = (i / (inp * k * k), (i / (k * k)) % inp);
                if block_diagonal && o != c {
                    0.0
                } else {
                    rng.gen_range(-0.3..1.0)
                }
            })
            .collect();
        Tensor::from_vec(v, (out, inp, k, k), &dev).expect("kernel")
    };
    let conv1 = kernel(2, 2, 3);
    let conv2 = kernel(2, 2, 3);
    let head = if block_diagonal {
        Tensor::new(&[1.0f64, 0.0], &dev)
    } else {
        Tensor::new(&[0.7f64, -0.4], &dev)
    }
    .expect("head");
    ToyCamNet {
        conv1,
        conv2: Some(conv2),
        head,
    }
}

fn toy_input(rng: &mut ChaCha8Rng, size: usize) -> Tensor {
    let v: Vec<f64> = (0..2 * size * size)
        .map(|_| rng.gen_range(0.0..1.0))
        .collect();
    Tensor::from_vec(v, (1, 2, size, size), &Device::Cpu).expect("input")
}

fn scalar(t: &Tensor) -> f64 {
    t.flatten_all()
        .and_then(|t| t.to_vec1::<f64>())
        .expect("scalar")[0]
}

fn gradcam_correctness() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let eps = 1e-6;
    let mut worst: f64 = 0.0;
    let mut compared = 0;
    for _ in 0..4 {
        let net = toy_net(&mut rng, false);
        let x = toy_input(&mut rng, 9);
        for layer in ["conv1", "conv2"] {
            let (feats, grad) = layer_gradients(&net, &x, layer).map_err(err)?;
            let f = feats
                .flatten_all()
                .and_then(|t| t.to_vec1::<f64>())
                .map_err(err)?;
            let g = grad
                .flatten_all()
                .and_then(|t| t.to_vec1::<f64>())
                .map_err(err)?;
            for i in 0..f.len() {
                let at = |delta: f64| -> Result<f64, String> {
                    let mut v = f.clone();
                    v[i] += delta;
                    let t = Tensor::from_vec(v, feats.dims(), &Device::Cpu).map_err(err)?;
                    Ok(scalar(&net.cam_output(&t, layer).map_err(err)?))
                };
                let fd = (at(eps)? - at(-eps)?) / (2.0 * eps);
                let rel = (g[i] - fd).abs() / fd.abs().max(g[i].abs()).max(1e-6);
                worst = worst.max(rel);
                compared += 1;
                ensure!(
                    rel <= 1e-3,
                    "{layer}[{i}]: autograd {} vs finite difference {fd}",
                    g[i]
                );
            }
        }
    }

    // range on toy networks and a real model
    let mut ranges = Vec::new();
    for _ in 0..10 {
        let net = toy_net(&mut rng, false);
        let cam = grad_cam_tensor(&net, &toy_input(&mut rng, 12), None, CamOptions::default())
            .map_err(err)?;
        ranges.push(cam.values);
    }
    let pre = PreprocessConfig::with_target_size(32);
    let model = build_model(&small_model(HeadKind::Regress1, 3), &pre).map_err(err)?;
    for seed in 0..3 {
        let img = preprocess(&raster(40, 40, seed), &pre).map_err(err)?;
        for layer in model.layer_names() {
            ranges.push(
                grad_cam(&model, &img, Some(layer), CamOptions::default())
                    .map_err(err)?
                    .values,
            );
        }
    }
    for v in &ranges {
        let lo = v.iter().copied().fold(f32::INFINITY, f32::min);
        let hi = v.iter().copied().fold(f32::NEG_INFINITY, f32::max);
        ensure!(
            lo == 0.0 && (hi == 1.0 || hi == 0.0),
            "heatmap range [{lo}, {hi}]"
        );
        ensure!(hi == 1.0, "constant heatmap on a non-degenerate input");
    }

    // channel 1 is invisible to the head, so a pattern that only excites
    // channel 1 must not attract CAM mass
    let size = 24;
    let net = toy_net(&mut rng, true);
    let mut v = vec![0.0f64; 2 * size * size];
    let mut put = |c: usize, y0: usize, x0: usize| {
        for y in y0..y0 + 6 {
            for x in x0..x0 + 6 {
                v[c * size * size + y * size + x] = rng.gen_range(0.5..1.0);
            }
        }
    };
    put(0, 3, 3);
    put(1, 15, 15);
    let x = Tensor::from_vec(v.clone(), (1, 2, size, size), &Device::Cpu).map_err(err)?;
    let mut occluded = v;
    for y in 15..21 {
        for xx in 15..21 {
            occluded[size * size + y * size + xx] = 0.0;
        }
    }
    let xo = Tensor::from_vec(occluded, (1, 2, size, size), &Device::Cpu).map_err(err)?;
    let score = |t: &Tensor| -> Result<f64, String> {
        let f = net.cam_features(t, "conv2").map_err(err)?;
        Ok(scalar(&net.cam_output(&f, "conv2").map_err(err)?))
    };
    let (s, so) = (score(&x)?, score(&xo)?);
    ensure!(
        (s - so).abs() <= 1e-12 * s.abs().max(1.0),
        "region B is not occlusion-insensitive: {s} vs {so}"
    );
    let cam = grad_cam_tensor(&net, &x, Some("conv2"), CamOptions::default()).map_err(err)?;
    let mass_b = cam.region_mean(15, 21, 15, 21);
    let mass_a = cam.region_mean(3, 9, 3, 9);
    ensure!(
        mass_b <= 0.05,
        "occlusion-insensitive region mean CAM {mass_b}"
    );
    ensure!(
        mass_a > mass_b,
        "relevant region mean {mass_a} not above {mass_b}"
    );

    Ok(format!(
        "{compared} gradients, worst relative error {worst:.2e}; {} heatmaps in [0, 1]; insensitive region mean {mass_b:.3}",
        ranges.len()
    ))
}

const BOUNDARY: &str = "fundusq-acceptance-boundary";

fn score_request(png: &[u8], query: &str) -> Request<Body> {
    let mut body = format!(
        "--{BOUNDARY}\r\nContent-Disposition: form-data; name=\"image\"; filename=\"x.png\"\r\nContent-Type: image/png\r\n\r\n"
    )
    .into_bytes();
    body.extend_from_slice(png);
    body.extend_from_slice(format!("\r\n--{BOUNDARY}--\r\n").as_bytes());
    Request::post(format!("/v1/score{query}"))
        .header(
            "content-type",
            format!("multipart/form-data; boundary={BOUNDARY}"),
        )
        .body(Body::from(body))
        .expect("request")
}

async fn call(app: &axum::Router, req: Request<Body>) -> (StatusCode, serde_json::Value) {
    let res = app.clone().oneshot(req).await.expect("infallible");
    let status = res.status();
    let bytes = axum::body::to_bytes(res.into_body(), 1 << 24)
        .await
        .expect("body");
    let json = serde_json::from_slice(&bytes).unwrap_or_else(|_| {
        serde_json::Value::String(String::from_utf8_lossy(&bytes).into_owned())
    });
    (status, json)
}

fn check_checkpoints(paths: &[PathBuf]) -> Result<(), String> {
    let want = [
        ModelStage::Pretrain,
        ModelStage::Regression,
        ModelStage::Student,
    ];
    ensure!(paths.len() == 3, "{} checkpoints", paths.len());
    let mut versions = Vec::new();
    for (p, stage) in paths.iter().zip(want) {
        let bytes = std::fs::read(p).map_err(err)?;
        let (meta, blob) = read_checkpoint_meta(&bytes).map_err(err)?;
        ensure!(
            meta.stage == stage,
            "{} tagged {}, expected {stage}",
            p.display(),
            meta.stage
        );
        ensure!(
            meta.content_hash == hex::encode(Sha256::digest(blob)),
            "{}: content hash mismatch",
            p.display()
        );
        ensure!(
            meta.metrics_snapshot.is_some(),
            "{}: no metrics snapshot",
            p.display()
        );
        versions.push(meta.content_hash);
    }
    versions.sort();
    versions.dedup();
    ensure!(versions.len() == 3, "stage checkpoints share a version");
    Ok(())
}

fn pipeline_and_service() -> Outcome {
    let dir = tempfile::tempdir().map_err(err)?;
    let root = dir.path();
    let data = root.join("data");
    let labeled = synth_corpus(
        &SynthConfig {
            image_size: 48,
            with_trinary: true,
            ..SynthConfig::default()
        },
        240,
        21,
        &data,
    )
    .map_err(err)?;
    labeled
        .manifest
        .save(data.join("labeled.jsonl"))
        .map_err(err)?;
    let pool = synth_corpus(
        &SynthConfig {
            image_size: 48,
            with_quality: false,
            id_prefix: "unl".into(),
            ..SynthConfig::default()
        },
        160,
        22,
        &data,
    )
    .map_err(err)?;
    pool.manifest
        .save(data.join("unlabeled.jsonl"))
        .map_err(err)?;

    let train = stage_config(LossKind::Rmse, 3, 0);
    let resolved = Resolved {
        seed: 21,
        out_dir: root.join("runs"),
        log_level: "warn".into(),
        file: RunConfig {
            preprocess: Some(PreprocessConfig::with_target_size(32)),
            model: Some(small_model(HeadKind::Classify3, 21)),
            train: Some(train),
            pipeline: Some(PipelineConfig {
                trinary_manifest: data.join("labeled.jsonl"),
                quality_manifest: data.join("labeled.jsonl"),
                unlabeled_manifest: Some(data.join("unlabeled.jsonl")),
            }),
            ..RunConfig::default()
        },
    };
    let report = pipeline(&resolved).map_err(err)?;
    let checkpoints: Vec<PathBuf> = report.stages.iter().map(|s| s.checkpoint.clone()).collect();
    check_checkpoints(&checkpoints)?;
    let final_ckpt = report.final_checkpoint.clone();

    let png =
        std::fs::read(resolve_uri(&data, &labeled.manifest.records[0].image_uri)).map_err(err)?;
    let log = root.join("annotations.jsonl");
    let queue: DatasetManifest = DatasetManifest::new(
        "queue",
        (0..12)
            .map(|i| FundusRecord::new(format!("q-{i:02}"), format!("q-{i:02}.png"), "clinic"))
            .collect(),
    );
    queue.save(root.join("queue.jsonl")).map_err(err)?;
    let config = ServiceConfig {
        checkpoint: Some(final_ckpt),
        scale: Some("builtin".into()),
        queue_manifest: Some(root.join("queue.jsonl")),
        annotation_log: log.clone(),
        ..ServiceConfig::default()
    };
    let rt = tokio::runtime::Builder::new_current_thread()
        .enable_all()
        .build()
        .map_err(err)?;
    rt.block_on(async {
        let app = router(Arc::new(AppState::from_config(config.clone(), Arc::new(SystemClock)).map_err(err)?));
        let (s1, a) = call(&app, score_request(&png, "")).await;
        let (s2, b) = call(&app, score_request(&png, "")).await;
        ensure!(s1 == StatusCode::OK && s2 == StatusCode::OK, "score status {s1}/{s2}: {a}");
        ensure!(a == b, "repeat scores differ: {a} vs {b}");
        let score = a["score"].as_f64().ok_or_else(|| "score missing".to_string())?;
        ensure!(a["threshold"].as_f64() == Some(6.5), "default threshold {}", a["threshold"]);
        let want = if score >= 6.5 { "good" } else { "poor" };
        ensure!(a["label"].as_str().map(str::to_lowercase).as_deref() == Some(want), "label {} for {score}", a["label"]);
        let (_, at) = call(&app, score_request(&png, &format!("?threshold={score}"))).await;
        ensure!(at["label"].as_str().map(str::to_lowercase).as_deref() == Some("good"), "score equal to threshold gave {}", at["label"]);

        let mut acked = BTreeMap::new();
        for (i, rec) in queue.records.iter().enumerate() {
            let body = serde_json::json!({
                "record_id": format!("r-{i}"),
                "image_id": rec.id,
                "grader_id": "g1",
                "score": 1.0 + (i as f64) * 0.5,
                "scale_version": "1.0",
            });
            let req = Request::post("/v1/annotation")
                .header("content-type", "application/json")
                .body(Body::from(body.to_string()))
                .map_err(err)?;
            let (status, resp) = call(&app, req).await;
            if status == StatusCode::CREATED {
                acked.insert(rec.id.clone(), body["score"].as_f64().unwrap_or_default());
            } else {
                return Err(format!("annotation {i}: {status} {resp}"));
            }
        }
        drop(app);

        // crash mid-append
        use std::io::Write;
        let mut f = std::fs::OpenOptions::new().append(true).open(&log).map_err(err)?;
        f.write_all(br#"{"record_id":"r-torn","image_id":"q-0"#).map_err(err)?;
        drop(f);

        let restarted = AppState::from_config(config.clone(), Arc::new(SystemClock)).map_err(err)?;
        ensure!(restarted.annotation_count() == acked.len(), "{} of {} records after restart", restarted.annotation_count(), acked.len());
        let app = router(Arc::new(restarted));
        let (_, again) = call(&app, score_request(&png, "")).await;
        ensure!(again == a, "score changed across restart: {again} vs {a}");
        let res = app
            .clone()
            .oneshot(Request::get("/v1/annotation/export").body(Body::empty()).map_err(err)?)
            .await
            .map_err(err)?;
        let text = axum::body::to_bytes(res.into_body(), 1 << 24).await.map_err(err)?;
        let exported = DatasetManifest::parse(&String::from_utf8_lossy(&text)).map_err(err)?;
        let got: BTreeMap<String, f64> = exported
            .records
            .iter()
            .map(|r| (r.id.clone(), r.quality.map(|q| q.value()).unwrap_or(f64::NAN)))
            .collect();
        ensure!(got == acked, "exported labels differ from acknowledged ones");
        Ok(format!(
            "3 checkpoints tagged pretrain/regression/student; score {score:.3} deterministic, label at threshold 6.5 {}; {} acknowledged annotations survive restart",
            a["label"], acked.len()
        ))
    })
}
