//! Thresholded Good/Poor metrics, AUC and bootstrap intervals on a fixed
//! set of scores.
//!
//! cargo run --example binary_metrics

use fundusq::datasets::BinaryLabel;
use fundusq::metrics::{auc, binary_report, bootstrap_ci, BinaryReport, DEFAULT_THRESHOLD};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    // 123 true positives, 2 false negatives, 69 true negatives, no false positives
    let from_counts = BinaryReport::from_counts(DEFAULT_THRESHOLD, 123, 0, 69, 2);
    println!(
        "accuracy {:.3}  MCC {:.3}  sensitivity {:.3}  specificity {:.3}",
        from_counts.accuracy, from_counts.mcc, from_counts.sensitivity, from_counts.specificity
    );

    let scores = [8.1, 7.4, 6.9, 6.6, 6.4, 5.8, 5.1, 4.2, 3.3, 7.7, 2.5, 6.0];
    let labels = [
        BinaryLabel::Good,
        BinaryLabel::Good,
        BinaryLabel::Good,
        BinaryLabel::Poor,
        BinaryLabel::Good,
        BinaryLabel::Poor,
        BinaryLabel::Poor,
        BinaryLabel::Poor,
        BinaryLabel::Poor,
        BinaryLabel::Good,
        BinaryLabel::Poor,
        BinaryLabel::Poor,
    ];
    for t in [6.0, 6.5, 7.0] {
        let r = binary_report(&scores, &labels, t)?;
        println!(
            "threshold {t}: tp={} fp={} tn={} fn={} mcc={:.3}",
            r.tp, r.fp, r.tn, r.fn_, r.mcc
        );
    }
    println!("AUC {:.3}", auc(&scores, &labels)?);

    let errors = [0.2, 0.5, 0.1, 0.9, 0.4, 0.3, 0.7, 0.2, 0.6, 0.1];
    let (lo, hi) = bootstrap_ci(&errors, 1000, 0.95, 42)?;
    println!("mean absolute error 95% interval [{lo:.3}, {hi:.3}]");
    Ok(())
}
