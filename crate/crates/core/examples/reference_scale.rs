//! Prints the bundled reference scale and shows validation of a broken
//! copy and of individual annotations.
//!
//! cargo run --example reference_scale

use fundusq::scale::{shipped_scale, validate_annotation, validate_scale, AnnotationRecord};

fn main() {
    let scale = shipped_scale();
    println!(
        "scale version {} with {} exemplars",
        scale.version,
        scale.exemplars.len()
    );
    for e in &scale.exemplars {
        println!("  {:>4.1}  {}  ({})", e.score, e.image_uri, e.source);
    }

    let mut broken = scale.clone();
    broken.exemplars[3].score = 3.2;
    broken.exemplars.retain(|e| e.score < 9.0);
    if let Err(violations) = validate_scale(&broken, None) {
        for v in violations {
            println!("violation: {v}");
        }
    }

    for score in [6.5, 6.3, 11.0] {
        let rec = AnnotationRecord {
            record_id: format!("r-{score}"),
            image_id: "img-1".into(),
            grader_id: "g1".into(),
            score,
            timestamp: chrono::Utc::now(),
            scale_version: scale.version.clone(),
        };
        match validate_annotation(&rec, &scale) {
            Ok(()) => println!("{score}: accepted"),
            Err(v) => println!(
                "{score}: rejected ({})",
                v.iter()
                    .map(ToString::to_string)
                    .collect::<Vec<_>>()
                    .join("; ")
            ),
        }
    }
}
