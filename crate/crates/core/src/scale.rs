//! The reference scale (exemplar images anchoring grades 1 to 10) and
//! validation and export of grader annotations.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::Path;

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::datasets::{
    on_half_grid, snap_half, DatasetManifest, FundusRecord, ManifestHeader, QualityScore,
    MANIFEST_VERSION, MAX_SCORE, MIN_SCORE,
};

const SHIPPED_SCALE: &str = include_str!("../assets/reference_scale.json");
/// Highest lowest-exemplar score and lowest highest-exemplar score a scale
/// may have and still span the grading range.
const COVERAGE_LOW: f64 = 2.0;
const COVERAGE_HIGH: f64 = 9.5;

#[derive(Debug, Error)]
pub enum ScaleError {
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Exemplar {
    pub score: f64,
    pub image_uri: String,
    /// Database the image was drawn from.
    pub source: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReferenceScale {
    pub version: String,
    pub exemplars: Vec<Exemplar>,
}

impl ReferenceScale {
    pub fn load(path: impl AsRef<Path>) -> Result<Self, ScaleError> {
        Ok(serde_json::from_slice(&fs::read(path)?)?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), ScaleError> {
        fs::write(path, serde_json::to_vec_pretty(self)?)?;
        Ok(())
    }
}

/// The bundled 28-exemplar scale.
pub fn shipped_scale() -> ReferenceScale {
    serde_json::from_str(SHIPPED_SCALE).expect("bundled scale is valid JSON")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Violation {
    OffGrid { index: usize, score: f64 },
    OutOfRange { index: usize, score: f64 },
    Coverage { message: String },
    DanglingUri { index: usize, uri: String },
    Version { expected: String, found: String },
}

impl std::fmt::Display for Violation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Violation::OffGrid { index, score } => {
                write!(f, "entry {index}: score {score} is not a multiple of 0.5")
            }
            Violation::OutOfRange { index, score } => {
                write!(f, "entry {index}: score {score} outside [1, 10]")
            }
            Violation::Coverage { message } => write!(f, "coverage: {message}"),
            Violation::DanglingUri { index, uri } => {
                write!(f, "entry {index}: image {uri} not found")
            }
            Violation::Version { expected, found } => {
                write!(f, "scale version {found}, active is {expected}")
            }
        }
    }
}

fn score_violations(index: usize, score: f64, out: &mut Vec<Violation>) {
    if !(MIN_SCORE..=MAX_SCORE).contains(&score) {
        out.push(Violation::OutOfRange { index, score });
    }
    if !on_half_grid(score) {
        out.push(Violation::OffGrid { index, score });
    }
}

fn is_remote(uri: &str) -> bool {
    uri.contains("://") && !uri.starts_with("file://")
}

/// Checks grid alignment, range, coverage and (when `image_root` is given)
/// that local exemplar images exist. All violations are returned.
pub fn validate_scale(
    scale: &ReferenceScale,
    image_root: Option<&Path>,
) -> Result<(), Vec<Violation>> {
    let mut v = Vec::new();
    if scale.version.trim().is_empty() {
        v.push(Violation::Version {
            expected: "non-empty".into(),
            found: scale.version.clone(),
        });
    }
    for (i, e) in scale.exemplars.iter().enumerate() {
        score_violations(i, e.score, &mut v);
        if let Some(root) = image_root.filter(|_| !is_remote(&e.image_uri)) {
            if !crate::datasets::resolve_uri(root, &e.image_uri).exists() {
                v.push(Violation::DanglingUri {
                    index: i,
                    uri: e.image_uri.clone(),
                });
            }
        }
    }
    if scale.exemplars.is_empty() {
        v.push(Violation::Coverage {
            message: "no exemplars".into(),
        });
    } else {
        let scores: Vec<f64> = scale.exemplars.iter().map(|e| e.score).collect();
        let lo = scores.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if lo > COVERAGE_LOW || hi < COVERAGE_HIGH {
            v.push(Violation::Coverage {
                message: format!("exemplars span [{lo}, {hi}], need min <= {COVERAGE_LOW} and max >= {COVERAGE_HIGH}"),
            });
        }
        if scores.windows(2).any(|w| w[0] > w[1]) {
            v.push(Violation::Coverage {
                message: "exemplars are not in ascending score order".into(),
            });
        }
    }
    if v.is_empty() {
        Ok(())
    } else {
        Err(v)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnnotationRecord {
    pub record_id: String,
    pub image_id: String,
    pub grader_id: String,
    pub score: f64,
    pub timestamp: DateTime<Utc>,
    pub scale_version: String,
}

pub fn validate_annotation(
    rec: &AnnotationRecord,
    scale: &ReferenceScale,
) -> Result<(), Vec<Violation>> {
    let mut v = Vec::new();
    score_violations(0, rec.score, &mut v);
    if rec.scale_version != scale.version {
        v.push(Violation::Version {
            expected: scale.version.clone(),
            found: rec.scale_version.clone(),
        });
    }
    if v.is_empty() {
        Ok(())
    } else {
        Err(v)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExportPolicy {
    /// The annotation with the latest timestamp wins; log order breaks ties.
    #[default]
    LatestWins,
    /// Mean of all annotations, snapped to the half grid (ties round up).
    Average,
}

impl std::fmt::Display for ExportPolicy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            ExportPolicy::LatestWins => "latest_wins",
            ExportPolicy::Average => "average",
        })
    }
}

/// One quality-labeled record per annotated image, in image-id order.
///
/// Image URI and source come from `catalog` when it lists the image;
/// otherwise the image id doubles as the URI. The manifest header records
/// the policy, and its timestamp is that of the newest annotation, so the
/// output depends only on the annotations.
pub fn export_labels(
    annotations: &[AnnotationRecord],
    policy: ExportPolicy,
    catalog: Option<&DatasetManifest>,
) -> DatasetManifest {
    let mut groups: BTreeMap<&str, Vec<(usize, &AnnotationRecord)>> = BTreeMap::new();
    for (i, a) in annotations.iter().enumerate() {
        groups.entry(a.image_id.as_str()).or_default().push((i, a));
    }
    let lookup: HashMap<&str, &FundusRecord> = catalog
        .map(|m| m.records.iter().map(|r| (r.id.as_str(), r)).collect())
        .unwrap_or_default();

    let records = groups
        .into_iter()
        .map(|(image_id, group)| {
            let score = match policy {
                ExportPolicy::LatestWins => {
                    group
                        .iter()
                        .max_by(|(i, a), (j, b)| a.timestamp.cmp(&b.timestamp).then(i.cmp(j)))
                        .expect("non-empty group")
                        .1
                        .score
                }
                ExportPolicy::Average => {
                    snap_half(group.iter().map(|(_, a)| a.score).sum::<f64>() / group.len() as f64)
                }
            };
            let mut record = match lookup.get(image_id) {
                Some(r) => FundusRecord::new(image_id, r.image_uri.clone(), r.source.clone()),
                None => FundusRecord::new(image_id, image_id, "annotation"),
            };
            record.quality = Some(QualityScore::clamped(score));
            record
        })
        .collect();

    let created = annotations
        .iter()
        .map(|a| a.timestamp)
        .max()
        .unwrap_or(DateTime::<Utc>::UNIX_EPOCH);
    DatasetManifest {
        header: ManifestHeader {
            version: MANIFEST_VERSION,
            source: format!("annotations:{policy}"),
            created: created.to_rfc3339_opts(chrono::SecondsFormat::Secs, true),
        },
        records,
        split_assignment: None,
    }
}
