//! Manifest catalog of fundus images and their labels.
//!
//! A manifest file is UTF-8 JSON lines: the first line is a header object
//! `{version, source, created}`, every following line one record with keys
//! `id, image_uri, source, quality?, trinary?, binary?, pseudo?, split?`.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub mod synth;

pub use synth::{severity_to_score, synth_corpus, SynthConfig, SynthCorpus};

pub const MIN_SCORE: f64 = 1.0;
pub const MAX_SCORE: f64 = 10.0;
pub const MANIFEST_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("manifest parse error at line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("invalid record {id}: {message}")]
    Validation { id: String, message: String },
    #[error("requested {requested} records but only {available} available")]
    InsufficientData { requested: usize, available: usize },
    #[error("invalid split spec: {0}")]
    InvalidSpec(String),
    #[error("record id {0} present in both manifests")]
    IdCollision(String),
    #[error("record {0} has no quality score")]
    MissingQuality(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Image(#[from] image::ImageError),
}

pub type Result<T> = std::result::Result<T, DatasetError>;

/// A grade on the 1 to 10 quality scale.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd, Serialize, Deserialize)]
#[serde(try_from = "f64", into = "f64")]
pub struct QualityScore(f64);

impl QualityScore {
    pub fn new(value: f64) -> std::result::Result<Self, String> {
        if value.is_finite() && (MIN_SCORE..=MAX_SCORE).contains(&value) {
            Ok(Self(value))
        } else {
            Err(format!("quality {value} outside [1, 10]"))
        }
    }

    /// Clamps any finite value into range. Used for model outputs.
    pub fn clamped(value: f64) -> Self {
        Self(value.clamp(MIN_SCORE, MAX_SCORE))
    }

    pub fn value(self) -> f64 {
        self.0
    }

    /// True when the score lies on the 0.5 annotation grid.
    pub fn on_grid(self) -> bool {
        on_half_grid(self.0)
    }
}

impl TryFrom<f64> for QualityScore {
    type Error = String;
    fn try_from(v: f64) -> std::result::Result<Self, String> {
        Self::new(v)
    }
}

impl From<QualityScore> for f64 {
    fn from(s: QualityScore) -> f64 {
        s.0
    }
}

impl fmt::Display for QualityScore {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

pub fn on_half_grid(value: f64) -> bool {
    let doubled = value * 2.0;
    (doubled - doubled.round()).abs() < 1e-9
}

pub fn snap_half(value: f64) -> f64 {
    (value * 2.0).round() / 2.0
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrinaryLabel {
    Good,
    Usable,
    Reject,
}

impl TrinaryLabel {
    pub const ALL: [TrinaryLabel; 3] = [Self::Good, Self::Usable, Self::Reject];

    pub fn index(self) -> usize {
        match self {
            Self::Good => 0,
            Self::Usable => 1,
            Self::Reject => 2,
        }
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BinaryLabel {
    Good,
    Poor,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Validation,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Validation, Split::Test];
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FundusRecord {
    pub id: String,
    pub image_uri: String,
    pub source: String,
    pub quality: Option<QualityScore>,
    pub trinary: Option<TrinaryLabel>,
    pub binary: Option<BinaryLabel>,
    pub pseudo: bool,
}

impl FundusRecord {
    pub fn new(
        id: impl Into<String>,
        image_uri: impl Into<String>,
        source: impl Into<String>,
    ) -> Self {
        Self {
            id: id.into(),
            image_uri: image_uri.into(),
            source: source.into(),
            quality: None,
            trinary: None,
            binary: None,
            pseudo: false,
        }
    }

    pub fn with_quality(mut self, q: f64) -> Self {
        self.quality = Some(QualityScore::new(q).expect("quality in range"));
        self
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestHeader {
    pub version: u32,
    pub source: String,
    pub created: String,
}

impl ManifestHeader {
    pub fn now(source: impl Into<String>) -> Self {
        Self {
            version: MANIFEST_VERSION,
            source: source.into(),
            created: chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Secs, true),
        }
    }
}

/// One line of the manifest file.
#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RecordLine {
    id: String,
    image_uri: String,
    source: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    quality: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    trinary: Option<TrinaryLabel>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    binary: Option<BinaryLabel>,
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pseudo: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    split: Option<Split>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetManifest {
    pub header: ManifestHeader,
    pub records: Vec<FundusRecord>,
    pub split_assignment: Option<BTreeMap<String, Split>>,
}

impl DatasetManifest {
    pub fn new(source: impl Into<String>, records: Vec<FundusRecord>) -> Self {
        Self {
            header: ManifestHeader::now(source),
            records,
            split_assignment: None,
        }
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn split_of(&self, id: &str) -> Option<Split> {
        self.split_assignment.as_ref()?.get(id).copied()
    }

    pub fn records_in(&self, split: Split) -> impl Iterator<Item = &FundusRecord> {
        self.records
            .iter()
            .filter(move |r| self.split_of(&r.id) == Some(split))
    }

    pub fn split_sizes(&self) -> [usize; 3] {
        let mut sizes = [0; 3];
        if let Some(map) = &self.split_assignment {
            for s in map.values() {
                sizes[*s as usize] += 1;
            }
        }
        sizes
    }

    /// Checks every manifest invariant, naming the first offending record.
    pub fn validate(&self) -> Result<()> {
        let mut seen = HashSet::with_capacity(self.records.len());
        for r in &self.records {
            let fail = |message: &str| DatasetError::Validation {
                id: r.id.clone(),
                message: message.to_string(),
            };
            if r.id.is_empty() {
                return Err(fail("empty id"));
            }
            if !seen.insert(r.id.as_str()) {
                return Err(fail("duplicate id"));
            }
            if r.image_uri.is_empty() {
                return Err(fail("missing image_uri"));
            }
            if r.pseudo && r.quality.is_none() {
                return Err(fail("pseudo record without quality"));
            }
        }
        if let Some(map) = &self.split_assignment {
            if let Some(id) = map.keys().find(|id| !seen.contains(id.as_str())) {
                return Err(DatasetError::Validation {
                    id: id.clone(),
                    message: "split assigned to unknown record".into(),
                });
            }
        }
        Ok(())
    }

    pub fn parse(text: &str) -> Result<Self> {
        Self::from_reader(text.as_bytes())
    }

    pub fn from_reader(reader: impl std::io::Read) -> Result<Self> {
        let mut lines = BufReader::new(reader).lines().enumerate();
        let header = loop {
            match lines.next() {
                None => {
                    return Err(DatasetError::Parse {
                        line: 1,
                        message: "missing header".into(),
                    })
                }
                Some((i, line)) => {
                    let line = line?;
                    if line.trim().is_empty() {
                        continue;
                    }
                    let header: ManifestHeader =
                        serde_json::from_str(&line).map_err(|e| DatasetError::Parse {
                            line: i + 1,
                            message: format!("header: {e}"),
                        })?;
                    break header;
                }
            }
        };
        let mut records = Vec::new();
        let mut splits = BTreeMap::new();
        for (i, line) in lines {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let rec: RecordLine = serde_json::from_str(&line).map_err(|e| DatasetError::Parse {
                line: i + 1,
                message: e.to_string(),
            })?;
            let quality = match rec.quality {
                Some(q) => {
                    Some(
                        QualityScore::new(q).map_err(|message| DatasetError::Validation {
                            id: rec.id.clone(),
                            message,
                        })?,
                    )
                }
                None => None,
            };
            if let Some(s) = rec.split {
                splits.insert(rec.id.clone(), s);
            }
            records.push(FundusRecord {
                id: rec.id,
                image_uri: rec.image_uri,
                source: rec.source,
                quality,
                trinary: rec.trinary,
                binary: rec.binary,
                pseudo: rec.pseudo,
            });
        }
        let manifest = Self {
            header,
            records,
            split_assignment: (!splits.is_empty()).then_some(splits),
        };
        manifest.validate()?;
        Ok(manifest)
    }

    pub fn to_writer(&self, mut w: impl Write) -> Result<()> {
        serde_json::to_writer(&mut w, &self.header).map_err(std::io::Error::other)?;
        w.write_all(b"\n")?;
        for r in &self.records {
            let line = RecordLine {
                id: r.id.clone(),
                image_uri: r.image_uri.clone(),
                source: r.source.clone(),
                quality: r.quality.map(f64::from),
                trinary: r.trinary,
                binary: r.binary,
                pseudo: r.pseudo,
                split: self.split_of(&r.id),
            };
            serde_json::to_writer(&mut w, &line).map_err(std::io::Error::other)?;
            w.write_all(b"\n")?;
        }
        Ok(())
    }

    /// Writes atomically (temp file then rename).
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let tmp = path.with_extension("jsonl.tmp");
        {
            let mut f = std::io::BufWriter::new(fs::File::create(&tmp)?);
            self.to_writer(&mut f)?;
            f.flush()?;
        }
        fs::rename(tmp, path)?;
        Ok(())
    }
}

impl std::fmt::Display for DatasetManifest {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let mut buf = Vec::new();
        self.to_writer(&mut buf).map_err(|_| std::fmt::Error)?;
        f.write_str(&String::from_utf8_lossy(&buf))
    }
}

pub fn load_manifest(path: impl AsRef<Path>) -> Result<DatasetManifest> {
    DatasetManifest::from_reader(fs::File::open(path)?)
}

/// Resolves a record URI against the directory holding its manifest.
pub fn resolve_uri(base: &Path, uri: &str) -> PathBuf {
    let uri = uri.strip_prefix("file://").unwrap_or(uri);
    let p = Path::new(uri);
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

/// Stratification bin for a score; `10.0` falls into the last (closed) bin.
pub fn bin_score(score: QualityScore, bin_width: f64) -> usize {
    assert!(bin_width > 0.0, "bin_width must be positive");
    let last = bin_count(bin_width) - 1;
    let idx = ((score.value() - MIN_SCORE) / bin_width + 1e-9).floor() as usize;
    idx.min(last)
}

pub fn bin_count(bin_width: f64) -> usize {
    ((MAX_SCORE - MIN_SCORE) / bin_width + 1e-9).floor() as usize + 1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitSizes {
    Counts([usize; 3]),
    Fractions([f64; 3]),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub sizes: SplitSizes,
    #[serde(default = "default_true")]
    pub stratify: bool,
    #[serde(default = "default_bin_width")]
    pub bin_width: f64,
    #[serde(default)]
    pub seed: u64,
}

fn default_true() -> bool {
    true
}

fn default_bin_width() -> f64 {
    0.5
}

impl SplitSpec {
    pub fn counts(train: usize, validation: usize, test: usize, seed: u64) -> Self {
        Self {
            sizes: SplitSizes::Counts([train, validation, test]),
            stratify: true,
            bin_width: 0.5,
            seed,
        }
    }

    pub fn fractions(train: f64, validation: f64, test: f64, seed: u64) -> Self {
        Self {
            sizes: SplitSizes::Fractions([train, validation, test]),
            stratify: true,
            bin_width: 0.5,
            seed,
        }
    }

    /// Resolves the requested sizes into exact counts for `n` records.
    pub fn resolve(&self, n: usize) -> Result<[usize; 3]> {
        if !(self.bin_width > 0.0) {
            return Err(DatasetError::InvalidSpec(
                "bin_width must be positive".into(),
            ));
        }
        match &self.sizes {
            SplitSizes::Counts(c) => {
                let total: usize = c.iter().sum();
                if total > n {
                    Err(DatasetError::InsufficientData {
                        requested: total,
                        available: n,
                    })
                } else if total < n {
                    Err(DatasetError::InvalidSpec(format!(
                        "counts sum to {total}, manifest has {n} records"
                    )))
                } else {
                    Ok(*c)
                }
            }
            SplitSizes::Fractions(f) => {
                if f.iter().any(|x| !(0.0..=1.0).contains(x))
                    || (f.iter().sum::<f64>() - 1.0).abs() > 1e-9
                {
                    return Err(DatasetError::InvalidSpec(format!(
                        "fractions {f:?} must be in [0,1] and sum to 1"
                    )));
                }
                Ok(largest_remainder(n, f))
            }
        }
    }
}

/// Integer apportionment of `n` by `weights` (Hamilton's method).
fn largest_remainder(n: usize, weights: &[f64; 3]) -> [usize; 3] {
    let ideal: Vec<f64> = weights.iter().map(|w| w * n as f64).collect();
    let mut out = [0usize; 3];
    for (o, v) in out.iter_mut().zip(&ideal) {
        *o = v.floor() as usize;
    }
    let mut order: Vec<usize> = (0..3).collect();
    order.sort_by(|&a, &b| {
        let ra = ideal[a] - ideal[a].floor();
        let rb = ideal[b] - ideal[b].floor();
        rb.total_cmp(&ra).then(a.cmp(&b))
    });
    let mut left = n - out.iter().sum::<usize>();
    for i in order.into_iter().cycle() {
        if left == 0 {
            break;
        }
        out[i] += 1;
        left -= 1;
    }
    out
}

/// Splits bin rows across columns so every cell is the floor or ceiling of
/// its proportional share while row and column totals stay exact.
///
/// Cells are first filled greedily by largest remainder (ties broken by a
/// seeded key); any unmet row demand is then routed through augmenting
/// paths, which always exist for proportional tables.
pub(crate) fn allocate_table(rows: &[usize], cols: &[usize], seed: u64) -> Vec<Vec<usize>> {
    let total: usize = rows.iter().sum();
    debug_assert_eq!(total, cols.iter().sum::<usize>());
    let (nr, nc) = (rows.len(), cols.len());
    let mut alloc = vec![vec![0usize; nc]; nr];
    if total == 0 {
        return alloc;
    }
    let mut rem = vec![vec![0u128; nc]; nr];
    for b in 0..nr {
        for s in 0..nc {
            let num = rows[b] as u128 * cols[s] as u128;
            alloc[b][s] = (num / total as u128) as usize;
            rem[b][s] = num % total as u128;
        }
    }
    let mut row_need: Vec<usize> = (0..nr)
        .map(|b| rows[b] - alloc[b].iter().sum::<usize>())
        .collect();
    let mut col_need: Vec<usize> = (0..nc)
        .map(|s| cols[s] - (0..nr).map(|b| alloc[b][s]).sum::<usize>())
        .collect();

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut cells: Vec<(u128, u64, usize, usize)> = Vec::new();
    for b in 0..nr {
        for s in 0..nc {
            let key = rng.gen::<u64>();
            if rem[b][s] > 0 {
                cells.push((rem[b][s], key, b, s));
            }
        }
    }
    cells.sort_by(|x, y| y.0.cmp(&x.0).then(y.1.cmp(&x.1)));
    let mut bumped = vec![vec![false; nc]; nr];
    for &(_, _, b, s) in &cells {
        if row_need[b] > 0 && col_need[s] > 0 {
            bumped[b][s] = true;
            row_need[b] -= 1;
            col_need[s] -= 1;
        }
    }

    // Augment: row(needs) -[unbumped cell]-> col -[bumped cell]-> row ... -> col(needs)
    while let Some(start) = row_need.iter().position(|&n| n > 0) {
        let mut prev_col: Vec<Option<usize>> = vec![None; nc];
        let mut prev_row: Vec<Option<usize>> = vec![None; nr];
        let mut visited_row = vec![false; nr];
        visited_row[start] = true;
        let mut queue = std::collections::VecDeque::from([start]);
        let mut end = None;
        'bfs: while let Some(b) = queue.pop_front() {
            for s in 0..nc {
                if rem[b][s] == 0 || bumped[b][s] || prev_col[s].is_some() {
                    continue;
                }
                prev_col[s] = Some(b);
                if col_need[s] > 0 {
                    end = Some(s);
                    break 'bfs;
                }
                for b2 in 0..nr {
                    if bumped[b2][s] && !visited_row[b2] {
                        visited_row[b2] = true;
                        prev_row[b2] = Some(s);
                        queue.push_back(b2);
                    }
                }
            }
        }
        let mut s = end.expect("proportional allocation always admits a rounding");
        col_need[s] -= 1;
        row_need[start] -= 1;
        loop {
            let b = prev_col[s].expect("path");
            bumped[b][s] = true;
            if b == start {
                break;
            }
            let s_prev = prev_row[b].expect("path");
            bumped[b][s_prev] = false;
            s = s_prev;
        }
    }
    for b in 0..nr {
        for s in 0..nc {
            if bumped[b][s] {
                alloc[b][s] += 1;
            }
        }
    }
    alloc
}

/// Assigns `ids` (with their scores) to splits of exactly `counts` sizes,
/// proportionally within each score bin.
fn stratified_assign(
    items: &[(&str, QualityScore)],
    counts: &[usize],
    stratify: bool,
    bin_width: f64,
    seed: u64,
) -> Vec<(String, usize)> {
    let mut bins: BTreeMap<usize, Vec<&str>> = BTreeMap::new();
    for (id, q) in items {
        let key = if stratify {
            bin_score(*q, bin_width)
        } else {
            0
        };
        bins.entry(key).or_default().push(id);
    }
    let rows: Vec<usize> = bins.values().map(Vec::len).collect();
    let table = allocate_table(&rows, counts, seed);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15);
    let mut out = Vec::with_capacity(items.len());
    for (ids, alloc) in bins.into_values().zip(table) {
        let mut ids = ids;
        ids.sort_unstable();
        ids.shuffle(&mut rng);
        let mut it = ids.into_iter();
        for (split, &k) in alloc.iter().enumerate() {
            for id in it.by_ref().take(k) {
                out.push((id.to_string(), split));
            }
        }
    }
    out
}

/// Stratified train/validation/test split by quality-score bin.
pub fn stratified_split(manifest: &DatasetManifest, spec: &SplitSpec) -> Result<DatasetManifest> {
    let counts = spec.resolve(manifest.len())?;
    let items = scored_items(manifest.records.iter())?;
    let assigned = stratified_assign(&items, &counts, spec.stratify, spec.bin_width, spec.seed);
    let mut out = manifest.clone();
    out.split_assignment = Some(
        assigned
            .into_iter()
            .map(|(id, s)| (id, Split::ALL[s]))
            .collect(),
    );
    Ok(out)
}

fn scored_items<'a>(
    records: impl Iterator<Item = &'a FundusRecord>,
) -> Result<Vec<(&'a str, QualityScore)>> {
    records
        .map(|r| {
            r.quality
                .map(|q| (r.id.as_str(), q))
                .ok_or_else(|| DatasetError::MissingQuality(r.id.clone()))
        })
        .collect()
}

/// How pseudo-labeled records are folded into the labeled splits.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "mode")]
pub enum MergePolicy {
    /// Pseudo records join train only; labeled records keep their split.
    TrainOnly,
    /// Labeled train+validation records are pooled with the pseudo records
    /// and re-split (stratified) into train and validation. Test is untouched.
    Pooled {
        validation_fraction: f64,
        #[serde(default)]
        seed: u64,
        #[serde(default = "default_bin_width")]
        bin_width: f64,
    },
}

impl Default for MergePolicy {
    fn default() -> Self {
        // 3,047 / 60,946 rounds from exactly 5%
        Self::Pooled {
            validation_fraction: 0.05,
            seed: 0,
            bin_width: 0.5,
        }
    }
}

pub fn merge_pseudo(
    labeled: &DatasetManifest,
    pseudo: &DatasetManifest,
    policy: &MergePolicy,
) -> Result<DatasetManifest> {
    if pseudo.is_empty() {
        return Ok(labeled.clone());
    }
    let labeled_ids: HashSet<&str> = labeled.records.iter().map(|r| r.id.as_str()).collect();
    for r in &pseudo.records {
        if labeled_ids.contains(r.id.as_str()) {
            return Err(DatasetError::IdCollision(r.id.clone()));
        }
        if !r.pseudo || r.quality.is_none() {
            return Err(DatasetError::Validation {
                id: r.id.clone(),
                message: "pseudo manifest record must carry pseudo=true and a quality".into(),
            });
        }
    }
    let mut records = labeled.records.clone();
    records.extend(pseudo.records.iter().cloned());
    let mut splits = labeled.split_assignment.clone().unwrap_or_default();

    match policy {
        MergePolicy::TrainOnly => {
            for r in &pseudo.records {
                splits.insert(r.id.clone(), Split::Train);
            }
        }
        MergePolicy::Pooled {
            validation_fraction,
            seed,
            bin_width,
        } => {
            if !(0.0..1.0).contains(validation_fraction) {
                return Err(DatasetError::InvalidSpec(format!(
                    "validation_fraction {validation_fraction} outside [0, 1)"
                )));
            }
            let pool = records.iter().filter(|r| {
                matches!(
                    splits.get(&r.id),
                    Some(Split::Train) | Some(Split::Validation)
                ) || r.pseudo
            });
            let items = scored_items(pool)?;
            let validation = (items.len() as f64 * validation_fraction).round() as usize;
            let counts = [items.len() - validation, validation];
            for (id, s) in stratified_assign(&items, &counts, true, *bin_width, *seed) {
                splits.insert(id, Split::ALL[s]);
            }
        }
    }
    let merged = DatasetManifest {
        header: ManifestHeader::now(format!(
            "{}+{}",
            labeled.header.source, pseudo.header.source
        )),
        records,
        split_assignment: Some(splits),
    };
    merged.validate()?;
    Ok(merged)
}

/// Per-bin score histogram, keyed by bin index.
pub fn score_histogram(records: &[FundusRecord], bin_width: f64) -> BTreeMap<usize, usize> {
    let mut h = BTreeMap::new();
    for q in records.iter().filter_map(|r| r.quality) {
        *h.entry(bin_score(q, bin_width)).or_default() += 1;
    }
    h
}

/// Lookup from id to record, for callers that join predictions back.
pub fn index_by_id(manifest: &DatasetManifest) -> HashMap<&str, &FundusRecord> {
    manifest
        .records
        .iter()
        .map(|r| (r.id.as_str(), r))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn labeled(n: usize, seed: u64) -> DatasetManifest {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let records = (0..n)
            .map(|i| {
                FundusRecord::new(format!("r{i:05}"), format!("img/{i}.png"), "synthetic")
                    .with_quality(rng.gen_range(2..=20) as f64 / 2.0)
            })
            .collect();
        DatasetManifest::new("synthetic", records)
    }

    #[test]
    fn bin_boundaries() {
        let q = |v| QualityScore::new(v).unwrap();
        assert_eq!(bin_score(q(1.0), 0.5), 0);
        assert_eq!(bin_score(q(10.0), 0.5), 18);
        assert_eq!(bin_score(q(6.5), 0.5), 11);
        assert_eq!(bin_count(0.5), 19);
        let bins: HashSet<usize> = (2..=20)
            .map(|k| bin_score(q(k as f64 / 2.0), 0.5))
            .collect();
        assert_eq!(bins.len(), 19);
    }

    #[test]
    fn manifest_parse_and_errors() {
        let text = r#"{"version":1,"source":"t","created":"2024-01-01T00:00:00Z"}
{"id":"a","image_uri":"a.png","source":"x","quality":7.5}
{"id":"b","image_uri":"b.png","source":"x","trinary":"usable","split":"test"}
{"id":"c","image_uri":"c.png","source":"x","binary":"poor"}
"#;
        let m = DatasetManifest::parse(text).unwrap();
        assert_eq!(m.len(), 3);
        assert_eq!(m.split_of("b"), Some(Split::Test));
        assert_eq!(DatasetManifest::parse(&m.to_string()).unwrap(), m);

        let bad = text.replace("7.5", "10.5");
        match DatasetManifest::parse(&bad) {
            Err(DatasetError::Validation { id, .. }) => assert_eq!(id, "a"),
            other => panic!("{other:?}"),
        }
        let dup = text.replace("\"id\":\"b\"", "\"id\":\"a\"");
        assert!(matches!(
            DatasetManifest::parse(&dup),
            Err(DatasetError::Validation { .. })
        ));
        assert!(matches!(
            DatasetManifest::parse("not json\n"),
            Err(DatasetError::Parse { .. })
        ));
        let unknown = text.replace(
            "\"source\":\"x\",\"quality\"",
            "\"source\":\"x\",\"colour\":1,\"quality\"",
        );
        assert!(matches!(
            DatasetManifest::parse(&unknown),
            Err(DatasetError::Parse { .. })
        ));
    }

    #[test]
    fn split_exact_sizes_for_labeled_set() {
        let m = labeled(1245, 3);
        let out = stratified_split(&m, &SplitSpec::counts(932, 104, 209, 7)).unwrap();
        assert_eq!(out.split_sizes(), [932, 104, 209]);
        let again = stratified_split(&m, &SplitSpec::counts(932, 104, 209, 7)).unwrap();
        assert_eq!(out.split_assignment, again.split_assignment);
    }

    #[test]
    fn split_single_bin_fractions() {
        let records = (0..10)
            .map(|i| FundusRecord::new(format!("{i}"), "x", "s").with_quality(5.0))
            .collect();
        let m = DatasetManifest::new("s", records);
        let out = stratified_split(&m, &SplitSpec::fractions(0.8, 0.1, 0.1, 0)).unwrap();
        assert_eq!(out.split_sizes(), [8, 1, 1]);
    }

    #[test]
    fn split_errors() {
        let m = labeled(10, 0);
        assert!(matches!(
            stratified_split(&m, &SplitSpec::counts(8, 2, 1, 0)),
            Err(DatasetError::InsufficientData { .. })
        ));
        assert!(matches!(
            stratified_split(&m, &SplitSpec::counts(5, 2, 1, 0)),
            Err(DatasetError::InvalidSpec(_))
        ));
        let mut m2 = m.clone();
        m2.records[3].quality = None;
        assert!(matches!(
            stratified_split(&m2, &SplitSpec::counts(8, 1, 1, 0)),
            Err(DatasetError::MissingQuality(_))
        ));
    }

    #[test]
    fn allocation_within_one_of_ideal_brute_force() {
        let m = labeled(1245, 11);
        let counts = [932usize, 104, 209];
        let out = stratified_split(&m, &SplitSpec::counts(932, 104, 209, 1)).unwrap();
        let n = m.len() as f64;
        let mut per_bin: BTreeMap<usize, [usize; 3]> = BTreeMap::new();
        for r in &m.records {
            let b = bin_score(r.quality.unwrap(), 0.5);
            per_bin.entry(b).or_default()[out.split_of(&r.id).unwrap() as usize] += 1;
        }
        for (bin, alloc) in per_bin {
            let size: usize = alloc.iter().sum();
            for s in 0..3 {
                let ideal = size as f64 * counts[s] as f64 / n;
                assert!(
                    (alloc[s] as f64 - ideal).abs() < 1.0,
                    "bin {bin} split {s}: {} vs ideal {ideal}",
                    alloc[s]
                );
            }
        }
    }

    #[test]
    fn allocation_table_many_random_shapes() {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        for _ in 0..300 {
            let nr = rng.gen_range(1..25);
            let rows: Vec<usize> = (0..nr).map(|_| rng.gen_range(0..40)).collect();
            let total: usize = rows.iter().sum();
            let a = if total == 0 {
                0
            } else {
                rng.gen_range(0..=total)
            };
            let b = rng.gen_range(0..=total - a);
            let cols = vec![a, b, total - a - b];
            let t = allocate_table(&rows, &cols, rng.gen());
            for (r, row) in t.iter().enumerate() {
                assert_eq!(row.iter().sum::<usize>(), rows[r]);
                for s in 0..3 {
                    let ideal = rows[r] as f64 * cols[s] as f64 / total.max(1) as f64;
                    assert!((row[s] as f64 - ideal).abs() < 1.0);
                }
            }
            for s in 0..3 {
                assert_eq!(t.iter().map(|row| row[s]).sum::<usize>(), cols[s]);
            }
        }
    }

    fn pseudo(n: usize) -> DatasetManifest {
        let mut m = labeled(n, 5);
        for r in &mut m.records {
            r.id = format!("p{}", r.id);
            r.pseudo = true;
            r.quality = Some(QualityScore::clamped(r.quality.unwrap().value() + 0.13));
        }
        m
    }

    #[test]
    fn merge_train_only_keeps_labeled_splits() {
        let base = stratified_split(&labeled(50, 1), &SplitSpec::counts(30, 10, 10, 0)).unwrap();
        let merged = merge_pseudo(&base, &pseudo(40), &MergePolicy::TrainOnly).unwrap();
        assert_eq!(merged.split_sizes(), [70, 10, 10]);
        for r in &base.records {
            assert_eq!(merged.split_of(&r.id), base.split_of(&r.id));
        }
        assert!(merged
            .records
            .iter()
            .filter(|r| r.pseudo)
            .all(|r| merged.split_of(&r.id) == Some(Split::Train)));
    }

    #[test]
    fn merge_identity_and_collision() {
        let base = stratified_split(&labeled(20, 1), &SplitSpec::counts(10, 5, 5, 0)).unwrap();
        let empty = DatasetManifest::new("none", vec![]);
        assert_eq!(
            merge_pseudo(&base, &empty, &MergePolicy::default()).unwrap(),
            base
        );
        let mut clash = pseudo(3);
        clash.records[1].id = base.records[4].id.clone();
        assert!(matches!(
            merge_pseudo(&base, &clash, &MergePolicy::TrainOnly),
            Err(DatasetError::IdCollision(_))
        ));
    }

    #[test]
    fn merge_pooled_never_touches_test() {
        let base = stratified_split(&labeled(100, 1), &SplitSpec::counts(70, 10, 20, 0)).unwrap();
        let merged = merge_pseudo(&base, &pseudo(300), &MergePolicy::default()).unwrap();
        assert_eq!(merged.split_sizes(), [361, 19, 20]);
        for r in base.records_in(Split::Test) {
            assert_eq!(merged.split_of(&r.id), Some(Split::Test));
        }
        assert!(merged
            .records
            .iter()
            .filter(|r| r.pseudo)
            .all(|r| merged.split_of(&r.id) != Some(Split::Test)));
    }
}
