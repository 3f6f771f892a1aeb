//! Canonical dataset layout, record validation, the session quality gate and
//! subject-aware cross-validation splits.
//!
//! A dataset is a directory:
//!
//! ```text
//! <dir>/manifest.jsonl          one record descriptor per line
//! <dir>/dataset.json            dataset name + task schema (optional)
//! <dir>/signals/<id>.f32le      raw samples, 32-bit little-endian floats
//! ```

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::preprocess::{detect_r_peaks, heart_rate_bpm, HR_MAX_BPM, HR_MIN_BPM};
use crate::rng::rng_from;

pub const MANIFEST_FILE: &str = "manifest.jsonl";
pub const DATASET_FILE: &str = "dataset.json";
pub const SIGNALS_DIR: &str = "signals";

/// A label attached to a record: class index, real target or multi-hot vector.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum LabelValue {
    Int(i64),
    Real(f64),
    Vector(Vec<f64>),
}

impl LabelValue {
    pub fn as_f64(&self) -> Option<f64> {
        match self {
            LabelValue::Int(v) => Some(*v as f64),
            LabelValue::Real(v) => Some(*v),
            LabelValue::Vector(_) => None,
        }
    }

    pub fn as_class(&self) -> Option<usize> {
        match self {
            LabelValue::Int(v) if *v >= 0 => Some(*v as usize),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TaskKind {
    Classification { classes: usize },
    Multilabel { classes: usize },
    Regression { min: f64, max: f64 },
}

impl TaskKind {
    /// Width of the network output for this task.
    pub fn output_dim(&self) -> usize {
        match self {
            TaskKind::Classification { classes } | TaskKind::Multilabel { classes } => *classes,
            TaskKind::Regression { .. } => 1,
        }
    }

    fn validate(&self, value: &LabelValue) -> std::result::Result<(), String> {
        match (self, value) {
            (TaskKind::Classification { classes }, LabelValue::Int(v)) => {
                if *v < 0 || *v as usize >= *classes {
                    return Err(format!("class {v} outside [0, {classes})"));
                }
                Ok(())
            }
            (TaskKind::Multilabel { classes }, LabelValue::Vector(v)) => {
                if v.len() != *classes {
                    return Err(format!("expected {classes} labels, got {}", v.len()));
                }
                if v.iter().any(|x| *x != 0.0 && *x != 1.0) {
                    return Err("multilabel targets must be 0 or 1".into());
                }
                Ok(())
            }
            (TaskKind::Regression { .. }, LabelValue::Real(v)) => {
                if v.is_finite() {
                    Ok(())
                } else {
                    Err("non-finite regression target".into())
                }
            }
            (TaskKind::Regression { .. }, LabelValue::Int(_)) => Ok(()),
            (kind, value) => Err(format!("label {value:?} does not fit task {kind:?}")),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EcgRecord {
    pub record_id: String,
    pub subject_id: String,
    pub sampling_rate_hz: f64,
    pub samples: Vec<f32>,
    pub labels: BTreeMap<String, LabelValue>,
    pub session_tag: Option<String>,
}

impl EcgRecord {
    pub fn new(
        record_id: impl Into<String>,
        subject_id: impl Into<String>,
        sampling_rate_hz: f64,
        samples: Vec<f32>,
    ) -> Self {
        EcgRecord {
            record_id: record_id.into(),
            subject_id: subject_id.into(),
            sampling_rate_hz,
            samples,
            labels: BTreeMap::new(),
            session_tag: None,
        }
    }

    pub fn samples_f64(&self) -> Vec<f64> {
        self.samples.iter().map(|&v| f64::from(v)).collect()
    }

    pub fn duration_s(&self) -> f64 {
        self.samples.len() as f64 / self.sampling_rate_hz
    }

    fn check(&self) -> std::result::Result<(), String> {
        if !(self.sampling_rate_hz > 0.0) || !self.sampling_rate_hz.is_finite() {
            return Err(format!(
                "record {:?}: sampling_rate_hz must be > 0, got {}",
                self.record_id, self.sampling_rate_hz
            ));
        }
        if self.samples.is_empty() {
            return Err(format!("record {:?}: no samples", self.record_id));
        }
        if self.record_id.is_empty()
            || self.record_id.contains(['/', '\\'])
            || self.record_id.starts_with('.')
        {
            return Err(format!("record id {:?} is not a valid file stem", self.record_id));
        }
        Ok(())
    }
}

/// One line of `manifest.jsonl`.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RecordDescriptor {
    record_id: String,
    subject_id: String,
    sampling_rate_hz: f64,
    signal: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    labels: Option<BTreeMap<String, LabelValue>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    session_tag: Option<String>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct DatasetHeader {
    dataset_name: String,
    #[serde(default)]
    task_schema: BTreeMap<String, TaskKind>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetManifest {
    pub dataset_name: String,
    pub records: Vec<EcgRecord>,
    pub task_schema: BTreeMap<String, TaskKind>,
}

impl DatasetManifest {
    pub fn new(dataset_name: impl Into<String>) -> Self {
        DatasetManifest {
            dataset_name: dataset_name.into(),
            records: Vec::new(),
            task_schema: BTreeMap::new(),
        }
    }

    /// Check every invariant of a manifest held in memory.
    pub fn validate(&self) -> Result<()> {
        let mut seen = HashSet::new();
        for (index, record) in self.records.iter().enumerate() {
            record
                .check()
                .map_err(|message| Error::Record { index, message })?;
            if !seen.insert(record.record_id.as_str()) {
                return Err(Error::Record {
                    index,
                    message: format!("duplicate record_id {:?}", record.record_id),
                });
            }
            for (task, value) in &record.labels {
                let kind = self.task_schema.get(task).ok_or_else(|| Error::Record {
                    index,
                    message: format!("label {task:?} missing from task schema"),
                })?;
                kind.validate(value).map_err(|m| Error::Record {
                    index,
                    message: format!("label {task:?}: {m}"),
                })?;
            }
        }
        Ok(())
    }

    pub fn subjects(&self) -> BTreeSet<&str> {
        self.records.iter().map(|r| r.subject_id.as_str()).collect()
    }

    /// Fill the task schema from the labels present, for label keys that lack an entry.
    pub fn infer_task_schema(&mut self) {
        let mut keys: BTreeMap<String, Vec<&LabelValue>> = BTreeMap::new();
        for r in &self.records {
            for (k, v) in &r.labels {
                keys.entry(k.clone()).or_default().push(v);
            }
        }
        for (key, values) in keys {
            if self.task_schema.contains_key(&key) {
                continue;
            }
            let kind = if values.iter().all(|v| matches!(v, LabelValue::Int(x) if *x >= 0)) {
                let max = values.iter().filter_map(|v| v.as_class()).max().unwrap_or(0);
                TaskKind::Classification { classes: max + 1 }
            } else if let Some(LabelValue::Vector(v)) = values.first() {
                TaskKind::Multilabel { classes: v.len() }
            } else {
                let reals: Vec<f64> = values.iter().filter_map(|v| v.as_f64()).collect();
                let min = reals.iter().copied().fold(f64::INFINITY, f64::min);
                let max = reals.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                TaskKind::Regression { min, max }
            };
            self.task_schema.insert(key, kind);
        }
    }
}

fn read_signal(path: &Path) -> std::io::Result<Vec<f32>> {
    let bytes = fs::read(path)?;
    if bytes.len() % 4 != 0 {
        return Err(std::io::Error::new(
            std::io::ErrorKind::InvalidData,
            "signal file length is not a multiple of 4 bytes",
        ));
    }
    Ok(bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect())
}

pub fn write_f32le(path: &Path, values: impl IntoIterator<Item = f32>) -> Result<()> {
    let bytes: Vec<u8> = values.into_iter().flat_map(f32::to_le_bytes).collect();
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Load and validate a dataset directory.
pub fn load_manifest(dir: impl AsRef<Path>) -> Result<DatasetManifest> {
    let dir = dir.as_ref();
    let manifest_path = dir.join(MANIFEST_FILE);
    let file = fs::File::open(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;

    let header_path = dir.join(DATASET_FILE);
    let header = if header_path.exists() {
        let text = fs::read_to_string(&header_path).map_err(|e| Error::io(&header_path, e))?;
        Some(serde_json::from_str::<DatasetHeader>(&text).map_err(|e| {
            Error::Manifest(format!("{}: {e}", header_path.display()))
        })?)
    } else {
        None
    };

    let mut descriptors = Vec::new();
    for (index, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(&manifest_path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let desc: RecordDescriptor = serde_json::from_str(&line).map_err(|e| Error::Record {
            index: descriptors.len(),
            message: format!("line {}: malformed descriptor: {e}", index + 1),
        })?;
        descriptors.push(desc);
    }

    let records = descriptors
        .into_iter()
        .enumerate()
        .map(|(index, d)| {
            if !(d.sampling_rate_hz > 0.0) {
                return Err(Error::Record {
                    index,
                    message: format!(
                        "record {:?}: sampling_rate_hz must be > 0, got {}",
                        d.record_id, d.sampling_rate_hz
                    ),
                });
            }
            let path = dir.join(&d.signal);
            let samples = read_signal(&path).map_err(|e| Error::Record {
                index,
                message: format!("record {:?}: signal {}: {e}", d.record_id, path.display()),
            })?;
            Ok(EcgRecord {
                record_id: d.record_id,
                subject_id: d.subject_id,
                sampling_rate_hz: d.sampling_rate_hz,
                samples,
                labels: d.labels.unwrap_or_default(),
                session_tag: d.session_tag,
            })
        })
        .collect::<Result<Vec<_>>>()?;

    let mut manifest = DatasetManifest {
        dataset_name: header
            .as_ref()
            .map(|h| h.dataset_name.clone())
            .or_else(|| dir.file_name().map(|n| n.to_string_lossy().into_owned()))
            .unwrap_or_else(|| "dataset".into()),
        records,
        task_schema: header.map(|h| h.task_schema).unwrap_or_default(),
    };
    manifest.infer_task_schema();
    manifest.validate()?;
    Ok(manifest)
}

/// Write a dataset directory. Existing files with the same names are replaced.
pub fn save_manifest(manifest: &DatasetManifest, dir: impl AsRef<Path>) -> Result<()> {
    manifest.validate()?;
    let dir = dir.as_ref();
    let signals = dir.join(SIGNALS_DIR);
    fs::create_dir_all(&signals).map_err(|e| Error::io(&signals, e))?;

    let header = DatasetHeader {
        dataset_name: manifest.dataset_name.clone(),
        task_schema: manifest.task_schema.clone(),
    };
    let header_path = dir.join(DATASET_FILE);
    let text = serde_json::to_string_pretty(&header)? + "\n";
    fs::write(&header_path, text).map_err(|e| Error::io(&header_path, e))?;

    let manifest_path = dir.join(MANIFEST_FILE);
    let mut out = Vec::new();
    for r in &manifest.records {
        let rel = format!("{SIGNALS_DIR}/{}.f32le", r.record_id);
        write_f32le(&dir.join(&rel), r.samples.iter().copied())?;
        let desc = RecordDescriptor {
            record_id: r.record_id.clone(),
            subject_id: r.subject_id.clone(),
            sampling_rate_hz: r.sampling_rate_hz,
            signal: rel,
            labels: (!r.labels.is_empty()).then(|| r.labels.clone()),
            session_tag: r.session_tag.clone(),
        };
        serde_json::to_writer(&mut out, &desc)?;
        out.push(b'\n');
    }
    let mut f = fs::File::create(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
    f.write_all(&out).map_err(|e| Error::io(&manifest_path, e))?;
    Ok(())
}

/// Parse a third-party export with one sample per line. A single non-numeric
/// header line is tolerated.
pub fn import_csv(
    path: impl AsRef<Path>,
    record_id: &str,
    subject_id: &str,
    sampling_rate_hz: f64,
) -> Result<EcgRecord> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut samples = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let field = line.trim().trim_end_matches(',');
        if field.is_empty() {
            continue;
        }
        match field.parse::<f32>() {
            Ok(v) => samples.push(v),
            Err(_) if i == 0 => continue,
            Err(e) => {
                return Err(Error::InvalidArgument(format!(
                    "{}:{}: cannot parse sample {field:?}: {e}",
                    path.display(),
                    i + 1
                )))
            }
        }
    }
    let record = EcgRecord::new(record_id, subject_id, sampling_rate_hz, samples);
    record
        .check()
        .map_err(|message| Error::Record { index: 0, message })?;
    Ok(record)
}

/// Per-record pass criterion of the quality gate: at least two detected beats
/// and a mean heart rate inside the physiological range.
pub fn record_passes(record: &EcgRecord) -> bool {
    if record.sampling_rate_hz < 50.0 || record.duration_s() < 2.0 {
        return false;
    }
    let peaks = detect_r_peaks(&record.samples_f64(), record.sampling_rate_hz);
    match heart_rate_bpm(&peaks, record.sampling_rate_hz) {
        Ok(hr) => (HR_MIN_BPM..=HR_MAX_BPM).contains(&hr),
        Err(_) => false,
    }
}

#[derive(Clone, Debug, Default)]
pub struct GateOutcome {
    pub kept: Vec<EcgRecord>,
    pub dropped: Vec<EcgRecord>,
}

/// Drop whole sessions whose fraction of passing records is below `threshold`.
/// Records without a session tag are gated one by one.
pub fn quality_gate(records: Vec<EcgRecord>, threshold: f64) -> Result<GateOutcome> {
    if !(threshold > 0.0 && threshold <= 1.0) {
        return Err(Error::InvalidArgument(format!(
            "quality threshold must be in (0, 1], got {threshold}"
        )));
    }
    let passes: Vec<bool> = records.par_iter().map(record_passes).collect();

    let mut groups: BTreeMap<&str, (usize, usize)> = BTreeMap::new();
    for (r, &ok) in records.iter().zip(&passes) {
        if let Some(tag) = r.session_tag.as_deref() {
            let g = groups.entry(tag).or_default();
            g.0 += usize::from(ok);
            g.1 += 1;
        }
    }
    let group_ok: BTreeMap<String, bool> = groups
        .into_iter()
        .map(|(tag, (pass, total))| (tag.to_string(), pass as f64 / total as f64 >= threshold))
        .collect();

    let mut out = GateOutcome::default();
    for (r, ok) in records.into_iter().zip(passes) {
        let keep = match &r.session_tag {
            Some(tag) => group_ok[tag],
            None => ok,
        };
        if keep {
            out.kept.push(r);
        } else {
            out.dropped.push(r);
        }
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SplitMode {
    SubjectAgnostic,
    MixedSubject,
}

impl std::str::FromStr for SplitMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "subject-agnostic" => Ok(SplitMode::SubjectAgnostic),
            "mixed-subject" | "mixed" => Ok(SplitMode::MixedSubject),
            other => Err(Error::InvalidArgument(format!("unknown split mode {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Fold {
    pub train: Vec<String>,
    pub validation: Vec<String>,
    pub test: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitPlan {
    pub mode: SplitMode,
    pub seed: u64,
    pub folds: Vec<Fold>,
}

/// Fraction of training units (subjects or records) held out for validation.
pub const VALIDATION_FRACTION: f64 = 0.2;

/// Partition `units` into `k` groups; earlier groups take the remainder.
fn partition<T: Clone>(units: &[T], k: usize) -> Vec<Vec<T>> {
    let base = units.len() / k;
    let extra = units.len() % k;
    let mut out = Vec::with_capacity(k);
    let mut start = 0;
    for f in 0..k {
        let size = base + usize::from(f < extra);
        out.push(units[start..start + size].to_vec());
        start += size;
    }
    out
}

fn validation_count(n_train: usize) -> usize {
    if n_train < 2 {
        0
    } else {
        ((n_train as f64 * VALIDATION_FRACTION).round() as usize).clamp(1, n_train - 1)
    }
}

pub fn make_splits(
    manifest: &DatasetManifest,
    mode: SplitMode,
    k: usize,
    seed: u64,
) -> Result<SplitPlan> {
    if k < 2 {
        return Err(Error::InvalidArgument(format!("fold count must be >= 2, got {k}")));
    }
    // Units are subjects or records; each record maps to exactly one unit.
    let units: Vec<String> = match mode {
        SplitMode::SubjectAgnostic => manifest.subjects().into_iter().map(String::from).collect(),
        SplitMode::MixedSubject => manifest.records.iter().map(|r| r.record_id.clone()).collect(),
    };
    if units.len() < k {
        return Err(Error::InsufficientData(format!(
            "{} {} for {k} folds",
            units.len(),
            match mode {
                SplitMode::SubjectAgnostic => "subjects",
                SplitMode::MixedSubject => "records",
            }
        )));
    }
    let unit_of = |r: &EcgRecord| -> String {
        match mode {
            SplitMode::SubjectAgnostic => r.subject_id.clone(),
            SplitMode::MixedSubject => r.record_id.clone(),
        }
    };

    let mut shuffled = units.clone();
    shuffled.shuffle(&mut rng_from(seed, &[0]));
    let parts = partition(&shuffled, k);

    let folds = parts
        .iter()
        .enumerate()
        .map(|(f, test_units)| {
            let test: HashSet<&String> = test_units.iter().collect();
            let mut train_units: Vec<String> =
                shuffled.iter().filter(|u| !test.contains(u)).cloned().collect();
            train_units.sort();
            train_units.shuffle(&mut rng_from(seed, &[1, f as u64]));
            let n_val = validation_count(train_units.len());
            let val: HashSet<&String> = train_units[..n_val].iter().collect();

            let mut fold = Fold {
                train: Vec::new(),
                validation: Vec::new(),
                test: Vec::new(),
            };
            for r in &manifest.records {
                let unit = unit_of(r);
                let id = r.record_id.clone();
                if test.contains(&unit) {
                    fold.test.push(id);
                } else if val.contains(&unit) {
                    fold.validation.push(id);
                } else {
                    fold.train.push(id);
                }
            }
            fold
        })
        .collect();

    Ok(SplitPlan { mode, seed, folds })
}

/// Resolve a dataset path that may point at the directory or at its manifest file.
pub fn dataset_dir(path: &Path) -> PathBuf {
    if path.is_file() {
        path.parent().map(Path::to_path_buf).unwrap_or_default()
    } else {
        path.to_path_buf()
    }
}
