//! Euclidean structure of the embedding space: intra- versus inter-subject
//! distances, label-conditioned distances and distance against heart-rate gap.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::error::{Error, Result};
use crate::signal_io::{write_f32le, LabelValue};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingRow {
    pub record_id: String,
    pub subject_id: String,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub labels: BTreeMap<String, LabelValue>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub hr_bpm: Option<f64>,
    #[serde(skip)]
    pub embedding: Vec<f64>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct EmbeddingSet {
    pub rows: Vec<EmbeddingRow>,
}

pub const EMBEDDINGS_FILE: &str = "embeddings.f32le";
pub const EMBEDDINGS_INDEX_FILE: &str = "embeddings.index.jsonl";

impl EmbeddingSet {
    pub fn dim(&self) -> usize {
        self.rows.first().map_or(0, |r| r.embedding.len())
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        let dim = self.dim();
        if self.rows.iter().any(|r| r.embedding.len() != dim) {
            return Err(Error::Shape("embedding rows differ in dimension".into()));
        }
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        write_f32le(
            &dir.join(EMBEDDINGS_FILE),
            self.rows.iter().flat_map(|r| r.embedding.iter().map(|&v| v as f32)),
        )?;
        let path = dir.join(EMBEDDINGS_INDEX_FILE);
        let mut out = Vec::new();
        for r in &self.rows {
            serde_json::to_writer(&mut out, r)?;
            out.push(b'\n');
        }
        let mut f = fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
        f.write_all(&out).map_err(|e| Error::io(&path, e))
    }

    pub fn read(dir: &Path) -> Result<Self> {
        let index_path = dir.join(EMBEDDINGS_INDEX_FILE);
        let file = fs::File::open(&index_path).map_err(|e| Error::io(&index_path, e))?;
        let mut rows = Vec::new();
        for (index, line) in BufReader::new(file).lines().enumerate() {
            let line = line.map_err(|e| Error::io(&index_path, e))?;
            if line.trim().is_empty() {
                continue;
            }
            rows.push(
                serde_json::from_str::<EmbeddingRow>(&line).map_err(|e| Error::Record {
                    index,
                    message: e.to_string(),
                })?,
            );
        }
        let data_path = dir.join(EMBEDDINGS_FILE);
        let bytes = fs::read(&data_path).map_err(|e| Error::io(&data_path, e))?;
        if rows.is_empty() {
            return Ok(EmbeddingSet { rows });
        }
        let values: Vec<f64> = bytes
            .chunks_exact(4)
            .map(|c| f64::from(f32::from_le_bytes([c[0], c[1], c[2], c[3]])))
            .collect();
        if bytes.len() % 4 != 0 || values.len() % rows.len() != 0 {
            return Err(Error::Shape(format!(
                "{} values do not split into {} rows",
                values.len(),
                rows.len()
            )));
        }
        let dim = values.len() / rows.len();
        for (r, chunk) in rows.iter_mut().zip(values.chunks_exact(dim)) {
            r.embedding = chunk.to_vec();
        }
        Ok(EmbeddingSet { rows })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
}

impl MeanStd {
    /// Mean and sample standard deviation (zero for a single value).
    pub fn of(values: &[f64]) -> MeanStd {
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let std = if values.len() > 1 {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
        } else {
            0.0
        };
        MeanStd { mean, std }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LabelDistance {
    pub within: f64,
    pub across: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HrBinDistance {
    pub delta_hr_lo_bpm: f64,
    pub mean_distance: f64,
    pub pairs: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DistanceReport {
    pub n_subjects: usize,
    pub intra_subject: MeanStd,
    pub inter_subject: MeanStd,
    /// Paired two-sided t-test of per-subject (inter - intra) means.
    pub t_statistic: f64,
    pub p_value: f64,
    pub per_label: BTreeMap<String, LabelDistance>,
    pub hr_curve: Vec<HrBinDistance>,
}

fn euclidean(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
}

/// Two-sided paired t-test on `diffs`; returns (t, p).
pub fn paired_t_test(diffs: &[f64]) -> (f64, f64) {
    let n = diffs.len();
    let m = MeanStd::of(diffs);
    if m.std == 0.0 {
        return if m.mean == 0.0 { (0.0, 1.0) } else { (f64::INFINITY.copysign(m.mean), 0.0) };
    }
    let t = m.mean / (m.std / (n as f64).sqrt());
    let dist = StudentsT::new(0.0, 1.0, (n - 1) as f64).expect("dof >= 1");
    (t, 2.0 * dist.sf(t.abs()))
}

pub fn embedding_distance_report(set: &EmbeddingSet) -> Result<DistanceReport> {
    let n = set.rows.len();
    let dim = set.dim();
    if set.rows.iter().any(|r| r.embedding.len() != dim) {
        return Err(Error::Shape("embedding rows differ in dimension".into()));
    }
    let mut subjects: BTreeMap<&str, usize> = BTreeMap::new();
    for r in &set.rows {
        let next = subjects.len();
        subjects.entry(r.subject_id.as_str()).or_insert(next);
    }
    let subject_of: Vec<usize> = set.rows.iter().map(|r| subjects[r.subject_id.as_str()]).collect();
    let mut counts = vec![0usize; subjects.len()];
    subject_of.iter().for_each(|&s| counts[s] += 1);
    if subjects.len() < 2 || counts.iter().any(|&c| c < 2) {
        return Err(Error::InsufficientData(
            "distance analysis needs >= 2 subjects with >= 2 samples each".into(),
        ));
    }

    // Upper-triangular distances, row-major.
    let dist: Vec<Vec<f64>> = (0..n)
        .into_par_iter()
        .map(|i| {
            (i + 1..n)
                .map(|j| euclidean(&set.rows[i].embedding, &set.rows[j].embedding))
                .collect()
        })
        .collect();
    let pairs = || (0..n).flat_map(|i| (i + 1..n).map(move |j| (i, j)));
    let d = |i: usize, j: usize| dist[i][j - i - 1];

    let k = subjects.len();
    let mut intra = vec![(0.0, 0usize); k];
    let mut inter = vec![(0.0, 0usize); k];
    for (i, j) in pairs() {
        let (si, sj) = (subject_of[i], subject_of[j]);
        let v = d(i, j);
        if si == sj {
            intra[si].0 += v;
            intra[si].1 += 1;
        } else {
            inter[si].0 += v;
            inter[si].1 += 1;
            inter[sj].0 += v;
            inter[sj].1 += 1;
        }
    }
    let intra_means: Vec<f64> = intra.iter().map(|(s, c)| s / *c as f64).collect();
    let inter_means: Vec<f64> = inter.iter().map(|(s, c)| s / *c as f64).collect();
    let diffs: Vec<f64> = inter_means.iter().zip(&intra_means).map(|(a, b)| a - b).collect();
    let (t_statistic, p_value) = paired_t_test(&diffs);

    let mut per_label = BTreeMap::new();
    let label_keys: std::collections::BTreeSet<&String> =
        set.rows.iter().flat_map(|r| r.labels.keys()).collect();
    for key in label_keys {
        let classes: Vec<Option<usize>> = set
            .rows
            .iter()
            .map(|r| r.labels.get(key).and_then(LabelValue::as_class))
            .collect();
        let (mut w, mut a) = ((0.0, 0usize), (0.0, 0usize));
        for (i, j) in pairs() {
            if let (Some(ci), Some(cj)) = (classes[i], classes[j]) {
                let acc = if ci == cj { &mut w } else { &mut a };
                acc.0 += d(i, j);
                acc.1 += 1;
            }
        }
        if w.1 > 0 && a.1 > 0 {
            per_label.insert(
                key.clone(),
                LabelDistance {
                    within: w.0 / w.1 as f64,
                    across: a.0 / a.1 as f64,
                },
            );
        }
    }

    let mut bins: BTreeMap<usize, (f64, usize)> = BTreeMap::new();
    for (i, j) in pairs() {
        if let (Some(a), Some(b)) = (set.rows[i].hr_bpm, set.rows[j].hr_bpm) {
            let bin = ((a - b).abs() / 10.0).floor() as usize;
            let e = bins.entry(bin).or_default();
            e.0 += d(i, j);
            e.1 += 1;
        }
    }
    let hr_curve = bins
        .into_iter()
        .map(|(bin, (sum, count))| HrBinDistance {
            delta_hr_lo_bpm: bin as f64 * 10.0,
            mean_distance: sum / count as f64,
            pairs: count,
        })
        .collect();

    Ok(DistanceReport {
        n_subjects: k,
        intra_subject: MeanStd::of(&intra_means),
        inter_subject: MeanStd::of(&inter_means),
        t_statistic,
        p_value,
        per_label,
        hr_curve,
    })
}
