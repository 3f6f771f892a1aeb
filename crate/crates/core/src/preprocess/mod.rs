//! Preprocessing chain: resample, smooth, high-pass, subject-wise z-score,
//! segment. Also hosts the R-peak and heart-rate utilities.

pub mod filter;
pub mod peaks;

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::Rng as _;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use peaks::{
    detect_r_peaks, heart_rate_bpm, hr_bin, HR_BIN_COUNT, HR_MAX_BPM, HR_MIN_BPM, REFRACTORY_S,
};

use crate::error::{Error, Result};
use crate::rng::rng;
use crate::signal_io::{write_f32le, DatasetManifest, LabelValue};
use filter::{butterworth, default_padlen, filtfilt, Band};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PreprocessConfig {
    pub target_rate_hz: f64,
    pub smoothing_kernel_len: usize,
    pub highpass_cutoff_hz: f64,
    pub highpass_order: usize,
    pub window_seconds: f64,
    pub pretrain_source_seconds: f64,
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        PreprocessConfig {
            target_rate_hz: 100.0,
            smoothing_kernel_len: 5,
            highpass_cutoff_hz: 0.5,
            highpass_order: 5,
            window_seconds: 10.0,
            pretrain_source_seconds: 15.0,
        }
    }
}

impl PreprocessConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.target_rate_hz > 2.0 * self.highpass_cutoff_hz) || !(self.highpass_cutoff_hz > 0.0)
        {
            return Err(Error::InvalidArgument(format!(
                "target_rate_hz ({}) must exceed twice highpass_cutoff_hz ({})",
                self.target_rate_hz, self.highpass_cutoff_hz
            )));
        }
        if self.smoothing_kernel_len % 2 == 0 {
            return Err(Error::InvalidArgument(format!(
                "smoothing_kernel_len must be odd, got {}",
                self.smoothing_kernel_len
            )));
        }
        if self.highpass_order == 0 || !(self.window_seconds > 0.0) {
            return Err(Error::InvalidArgument(
                "highpass_order and window_seconds must be positive".into(),
            ));
        }
        if self.pretrain_source_seconds < self.window_seconds {
            return Err(Error::InvalidArgument(
                "pretrain_source_seconds must be >= window_seconds".into(),
            ));
        }
        Ok(())
    }

    pub fn window_len(&self) -> usize {
        (self.window_seconds * self.target_rate_hz).round() as usize
    }

    pub fn source_len(&self) -> usize {
        (self.pretrain_source_seconds * self.target_rate_hz).round() as usize
    }
}

/// Half-width of the anti-alias kernel, in output samples.
const RESAMPLE_HALF_WIDTH: f64 = 8.0;

fn blackman(k: f64, half: f64) -> f64 {
    let t = (k + half) / (2.0 * half);
    0.42 - 0.5 * (2.0 * PI * t).cos() + 0.08 * (4.0 * PI * t).cos()
}

/// Downsample by windowed-sinc low-pass then linear interpolation at the
/// output timestamps.
pub fn resample(samples: &[f64], from_hz: f64, to_hz: f64) -> Result<Vec<f64>> {
    if !(from_hz > 0.0) || !(to_hz > 0.0) {
        return Err(Error::InvalidArgument("sampling rates must be positive".into()));
    }
    if from_hz < to_hz {
        return Err(Error::UnsupportedUpsampling { from_hz, to_hz });
    }
    if from_hz == to_hz || samples.is_empty() {
        return Ok(samples.to_vec());
    }
    let n = samples.len();
    let ratio = from_hz / to_hz;
    let cutoff = 0.45 / ratio; // cycles per input sample
    let half = (RESAMPLE_HALF_WIDTH * ratio).ceil() as isize;
    let mut taps: Vec<f64> = (-half..=half)
        .map(|k| {
            let k = k as f64;
            let sinc = if k == 0.0 {
                2.0 * cutoff
            } else {
                (2.0 * PI * cutoff * k).sin() / (PI * k)
            };
            sinc * blackman(k, half as f64 + 1.0)
        })
        .collect();
    let sum: f64 = taps.iter().sum();
    taps.iter_mut().for_each(|t| *t /= sum);

    // Odd-symmetric extension keeps DC and linear trends intact at the edges.
    let at = |i: isize| -> f64 {
        let last = n as isize - 1;
        if i < 0 {
            let m = (-i).min(last);
            2.0 * samples[0] - samples[m as usize]
        } else if i > last {
            let m = (i - last).min(last);
            2.0 * samples[last as usize] - samples[(last - m) as usize]
        } else {
            samples[i as usize]
        }
    };
    let filtered_at = |i: isize| -> f64 {
        taps.iter()
            .enumerate()
            .map(|(t, w)| w * at(i + t as isize - half))
            .sum()
    };

    let out_len = (n as f64 / ratio).round() as usize;
    Ok((0..out_len)
        .map(|i| {
            let pos = (i as f64 * ratio).min((n - 1) as f64);
            let lo = pos.floor() as isize;
            let frac = pos - lo as f64;
            let a = filtered_at(lo);
            if frac == 0.0 {
                a
            } else {
                a + frac * (filtered_at(lo + 1) - a)
            }
        })
        .collect())
}

/// Centered moving average; windows shrink at the edges.
pub fn moving_average(samples: &[f64], kernel_len: usize) -> Result<Vec<f64>> {
    if kernel_len % 2 == 0 || kernel_len > samples.len() {
        return Err(Error::InvalidArgument(format!(
            "kernel length {kernel_len} must be odd and <= signal length {}",
            samples.len()
        )));
    }
    let half = kernel_len / 2;
    let n = samples.len();
    Ok((0..n)
        .map(|i| {
            let lo = i.saturating_sub(half);
            let hi = (i + half + 1).min(n);
            samples[lo..hi].iter().sum::<f64>() / (hi - lo) as f64
        })
        .collect())
}

/// Zero-phase Butterworth high-pass.
pub fn highpass(samples: &[f64], cutoff_hz: f64, order: usize, rate_hz: f64) -> Result<Vec<f64>> {
    let sections = butterworth(order, cutoff_hz, rate_hz, Band::Highpass)?;
    let pad = default_padlen(&sections, cutoff_hz, rate_hz);
    Ok(filtfilt(&sections, samples, pad))
}

/// Lower bound on a subject's pooled standard deviation.
pub const MIN_SUBJECT_STD: f64 = 1e-8;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Moments {
    pub mean: f64,
    pub std: f64,
}

/// Normalize each subject by the population mean and standard deviation of
/// all of its samples pooled across records. `signals` holds
/// `(subject_id, samples)` pairs; several entries may share a subject.
pub fn zscore_subject(signals: &mut [(String, Vec<f64>)]) -> Result<BTreeMap<String, Moments>> {
    let mut acc: BTreeMap<String, (f64, usize)> = BTreeMap::new();
    for (subject, x) in signals.iter() {
        let e = acc.entry(subject.clone()).or_default();
        e.0 += x.iter().sum::<f64>();
        e.1 += x.len();
    }
    let mut sq: BTreeMap<&str, f64> = BTreeMap::new();
    for (subject, x) in signals.iter() {
        let (sum, count) = acc[subject];
        let mean = sum / count as f64;
        *sq.entry(subject.as_str()).or_default() += x.iter().map(|v| (v - mean).powi(2)).sum::<f64>();
    }
    let mut moments = BTreeMap::new();
    for (subject, (sum, count)) in &acc {
        if *count == 0 {
            return Err(Error::DegenerateSignal {
                subject: subject.clone(),
                message: "no samples".into(),
            });
        }
        let mean = sum / *count as f64;
        let std = (sq[subject.as_str()] / *count as f64).sqrt();
        if !(std > MIN_SUBJECT_STD) {
            return Err(Error::DegenerateSignal {
                subject: subject.clone(),
                message: format!("pooled standard deviation {std:e} is too small"),
            });
        }
        moments.insert(subject.clone(), Moments { mean, std });
    }
    for (subject, x) in signals.iter_mut() {
        let m = moments[subject.as_str()];
        x.iter_mut().for_each(|v| *v = (*v - m.mean) / m.std);
    }
    Ok(moments)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SegmentMode {
    Fixed,
    RandomOffset { seed: u64 },
}

/// Cut a signal into windows; returns `(start_offset, values)` pairs.
pub fn segment(samples: &[f64], window_len: usize, mode: SegmentMode) -> Result<Vec<(usize, Vec<f64>)>> {
    if window_len == 0 {
        return Err(Error::InvalidArgument("window length must be positive".into()));
    }
    if samples.len() < window_len {
        return Err(Error::SignalTooShort {
            needed: window_len,
            actual: samples.len(),
        });
    }
    Ok(match mode {
        SegmentMode::Fixed => samples
            .chunks_exact(window_len)
            .enumerate()
            .map(|(i, c)| (i * window_len, c.to_vec()))
            .collect(),
        SegmentMode::RandomOffset { seed } => {
            let r = rng(seed).random_range(0..=samples.len() - window_len);
            vec![(r, samples[r..r + window_len].to_vec())]
        }
    })
}

/// Resample, smooth and high-pass one raw record.
pub fn clean_signal(samples: &[f64], rate_hz: f64, config: &PreprocessConfig) -> Result<Vec<f64>> {
    let x = resample(samples, rate_hz, config.target_rate_hz)?;
    let x = moving_average(&x, config.smoothing_kernel_len)?;
    highpass(
        &x,
        config.highpass_cutoff_hz,
        config.highpass_order,
        config.target_rate_hz,
    )
}

#[derive(Clone, Debug, PartialEq)]
pub struct ProcessedRecord {
    pub record_id: String,
    pub subject_id: String,
    pub labels: BTreeMap<String, LabelValue>,
    pub samples: Vec<f64>,
}

/// Full chain up to (and including) subject-wise normalization.
pub fn preprocess_records(
    manifest: &DatasetManifest,
    config: &PreprocessConfig,
) -> Result<Vec<ProcessedRecord>> {
    config.validate()?;
    let cleaned = manifest
        .records
        .par_iter()
        .map(|r| clean_signal(&r.samples_f64(), r.sampling_rate_hz, config))
        .collect::<Result<Vec<_>>>()?;
    let mut pairs: Vec<(String, Vec<f64>)> = manifest
        .records
        .iter()
        .zip(cleaned)
        .map(|(r, x)| (r.subject_id.clone(), x))
        .collect();
    zscore_subject(&mut pairs)?;
    Ok(manifest
        .records
        .iter()
        .zip(pairs)
        .map(|(r, (_, samples))| ProcessedRecord {
            record_id: r.record_id.clone(),
            subject_id: r.subject_id.clone(),
            labels: r.labels.clone(),
            samples,
        })
        .collect())
}

#[derive(Clone, Debug, PartialEq)]
pub struct Window {
    pub values: Vec<f64>,
    pub subject_id: String,
    pub record_id: String,
    pub start_offset: usize,
    pub labels: BTreeMap<String, LabelValue>,
}

/// Fixed non-overlapping windows of every record; records shorter than one
/// window are skipped.
pub fn fixed_windows(records: &[ProcessedRecord], window_len: usize) -> Vec<Window> {
    records
        .iter()
        .filter(|r| r.samples.len() >= window_len)
        .flat_map(|r| {
            segment(&r.samples, window_len, SegmentMode::Fixed)
                .unwrap_or_default()
                .into_iter()
                .map(move |(start_offset, values)| Window {
                    values,
                    subject_id: r.subject_id.clone(),
                    record_id: r.record_id.clone(),
                    start_offset,
                    labels: r.labels.clone(),
                })
        })
        .collect()
}

pub const WINDOWS_FILE: &str = "windows.f32le";
pub const WINDOWS_INDEX_FILE: &str = "windows.index.jsonl";

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct WindowIndexLine {
    row: usize,
    record_id: String,
    subject_id: String,
    start_offset: usize,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    labels: BTreeMap<String, LabelValue>,
}

pub fn write_windows(dir: &Path, windows: &[Window]) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write_f32le(
        &dir.join(WINDOWS_FILE),
        windows.iter().flat_map(|w| w.values.iter().map(|&v| v as f32)),
    )?;
    let path = dir.join(WINDOWS_INDEX_FILE);
    let mut out = Vec::new();
    for (row, w) in windows.iter().enumerate() {
        serde_json::to_writer(
            &mut out,
            &WindowIndexLine {
                row,
                record_id: w.record_id.clone(),
                subject_id: w.subject_id.clone(),
                start_offset: w.start_offset,
                labels: w.labels.clone(),
            },
        )?;
        out.push(b'\n');
    }
    let mut f = fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
    f.write_all(&out).map_err(|e| Error::io(&path, e))
}

pub fn read_windows(dir: &Path) -> Result<Vec<Window>> {
    let data_path = dir.join(WINDOWS_FILE);
    let bytes = fs::read(&data_path).map_err(|e| Error::io(&data_path, e))?;
    let index_path = dir.join(WINDOWS_INDEX_FILE);
    let file = fs::File::open(&index_path).map_err(|e| Error::io(&index_path, e))?;
    let lines = BufReader::new(file)
        .lines()
        .map(|l| l.map_err(|e| Error::io(&index_path, e)))
        .filter(|l| !matches!(l, Ok(s) if s.trim().is_empty()))
        .enumerate()
        .map(|(index, line)| {
            serde_json::from_str::<WindowIndexLine>(&line?).map_err(|e| Error::Record {
                index,
                message: format!("window index: {e}"),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    if lines.is_empty() {
        return Ok(Vec::new());
    }
    let values: Vec<f64> = bytes
        .chunks_exact(4)
        .map(|c| f64::from(f32::from_le_bytes([c[0], c[1], c[2], c[3]])))
        .collect();
    if bytes.len() % 4 != 0 || values.len() % lines.len() != 0 {
        return Err(Error::Manifest(format!(
            "{} holds {} values, not divisible into {} rows",
            data_path.display(),
            values.len(),
            lines.len()
        )));
    }
    let width = values.len() / lines.len();
    Ok(lines
        .into_iter()
        .zip(values.chunks_exact(width))
        .map(|(l, v)| Window {
            values: v.to_vec(),
            subject_id: l.subject_id,
            record_id: l.record_id,
            start_offset: l.start_offset,
            labels: l.labels,
        })
        .collect())
}
