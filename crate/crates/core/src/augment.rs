//! ECG transforms and the stochastic composer producing pretext samples:
//! an augmented window plus a 9-way multi-hot target (eight transforms and
//! "original").

use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::preprocess::detect_r_peaks;
use crate::preprocess::filter::{butterworth, filtfilt, Band};
use crate::rng::{rng, Rng};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TransformKind {
    Mask = 0,
    Crop = 1,
    Noise = 2,
    Permutation = 3,
    TimeWarp = 4,
    Scale = 5,
    InvertTime = 6,
    Negate = 7,
}

impl TransformKind {
    pub const ALL: [TransformKind; 8] = [
        TransformKind::Mask,
        TransformKind::Crop,
        TransformKind::Noise,
        TransformKind::Permutation,
        TransformKind::TimeWarp,
        TransformKind::Scale,
        TransformKind::InvertTime,
        TransformKind::Negate,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            TransformKind::Mask => "mask",
            TransformKind::Crop => "crop",
            TransformKind::Noise => "noise",
            TransformKind::Permutation => "permutation",
            TransformKind::TimeWarp => "time_warp",
            TransformKind::Scale => "scale",
            TransformKind::InvertTime => "invert_time",
            TransformKind::Negate => "negate",
        }
    }
}

/// Number of pretext classes: eight transforms plus the untouched original.
pub const N_PRETEXT_CLASSES: usize = 9;
pub const ORIGINAL_CLASS: usize = 8;
pub const MAX_TRANSFORMS: usize = 4;
pub const CLASS_NAMES: [&str; N_PRETEXT_CLASSES] = [
    "mask",
    "crop",
    "noise",
    "permutation",
    "time_warp",
    "scale",
    "invert_time",
    "negate",
    "original",
];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskMode {
    Random,
    PrInterval,
    QrsInterval,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseKind {
    White,
    Wander,
}

/// Parameters actually used by one applied transform.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "transform", rename_all = "snake_case")]
pub enum Applied {
    Mask {
        requested: MaskMode,
        used: MaskMode,
        ratio: f64,
        masked: usize,
    },
    Crop {
        length: usize,
        start: usize,
    },
    Noise {
        kind: NoiseKind,
        snr_db: f64,
    },
    Permutation {
        segments: usize,
        order: Vec<usize>,
    },
    TimeWarp {
        factors: Vec<f64>,
    },
    Scale {
        alpha: f64,
    },
    InvertTime,
    Negate,
}

impl Applied {
    pub fn kind(&self) -> TransformKind {
        match self {
            Applied::Mask { .. } => TransformKind::Mask,
            Applied::Crop { .. } => TransformKind::Crop,
            Applied::Noise { .. } => TransformKind::Noise,
            Applied::Permutation { .. } => TransformKind::Permutation,
            Applied::TimeWarp { .. } => TransformKind::TimeWarp,
            Applied::Scale { .. } => TransformKind::Scale,
            Applied::InvertTime => TransformKind::InvertTime,
            Applied::Negate => TransformKind::Negate,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AugmentationOutcome {
    pub values: Vec<f64>,
    pub target: [f64; N_PRETEXT_CLASSES],
    pub applied: Vec<Applied>,
}

impl AugmentationOutcome {
    /// Target vector implied by an applied list.
    pub fn target_for(applied: &[Applied]) -> [f64; N_PRETEXT_CLASSES] {
        let mut t = [0.0; N_PRETEXT_CLASSES];
        if applied.is_empty() {
            t[ORIGINAL_CLASS] = 1.0;
        }
        for a in applied {
            t[a.kind().index()] = 1.0;
        }
        t
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentConfig {
    /// Independent selection probability of each transform.
    pub probability: f64,
    pub rate_hz: f64,
    pub mask_ratio: (f64, f64),
    pub mask_patch_len: usize,
    pub crop_fraction: (f64, f64),
    pub snr_db: (f64, f64),
    pub permutation_segments: (usize, usize),
    pub warp_segments: usize,
    pub warp_factor: (f64, f64),
    /// Scale factors are drawn log-uniformly from this range.
    pub scale: (f64, f64),
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            probability: 0.3,
            rate_hz: 100.0,
            mask_ratio: (0.1, 0.3),
            mask_patch_len: 25,
            crop_fraction: (0.5, 0.9),
            snr_db: (5.0, 20.0),
            permutation_segments: (4, 10),
            warp_segments: 3,
            warp_factor: (0.8, 1.25),
            scale: (0.25, 4.0),
        }
    }
}

impl AugmentConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if !(0.0..=1.0).contains(&self.probability) {
            return bad(format!("probability {} outside [0, 1]", self.probability));
        }
        if !(self.mask_ratio.0 > 0.0 && self.mask_ratio.0 <= self.mask_ratio.1 && self.mask_ratio.1 <= 1.0) {
            return bad("mask_ratio must satisfy 0 < lo <= hi <= 1".into());
        }
        if !(self.crop_fraction.0 > 0.0 && self.crop_fraction.0 <= self.crop_fraction.1 && self.crop_fraction.1 <= 1.0) {
            return bad("crop_fraction must satisfy 0 < lo <= hi <= 1".into());
        }
        if self.snr_db.0 > self.snr_db.1 {
            return bad("snr_db range is empty".into());
        }
        let (m0, m1) = self.permutation_segments;
        if !(1 <= m0 && m0 <= m1 && m1 <= 10) {
            return bad("permutation_segments must satisfy 1 <= lo <= hi <= 10".into());
        }
        let (w0, w1) = self.warp_factor;
        if !(0.5 <= w0 && w0 <= w1 && w1 <= 2.0) || self.warp_segments == 0 {
            return bad("warp_factor must lie in [0.5, 2] and warp_segments >= 1".into());
        }
        let (s0, s1) = self.scale;
        if !(s0 > 0.0 && s0 <= s1 && s1 < 5.0) {
            return bad("scale range must lie in (0, 5)".into());
        }
        if self.mask_patch_len == 0 || !(self.rate_hz > 0.0) {
            return bad("mask_patch_len and rate_hz must be positive".into());
        }
        Ok(())
    }
}

/// Result of masking: the masked signal and the zeroed indices.
#[derive(Clone, Debug, PartialEq)]
pub struct MaskResult {
    pub values: Vec<f64>,
    pub masked: Vec<usize>,
    pub used: MaskMode,
}

const QRS_HALF_WIDTH_S: f64 = 0.06;
const PR_START_S: f64 = 0.2;
const PR_END_S: f64 = 0.04;

fn random_patches(len: usize, count: usize, patch: usize, r: &mut Rng) -> Vec<usize> {
    if count == 0 {
        return Vec::new();
    }
    let patch = patch.min(len).max(1);
    let slots = len / patch;
    let full = count / patch;
    let rest = count % patch;
    let need = full + usize::from(rest > 0);
    let mut idx: Vec<usize> = Vec::with_capacity(count);
    if need <= slots {
        let mut chosen: Vec<usize> = rand::seq::index::sample(r, slots, need).into_vec();
        let partial = rest.gt(&0).then(|| chosen.pop().unwrap());
        for s in chosen {
            idx.extend(s * patch..(s + 1) * patch);
        }
        if let Some(s) = partial {
            idx.extend(s * patch..s * patch + rest);
        }
    } else {
        idx = rand::seq::index::sample(r, len, count).into_vec();
    }
    idx.sort_unstable();
    idx
}

/// Zero a fraction of the window, either in random patches or around
/// detected beats. Interval modes fall back to random masking when no beat
/// is found (reported through `used`).
pub fn mask(values: &[f64], mode: MaskMode, ratio: f64, rate_hz: f64, patch_len: usize, seed: u64) -> Result<MaskResult> {
    if !(ratio > 0.0 && ratio <= 1.0) {
        return Err(Error::InvalidArgument(format!("mask ratio {ratio} outside (0, 1]")));
    }
    let mut r = rng(seed);
    let n = values.len();
    let peaks = match mode {
        MaskMode::Random => Vec::new(),
        _ => detect_r_peaks(values, rate_hz),
    };
    let (used, masked) = if mode == MaskMode::Random || peaks.is_empty() {
        let count = (ratio * n as f64).floor() as usize;
        (MaskMode::Random, random_patches(n, count, patch_len, &mut r))
    } else {
        let k = ((ratio * peaks.len() as f64).ceil() as usize).min(peaks.len());
        let mut chosen: Vec<usize> = peaks.choose_multiple(&mut r, k).copied().collect();
        chosen.sort_unstable();
        let mut hit = vec![false; n];
        for p in chosen {
            let p = p as f64;
            let (lo, hi) = match mode {
                MaskMode::QrsInterval => (p - QRS_HALF_WIDTH_S * rate_hz, p + QRS_HALF_WIDTH_S * rate_hz),
                _ => (p - PR_START_S * rate_hz, p - PR_END_S * rate_hz),
            };
            let lo = lo.round().max(0.0) as usize;
            let hi = (hi.round().max(-1.0) + 1.0).min(n as f64) as usize;
            for h in hit.iter_mut().take(hi).skip(lo) {
                *h = true;
            }
        }
        (mode, (0..n).filter(|&i| hit[i]).collect())
    };
    let mut out = values.to_vec();
    for &i in &masked {
        out[i] = 0.0;
    }
    Ok(MaskResult { values: out, masked, used })
}

/// Random crop of `length` samples, zero-padded back to the input length.
/// Returns the output and the crop start.
pub fn crop(values: &[f64], length: usize, seed: u64) -> Result<(Vec<f64>, usize)> {
    let n = values.len();
    if length == 0 || length > n {
        return Err(Error::InvalidArgument(format!("crop length {length} outside (0, {n}]")));
    }
    let start = rng(seed).random_range(0..=n - length);
    let mut out = vec![0.0; n];
    out[..length].copy_from_slice(&values[start..start + length]);
    Ok((out, start))
}

fn power(x: &[f64]) -> f64 {
    x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64
}

/// Wander is a random walk low-passed below this frequency.
pub const WANDER_CUTOFF_HZ: f64 = 0.5;

/// Additive noise scaled to the requested signal-to-noise ratio.
pub fn add_noise(values: &[f64], kind: NoiseKind, snr_db: f64, rate_hz: f64, seed: u64) -> Result<Vec<f64>> {
    let p_signal = power(values);
    if !(p_signal > 0.0) {
        return Err(Error::InvalidArgument("noise SNR is undefined for an all-zero signal".into()));
    }
    let mut r = rng(seed);
    let normal = Normal::new(0.0, 1.0).unwrap();
    let n = values.len();
    let mut noise: Vec<f64> = match kind {
        NoiseKind::White => (0..n).map(|_| normal.sample(&mut r)).collect(),
        NoiseKind::Wander => {
            let mut acc = 0.0;
            let walk: Vec<f64> = (0..n)
                .map(|_| {
                    acc += normal.sample(&mut r);
                    acc
                })
                .collect();
            let cutoff = WANDER_CUTOFF_HZ.min(0.45 * rate_hz);
            let lp = butterworth(4, cutoff, rate_hz, Band::Lowpass)?;
            let y = filtfilt(&lp, &walk, (rate_hz / cutoff).round() as usize);
            let mean = y.iter().sum::<f64>() / n as f64;
            y.into_iter().map(|v| v - mean).collect()
        }
    };
    let p_noise = power(&noise);
    if !(p_noise > 0.0) {
        return Ok(values.to_vec());
    }
    let target = p_signal / 10f64.powf(snr_db / 10.0);
    let gain = (target / p_noise).sqrt();
    noise.iter_mut().for_each(|v| *v *= gain);
    Ok(values.iter().zip(&noise).map(|(s, e)| s + e).collect())
}

/// Segment boundaries for `m` segments, each at least 10% of the length.
fn segment_bounds(n: usize, m: usize, r: &mut Rng) -> Vec<(usize, usize)> {
    let min_len = (n as f64 * 0.1).ceil() as usize;
    let min_len = min_len.min(n / m);
    let slack = n - m * min_len;
    let mut cuts: Vec<usize> = (0..m - 1).map(|_| r.random_range(0..=slack)).collect();
    cuts.sort_unstable();
    let mut bounds = Vec::with_capacity(m);
    let mut start = 0;
    let mut prev_cut = 0;
    for i in 0..m {
        let cut = if i + 1 < m { cuts[i] } else { slack };
        let len = min_len + (cut - prev_cut);
        bounds.push((start, start + len));
        start += len;
        prev_cut = cut;
    }
    bounds
}

/// Split into `m` segments (each >= 10% of the window) and shuffle their order.
pub fn permute(values: &[f64], m: usize, seed: u64) -> Result<(Vec<f64>, Vec<usize>)> {
    if !(1..=10).contains(&m) {
        return Err(Error::InvalidArgument(format!("segment count {m} outside [1, 10]")));
    }
    if m > values.len() {
        return Err(Error::InvalidArgument("more segments than samples".into()));
    }
    let mut r = rng(seed);
    let bounds = segment_bounds(values.len(), m, &mut r);
    let mut order: Vec<usize> = (0..m).collect();
    order.shuffle(&mut r);
    let out = order
        .iter()
        .flat_map(|&i| values[bounds[i].0..bounds[i].1].iter().copied())
        .collect();
    Ok((out, order))
}

/// Linear interpolation of `x` onto `m` points spanning the same support.
pub fn stretch(x: &[f64], m: usize) -> Vec<f64> {
    let n = x.len();
    if m == 0 || n == 0 {
        return Vec::new();
    }
    if n == 1 || m == 1 {
        return vec![x[0]; m];
    }
    let step = (n - 1) as f64 / (m - 1) as f64;
    (0..m)
        .map(|j| {
            let pos = j as f64 * step;
            let lo = (pos.floor() as usize).min(n - 2);
            let frac = pos - lo as f64;
            x[lo] + frac * (x[lo + 1] - x[lo])
        })
        .collect()
}

/// Stretch or squeeze randomly selected equal-length segments, then crop or
/// zero-pad back to the input length. Returns the per-segment factors (1 for
/// untouched segments).
pub fn time_warp(values: &[f64], n_segments: usize, factor_range: (f64, f64), seed: u64) -> Result<(Vec<f64>, Vec<f64>)> {
    let (lo, hi) = factor_range;
    if !(0.5 <= lo && lo <= hi && hi <= 2.0) {
        return Err(Error::InvalidArgument(format!("warp factors {factor_range:?} outside [0.5, 2]")));
    }
    let n = values.len();
    if n_segments == 0 || n_segments > n {
        return Err(Error::InvalidArgument(format!("invalid warp segment count {n_segments}")));
    }
    let mut r = rng(seed);
    let mut selected: Vec<bool> = (0..n_segments).map(|_| r.random_bool(0.5)).collect();
    if !selected.iter().any(|&s| s) {
        let i = r.random_range(0..n_segments);
        selected[i] = true;
    }
    let factors: Vec<f64> = selected
        .iter()
        .map(|&s| if s { if hi > lo { r.random_range(lo..=hi) } else { lo } } else { 1.0 })
        .collect();
    let mut out = Vec::with_capacity(2 * n);
    for (i, &f) in factors.iter().enumerate() {
        let a = i * n / n_segments;
        let b = (i + 1) * n / n_segments;
        let seg = &values[a..b];
        if f == 1.0 {
            out.extend_from_slice(seg);
        } else {
            let m = ((seg.len() as f64) * f).round() as usize;
            out.extend(stretch(seg, m));
        }
    }
    out.resize(n, 0.0);
    Ok((out, factors))
}

pub fn scale(values: &[f64], alpha: f64) -> Result<Vec<f64>> {
    if !(alpha > 0.0 && alpha < 5.0) {
        return Err(Error::InvalidArgument(format!("scale factor {alpha} outside (0, 5)")));
    }
    Ok(values.iter().map(|v| alpha * v).collect())
}

/// Temporal reversal.
pub fn invert_time(values: &[f64]) -> Vec<f64> {
    values.iter().rev().copied().collect()
}

/// Amplitude negation.
pub fn negate(values: &[f64]) -> Vec<f64> {
    values.iter().map(|v| -v).collect()
}

fn uniform(r: &mut Rng, (lo, hi): (f64, f64)) -> f64 {
    if hi > lo {
        r.random_range(lo..=hi)
    } else {
        lo
    }
}

fn apply_one(kind: TransformKind, x: &[f64], config: &AugmentConfig, r: &mut Rng) -> Result<Option<(Vec<f64>, Applied)>> {
    let seed: u64 = r.random();
    let n = x.len();
    Ok(Some(match kind {
        TransformKind::Mask => {
            let requested = *[MaskMode::Random, MaskMode::PrInterval, MaskMode::QrsInterval]
                .choose(r)
                .unwrap();
            let ratio = uniform(r, config.mask_ratio);
            let m = mask(x, requested, ratio, config.rate_hz, config.mask_patch_len, seed)?;
            if m.masked.is_empty() {
                return Ok(None);
            }
            let masked = m.masked.len();
            (m.values, Applied::Mask { requested, used: m.used, ratio, masked })
        }
        TransformKind::Crop => {
            let frac = uniform(r, config.crop_fraction);
            let length = ((frac * n as f64).round() as usize).clamp(1, n);
            let (y, start) = crop(x, length, seed)?;
            (y, Applied::Crop { length, start })
        }
        TransformKind::Noise => {
            let kind = if r.random_bool(0.5) { NoiseKind::White } else { NoiseKind::Wander };
            let snr_db = uniform(r, config.snr_db);
            if power(x) == 0.0 {
                return Ok(None);
            }
            (add_noise(x, kind, snr_db, config.rate_hz, seed)?, Applied::Noise { kind, snr_db })
        }
        TransformKind::Permutation => {
            let (lo, hi) = config.permutation_segments;
            let segments = r.random_range(lo..=hi).min(n);
            let (y, order) = permute(x, segments, seed)?;
            (y, Applied::Permutation { segments, order })
        }
        TransformKind::TimeWarp => {
            let (y, factors) = time_warp(x, config.warp_segments.min(n), config.warp_factor, seed)?;
            (y, Applied::TimeWarp { factors })
        }
        TransformKind::Scale => {
            let (lo, hi) = config.scale;
            let alpha = uniform(r, (lo.ln(), hi.ln())).exp().clamp(lo, hi);
            (scale(x, alpha)?, Applied::Scale { alpha })
        }
        TransformKind::InvertTime => (invert_time(x), Applied::InvertTime),
        TransformKind::Negate => (negate(x), Applied::Negate),
    }))
}

/// Draw a random subset of at most four transforms and apply them in
/// enumeration order. Transforms that cannot act on the current signal (e.g.
/// noise on an all-zero window) are dropped from the applied list.
pub fn compose(window: &[f64], config: &AugmentConfig, seed: u64) -> Result<AugmentationOutcome> {
    config.validate()?;
    let mut r = rng(seed);
    let mut selected: Vec<TransformKind> = TransformKind::ALL
        .into_iter()
        .filter(|_| r.random_bool(config.probability))
        .collect();
    if selected.len() > MAX_TRANSFORMS {
        selected.shuffle(&mut r);
        selected.truncate(MAX_TRANSFORMS);
        selected.sort();
    }
    let mut values = window.to_vec();
    let mut applied = Vec::with_capacity(selected.len());
    for kind in selected {
        if let Some((y, a)) = apply_one(kind, &values, config, &mut r)? {
            values = y;
            applied.push(a);
        }
    }
    Ok(AugmentationOutcome {
        target: AugmentationOutcome::target_for(&applied),
        values,
        applied,
    })
}
