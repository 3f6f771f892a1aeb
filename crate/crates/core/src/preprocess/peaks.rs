//! R-peak detection (band-pass, differentiate, square, integrate, adaptive
//! threshold) and heart-rate helpers.

use super::filter::{butterworth, filtfilt, Band};
use crate::error::{Error, Result};

pub const HR_MIN_BPM: f64 = 40.0;
pub const HR_MAX_BPM: f64 = 210.0;
pub const HR_BIN_WIDTH_BPM: f64 = 10.0;
pub const HR_BIN_COUNT: usize = 17;

/// Minimum spacing between consecutive beats, in seconds.
pub const REFRACTORY_S: f64 = 0.2;

fn centered_mean(x: &[f64], half: usize) -> Vec<f64> {
    let n = x.len();
    let mut prefix = vec![0.0; n + 1];
    for i in 0..n {
        prefix[i + 1] = prefix[i] + x[i];
    }
    (0..n)
        .map(|i| {
            let lo = i.saturating_sub(half);
            let hi = (i + half + 1).min(n);
            (prefix[hi] - prefix[lo]) / (hi - lo) as f64
        })
        .collect()
}

fn qrs_energy(x: &[f64], rate_hz: f64) -> Option<Vec<f64>> {
    let hp = butterworth(2, 5.0, rate_hz, Band::Highpass).ok()?;
    let lp = butterworth(2, 15.0f64.min(0.45 * rate_hz), rate_hz, Band::Lowpass).ok()?;
    let pad = (rate_hz / 5.0).round() as usize;
    let band = filtfilt(&lp, &filtfilt(&hp, x, pad), pad);
    let n = band.len();
    let squared: Vec<f64> = (0..n)
        .map(|i| {
            let next = band[(i + 1).min(n - 1)];
            let prev = band[i.saturating_sub(1)];
            let d = (next - prev) * rate_hz / 2.0;
            d * d
        })
        .collect();
    let half = ((0.075 * rate_hz).round() as usize).max(1);
    Some(centered_mean(&squared, half))
}

/// Indices of R peaks, strictly increasing and at least [`REFRACTORY_S`] apart.
/// Signals below 50 Hz or shorter than two seconds yield no peaks.
pub fn detect_r_peaks(x: &[f64], rate_hz: f64) -> Vec<usize> {
    let n = x.len();
    if rate_hz < 50.0 || (n as f64) < 2.0 * rate_hz {
        return Vec::new();
    }
    let mean = x.iter().sum::<f64>() / n as f64;
    let spread = x.iter().map(|v| (v - mean).abs()).fold(0.0, f64::max);
    if !(spread > 1e-12) || !spread.is_finite() {
        return Vec::new();
    }
    let Some(energy) = qrs_energy(x, rate_hz) else {
        return Vec::new();
    };
    let peak_max = energy.iter().copied().fold(0.0, f64::max);
    if !(peak_max > 1e-24) {
        return Vec::new();
    }

    let refractory = (REFRACTORY_S * rate_hz).ceil() as usize;
    let candidates: Vec<usize> = (1..n - 1)
        .filter(|&i| energy[i] > energy[i - 1] && energy[i] >= energy[i + 1])
        .collect();

    // Learning phase over the first two seconds.
    let learn = (2.0 * rate_hz) as usize;
    let mut spk = 0.25 * energy[..learn].iter().copied().fold(0.0, f64::max);
    let mut npk = 0.5 * energy[..learn].iter().sum::<f64>() / learn as f64;
    let threshold = |spk: f64, npk: f64| npk + 0.25 * (spk - npk);

    let mut beats: Vec<usize> = Vec::new();
    let mut last_candidate = 0;
    for (ci, &i) in candidates.iter().enumerate() {
        let v = energy[i];
        if v > threshold(spk, npk) {
            // Search back for a missed beat when the gap is unusually long.
            if beats.len() >= 2 {
                let mean_rr = (beats[beats.len() - 1] - beats[0]) as f64 / (beats.len() - 1) as f64;
                let prev = *beats.last().unwrap();
                if (i - prev) as f64 > 1.66 * mean_rr {
                    let half_thr = 0.5 * threshold(spk, npk);
                    let missed = candidates[last_candidate..ci]
                        .iter()
                        .copied()
                        .filter(|&j| j >= prev + refractory && j + refractory <= i)
                        .filter(|&j| energy[j] > half_thr)
                        .max_by(|&a, &b| energy[a].total_cmp(&energy[b]));
                    if let Some(j) = missed {
                        beats.push(j);
                        spk = 0.25 * energy[j] + 0.75 * spk;
                    }
                }
            }
            match beats.last() {
                Some(&prev) if i - prev < refractory => {
                    if v > energy[prev] {
                        *beats.last_mut().unwrap() = i;
                    }
                }
                _ => beats.push(i),
            }
            spk = 0.125 * v + 0.875 * spk;
            last_candidate = ci + 1;
        } else {
            npk = 0.125 * v + 0.875 * npk;
        }
    }

    // Move each beat onto the dominant deflection of the raw signal.
    let search = ((0.1 * rate_hz).round() as usize).max(1);
    let refined: Vec<(usize, f64)> = beats
        .iter()
        .map(|&i| {
            let lo = i.saturating_sub(search);
            let hi = (i + search + 1).min(n);
            let local = x[lo..hi].iter().sum::<f64>() / (hi - lo) as f64;
            let (j, dev) = (lo..hi)
                .map(|j| (j, (x[j] - local).abs()))
                .max_by(|a, b| a.1.total_cmp(&b.1).then(b.0.cmp(&a.0)))
                .unwrap();
            (j, dev)
        })
        .collect();

    let mut out: Vec<(usize, f64)> = Vec::with_capacity(refined.len());
    for (j, dev) in refined {
        match out.last_mut() {
            Some(last) if j < last.0 + refractory => {
                if dev > last.1 {
                    *last = (j, dev);
                }
            }
            _ => out.push((j, dev)),
        }
    }
    out.into_iter().map(|(j, _)| j).collect()
}

/// 60 / mean RR interval.
pub fn heart_rate_bpm(peaks: &[usize], rate_hz: f64) -> Result<f64> {
    if peaks.len() < 2 {
        return Err(Error::InsufficientData(format!(
            "heart rate needs at least 2 peaks, got {}",
            peaks.len()
        )));
    }
    let span = (peaks[peaks.len() - 1] - peaks[0]) as f64 / rate_hz;
    let mean_rr = span / (peaks.len() - 1) as f64;
    Ok(60.0 / mean_rr)
}

/// 10-bpm bin over [40, 210]; 210 itself falls into the last bin.
pub fn hr_bin(hr_bpm: f64) -> Result<usize> {
    if !(HR_MIN_BPM..=HR_MAX_BPM).contains(&hr_bpm) {
        return Err(Error::InvalidArgument(format!(
            "heart rate {hr_bpm} bpm outside [{HR_MIN_BPM}, {HR_MAX_BPM}]"
        )));
    }
    let bin = ((hr_bpm - HR_MIN_BPM) / HR_BIN_WIDTH_BPM).floor() as usize;
    Ok(bin.min(HR_BIN_COUNT - 1))
}
