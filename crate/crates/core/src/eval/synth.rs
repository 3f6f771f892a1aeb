//! Synthetic single-lead ECG: a Gaussian-wave beat template repeated at a
//! known heart rate, with subject-specific morphology. Serves as ground truth
//! for the detector, the augmentations and desk-scale training runs.

use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::rng::{rng, rng_from, Rng};
use crate::signal_io::{DatasetManifest, EcgRecord, LabelValue, TaskKind};

/// One Gaussian wave of the beat template, positioned relative to the R peak.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Wave {
    pub offset_s: f64,
    pub amplitude: f64,
    pub width_s: f64,
}

/// P, Q, R, S, T waves. P and T offsets scale with the square root of RR.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Morphology {
    pub waves: [Wave; 5],
}

impl Default for Morphology {
    fn default() -> Self {
        let w = |offset_s, amplitude, width_s| Wave {
            offset_s,
            amplitude,
            width_s,
        };
        Morphology {
            waves: [
                w(-0.20, 0.12, 0.025),
                w(-0.035, -0.12, 0.010),
                w(0.0, 1.0, 0.012),
                w(0.035, -0.25, 0.012),
                w(0.28, 0.30, 0.050),
            ],
        }
    }
}

impl Morphology {
    /// Randomly perturbed copy: amplitudes and widths scaled by `1 + spread * N(0,1)`.
    pub fn perturbed(&self, spread: f64, rng: &mut Rng) -> Morphology {
        let normal = Normal::new(0.0, 1.0).unwrap();
        let mut m = self.clone();
        for (i, w) in m.waves.iter_mut().enumerate() {
            let s = if i == 2 { 0.5 * spread } else { spread };
            w.amplitude *= (1.0 + s * normal.sample(rng)).clamp(0.3, 2.0);
            w.width_s *= (1.0 + 0.5 * spread * normal.sample(rng)).clamp(0.6, 1.6);
        }
        m
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BeatTrainSpec {
    pub hr_bpm: f64,
    /// Standard deviation of beat-to-beat RR variation, as a fraction of RR.
    pub rr_jitter: f64,
    pub morphology: Morphology,
    pub gain: f64,
    pub offset: f64,
    pub noise_std: f64,
    pub wander_amplitude: f64,
}

impl BeatTrainSpec {
    pub fn clean(hr_bpm: f64) -> Self {
        BeatTrainSpec {
            hr_bpm,
            rr_jitter: 0.0,
            morphology: Morphology::default(),
            gain: 1.0,
            offset: 0.0,
            noise_std: 0.0,
            wander_amplitude: 0.0,
        }
    }
}

/// Render a beat train; also returns the R-peak sample indices.
pub fn synth_beat_train_with_beats(
    spec: &BeatTrainSpec,
    rate_hz: f64,
    seconds: f64,
    seed: u64,
) -> (Vec<f64>, Vec<usize>) {
    let mut r = rng(seed);
    let normal = Normal::new(0.0, 1.0).unwrap();
    let n = (rate_hz * seconds).round() as usize;
    let rr = 60.0 / spec.hr_bpm;

    let mut beat_times = Vec::new();
    let mut t = r.random_range(0.1..rr.max(0.11)) - rr;
    while t < seconds + rr {
        beat_times.push(t);
        let jitter = (spec.rr_jitter * normal.sample(&mut r)).clamp(-0.3, 0.3);
        t += rr * (1.0 + jitter);
    }

    let qt_scale = rr.sqrt();
    let mut x = vec![0.0; n];
    for &bt in &beat_times {
        for (k, w) in spec.morphology.waves.iter().enumerate() {
            let center = bt + if k == 0 || k == 4 { w.offset_s * qt_scale } else { w.offset_s };
            let lo = (((center - 5.0 * w.width_s) * rate_hz).floor().max(0.0)) as usize;
            let hi = (((center + 5.0 * w.width_s) * rate_hz).ceil().max(0.0) as usize).min(n);
            for (i, v) in x.iter_mut().enumerate().take(hi).skip(lo) {
                let d = (i as f64 / rate_hz - center) / w.width_s;
                *v += w.amplitude * (-0.5 * d * d).exp();
            }
        }
    }

    let wander_freq = r.random_range(0.05..0.3);
    let wander_phase = r.random_range(0.0..std::f64::consts::TAU);
    for (i, v) in x.iter_mut().enumerate() {
        let t = i as f64 / rate_hz;
        let wander = spec.wander_amplitude
            * (std::f64::consts::TAU * wander_freq * t + wander_phase).sin();
        let noise = if spec.noise_std > 0.0 {
            spec.noise_std * normal.sample(&mut r)
        } else {
            0.0
        };
        *v = spec.gain * (*v + wander + noise) + spec.offset;
    }

    let beats = beat_times
        .iter()
        .filter(|&&bt| bt >= 0.0)
        .map(|&bt| (bt * rate_hz).round() as usize)
        .filter(|&i| i < n)
        .collect();
    (x, beats)
}

pub fn synth_beat_train(spec: &BeatTrainSpec, rate_hz: f64, seconds: f64, seed: u64) -> Vec<f64> {
    synth_beat_train_with_beats(spec, rate_hz, seconds, seed).0
}

/// Generator settings for a labelled synthetic corpus.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub rate_hz: f64,
    pub record_seconds: f64,
    pub calm_hr_bpm: (f64, f64),
    pub stress_hr_bpm: (f64, f64),
    /// T-wave amplitude multiplier applied to stress windows.
    pub stress_t_wave_scale: f64,
    pub morphology_spread: f64,
    pub rr_jitter: f64,
    pub noise_std: f64,
    pub wander_amplitude: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            rate_hz: 200.0,
            record_seconds: 15.0,
            calm_hr_bpm: (55.0, 75.0),
            stress_hr_bpm: (95.0, 130.0),
            stress_t_wave_scale: 1.0,
            morphology_spread: 0.15,
            rr_jitter: 0.03,
            noise_std: 0.02,
            wander_amplitude: 0.1,
        }
    }
}

pub const STRESS_TASK: &str = "stress";
pub const HR_TASK: &str = "hr";

/// A corpus of one record per window with labels `stress` (0 calm, 1 stress)
/// and `hr` (generator heart rate in bpm).
pub fn synth_corpus(
    n_subjects: usize,
    windows_per_subject: usize,
    seed: u64,
    config: &SynthConfig,
) -> DatasetManifest {
    let mut manifest = DatasetManifest::new("synthetic");
    manifest
        .task_schema
        .insert(STRESS_TASK.into(), TaskKind::Classification { classes: 2 });
    manifest.task_schema.insert(
        HR_TASK.into(),
        TaskKind::Regression {
            min: config.calm_hr_bpm.0.min(config.stress_hr_bpm.0),
            max: config.calm_hr_bpm.1.max(config.stress_hr_bpm.1),
        },
    );
    for s in 0..n_subjects {
        let mut subject_rng = rng_from(seed, &[0, s as u64]);
        let base = Morphology::default().perturbed(config.morphology_spread, &mut subject_rng);
        let gain = subject_rng.random_range(0.5..2.0);
        let offset = subject_rng.random_range(-0.5..0.5);
        let subject_id = format!("S{s:03}");
        for w in 0..windows_per_subject {
            let mut wr = rng_from(seed, &[1, s as u64, w as u64]);
            let class = usize::from(wr.random_bool(0.5));
            let range = if class == 1 {
                config.stress_hr_bpm
            } else {
                config.calm_hr_bpm
            };
            let hr = if range.1 > range.0 {
                wr.random_range(range.0..range.1)
            } else {
                range.0
            };
            let mut morphology = base.perturbed(0.2 * config.morphology_spread, &mut wr);
            if class == 1 {
                morphology.waves[4].amplitude *= config.stress_t_wave_scale;
            }
            let spec = BeatTrainSpec {
                hr_bpm: hr,
                rr_jitter: config.rr_jitter,
                morphology,
                gain,
                offset,
                noise_std: config.noise_std,
                wander_amplitude: config.wander_amplitude,
            };
            let x = synth_beat_train(&spec, config.rate_hz, config.record_seconds, wr.random());
            let mut record = EcgRecord::new(
                format!("{subject_id}_W{w:04}"),
                subject_id.clone(),
                config.rate_hz,
                x.iter().map(|&v| v as f32).collect(),
            );
            record
                .labels
                .insert(STRESS_TASK.into(), LabelValue::Int(class as i64));
            record.labels.insert(HR_TASK.into(), LabelValue::Real(hr));
            manifest.records.push(record);
        }
    }
    manifest
}
