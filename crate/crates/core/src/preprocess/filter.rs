//! IIR Butterworth design (bilinear transform, second-order sections) and
//! zero-phase forward-backward filtering.

use num_complex::Complex64;
use std::f64::consts::PI;

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Band {
    Lowpass,
    Highpass,
}

/// One biquad, `a0` normalized to 1.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Sos {
    pub b: [f64; 3],
    pub a: [f64; 3],
}

impl Sos {
    fn response(&self, z: Complex64) -> Complex64 {
        let zi = z.inv();
        let num = self.b[0] + self.b[1] * zi + self.b[2] * zi * zi;
        let den = self.a[0] + self.a[1] * zi + self.a[2] * zi * zi;
        num / den
    }

    fn dc_gain(&self) -> f64 {
        (self.b[0] + self.b[1] + self.b[2]) / (self.a[0] + self.a[1] + self.a[2])
    }
}

/// Digital Butterworth filter of the given order as a cascade of biquads.
pub fn butterworth(order: usize, cutoff_hz: f64, rate_hz: f64, band: Band) -> Result<Vec<Sos>> {
    if order == 0 {
        return Err(Error::InvalidArgument("filter order must be >= 1".into()));
    }
    if !(cutoff_hz > 0.0 && cutoff_hz < rate_hz / 2.0) {
        return Err(Error::InvalidArgument(format!(
            "cutoff {cutoff_hz} Hz must lie in (0, {}) for rate {rate_hz} Hz",
            rate_hz / 2.0
        )));
    }
    let fs2 = 2.0 * rate_hz;
    let warped = fs2 * (PI * cutoff_hz / rate_hz).tan();
    let (zero, reference) = match band {
        Band::Lowpass => (-1.0, Complex64::new(1.0, 0.0)),
        Band::Highpass => (1.0, Complex64::new(-1.0, 0.0)),
    };
    let bilinear = |s: Complex64| (fs2 + s) / (fs2 - s);

    let n = order as f64;
    let mut sections = Vec::with_capacity(order.div_ceil(2));
    for k in 0..order {
        let theta = PI * (2.0 * k as f64 + n + 1.0) / (2.0 * n);
        let proto = Complex64::from_polar(1.0, theta);
        if proto.im < -1e-12 {
            continue; // conjugate of a pole already taken
        }
        let s = match band {
            Band::Lowpass => proto * warped,
            Band::Highpass => warped / proto,
        };
        let p = bilinear(s);
        let mut sos = if proto.im.abs() <= 1e-12 {
            Sos {
                b: [1.0, -zero, 0.0],
                a: [1.0, -p.re, 0.0],
            }
        } else {
            Sos {
                b: [1.0, -2.0 * zero, 1.0],
                a: [1.0, -2.0 * p.re, p.norm_sqr()],
            }
        };
        let g = sos.response(reference).norm();
        for b in &mut sos.b {
            *b /= g;
        }
        sections.push(sos);
    }
    Ok(sections)
}

/// Magnitude response of a cascade at `freq_hz`.
pub fn magnitude(sections: &[Sos], freq_hz: f64, rate_hz: f64) -> f64 {
    let z = Complex64::from_polar(1.0, 2.0 * PI * freq_hz / rate_hz);
    sections
        .iter()
        .map(|s| s.response(z))
        .fold(Complex64::new(1.0, 0.0), |acc, h| acc * h)
        .norm()
}

/// Steady-state section states for a unit step, scaled by the cumulative gain
/// of the preceding sections.
fn step_states(sections: &[Sos]) -> Vec<[f64; 2]> {
    let mut level = 1.0;
    sections
        .iter()
        .map(|s| {
            let g = s.dc_gain();
            let zi = [level * (g - s.b[0]), level * (s.b[2] - s.a[2] * g)];
            level *= g;
            zi
        })
        .collect()
}

/// Direct-form-II-transposed cascade, states initialized to the steady state
/// of a constant input equal to `x[0]`.
pub fn sosfilt(sections: &[Sos], x: &mut [f64]) {
    let Some(&x0) = x.first() else { return };
    let mut states: Vec<[f64; 2]> = step_states(sections)
        .into_iter()
        .map(|[a, b]| [a * x0, b * x0])
        .collect();
    for v in x.iter_mut() {
        let mut u = *v;
        for (s, z) in sections.iter().zip(states.iter_mut()) {
            let y = s.b[0] * u + z[0];
            z[0] = s.b[1] * u - s.a[1] * y + z[1];
            z[1] = s.b[2] * u - s.a[2] * y;
            u = y;
        }
        *v = u;
    }
}

/// Forward-backward filtering with odd-symmetric edge extension of `padlen` samples.
pub fn filtfilt(sections: &[Sos], x: &[f64], padlen: usize) -> Vec<f64> {
    let n = x.len();
    if n == 0 {
        return Vec::new();
    }
    let pad = padlen.min(n - 1);
    let mut ext = Vec::with_capacity(n + 2 * pad);
    ext.extend((1..=pad).rev().map(|i| 2.0 * x[0] - x[i]));
    ext.extend_from_slice(x);
    ext.extend((1..=pad).map(|i| 2.0 * x[n - 1] - x[n - 1 - i]));

    sosfilt(sections, &mut ext);
    ext.reverse();
    sosfilt(sections, &mut ext);
    ext.reverse();
    ext[pad..pad + n].to_vec()
}

/// Edge extension used by the preprocessing chain: at least the classic
/// three-times-filter-length, and one cutoff period.
pub fn default_padlen(sections: &[Sos], cutoff_hz: f64, rate_hz: f64) -> usize {
    let classic = 3 * (2 * sections.len() + 1);
    classic.max((rate_hz / cutoff_hz).round() as usize)
}
