//! Causal convolution, directly and through zero-padded real FFTs.

use std::sync::Arc;

use num_complex::Complex64;
use realfft::{ComplexToReal, RealFftPlanner, RealToComplex};

use crate::error::{Error, Result};

/// `y[k] = Σ_{j≤k} K[j]·u[k−j]`, O(L²).
pub fn causal_convolve_direct(k: &[f64], u: &[f64]) -> Result<Vec<f64>> {
    check_len(k, u)?;
    Ok((0..u.len())
        .map(|i| (0..=i).map(|j| k[j] * u[i - j]).sum())
        .collect())
}

/// Same result via a transform of length at least `2L − 1`.
pub fn causal_convolve_fft(k: &[f64], u: &[f64]) -> Result<Vec<f64>> {
    check_len(k, u)?;
    if u.is_empty() {
        return Ok(Vec::new());
    }
    let conv = FftConv::new(u.len());
    let kf = conv.forward(k);
    let mut uf = conv.forward(u);
    for (a, b) in uf.iter_mut().zip(&kf) {
        *a *= b;
    }
    Ok(conv.inverse(uf))
}

/// Picks the direct path for short sequences and the FFT path otherwise.
pub fn causal_convolve(k: &[f64], u: &[f64]) -> Result<Vec<f64>> {
    if u.len() <= 64 {
        causal_convolve_direct(k, u)
    } else {
        causal_convolve_fft(k, u)
    }
}

fn check_len(k: &[f64], u: &[f64]) -> Result<()> {
    if k.len() != u.len() {
        return Err(Error::Shape(format!(
            "kernel length {} != input length {}",
            k.len(),
            u.len()
        )));
    }
    Ok(())
}

/// FFT plans for sequences of one length `len`, zero-padded to `n_fft`.
#[derive(Clone)]
pub struct FftConv {
    pub len: usize,
    pub n_fft: usize,
    r2c: Arc<dyn RealToComplex<f64>>,
    c2r: Arc<dyn ComplexToReal<f64>>,
}

impl std::fmt::Debug for FftConv {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("FftConv")
            .field("len", &self.len)
            .field("n_fft", &self.n_fft)
            .finish()
    }
}

impl FftConv {
    pub fn new(len: usize) -> Self {
        let n_fft = (2 * len.max(1) - 1).next_power_of_two().max(2);
        let mut planner = RealFftPlanner::<f64>::new();
        FftConv {
            len,
            n_fft,
            r2c: planner.plan_fft_forward(n_fft),
            c2r: planner.plan_fft_inverse(n_fft),
        }
    }

    pub fn bins(&self) -> usize {
        self.n_fft / 2 + 1
    }

    /// Spectrum of `x` (at most `len` values) zero-padded to `n_fft`.
    pub fn forward(&self, x: &[f64]) -> Vec<Complex64> {
        let mut buf = vec![0.0; self.n_fft];
        buf[..x.len()].copy_from_slice(x);
        self.forward_buf(&mut buf)
    }

    /// Spectrum of a strided column: `x[offset + i·stride]` for `i < len`.
    pub fn forward_strided(&self, x: &[f64], offset: usize, stride: usize) -> Vec<Complex64> {
        let mut buf = vec![0.0; self.n_fft];
        for (i, b) in buf[..self.len].iter_mut().enumerate() {
            *b = x[offset + i * stride];
        }
        self.forward_buf(&mut buf)
    }

    fn forward_buf(&self, buf: &mut [f64]) -> Vec<Complex64> {
        let mut out = self.r2c.make_output_vec();
        self.r2c.process(buf, &mut out).expect("buffer sizes match the plan");
        out
    }

    /// First `len` samples of the inverse transform, normalized.
    pub fn inverse(&self, spectrum: Vec<Complex64>) -> Vec<f64> {
        let mut full = self.inverse_full(spectrum);
        full.truncate(self.len);
        full
    }

    fn inverse_full(&self, mut spectrum: Vec<Complex64>) -> Vec<f64> {
        // DC and Nyquist bins of a real signal are real.
        spectrum[0].im = 0.0;
        let last = spectrum.len() - 1;
        spectrum[last].im = 0.0;
        let mut out = self.c2r.make_output_vec();
        self.c2r
            .process(&mut spectrum, &mut out)
            .expect("buffer sizes match the plan");
        let scale = 1.0 / self.n_fft as f64;
        out.iter_mut().for_each(|v| *v *= scale);
        out
    }

    /// Writes the first `len` samples of the inverse transform into a
    /// strided column.
    pub fn inverse_strided(&self, spectrum: Vec<Complex64>, out: &mut [f64], offset: usize, stride: usize) {
        let full = self.inverse_full(spectrum);
        for (i, v) in full[..self.len].iter().enumerate() {
            out[offset + i * stride] = *v;
        }
    }

    /// Adjoint of `y = causal(K, u)` with respect to `u`, from the spectra of
    /// `K` and of the output gradient: `du[i] = Σ_{k≥i} g[k]·K[k−i]`.
    pub fn correlate(&self, kf: &[Complex64], gf: &[Complex64]) -> Vec<Complex64> {
        kf.iter().zip(gf).map(|(k, g)| k.conj() * g).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng;
    use rand::Rng as _;

    fn random(n: usize, seed: u64) -> Vec<f64> {
        let mut r = rng(seed);
        (0..n).map(|_| r.random_range(-1.0..1.0)).collect()
    }

    #[test]
    fn identity_kernel_and_impulse() {
        let u = random(10, 1);
        let mut delta = vec![0.0; 10];
        delta[0] = 1.0;
        assert_eq!(causal_convolve_direct(&delta, &u).unwrap(), u);
        assert_eq!(causal_convolve_direct(&u, &delta).unwrap(), u);
        let y = causal_convolve_fft(&delta, &u).unwrap();
        for (a, b) in y.iter().zip(&u) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn direct_and_fft_agree() {
        for (len, seed) in [(32, 2), (1, 3), (100, 4), (257, 5)] {
            let k = random(len, seed);
            let u = random(len, seed + 100);
            let a = causal_convolve_direct(&k, &u).unwrap();
            let b = causal_convolve_fft(&k, &u).unwrap();
            for (x, y) in a.iter().zip(&b) {
                assert!((x - y).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn length_mismatch_is_an_error() {
        assert!(matches!(causal_convolve(&[1.0], &[1.0, 2.0]), Err(Error::Shape(_))));
    }

    #[test]
    fn correlation_is_the_adjoint() {
        let len = 40;
        let conv = FftConv::new(len);
        let k = random(len, 7);
        let g = random(len, 8);
        let du = conv.inverse(conv.correlate(&conv.forward(&k), &conv.forward(&g)));
        for i in 0..len {
            let expect: f64 = (i..len).map(|j| g[j] * k[j - i]).sum();
            assert!((du[i] - expect).abs() < 1e-12);
        }
    }
}
