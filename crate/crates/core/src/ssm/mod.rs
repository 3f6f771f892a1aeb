//! Linear state-space layers.
//!
//! A continuous system `x' = A x + B u`, `y = C x` (feed-through `D` fixed at
//! zero) is discretized with the bilinear transform
//!
//! ```text
//! Ā = (I - Δ/2·A)⁻¹ (I + Δ/2·A)        B̄ = (I - Δ/2·A)⁻¹ Δ B
//! ```
//!
//! and evaluated either as the recurrence `x_k = Ā x_{k-1} + B̄ u_k`,
//! `y_k = C x_k` or as the causal convolution of `u` with the kernel
//! `K̄ = (C B̄, C Ā B̄, C Ā² B̄, …)`.

pub mod conv;
pub mod network;

use nalgebra::{DMatrix, DVector};
use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::rng::Rng;

pub use conv::{causal_convolve, causal_convolve_direct, causal_convolve_fft, FftConv};
pub use network::{Backbone, BackboneGrads, GradAccum, KernelCache, Linear, Mode, NetworkConfig, Params, Tape};

/// Default range for the log-uniform step-size draw.
pub const DT_MIN: f64 = 1e-3;
pub const DT_MAX: f64 = 1e-1;

/// Continuous single-input single-output system. `a` is `n × n` row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct SsmParameters {
    pub n: usize,
    pub a: Vec<f64>,
    pub b: Vec<f64>,
    pub c: Vec<f64>,
    pub dt: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DiscreteSsm {
    pub n: usize,
    pub a_bar: Vec<f64>,
    pub b_bar: Vec<f64>,
    pub c: Vec<f64>,
}

/// Intermediate products of [`discretize`] needed by its adjoint.
#[derive(Clone, Debug)]
pub struct DiscretizeCache {
    /// `(I - Δ/2·A)⁻¹`
    pub inv: DMatrix<f64>,
    /// `I + Δ/2·A`
    pub plus: DMatrix<f64>,
}

/// HiPPO-LegS state matrix (negated) and input vector.
pub fn hippo_legs(n: usize) -> (Vec<f64>, Vec<f64>) {
    let mut a = vec![0.0; n * n];
    for row in 0..n {
        for col in 0..=row {
            let v = if row == col {
                (row + 1) as f64
            } else {
                ((2 * row + 1) as f64).sqrt() * ((2 * col + 1) as f64).sqrt()
            };
            a[row * n + col] = -v;
        }
    }
    let b = (0..n).map(|i| ((2 * i + 1) as f64).sqrt()).collect();
    (a, b)
}

/// Log-uniform step size in `[DT_MIN, DT_MAX]`.
pub fn sample_dt(rng: &mut Rng) -> f64 {
    rng.random_range(DT_MIN.ln()..=DT_MAX.ln()).exp()
}

impl SsmParameters {
    /// HiPPO state matrix, standard-normal `C`, log-uniform step size.
    pub fn hippo(n: usize, rng: &mut Rng) -> Self {
        assert!(n >= 1, "state dimension must be >= 1");
        let (a, b) = hippo_legs(n);
        let c = (0..n).map(|_| StandardNormal.sample(rng)).collect();
        SsmParameters {
            n,
            a,
            b,
            c,
            dt: sample_dt(rng),
        }
    }

    pub fn scalar(a: f64, b: f64, c: f64, dt: f64) -> Self {
        SsmParameters {
            n: 1,
            a: vec![a],
            b: vec![b],
            c: vec![c],
            dt,
        }
    }
}

pub fn discretize(p: &SsmParameters) -> Result<DiscreteSsm> {
    discretize_with_cache(p).map(|(d, _)| d)
}

pub fn discretize_with_cache(p: &SsmParameters) -> Result<(DiscreteSsm, DiscretizeCache)> {
    let n = p.n;
    if p.a.len() != n * n || p.b.len() != n || p.c.len() != n {
        return Err(Error::Shape(format!("state dimension {n} does not match A/B/C")));
    }
    if !(p.dt > 0.0) {
        return Err(Error::InvalidArgument(format!("step size must be > 0, got {}", p.dt)));
    }
    let a = DMatrix::from_row_slice(n, n, &p.a);
    let half = 0.5 * p.dt;
    let eye = DMatrix::<f64>::identity(n, n);
    let minus = &eye - &a * half;
    let plus = &eye + &a * half;
    let inv = minus
        .clone()
        .try_inverse()
        .filter(|m| m.iter().all(|v| v.is_finite()))
        .ok_or_else(|| Error::Singular("I - Δ/2·A is not invertible".into()))?;
    let a_bar = &inv * &plus;
    let b_bar = &inv * DVector::from_column_slice(&p.b) * p.dt;
    Ok((
        DiscreteSsm {
            n,
            a_bar: a_bar.transpose().as_slice().to_vec(),
            b_bar: b_bar.as_slice().to_vec(),
            c: p.c.clone(),
        },
        DiscretizeCache { inv, plus },
    ))
}

/// Adjoint of [`discretize`]: gradients with respect to `A`, `B` and `Δ`
/// given gradients with respect to `Ā` (row-major) and `B̄`.
pub fn discretize_backward(
    p: &SsmParameters,
    cache: &DiscretizeCache,
    g_a_bar: &[f64],
    g_b_bar: &[f64],
) -> (Vec<f64>, Vec<f64>, f64) {
    let n = p.n;
    let a = DMatrix::from_row_slice(n, n, &p.a);
    let b = DVector::from_column_slice(&p.b);
    let ga_bar = DMatrix::from_row_slice(n, n, g_a_bar);
    let gb_bar = DVector::from_column_slice(g_b_bar);
    let inv_t = cache.inv.transpose();

    let g_plus = &inv_t * &ga_bar;
    let g_inv = &ga_bar * cache.plus.transpose() + (&gb_bar * b.transpose()) * p.dt;
    let g_minus = -(&inv_t * g_inv * &inv_t);
    let g_b = (&inv_t * &gb_bar) * p.dt;
    let g_a = (&g_plus - &g_minus) * (0.5 * p.dt);

    let xb = &cache.inv * &b;
    let g_dt = gb_bar.dot(&xb) + 0.5 * (&g_plus - &g_minus).dot(&a);

    (
        g_a.transpose().as_slice().to_vec(),
        g_b.as_slice().to_vec(),
        g_dt,
    )
}

fn matvec(m: &[f64], x: &[f64], out: &mut [f64]) {
    let n = x.len();
    for (i, o) in out.iter_mut().enumerate() {
        let row = &m[i * n..(i + 1) * n];
        *o = row.iter().zip(x).map(|(a, b)| a * b).sum();
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Unrolled recurrence from a zero state.
pub fn scan(ssm: &DiscreteSsm, u: &[f64]) -> Vec<f64> {
    let n = ssm.n;
    let mut x = vec![0.0; n];
    let mut next = vec![0.0; n];
    u.iter()
        .map(|&uk| {
            matvec(&ssm.a_bar, &x, &mut next);
            for i in 0..n {
                x[i] = next[i] + ssm.b_bar[i] * uk;
            }
            dot(&ssm.c, &x)
        })
        .collect()
}

/// Convolution kernel `K̄[j] = C Ā^j B̄` for `j < len`.
pub fn kernel(ssm: &DiscreteSsm, len: usize) -> Vec<f64> {
    kernel_with_states(ssm, len).0
}

/// Kernel plus the powers `Ā^j B̄` (row-major `len × n`), kept for the adjoint.
pub fn kernel_with_states(ssm: &DiscreteSsm, len: usize) -> (Vec<f64>, Vec<f64>) {
    let n = ssm.n;
    let mut states = vec![0.0; len * n];
    let mut k = Vec::with_capacity(len);
    if len == 0 {
        return (k, states);
    }
    states[..n].copy_from_slice(&ssm.b_bar);
    for j in 0..len {
        let (done, rest) = states.split_at_mut((j + 1) * n);
        let v = &done[j * n..];
        k.push(dot(&ssm.c, v));
        if j + 1 < len {
            matvec(&ssm.a_bar, v, &mut rest[..n]);
        }
    }
    (k, states)
}

/// Adjoint of [`kernel`]: gradients with respect to `Ā` (row-major), `B̄`
/// and `C` given the gradient of the kernel.
pub fn kernel_backward(ssm: &DiscreteSsm, states: &[f64], g_k: &[f64]) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let n = ssm.n;
    let len = g_k.len();
    let mut g_c = vec![0.0; n];
    let mut g_a = vec![0.0; n * n];
    if len == 0 {
        return (g_a, vec![0.0; n], g_c);
    }
    for j in 0..len {
        let v = &states[j * n..(j + 1) * n];
        for i in 0..n {
            g_c[i] += g_k[j] * v[i];
        }
    }
    // lambda_j = g_k[j] C + Āᵀ lambda_{j+1}
    let mut lambda: Vec<f64> = ssm.c.iter().map(|c| g_k[len - 1] * c).collect();
    let mut tmp = vec![0.0; n];
    for j in (0..len - 1).rev() {
        let v = &states[j * n..(j + 1) * n];
        for r in 0..n {
            let l = lambda[r];
            if l != 0.0 {
                let row = &mut g_a[r * n..(r + 1) * n];
                for (g, vc) in row.iter_mut().zip(v) {
                    *g += l * vc;
                }
            }
        }
        tmp.iter_mut().for_each(|t| *t = 0.0);
        for r in 0..n {
            let l = lambda[r];
            let row = &ssm.a_bar[r * n..(r + 1) * n];
            for (t, a) in tmp.iter_mut().zip(row) {
                *t += a * l;
            }
        }
        for i in 0..n {
            lambda[i] = tmp[i] + g_k[j] * ssm.c[i];
        }
    }
    (g_a, lambda, g_c)
}

/// Spectral radius of a square row-major matrix.
pub fn spectral_radius(m: &[f64], n: usize) -> f64 {
    DMatrix::from_row_slice(n, n, m)
        .complex_eigenvalues()
        .iter()
        .map(|z| z.norm())
        .fold(0.0, f64::max)
}

/// Exact GELU, `x Φ(x)`.
pub fn gelu(x: f64) -> f64 {
    x * normal_cdf(x)
}

pub fn normal_cdf(x: f64) -> f64 {
    0.5 * (1.0 + libm::erf(x * std::f64::consts::FRAC_1_SQRT_2))
}

pub fn normal_pdf(x: f64) -> f64 {
    (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt()
}

/// `d/dx [x Φ(x)]` given a precomputed `Φ(x)`.
pub fn gelu_grad_from_cdf(x: f64, cdf: f64) -> f64 {
    cdf + x * normal_pdf(x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng;

    #[test]
    fn zero_state_matrix_gives_identity() {
        let p = SsmParameters {
            n: 3,
            a: vec![0.0; 9],
            b: vec![1.0; 3],
            c: vec![1.0; 3],
            dt: 1.0,
        };
        let d = discretize(&p).unwrap();
        let eye = [1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0];
        assert_eq!(d.a_bar, eye);
        assert_eq!(d.b_bar, vec![1.0; 3]);
    }

    #[test]
    fn scalar_closed_form() {
        let d = discretize(&SsmParameters::scalar(-1.0, 1.0, 1.0, 0.1)).unwrap();
        assert!((d.a_bar[0] - 0.95 / 1.05).abs() < 1e-12);
        assert!((d.b_bar[0] - 0.1 / 1.05).abs() < 1e-12);
        let y = scan(&d, &[1.0, 0.0, 0.0]);
        let expect = [0.0952381, 0.0861678, 0.0779613];
        for (a, b) in y.iter().zip(expect) {
            assert!((a - b).abs() < 5e-8, "{a} {b}");
        }
        let k = kernel(&d, 3);
        for (a, b) in k.iter().zip(&y) {
            assert!((a - b).abs() < 1e-15);
        }
        assert_eq!(kernel(&d, 1), vec![d.b_bar[0]]);
    }

    #[test]
    fn singular_system_is_reported() {
        // I - Δ/2·a = 0 for a = 2/Δ.
        let p = SsmParameters::scalar(20.0, 1.0, 1.0, 0.1);
        assert!(matches!(discretize(&p), Err(Error::Singular(_))));
    }

    #[test]
    fn hippo_small_cases() {
        let (a, b) = hippo_legs(1);
        assert_eq!(a, vec![-1.0]);
        assert_eq!(b, vec![1.0]);
        let (a, _) = hippo_legs(2);
        assert_eq!(a[0], -1.0);
        assert_eq!(a[1], 0.0);
        assert!((a[2] + 3f64.sqrt()).abs() < 1e-15);
        assert_eq!(a[3], -2.0);
        let (a, _) = hippo_legs(64);
        for r in 0..64 {
            assert_eq!(a[r * 64 + r], -((r + 1) as f64));
            for c in r + 1..64 {
                assert_eq!(a[r * 64 + c], 0.0);
            }
        }
    }

    #[test]
    fn hippo_draws_are_in_range() {
        let mut r = rng(3);
        for _ in 0..100 {
            let p = SsmParameters::hippo(8, &mut r);
            assert!((DT_MIN..=DT_MAX).contains(&p.dt));
        }
    }

    #[test]
    fn zero_input_gives_zero_output() {
        let mut r = rng(1);
        let d = discretize(&SsmParameters::hippo(6, &mut r)).unwrap();
        assert!(scan(&d, &[0.0; 20]).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn impulse_response_is_kernel() {
        let mut r = rng(2);
        let d = discretize(&SsmParameters::hippo(5, &mut r)).unwrap();
        let mut u = vec![0.0; 16];
        u[0] = 1.0;
        let y = scan(&d, &u);
        let k = kernel(&d, 16);
        for (a, b) in y.iter().zip(&k) {
            assert!((a - b).abs() < 1e-14);
        }
    }

    #[test]
    fn gelu_spot_values() {
        assert_eq!(gelu(0.0), 0.0);
        assert!((2.99..=3.0).contains(&gelu(3.0)));
        assert!((-0.01..=0.0).contains(&gelu(-3.0)));
        let h = 1e-6;
        for x in [-2.0, -0.3, 0.0, 0.7, 2.5] {
            let fd = (gelu(x + h) - gelu(x - h)) / (2.0 * h);
            assert!((fd - gelu_grad_from_cdf(x, normal_cdf(x))).abs() < 1e-8);
        }
    }

    fn fd_check(p: &SsmParameters, len: usize, weights: &[f64]) {
        let loss = |p: &SsmParameters| -> f64 {
            let d = discretize(p).unwrap();
            kernel(&d, len).iter().zip(weights).map(|(k, w)| k * w).sum()
        };
        let (d, cache) = discretize_with_cache(p).unwrap();
        let (_, states) = kernel_with_states(&d, len);
        let (ga_bar, gb_bar, gc) = kernel_backward(&d, &states, weights);
        let (ga, gb, gdt) = discretize_backward(p, &cache, &ga_bar, &gb_bar);
        let h = 1e-6;
        let close = |analytic: f64, fd: f64| (analytic - fd).abs() <= 1e-6 + 1e-5 * fd.abs();
        for i in 0..p.n * p.n {
            let mut q = p.clone();
            q.a[i] += h;
            let up = loss(&q);
            q.a[i] -= 2.0 * h;
            let fd = (up - loss(&q)) / (2.0 * h);
            assert!(close(ga[i], fd), "A[{i}] {} vs {fd}", ga[i]);
        }
        for i in 0..p.n {
            let mut q = p.clone();
            q.b[i] += h;
            let up = loss(&q);
            q.b[i] -= 2.0 * h;
            assert!(close(gb[i], (up - loss(&q)) / (2.0 * h)));
            let mut q = p.clone();
            q.c[i] += h;
            let up = loss(&q);
            q.c[i] -= 2.0 * h;
            assert!(close(gc[i], (up - loss(&q)) / (2.0 * h)));
        }
        let mut q = p.clone();
        q.dt += h * 1e-2;
        let up = loss(&q);
        q.dt -= 2.0 * h * 1e-2;
        let fd = (up - loss(&q)) / (2.0 * h * 1e-2);
        assert!(close(gdt, fd), "dt {gdt} vs {fd}");
    }

    #[test]
    fn kernel_and_discretization_adjoints_match_finite_differences() {
        let mut r = rng(9);
        for n in [1, 2, 4] {
            let p = SsmParameters::hippo(n, &mut r);
            let w: Vec<f64> = (0..12).map(|i| ((i * 7) % 5) as f64 - 2.0).collect();
            fd_check(&p, 12, &w);
        }
    }
}
