//! Encoder, stacked S4 blocks, mean pooling and decoder, with a hand-written
//! reverse pass.
//!
//! Activations are `L × H` row-major. Each block computes
//! `x + proj(dropout(gelu(mix(ssm(layer_norm(x))))))`.

use num_complex::Complex64;
use rand::Rng as _;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::conv::FftConv;
use super::{
    discretize_backward, discretize_with_cache, gelu_grad_from_cdf, kernel_backward,
    kernel_with_states, normal_cdf, DiscreteSsm, DiscretizeCache, SsmParameters,
};
use crate::error::{Error, Result};
use crate::rng::{derive_seed, rng, rng_from};

pub const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NetworkConfig {
    /// Feature width `H`.
    pub d_model: usize,
    /// State size `N` of every channel SSM.
    pub d_state: usize,
    pub n_blocks: usize,
    pub dropout: f64,
    pub embedding_dim: usize,
    /// Samples per input window.
    pub window_len: usize,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        NetworkConfig {
            d_model: 256,
            d_state: 64,
            n_blocks: 6,
            dropout: 0.2,
            embedding_dim: 256,
            window_len: 1000,
        }
    }
}

impl NetworkConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidArgument(m.into()));
        if self.d_model == 0 || self.d_state == 0 || self.embedding_dim == 0 {
            return bad("network dimensions must be >= 1");
        }
        if self.n_blocks == 0 {
            return bad("n_blocks must be >= 1");
        }
        if self.window_len == 0 {
            return bad("window_len must be >= 1");
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad("dropout must be in [0, 1)");
        }
        Ok(())
    }
}

/// Uniform access to named parameter arrays, in a fixed order.
pub trait Params {
    fn collect<'a>(&'a self, prefix: &str, out: &mut Vec<(String, Vec<usize>, &'a [f64])>);
    fn collect_mut<'a>(&'a mut self, out: &mut Vec<&'a mut [f64]>);

    fn tensors(&self) -> Vec<(String, Vec<usize>, &[f64])> {
        let mut out = Vec::new();
        self.collect("", &mut out);
        out
    }

    fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out = Vec::new();
        self.collect_mut(&mut out);
        out
    }

    fn n_params(&self) -> usize {
        self.tensors().iter().map(|t| t.2.len()).sum()
    }

    fn add_assign(&mut self, other: &Self)
    where
        Self: Sized,
    {
        for (dst, (_, _, src)) in self.tensors_mut().into_iter().zip(other.tensors()) {
            dst.iter_mut().zip(src).for_each(|(d, s)| *d += s);
        }
    }

    fn scale(&mut self, factor: f64) {
        for t in self.tensors_mut() {
            t.iter_mut().for_each(|v| *v *= factor);
        }
    }

    fn fill_zero(&mut self) {
        for t in self.tensors_mut() {
            t.iter_mut().for_each(|v| *v = 0.0);
        }
    }
}

/// `C (m×n) = beta·C + A (m×k) · B (k×n)` with explicit strides for A and B.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    (rsa, csa): (usize, usize),
    b: &[f64],
    (rsb, csb): (usize, usize),
    beta: f64,
    c: &mut [f64],
) {
    if m == 0 || n == 0 {
        return;
    }
    assert!(c.len() >= m * n);
    assert!(k == 0 || a.len() > (m - 1) * rsa + (k - 1) * csa);
    assert!(k == 0 || b.len() > (k - 1) * rsb + (n - 1) * csb);
    // SAFETY: the asserts above keep every strided access inside the slices.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Affine map `y = x W + b` with `W` stored `d_in × d_out` row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Linear {
    pub d_in: usize,
    pub d_out: usize,
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Linear {
    /// Uniform in `±1/√d_in` for weights and biases.
    pub fn new(d_in: usize, d_out: usize, seed: u64) -> Self {
        let mut r = rng(seed);
        let bound = 1.0 / (d_in as f64).sqrt();
        let mut draw = |n: usize| (0..n).map(|_| r.random_range(-bound..=bound)).collect();
        let weight = draw(d_in * d_out);
        let bias = draw(d_out);
        Linear { d_in, d_out, weight, bias }
    }

    pub fn zeros(d_in: usize, d_out: usize) -> Self {
        Linear {
            d_in,
            d_out,
            weight: vec![0.0; d_in * d_out],
            bias: vec![0.0; d_out],
        }
    }

    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        self.apply_rows(x, 1)
    }

    pub fn apply_rows(&self, x: &[f64], rows: usize) -> Vec<f64> {
        debug_assert_eq!(x.len(), rows * self.d_in);
        let mut y: Vec<f64> = (0..rows).flat_map(|_| self.bias.iter().copied()).collect();
        gemm(rows, self.d_in, self.d_out, x, (self.d_in, 1), &self.weight, (self.d_out, 1), 1.0, &mut y);
        y
    }

    /// Accumulates parameter gradients into `grad` and returns the input gradient.
    pub fn backward_rows(&self, x: &[f64], gy: &[f64], rows: usize, grad: &mut Linear) -> Vec<f64> {
        let (di, dout) = (self.d_in, self.d_out);
        gemm(di, rows, dout, x, (1, di), gy, (dout, 1), 1.0, &mut grad.weight);
        for row in gy.chunks_exact(dout) {
            grad.bias.iter_mut().zip(row).for_each(|(b, g)| *b += g);
        }
        let mut gx = vec![0.0; rows * di];
        gemm(rows, dout, di, gy, (dout, 1), &self.weight, (1, dout), 0.0, &mut gx);
        gx
    }
}

impl Params for Linear {
    fn collect<'a>(&'a self, prefix: &str, out: &mut Vec<(String, Vec<usize>, &'a [f64])>) {
        out.push((format!("{prefix}weight"), vec![self.d_in, self.d_out], &self.weight));
        out.push((format!("{prefix}bias"), vec![self.d_out], &self.bias));
    }

    fn collect_mut<'a>(&'a mut self, out: &mut Vec<&'a mut [f64]>) {
        out.push(&mut self.weight);
        out.push(&mut self.bias);
    }
}

/// One S4 block: layer norm, `H` independent SSM channels, mixing affine,
/// GELU, dropout, output projector, residual.
#[derive(Clone, Debug, PartialEq)]
pub struct Block {
    pub norm_gamma: Vec<f64>,
    pub norm_beta: Vec<f64>,
    /// `H × N × N`, each channel row-major.
    pub a: Vec<f64>,
    /// `H × N`
    pub b: Vec<f64>,
    /// `H × N`
    pub c: Vec<f64>,
    /// `H`, step size `Δ = exp(log_dt)`.
    pub log_dt: Vec<f64>,
    pub mix: Linear,
    pub proj: Linear,
}

impl Block {
    pub fn new(h: usize, n: usize, seed: u64) -> Self {
        let mut a = Vec::with_capacity(h * n * n);
        let mut b = Vec::with_capacity(h * n);
        let mut c = Vec::with_capacity(h * n);
        let mut log_dt = Vec::with_capacity(h);
        for ch in 0..h {
            let p = SsmParameters::hippo(n, &mut rng_from(seed, &[0, ch as u64]));
            a.extend(p.a);
            b.extend(p.b);
            c.extend(p.c);
            log_dt.push(p.dt.ln());
        }
        Block {
            norm_gamma: vec![1.0; h],
            norm_beta: vec![0.0; h],
            a,
            b,
            c,
            log_dt,
            mix: Linear::new(h, h, derive_seed(seed, &[1])),
            proj: Linear::new(h, h, derive_seed(seed, &[2])),
        }
    }

    pub fn zeros(h: usize, n: usize) -> Self {
        Block {
            norm_gamma: vec![0.0; h],
            norm_beta: vec![0.0; h],
            a: vec![0.0; h * n * n],
            b: vec![0.0; h * n],
            c: vec![0.0; h * n],
            log_dt: vec![0.0; h],
            mix: Linear::zeros(h, h),
            proj: Linear::zeros(h, h),
        }
    }

    pub fn channel(&self, ch: usize, n: usize) -> SsmParameters {
        SsmParameters {
            n,
            a: self.a[ch * n * n..(ch + 1) * n * n].to_vec(),
            b: self.b[ch * n..(ch + 1) * n].to_vec(),
            c: self.c[ch * n..(ch + 1) * n].to_vec(),
            dt: self.log_dt[ch].exp(),
        }
    }

    fn width(&self) -> usize {
        self.log_dt.len()
    }

    fn state(&self) -> usize {
        self.b.len() / self.width()
    }
}

impl Params for Block {
    fn collect<'a>(&'a self, prefix: &str, out: &mut Vec<(String, Vec<usize>, &'a [f64])>) {
        let (h, n) = (self.width(), self.state());
        out.push((format!("{prefix}norm.gamma"), vec![h], &self.norm_gamma));
        out.push((format!("{prefix}norm.beta"), vec![h], &self.norm_beta));
        out.push((format!("{prefix}ssm.a"), vec![h, n, n], &self.a));
        out.push((format!("{prefix}ssm.b"), vec![h, n], &self.b));
        out.push((format!("{prefix}ssm.c"), vec![h, n], &self.c));
        out.push((format!("{prefix}ssm.log_dt"), vec![h], &self.log_dt));
        self.mix.collect(&format!("{prefix}mix."), out);
        self.proj.collect(&format!("{prefix}proj."), out);
    }

    fn collect_mut<'a>(&'a mut self, out: &mut Vec<&'a mut [f64]>) {
        out.push(&mut self.norm_gamma);
        out.push(&mut self.norm_beta);
        out.push(&mut self.a);
        out.push(&mut self.b);
        out.push(&mut self.c);
        out.push(&mut self.log_dt);
        self.mix.collect_mut(out);
        self.proj.collect_mut(out);
    }
}

/// Encoder, blocks and decoder. Gradients use the same type.
#[derive(Clone, Debug, PartialEq)]
pub struct Backbone {
    pub config: NetworkConfig,
    pub encoder: Linear,
    pub blocks: Vec<Block>,
    pub decoder: Linear,
}

pub type BackboneGrads = Backbone;

impl Params for Backbone {
    fn collect<'a>(&'a self, prefix: &str, out: &mut Vec<(String, Vec<usize>, &'a [f64])>) {
        self.encoder.collect(&format!("{prefix}encoder."), out);
        for (i, b) in self.blocks.iter().enumerate() {
            b.collect(&format!("{prefix}blocks.{i}."), out);
        }
        self.decoder.collect(&format!("{prefix}decoder."), out);
    }

    fn collect_mut<'a>(&'a mut self, out: &mut Vec<&'a mut [f64]>) {
        self.encoder.collect_mut(out);
        for b in &mut self.blocks {
            b.collect_mut(out);
        }
        self.decoder.collect_mut(out);
    }
}

/// Dropout behaviour of a forward pass.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Eval,
    /// Dropout masks drawn from this seed.
    Train { seed: u64 },
}

struct ChannelKernel {
    params: SsmParameters,
    disc: DiscreteSsm,
    cache: DiscretizeCache,
    kf: Vec<Complex64>,
}

/// Discretized kernels of every channel, computed once per parameter update.
pub struct KernelCache {
    pub conv: FftConv,
    blocks: Vec<Vec<ChannelKernel>>,
}

struct BlockTape {
    xhat: Vec<f64>,
    inv_std: Vec<f64>,
    zf: Vec<Vec<Complex64>>,
    s: Vec<f64>,
    m: Vec<f64>,
    cdf: Vec<f64>,
    mask: Option<Vec<f64>>,
}

/// Activations recorded by a training forward pass.
pub struct Tape {
    u: Vec<f64>,
    blocks: Vec<BlockTape>,
    pooled: Vec<f64>,
}

/// Per-sample gradient accumulator. Kernel gradients stay in the frequency
/// domain until [`GradAccum::finish`].
pub struct GradAccum {
    pub grads: Backbone,
    dkf: Vec<Vec<Vec<Complex64>>>,
}

impl Backbone {
    pub fn new(config: NetworkConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let (h, n) = (config.d_model, config.d_state);
        Ok(Backbone {
            encoder: Linear::new(1, h, derive_seed(seed, &[0])),
            blocks: (0..config.n_blocks)
                .map(|i| Block::new(h, n, derive_seed(seed, &[1, i as u64])))
                .collect(),
            decoder: Linear::new(h, config.embedding_dim, derive_seed(seed, &[2])),
            config,
        })
    }

    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        z.fill_zero();
        z
    }

    pub fn kernels(&self) -> Result<KernelCache> {
        let conv = FftConv::new(self.config.window_len);
        let (h, n, len) = (self.config.d_model, self.config.d_state, self.config.window_len);
        let blocks = self
            .blocks
            .iter()
            .map(|blk| {
                (0..h)
                    .into_par_iter()
                    .map(|ch| {
                        let params = blk.channel(ch, n);
                        let (disc, cache) = discretize_with_cache(&params)?;
                        let (k, _) = kernel_with_states(&disc, len);
                        if k.iter().any(|v| !v.is_finite()) {
                            return Err(Error::NonFinite(format!("SSM kernel of channel {ch}")));
                        }
                        let kf = conv.forward(&k);
                        Ok(ChannelKernel { params, disc, cache, kf })
                    })
                    .collect::<Result<Vec<_>>>()
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(KernelCache { conv, blocks })
    }

    /// Embeddings for a batch of windows.
    pub fn forward_batch(&self, windows: &[Vec<f64>], mode: Mode) -> Result<Vec<Vec<f64>>> {
        let cache = self.kernels()?;
        windows
            .par_iter()
            .enumerate()
            .map(|(i, w)| {
                let m = match mode {
                    Mode::Eval => Mode::Eval,
                    Mode::Train { seed } => Mode::Train {
                        seed: derive_seed(seed, &[i as u64]),
                    },
                };
                self.forward(&cache, w, m)
            })
            .collect()
    }

    pub fn forward(&self, cache: &KernelCache, u: &[f64], mode: Mode) -> Result<Vec<f64>> {
        self.run(cache, u, mode, false).map(|(e, _, _)| e)
    }

    /// Eval-mode mean-pooled block output, i.e. the decoder input.
    pub fn pooled(&self, cache: &KernelCache, u: &[f64]) -> Result<Vec<f64>> {
        self.run(cache, u, Mode::Eval, false).map(|(_, p, _)| p)
    }

    /// Forward pass that records what [`Backbone::backward`] needs.
    pub fn forward_recorded(&self, cache: &KernelCache, u: &[f64], mode: Mode) -> Result<(Vec<f64>, Tape)> {
        self.run(cache, u, mode, true)
            .map(|(e, _, t)| (e, t.expect("recording requested")))
    }

    #[allow(clippy::type_complexity)]
    fn run(&self, cache: &KernelCache, u: &[f64], mode: Mode, record: bool) -> Result<(Vec<f64>, Vec<f64>, Option<Tape>)> {
        let (h, len) = (self.config.d_model, self.config.window_len);
        if u.len() != len {
            return Err(Error::Shape(format!("window has {} samples, expected {len}", u.len())));
        }
        if u.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("input window".into()));
        }
        let mut x = self.encoder.apply_rows(u, len);
        let mut tapes = Vec::new();
        for (i, (blk, kern)) in self.blocks.iter().zip(&cache.blocks).enumerate() {
            let mask_seed = match mode {
                Mode::Train { seed } if self.config.dropout > 0.0 => Some(derive_seed(seed, &[i as u64])),
                _ => None,
            };
            let tape = block_forward(blk, kern, &cache.conv, &mut x, len, h, self.config.dropout, mask_seed);
            if record {
                tapes.push(tape);
            }
        }
        let mut pooled = vec![0.0; h];
        for row in x.chunks_exact(h) {
            pooled.iter_mut().zip(row).for_each(|(p, v)| *p += v);
        }
        pooled.iter_mut().for_each(|p| *p /= len as f64);
        let e = self.decoder.apply(&pooled);
        if e.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("embedding".into()));
        }
        let tape = record.then(|| Tape {
            u: u.to_vec(),
            blocks: tapes,
            pooled: pooled.clone(),
        });
        Ok((e, pooled, tape))
    }

    /// Reverse pass for one sample; accumulates into `acc`.
    pub fn backward(&self, cache: &KernelCache, tape: &Tape, g_embedding: &[f64], acc: &mut GradAccum) {
        let (h, len) = (self.config.d_model, self.config.window_len);
        let g_pooled = self
            .decoder
            .backward_rows(&tape.pooled, g_embedding, 1, &mut acc.grads.decoder);
        let inv_len = 1.0 / len as f64;
        let mut g: Vec<f64> = (0..len)
            .flat_map(|_| g_pooled.iter().map(|v| v * inv_len))
            .collect();
        for i in (0..self.blocks.len()).rev() {
            block_backward(
                &self.blocks[i],
                &cache.blocks[i],
                &cache.conv,
                &tape.blocks[i],
                &mut g,
                len,
                h,
                &mut acc.grads.blocks[i],
                &mut acc.dkf[i],
            );
        }
        self.encoder.backward_rows(&tape.u, &g, len, &mut acc.grads.encoder);
    }
}

#[allow(clippy::too_many_arguments)]
fn block_forward(
    blk: &Block,
    kern: &[ChannelKernel],
    conv: &FftConv,
    x: &mut [f64],
    len: usize,
    h: usize,
    dropout: f64,
    mask_seed: Option<u64>,
) -> BlockTape {
    let mut xhat = vec![0.0; len * h];
    let mut inv_std = vec![0.0; len];
    let mut z = vec![0.0; len * h];
    for l in 0..len {
        let row = &x[l * h..(l + 1) * h];
        let mean = row.iter().sum::<f64>() / h as f64;
        let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / h as f64;
        let is = 1.0 / (var + LAYER_NORM_EPS).sqrt();
        inv_std[l] = is;
        for c in 0..h {
            let xh = (row[c] - mean) * is;
            xhat[l * h + c] = xh;
            z[l * h + c] = xh * blk.norm_gamma[c] + blk.norm_beta[c];
        }
    }
    let mut s = vec![0.0; len * h];
    let mut zf = Vec::with_capacity(h);
    for (c, k) in kern.iter().enumerate() {
        let spec = conv.forward_strided(&z, c, h);
        let prod = spec.iter().zip(&k.kf).map(|(a, b)| a * b).collect();
        conv.inverse_strided(prod, &mut s, c, h);
        zf.push(spec);
    }
    let m = blk.mix.apply_rows(&s, len);
    let cdf: Vec<f64> = m.iter().map(|&v| normal_cdf(v)).collect();
    let mut act: Vec<f64> = m.iter().zip(&cdf).map(|(v, p)| v * p).collect();
    let mask = mask_seed.map(|seed| {
        let mut r = rng(seed);
        let keep = 1.0 / (1.0 - dropout);
        (0..len * h)
            .map(|_| if r.random::<f64>() < dropout { 0.0 } else { keep })
            .collect::<Vec<f64>>()
    });
    if let Some(mask) = &mask {
        act.iter_mut().zip(mask).for_each(|(a, k)| *a *= k);
    }
    let out = blk.proj.apply_rows(&act, len);
    x.iter_mut().zip(&out).for_each(|(a, b)| *a += b);
    BlockTape {
        xhat,
        inv_std,
        zf,
        s,
        m,
        cdf,
        mask,
    }
}

#[allow(clippy::too_many_arguments)]
fn block_backward(
    blk: &Block,
    kern: &[ChannelKernel],
    conv: &FftConv,
    tape: &BlockTape,
    g: &mut [f64],
    len: usize,
    h: usize,
    grad: &mut Block,
    dkf: &mut [Vec<Complex64>],
) {
    let mut act: Vec<f64> = tape.m.iter().zip(&tape.cdf).map(|(v, p)| v * p).collect();
    if let Some(mask) = &tape.mask {
        act.iter_mut().zip(mask).for_each(|(a, k)| *a *= k);
    }
    let mut g_m = blk.proj.backward_rows(&act, g, len, &mut grad.proj);
    for (i, gm) in g_m.iter_mut().enumerate() {
        let keep = tape.mask.as_ref().map_or(1.0, |m| m[i]);
        *gm *= keep * gelu_grad_from_cdf(tape.m[i], tape.cdf[i]);
    }
    let g_s = blk.mix.backward_rows(&tape.s, &g_m, len, &mut grad.mix);

    let mut g_z = vec![0.0; len * h];
    for (c, k) in kern.iter().enumerate() {
        let gf = conv.forward_strided(&g_s, c, h);
        for ((acc, z), gv) in dkf[c].iter_mut().zip(&tape.zf[c]).zip(&gf) {
            *acc += z.conj() * gv;
        }
        conv.inverse_strided(conv.correlate(&k.kf, &gf), &mut g_z, c, h);
    }

    let hf = h as f64;
    let mut g_xhat = vec![0.0; h];
    for l in 0..len {
        let xh = &tape.xhat[l * h..(l + 1) * h];
        let gz = &g_z[l * h..(l + 1) * h];
        for c in 0..h {
            grad.norm_gamma[c] += gz[c] * xh[c];
            grad.norm_beta[c] += gz[c];
            g_xhat[c] = gz[c] * blk.norm_gamma[c];
        }
        let sum_g: f64 = g_xhat.iter().sum();
        let sum_gx: f64 = g_xhat.iter().zip(xh).map(|(a, b)| a * b).sum();
        let is = tape.inv_std[l];
        let row = &mut g[l * h..(l + 1) * h];
        for c in 0..h {
            row[c] += is / hf * (hf * g_xhat[c] - sum_g - xh[c] * sum_gx);
        }
    }
}

impl GradAccum {
    pub fn new(model: &Backbone, cache: &KernelCache) -> Self {
        let bins = cache.conv.bins();
        GradAccum {
            grads: model.zeros_like(),
            dkf: model
                .blocks
                .iter()
                .map(|_| vec![vec![Complex64::new(0.0, 0.0); bins]; model.config.d_model])
                .collect(),
        }
    }

    pub fn merge(&mut self, other: &GradAccum) {
        self.grads.add_assign(&other.grads);
        for (a, b) in self.dkf.iter_mut().flatten().zip(other.dkf.iter().flatten()) {
            a.iter_mut().zip(b).for_each(|(x, y)| *x += y);
        }
    }

    /// Converts the accumulated kernel gradients into gradients of `A`, `B`,
    /// `C` and `log Δ`, and returns the full gradient.
    pub fn finish(self, cache: &KernelCache) -> Backbone {
        let GradAccum { mut grads, dkf } = self;
        let n = grads.config.d_state;
        let len = cache.conv.len;
        for ((blk, kern), spectra) in grads.blocks.iter_mut().zip(&cache.blocks).zip(dkf) {
            let per_channel: Vec<_> = kern
                .par_iter()
                .zip(spectra)
                .map(|(k, spec)| {
                    let g_k = cache.conv.inverse(spec);
                    let (_, states) = kernel_with_states(&k.disc, len);
                    let (ga_bar, gb_bar, gc) = kernel_backward(&k.disc, &states, &g_k);
                    let (ga, gb, gdt) = discretize_backward(&k.params, &k.cache, &ga_bar, &gb_bar);
                    (ga, gb, gc, gdt * k.params.dt)
                })
                .collect();
            for (ch, (ga, gb, gc, glog)) in per_channel.into_iter().enumerate() {
                let add = |dst: &mut [f64], src: &[f64]| dst.iter_mut().zip(src).for_each(|(d, s)| *d += s);
                add(&mut blk.a[ch * n * n..(ch + 1) * n * n], &ga);
                add(&mut blk.b[ch * n..(ch + 1) * n], &gb);
                add(&mut blk.c[ch * n..(ch + 1) * n], &gc);
                blk.log_dt[ch] += glog;
            }
        }
        grads
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny(blocks: usize, dropout: f64) -> Backbone {
        Backbone::new(
            NetworkConfig {
                d_model: 4,
                d_state: 4,
                n_blocks: blocks,
                dropout,
                embedding_dim: 5,
                window_len: 32,
            },
            11,
        )
        .unwrap()
    }

    fn window(seed: u64) -> Vec<f64> {
        let mut r = rng(seed);
        (0..32).map(|_| r.random_range(-1.5..1.5)).collect()
    }

    #[test]
    fn config_validation() {
        assert!(NetworkConfig::default().validate().is_ok());
        let bad = NetworkConfig {
            dropout: 1.0,
            ..NetworkConfig::default()
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn shapes_and_determinism() {
        let net = tiny(2, 0.2);
        let w = window(1);
        let e = net.forward_batch(&[w.clone(), w.clone(), window(2)], Mode::Eval).unwrap();
        assert_eq!(e.len(), 3);
        assert!(e.iter().all(|r| r.len() == 5));
        assert_eq!(e[0], e[1]);
        assert_eq!(e, net.forward_batch(&[w.clone(), w, window(2)], Mode::Eval).unwrap());
    }

    #[test]
    fn wrong_window_length_is_rejected() {
        let net = tiny(1, 0.0);
        assert!(matches!(
            net.forward_batch(&[vec![0.0; 31]], Mode::Eval),
            Err(Error::Shape(_))
        ));
        let mut w = window(3);
        w[4] = f64::NAN;
        assert!(matches!(net.forward_batch(&[w], Mode::Eval), Err(Error::NonFinite(_))));
    }

    #[test]
    fn zero_blocks_are_residual_identity() {
        let mut net = tiny(2, 0.0);
        for b in &mut net.blocks {
            b.proj = Linear::zeros(4, 4);
        }
        let cache = net.kernels().unwrap();
        let u = window(4);
        let mut x = net.encoder.apply_rows(&u, 32);
        let before = x.clone();
        for (blk, k) in net.blocks.iter().zip(&cache.blocks) {
            block_forward(blk, k, &cache.conv, &mut x, 32, 4, 0.0, None);
        }
        assert_eq!(x, before);
    }

    #[test]
    fn dropout_changes_train_but_not_eval_output() {
        let net = tiny(2, 0.5);
        let w = vec![window(5)];
        let a = net.forward_batch(&w, Mode::Train { seed: 1 }).unwrap();
        let b = net.forward_batch(&w, Mode::Train { seed: 2 }).unwrap();
        let c = net.forward_batch(&w, Mode::Train { seed: 1 }).unwrap();
        assert_ne!(a, b);
        assert_eq!(a, c);
    }

    #[test]
    fn parameter_names_are_unique() {
        let net = tiny(3, 0.0);
        let t = net.tensors();
        let names: std::collections::BTreeSet<_> = t.iter().map(|x| x.0.clone()).collect();
        assert_eq!(names.len(), t.len());
        assert_eq!(t.len(), net.clone().tensors_mut().len());
        for (_, shape, data) in &t {
            assert_eq!(shape.iter().product::<usize>(), data.len());
        }
    }

    #[test]
    fn parameter_count_formula() {
        let net = tiny(3, 0.0);
        let (h, n, e) = (4, 4, 5);
        let block = 2 * h + h * n * n + 2 * h * n + h + 2 * (h * h + h);
        assert_eq!(net.n_params(), 2 * h + 3 * block + h * e + e);
    }
}
