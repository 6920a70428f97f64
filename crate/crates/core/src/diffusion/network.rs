//! Permutation-invariant conditional noise predictor with hand-derived
//! gradients.
//!
//! Condition path: shared per-point layers over the ALS points, a max-pool over
//! points and a linear head give the condition vector `c`.
//! Denoiser path: shared per-point layers over `x_t` are max-pooled into a
//! global feature `g`; every point then sees `[x ⊕ g ⊕ temb(t)]` through a
//! stack of blocks whose pre-activations are modulated feature-wise by
//! `(1 + γ(c))` and `β(c)`. A final linear layer maps to the 3D noise estimate.
//!
//! Everything is generic over the float type so the same code runs in 32-bit
//! for training and in 64-bit for gradient checks.

use std::ops::AddAssign;

use ndarray::{concatenate, s, Array2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub trait Real:
    num_traits::Float
    + num_traits::FromPrimitive
    + ndarray::LinalgScalar
    + ndarray::ScalarOperand
    + std::ops::AddAssign
    + std::fmt::Debug
    + Send
    + Sync
    + 'static
{
    fn sigmoid(self) -> Self;
}

impl Real for f32 {
    #[inline]
    fn sigmoid(self) -> f32 {
        1.0 / (1.0 + exp_f32(-self))
    }
}

impl Real for f64 {
    #[inline]
    fn sigmoid(self) -> f64 {
        1.0 / (1.0 + (-self).exp())
    }
}

/// Branch-free `exp` for f32 that the compiler can vectorize: `2^n · 2^f`
/// with a degree-6 polynomial for `2^f` on [-0.5, 0.5]. Relative error is
/// below 1e-6 for |x| <= 10 and grows with |x| through the rounding of `x·log2 e`.
#[inline]
pub fn exp_f32(x: f32) -> f32 {
    const ROUND: f32 = 12_582_912.0; // 1.5 * 2^23
    let y = x.clamp(-87.0, 88.0) * std::f32::consts::LOG2_E;
    // Adding 1.5 * 2^23 rounds y to an integer held in the low mantissa bits.
    let r = y + ROUND;
    let n = r - ROUND;
    let f = y - n;
    let p = 1.0
        + f * (0.693_147_2
            + f * (0.240_226_5 + f * (0.055_504_11 + f * (0.009_618_129 + f * (0.001_333_356 + f * 0.000_154_035_3)))));
    let ni = r.to_bits().wrapping_sub(ROUND.to_bits());
    p * f32::from_bits(ni.wrapping_add(127) << 23)
}

#[inline]
fn cst<F: Real>(v: f64) -> F {
    F::from_f64(v).expect("representable constant")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArchConfig {
    /// Widths of the shared per-point layers of the condition encoder.
    pub cond_widths: Vec<usize>,
    pub cond_dim: usize,
    /// Widths of the per-point layers over `x_t` feeding the global pool.
    pub local_widths: Vec<usize>,
    pub time_dim: usize,
    pub block_width: usize,
    pub n_blocks: usize,
}

impl Default for ArchConfig {
    fn default() -> Self {
        Self {
            cond_widths: vec![128, 256],
            cond_dim: 128,
            local_widths: vec![128, 256],
            time_dim: 64,
            block_width: 256,
            n_blocks: 4,
        }
    }
}

impl ArchConfig {
    /// Smaller network sized for single-core CPU training runs.
    pub fn desk() -> Self {
        Self {
            cond_widths: vec![32, 64],
            cond_dim: 32,
            local_widths: vec![32, 64],
            time_dim: 32,
            block_width: 64,
            n_blocks: 4,
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        let widths = self.cond_widths.iter().chain(&self.local_widths);
        if self.cond_widths.is_empty() || self.local_widths.is_empty() {
            return Err("encoder needs at least one layer".into());
        }
        if widths.chain([&self.cond_dim, &self.block_width, &self.n_blocks]).any(|&w| w == 0) {
            return Err("all widths must be positive".into());
        }
        if self.time_dim % 2 != 0 || self.time_dim == 0 {
            return Err("time_dim must be a positive even number".into());
        }
        Ok(())
    }
}

/// Dense layer `y = x W + b`, with `W: in x out` and `b: 1 x out`.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear<F> {
    pub w: Array2<F>,
    pub b: Array2<F>,
}

impl<F: Real> Linear<F> {
    fn init(rng: &mut ChaCha8Rng, fan_in: usize, fan_out: usize, gain: f64) -> Self {
        let bound = gain / (fan_in as f64).sqrt();
        let w = Array2::from_shape_fn((fan_in, fan_out), |_| cst(rng.random_range(-bound..bound)));
        let b = Array2::from_shape_fn((1, fan_out), |_| cst(rng.random_range(-bound..bound) * 0.1));
        Self { w, b }
    }

    fn zeros_like(&self) -> Self {
        Self { w: Array2::zeros(self.w.raw_dim()), b: Array2::zeros(self.b.raw_dim()) }
    }

    #[inline]
    fn forward(&self, x: &Array2<F>) -> Array2<F> {
        x.dot(&self.w) + &self.b
    }

    fn cast<G: Real>(&self) -> Linear<G> {
        Linear { w: self.w.mapv(|v| cst(v.to_f64().unwrap())), b: self.b.mapv(|v| cst(v.to_f64().unwrap())) }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FilmBlock<F> {
    pub lin: Linear<F>,
    pub scale: Linear<F>,
    pub shift: Linear<F>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DenoiserWeights<F = f32> {
    pub arch: ArchConfig,
    pub cond: Vec<Linear<F>>,
    pub cond_head: Linear<F>,
    pub local: Vec<Linear<F>>,
    pub blocks: Vec<FilmBlock<F>>,
    pub out: Linear<F>,
}

/// Derivative of `v·σ(v)` given `v` and `s = σ(v)`.
#[inline]
fn silu_grad<F: Real>(v: F, s: F) -> F {
    s * (F::one() + v * (F::one() - s))
}

fn flat<F: Real>(a: &Array2<F>) -> &[F] {
    a.as_slice().expect("standard layout")
}

fn flat_mut<F: Real>(a: &mut Array2<F>) -> &mut [F] {
    a.as_slice_mut().expect("standard layout")
}

/// `(silu(p), σ(p))` elementwise.
fn silu_forward<F: Real>(p: &Array2<F>) -> (Array2<F>, Array2<F>) {
    let mut sig = Array2::zeros(p.raw_dim());
    let mut a = Array2::zeros(p.raw_dim());
    for ((a, s), &p) in flat_mut(&mut a).iter_mut().zip(flat_mut(&mut sig).iter_mut()).zip(flat(p)) {
        *s = p.sigmoid();
        *a = p * *s;
    }
    (a, sig)
}

/// `d ← d · silu'(pre)` given the cached sigmoid.
fn silu_backward<F: Real>(d: &mut Array2<F>, pre: &Array2<F>, sig: &Array2<F>) {
    for ((g, &p), &s) in flat_mut(d).iter_mut().zip(flat(pre)).zip(flat(sig)) {
        *g = *g * silu_grad(p, s);
    }
}

/// Sinusoidal embedding of the diffusion step.
pub fn time_embedding<F: Real>(t: usize, dim: usize) -> Array2<F> {
    let half = dim / 2;
    let mut e = Array2::zeros((1, dim));
    for i in 0..half {
        let freq = (-(10_000f64).ln() * i as f64 / half as f64).exp();
        let arg = t as f64 * freq;
        e[[0, i]] = cst(arg.sin());
        e[[0, half + i]] = cst(arg.cos());
    }
    e
}

struct MlpCache<F> {
    inputs: Vec<Array2<F>>,
    pre: Vec<Array2<F>>,
    sig: Vec<Array2<F>>,
    output: Array2<F>,
}

fn mlp_forward<F: Real>(layers: &[Linear<F>], x: &Array2<F>) -> MlpCache<F> {
    let mut inputs = Vec::with_capacity(layers.len());
    let mut pre = Vec::with_capacity(layers.len());
    let mut sig = Vec::with_capacity(layers.len());
    let mut h = x.clone();
    for l in layers {
        let p = l.forward(&h);
        let (a, sg) = silu_forward(&p);
        inputs.push(h);
        pre.push(p);
        sig.push(sg);
        h = a;
    }
    MlpCache { inputs, pre, sig, output: h }
}

/// Accumulates layer gradients; returns the gradient w.r.t. the MLP input
/// only when `need_input` is set.
fn mlp_backward<F: Real>(
    layers: &[Linear<F>],
    cache: &MlpCache<F>,
    d_out: Array2<F>,
    grads: &mut [Linear<F>],
    need_input: bool,
) -> Option<Array2<F>> {
    let mut d = d_out;
    for k in (0..layers.len()).rev() {
        let mut dp = d;
        silu_backward(&mut dp, &cache.pre[k], &cache.sig[k]);
        grads[k].w += &cache.inputs[k].t().dot(&dp);
        grads[k].b += &dp.sum_axis(Axis(0)).insert_axis(Axis(0));
        if k == 0 && !need_input {
            return None;
        }
        d = dp.dot(&layers[k].w.t());
    }
    Some(d)
}

/// Column-wise max over rows, with the winning row per column.
fn max_pool<F: Real>(a: &Array2<F>) -> (Array2<F>, Vec<usize>) {
    let cols = a.ncols();
    let mut best = Array2::from_elem((1, cols), F::neg_infinity());
    let mut arg = vec![0usize; cols];
    for (i, row) in a.outer_iter().enumerate() {
        for (j, &v) in row.iter().enumerate() {
            if v > best[[0, j]] {
                best[[0, j]] = v;
                arg[j] = i;
            }
        }
    }
    (best, arg)
}

fn unpool<F: Real>(d_pool: &Array2<F>, arg: &[usize], rows: usize) -> Array2<F> {
    let mut d = Array2::zeros((rows, arg.len()));
    for (j, &i) in arg.iter().enumerate() {
        d[[i, j]] = d_pool[[0, j]];
    }
    d
}

/// Encoded condition plus what backprop needs from the encoder.
pub struct ConditionCache<F> {
    mlp: Option<MlpCache<F>>,
    argmax: Vec<usize>,
    pooled: Array2<F>,
    pub c: Array2<F>,
}

struct BlockCache<F> {
    z_in: Array2<F>,
    u: Array2<F>,
    gamma1: Array2<F>,
    v: Array2<F>,
    sig: Array2<F>,
}

struct DenoiseCache<F> {
    local: MlpCache<F>,
    local_arg: Vec<usize>,
    shared: Array2<F>,
    blocks: Vec<BlockCache<F>>,
    z_last: Array2<F>,
}

/// One training example: noised cloud, its step, the noise that produced it
/// and an optional condition cloud (all in model coordinates).
#[derive(Debug, Clone)]
pub struct Example<F> {
    pub x_t: Array2<F>,
    pub t: usize,
    pub noise: Array2<F>,
    pub cond: Option<Array2<F>>,
}

impl<F: Real> DenoiserWeights<F> {
    pub fn init(arch: &ArchConfig, seed: u64) -> Self {
        arch.validate().expect("valid architecture");
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let chain = |rng: &mut ChaCha8Rng, widths: &[usize]| -> Vec<Linear<F>> {
            let mut fan_in = 3;
            widths
                .iter()
                .map(|&w| {
                    let l = Linear::init(rng, fan_in, w, 3f64.sqrt());
                    fan_in = w;
                    l
                })
                .collect()
        };
        let cond = chain(&mut rng, &arch.cond_widths);
        let cond_head = Linear::init(&mut rng, *arch.cond_widths.last().unwrap(), arch.cond_dim, 1.0);
        let local = chain(&mut rng, &arch.local_widths);
        let z0 = 3 + arch.local_widths.last().unwrap() + arch.time_dim;
        let blocks = (0..arch.n_blocks)
            .map(|k| FilmBlock {
                lin: Linear::init(&mut rng, if k == 0 { z0 } else { arch.block_width }, arch.block_width, 3f64.sqrt()),
                scale: Linear::init(&mut rng, arch.cond_dim, arch.block_width, 0.1),
                shift: Linear::init(&mut rng, arch.cond_dim, arch.block_width, 0.1),
            })
            .collect();
        let out = Linear::init(&mut rng, arch.block_width, 3, 0.5);
        Self { arch: arch.clone(), cond, cond_head, local, blocks, out }
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            arch: self.arch.clone(),
            cond: self.cond.iter().map(Linear::zeros_like).collect(),
            cond_head: self.cond_head.zeros_like(),
            local: self.local.iter().map(Linear::zeros_like).collect(),
            blocks: self
                .blocks
                .iter()
                .map(|b| FilmBlock { lin: b.lin.zeros_like(), scale: b.scale.zeros_like(), shift: b.shift.zeros_like() })
                .collect(),
            out: self.out.zeros_like(),
        }
    }

    pub fn cast<G: Real>(&self) -> DenoiserWeights<G> {
        DenoiserWeights {
            arch: self.arch.clone(),
            cond: self.cond.iter().map(Linear::cast).collect(),
            cond_head: self.cond_head.cast(),
            local: self.local.iter().map(Linear::cast).collect(),
            blocks: self
                .blocks
                .iter()
                .map(|b| FilmBlock { lin: b.lin.cast(), scale: b.scale.cast(), shift: b.shift.cast() })
                .collect(),
            out: self.out.cast(),
        }
    }

    /// Parameter tensors in declared (checkpoint) order.
    pub fn tensors(&self) -> Vec<&Array2<F>> {
        let mut v = Vec::new();
        for l in self.cond.iter().chain([&self.cond_head]).chain(&self.local) {
            v.push(&l.w);
            v.push(&l.b);
        }
        for b in &self.blocks {
            for l in [&b.lin, &b.scale, &b.shift] {
                v.push(&l.w);
                v.push(&l.b);
            }
        }
        v.push(&self.out.w);
        v.push(&self.out.b);
        v
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Array2<F>> {
        let mut v = Vec::new();
        for l in self.cond.iter_mut().chain([&mut self.cond_head]).chain(self.local.iter_mut()) {
            v.push(&mut l.w);
            v.push(&mut l.b);
        }
        for b in self.blocks.iter_mut() {
            for l in [&mut b.lin, &mut b.scale, &mut b.shift] {
                v.push(&mut l.w);
                v.push(&mut l.b);
            }
        }
        v.push(&mut self.out.w);
        v.push(&mut self.out.b);
        v
    }

    pub fn tensor_names(&self) -> Vec<String> {
        let mut v = Vec::new();
        let lin = |v: &mut Vec<String>, n: String| {
            v.push(format!("{n}.w"));
            v.push(format!("{n}.b"));
        };
        for i in 0..self.cond.len() {
            lin(&mut v, format!("cond.{i}"));
        }
        lin(&mut v, "cond_head".into());
        for i in 0..self.local.len() {
            lin(&mut v, format!("local.{i}"));
        }
        for i in 0..self.blocks.len() {
            for part in ["lin", "scale", "shift"] {
                lin(&mut v, format!("block.{i}.{part}"));
            }
        }
        lin(&mut v, "out".into());
        v
    }

    pub fn param_count(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.iter().all(|v| v.is_finite()))
    }

    /// Encodes the condition cloud; `None` yields the zero condition vector.
    pub fn encode_condition(&self, cond: Option<&Array2<F>>) -> ConditionCache<F> {
        match cond {
            None => ConditionCache {
                mlp: None,
                argmax: Vec::new(),
                pooled: Array2::zeros((1, *self.arch.cond_widths.last().unwrap())),
                c: Array2::zeros((1, self.arch.cond_dim)),
            },
            Some(y) => {
                let mlp = mlp_forward(&self.cond, y);
                let (pooled, argmax) = max_pool(&mlp.output);
                let c = self.cond_head.forward(&pooled);
                ConditionCache { mlp: Some(mlp), argmax, pooled, c }
            }
        }
    }

    fn forward_cached(&self, x_t: &Array2<F>, t: usize, c: &Array2<F>) -> (Array2<F>, DenoiseCache<F>) {
        let local = mlp_forward(&self.local, x_t);
        let (g, local_arg) = max_pool(&local.output);
        let temb = time_embedding::<F>(t, self.arch.time_dim);
        // The pooled feature and time embedding are shared by all rows, so the
        // first block applies their slice of the weight once per cloud.
        let shared = concatenate(Axis(1), &[g.view(), temb.view()]).expect("row vectors");
        let mut z = x_t.clone();
        let mut blocks = Vec::with_capacity(self.blocks.len());
        for (k, b) in self.blocks.iter().enumerate() {
            let u = if k == 0 {
                let w_x = b.lin.w.slice(s![0..3, ..]);
                let w_s = b.lin.w.slice(s![3.., ..]);
                z.dot(&w_x) + &(shared.dot(&w_s) + &b.lin.b)
            } else {
                b.lin.forward(&z)
            };
            let gamma1 = b.scale.forward(c).mapv(|v| v + F::one());
            let beta = b.shift.forward(c);
            let mut v = Array2::zeros(u.raw_dim());
            let (g1, bt) = (flat(&gamma1), flat(&beta));
            for (vr, ur) in flat_mut(&mut v).chunks_exact_mut(g1.len()).zip(flat(&u).chunks_exact(g1.len())) {
                for j in 0..g1.len() {
                    vr[j] = ur[j] * g1[j] + bt[j];
                }
            }
            let (mut a, sig) = silu_forward(&v);
            if k > 0 {
                for (a, &z) in flat_mut(&mut a).iter_mut().zip(flat(&z)) {
                    *a += z;
                }
            }
            blocks.push(BlockCache { z_in: std::mem::replace(&mut z, a), u, gamma1, v, sig });
        }
        let out = self.out.forward(&z);
        (out, DenoiseCache { local, local_arg, shared, blocks, z_last: z })
    }

    /// Noise estimate for `x_t` under an already encoded condition vector.
    pub fn predict(&self, x_t: &Array2<F>, t: usize, cond: &ConditionCache<F>) -> Array2<F> {
        self.forward_cached(x_t, t, &cond.c).0
    }

    pub fn denoise_predict(&self, x_t: &Array2<F>, t: usize, cond: Option<&Array2<F>>) -> Array2<F> {
        let c = self.encode_condition(cond);
        self.predict(x_t, t, &c)
    }

    /// Mean squared noise-prediction error over all examples and coordinates.
    pub fn loss(&self, batch: &[Example<F>]) -> F {
        let mut total = F::zero();
        let mut count = 0usize;
        for ex in batch {
            let pred = self.denoise_predict(&ex.x_t, ex.t, ex.cond.as_ref());
            total += (&pred - &ex.noise).mapv(|d| d * d).sum();
            count += pred.len();
        }
        total / cst(count as f64)
    }

    /// Loss and its gradient, accumulated into `grads` (which is zeroed first).
    pub fn loss_and_grad(&self, batch: &[Example<F>], grads: &mut DenoiserWeights<F>) -> F {
        for t in grads.tensors_mut() {
            t.fill(F::zero());
        }
        let count: usize = batch.iter().map(|e| e.x_t.len()).sum();
        let norm: F = cst(count as f64);
        let mut total = F::zero();
        for ex in batch {
            let cc = self.encode_condition(ex.cond.as_ref());
            let (pred, cache) = self.forward_cached(&ex.x_t, ex.t, &cc.c);
            let diff = &pred - &ex.noise;
            total += diff.mapv(|d| d * d).sum();
            let d_out = diff.mapv(|d| d * cst(2.0) / norm);
            self.backward(&cc, &cache, d_out, grads, ex.cond.is_some());
        }
        total / norm
    }

    fn backward(
        &self,
        cc: &ConditionCache<F>,
        cache: &DenoiseCache<F>,
        d_out: Array2<F>,
        grads: &mut DenoiserWeights<F>,
        conditioned: bool,
    ) {
        grads.out.w += &cache.z_last.t().dot(&d_out);
        grads.out.b += &d_out.sum_axis(Axis(0)).insert_axis(Axis(0));
        let mut dz = d_out.dot(&self.out.w.t());
        let mut dc: Array2<F> = Array2::zeros(cc.c.raw_dim());
        for k in (0..self.blocks.len()).rev() {
            let b = &self.blocks[k];
            let bc = &cache.blocks[k];
            let width = bc.gamma1.ncols();
            let g1 = flat(&bc.gamma1);
            let mut du = Array2::zeros(bc.u.raw_dim());
            let mut dgamma = Array2::zeros((1, width));
            let mut dbeta = Array2::zeros((1, width));
            {
                let (dg, db) = (flat_mut(&mut dgamma), flat_mut(&mut dbeta));
                let rows = flat_mut(&mut du)
                    .chunks_exact_mut(width)
                    .zip(flat(&dz).chunks_exact(width))
                    .zip(flat(&bc.v).chunks_exact(width).zip(flat(&bc.sig).chunks_exact(width)))
                    .zip(flat(&bc.u).chunks_exact(width));
                for (((dur, dzr), (vr, sr)), ur) in rows {
                    for j in 0..width {
                        let dv = dzr[j] * silu_grad(vr[j], sr[j]);
                        dur[j] = dv * g1[j];
                        dg[j] += dv * ur[j];
                        db[j] += dv;
                    }
                }
            }
            let gb = &mut grads.blocks[k];
            let du_sum = &dbeta * &bc.gamma1;
            gb.scale.w += &cc.c.t().dot(&dgamma);
            gb.scale.b += &dgamma;
            gb.shift.w += &cc.c.t().dot(&dbeta);
            gb.shift.b += &dbeta;
            dc += &dgamma.dot(&b.scale.w.t());
            dc += &dbeta.dot(&b.shift.w.t());
            if k > 0 {
                gb.lin.w += &bc.z_in.t().dot(&du);
                gb.lin.b += &du_sum;
                dz = du.dot(&b.lin.w.t()) + &dz;
            } else {
                gb.lin.w.slice_mut(s![0..3, ..]).add_assign(&bc.z_in.t().dot(&du));
                gb.lin.w.slice_mut(s![3.., ..]).add_assign(&cache.shared.t().dot(&du_sum));
                gb.lin.b += &du_sum;
                dz = du_sum;
            }
        }

        // After block 0, dz holds the summed gradient of the shared row; only
        // its pooled-feature part carries parameters.
        let lg = *self.arch.local_widths.last().unwrap();
        let dg = dz.dot(&self.blocks[0].lin.w.slice(s![3..3 + lg, ..]).t());
        let d_local = unpool(&dg, &cache.local_arg, cache.local.output.nrows());
        mlp_backward(&self.local, &cache.local, d_local, &mut grads.local, false);

        if conditioned {
            let mlp = cc.mlp.as_ref().expect("conditioned forward");
            grads.cond_head.w += &cc.pooled.t().dot(&dc);
            grads.cond_head.b += &dc;
            let dpool = dc.dot(&self.cond_head.w.t());
            let d_enc = unpool(&dpool, &cc.argmax, mlp.output.nrows());
            mlp_backward(&self.cond, mlp, d_enc, &mut grads.cond, false);
        }
    }
}
