//! Convolutional actor-critic with factorized categorical action heads.
//!
//! Activations are stored channel-last (`[y][x][c]`) and convolution weights
//! as `[ky][kx][in][out]`, so every inner loop is a contiguous axpy over output
//! channels. The first layer sees binary rasters and is evaluated by scattering
//! the on pixels only. Gradients are hand-derived for this fixed topology.

use std::io::{Read, Write};

use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use thiserror::Error;

use crate::env::{Action, Observation, POS_BINS, ROT_BINS};
use crate::raster::RASTER_SIZE;
use crate::scalar::Scalar;

/// Input channels: silhouette and workspace.
pub const IN_CHANNELS: usize = 2;

/// One convolution: output channels, kernel size, stride. No padding.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvSpec {
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
}

/// Network topology. [`Architecture::standard`] is the one used for training.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Architecture {
    pub input: usize,
    pub convs: Vec<ConvSpec>,
    pub hidden: usize,
    pub heads: [usize; 3],
}

impl Architecture {
    pub fn standard() -> Self {
        let c = |out_channels, kernel| ConvSpec { out_channels, kernel, stride: 2 };
        Self { input: RASTER_SIZE, convs: vec![c(16, 5), c(32, 3), c(32, 3)], hidden: 512, heads: [POS_BINS, POS_BINS, ROT_BINS] }
    }

    /// Spatial side of each conv output.
    pub fn conv_sides(&self) -> Vec<usize> {
        let mut side = self.input;
        self.convs
            .iter()
            .map(|c| {
                side = (side - c.kernel) / c.stride + 1;
                side
            })
            .collect()
    }

    fn shapes(&self) -> Vec<ConvShape> {
        let sides = self.conv_sides();
        let mut in_c = IN_CHANNELS;
        let mut in_s = self.input;
        self.convs
            .iter()
            .zip(sides)
            .map(|(c, out_s)| {
                let s = ConvShape { in_c, out_c: c.out_channels, k: c.kernel, stride: c.stride, in_s, out_s };
                in_c = c.out_channels;
                in_s = out_s;
                s
            })
            .collect()
    }

    pub fn flat_features(&self) -> usize {
        let side = *self.conv_sides().last().expect("at least one conv");
        side * side * self.convs.last().expect("at least one conv").out_channels
    }

    pub fn head_outputs(&self) -> usize {
        self.heads.iter().sum::<usize>() + 1
    }

    /// Shapes of every parameter tensor in storage order.
    pub fn tensor_shapes(&self) -> Vec<Vec<usize>> {
        let mut out = Vec::new();
        for s in self.shapes() {
            out.push(vec![s.k, s.k, s.in_c, s.out_c]);
            out.push(vec![s.out_c]);
        }
        out.push(vec![self.flat_features(), self.hidden]);
        out.push(vec![self.hidden]);
        out.push(vec![self.hidden, self.head_outputs()]);
        out.push(vec![self.head_outputs()]);
        out
    }

    pub fn parameter_count(&self) -> usize {
        self.tensor_shapes().iter().map(|s| s.iter().product::<usize>()).sum()
    }

    fn validate(&self) -> bool {
        let mut side = self.input;
        for c in &self.convs {
            if c.kernel == 0 || c.stride == 0 || c.out_channels == 0 || side < c.kernel {
                return false;
            }
            side = (side - c.kernel) / c.stride + 1;
        }
        !self.convs.is_empty() && self.hidden > 0 && self.heads.iter().all(|&h| h > 0)
    }
}

#[derive(Clone, Copy, Debug)]
struct ConvShape {
    in_c: usize,
    out_c: usize,
    k: usize,
    stride: usize,
    in_s: usize,
    out_s: usize,
}

/// Binary two-channel input as sorted on-pixel lists (`row * side + col`).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Input {
    pub side: usize,
    pub on: [Vec<u32>; IN_CHANNELS],
}

impl Input {
    pub fn from_observation(obs: &Observation) -> Self {
        let side = obs.silhouette.width();
        Self { side, on: [obs.silhouette.on_pixels().indices().to_vec(), obs.workspace.on_pixels().indices().to_vec()] }
    }

    pub fn from_bits(side: usize, channels: [&[bool]; IN_CHANNELS]) -> Self {
        let on = channels.map(|c| {
            assert_eq!(c.len(), side * side, "channel size");
            c.iter().enumerate().filter(|(_, &b)| b).map(|(i, _)| i as u32).collect()
        });
        Self { side, on }
    }
}

/// A flat list of tensors laid out per [`Architecture::tensor_shapes`].
/// Also used as the gradient container.
#[derive(Clone, Debug, PartialEq)]
pub struct Params<T> {
    pub tensors: Vec<Vec<T>>,
}

impl<T: Scalar> Params<T> {
    pub fn zeros(arch: &Architecture) -> Self {
        Self { tensors: arch.tensor_shapes().iter().map(|s| vec![T::zero(); s.iter().product()]).collect() }
    }

    pub fn zeros_like(&self) -> Self {
        Self { tensors: self.tensors.iter().map(|t| vec![T::zero(); t.len()]).collect() }
    }

    pub fn len(&self) -> usize {
        self.tensors.iter().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn iter(&self) -> impl Iterator<Item = &T> {
        self.tensors.iter().flatten()
    }

    pub fn add_assign(&mut self, other: &Self) {
        for (a, b) in self.tensors.iter_mut().zip(&other.tensors) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += *y;
            }
        }
    }

    pub fn scale(&mut self, s: T) {
        self.tensors.iter_mut().flatten().for_each(|x| *x *= s);
    }

    pub fn norm(&self) -> T {
        self.iter().map(|&x| x * x).sum::<T>().sqrt()
    }

    pub fn cast<U: Scalar>(&self) -> Params<U> {
        Params { tensors: self.tensors.iter().map(|t| t.iter().map(|&x| U::of(x.to_f64().unwrap_or(0.0))).collect()).collect() }
    }
}

/// Categorical distribution stored as log-probabilities.
#[derive(Clone, Debug, PartialEq)]
pub struct Categorical<T> {
    logp: Vec<T>,
}

impl<T: Scalar> Categorical<T> {
    pub fn from_logits(logits: &[T]) -> Self {
        let max = logits.iter().copied().fold(T::neg_infinity(), T::max);
        let lse = max + logits.iter().map(|&z| (z - max).exp()).sum::<T>().ln();
        Self { logp: logits.iter().map(|&z| z - lse).collect() }
    }

    pub fn from_probs(probs: &[T]) -> Self {
        Self { logp: probs.iter().map(|p| p.ln()).collect() }
    }

    pub fn len(&self) -> usize {
        self.logp.len()
    }

    pub fn is_empty(&self) -> bool {
        self.logp.is_empty()
    }

    pub fn log_probs(&self) -> &[T] {
        &self.logp
    }

    pub fn probs(&self) -> Vec<T> {
        self.logp.iter().map(|l| l.exp()).collect()
    }

    pub fn log_prob(&self, k: usize) -> T {
        self.logp[k]
    }

    pub fn entropy(&self) -> T {
        -self.logp.iter().filter(|l| l.is_finite()).map(|&l| l.exp() * l).sum::<T>()
    }

    /// Lowest index among the most probable.
    pub fn argmax(&self) -> usize {
        let mut best = 0;
        for (i, &l) in self.logp.iter().enumerate() {
            if l > self.logp[best] {
                best = i;
            }
        }
        best
    }

    /// Inverse-CDF draw.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> usize {
        let u: f64 = rng.gen();
        let mut acc = 0.0;
        let mut last = 0;
        for (i, l) in self.logp.iter().enumerate() {
            let p = l.exp().to_f64().unwrap_or(0.0);
            if p > 0.0 {
                acc += p;
                last = i;
                if u < acc {
                    return i;
                }
            }
        }
        last
    }
}

/// Independent heads over `ix`, `iy` and `itheta`.
#[derive(Clone, Debug, PartialEq)]
pub struct ActionDistribution<T> {
    pub heads: [Categorical<T>; 3],
}

impl<T: Scalar> ActionDistribution<T> {
    pub fn log_prob(&self, a: Action) -> T {
        self.heads[0].log_prob(a.ix) + self.heads[1].log_prob(a.iy) + self.heads[2].log_prob(a.itheta)
    }

    pub fn entropy(&self) -> T {
        self.heads.iter().map(Categorical::entropy).sum()
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> (Action, T) {
        let a = Action { ix: self.heads[0].sample(rng), iy: self.heads[1].sample(rng), itheta: self.heads[2].sample(rng) };
        (a, self.log_prob(a))
    }

    pub fn mode(&self) -> Action {
        Action { ix: self.heads[0].argmax(), iy: self.heads[1].argmax(), itheta: self.heads[2].argmax() }
    }
}

/// Per-sample loss:
/// `-logp_weight * log π(a) + value_weight * (V - value_target)² / 2 - entropy_weight * H`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossTerms<T> {
    pub logp_weight: T,
    pub value_weight: T,
    pub value_target: T,
    pub entropy_weight: T,
}

impl<T: Scalar> LossTerms<T> {
    pub fn zero() -> Self {
        Self { logp_weight: T::zero(), value_weight: T::zero(), value_target: T::zero(), entropy_weight: T::zero() }
    }
}

pub struct Sample<'a, T> {
    pub input: &'a Input,
    pub action: Action,
    pub terms: LossTerms<T>,
}

struct Activations<T> {
    convs: Vec<Vec<T>>,
    hidden: Vec<T>,
    out: Vec<T>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PolicyNet<T> {
    arch: Architecture,
    params: Params<T>,
}

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("not a policy checkpoint")]
    BadMagic,
    #[error("unsupported checkpoint version {0}")]
    UnsupportedVersion(u32),
    #[error("checkpoint scalar type {found}, expected {expected}")]
    ScalarMismatch { expected: &'static str, found: String },
    #[error("checkpoint architecture does not match")]
    ArchitectureMismatch,
    #[error("checkpoint is truncated or corrupt")]
    Corrupt,
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

const MAGIC: &[u8; 8] = b"TGRMPOL\0";
const VERSION: u32 = 1;

fn orthogonal<R: Rng + ?Sized>(rows: usize, cols: usize, gain: f64, rng: &mut R) -> Vec<f64> {
    // Orthonormal rows if rows <= cols, otherwise orthonormal columns.
    let (n, m) = if rows <= cols { (rows, cols) } else { (cols, rows) };
    let mut q: Vec<Vec<f64>> = Vec::with_capacity(n);
    while q.len() < n {
        let mut v: Vec<f64> = (0..m).map(|_| rng.sample(StandardNormal)).collect();
        for u in &q {
            let d: f64 = v.iter().zip(u).map(|(a, b)| a * b).sum();
            v.iter_mut().zip(u).for_each(|(a, b)| *a -= d * b);
        }
        let norm = v.iter().map(|a| a * a).sum::<f64>().sqrt();
        if norm > 1e-8 {
            v.iter_mut().for_each(|a| *a /= norm);
            q.push(v);
        }
    }
    let mut out = vec![0.0; rows * cols];
    for r in 0..rows {
        for c in 0..cols {
            out[r * cols + c] = gain * if rows <= cols { q[r][c] } else { q[c][r] };
        }
    }
    out
}

impl<T: Scalar> PolicyNet<T> {
    /// Orthogonal hidden layers with gain √2, zero biases, zero output layer.
    pub fn new<R: Rng + ?Sized>(arch: Architecture, rng: &mut R) -> Self {
        assert!(arch.validate(), "invalid architecture {arch:?}");
        let mut params = Params::zeros(&arch);
        let shapes = arch.tensor_shapes();
        let hidden_layers = arch.convs.len() + 1;
        for l in 0..hidden_layers {
            let s = &shapes[2 * l];
            let fan_in: usize = s[..s.len() - 1].iter().product();
            let fan_out = s[s.len() - 1];
            // Weights are stored [fan_in][fan_out]; orthogonality is over fan_out rows.
            let w = orthogonal(fan_out, fan_in, std::f64::consts::SQRT_2, rng);
            let t = &mut params.tensors[2 * l];
            for o in 0..fan_out {
                for i in 0..fan_in {
                    t[i * fan_out + o] = T::of(w[o * fan_in + i]);
                }
            }
        }
        Self { arch, params }
    }

    pub fn from_params(arch: Architecture, params: Params<T>) -> Self {
        let shapes = arch.tensor_shapes();
        assert_eq!(params.tensors.len(), shapes.len());
        for (t, s) in params.tensors.iter().zip(&shapes) {
            assert_eq!(t.len(), s.iter().product::<usize>());
        }
        Self { arch, params }
    }

    pub fn architecture(&self) -> &Architecture {
        &self.arch
    }

    pub fn params(&self) -> &Params<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut Params<T> {
        &mut self.params
    }

    pub fn cast<U: Scalar>(&self) -> PolicyNet<U> {
        PolicyNet { arch: self.arch.clone(), params: self.params.cast() }
    }

    fn run(&self, input: &Input) -> Activations<T> {
        assert_eq!(input.side, self.arch.input, "input size");
        let shapes = self.arch.shapes();
        let p = &self.params.tensors;
        let mut convs: Vec<Vec<T>> = Vec::with_capacity(shapes.len());
        for (l, sh) in shapes.iter().enumerate() {
            let (w, b) = (&p[2 * l], &p[2 * l + 1]);
            let mut out = vec![T::zero(); sh.out_s * sh.out_s * sh.out_c];
            out.chunks_exact_mut(sh.out_c).for_each(|o| o.copy_from_slice(b));
            if l == 0 {
                conv_scatter(sh, w, input, &mut out);
            } else {
                conv_dense(sh, w, &convs[l - 1], &mut out);
            }
            out.iter_mut().for_each(|x| *x = x.max(T::zero()));
            convs.push(out);
        }
        let nl = shapes.len();
        let flat = convs.last().expect("convs");
        let mut hidden = p[2 * nl + 1].clone();
        dense_forward(flat, &p[2 * nl], &mut hidden);
        hidden.iter_mut().for_each(|x| *x = x.max(T::zero()));
        let mut out = p[2 * nl + 3].clone();
        dense_forward(&hidden, &p[2 * nl + 2], &mut out);
        Activations { convs, hidden, out }
    }

    fn split_heads(&self, out: &[T]) -> (ActionDistribution<T>, T) {
        let [nx, ny, nt] = self.arch.heads;
        let heads = [
            Categorical::from_logits(&out[..nx]),
            Categorical::from_logits(&out[nx..nx + ny]),
            Categorical::from_logits(&out[nx + ny..nx + ny + nt]),
        ];
        (ActionDistribution { heads }, out[nx + ny + nt])
    }

    pub fn forward(&self, input: &Input) -> (ActionDistribution<T>, T) {
        self.split_heads(&self.run(input).out)
    }

    pub fn forward_observation(&self, obs: &Observation) -> (ActionDistribution<T>, T) {
        self.forward(&Input::from_observation(obs))
    }

    /// Loss of one sample under [`LossTerms`].
    pub fn loss(&self, sample: &Sample<T>) -> T {
        let (dist, value) = self.forward(sample.input);
        sample_loss(&dist, value, sample.action, &sample.terms)
    }

    /// Adds this sample's gradient into `grads`; returns its loss.
    pub fn accumulate(&self, sample: &Sample<T>, grads: &mut Params<T>) -> T {
        self.accumulate_with(sample.input, sample.action, |_, _| sample.terms, grads)
    }

    /// Like [`PolicyNet::accumulate`], with loss terms chosen after seeing
    /// the forward pass.
    pub fn accumulate_with<F>(&self, input: &Input, action: Action, terms: F, grads: &mut Params<T>) -> T
    where
        F: FnOnce(&ActionDistribution<T>, T) -> LossTerms<T>,
    {
        let acts = self.run(input);
        let (dist, value) = self.split_heads(&acts.out);
        let t = &terms(&dist, value);
        let loss = sample_loss(&dist, value, action, t);
        if t.logp_weight == T::zero() && t.value_weight == T::zero() && t.entropy_weight == T::zero() {
            return loss;
        }
        let mut dout = Vec::with_capacity(acts.out.len());
        let chosen = [action.ix, action.iy, action.itheta];
        for (head, &a) in dist.heads.iter().zip(&chosen) {
            let h = head.entropy();
            for (j, &lp) in head.log_probs().iter().enumerate() {
                let p = lp.exp();
                let ind = if j == a { T::one() } else { T::zero() };
                let mut g = -t.logp_weight * (ind - p);
                if p > T::zero() {
                    g += t.entropy_weight * p * (lp + h);
                }
                dout.push(g);
            }
        }
        dout.push(t.value_weight * (value - t.value_target));
        self.backward(input, &acts, &dout, grads);
        loss
    }

    /// Summed gradient and loss over a batch. With `parallel` the reduction
    /// order depends on the thread pool.
    pub fn gradients(&self, batch: &[Sample<T>], parallel: bool) -> (Params<T>, T) {
        if parallel {
            batch
                .par_iter()
                .fold(
                    || (self.params.zeros_like(), T::zero()),
                    |(mut g, l), s| {
                        let ls = self.accumulate(s, &mut g);
                        (g, l + ls)
                    },
                )
                .reduce(
                    || (self.params.zeros_like(), T::zero()),
                    |(mut a, la), (b, lb)| {
                        a.add_assign(&b);
                        (a, la + lb)
                    },
                )
        } else {
            let mut g = self.params.zeros_like();
            let loss = batch.iter().map(|s| self.accumulate(s, &mut g)).sum();
            (g, loss)
        }
    }

    fn backward(&self, input: &Input, acts: &Activations<T>, dout: &[T], grads: &mut Params<T>) {
        let shapes = self.arch.shapes();
        let nl = shapes.len();
        let p = &self.params.tensors;
        let g = &mut grads.tensors;

        let mut g_hidden = vec![T::zero(); self.arch.hidden];
        dense_backward(&acts.hidden, &p[2 * nl + 2], dout, &mut g[2 * nl + 2], &mut g_hidden);
        add_into(&mut g[2 * nl + 3], dout);

        let flat = &acts.convs[nl - 1];
        let mut g_act = vec![T::zero(); flat.len()];
        dense_backward(flat, &p[2 * nl], &g_hidden, &mut g[2 * nl], &mut g_act);
        add_into(&mut g[2 * nl + 1], &g_hidden);

        for l in (0..nl).rev() {
            let sh = &shapes[l];
            // g_act is already zero wherever the ReLU output was zero.
            for o in g_act.chunks_exact(sh.out_c) {
                add_into(&mut g[2 * l + 1], o);
            }
            if l == 0 {
                conv_scatter_backward(sh, input, &g_act, &mut g[0]);
            } else {
                let mut g_in = vec![T::zero(); acts.convs[l - 1].len()];
                conv_dense_backward(sh, &p[2 * l], &acts.convs[l - 1], &g_act, &mut g[2 * l], &mut g_in);
                g_act = g_in;
            }
        }
    }

    pub fn save<W: Write>(&self, mut w: W) -> Result<(), CheckpointError> {
        let mut buf = Vec::new();
        buf.extend_from_slice(MAGIC);
        buf.extend_from_slice(&VERSION.to_le_bytes());
        buf.push(T::NAME.len() as u8);
        buf.extend_from_slice(T::NAME.as_bytes());
        for v in arch_words(&self.arch) {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        for t in &self.params.tensors {
            for &x in t {
                x.to_le(&mut buf);
            }
        }
        w.write_all(&buf)?;
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut v = Vec::new();
        self.save(&mut v).expect("writing to memory");
        v
    }

    /// Reads a checkpoint; fails if it was written with a different scalar
    /// type or, when `expected` is given, a different architecture.
    pub fn load<R: Read>(mut r: R, expected: Option<&Architecture>) -> Result<Self, CheckpointError> {
        let mut bytes = Vec::new();
        r.read_to_end(&mut bytes)?;
        let mut cur = Cursor { bytes: &bytes, pos: 0 };
        if cur.take(8)? != MAGIC {
            return Err(CheckpointError::BadMagic);
        }
        let version = cur.u32()?;
        if version != VERSION {
            return Err(CheckpointError::UnsupportedVersion(version));
        }
        let n = cur.take(1)?[0] as usize;
        let name = String::from_utf8_lossy(cur.take(n)?).into_owned();
        if name != T::NAME {
            return Err(CheckpointError::ScalarMismatch { expected: T::NAME, found: name });
        }
        let input = cur.u32()? as usize;
        let nconv = cur.u32()? as usize;
        if nconv == 0 || nconv > 16 {
            return Err(CheckpointError::Corrupt);
        }
        let mut convs = Vec::with_capacity(nconv);
        for _ in 0..nconv {
            convs.push(ConvSpec { out_channels: cur.u32()? as usize, kernel: cur.u32()? as usize, stride: cur.u32()? as usize });
        }
        let hidden = cur.u32()? as usize;
        let heads = [cur.u32()? as usize, cur.u32()? as usize, cur.u32()? as usize];
        let arch = Architecture { input, convs, hidden, heads };
        if !arch.validate() {
            return Err(CheckpointError::Corrupt);
        }
        if expected.is_some_and(|e| *e != arch) {
            return Err(CheckpointError::ArchitectureMismatch);
        }
        let mut params = Params::zeros(&arch);
        if bytes.len() - cur.pos != params.len() * T::BYTES {
            return Err(CheckpointError::Corrupt);
        }
        for t in &mut params.tensors {
            for x in t.iter_mut() {
                *x = T::from_le(cur.take(T::BYTES)?);
            }
        }
        Ok(Self { arch, params })
    }
}

fn arch_words(a: &Architecture) -> Vec<u32> {
    let mut v = vec![a.input as u32, a.convs.len() as u32];
    for c in &a.convs {
        v.extend([c.out_channels as u32, c.kernel as u32, c.stride as u32]);
    }
    v.push(a.hidden as u32);
    v.extend(a.heads.map(|h| h as u32));
    v
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CheckpointError> {
        let s = self.bytes.get(self.pos..self.pos + n).ok_or(CheckpointError::Corrupt)?;
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
}

fn sample_loss<T: Scalar>(dist: &ActionDistribution<T>, value: T, a: Action, t: &LossTerms<T>) -> T {
    let half = T::of(0.5);
    let mut loss = t.value_weight * half * (value - t.value_target).powi(2) - t.entropy_weight * dist.entropy();
    if t.logp_weight != T::zero() {
        loss -= t.logp_weight * dist.log_prob(a);
    }
    loss
}

#[inline]
fn add_into<T: Scalar>(dst: &mut [T], src: &[T]) {
    dst.iter_mut().zip(src).for_each(|(d, &s)| *d += s);
}

#[inline]
fn axpy<T: Scalar>(dst: &mut [T], a: T, x: &[T]) {
    dst.iter_mut().zip(x).for_each(|(d, &v)| *d += a * v);
}

/// Eight partial sums so the loop vectorizes.
#[inline]
fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    let (ca, cb) = (a.chunks_exact(8), b.chunks_exact(8));
    let tail: T = ca.remainder().iter().zip(cb.remainder()).map(|(&x, &y)| x * y).sum();
    let mut acc = [T::zero(); 8];
    for (x, y) in ca.zip(cb) {
        for k in 0..8 {
            acc[k] += x[k] * y[k];
        }
    }
    acc.into_iter().sum::<T>() + tail
}

/// `out += x · W` with `W` stored `[in][out]`; zero inputs are skipped.
fn dense_forward<T: Scalar>(x: &[T], w: &[T], out: &mut [T]) {
    let n = out.len();
    for (i, &a) in x.iter().enumerate() {
        if a != T::zero() {
            axpy(out, a, &w[i * n..(i + 1) * n]);
        }
    }
}

/// Weight gradient and input gradient of a dense layer whose input is a ReLU
/// output; input gradients are left zero where the input is zero.
fn dense_backward<T: Scalar>(x: &[T], w: &[T], g: &[T], gw: &mut [T], gx: &mut [T]) {
    let n = g.len();
    for (i, &a) in x.iter().enumerate() {
        if a > T::zero() {
            axpy(&mut gw[i * n..(i + 1) * n], a, g);
            gx[i] = dot(&w[i * n..(i + 1) * n], g);
        }
    }
}

fn conv_dense<T: Scalar>(sh: &ConvShape, w: &[T], input: &[T], out: &mut [T]) {
    let (ic_n, oc_n) = (sh.in_c, sh.out_c);
    for oy in 0..sh.out_s {
        for ox in 0..sh.out_s {
            let o = &mut out[(oy * sh.out_s + ox) * oc_n..][..oc_n];
            for ky in 0..sh.k {
                let iy = oy * sh.stride + ky;
                for kx in 0..sh.k {
                    let ix = ox * sh.stride + kx;
                    let inp = &input[(iy * sh.in_s + ix) * ic_n..][..ic_n];
                    let wk = &w[(ky * sh.k + kx) * ic_n * oc_n..][..ic_n * oc_n];
                    for (ic, &a) in inp.iter().enumerate() {
                        if a != T::zero() {
                            axpy(o, a, &wk[ic * oc_n..(ic + 1) * oc_n]);
                        }
                    }
                }
            }
        }
    }
}

fn conv_dense_backward<T: Scalar>(sh: &ConvShape, w: &[T], input: &[T], gout: &[T], gw: &mut [T], gin: &mut [T]) {
    let (ic_n, oc_n) = (sh.in_c, sh.out_c);
    for oy in 0..sh.out_s {
        for ox in 0..sh.out_s {
            let g = &gout[(oy * sh.out_s + ox) * oc_n..][..oc_n];
            if g.iter().all(|&v| v == T::zero()) {
                continue;
            }
            for ky in 0..sh.k {
                let iy = oy * sh.stride + ky;
                for kx in 0..sh.k {
                    let ix = ox * sh.stride + kx;
                    let base = (iy * sh.in_s + ix) * ic_n;
                    let koff = (ky * sh.k + kx) * ic_n * oc_n;
                    for ic in 0..ic_n {
                        let a = input[base + ic];
                        if a > T::zero() {
                            let r = koff + ic * oc_n..koff + (ic + 1) * oc_n;
                            axpy(&mut gw[r.clone()], a, g);
                            gin[base + ic] += dot(&w[r], g);
                        }
                    }
                }
            }
        }
    }
}

/// Calls `f(output_cell, kernel_offset)` for every output cell whose window
/// contains input pixel `(iy, ix)`.
#[inline]
fn receptive<F: FnMut(usize, usize)>(sh: &ConvShape, iy: usize, ix: usize, mut f: F) {
    for ky in 0..sh.k.min(iy + 1) {
        let dy = iy - ky;
        if dy % sh.stride != 0 || dy / sh.stride >= sh.out_s {
            continue;
        }
        let oy = dy / sh.stride;
        for kx in 0..sh.k.min(ix + 1) {
            let dx = ix - kx;
            if dx % sh.stride != 0 || dx / sh.stride >= sh.out_s {
                continue;
            }
            f(oy * sh.out_s + dx / sh.stride, ky * sh.k + kx);
        }
    }
}

fn conv_scatter<T: Scalar>(sh: &ConvShape, w: &[T], input: &Input, out: &mut [T]) {
    let oc_n = sh.out_c;
    for (ic, list) in input.on.iter().enumerate() {
        for &idx in list {
            let (iy, ix) = (idx as usize / sh.in_s, idx as usize % sh.in_s);
            receptive(sh, iy, ix, |cell, k| {
                let wr = &w[(k * sh.in_c + ic) * oc_n..][..oc_n];
                add_into(&mut out[cell * oc_n..(cell + 1) * oc_n], wr);
            });
        }
    }
}

fn conv_scatter_backward<T: Scalar>(sh: &ConvShape, input: &Input, gout: &[T], gw: &mut [T]) {
    let oc_n = sh.out_c;
    for (ic, list) in input.on.iter().enumerate() {
        for &idx in list {
            let (iy, ix) = (idx as usize / sh.in_s, idx as usize % sh.in_s);
            receptive(sh, iy, ix, |cell, k| {
                let g = &gout[cell * oc_n..(cell + 1) * oc_n];
                add_into(&mut gw[(k * sh.in_c + ic) * oc_n..][..oc_n], g);
            });
        }
    }
}

/// Adam with bias correction.
#[derive(Clone, Debug)]
pub struct Adam<T> {
    pub lr: T,
    pub beta1: T,
    pub beta2: T,
    pub eps: T,
    t: i32,
    m: Params<T>,
    v: Params<T>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(params: &Params<T>, lr: T) -> Self {
        Self { lr, beta1: T::of(0.9), beta2: T::of(0.999), eps: T::of(1e-8), t: 0, m: params.zeros_like(), v: params.zeros_like() }
    }

    pub fn steps(&self) -> i32 {
        self.t
    }

    pub fn step(&mut self, params: &mut Params<T>, grads: &Params<T>) {
        self.t += 1;
        let (b1, b2) = (self.beta1, self.beta2);
        let c1 = T::one() - b1.powi(self.t);
        let c2 = T::one() - b2.powi(self.t);
        let step = self.lr * c2.sqrt() / c1;
        let eps = self.eps * c2.sqrt();
        for (((p, g), m), v) in params.tensors.iter_mut().zip(&grads.tensors).zip(&mut self.m.tensors).zip(&mut self.v.tensors) {
            for (((p, &g), m), v) in p.iter_mut().zip(g).zip(m.iter_mut()).zip(v.iter_mut()) {
                *m = b1 * *m + (T::one() - b1) * g;
                *v = b2 * *v + (T::one() - b2) * g * g;
                *p -= step * *m / (v.sqrt() + eps);
            }
        }
    }
}
