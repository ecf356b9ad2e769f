//! Desk-scale federated learning substrate.
//!
//! Gaussian-blob classification data, a one-hidden-layer tanh MLP with
//! hand-written backpropagation, and an AdamW local trainer.
//!
//! Parameters are flattened in the order `W1 (h x m, row-major) | b1 (h) |
//! W2 (G x h, row-major) | b2 (G)`, so `d = (m + 1) h + (h + 1) G`.

use std::io::{self, Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::RngCore;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::par;
use crate::seed;

#[derive(Debug, Error)]
pub enum FlError {
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("non-finite loss at step {step} (parameter max |x| = {param_max:.3e})")]
    NonFinite { step: u64, param_max: f64 },
    #[error("training diverged: loss {loss:.3e} at step {step}")]
    Diverged { step: u64, loss: f64 },
    #[error("dataset file: {0}")]
    DatasetFile(String),
    #[error(transparent)]
    Io(#[from] io::Error),
}

/// Loss above which local training aborts.
pub const DIVERGENCE_LOSS: f64 = 1e3;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DatasetConfig {
    pub seed: u64,
    /// Federated training samples, split evenly across `k` shards.
    pub n: usize,
    pub m: usize,
    pub classes: usize,
    pub k: usize,
    pub sigma: f64,
    pub n_test: usize,
    /// Auxiliary samples reserved for post-training attackers.
    pub n_aux: usize,
    /// Fraction of each shard held out for validation (0 disables).
    pub val_fraction: f64,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            n: 20_480,
            m: 32,
            classes: 10,
            k: 32,
            sigma: 1.5,
            n_test: 4096,
            n_aux: 4096,
            val_fraction: 0.0,
        }
    }
}

/// Row-major feature matrix with labels.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Samples {
    pub m: usize,
    pub x: Vec<f64>,
    pub y: Vec<usize>,
}

impl Samples {
    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        &self.x[i * self.m..(i + 1) * self.m]
    }

    pub fn subset(&self, idx: &[usize]) -> Samples {
        let mut out = Samples {
            m: self.m,
            x: Vec::with_capacity(idx.len() * self.m),
            y: Vec::with_capacity(idx.len()),
        };
        for &i in idx {
            out.x.extend_from_slice(self.row(i));
            out.y.push(self.y[i]);
        }
        out
    }

    pub fn concat(parts: &[&Samples]) -> Samples {
        let m = parts.first().map_or(0, |p| p.m);
        let mut out = Samples {
            m,
            ..Default::default()
        };
        for p in parts {
            out.x.extend_from_slice(&p.x);
            out.y.extend_from_slice(&p.y);
        }
        out
    }

    /// Uniform subset of `round(fraction * reference)` samples drawn with `rng`.
    pub fn sample_fraction<R: RngCore + ?Sized>(
        &self,
        count: usize,
        rng: &mut R,
    ) -> Result<Samples, FlError> {
        if count == 0 || count > self.len() {
            return Err(FlError::InvalidConfig(format!(
                "requested {count} samples from a pool of {}",
                self.len()
            )));
        }
        let mut idx: Vec<usize> = (0..self.len()).collect();
        idx.shuffle(rng);
        idx.truncate(count);
        idx.sort_unstable();
        Ok(self.subset(&idx))
    }
}

#[derive(Clone, Debug)]
pub struct SyntheticDataset {
    pub config: DatasetConfig,
    /// `classes x m` cluster centres.
    pub means: Vec<f64>,
    pub shards: Vec<Samples>,
    pub validation: Vec<Samples>,
    pub test: Samples,
    pub aux: Samples,
}

impl SyntheticDataset {
    pub fn train_len(&self) -> usize {
        self.shards.iter().map(Samples::len).sum()
    }

    pub fn train_all(&self) -> Samples {
        Samples::concat(&self.shards.iter().collect::<Vec<_>>())
    }
}

fn draw_samples<R: RngCore + ?Sized>(
    cfg: &DatasetConfig,
    means: &[f64],
    count: usize,
    rng: &mut R,
) -> Samples {
    let m = cfg.m;
    // Labels cycle through the classes, so every block is balanced to within one sample.
    let mut y: Vec<usize> = (0..count).map(|i| i % cfg.classes).collect();
    y.shuffle(rng);
    let mut x = Vec::with_capacity(count * m);
    for &label in &y {
        let centre = &means[label * m..(label + 1) * m];
        for &c in centre {
            let z: f64 = StandardNormal.sample(rng);
            x.push(c + cfg.sigma * z);
        }
    }
    Samples { m, x, y }
}

pub fn gen_dataset(cfg: &DatasetConfig) -> Result<SyntheticDataset, FlError> {
    if cfg.classes < 2 {
        return Err(FlError::InvalidConfig("need at least two classes".into()));
    }
    if cfg.k == 0 || cfg.n == 0 || cfg.n % cfg.k != 0 {
        return Err(FlError::InvalidConfig(format!(
            "n = {} is not divisible into {} shards",
            cfg.n, cfg.k
        )));
    }
    if cfg.m == 0 || cfg.n_test == 0 {
        return Err(FlError::InvalidConfig("empty feature or test dimension".into()));
    }
    if !(0.0..1.0).contains(&cfg.val_fraction) {
        return Err(FlError::InvalidConfig("val_fraction must lie in [0, 1)".into()));
    }
    let mut rng = seed::stream(cfg.seed, "dataset-means", &[]);
    let means: Vec<f64> = (0..cfg.classes * cfg.m)
        .map(|_| StandardNormal.sample(&mut rng))
        .collect();
    let shard_len = cfg.n / cfg.k;
    let n_val = (shard_len as f64 * cfg.val_fraction).round() as usize;
    let mut shards = Vec::with_capacity(cfg.k);
    let mut validation = Vec::new();
    for k in 0..cfg.k {
        let mut rng = seed::stream(cfg.seed, "dataset-shard", &[k as u64]);
        let all = draw_samples(cfg, &means, shard_len, &mut rng);
        if n_val > 0 {
            let val_idx: Vec<usize> = (0..n_val).collect();
            let train_idx: Vec<usize> = (n_val..shard_len).collect();
            validation.push(all.subset(&val_idx));
            shards.push(all.subset(&train_idx));
        } else {
            shards.push(all);
        }
    }
    let mut rng = seed::stream(cfg.seed, "dataset-test", &[]);
    let test = draw_samples(cfg, &means, cfg.n_test, &mut rng);
    let mut rng = seed::stream(cfg.seed, "dataset-aux", &[]);
    let aux = draw_samples(cfg, &means, cfg.n_aux, &mut rng);
    Ok(SyntheticDataset {
        config: cfg.clone(),
        means,
        shards,
        validation,
        test,
        aux,
    })
}

const DATA_MAGIC: &[u8; 8] = b"TWMDATA1";

/// Flat binary: magic, seed u64, n u64, m u32, classes u32, then `n*m` f64 features and `n` u32 labels.
pub fn write_samples(path: &Path, seed: u64, classes: usize, s: &Samples) -> Result<(), FlError> {
    let mut out = Vec::with_capacity(32 + s.x.len() * 8 + s.y.len() * 4);
    out.extend_from_slice(DATA_MAGIC);
    out.extend_from_slice(&seed.to_le_bytes());
    out.extend_from_slice(&(s.len() as u64).to_le_bytes());
    out.extend_from_slice(&(s.m as u32).to_le_bytes());
    out.extend_from_slice(&(classes as u32).to_le_bytes());
    for v in &s.x {
        out.extend_from_slice(&v.to_le_bytes());
    }
    for &y in &s.y {
        out.extend_from_slice(&(y as u32).to_le_bytes());
    }
    std::fs::File::create(path)?.write_all(&out)?;
    Ok(())
}

/// Returns `(seed, classes, samples)`.
pub fn read_samples(path: &Path) -> Result<(u64, usize, Samples), FlError> {
    let mut buf = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut buf)?;
    let bad = |why: &str| FlError::DatasetFile(why.to_string());
    if buf.len() < 32 || &buf[..8] != DATA_MAGIC {
        return Err(bad("bad header"));
    }
    let seed = u64::from_le_bytes(buf[8..16].try_into().unwrap());
    let n = u64::from_le_bytes(buf[16..24].try_into().unwrap()) as usize;
    let m = u32::from_le_bytes(buf[24..28].try_into().unwrap()) as usize;
    let classes = u32::from_le_bytes(buf[28..32].try_into().unwrap()) as usize;
    let need = 32 + n * m * 8 + n * 4;
    if buf.len() != need {
        return Err(bad("length does not match header"));
    }
    let x = buf[32..32 + n * m * 8]
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    let y: Vec<usize> = buf[32 + n * m * 8..]
        .chunks_exact(4)
        .map(|c| u32::from_le_bytes(c.try_into().unwrap()) as usize)
        .collect();
    if y.iter().any(|&l| l >= classes) {
        return Err(bad("label out of range"));
    }
    Ok((seed, classes, Samples { m, x, y }))
}

/// Layer sizes `[m, h, G]`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MlpShape {
    pub inputs: usize,
    pub hidden: usize,
    pub classes: usize,
}

impl Default for MlpShape {
    fn default() -> Self {
        Self {
            inputs: 32,
            hidden: 128,
            classes: 10,
        }
    }
}

impl MlpShape {
    pub fn d(&self) -> usize {
        (self.inputs + 1) * self.hidden + (self.hidden + 1) * self.classes
    }

    pub fn w1(&self) -> std::ops::Range<usize> {
        0..self.hidden * self.inputs
    }

    pub fn b1(&self) -> std::ops::Range<usize> {
        let s = self.hidden * self.inputs;
        s..s + self.hidden
    }

    pub fn w2(&self) -> std::ops::Range<usize> {
        let s = self.b1().end;
        s..s + self.classes * self.hidden
    }

    pub fn b2(&self) -> std::ops::Range<usize> {
        let s = self.w2().end;
        s..s + self.classes
    }

    /// Weight-matrix ranges with their row length (`W1`: h rows of m, `W2`: G rows of h).
    pub fn weight_tensors(&self) -> [(std::ops::Range<usize>, usize); 2] {
        [(self.w1(), self.inputs), (self.w2(), self.hidden)]
    }

    pub fn fingerprint(&self) -> String {
        format!("mlp-{}-{}-{}-tanh", self.inputs, self.hidden, self.classes)
    }

    /// Scaled-normal init: `W1 ~ N(0, 1/m)`, `W2 ~ N(0, 1/h)`, zero biases.
    pub fn init<R: RngCore + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        let mut theta = vec![0.0; self.d()];
        let s1 = (self.inputs as f64).recip().sqrt();
        for w in &mut theta[self.w1()] {
            let z: f64 = StandardNormal.sample(rng);
            *w = s1 * z;
        }
        let s2 = (self.hidden as f64).recip().sqrt();
        let w2 = self.w2();
        for w in &mut theta[w2] {
            let z: f64 = StandardNormal.sample(rng);
            *w = s2 * z;
        }
        theta
    }
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    // Four independent accumulators; fixed association order keeps results reproducible.
    let n = a.len().min(b.len());
    let (a, b) = (&a[..n], &b[..n]);
    let mut acc = [0.0f64; 4];
    let chunks = n / 4;
    for i in 0..chunks {
        let j = 4 * i;
        acc[0] += a[j] * b[j];
        acc[1] += a[j + 1] * b[j + 1];
        acc[2] += a[j + 2] * b[j + 2];
        acc[3] += a[j + 3] * b[j + 3];
    }
    let mut tail = 0.0;
    for j in 4 * chunks..n {
        tail += a[j] * b[j];
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

#[inline]
fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yi, &xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

/// Per-sample hidden activations and logits.
pub fn forward_into(shape: &MlpShape, theta: &[f64], x: &[f64], hidden: &mut [f64], logits: &mut [f64]) {
    let (m, h) = (shape.inputs, shape.hidden);
    let w1 = &theta[shape.w1()];
    let b1 = &theta[shape.b1()];
    let w2 = &theta[shape.w2()];
    let b2 = &theta[shape.b2()];
    for j in 0..h {
        hidden[j] = (b1[j] + dot(&w1[j * m..(j + 1) * m], x)).tanh();
    }
    for (c, z) in logits.iter_mut().enumerate() {
        *z = b2[c] + dot(&w2[c * h..(c + 1) * h], hidden);
    }
}

pub fn logits(shape: &MlpShape, theta: &[f64], x: &[f64]) -> Vec<f64> {
    let mut hidden = vec![0.0; shape.hidden];
    let mut out = vec![0.0; shape.classes];
    forward_into(shape, theta, x, &mut hidden, &mut out);
    out
}

/// Numerically stable softmax of `z / temperature`, written into `p`.
pub fn softmax_into(z: &[f64], temperature: f64, p: &mut [f64]) {
    let max = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for (pi, &zi) in p.iter_mut().zip(z) {
        *pi = ((zi - max) / temperature).exp();
        sum += *pi;
    }
    for pi in p.iter_mut() {
        *pi /= sum;
    }
}

/// Backpropagates a per-sample loss through the MLP.
///
/// `loss_fn(sample, logits, dlogits)` returns the sample loss and writes
/// `d loss / d logits`. The returned loss and `grad` are batch means.
pub fn backprop<F>(
    shape: &MlpShape,
    theta: &[f64],
    data: &Samples,
    batch: &[usize],
    grad: &mut [f64],
    mut loss_fn: F,
) -> f64
where
    F: FnMut(usize, &[f64], &mut [f64]) -> f64,
{
    let (m, h, g) = (shape.inputs, shape.hidden, shape.classes);
    grad.iter_mut().for_each(|v| *v = 0.0);
    let mut hidden = vec![0.0; h];
    let mut z = vec![0.0; g];
    let mut dz = vec![0.0; g];
    let mut dh = vec![0.0; h];
    let w2 = &theta[shape.w2()];
    let (r_w1, r_b1, r_w2, r_b2) = (shape.w1(), shape.b1(), shape.w2(), shape.b2());
    let mut total = 0.0;
    for &i in batch {
        let x = data.row(i);
        forward_into(shape, theta, x, &mut hidden, &mut z);
        total += loss_fn(i, &z, &mut dz);
        dh.iter_mut().for_each(|v| *v = 0.0);
        for c in 0..g {
            let row = &w2[c * h..(c + 1) * h];
            grad[r_b2.start + c] += dz[c];
            axpy(dz[c], &hidden, &mut grad[r_w2.start + c * h..r_w2.start + (c + 1) * h]);
            axpy(dz[c], row, &mut dh);
        }
        for j in 0..h {
            let dpre = dh[j] * (1.0 - hidden[j] * hidden[j]);
            grad[r_b1.start + j] += dpre;
            axpy(dpre, x, &mut grad[r_w1.start + j * m..r_w1.start + (j + 1) * m]);
        }
    }
    let scale = (batch.len() as f64).recip();
    grad.iter_mut().for_each(|v| *v *= scale);
    debug_assert_eq!(r_b2.end, theta.len());
    total * scale
}

/// Softmax cross-entropy for one sample; writes `p - onehot(label)`.
pub fn cross_entropy(z: &[f64], label: usize, dz: &mut [f64]) -> f64 {
    softmax_into(z, 1.0, dz);
    let loss = -dz[label].max(f64::MIN_POSITIVE).ln();
    dz[label] -= 1.0;
    loss
}

/// Mean softmax cross-entropy over `batch` and its exact gradient.
pub fn forward_backward(
    shape: &MlpShape,
    theta: &[f64],
    data: &Samples,
    batch: &[usize],
    grad: &mut [f64],
) -> Result<f64, FlError> {
    if batch.is_empty() {
        return Err(FlError::InvalidConfig("empty batch".into()));
    }
    let loss = backprop(shape, theta, data, batch, grad, |i, z, dz| {
        cross_entropy(z, data.y[i], dz)
    });
    if !loss.is_finite() {
        return Err(FlError::NonFinite {
            step: 0,
            param_max: max_abs(theta),
        });
    }
    Ok(loss)
}

pub fn max_abs(v: &[f64]) -> f64 {
    v.iter().fold(0.0, |a, &x| a.max(x.abs()))
}

pub fn l2_norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OptimizerConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            weight_decay: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl OptimizerConfig {
    /// Plain Adam (no decoupled decay).
    pub fn adam(lr: f64) -> Self {
        Self {
            lr,
            weight_decay: 0.0,
            ..Self::default()
        }
    }
}

/// AdamW with decoupled weight decay.
#[derive(Clone, Debug)]
pub struct AdamW {
    pub config: OptimizerConfig,
    m: Vec<f64>,
    v: Vec<f64>,
    pub step: u64,
}

impl AdamW {
    pub fn new(config: OptimizerConfig, d: usize) -> Self {
        Self {
            config,
            m: vec![0.0; d],
            v: vec![0.0; d],
            step: 0,
        }
    }

    pub fn update(&mut self, theta: &mut [f64], grad: &[f64]) {
        let c = self.config;
        self.step += 1;
        let bc1 = 1.0 - c.beta1.powi(self.step as i32);
        let bc2 = 1.0 - c.beta2.powi(self.step as i32);
        let decay = 1.0 - c.lr * c.weight_decay;
        for ((p, &g), (m, v)) in theta
            .iter_mut()
            .zip(grad)
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            *p *= decay;
            *m = c.beta1 * *m + (1.0 - c.beta1) * g;
            *v = c.beta2 * *v + (1.0 - c.beta2) * g * g;
            let mhat = *m / bc1;
            let vhat = *v / bc2;
            *p -= c.lr * mhat / (vhat.sqrt() + c.eps);
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub optimizer: OptimizerConfig,
    pub batch_size: usize,
    pub epochs: usize,
}

/// Runs `epochs` passes of shuffled mini-batch training with a fresh optimizer.
/// `extra_grad`, when given, adds a parameter-space term to every step's
/// gradient and returns the corresponding loss contribution. Returns the mean
/// training loss of the last epoch.
pub fn train_epochs<R, G>(
    theta: &mut [f64],
    data: &Samples,
    cfg: &TrainConfig,
    rng: &mut R,
    mut on_epoch: impl FnMut(usize, &[f64]),
    mut loss_fn: G,
) -> Result<f64, FlError>
where
    R: RngCore + ?Sized,
    G: FnMut(&[f64], &[usize], &mut [f64]) -> f64,
{
    if data.is_empty() {
        return Err(FlError::InvalidConfig("empty training set".into()));
    }
    if cfg.batch_size == 0 {
        return Err(FlError::InvalidConfig("batch size must be positive".into()));
    }
    let mut opt = AdamW::new(cfg.optimizer, theta.len());
    let mut grad = vec![0.0; theta.len()];
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut last = f64::NAN;
    for epoch in 0..cfg.epochs {
        order.shuffle(rng);
        let mut sum = 0.0;
        let mut batches = 0usize;
        for batch in order.chunks(cfg.batch_size) {
            let loss = loss_fn(theta, batch, &mut grad);
            if !loss.is_finite() {
                return Err(FlError::NonFinite {
                    step: opt.step,
                    param_max: max_abs(theta),
                });
            }
            if loss > DIVERGENCE_LOSS {
                return Err(FlError::Diverged {
                    step: opt.step,
                    loss,
                });
            }
            opt.update(theta, &grad);
            sum += loss;
            batches += 1;
        }
        last = sum / batches as f64;
        on_epoch(epoch, theta);
    }
    Ok(last)
}

/// Standard cross-entropy training on `data`.
pub fn local_train<R: RngCore + ?Sized>(
    shape: &MlpShape,
    theta: &mut [f64],
    data: &Samples,
    cfg: &TrainConfig,
    rng: &mut R,
) -> Result<f64, FlError> {
    if cfg.epochs == 0 {
        return Err(FlError::InvalidConfig("epochs must be at least 1".into()));
    }
    train_epochs(theta, data, cfg, rng, |_, _| {}, |th, batch, grad| {
        backprop(shape, th, data, batch, grad, |i, z, dz| {
            cross_entropy(z, data.y[i], dz)
        })
    })
}

/// Fraction of argmax-correct predictions.
pub fn evaluate(shape: &MlpShape, theta: &[f64], test: &Samples) -> f64 {
    if test.is_empty() {
        return 0.0;
    }
    const CHUNK: usize = 512;
    let chunks = test.len().div_ceil(CHUNK);
    let correct: usize = par::map_indexed(chunks, |c| {
        let mut hidden = vec![0.0; shape.hidden];
        let mut z = vec![0.0; shape.classes];
        (c * CHUNK..((c + 1) * CHUNK).min(test.len()))
            .filter(|&i| {
                forward_into(shape, theta, test.row(i), &mut hidden, &mut z);
                argmax(&z) == test.y[i]
            })
            .count()
    })
    .into_iter()
    .sum();
    correct as f64 / test.len() as f64
}

/// Mean cross-entropy over a sample set.
pub fn mean_loss(shape: &MlpShape, theta: &[f64], data: &Samples) -> f64 {
    let mut hidden = vec![0.0; shape.hidden];
    let mut z = vec![0.0; shape.classes];
    let mut p = vec![0.0; shape.classes];
    let total: f64 = (0..data.len())
        .map(|i| {
            forward_into(shape, theta, data.row(i), &mut hidden, &mut z);
            cross_entropy(&z, data.y[i], &mut p)
        })
        .sum();
    total / data.len() as f64
}

fn argmax(z: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in z.iter().enumerate() {
        if v > z[best] {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn small_cfg() -> DatasetConfig {
        DatasetConfig {
            n: 640,
            m: 8,
            classes: 4,
            k: 4,
            n_test: 400,
            n_aux: 200,
            ..Default::default()
        }
    }

    #[test]
    fn parameter_count_and_layout() {
        let s = MlpShape::default();
        assert_eq!(s.d(), 5514);
        assert_eq!(s.b2().end, s.d());
        assert_eq!(s.w2().start, 33 * 128);
    }

    #[test]
    fn default_dataset_shapes_and_balance() {
        let cfg = DatasetConfig::default();
        let ds = gen_dataset(&cfg).unwrap();
        assert_eq!(ds.shards.len(), 32);
        assert!(ds.shards.iter().all(|s| s.len() == 640));
        for s in &ds.shards {
            let mut counts = vec![0usize; cfg.classes];
            s.y.iter().for_each(|&y| counts[y] += 1);
            for c in counts {
                let frac = c as f64 / s.len() as f64;
                assert!((frac - 0.1).abs() <= 0.05);
            }
        }
        assert!(gen_dataset(&DatasetConfig { n: 20_481, ..cfg.clone() }).is_err());
        assert!(gen_dataset(&DatasetConfig { classes: 1, ..cfg }).is_err());
    }

    #[test]
    fn dataset_is_deterministic() {
        let a = gen_dataset(&small_cfg()).unwrap();
        let b = gen_dataset(&small_cfg()).unwrap();
        assert_eq!(a.shards, b.shards);
        assert_eq!(a.test, b.test);
        let c = gen_dataset(&DatasetConfig { seed: 1, ..small_cfg() }).unwrap();
        assert_ne!(a.test, c.test);
    }

    #[test]
    fn zero_model_loss_is_log_classes() {
        let shape = MlpShape { inputs: 8, hidden: 16, classes: 4 };
        let ds = gen_dataset(&small_cfg()).unwrap();
        let theta = vec![0.0; shape.d()];
        let mut grad = vec![0.0; shape.d()];
        let batch: Vec<usize> = (0..40).collect();
        let loss = forward_backward(&shape, &theta, &ds.shards[0], &batch, &mut grad).unwrap();
        assert!((loss - 4f64.ln()).abs() < 1e-12);
        let mut grad2 = vec![0.0; shape.d()];
        forward_backward(&shape, &theta, &ds.shards[0], &batch, &mut grad2).unwrap();
        assert_eq!(grad, grad2);
        assert!(forward_backward(&shape, &theta, &ds.shards[0], &[], &mut grad).is_err());
    }

    #[test]
    fn gradient_matches_central_differences() {
        let shape = MlpShape { inputs: 8, hidden: 16, classes: 4 };
        let ds = gen_dataset(&small_cfg()).unwrap();
        let mut rng = seed::stream(0, "fd", &[]);
        let theta = shape.init(&mut rng);
        let batch: Vec<usize> = (0..32).collect();
        let mut grad = vec![0.0; shape.d()];
        forward_backward(&shape, &theta, &ds.shards[1], &batch, &mut grad).unwrap();
        let h = 1e-5;
        let mut scratch = vec![0.0; shape.d()];
        for _ in 0..10 {
            let i = rng.random_range(0..shape.d());
            let mut plus = theta.clone();
            plus[i] += h;
            let mut minus = theta.clone();
            minus[i] -= h;
            let lp = forward_backward(&shape, &plus, &ds.shards[1], &batch, &mut scratch).unwrap();
            let lm = forward_backward(&shape, &minus, &ds.shards[1], &batch, &mut scratch).unwrap();
            let fd = (lp - lm) / (2.0 * h);
            let rel = (fd - grad[i]).abs() / fd.abs().max(grad[i].abs()).max(1e-8);
            assert!(rel <= 1e-4 || (fd - grad[i]).abs() < 1e-9, "coord {i}: {fd} vs {}", grad[i]);
        }
    }

    #[test]
    fn zero_learning_rate_leaves_model_unchanged() {
        let shape = MlpShape { inputs: 8, hidden: 16, classes: 4 };
        let ds = gen_dataset(&small_cfg()).unwrap();
        let mut rng = seed::stream(1, "init", &[]);
        let theta0 = shape.init(&mut rng);
        let mut theta = theta0.clone();
        let cfg = TrainConfig {
            optimizer: OptimizerConfig { lr: 0.0, ..Default::default() },
            batch_size: 16,
            epochs: 2,
        };
        local_train(&shape, &mut theta, &ds.shards[0], &cfg, &mut rng).unwrap();
        assert_eq!(theta, theta0);
    }

    #[test]
    fn training_on_separable_data_reaches_full_accuracy() {
        let cfg = DatasetConfig { sigma: 0.0, ..small_cfg() };
        let ds = gen_dataset(&cfg).unwrap();
        let shape = MlpShape { inputs: 8, hidden: 16, classes: 4 };
        let mut rng = seed::stream(2, "init", &[]);
        let mut theta = shape.init(&mut rng);
        let train = ds.train_all();
        let before = mean_loss(&shape, &theta, &train);
        let tc = TrainConfig {
            optimizer: OptimizerConfig { lr: 1e-2, ..Default::default() },
            batch_size: 32,
            epochs: 1,
        };
        local_train(&shape, &mut theta, &train, &tc, &mut rng).unwrap();
        assert!(mean_loss(&shape, &theta, &train) < before);
        let tc = TrainConfig { epochs: 20, ..tc };
        local_train(&shape, &mut theta, &train, &tc, &mut rng).unwrap();
        assert_eq!(evaluate(&shape, &theta, &ds.test), 1.0);
        assert_eq!(evaluate(&shape, &theta, &train), 1.0);
    }

    #[test]
    fn untrained_model_on_random_labels_is_near_chance() {
        let shape = MlpShape::default();
        let mut rng = seed::stream(3, "labels", &[]);
        let n = 4000;
        let test = Samples {
            m: 32,
            x: (0..n * 32).map(|_| StandardNormal.sample(&mut rng)).collect(),
            y: (0..n).map(|_| rng.random_range(0..10)).collect(),
        };
        let theta = shape.init(&mut rng);
        let acc = evaluate(&shape, &theta, &test);
        assert!((acc - 0.1).abs() <= 0.03, "{acc}");
        assert_eq!(acc, evaluate(&shape, &theta, &test));
    }

    #[test]
    fn samples_file_roundtrip() {
        let ds = gen_dataset(&small_cfg()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("train.bin");
        write_samples(&path, 0, 4, &ds.shards[0]).unwrap();
        let (seed, classes, back) = read_samples(&path).unwrap();
        assert_eq!((seed, classes), (0, 4));
        assert_eq!(back, ds.shards[0]);
    }
}
