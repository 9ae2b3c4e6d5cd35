//! Three-layer perceptron `in → hidden → hidden → 1` with ReLU hidden layers
//! and a sigmoid output, trained by mini-batch SGD with momentum on a
//! per-sample squared error `½(out − t)²`.
//!
//! Parameters live in one flat buffer in the order W1, b1, W2, b2, W3, b3
//! (weights row-major, `out × in`), which keeps the optimizer, the
//! checkpoint format and gradient checking uniform.

use std::io::{Read, Write};
use std::path::Path;

use ndarray::{s, Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed;

pub const INPUT_DIM: usize = 512;
pub const HIDDEN_DIM: usize = 512;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MlpDims {
    pub input: usize,
    pub hidden: usize,
}

impl Default for MlpDims {
    fn default() -> Self {
        Self {
            input: INPUT_DIM,
            hidden: HIDDEN_DIM,
        }
    }
}

impl MlpDims {
    /// `(rows, cols)` of W1, b1, W2, b2, W3, b3.
    pub fn shapes(&self) -> [(usize, usize); 6] {
        let (i, h) = (self.input, self.hidden);
        [(h, i), (h, 1), (h, h), (h, 1), (1, h), (1, 1)]
    }

    pub fn n_params(&self) -> usize {
        self.shapes().iter().map(|(r, c)| r * c).sum()
    }

    fn offsets(&self) -> [usize; 7] {
        let mut o = [0; 7];
        for (k, (r, c)) in self.shapes().iter().enumerate() {
            o[k + 1] = o[k] + r * c;
        }
        o
    }
}

pub const TENSOR_NAMES: [&str; 6] = ["W1", "b1", "W2", "b2", "W3", "b3"];

/// Network parameters; also used as the container for gradients and
/// momentum buffers.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpParams {
    dims: MlpDims,
    data: Vec<f64>,
}

impl MlpParams {
    pub fn zeros(dims: MlpDims) -> Self {
        Self {
            dims,
            data: vec![0.0; dims.n_params()],
        }
    }

    pub fn from_vec(dims: MlpDims, data: Vec<f64>) -> Result<Self> {
        if data.len() != dims.n_params() {
            return Err(Error::LengthMismatch(data.len(), dims.n_params()));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(i));
        }
        Ok(Self { dims, data })
    }

    /// He-uniform hidden weights, Glorot-uniform output weights, zero biases.
    pub fn init(dims: MlpDims, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = Self::zeros(dims);
        let o = dims.offsets();
        let he_in = (6.0 / dims.input as f64).sqrt();
        let he_h = (6.0 / dims.hidden as f64).sqrt();
        let glorot = (6.0 / (dims.hidden + 1) as f64).sqrt();
        for (k, bound) in [(0, he_in), (2, he_h), (4, glorot)] {
            for v in &mut p.data[o[k]..o[k + 1]] {
                *v = rng.random_range(-bound..bound);
            }
        }
        p
    }

    pub fn dims(&self) -> MlpDims {
        self.dims
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    /// Flat slice of tensor `k` in [`TENSOR_NAMES`] order.
    pub fn tensor(&self, k: usize) -> &[f64] {
        let o = self.dims.offsets();
        &self.data[o[k]..o[k + 1]]
    }

    pub fn tensor_mut(&mut self, k: usize) -> &mut [f64] {
        let o = self.dims.offsets();
        &mut self.data[o[k]..o[k + 1]]
    }

    fn matrix(&self, k: usize) -> ArrayView2<'_, f64> {
        let (r, c) = self.dims.shapes()[k];
        ArrayView2::from_shape((r, c), self.tensor(k)).expect("shape")
    }

    fn vector(&self, k: usize) -> ArrayView1<'_, f64> {
        ArrayView1::from(self.tensor(k))
    }

    pub fn norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

struct Activations {
    z1: Array2<f64>,
    a1: Array2<f64>,
    z2: Array2<f64>,
    a2: Array2<f64>,
    out: Array1<f64>,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0; 4];
    let (ca, cb) = (a.chunks_exact(4), b.chunks_exact(4));
    let tail: f64 = ca.remainder().iter().zip(cb.remainder()).map(|(x, y)| x * y).sum();
    for (x, y) in ca.zip(cb) {
        for k in 0..4 {
            acc[k] += x[k] * y[k];
        }
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

/// `W·x + b` for one row, walking the row-major weights in memory order.
fn affine_row(p: &MlpParams, w: usize, x: &[f64]) -> Array2<f64> {
    let (rows, cols) = p.dims.shapes()[w];
    let (wt, b) = (p.tensor(w), p.tensor(w + 1));
    Array2::from_shape_fn((1, rows), |(_, j)| dot(&wt[j * cols..(j + 1) * cols], x) + b[j])
}

fn forward_batch(p: &MlpParams, x: ArrayView2<'_, f64>) -> Activations {
    if x.nrows() == 1 {
        if let Some(row) = x.as_slice() {
            let z1 = affine_row(p, 0, row);
            let a1 = z1.mapv(|v| v.max(0.0));
            let z2 = affine_row(p, 2, a1.as_slice().expect("contiguous"));
            return finish(p, z1, a1, z2);
        }
    }
    let z1 = x.dot(&p.matrix(0).t()) + &p.vector(1);
    let a1 = z1.mapv(|v| v.max(0.0));
    let z2 = a1.dot(&p.matrix(2).t()) + &p.vector(3);
    finish(p, z1, a1, z2)
}

fn finish(p: &MlpParams, z1: Array2<f64>, a1: Array2<f64>, z2: Array2<f64>) -> Activations {
    let a2 = z2.mapv(|v| v.max(0.0));
    let z3 = a2.dot(&p.vector(4)) + p.tensor(5)[0];
    let out = z3.mapv(sigmoid);
    Activations { z1, a1, z2, a2, out }
}

fn check_input(p: &MlpParams, x: &[f64]) -> Result<()> {
    if x.len() != p.dims.input {
        return Err(Error::LengthMismatch(x.len(), p.dims.input));
    }
    if let Some(i) = x.iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFinite(i));
    }
    Ok(())
}

/// `sigmoid(W3·relu(W2·relu(W1·x + b1) + b2) + b3)`.
pub fn mlp_forward(p: &MlpParams, x: &[f64]) -> Result<f64> {
    check_input(p, x)?;
    let xv = ArrayView2::from_shape((1, x.len()), x).expect("row");
    Ok(forward_batch(p, xv).out[0])
}

/// Outputs for every row of `x`.
pub fn predict(p: &MlpParams, x: ArrayView2<'_, f64>) -> Result<Vec<f64>> {
    if x.ncols() != p.dims.input {
        return Err(Error::LengthMismatch(x.ncols(), p.dims.input));
    }
    if let Some(i) = x.iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFinite(i));
    }
    let mut out = Vec::with_capacity(x.nrows());
    // chunked to bound the activation buffers
    for chunk in x.axis_chunks_iter(Axis(0), 1024) {
        out.extend(forward_batch(p, chunk).out.iter());
    }
    Ok(out)
}

/// Gradient of the batch-mean of `½(out − t)²`; also returns that loss.
fn batch_grad(p: &MlpParams, x: ArrayView2<'_, f64>, t: &[f64], g: &mut MlpParams) -> f64 {
    let n = x.nrows() as f64;
    let act = forward_batch(p, x);
    let mut loss = 0.0;
    let dz3 = Array1::from_iter(act.out.iter().zip(t).map(|(&o, &t)| {
        loss += 0.5 * (o - t) * (o - t);
        (o - t) * o * (1.0 - o) / n
    }));
    let mut da2 = dz3
        .view()
        .insert_axis(Axis(1))
        .dot(&p.vector(4).insert_axis(Axis(0)));
    da2.zip_mut_with(&act.z2, |d, &z| {
        if z <= 0.0 {
            *d = 0.0
        }
    });
    let dz2 = da2;
    let mut da1 = dz2.dot(&p.matrix(2));
    da1.zip_mut_with(&act.z1, |d, &z| {
        if z <= 0.0 {
            *d = 0.0
        }
    });
    let dz1 = da1;

    let dims = p.dims;
    let (i, h) = (dims.input, dims.hidden);
    let write_mat = |dst: &mut [f64], m: Array2<f64>| {
        for (d, v) in dst.iter_mut().zip(m.iter()) {
            *d = *v;
        }
    };
    write_mat(g.tensor_mut(0), dz1.t().dot(&x));
    write_mat(g.tensor_mut(2), dz2.t().dot(&act.a1));
    let gw3 = act.a2.t().dot(&dz3);
    g.tensor_mut(4).copy_from_slice(gw3.as_slice().expect("contiguous"));
    let gb1 = dz1.sum_axis(Axis(0));
    let gb2 = dz2.sum_axis(Axis(0));
    g.tensor_mut(1).copy_from_slice(gb1.as_slice().expect("contiguous"));
    g.tensor_mut(3).copy_from_slice(gb2.as_slice().expect("contiguous"));
    g.tensor_mut(5)[0] = dz3.sum();
    debug_assert_eq!(g.tensor(0).len(), h * i);
    loss / n
}

/// Exact backprop gradient of `½(out − target)²` for one example.
pub fn mlp_grad(p: &MlpParams, x: &[f64], target: f64) -> Result<MlpParams> {
    check_input(p, x)?;
    if !target.is_finite() {
        return Err(Error::Domain {
            what: "target",
            value: target,
        });
    }
    let xv = ArrayView2::from_shape((1, x.len()), x).expect("row");
    let mut g = MlpParams::zeros(p.dims);
    batch_grad(p, xv, &[target], &mut g);
    Ok(g)
}

/// `½(out − target)²` for one example.
pub fn mlp_loss(p: &MlpParams, x: &[f64], target: f64) -> Result<f64> {
    let o = mlp_forward(p, x)?;
    Ok(0.5 * (o - target) * (o - target))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub seed: u64,
}

pub const WEIGHT_DECAY: f64 = 1e-3;
pub const EPOCH_RANGE: (usize, usize) = (5, 80);
pub const BATCH_RANGE: (usize, usize) = (16, 256);
pub const LR_RANGE: (f64, f64) = (1e-4, 0.1);
pub const MOMENTUM_RANGE: (f64, f64) = (0.1, 0.9);

impl TrainConfig {
    /// Best configuration of a reference hyperparameter search on real
    /// tokens.
    pub fn known_good(seed: u64) -> Self {
        Self {
            epochs: 79,
            batch_size: 106,
            learning_rate: 0.00131,
            momentum: 0.83033,
            weight_decay: WEIGHT_DECAY,
            seed,
        }
    }

    /// Checks the search ranges. The optimizer itself accepts anything
    /// finite; [`train`] calls this.
    pub fn validate(&self) -> Result<()> {
        let bad = |what: &'static str, value: f64| Err(Error::Domain { what, value });
        if !(EPOCH_RANGE.0..=EPOCH_RANGE.1).contains(&self.epochs) {
            return bad("epochs", self.epochs as f64);
        }
        if !(BATCH_RANGE.0..=BATCH_RANGE.1).contains(&self.batch_size) {
            return bad("batch_size", self.batch_size as f64);
        }
        if !(LR_RANGE.0..=LR_RANGE.1).contains(&self.learning_rate) {
            return bad("learning_rate", self.learning_rate);
        }
        if !(MOMENTUM_RANGE.0..=MOMENTUM_RANGE.1).contains(&self.momentum) {
            return bad("momentum", self.momentum);
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return bad("weight_decay", self.weight_decay);
        }
        Ok(())
    }

    /// Uniform draw from the search ranges, log-uniform for the learning rate.
    pub fn sample(rng: &mut impl Rng, seed: u64) -> Self {
        let (lo, hi) = (LR_RANGE.0.ln(), LR_RANGE.1.ln());
        Self {
            epochs: rng.random_range(EPOCH_RANGE.0..=EPOCH_RANGE.1),
            batch_size: rng.random_range(BATCH_RANGE.0..=BATCH_RANGE.1),
            learning_rate: rng.random_range(lo..=hi).exp(),
            momentum: rng.random_range(MOMENTUM_RANGE.0..=MOMENTUM_RANGE.1),
            weight_decay: WEIGHT_DECAY,
            seed,
        }
    }
}

/// `v ← μ·v + g + λ·p`, `p ← p − η·v`.
pub fn sgd_step(p: &mut MlpParams, grad: &MlpParams, velocity: &mut MlpParams, cfg: &TrainConfig) {
    debug_assert_eq!(p.dims, grad.dims);
    debug_assert_eq!(p.dims, velocity.dims);
    for ((w, &g), v) in p.data.iter_mut().zip(&grad.data).zip(velocity.data.iter_mut()) {
        *v = cfg.momentum * *v + g + cfg.weight_decay * *w;
        *w -= cfg.learning_rate * *v;
    }
}

/// Row-aligned inputs and scalar targets.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub inputs: Array2<f64>,
    pub targets: Vec<f64>,
}

impl Dataset {
    pub fn new(inputs: Array2<f64>, targets: Vec<f64>) -> Result<Self> {
        if inputs.nrows() != targets.len() {
            return Err(Error::LengthMismatch(inputs.nrows(), targets.len()));
        }
        if let Some(i) = inputs.iter().chain(&targets).position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(i));
        }
        Ok(Self { inputs, targets })
    }

    pub fn from_rows(rows: &[Vec<f64>], targets: Vec<f64>) -> Result<Self> {
        let d = rows.first().map_or(0, Vec::len);
        let mut flat = Vec::with_capacity(rows.len() * d);
        for r in rows {
            if r.len() != d {
                return Err(Error::LengthMismatch(r.len(), d));
            }
            flat.extend_from_slice(r);
        }
        let inputs = Array2::from_shape_vec((rows.len(), d), flat).expect("shape");
        Self::new(inputs, targets)
    }

    pub fn len(&self) -> usize {
        self.targets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.targets.is_empty()
    }

    pub fn select(&self, idx: &[usize]) -> Self {
        Self {
            inputs: self.inputs.select(Axis(0), idx),
            targets: idx.iter().map(|&i| self.targets[i]).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trained {
    pub params: MlpParams,
    /// Mean `(out − t)²` over each epoch, measured before each step.
    pub losses: Vec<f64>,
}

/// Mini-batch SGD with a seeded per-epoch shuffle. Deterministic per
/// `(dataset, cfg, dims)`.
pub fn train(data: &Dataset, cfg: &TrainConfig) -> Result<Trained> {
    train_with_dims(data, cfg, MlpDims::default())
}

pub fn train_with_dims(data: &Dataset, cfg: &TrainConfig, dims: MlpDims) -> Result<Trained> {
    if data.is_empty() {
        return Err(Error::TooFewSamples { needed: 1, got: 0 });
    }
    cfg.validate()?;
    if data.inputs.ncols() != dims.input {
        return Err(Error::LengthMismatch(data.inputs.ncols(), dims.input));
    }
    let mut params = MlpParams::init(dims, seed::derive(&[cfg.seed, 0x1417]));
    let mut velocity = MlpParams::zeros(dims);
    let mut grad = MlpParams::zeros(dims);
    let mut rng = ChaCha8Rng::seed_from_u64(seed::derive(&[cfg.seed, 0x5487]));
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut batch = Array2::zeros((cfg.batch_size, dims.input));
    let mut targets = Vec::with_capacity(cfg.batch_size);
    let mut losses = Vec::with_capacity(cfg.epochs);
    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut sum = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            targets.clear();
            for (row, &i) in chunk.iter().enumerate() {
                batch.row_mut(row).assign(&data.inputs.row(i));
                targets.push(data.targets[i]);
            }
            let xb = batch.slice(s![..chunk.len(), ..]);
            let half_mse = batch_grad(&params, xb, &targets, &mut grad);
            sum += 2.0 * half_mse * chunk.len() as f64;
            sgd_step(&mut params, &grad, &mut velocity, cfg);
        }
        losses.push(sum / data.len() as f64);
    }
    Ok(Trained { params, losses })
}

/// Mean `(out − t)²` over a dataset.
pub fn mse(p: &MlpParams, data: &Dataset) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::TooFewSamples { needed: 1, got: 0 });
    }
    let out = predict(p, data.inputs.view())?;
    Ok(out
        .iter()
        .zip(&data.targets)
        .map(|(o, t)| (o - t) * (o - t))
        .sum::<f64>()
        / data.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchResult {
    pub best: TrainConfig,
    pub best_val_loss: f64,
    /// Every trial in draw order.
    pub trials: Vec<(TrainConfig, f64)>,
}

/// Seeded 80/20 train/validation split.
pub fn split(data: &Dataset, seed: u64) -> Result<(Dataset, Dataset)> {
    let n_val = data.len() / 5;
    if n_val == 0 || n_val == data.len() {
        return Err(Error::TooFewSamples {
            needed: 5,
            got: data.len(),
        });
    }
    let mut idx: Vec<usize> = (0..data.len()).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed::derive(&[seed, 0x5917])));
    let (val, tr) = idx.split_at(n_val);
    Ok((data.select(tr), data.select(val)))
}

/// Random search over the training ranges, ranked by validation MSE.
pub fn random_search(data: &Dataset, trials: usize, seed: u64) -> Result<SearchResult> {
    random_search_with(data, trials, seed, MlpDims::default(), |c| c)
}

/// As [`random_search`], with `adjust` applied to each drawn config (used
/// to cap epochs in quick runs).
pub fn random_search_with(
    data: &Dataset,
    trials: usize,
    seed: u64,
    dims: MlpDims,
    adjust: impl Fn(TrainConfig) -> TrainConfig,
) -> Result<SearchResult> {
    if trials == 0 {
        return Err(Error::Domain {
            what: "trials",
            value: 0.0,
        });
    }
    let (tr, val) = split(data, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed::derive(&[seed, 0x5EA8]));
    let mut results = Vec::with_capacity(trials);
    for t in 0..trials {
        let cfg = adjust(TrainConfig::sample(&mut rng, seed::derive(&[seed, t as u64])));
        let fit = train_with_dims(&tr, &cfg, dims)?;
        results.push((cfg, mse(&fit.params, &val)?));
    }
    let (best, best_val_loss) = results
        .iter()
        .copied()
        .reduce(|a, b| if b.1 < a.1 { b } else { a })
        .expect("trials >= 1");
    Ok(SearchResult {
        best,
        best_val_loss,
        trials: results,
    })
}

const MAGIC: &[u8; 8] = b"USAMMLP\0";
const CHECKPOINT_VERSION: u32 = 1;

/// Magic, version, tensor count, `(rows, cols)` per tensor as u32, then all
/// parameters as little-endian f64 in tensor order.
pub fn write_checkpoint(w: &mut impl Write, p: &MlpParams) -> std::io::Result<()> {
    w.write_all(MAGIC)?;
    w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
    let shapes = p.dims.shapes();
    w.write_all(&(shapes.len() as u32).to_le_bytes())?;
    for (r, c) in shapes {
        w.write_all(&(r as u32).to_le_bytes())?;
        w.write_all(&(c as u32).to_le_bytes())?;
    }
    let mut buf = Vec::with_capacity(p.data.len() * 8);
    for v in &p.data {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    w.write_all(&buf)
}

pub fn read_checkpoint(r: &mut impl Read, path: &Path) -> Result<MlpParams> {
    let bad = |message: String| Error::Checkpoint {
        path: path.to_path_buf(),
        message,
    };
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes).map_err(|e| Error::io(path, e))?;
    let mut pos = 0usize;
    let mut take = |n: usize| -> Result<&[u8]> {
        let out = bytes
            .get(pos..pos + n)
            .ok_or_else(|| bad(format!("truncated at byte {pos}")))?;
        pos += n;
        Ok(out)
    };
    if take(8)? != MAGIC {
        return Err(bad("bad magic".into()));
    }
    let u32_at = |b: &[u8]| u32::from_le_bytes(b.try_into().expect("4 bytes")) as usize;
    let version = u32_at(take(4)?);
    if version != CHECKPOINT_VERSION as usize {
        return Err(bad(format!("unsupported version {version}")));
    }
    let n = u32_at(take(4)?);
    if n != 6 {
        return Err(bad(format!("expected 6 tensors, found {n}")));
    }
    let mut shapes = [(0, 0); 6];
    for s in &mut shapes {
        *s = (u32_at(take(4)?), u32_at(take(4)?));
    }
    let dims = MlpDims {
        input: shapes[0].1,
        hidden: shapes[0].0,
    };
    if dims.shapes() != shapes {
        return Err(bad(format!("inconsistent shape table {shapes:?}")));
    }
    let raw = take(dims.n_params() * 8)?;
    let data: Vec<f64> = raw
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();
    if pos != bytes.len() {
        return Err(bad("trailing bytes".into()));
    }
    MlpParams::from_vec(dims, data).map_err(|e| bad(e.to_string()))
}

pub fn save(path: &Path, p: &MlpParams) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path).map_err(|e| Error::io(path, e))?);
    write_checkpoint(&mut f, p)
        .and_then(|_| f.flush())
        .map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<MlpParams> {
    let mut f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_checkpoint(&mut f, path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_distr::{Distribution, StandardNormal};

    const TOY: MlpDims = MlpDims { input: 2, hidden: 2 };

    fn toy() -> MlpParams {
        // W1 = [[1, -1], [0.5, 2]], b1 = [0, -1]
        // W2 = [[1, 1], [-1, 0.5]], b2 = [0.5, 0]
        // W3 = [[2, -1]], b3 = [-0.5]
        MlpParams::from_vec(
            TOY,
            vec![1.0, -1.0, 0.5, 2.0, 0.0, -1.0, 1.0, 1.0, -1.0, 0.5, 0.5, 0.0, 2.0, -1.0, -0.5],
        )
        .unwrap()
    }

    #[test]
    fn toy_forward_by_hand() {
        // x = (1, 0.5): z1 = (0.5, 0.5) → a1 = (0.5, 0.5)
        // z2 = (1.5, -0.25) → a2 = (1.5, 0); z3 = 3 - 0.5 = 2.5
        let out = mlp_forward(&toy(), &[1.0, 0.5]).unwrap();
        assert!((out - 1.0 / (1.0 + (-2.5f64).exp())).abs() < 1e-15);
        // x = (0, 1): z1 = (-1, 1) → a1 = (0, 1); z2 = (1.5, 0.5); z3 = 3 - 0.5 - 0.5 = 2
        let out = mlp_forward(&toy(), &[0.0, 1.0]).unwrap();
        assert!((out - 1.0 / (1.0 + (-2.0f64).exp())).abs() < 1e-15);
    }

    #[test]
    fn zero_params_give_half() {
        let p = MlpParams::zeros(MlpDims::default());
        let x: Vec<f64> = (0..512).map(|i| (i as f64).sin() * 3.0).collect();
        assert_eq!(mlp_forward(&p, &x).unwrap(), 0.5);
    }

    #[test]
    fn forward_rejects_bad_input() {
        let p = MlpParams::init(TOY, 1);
        assert!(mlp_forward(&p, &[f64::NAN, 0.0]).is_err());
        assert!(mlp_forward(&p, &[0.0]).is_err());
    }

    #[test]
    fn init_outputs_in_unit_interval() {
        let p = MlpParams::init(MlpDims::default(), 3);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..5 {
            let x: Vec<f64> = (0..512).map(|_| StandardNormal.sample(&mut rng)).collect();
            let o = mlp_forward(&p, &x).unwrap();
            assert!(o > 0.0 && o < 1.0 && o.is_finite());
        }
        assert!(p.tensor(1).iter().all(|&b| b == 0.0));
        let bound = (6.0f64 / 512.0).sqrt();
        assert!(p.tensor(0).iter().all(|w| w.abs() <= bound));
    }

    #[test]
    fn grad_zero_at_target() {
        let p = MlpParams::init(TOY, 5);
        let x = [0.3, -0.7];
        let out = mlp_forward(&p, &x).unwrap();
        let g = mlp_grad(&p, &x, out).unwrap();
        assert!(g.as_slice().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn output_bias_grad_closed_form() {
        let p = MlpParams::init(MlpDims { input: 7, hidden: 5 }, 9);
        let x = [0.1, 0.2, -0.3, 0.4, 0.5, -0.6, 0.7];
        let out = mlp_forward(&p, &x).unwrap();
        let g = mlp_grad(&p, &x, 0.2).unwrap();
        assert!((g.tensor(5)[0] - (out - 0.2) * out * (1.0 - out)).abs() < 1e-15);
    }

    #[test]
    fn full_size_grad_matches_finite_differences_on_samples() {
        let p = MlpParams::init(MlpDims::default(), 11);
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let x: Vec<f64> = (0..512).map(|_| StandardNormal.sample(&mut rng)).collect();
        let g = mlp_grad(&p, &x, 0.9).unwrap();
        let n = p.as_slice().len();
        let mut worst: f64 = 0.0;
        for _ in 0..40 {
            let k = rng.random_range(0..n);
            let mut q = p.clone();
            q.as_mut_slice()[k] += 1e-5;
            let up = mlp_loss(&q, &x, 0.9).unwrap();
            q.as_mut_slice()[k] -= 2e-5;
            let down = mlp_loss(&q, &x, 0.9).unwrap();
            let fd = (up - down) / 2e-5;
            let a = g.as_slice()[k];
            worst = worst.max((a - fd).abs() / a.abs().max(fd.abs()).max(1e-6));
        }
        assert!(worst < 1e-4, "{worst}");
    }

    #[test]
    fn sgd_plain_and_idle() {
        let mut p = MlpParams::from_vec(TOY, vec![1.0; 15]).unwrap();
        let g = MlpParams::from_vec(TOY, vec![0.5; 15]).unwrap();
        let mut v = MlpParams::zeros(TOY);
        let cfg = TrainConfig {
            momentum: 0.0,
            weight_decay: 0.0,
            learning_rate: 0.1,
            ..TrainConfig::known_good(0)
        };
        sgd_step(&mut p, &g, &mut v, &cfg);
        assert!(p.as_slice().iter().all(|&w| (w - 0.95).abs() < 1e-15));

        let before = p.clone();
        sgd_step(&mut p, &MlpParams::zeros(TOY), &mut MlpParams::zeros(TOY), &cfg);
        assert_eq!(p, before);
    }

    #[test]
    fn momentum_matches_scalar_recurrence() {
        let (lr, mu, g) = (0.01, 0.9, 2.0);
        let mut p = MlpParams::zeros(TOY);
        let mut v = MlpParams::zeros(TOY);
        let grad = MlpParams::from_vec(TOY, vec![g; 15]).unwrap();
        let cfg = TrainConfig {
            momentum: mu,
            weight_decay: 0.0,
            learning_rate: lr,
            ..TrainConfig::known_good(0)
        };
        let (mut sp, mut sv) = (0.0f64, 0.0f64);
        for _ in 0..2 {
            sgd_step(&mut p, &grad, &mut v, &cfg);
            sv = mu * sv + g;
            sp -= lr * sv;
        }
        assert!((sp + lr * 2.9 * g).abs() < 1e-15);
        assert!(p.as_slice().iter().all(|&w| w == sp));
    }

    #[test]
    fn weight_decay_shrinks_norm() {
        let mut p = MlpParams::init(TOY, 2);
        let mut v = MlpParams::zeros(TOY);
        let zero = MlpParams::zeros(TOY);
        let cfg = TrainConfig::known_good(0);
        let mut norm = p.norm();
        for _ in 0..20 {
            sgd_step(&mut p, &zero, &mut v, &cfg);
            let n = p.norm();
            assert!(n < norm);
            norm = n;
        }
    }

    fn linear_tokens(n: usize, d: usize, seed: u64) -> Dataset {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let w: Vec<f64> = (0..d).map(|_| StandardNormal.sample(&mut rng)).collect();
        let mut rows = Vec::with_capacity(n);
        let mut t = Vec::with_capacity(n);
        for _ in 0..n {
            let x: Vec<f64> = (0..d).map(|_| StandardNormal.sample(&mut rng)).collect();
            let z: f64 = x.iter().zip(&w).map(|(a, b)| a * b).sum::<f64>() / (d as f64).sqrt();
            t.push(sigmoid(z));
            rows.push(x);
        }
        Dataset::from_rows(&rows, t).unwrap()
    }

    #[test]
    fn constant_target_converges() {
        let rows: Vec<Vec<f64>> = (0..200).map(|i| vec![(i as f64 * 0.37).sin(); 8]).collect();
        let data = Dataset::from_rows(&rows, vec![0.7; 200]).unwrap();
        let cfg = TrainConfig {
            epochs: 40,
            batch_size: 16,
            learning_rate: 0.05,
            momentum: 0.9,
            weight_decay: WEIGHT_DECAY,
            seed: 1,
        };
        let fit = train_with_dims(&data, &cfg, MlpDims { input: 8, hidden: 16 }).unwrap();
        let out = predict(&fit.params, data.inputs.view()).unwrap();
        let mean = out.iter().sum::<f64>() / out.len() as f64;
        assert!((mean - 0.7).abs() < 0.02, "{mean}");
    }

    #[test]
    fn training_is_deterministic_and_descends() {
        let data = linear_tokens(400, 16, 4);
        let cfg = TrainConfig {
            epochs: 30,
            batch_size: 32,
            learning_rate: 0.05,
            momentum: 0.8,
            weight_decay: WEIGHT_DECAY,
            seed: 7,
        };
        let dims = MlpDims { input: 16, hidden: 32 };
        let a = train_with_dims(&data, &cfg, dims).unwrap();
        let b = train_with_dims(&data, &cfg, dims).unwrap();
        assert_eq!(a, b);
        for w in a.losses.windows(2) {
            assert!(w[1] <= w[0] * 1.05, "{:?}", a.losses);
        }
        assert!(a.losses.last().unwrap() < &a.losses[0]);
    }

    #[test]
    fn train_rejects_empty_and_out_of_range() {
        let empty = Dataset::new(Array2::zeros((0, 4)), vec![]).unwrap();
        assert!(train_with_dims(&empty, &TrainConfig::known_good(0), MlpDims { input: 4, hidden: 4 }).is_err());
        let data = linear_tokens(20, 4, 0);
        let cfg = TrainConfig {
            epochs: 200,
            ..TrainConfig::known_good(0)
        };
        assert!(train_with_dims(&data, &cfg, MlpDims { input: 4, hidden: 4 }).is_err());
    }

    #[test]
    fn random_search_order_statistics() {
        let data = linear_tokens(120, 8, 2);
        let dims = MlpDims { input: 8, hidden: 8 };
        let cap = |c: TrainConfig| TrainConfig {
            epochs: c.epochs.min(8),
            ..c
        };
        let one = random_search_with(&data, 1, 3, dims, cap).unwrap();
        assert_eq!(one.trials.len(), 1);
        assert_eq!(one.best, one.trials[0].0);

        let many = random_search_with(&data, 7, 3, dims, cap).unwrap();
        let mut losses: Vec<f64> = many.trials.iter().map(|t| t.1).collect();
        losses.sort_by(f64::total_cmp);
        assert!(many.best_val_loss <= losses[losses.len() / 2]);
        for (c, _) in &many.trials {
            c.validate().unwrap();
        }
        let tiny = linear_tokens(4, 8, 0);
        assert!(random_search_with(&tiny, 2, 0, dims, cap).is_err());
    }

    #[test]
    fn checkpoint_round_trip() {
        let p = MlpParams::init(MlpDims { input: 6, hidden: 4 }, 8);
        let mut buf = Vec::new();
        write_checkpoint(&mut buf, &p).unwrap();
        let q = read_checkpoint(&mut buf.as_slice(), Path::new("mem")).unwrap();
        assert_eq!(p, q);
        buf[0] = b'X';
        assert!(read_checkpoint(&mut buf.as_slice(), Path::new("mem")).is_err());
        let mut short = Vec::new();
        write_checkpoint(&mut short, &p).unwrap();
        short.pop();
        assert!(read_checkpoint(&mut short.as_slice(), Path::new("mem")).is_err());
    }
}
