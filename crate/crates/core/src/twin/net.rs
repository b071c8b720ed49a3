//! The shared subnetwork: forward and backward passes.
//!
//! Activations are kept as `[images * positions, channels]` matrices so that
//! both convolutions are one GEMM over an im2col buffer and batch norm
//! reduces over rows.

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::TwinError;

pub const KERNEL: usize = 3;
pub const POOL: usize = 2;
pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

/// Layer sizes of the subnetwork. Kernel 3x3 with same padding and a 2x2
/// max pool are fixed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArchDescriptor {
    pub input_rows: usize,
    pub input_cols: usize,
    pub conv1_channels: usize,
    pub conv2_channels: usize,
    pub dense_units: usize,
    pub embedding_dim: usize,
}

impl ArchDescriptor {
    /// 32 / 64 / 256 / 64.
    pub const fn reference() -> Self {
        Self {
            input_rows: crate::fingerprint::IMAGE_ROWS,
            input_cols: crate::fingerprint::IMAGE_COLS,
            conv1_channels: 32,
            conv2_channels: 64,
            dense_units: 256,
            embedding_dim: 64,
        }
    }

    /// Narrow variant that trains in minutes on a single core.
    pub const fn compact() -> Self {
        Self {
            input_rows: crate::fingerprint::IMAGE_ROWS,
            input_cols: crate::fingerprint::IMAGE_COLS,
            conv1_channels: 4,
            conv2_channels: 8,
            dense_units: 64,
            embedding_dim: 64,
        }
    }

    pub fn positions(&self) -> usize {
        self.input_rows * self.input_cols
    }

    pub fn pooled_rows(&self) -> usize {
        self.input_rows / POOL
    }

    pub fn pooled_cols(&self) -> usize {
        self.input_cols / POOL
    }

    pub fn flat_len(&self) -> usize {
        self.pooled_rows() * self.pooled_cols() * self.conv2_channels
    }

    pub fn validate(&self) -> Result<(), TwinError> {
        let dims = [
            self.input_rows,
            self.input_cols,
            self.conv1_channels,
            self.conv2_channels,
            self.dense_units,
            self.embedding_dim,
        ];
        if dims.contains(&0) || self.input_rows < POOL || self.input_cols < POOL {
            return Err(TwinError::Architecture(format!("degenerate layer size in {self:?}")));
        }
        Ok(())
    }

    /// Shapes of the trainable tensors, in [`Weights::tensors`] order.
    pub fn tensor_shapes(&self) -> [(usize, usize); 10] {
        let k = KERNEL * KERNEL;
        [
            (k, self.conv1_channels),
            (1, self.conv1_channels),
            (1, self.conv1_channels),
            (k * self.conv1_channels, self.conv2_channels),
            (1, self.conv2_channels),
            (1, self.conv2_channels),
            (self.flat_len(), self.dense_units),
            (1, self.dense_units),
            (self.dense_units, self.embedding_dim),
            (1, self.embedding_dim),
        ]
    }
}

impl Default for ArchDescriptor {
    fn default() -> Self {
        Self::compact()
    }
}

/// Trainable parameters. Convolutions carry no bias since batch norm
/// follows each of them.
#[derive(Debug, Clone, PartialEq)]
pub struct Weights {
    pub conv1: Array2<f64>,
    pub bn1_gamma: Array1<f64>,
    pub bn1_beta: Array1<f64>,
    pub conv2: Array2<f64>,
    pub bn2_gamma: Array1<f64>,
    pub bn2_beta: Array1<f64>,
    pub fc1_w: Array2<f64>,
    pub fc1_b: Array1<f64>,
    pub fc2_w: Array2<f64>,
    pub fc2_b: Array1<f64>,
}

pub const TENSOR_NAMES: [&str; 10] = [
    "conv1", "bn1_gamma", "bn1_beta", "conv2", "bn2_gamma", "bn2_beta", "fc1_w", "fc1_b", "fc2_w", "fc2_b",
];

fn uniform<R: Rng>(rng: &mut R, rows: usize, cols: usize, bound: f64) -> Array2<f64> {
    Array2::from_shape_simple_fn((rows, cols), || rng.random_range(-bound..=bound))
}

impl Weights {
    pub fn zeros(arch: &ArchDescriptor) -> Self {
        let s = arch.tensor_shapes();
        let z2 = |i: usize| Array2::zeros(s[i]);
        let z1 = |i: usize| Array1::zeros(s[i].1);
        Self {
            conv1: z2(0),
            bn1_gamma: z1(1),
            bn1_beta: z1(2),
            conv2: z2(3),
            bn2_gamma: z1(4),
            bn2_beta: z1(5),
            fc1_w: z2(6),
            fc1_b: z1(7),
            fc2_w: z2(8),
            fc2_b: z1(9),
        }
    }

    /// Uniform fan-in init: bound sqrt(6 / fan_in) before a ReLU,
    /// sqrt(3 / fan_in) for the embedding layer. Biases start at zero and
    /// batch norm at the identity.
    pub fn init<R: Rng>(arch: &ArchDescriptor, rng: &mut R) -> Self {
        let mut w = Self::zeros(arch);
        let he = |fan_in: usize| (6.0 / fan_in as f64).sqrt();
        let s = arch.tensor_shapes();
        w.conv1 = uniform(rng, s[0].0, s[0].1, he(s[0].0));
        w.conv2 = uniform(rng, s[3].0, s[3].1, he(s[3].0));
        w.fc1_w = uniform(rng, s[6].0, s[6].1, he(s[6].0));
        w.fc2_w = uniform(rng, s[8].0, s[8].1, (3.0 / s[8].0 as f64).sqrt());
        w.bn1_gamma.fill(1.0);
        w.bn2_gamma.fill(1.0);
        w
    }

    pub fn tensors(&self) -> [&[f64]; 10] {
        [
            self.conv1.as_slice().expect("standard layout"),
            self.bn1_gamma.as_slice().expect("standard layout"),
            self.bn1_beta.as_slice().expect("standard layout"),
            self.conv2.as_slice().expect("standard layout"),
            self.bn2_gamma.as_slice().expect("standard layout"),
            self.bn2_beta.as_slice().expect("standard layout"),
            self.fc1_w.as_slice().expect("standard layout"),
            self.fc1_b.as_slice().expect("standard layout"),
            self.fc2_w.as_slice().expect("standard layout"),
            self.fc2_b.as_slice().expect("standard layout"),
        ]
    }

    pub fn tensors_mut(&mut self) -> [&mut [f64]; 10] {
        [
            self.conv1.as_slice_mut().expect("standard layout"),
            self.bn1_gamma.as_slice_mut().expect("standard layout"),
            self.bn1_beta.as_slice_mut().expect("standard layout"),
            self.conv2.as_slice_mut().expect("standard layout"),
            self.bn2_gamma.as_slice_mut().expect("standard layout"),
            self.bn2_beta.as_slice_mut().expect("standard layout"),
            self.fc1_w.as_slice_mut().expect("standard layout"),
            self.fc1_b.as_slice_mut().expect("standard layout"),
            self.fc2_w.as_slice_mut().expect("standard layout"),
            self.fc2_b.as_slice_mut().expect("standard layout"),
        ]
    }

    pub fn parameter_count(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.iter().all(|v| v.is_finite()))
    }
}

/// Batch-norm running averages used at inference.
#[derive(Debug, Clone, PartialEq)]
pub struct RunningStats {
    pub bn1_mean: Array1<f64>,
    pub bn1_var: Array1<f64>,
    pub bn2_mean: Array1<f64>,
    pub bn2_var: Array1<f64>,
}

impl RunningStats {
    pub fn new(arch: &ArchDescriptor) -> Self {
        Self {
            bn1_mean: Array1::zeros(arch.conv1_channels),
            bn1_var: Array1::ones(arch.conv1_channels),
            bn2_mean: Array1::zeros(arch.conv2_channels),
            bn2_var: Array1::ones(arch.conv2_channels),
        }
    }

    pub fn tensors(&self) -> [&[f64]; 4] {
        [
            self.bn1_mean.as_slice().expect("standard layout"),
            self.bn1_var.as_slice().expect("standard layout"),
            self.bn2_mean.as_slice().expect("standard layout"),
            self.bn2_var.as_slice().expect("standard layout"),
        ]
    }

    pub fn tensors_mut(&mut self) -> [&mut [f64]; 4] {
        [
            self.bn1_mean.as_slice_mut().expect("standard layout"),
            self.bn1_var.as_slice_mut().expect("standard layout"),
            self.bn2_mean.as_slice_mut().expect("standard layout"),
            self.bn2_var.as_slice_mut().expect("standard layout"),
        ]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics; running averages are updated.
    Train,
    /// Running averages.
    Infer,
}

/// 3x3 same-padding patches. `input` is `[n * h * w, c]`, the result is
/// `[n * h * w, 9 * c]` with column order (ky, kx, channel).
fn im2col(input: &[f64], n: usize, h: usize, w: usize, c: usize) -> Array2<f64> {
    let k = KERNEL * KERNEL * c;
    let mut out = vec![0.0; n * h * w * k];
    for b in 0..n {
        for y in 0..h {
            for x in 0..w {
                let row = ((b * h + y) * w + x) * k;
                for ky in 0..KERNEL {
                    let sy = y + ky;
                    if sy < 1 || sy > h {
                        continue;
                    }
                    for kx in 0..KERNEL {
                        let sx = x + kx;
                        if sx < 1 || sx > w {
                            continue;
                        }
                        let src = ((b * h + sy - 1) * w + sx - 1) * c;
                        let dst = row + (ky * KERNEL + kx) * c;
                        out[dst..dst + c].copy_from_slice(&input[src..src + c]);
                    }
                }
            }
        }
    }
    Array2::from_shape_vec((n * h * w, k), out).expect("im2col shape")
}

/// Adjoint of [`im2col`].
fn col2im(cols: &[f64], n: usize, h: usize, w: usize, c: usize) -> Array2<f64> {
    let k = KERNEL * KERNEL * c;
    let mut out = vec![0.0; n * h * w * c];
    for b in 0..n {
        for y in 0..h {
            for x in 0..w {
                let row = ((b * h + y) * w + x) * k;
                for ky in 0..KERNEL {
                    let sy = y + ky;
                    if sy < 1 || sy > h {
                        continue;
                    }
                    for kx in 0..KERNEL {
                        let sx = x + kx;
                        if sx < 1 || sx > w {
                            continue;
                        }
                        let dst = ((b * h + sy - 1) * w + sx - 1) * c;
                        let src = row + (ky * KERNEL + kx) * c;
                        for ch in 0..c {
                            out[dst + ch] += cols[src + ch];
                        }
                    }
                }
            }
        }
    }
    Array2::from_shape_vec((n * h * w, c), out).expect("col2im shape")
}

struct BnCache {
    xhat: Array2<f64>,
    inv_std: Array1<f64>,
}

fn batch_norm(
    x: &Array2<f64>,
    gamma: &Array1<f64>,
    beta: &Array1<f64>,
    running_mean: &mut Array1<f64>,
    running_var: &mut Array1<f64>,
    mode: Mode,
) -> (Array2<f64>, Option<BnCache>) {
    let (mean, var) = match mode {
        Mode::Train => {
            let m = x.nrows() as f64;
            let mean = x.mean_axis(Axis(0)).expect("non-empty batch");
            let centered = x - &mean;
            let var = (&centered * &centered).sum_axis(Axis(0)) / m;
            let unbiased = if m > 1.0 { &var * (m / (m - 1.0)) } else { var.clone() };
            *running_mean = &*running_mean * (1.0 - BN_MOMENTUM) + &mean * BN_MOMENTUM;
            *running_var = &*running_var * (1.0 - BN_MOMENTUM) + &unbiased * BN_MOMENTUM;
            (mean, var)
        }
        Mode::Infer => (running_mean.clone(), running_var.clone()),
    };
    let inv_std = var.mapv(|v| 1.0 / (v + BN_EPS).sqrt());
    let xhat = (x - &mean) * &inv_std;
    let y = &xhat * gamma + beta;
    let cache = (mode == Mode::Train).then_some(BnCache { xhat, inv_std });
    (y, cache)
}

fn batch_norm_backward(
    dy: &Array2<f64>,
    gamma: &Array1<f64>,
    cache: &BnCache,
    dgamma: &mut Array1<f64>,
    dbeta: &mut Array1<f64>,
) -> Array2<f64> {
    let m = dy.nrows() as f64;
    *dgamma = (dy * &cache.xhat).sum_axis(Axis(0));
    *dbeta = dy.sum_axis(Axis(0));
    let dxhat = dy * gamma;
    let sum_dxhat = dxhat.sum_axis(Axis(0));
    let sum_dxhat_xhat = (&dxhat * &cache.xhat).sum_axis(Axis(0));
    let inner = &dxhat * m - &sum_dxhat - &cache.xhat * &sum_dxhat_xhat;
    inner * &(&cache.inv_std / m)
}

fn relu_inplace(x: &mut Array2<f64>) {
    x.mapv_inplace(|v| v.max(0.0));
}

/// Gradient passes where the ReLU output was positive.
fn relu_backward(dy: &mut Array2<f64>, out: &Array2<f64>) {
    ndarray::Zip::from(dy).and(out).for_each(|d, &o| {
        if o <= 0.0 {
            *d = 0.0;
        }
    });
}

/// 2x2 max pool with floor semantics. Returns the pooled matrix and, for
/// each pooled element, the flat index of its source. Ties keep the first.
fn max_pool(x: &[f64], n: usize, h: usize, w: usize, c: usize) -> (Array2<f64>, Vec<usize>) {
    let (ph, pw) = (h / POOL, w / POOL);
    let mut out = vec![0.0; n * ph * pw * c];
    let mut arg = vec![0usize; out.len()];
    for b in 0..n {
        for py in 0..ph {
            for px in 0..pw {
                let o = ((b * ph + py) * pw + px) * c;
                for ch in 0..c {
                    let mut best = f64::NEG_INFINITY;
                    let mut best_i = 0;
                    for dy in 0..POOL {
                        for dx in 0..POOL {
                            let i = ((b * h + py * POOL + dy) * w + px * POOL + dx) * c + ch;
                            if x[i] > best {
                                best = x[i];
                                best_i = i;
                            }
                        }
                    }
                    out[o + ch] = best;
                    arg[o + ch] = best_i;
                }
            }
        }
    }
    (Array2::from_shape_vec((n * ph * pw, c), out).expect("pool shape"), arg)
}

/// Everything the backward pass needs from a training forward pass.
pub(crate) struct Cache {
    n: usize,
    cols1: Array2<f64>,
    bn1: BnCache,
    a1: Array2<f64>,
    cols2: Array2<f64>,
    bn2: BnCache,
    a2: Array2<f64>,
    pool_arg: Vec<usize>,
    flat: Array2<f64>,
    h1: Array2<f64>,
}

impl Cache {
    /// Hash of every ReLU on/off state and max-pool choice. Two weight
    /// settings with equal patterns lie on the same smooth piece of the loss.
    pub(crate) fn pattern(&self) -> u64 {
        let mut h = crate::seed::FNV_OFFSET;
        let mut feed = |v: u64| h = (h ^ v).wrapping_mul(crate::seed::FNV_PRIME);
        for a in [&self.a1, &self.a2, &self.h1] {
            for &v in a.iter() {
                feed(u64::from(v > 0.0));
            }
        }
        for &i in &self.pool_arg {
            feed(i as u64);
        }
        h
    }
}

/// Pixels of `n` images, row-major, already scaled to [0, 1].
pub(crate) fn forward(
    arch: &ArchDescriptor,
    w: &Weights,
    stats: &mut RunningStats,
    input: &[f64],
    mode: Mode,
) -> (Array2<f64>, Option<Cache>) {
    let (h, wd) = (arch.input_rows, arch.input_cols);
    let n = input.len() / arch.positions();
    debug_assert_eq!(n * arch.positions(), input.len());

    let cols1 = im2col(input, n, h, wd, 1);
    let z1 = cols1.dot(&w.conv1);
    let (mut a1, bn1) = batch_norm(&z1, &w.bn1_gamma, &w.bn1_beta, &mut stats.bn1_mean, &mut stats.bn1_var, mode);
    relu_inplace(&mut a1);

    let cols2 = im2col(a1.as_standard_layout().as_slice().expect("standard layout"), n, h, wd, arch.conv1_channels);
    let z2 = cols2.dot(&w.conv2);
    let (mut a2, bn2) = batch_norm(&z2, &w.bn2_gamma, &w.bn2_beta, &mut stats.bn2_mean, &mut stats.bn2_var, mode);
    relu_inplace(&mut a2);

    let (pooled, pool_arg) = max_pool(a2.as_standard_layout().as_slice().expect("standard layout"), n, h, wd, arch.conv2_channels);
    let flat = pooled.into_shape_with_order((n, arch.flat_len())).expect("flatten");
    let mut h1 = flat.dot(&w.fc1_w) + &w.fc1_b;
    relu_inplace(&mut h1);
    let emb = h1.dot(&w.fc2_w) + &w.fc2_b;

    let cache = match mode {
        Mode::Train => Some(Cache {
            n,
            cols1,
            bn1: bn1.expect("train cache"),
            a1,
            cols2,
            bn2: bn2.expect("train cache"),
            a2,
            pool_arg,
            flat,
            h1,
        }),
        Mode::Infer => None,
    };
    (emb, cache)
}

/// Gradients of all weights given the loss gradient w.r.t. the embeddings.
pub(crate) fn backward(arch: &ArchDescriptor, w: &Weights, cache: &Cache, d_emb: ArrayView2<f64>) -> Weights {
    let (h, wd) = (arch.input_rows, arch.input_cols);
    let n = cache.n;
    let mut g = Weights::zeros(arch);

    g.fc2_w = cache.h1.t().dot(&d_emb);
    g.fc2_b = d_emb.sum_axis(Axis(0));
    let mut dh1 = d_emb.dot(&w.fc2_w.t());
    relu_backward(&mut dh1, &cache.h1);
    g.fc1_w = cache.flat.t().dot(&dh1);
    g.fc1_b = dh1.sum_axis(Axis(0));
    let dflat = dh1.dot(&w.fc1_w.t());

    let mut da2 = vec![0.0; n * arch.positions() * arch.conv2_channels];
    for (&src, &d) in cache.pool_arg.iter().zip(dflat.iter()) {
        da2[src] += d;
    }
    let mut da2 = Array2::from_shape_vec((n * arch.positions(), arch.conv2_channels), da2).expect("unpool shape");
    relu_backward(&mut da2, &cache.a2);
    let dz2 = batch_norm_backward(&da2, &w.bn2_gamma, &cache.bn2, &mut g.bn2_gamma, &mut g.bn2_beta);
    g.conv2 = cache.cols2.t().dot(&dz2);
    let dcols2 = dz2.dot(&w.conv2.t());

    let mut da1 = col2im(dcols2.as_standard_layout().as_slice().expect("standard layout"), n, h, wd, arch.conv1_channels);
    relu_backward(&mut da1, &cache.a1);
    let dz1 = batch_norm_backward(&da1, &w.bn1_gamma, &cache.bn1, &mut g.bn1_gamma, &mut g.bn1_beta);
    g.conv1 = cache.cols1.t().dot(&dz1);
    g
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shapes_follow_descriptor() {
        let arch = ArchDescriptor::reference();
        assert_eq!((arch.pooled_rows(), arch.pooled_cols()), (6, 26));
        assert_eq!(arch.flat_len(), 6 * 26 * 64);
        let w = Weights::zeros(&arch);
        for (t, (r, c)) in w.tensors().iter().zip(arch.tensor_shapes()) {
            assert_eq!(t.len(), r * c);
        }
    }

    #[test]
    fn im2col_col2im_are_adjoint() {
        let (n, h, w, c) = (2, 4, 5, 3);
        let x: Vec<f64> = (0..n * h * w * c).map(|i| (i as f64 * 0.37).sin()).collect();
        let y: Vec<f64> = (0..n * h * w * 9 * c).map(|i| (i as f64 * 0.11).cos()).collect();
        let ax = im2col(&x, n, h, w, c);
        let aty = col2im(&y, n, h, w, c);
        let lhs: f64 = ax.iter().zip(&y).map(|(a, b)| a * b).sum();
        let rhs: f64 = aty.iter().zip(&x).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-9);
    }

    #[test]
    fn im2col_center_tap_is_identity() {
        let x: Vec<f64> = (0..12).map(f64::from).collect();
        let cols = im2col(&x, 1, 3, 4, 1);
        assert_eq!(cols.column(4).to_vec(), x);
        assert_eq!(cols[[0, 0]], 0.0);
    }

    #[test]
    fn pool_floor_drops_last_row_and_column() {
        let x: Vec<f64> = (0..15).map(f64::from).collect();
        let (p, arg) = max_pool(&x, 1, 3, 5, 1);
        assert_eq!(p.iter().copied().collect::<Vec<_>>(), vec![6.0, 8.0]);
        assert_eq!(arg, vec![6, 8]);
    }

    #[test]
    fn inference_batch_norm_uses_running_stats() {
        let x = Array2::from_shape_vec((2, 1), vec![1.0, 3.0]).unwrap();
        let g = Array1::from(vec![1.0]);
        let b = Array1::from(vec![0.0]);
        let mut m = Array1::from(vec![0.0]);
        let mut v = Array1::from(vec![1.0]);
        let (y, _) = batch_norm(&x, &g, &b, &mut m, &mut v, Mode::Infer);
        assert!((y[[1, 0]] - 3.0 / (1.0 + BN_EPS).sqrt()).abs() < 1e-12);
        let (_, _) = batch_norm(&x, &g, &b, &mut m, &mut v, Mode::Train);
        assert!((m[0] - 0.2).abs() < 1e-12);
        assert!((v[0] - (0.9 + 0.1 * 2.0)).abs() < 1e-12);
    }
}
