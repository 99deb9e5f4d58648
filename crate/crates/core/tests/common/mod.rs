//! Shared helpers and independent reference implementations for the test suites.
#![allow(dead_code)]

pub mod accounting;
pub mod metric_oracle;

use hrtnet::config::ModelConfig;
use hrtnet::tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    Tensor::from_fn(shape, |_| rng.random_range(lo..hi))
}

/// Smallest config the architecture admits at a 32x32 input.
pub fn tiny_config() -> ModelConfig {
    ModelConfig {
        branch_channels: [4, 4, 8, 8],
        blocks_per_stage: [1, 1, 1, 1],
        attention_heads: 2,
        window_size: 4,
        token_dim: 8,
        triple_it_depth: 1,
        ffn_ratio: 1.0,
        input_hw: [32, 32],
        fusion_heads: 2,
        coa_reduction: 8,
        aux_blocks: 1,
        ..ModelConfig::default()
    }
}

pub fn assert_close(a: &[f64], b: &[f64], tol: f64, what: &str) {
    assert_eq!(a.len(), b.len(), "{what}: length");
    for (i, (x, y)) in a.iter().zip(b).enumerate() {
        assert!((x - y).abs() <= tol, "{what}[{i}]: {x} vs {y} (tol {tol})");
    }
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// Stable summary of a tensor for golden comparisons: sum, sum of squares and
/// a few evenly spaced entries.
pub fn fingerprint(t: &Tensor) -> Vec<f64> {
    let d = t.data();
    let mut out = vec![d.iter().sum::<f64>(), d.iter().map(|v| v * v).sum::<f64>()];
    for k in 0..4 {
        out.push(d[k * (d.len() - 1) / 3.max(1)]);
    }
    out
}

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Direct per-head evaluation of `softmax_c(q_i) . sum_j softmax_t(k)_j v_j^T`
/// on row-major `[n, dim]` matrices for one sample.
pub fn efficient_attention_oracle(q: &[f64], k: &[f64], v: &[f64], nq: usize, nkv: usize, dim: usize, heads: usize) -> Vec<f64> {
    let d = dim / heads;
    let mut out = vec![0.0; nq * dim];
    for h in 0..heads {
        let off = h * d;
        // key softmax over tokens, per channel
        let mut ks = vec![0.0; nkv * d];
        for c in 0..d {
            let mx = (0..nkv).map(|j| k[j * dim + off + c]).fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = (0..nkv).map(|j| (k[j * dim + off + c] - mx).exp()).sum();
            for j in 0..nkv {
                ks[j * d + c] = (k[j * dim + off + c] - mx).exp() / z;
            }
        }
        for i in 0..nq {
            let mx = (0..d).map(|c| q[i * dim + off + c]).fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = (0..d).map(|c| (q[i * dim + off + c] - mx).exp()).sum();
            let qs: Vec<f64> = (0..d).map(|c| (q[i * dim + off + c] - mx).exp() / z).collect();
            for e in 0..d {
                let mut acc = 0.0;
                for c in 0..d {
                    for j in 0..nkv {
                        acc += qs[c] * ks[j * d + c] * v[j * dim + off + e];
                    }
                }
                out[i * dim + off + e] = acc;
            }
        }
    }
    out
}

/// Standard scaled dot-product multi-head attention of `[l, c]` tokens with a
/// fused `[c, 3c]` qkv weight, `[c, c]` output weight (biases included).
pub fn dense_attention_oracle(
    x: &[f64],
    l: usize,
    c: usize,
    heads: usize,
    wqkv: &[f64],
    bqkv: &[f64],
    wo: &[f64],
    bo: &[f64],
) -> Vec<f64> {
    let d = c / heads;
    let mut qkv = vec![0.0; l * 3 * c];
    for t in 0..l {
        for o in 0..3 * c {
            let mut acc = bqkv[o];
            for i in 0..c {
                acc += x[t * c + i] * wqkv[i * 3 * c + o];
            }
            qkv[t * 3 * c + o] = acc;
        }
    }
    let mut merged = vec![0.0; l * c];
    for h in 0..heads {
        for t in 0..l {
            let logits: Vec<f64> = (0..l)
                .map(|s| (0..d).map(|e| qkv[t * 3 * c + h * d + e] * qkv[s * 3 * c + c + h * d + e]).sum::<f64>() / (d as f64).sqrt())
                .collect();
            let mx = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = logits.iter().map(|a| (a - mx).exp()).sum();
            for e in 0..d {
                merged[t * c + h * d + e] = (0..l)
                    .map(|s| (logits[s] - mx).exp() / z * qkv[s * 3 * c + 2 * c + h * d + e])
                    .sum();
            }
        }
    }
    let mut out = vec![0.0; l * c];
    for t in 0..l {
        for o in 0..c {
            out[t * c + o] = bo[o] + (0..c).map(|i| merged[t * c + i] * wo[i * c + o]).sum::<f64>();
        }
    }
    out
}

/// Layer norm of each row of `[rows, d]`, unit scale and zero shift.
pub fn layer_norm_oracle(x: &[f64], d: usize) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    for (r, row) in x.chunks(d).enumerate() {
        let m = row.iter().sum::<f64>() / d as f64;
        let v = row.iter().map(|a| (a - m) * (a - m)).sum::<f64>() / d as f64;
        for (i, a) in row.iter().enumerate() {
            out[r * d + i] = (a - m) / (v + hrtnet::tensor::NORM_EPS).sqrt();
        }
    }
    out
}

/// A 16x16-style random pair: uniform or blob-shaped prediction, truth made of
/// one to three rectangles, sometimes with salt noise.
pub fn random_map_pair(rng: &mut ChaCha8Rng, h: usize, w: usize) -> (Vec<f64>, Vec<bool>) {
    let mut gt = vec![false; h * w];
    for _ in 0..rng.random_range(1..=3) {
        let (y0, x0) = (rng.random_range(0..h), rng.random_range(0..w));
        let (y1, x1) = (rng.random_range(y0..h) + 1, rng.random_range(x0..w) + 1);
        for y in y0..y1 {
            for x in x0..x1 {
                gt[y * w + x] = true;
            }
        }
    }
    if rng.random_bool(0.3) {
        for g in gt.iter_mut() {
            if rng.random_bool(0.05) {
                *g = !*g;
            }
        }
    }
    let pred = match rng.random_range(0..3) {
        0 => (0..h * w).map(|_| rng.random_range(0.0..1.0)).collect(),
        1 => gt
            .iter()
            .map(|&g| (if g { 0.7 } else { 0.2 } + rng.random_range(-0.2..0.3f64)).clamp(0.0, 1.0))
            .collect(),
        // quantized levels to exercise ties at thresholds
        _ => (0..h * w).map(|_| rng.random_range(0..=255u32) as f64 / 255.0).collect(),
    };
    (pred, gt)
}

/// Carries a model-level result into the tensor crate's error type, for closures
/// handed to the gradient checker.
pub fn lift<T>(r: hrtnet::Result<T>) -> hrtnet::tensor::Result<T> {
    r.map_err(|e| match e {
        hrtnet::Error::Tensor(t) => t,
        other => hrtnet::tensor::TensorError::Precondition {
            op: "model",
            msg: other.to_string(),
        },
    })
}

/// Reduces `y` with a fixed random weighting so every output element matters.
pub fn weighted_sum(t: &mut hrtnet::tensor::Tape, y: hrtnet::tensor::Var, seed: u64) -> hrtnet::tensor::Result<hrtnet::tensor::Var> {
    let shape = t.shape(y).to_vec();
    let r = t.constant(uniform(&mut rng(seed), &shape, -1.0, 1.0));
    let p = t.mul(y, r)?;
    t.sum(p)
}

/// Fresh parameter store filled by `build`.
pub fn build<T>(seed: u64, build: impl FnOnce(&mut hrtnet::params::Builder) -> T) -> (hrtnet::params::ParamStore, T) {
    let mut store = hrtnet::params::ParamStore::new();
    let mut r = rng(seed);
    let m = {
        let mut b = hrtnet::params::Builder::new(&mut store, &mut r);
        build(&mut b)
    };
    (store, m)
}

/// Runs `f` on a fresh tape without gradient tracking and returns the value.
pub fn eval(
    store: &hrtnet::params::ParamStore,
    f: impl FnOnce(&mut hrtnet::params::Ctx) -> hrtnet::Result<hrtnet::tensor::Var>,
) -> Tensor {
    let mut tape = hrtnet::tensor::Tape::new();
    let mut cx = hrtnet::params::Ctx::new(&mut tape, store, false);
    let y = f(&mut cx).unwrap();
    tape.value(y).clone()
}

/// Tanh-approximated GELU, written out.
pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + ((2.0 / std::f64::consts::PI).sqrt() * (x + 0.044715 * x.powi(3))).tanh())
}

/// `x [rows, din] . w [din, dout] + b`.
pub fn affine_oracle(x: &[f64], din: usize, w: &[f64], b: &[f64]) -> Vec<f64> {
    let dout = b.len();
    let mut out = vec![0.0; x.len() / din * dout];
    for (r, row) in x.chunks(din).enumerate() {
        for o in 0..dout {
            out[r * dout + o] = b[o] + (0..din).map(|i| row[i] * w[i * dout + o]).sum::<f64>();
        }
    }
    out
}
