#![allow(dead_code)]

use petkit::param::{Component, Init, ParamId, ParamKind, ParamSpec, ParamStore};
use petkit::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn rand_vec(rng: &mut ChaCha8Rng, n: usize, scale: f64) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-scale..scale)).collect()
}

pub fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), rand_vec(rng, n, scale)).unwrap()
}

/// Waveform `[1, len]` with entries in (-1, 1).
pub fn wave(rng: &mut ChaCha8Rng, len: usize) -> Tensor {
    rand_tensor(rng, &[1, len], 1.0)
}

/// Overwrites every tensor in `ids` with uniform values in `(-scale, scale)`.
pub fn randomize(store: &mut ParamStore, ids: &[ParamId], rng: &mut ChaCha8Rng, scale: f64) {
    for &id in ids {
        for v in store.get_mut(id).data_mut() {
            *v = rng.random_range(-scale..scale);
        }
    }
}

pub fn push_values(store: &mut ParamStore, path: &str, t: Tensor, trainable: bool) -> ParamId {
    let spec = ParamSpec::new(path, t.shape().to_vec(), Component::Head, ParamKind::Weight, Init::Zeros);
    let id = store.push(spec, 0, trainable);
    store.get_mut(id).data_mut().copy_from_slice(t.data());
    id
}

// Reference implementations, written as plain loops.

pub fn conv1d_oracle(x: &Tensor, w: &Tensor, b: Option<&Tensor>, stride: usize) -> Vec<Vec<f64>> {
    let (c_in, l_in) = (x.shape()[0], x.shape()[1]);
    let (c_out, k) = (w.shape()[0], w.shape()[2]);
    let l_out = (l_in - k) / stride + 1;
    let mut out = vec![vec![0.0; l_out]; c_out];
    for c in 0..c_out {
        for t in 0..l_out {
            let mut s = b.map_or(0.0, |b| b.data()[c]);
            for i in 0..c_in {
                for kk in 0..k {
                    s += w.data()[(c * c_in + i) * k + kk] * x.data()[i * l_in + t * stride + kk];
                }
            }
            out[c][t] = s;
        }
    }
    out
}

/// Two-pass mean and variance, then normalize.
pub fn layer_norm_oracle(x: &[f64], gain: &[f64], shift: &[f64], eps: f64) -> Vec<f64> {
    let n = x.len() as f64;
    let mut mean = 0.0;
    for v in x {
        mean += v;
    }
    mean /= n;
    let mut var = 0.0;
    for v in x {
        var += (v - mean) * (v - mean);
    }
    var /= n;
    let denom = (var + eps).sqrt();
    (0..x.len()).map(|i| (x[i] - mean) / denom * gain[i] + shift[i]).collect()
}

pub fn gelu_oracle(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x / std::f64::consts::SQRT_2))
}

/// `x[r, d_in] @ w[d_in, d_out] + b`
pub fn linear_oracle(x: &[Vec<f64>], w: &Tensor, b: &[f64]) -> Vec<Vec<f64>> {
    let (d_in, d_out) = (w.shape()[0], w.shape()[1]);
    let mut out = vec![vec![0.0; d_out]; x.len()];
    for r in 0..x.len() {
        for j in 0..d_out {
            let mut s = b[j];
            for i in 0..d_in {
                s += x[r][i] * w.data()[i * d_out + j];
            }
            out[r][j] = s;
        }
    }
    out
}

pub fn rows(t: &Tensor) -> Vec<Vec<f64>> {
    t.data().chunks(t.last_dim()).map(<[f64]>::to_vec).collect()
}

pub fn max_diff(a: &[Vec<f64>], b: &[Vec<f64>]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter()
        .zip(b)
        .flat_map(|(x, y)| {
            assert_eq!(x.len(), y.len());
            x.iter().zip(y).map(|(p, q)| (p - q).abs())
        })
        .fold(0.0, f64::max)
}
