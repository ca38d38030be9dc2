mod common;

use common::*;
use petkit::backbone::{multi_head_self_attention, AttentionIds};
use petkit::gradcheck::{grad_check_graph, DEFAULT_EPS};
use petkit::param::ParamStore;
use petkit::{Graph, NodeId, PetError, Precision, Tensor};

const OP_TOL: f64 = 1e-6;

#[test]
fn conv1d_matches_sliding_dot_product() {
    let mut r = rng(1);
    let x = rand_tensor(&mut r, &[3, 7], 1.0);
    let w = rand_tensor(&mut r, &[2, 3, 2], 1.0);
    let mut g = Graph::new(Precision::F64);
    let (xn, wn) = (g.constant(x.clone()), g.constant(w.clone()));
    let y = g.conv1d(xn, wn, None, 1).unwrap();
    assert_eq!(g.shape(y), &[2, 6]);
    assert!(max_diff(&rows(g.value(y)), &conv1d_oracle(&x, &w, None, 1)) < 1e-12);
}

#[test]
fn strided_conv1d_with_bias_matches_oracle() {
    let mut r = rng(2);
    let x = rand_tensor(&mut r, &[2, 23], 1.0);
    let w = rand_tensor(&mut r, &[4, 2, 5], 1.0);
    let b = rand_tensor(&mut r, &[4], 1.0);
    let mut g = Graph::new(Precision::F64);
    let (xn, wn, bn) = (g.constant(x.clone()), g.constant(w.clone()), g.constant(b.clone()));
    let y = g.conv1d(xn, wn, Some(bn), 3).unwrap();
    assert_eq!(g.shape(y), &[4, 7]);
    assert!(max_diff(&rows(g.value(y)), &conv1d_oracle(&x, &w, Some(&b), 3)) < 1e-12);
}

#[test]
fn layer_norm_matches_two_pass() {
    let mut r = rng(3);
    let x = rand_vec(&mut r, 4, 3.0);
    let gain = rand_vec(&mut r, 4, 2.0);
    let shift = rand_vec(&mut r, 4, 2.0);
    let mut g = Graph::new(Precision::F64);
    let xn = g.constant(Tensor::vector(x.clone()));
    let gn = g.constant(Tensor::vector(gain.clone()));
    let sn = g.constant(Tensor::vector(shift.clone()));
    let y = g.layer_norm(xn, gn, sn, 1e-5).unwrap();
    let want = layer_norm_oracle(&x, &gain, &shift, 1e-5);
    for (a, b) in g.value(y).data().iter().zip(&want) {
        assert!((a - b).abs() < 1e-12);
    }
}

#[test]
fn layer_norm_gain_mismatch_is_dimension_error() {
    let mut g = Graph::new(Precision::F64);
    let x = g.constant(Tensor::vector(vec![1.0, 2.0, 3.0]));
    let gain = g.constant(Tensor::vector(vec![1.0, 1.0]));
    let shift = g.constant(Tensor::vector(vec![0.0, 0.0]));
    assert!(matches!(g.layer_norm(x, gain, shift, 1e-5), Err(PetError::Dimension { .. })));
}

#[test]
fn gelu_matches_erf_form() {
    let mut g = Graph::new(Precision::F64);
    let xs: Vec<f64> = (-40..=40).map(|i| i as f64 / 8.0).collect();
    let x = g.constant(Tensor::vector(xs.clone()));
    let y = g.gelu(x).unwrap();
    for (v, x) in g.value(y).data().iter().zip(&xs) {
        assert!((v - gelu_oracle(*x)).abs() < 1e-15);
    }
    assert!((gelu_oracle(10.0) - 10.0).abs() < 1e-6);
    assert!(gelu_oracle(-10.0).abs() < 1e-6);
}

#[test]
fn linear_matches_triple_loop() {
    let mut r = rng(4);
    let x = rand_tensor(&mut r, &[5, 3], 1.0);
    let w = rand_tensor(&mut r, &[3, 4], 1.0);
    let b = rand_vec(&mut r, 4, 1.0);
    let mut g = Graph::new(Precision::F64);
    let (xn, wn, bn) = (g.constant(x.clone()), g.constant(w.clone()), g.constant(Tensor::vector(b.clone())));
    let y = g.linear(xn, wn, Some(bn)).unwrap();
    assert!(max_diff(&rows(g.value(y)), &linear_oracle(&rows(&x), &w, &b)) < 1e-12);
}

fn attention_store(r: &mut rand_chacha::ChaCha8Rng, h: usize, scale: f64) -> (ParamStore, AttentionIds) {
    let mut s = ParamStore::new();
    let mut pair = |s: &mut ParamStore, name: &str| {
        let w = push_values(s, &format!("{name}.w"), rand_tensor(r, &[h, h], scale), false);
        let b = push_values(s, &format!("{name}.b"), rand_tensor(r, &[h], scale), false);
        (w, b)
    };
    let ids = AttentionIds {
        q: pair(&mut s, "q"),
        k: pair(&mut s, "k"),
        v: pair(&mut s, "v"),
        o: pair(&mut s, "o"),
    };
    (s, ids)
}

fn project(store: &ParamStore, ids: (petkit::ParamId, petkit::ParamId), x: &[Vec<f64>]) -> Vec<Vec<f64>> {
    linear_oracle(x, store.get(ids.0), store.get(ids.1).data())
}

/// Single-head attention written out with loops.
fn attention_oracle(store: &ParamStore, ids: &AttentionIds, x: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let (q, k, v) = (project(store, ids.q, x), project(store, ids.k, x), project(store, ids.v, x));
    let t = x.len();
    let d = x[0].len();
    let mut ctx = vec![vec![0.0; d]; t];
    for i in 0..t {
        let mut scores = vec![0.0; t];
        for j in 0..t {
            for c in 0..d {
                scores[j] += q[i][c] * k[j][c];
            }
            scores[j] /= (d as f64).sqrt();
        }
        let m = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = scores.iter().map(|s| (s - m).exp()).sum();
        for j in 0..t {
            let a = (scores[j] - m).exp() / z;
            for c in 0..d {
                ctx[i][c] += a * v[j][c];
            }
        }
    }
    project(store, ids.o, &ctx)
}

#[test]
fn attention_matches_hand_loops() {
    let mut r = rng(5);
    let (store, ids) = attention_store(&mut r, 4, 1.0);
    let x = rand_tensor(&mut r, &[3, 4], 1.0);
    let mut g = Graph::new(Precision::F64);
    let xn = g.constant(x.clone());
    let y = multi_head_self_attention(&mut g, &store, xn, &ids, 1).unwrap();
    assert!(max_diff(&rows(g.value(y)), &attention_oracle(&store, &ids, &rows(&x))) < 1e-12);
}

#[test]
fn single_frame_attention_is_projection_chain() {
    let mut r = rng(6);
    let (store, ids) = attention_store(&mut r, 8, 1.0);
    let x = rand_tensor(&mut r, &[1, 8], 1.0);
    let mut g = Graph::new(Precision::F64);
    let xn = g.constant(x.clone());
    let y = multi_head_self_attention(&mut g, &store, xn, &ids, 2).unwrap();
    let v = project(&store, ids.v, &rows(&x));
    let want = project(&store, ids.o, &v);
    assert!(max_diff(&rows(g.value(y)), &want) < 1e-12);
}

#[test]
fn zero_attention_projections_give_zero() {
    let mut r = rng(7);
    let (store, ids) = attention_store(&mut r, 4, 1.0);
    let mut zero = store.clone();
    for (_, p) in zero.iter_mut() {
        p.tensor.data_mut().iter_mut().for_each(|v| *v = 0.0);
    }
    let x = rand_tensor(&mut r, &[3, 4], 1.0);
    let mut g = Graph::new(Precision::F64);
    let xn = g.constant(x);
    let y = multi_head_self_attention(&mut g, &zero, xn, &ids, 2).unwrap();
    assert_eq!(g.value(y).max_abs(), 0.0);
}

#[test]
fn attention_head_divisibility() {
    let mut r = rng(8);
    let (store, ids) = attention_store(&mut r, 4, 1.0);
    let mut g = Graph::new(Precision::F64);
    let xn = g.constant(rand_tensor(&mut r, &[2, 4], 1.0));
    assert!(matches!(
        multi_head_self_attention(&mut g, &store, xn, &ids, 3),
        Err(PetError::Config(_))
    ));
}

#[test]
fn cross_entropy_gradient_matches_finite_differences() {
    let mut r = rng(9);
    for label in 0..5 {
        let mut ps = vec![rand_tensor(&mut r, &[5], 3.0).with_trainable(true)];
        let rep = grad_check_graph(&mut ps, DEFAULT_EPS, |g, l| g.cross_entropy(l[0], label)).unwrap();
        assert!(rep.passes(OP_TOL), "{rep:?}");
    }
}

#[test]
fn cross_entropy_gradient_is_softmax_minus_onehot() {
    let logits = vec![0.3, -1.2, 2.0, 0.0];
    let mut g = Graph::new(Precision::F64);
    let l = g.input(Tensor::vector(logits.clone()), true);
    let loss = g.cross_entropy(l, 2).unwrap();
    let grads = g.backward(loss).unwrap();
    let z: f64 = logits.iter().map(|v| v.exp()).sum();
    for (i, gi) in grads.wrt(l).unwrap().iter().enumerate() {
        let want = logits[i].exp() / z - if i == 2 { 1.0 } else { 0.0 };
        assert!((gi - want).abs() < 1e-12);
    }
}

/// Reduces any node to a scalar through a fixed random weighting, so that
/// every output entry carries a distinct upstream gradient.
fn probe(g: &mut Graph<'_>, out: NodeId, seed: u64) -> petkit::Result<NodeId> {
    let shape = g.shape(out).to_vec();
    let w = rand_tensor(&mut rng(seed), &shape, 1.0);
    let wn = g.constant(w);
    let m = g.mul(out, wn)?;
    g.sum(m)
}

fn check(params: Vec<Tensor>, build: impl for<'g> Fn(&mut Graph<'g>, &[NodeId]) -> petkit::Result<NodeId>) {
    let mut ps: Vec<Tensor> = params.into_iter().map(|t| t.with_trainable(true)).collect();
    let rep = grad_check_graph(&mut ps, DEFAULT_EPS, |g, l| {
        let out = build(g, l)?;
        probe(g, out, 99)
    })
    .unwrap();
    assert!(rep.entries_checked > 0);
    assert!(rep.passes(OP_TOL), "{rep:?}");
}

#[test]
fn gradcheck_conv1d() {
    let mut r = rng(10);
    check(
        vec![rand_tensor(&mut r, &[2, 9], 1.0), rand_tensor(&mut r, &[3, 2, 3], 1.0), rand_tensor(&mut r, &[3], 1.0)],
        |g, l| g.conv1d(l[0], l[1], Some(l[2]), 2),
    );
}

#[test]
fn gradcheck_linear_and_matmul() {
    let mut r = rng(11);
    check(
        vec![rand_tensor(&mut r, &[3, 4], 1.0), rand_tensor(&mut r, &[4, 2], 1.0), rand_tensor(&mut r, &[2], 1.0)],
        |g, l| g.linear(l[0], l[1], Some(l[2])),
    );
    check(vec![rand_tensor(&mut r, &[3, 4], 1.0), rand_tensor(&mut r, &[4, 2], 1.0)], |g, l| g.matmul(l[0], l[1]));
}

#[test]
fn gradcheck_layer_norm() {
    let mut r = rng(12);
    check(
        vec![rand_tensor(&mut r, &[3, 5], 2.0), rand_tensor(&mut r, &[5], 1.0), rand_tensor(&mut r, &[5], 1.0)],
        |g, l| g.layer_norm(l[0], l[1], l[2], 1e-5),
    );
}

#[test]
fn gradcheck_elementwise() {
    let mut r = rng(13);
    check(vec![rand_tensor(&mut r, &[2, 6], 3.0)], |g, l| g.gelu(l[0]));
    check(vec![rand_tensor(&mut r, &[2, 3], 1.0), rand_tensor(&mut r, &[2, 3], 1.0)], |g, l| g.add(l[0], l[1]));
    check(vec![rand_tensor(&mut r, &[2, 3], 1.0), rand_tensor(&mut r, &[2, 3], 1.0)], |g, l| g.mul(l[0], l[1]));
    check(vec![rand_tensor(&mut r, &[4], 1.0)], |g, l| g.scale(l[0], -2.5));
}

#[test]
fn gradcheck_softmax_and_combine() {
    let mut r = rng(14);
    check(vec![rand_tensor(&mut r, &[3, 4], 2.0)], |g, l| g.softmax(l[0]));
    check(
        vec![rand_tensor(&mut r, &[3], 1.0), rand_tensor(&mut r, &[2, 2], 1.0), rand_tensor(&mut r, &[2, 2], 1.0), rand_tensor(&mut r, &[2, 2], 1.0)],
        |g, l| g.combine(l[0], &l[1..]),
    );
}

#[test]
fn gradcheck_shape_ops() {
    let mut r = rng(15);
    check(vec![rand_tensor(&mut r, &[3, 4], 1.0)], |g, l| g.transpose(l[0]));
    check(vec![rand_tensor(&mut r, &[3, 6], 1.0)], |g, l| g.slice_cols(l[0], 2, 3));
    check(vec![rand_tensor(&mut r, &[2, 2], 1.0), rand_tensor(&mut r, &[2, 3], 1.0)], |g, l| g.concat_cols(l));
    check(vec![rand_tensor(&mut r, &[2, 5], 1.0)], |g, l| g.tile_rows(l[0], 3));
    check(vec![rand_tensor(&mut r, &[4, 3], 1.0)], |g, l| g.mean_rows(l[0]));
}

#[test]
fn gradcheck_cross_entropy_after_linear() {
    let mut r = rng(16);
    let mut ps = vec![
        rand_tensor(&mut r, &[6], 1.0).with_trainable(true),
        rand_tensor(&mut r, &[6, 4], 1.0).with_trainable(true),
        rand_tensor(&mut r, &[4], 1.0).with_trainable(true),
    ];
    let rep = grad_check_graph(&mut ps, DEFAULT_EPS, |g, l| {
        let z = g.linear(l[0], l[1], Some(l[2]))?;
        g.cross_entropy(z, 1)
    })
    .unwrap();
    assert!(rep.passes(OP_TOL), "{rep:?}");
}

#[test]
fn identical_graphs_are_bit_identical() {
    let mut r = rng(17);
    let x = rand_tensor(&mut r, &[2, 30], 1.0);
    let w = rand_tensor(&mut r, &[3, 2, 4], 1.0);
    let run = || {
        let mut g = Graph::new(Precision::F64);
        let (xn, wn) = (g.constant(x.clone()), g.constant(w.clone()));
        let y = g.conv1d(xn, wn, None, 2).unwrap();
        let y = g.gelu(y).unwrap();
        g.value(y).clone()
    };
    assert_eq!(run(), run());
}
