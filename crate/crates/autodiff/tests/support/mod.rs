//! Per-op gradient-check instances shared by the op tests and the
//! workspace acceptance suite.
#![allow(dead_code)]

use std::sync::Arc;

use autodiff::{Graph, NodeId, Result, SparseMap, Tensor};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub type Build = Box<dyn Fn(&mut Graph, &[NodeId]) -> Result<NodeId>>;

pub struct Case {
    pub point: Vec<(String, Tensor)>,
    pub f: Build,
}

pub fn uniform(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Tensor {
    Tensor::from_fn(r, c, |_, _| rng.random_range(-1.0..1.0))
}

/// Entries bounded away from zero so kinked ops stay differentiable under
/// the finite-difference step.
pub fn away_from_zero(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Tensor {
    Tensor::from_fn(r, c, |_, _| {
        let m = rng.random_range(0.1..1.0);
        if rng.random_bool(0.5) {
            m
        } else {
            -m
        }
    })
}

/// Reduces any node to a scalar through fixed, non-trivial weights.
pub fn project(g: &mut Graph, x: NodeId) -> Result<NodeId> {
    let [r, c] = g.value(x).shape();
    let w = g.constant(Tensor::from_fn(r, c, |i, j| {
        (1.3 * i as f64 + 0.7 * j as f64 + 0.1).sin() + 0.2
    }));
    let p = g.mul(x, w)?;
    g.sum_all(p)
}

pub fn pt(names_values: Vec<(&str, Tensor)>) -> Vec<(String, Tensor)> {
    names_values
        .into_iter()
        .map(|(n, t)| (n.to_string(), t))
        .collect()
}

pub fn unary(t: Tensor, op: impl Fn(&mut Graph, NodeId) -> Result<NodeId> + 'static) -> Case {
    Case {
        point: pt(vec![("a", t)]),
        f: Box::new(move |g, p| {
            let y = op(g, p[0])?;
            project(g, y)
        }),
    }
}

pub fn binary(
    a: Tensor,
    b: Tensor,
    op: impl Fn(&mut Graph, NodeId, NodeId) -> Result<NodeId> + 'static,
) -> Case {
    Case {
        point: pt(vec![("a", a), ("b", b)]),
        f: Box::new(move |g, p| {
            let y = op(g, p[0], p[1])?;
            project(g, y)
        }),
    }
}

pub fn op_cases() -> Vec<(&'static str, fn(&mut ChaCha8Rng) -> Case)> {
    vec![
        ("matmul", |r| binary(uniform(r, 3, 4), uniform(r, 4, 2), |g, a, b| g.matmul(a, b))),
        ("matmul_ta", |r| {
            binary(uniform(r, 4, 3), uniform(r, 4, 2), |g, a, b| g.matmul_t(a, true, b, false))
        }),
        ("matmul_tb", |r| {
            binary(uniform(r, 3, 4), uniform(r, 2, 4), |g, a, b| g.matmul_t(a, false, b, true))
        }),
        ("matmul_tab", |r| {
            binary(uniform(r, 4, 3), uniform(r, 2, 4), |g, a, b| g.matmul_t(a, true, b, true))
        }),
        ("add", |r| binary(uniform(r, 3, 4), uniform(r, 3, 4), |g, a, b| g.add(a, b))),
        ("add_row", |r| binary(uniform(r, 3, 4), uniform(r, 1, 4), |g, a, b| g.add(a, b))),
        ("sub", |r| binary(uniform(r, 3, 4), uniform(r, 3, 4), |g, a, b| g.sub(a, b))),
        ("sub_row", |r| binary(uniform(r, 3, 4), uniform(r, 1, 4), |g, a, b| g.sub(a, b))),
        ("mul", |r| binary(uniform(r, 3, 4), uniform(r, 3, 4), |g, a, b| g.mul(a, b))),
        ("scale", |r| unary(uniform(r, 3, 4), |g, a| g.scale(a, -1.7))),
        ("abs", |r| unary(away_from_zero(r, 3, 4), |g, a| g.abs(a))),
        ("relu", |r| unary(away_from_zero(r, 3, 4), |g, a| g.relu(a))),
        ("leaky_relu", |r| unary(away_from_zero(r, 3, 4), |g, a| g.leaky_relu(a, 0.01))),
        ("tanh", |r| unary(uniform(r, 3, 4), |g, a| g.tanh(a))),
        ("sigmoid", |r| unary(uniform(r, 3, 4), |g, a| g.sigmoid(a))),
        ("exp", |r| unary(uniform(r, 3, 4), |g, a| g.exp(a))),
        ("recip", |r| {
            let t = away_from_zero(r, 3, 4).map(|v| v + v.signum());
            unary(t, |g, a| g.recip(a))
        }),
        ("masked_softmax", |r| {
            let mut mask: Vec<bool> = (0..20).map(|_| r.random_bool(0.6)).collect();
            for i in 0..4 {
                mask[i * 5 + i] = true;
            }
            let mask: Arc<[bool]> = mask.into();
            unary(uniform(r, 4, 5), move |g, a| g.masked_softmax(a, mask.clone()))
        }),
        ("concat_rows", |r| {
            binary(uniform(r, 2, 3), uniform(r, 4, 3), |g, a, b| g.concat_rows(a, b))
        }),
        ("concat_cols", |r| {
            binary(uniform(r, 3, 2), uniform(r, 3, 4), |g, a, b| g.concat_cols(a, b))
        }),
        ("slice_rows", |r| unary(uniform(r, 5, 3), |g, a| g.slice_rows(a, 1, 3))),
        ("slice_cols", |r| unary(uniform(r, 3, 5), |g, a| g.slice_cols(a, 2, 2))),
        ("pad_rows", |r| unary(uniform(r, 2, 3), |g, a| g.pad_rows(a, 1, 5))),
        ("pad_cols", |r| unary(uniform(r, 3, 2), |g, a| g.pad_cols(a, 2, 6))),
        ("transpose", |r| unary(uniform(r, 3, 4), |g, a| g.transpose(a))),
        ("pairwise_dist", |r| unary(uniform(r, 5, 3), |g, a| g.pairwise_dist(a))),
        ("frob_norm", |r| unary(uniform(r, 3, 4), |g, a| g.frob_norm(a))),
        ("gather_rows", |r| {
            let idx: Arc<[usize]> = vec![2, 0, 2, 3].into();
            unary(uniform(r, 4, 3), move |g, a| g.gather_rows(a, idx.clone()))
        }),
        ("scatter_rows", |r| {
            let idx: Arc<[usize]> = vec![4, 1, 4].into();
            unary(uniform(r, 3, 2), move |g, a| g.scatter_rows(a, idx.clone(), 5))
        }),
        ("sparse_map", |r| {
            let map = SparseMap::scatter_cells(&[(0, 1), (2, 0), (0, 1), (1, 2)], [3, 3]).unwrap();
            unary(uniform(r, 4, 1), move |g, a| g.sparse_map(a, map.clone()))
        }),
        ("row_max", |r| unary(uniform(r, 4, 5), |g, a| g.row_max(a))),
        ("sum_rows", |r| unary(uniform(r, 3, 4), |g, a| g.sum_rows(a))),
        ("broadcast_rows", |r| unary(uniform(r, 1, 4), |g, a| g.broadcast_rows(a, 3))),
        ("sum_cols", |r| unary(uniform(r, 3, 4), |g, a| g.sum_cols(a))),
        ("broadcast_cols", |r| unary(uniform(r, 3, 1), |g, a| g.broadcast_cols(a, 4))),
        ("sum_all", |r| unary(uniform(r, 3, 4), |g, a| g.sum_all(a))),
        ("broadcast_scalar", |r| unary(uniform(r, 1, 1), |g, a| g.broadcast_scalar(a, [2, 3]))),
    ]
}
