//! Oracles shared by the integration tests. Everything here is written
//! against plain `f64` slices so it does not lean on the code under test.
#![allow(dead_code)]

pub mod grad_suite;

use seqpool::tensorcore::{Graph, NodeId, RngStream, Tensor};

pub const FD_EPS: f64 = 1e-6;
pub const GRAD_TOL: f64 = 1e-4;

pub fn random_tensor(shape: &[usize], rng: &mut RngStream) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.uniform_range(-1.0, 1.0)).collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

/// `||a - n|| / max(||a||, ||n||)`, or the plain difference norm when both
/// gradients vanish.
pub fn rel_err(analytic: &[f64], numeric: &[f64]) -> f64 {
    let diff = analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n) * (a - n))
        .sum::<f64>()
        .sqrt();
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let scale = norm(analytic).max(norm(numeric));
    if scale < 1e-12 {
        diff
    } else {
        diff / scale
    }
}

/// Worst relative error between reverse-mode gradients and central
/// differences over every block of `params`. `build` must return a scalar
/// node and behave identically on every call.
pub fn gradient_check(params: &[Tensor], build: impl Fn(&mut Graph, &[NodeId]) -> NodeId) -> f64 {
    let eval = |ps: &[Tensor]| {
        let mut g = Graph::new();
        let ids: Vec<NodeId> = ps.iter().map(|p| g.leaf(p.clone())).collect();
        let root = build(&mut g, &ids);
        g.value(root).item()
    };
    let mut g = Graph::new();
    let ids: Vec<NodeId> = params.iter().map(|p| g.leaf(p.clone())).collect();
    let root = build(&mut g, &ids);
    g.backward(root).unwrap();
    let mut worst = 0.0_f64;
    for (k, id) in ids.iter().enumerate() {
        let analytic = g.grad_or_zeros(*id).into_data();
        let numeric = central_difference(params, k, &eval);
        worst = worst.max(rel_err(&analytic, &numeric));
    }
    worst
}

pub fn central_difference(params: &[Tensor], which: usize, f: impl Fn(&[Tensor]) -> f64) -> Vec<f64> {
    let mut work = params.to_vec();
    (0..params[which].len())
        .map(|i| {
            let orig = params[which].data()[i];
            work[which].data_mut()[i] = orig + FD_EPS;
            let up = f(&work);
            work[which].data_mut()[i] = orig - FD_EPS;
            let down = f(&work);
            work[which].data_mut()[i] = orig;
            (up - down) / (2.0 * FD_EPS)
        })
        .collect()
}

/// Scalar `sum_i c_i x_i` with fixed random weights, so every output entry
/// reaches the gradient with a distinct weight.
pub fn project(g: &mut Graph, x: NodeId, coeffs: &Tensor) -> NodeId {
    let n = g.value(x).len();
    let flat = g.reshape(x, &[n]).unwrap();
    let w = g.leaf(coeffs.reshaped(&[1, n]).unwrap());
    let y = g.affine(flat, w, None).unwrap();
    g.reshape(y, &[]).unwrap()
}

pub fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Exhaustive CMC: probe `i` has rank `1 + #{j : d_j < d_true}` plus the
/// gallery items tied with the true match at a lower index.
pub fn brute_force_cmc(probes: &[Vec<f64>], gallery: &[Vec<f64>], truth: &[usize]) -> Vec<f64> {
    let g = gallery.len();
    let mut hits = vec![0usize; g];
    for (i, p) in probes.iter().enumerate() {
        let d: Vec<f64> = gallery.iter().map(|x| dist(p, x)).collect();
        let t = truth[i];
        let rank = 1 + (0..g)
            .filter(|&j| d[j] < d[t] || (d[j] == d[t] && j < t))
            .count();
        for slot in hits.iter_mut().skip(rank - 1) {
            *slot += 1;
        }
    }
    hits.iter().map(|&h| h as f64 / probes.len() as f64).collect()
}

pub fn matvec(w: &Tensor, x: &[f64]) -> Vec<f64> {
    let cols = w.shape()[1];
    w.data().chunks(cols).map(|row| row.iter().zip(x).map(|(a, b)| a * b).sum()).collect()
}

/// `(1/T) W_s tanh(W_i f_T + b_i)`, the gap between feed-forward and
/// truncated recurrent pooling.
pub fn pooled_gap_oracle(
    w_i: &Tensor,
    b_i: &Tensor,
    w_s: &Tensor,
    frames: &[Vec<f64>],
) -> Vec<f64> {
    let last = frames.last().unwrap();
    let h: Vec<f64> = matvec(w_i, last)
        .iter()
        .zip(b_i.data())
        .map(|(a, b)| (a + b).tanh())
        .collect();
    let t = frames.len() as f64;
    matvec(w_s, &h).into_iter().map(|v| v / t).collect()
}

pub fn random_frames(t: usize, d: usize, rng: &mut RngStream) -> Vec<Vec<f64>> {
    (0..t)
        .map(|_| (0..d).map(|_| rng.uniform_range(-1.0, 1.0)).collect())
        .collect()
}

/// Random permutation that is not the identity (needs `n >= 2`).
pub fn non_identity_permutation(n: usize, rng: &mut RngStream) -> Vec<usize> {
    loop {
        let p = rng.permutation(n);
        if p.iter().enumerate().any(|(i, &j)| i != j) {
            return p;
        }
    }
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}
