//! Finite-difference checks for every differentiable operation and for the
//! full SEQ and FRM batch losses. Each check takes a seed and returns the
//! worst relative error it saw.
#![allow(dead_code)]

use seqpool::dataio::{generate_synthetic, IdentityRecord, SynthKind, SyntheticSpec};
use seqpool::seqstage::{
    fnn_graph, rnn_graph, truncated_rnn_graph, Dropout, SeqStageParams, StageLeaves,
};
use seqpool::tensorcore::{Graph, NodeId, RngStream, Tensor};
use seqpool::trainer::{batch_loss, PairSampler, TrainConfig, TrainState};

use super::{central_difference, gradient_check, project, random_tensor, rel_err};

pub const SEEDS: u64 = 20;

pub type Check = fn(u64) -> f64;

pub const OPS: &[(&str, Check)] = &[
    ("affine", affine),
    ("affine_no_bias", affine_no_bias),
    ("add", add),
    ("sub", sub),
    ("scale", scale),
    ("tanh", tanh),
    ("mean_over_time", mean_over_time),
    ("sum", sum),
    ("dropout", dropout),
    ("euclidean_distance", euclidean_distance),
    ("square", square),
    ("margin_hinge", margin_hinge),
    ("softmax_xent", softmax_xent),
    ("conv2d", conv2d),
    ("max_pool2", max_pool2),
    ("reshape", reshape),
    ("rnn_stage", rnn_stage),
    ("fnn_stage", fnn_stage),
    ("truncated_rnn_stage", truncated_rnn_stage),
];

pub const LOSSES: &[(&str, Check)] = &[
    ("seq_batch_loss", seq_loss),
    ("frm_batch_loss", frm_loss),
    ("seq_batch_loss_images", seq_image_loss),
];

fn size(rng: &mut RngStream, max: usize) -> usize {
    1 + rng.below(max)
}

fn unary(seed: u64, op: fn(&mut Graph, NodeId) -> NodeId) -> f64 {
    let mut rng = RngStream::new(seed);
    let n = size(&mut rng, 6);
    let x = random_tensor(&[n], &mut rng);
    let c = random_tensor(&[n], &mut rng);
    gradient_check(&[x], |g, ids| {
        let y = op(g, ids[0]);
        project(g, y, &c)
    })
}

fn binary(seed: u64, op: fn(&mut Graph, NodeId, NodeId) -> NodeId) -> f64 {
    let mut rng = RngStream::new(seed);
    let n = size(&mut rng, 6);
    let a = random_tensor(&[n], &mut rng);
    let b = random_tensor(&[n], &mut rng);
    let c = random_tensor(&[n], &mut rng);
    gradient_check(&[a, b], |g, ids| {
        let y = op(g, ids[0], ids[1]);
        project(g, y, &c)
    })
}

pub fn affine(seed: u64) -> f64 {
    let mut rng = RngStream::new(seed);
    let (m, n) = (size(&mut rng, 5), size(&mut rng, 5));
    let ps = [
        random_tensor(&[n], &mut rng),
        random_tensor(&[m, n], &mut rng),
        random_tensor(&[m], &mut rng),
    ];
    let c = random_tensor(&[m], &mut rng);
    gradient_check(&ps, |g, ids| {
        let y = g.affine(ids[0], ids[1], Some(ids[2])).unwrap();
        project(g, y, &c)
    })
}

pub fn affine_no_bias(seed: u64) -> f64 {
    let mut rng = RngStream::new(seed);
    let (m, n) = (size(&mut rng, 5), size(&mut rng, 5));
    let ps = [random_tensor(&[n], &mut rng), random_tensor(&[m, n], &mut rng)];
    let c = random_tensor(&[m], &mut rng);
    gradient_check(&ps, |g, ids| {
        let y = g.affine(ids[0], ids[1], None).unwrap();
        project(g, y, &c)
    })
}

pub fn add(seed: u64) -> f64 {
    binary(seed, |g, a, b| g.add(a, b).unwrap())
}

pub fn sub(seed: u64) -> f64 {
    binary(seed, |g, a, b| g.sub(a, b).unwrap())
}

pub fn scale(seed: u64) -> f64 {
    let mut rng = RngStream::new(seed);
    let n = size(&mut rng, 6);
    let factor = rng.uniform_range(-3.0, 3.0);
    let x = random_tensor(&[n], &mut rng);
    let c = random_tensor(&[n], &mut rng);
    gradient_check(&[x], |g, ids| {
        let y = g.scale(ids[0], factor);
        project(g, y, &c)
    })
}

pub fn tanh(seed: u64) -> f64 {
    unary(seed, |g, x| g.tanh(x))
}

pub fn square(seed: u64) -> f64 {
    unary(seed, |g, x| g.square(x))
}

pub fn reshape(seed: u64) -> f64 {
    let mut rng = RngStream::new(seed);
    let (a, b) = (size(&mut rng, 4), size(&mut rng, 4));
    let x = random_tensor(&[a * b], &mut rng);
    let c = random_tensor(&[b, a], &mut rng);
    gradient_check(&[x], |g, ids| {
        let y = g.reshape(ids[0], &[b, a]).unwrap();
        let y = g.tanh(y);
        project(g, y, &c)
    })
}

fn list_op(seed: u64, mean: bool) -> f64 {
    let mut rng = RngStream::new(seed);
    let (t, n) = (size(&mut rng, 6), size(&mut rng, 5));
    let xs: Vec<Tensor> = (0..t).map(|_| random_tensor(&[n], &mut rng)).collect();
    let c = random_tensor(&[n], &mut rng);
    gradient_check(&xs, |g, ids| {
        let y = if mean {
            g.mean_over_time(ids).unwrap()
        } else {
            g.sum(ids).unwrap()
        };
        project(g, y, &c)
    })
}

pub fn mean_over_time(seed: u64) -> f64 {
    list_op(seed, true)
}

pub fn sum(seed: u64) -> f64 {
    list_op(seed, false)
}

pub fn dropout(seed: u64) -> f64 {
    let mut rng = RngStream::new(seed);
    let n = 2 + rng.below(8);
    let p = rng.uniform_range(0.1, 0.7);
    let x = random_tensor(&[n], &mut rng);
    let c = random_tensor(&[n], &mut rng);
    gradient_check(&[x], |g, ids| {
        // same mask on every evaluation
        let mut mask_rng = RngStream::new(seed ^ 0x77);
        let y = g.dropout(ids[0], p, &mut mask_rng, true).unwrap();
        project(g, y, &c)
    })
}

pub fn euclidean_distance(seed: u64) -> f64 {
    let mut rng = RngStream::new(seed);
    let n = size(&mut rng, 6);
    let a = random_tensor(&[n], &mut rng);
    let b = random_tensor(&[n], &mut rng);
    gradient_check(&[a, b], |g, ids| g.euclidean_distance(ids[0], ids[1]).unwrap())
}

pub fn margin_hinge(seed: u64) -> f64 {
    let mut rng = RngStream::new(seed);
    let n = size(&mut rng, 6);
    let margin = rng.uniform_range(-0.5, 1.5);
    let x = random_tensor(&[n], &mut rng);
    let c = random_tensor(&[n], &mut rng);
    gradient_check(&[x], |g, ids| {
        let y = g.margin_hinge(ids[0], margin);
        project(g, y, &c)
    })
}

pub fn softmax_xent(seed: u64) -> f64 {
    let mut rng = RngStream::new(seed);
    let k = 2 + rng.below(6);
    let label = rng.below(k);
    let mut logits = random_tensor(&[k], &mut rng);
    logits.scale(3.0);
    gradient_check(&[logits], |g, ids| g.softmax_xent(ids[0], label).unwrap())
}

pub fn conv2d(seed: u64) -> f64 {
    let mut rng = RngStream::new(seed);
    let (c, o, k) = (size(&mut rng, 3), size(&mut rng, 3), size(&mut rng, 3));
    let (h, w) = (k + rng.below(4), k + rng.below(4));
    let ps = [
        random_tensor(&[c, h, w], &mut rng),
        random_tensor(&[o, c, k, k], &mut rng),
        random_tensor(&[o], &mut rng),
    ];
    let c_out = random_tensor(&[o, h - k + 1, w - k + 1], &mut rng);
    gradient_check(&ps, |g, ids| {
        let y = g.conv2d(ids[0], ids[1], ids[2]).unwrap();
        project(g, y, &c_out)
    })
}

pub fn max_pool2(seed: u64) -> f64 {
    let mut rng = RngStream::new(seed);
    let c = size(&mut rng, 3);
    let (h, w) = (2 + rng.below(5), 2 + rng.below(5));
    let x = random_tensor(&[c, h, w], &mut rng);
    let c_out = random_tensor(&[c, h / 2, w / 2], &mut rng);
    gradient_check(&[x], |g, ids| {
        let y = g.max_pool2(ids[0]).unwrap();
        project(g, y, &c_out)
    })
}

type StageGraph = fn(&mut Graph, &[NodeId], &StageLeaves, Dropout, &mut RngStream) -> seqpool::Result<Vec<NodeId>>;

/// Stage parameters and frames are all differentiated; dropout is on with a
/// fixed mask stream and the pooled output is projected to a scalar.
fn stage(seed: u64, graph: StageGraph) -> f64 {
    let mut rng = RngStream::new(seed);
    let (t, d1, d2) = (size(&mut rng, 5), size(&mut rng, 4), size(&mut rng, 4));
    let sp = SeqStageParams::init(d1, d2, &mut rng);
    let mut ps: Vec<Tensor> = sp.blocks().iter().map(|b| (*b).clone()).collect();
    ps.extend((0..t).map(|_| random_tensor(&[d1], &mut rng)));
    let c = random_tensor(&[d2], &mut rng);
    let p = rng.uniform_range(0.0, 0.5);
    gradient_check(&ps, |g, ids| {
        let leaves = StageLeaves {
            w_i: ids[0],
            b_i: ids[1],
            w_s: ids[2],
            b_s: ids[3],
        };
        let mut mask_rng = RngStream::new(seed ^ 0x3c);
        let outs = graph(g, &ids[4..], &leaves, Dropout::training(p), &mut mask_rng).unwrap();
        let pooled = g.mean_over_time(&outs).unwrap();
        project(g, pooled, &c)
    })
}

pub fn rnn_stage(seed: u64) -> f64 {
    stage(seed, rnn_graph)
}

pub fn fnn_stage(seed: u64) -> f64 {
    stage(seed, fnn_graph)
}

pub fn truncated_rnn_stage(seed: u64) -> f64 {
    stage(seed, truncated_rnn_graph)
}

/// Worst block error of `batch_loss` against central differences over
/// every parameter block of a freshly initialized model and head.
fn loss_check(data: &[IdentityRecord], cfg: &TrainConfig, batches: usize, seed: u64) -> f64 {
    let state = TrainState::init(data, cfg).unwrap();
    let mut sampler = PairSampler::new(
        data,
        cfg.mode,
        cfg.batch_size,
        cfg.subseq_len,
        RngStream::new(seed),
    )
    .unwrap();
    let pairs: Vec<_> = (0..batches).flat_map(|_| sampler.next_batch()).collect();
    let loss_rng = || RngStream::new(seed ^ 0xabc);
    let mut bl = batch_loss(&state, data, &pairs, cfg, &mut loss_rng()).unwrap();
    bl.graph.backward(bl.total).unwrap();
    let blocks: Vec<Tensor> = state.param_blocks().into_iter().cloned().collect();
    let eval = |ps: &[Tensor]| {
        let mut s = state.clone();
        for (dst, src) in s.param_blocks_mut().into_iter().zip(ps) {
            *dst = src.clone();
        }
        let bl = batch_loss(&s, data, &pairs, cfg, &mut loss_rng()).unwrap();
        bl.graph.value(bl.total).item()
    };
    let mut worst = 0.0_f64;
    for (k, id) in bl.params.iter().enumerate() {
        let analytic = bl.graph.grad_or_zeros(*id).into_data();
        let numeric = central_difference(&blocks, k, eval);
        worst = worst.max(rel_err(&analytic, &numeric));
    }
    worst
}

fn feature_data(seed: u64) -> Vec<IdentityRecord> {
    generate_synthetic(&SyntheticSpec::features(4, 6, 5, seed)).unwrap()
}

pub fn seq_loss(seed: u64) -> f64 {
    let cfg = TrainConfig {
        feature_dim: 3,
        subseq_len: 3,
        dropout_p: 0.4,
        seed,
        ..TrainConfig::reference_seq()
    };
    // one positive and one negative iteration
    loss_check(&feature_data(seed), &cfg, 2, seed)
}

pub fn frm_loss(seed: u64) -> f64 {
    let cfg = TrainConfig {
        feature_dim: 3,
        subseq_len: 4,
        dropout_p: 0.4,
        seed,
        ..TrainConfig::reference_frm()
    };
    loss_check(&feature_data(seed), &cfg, 1, seed)
}

pub fn seq_image_loss(seed: u64) -> f64 {
    let mut spec = SyntheticSpec::features(3, 3, 1, seed);
    spec.kind = SynthKind::Images {
        height: 14,
        width: 12,
    };
    let data = generate_synthetic(&spec).unwrap();
    let cfg = TrainConfig {
        feature_dim: 3,
        subseq_len: 2,
        dropout_p: 0.3,
        crop: Some((12, 10)),
        conv_channels: (2, 2),
        conv_kernel: 3,
        frame_dim: 4,
        seed,
        ..TrainConfig::reference_seq()
    };
    loss_check(&data, &cfg, 2, seed)
}

/// `(name, worst error over all seeds)` for every check in `checks`.
pub fn run(checks: &[(&'static str, Check)]) -> Vec<(&'static str, f64)> {
    checks
        .iter()
        .map(|(name, f)| (*name, (0..SEEDS).map(f).fold(0.0, f64::max)))
        .collect()
}
