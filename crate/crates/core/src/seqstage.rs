//! Sequence-processing stage: the recurrent stage, its feed-forward
//! counterpart with the residual shortcut, temporal average pooling and the
//! parameter transplant between the two.
//!
//! Both stages share one parameter record `(W_i, b_i, W_s, b_s)`:
//!
//! ```text
//! recurrent     o(t) = W_i f(t) + b_i + W_s tanh(o(t-1)) + b_s,   tanh(o(0)) := 0
//! feed-forward  o(t) = h(t) + W_s tanh(h(t)) + b_s,  h(t) = W_i f(t) + b_i
//! ```
//!
//! The feed-forward output at `t` depends on frame `t` only, which makes the
//! pooled descriptor independent of frame order.

use std::fmt;
use std::io::{Read, Write};
use std::str::FromStr;

use crate::binio;
use crate::error::{dim_err, domain_err, Error, Result};
use crate::tensorcore::{Graph, NodeId, RngStream, Tensor};

pub const PARAMS_MAGIC: &[u8; 4] = b"SQSP";
pub const PARAMS_VERSION: u32 = 1;

/// Which graph interprets a [`SeqStageParams`] record.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Arch {
    Rnn,
    Fnn,
}

impl Arch {
    pub fn flipped(self) -> Self {
        match self {
            Arch::Rnn => Arch::Fnn,
            Arch::Fnn => Arch::Rnn,
        }
    }
}

impl fmt::Display for Arch {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Arch::Rnn => "rnn",
            Arch::Fnn => "fnn",
        })
    }
}

impl FromStr for Arch {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "rnn" => Ok(Arch::Rnn),
            "fnn" => Ok(Arch::Fnn),
            other => Err(Error::Config(format!("unknown architecture '{other}'"))),
        }
    }
}

/// Dropout applied in front of the `W_i` and `W_s` inputs.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Dropout {
    pub p: f64,
    pub training: bool,
}

impl Dropout {
    pub const OFF: Dropout = Dropout {
        p: 0.0,
        training: false,
    };

    pub fn training(p: f64) -> Self {
        Self { p, training: true }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SeqStageParams {
    w_i: Tensor,
    b_i: Tensor,
    w_s: Tensor,
    b_s: Tensor,
}

impl SeqStageParams {
    pub fn new(w_i: Tensor, b_i: Tensor, w_s: Tensor, b_s: Tensor) -> Result<Self> {
        if w_i.shape().len() != 2 {
            return dim_err(format!("W_i must be a matrix, got {:?}", w_i.shape()));
        }
        let d2 = w_i.shape()[0];
        if b_i.shape() != [d2] || w_s.shape() != [d2, d2] || b_s.shape() != [d2] {
            return dim_err(format!(
                "inconsistent stage shapes: W_i {:?}, b_i {:?}, W_s {:?}, b_s {:?}",
                w_i.shape(),
                b_i.shape(),
                w_s.shape(),
                b_s.shape()
            ));
        }
        Ok(Self { w_i, b_i, w_s, b_s })
    }

    pub fn zeros(d1: usize, d2: usize) -> Self {
        Self {
            w_i: Tensor::zeros(&[d2, d1]),
            b_i: Tensor::zeros(&[d2]),
            w_s: Tensor::zeros(&[d2, d2]),
            b_s: Tensor::zeros(&[d2]),
        }
    }

    /// Uniform in `±1/sqrt(fan_in)` for every block.
    pub fn init(d1: usize, d2: usize, rng: &mut RngStream) -> Self {
        let bi = 1.0 / (d1 as f64).sqrt();
        let bs = 1.0 / (d2 as f64).sqrt();
        Self {
            w_i: Tensor::uniform(&[d2, d1], bi, rng),
            b_i: Tensor::uniform(&[d2], bi, rng),
            w_s: Tensor::uniform(&[d2, d2], bs, rng),
            b_s: Tensor::uniform(&[d2], bs, rng),
        }
    }

    pub fn d_in(&self) -> usize {
        self.w_i.shape()[1]
    }

    pub fn d_out(&self) -> usize {
        self.w_i.shape()[0]
    }

    pub fn w_i(&self) -> &Tensor {
        &self.w_i
    }

    pub fn b_i(&self) -> &Tensor {
        &self.b_i
    }

    pub fn w_s(&self) -> &Tensor {
        &self.w_s
    }

    pub fn b_s(&self) -> &Tensor {
        &self.b_s
    }

    /// Blocks in serialization order: `W_i, b_i, W_s, b_s`.
    pub fn blocks(&self) -> [&Tensor; 4] {
        [&self.w_i, &self.b_i, &self.w_s, &self.b_s]
    }

    pub fn blocks_mut(&mut self) -> [&mut Tensor; 4] {
        [&mut self.w_i, &mut self.b_i, &mut self.w_s, &mut self.b_s]
    }

    pub fn with_w_s(mut self, w_s: Tensor) -> Result<Self> {
        if w_s.shape() != self.w_s.shape() {
            return dim_err("replacement W_s has the wrong shape");
        }
        self.w_s = w_s;
        Ok(self)
    }

    pub fn bits_eq(&self, other: &SeqStageParams) -> bool {
        self.blocks()
            .iter()
            .zip(other.blocks())
            .all(|(a, b)| a.bits_eq(b))
    }

    pub fn leaves(&self, g: &mut Graph) -> StageLeaves {
        StageLeaves {
            w_i: g.leaf(self.w_i.clone()),
            b_i: g.leaf(self.b_i.clone()),
            w_s: g.leaf(self.w_s.clone()),
            b_s: g.leaf(self.b_s.clone()),
        }
    }

    pub fn write_to(&self, w: &mut impl Write) -> Result<()> {
        binio::write_magic(w, PARAMS_MAGIC, PARAMS_VERSION)?;
        binio::write_u32(w, binio::to_u32(self.d_in(), "d1")?)?;
        binio::write_u32(w, binio::to_u32(self.d_out(), "d2")?)?;
        for b in self.blocks() {
            binio::write_f64s(w, b.data())?;
        }
        Ok(())
    }

    pub fn read_from(r: &mut impl Read) -> Result<Self> {
        binio::read_magic(r, PARAMS_MAGIC, PARAMS_VERSION)?;
        let d1 = binio::read_u32(r)? as usize;
        let d2 = binio::read_u32(r)? as usize;
        if d1 == 0 || d2 == 0 {
            return Err(Error::Format(format!("zero stage dimension {d1}x{d2}")));
        }
        let mut read = |shape: Vec<usize>, name: &str| -> Result<Tensor> {
            let n = shape.iter().product();
            let data = binio::read_f64s(r, n)?;
            binio::check_finite(&data, name)?;
            Tensor::new(shape, data)
        };
        let w_i = read(vec![d2, d1], "W_i")?;
        let b_i = read(vec![d2], "b_i")?;
        let w_s = read(vec![d2, d2], "W_s")?;
        let b_s = read(vec![d2], "b_s")?;
        Self::new(w_i, b_i, w_s, b_s)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::new();
        self.write_to(&mut buf).expect("writing to a Vec cannot fail");
        buf
    }

    pub fn from_bytes(mut bytes: &[u8]) -> Result<Self> {
        let p = Self::read_from(&mut bytes)?;
        binio::expect_eof(&mut bytes)?;
        Ok(p)
    }
}

/// Graph handles for the four parameter blocks.
#[derive(Clone, Copy, Debug)]
pub struct StageLeaves {
    pub w_i: NodeId,
    pub b_i: NodeId,
    pub w_s: NodeId,
    pub b_s: NodeId,
}

impl StageLeaves {
    pub fn ids(&self) -> [NodeId; 4] {
        [self.w_i, self.b_i, self.w_s, self.b_s]
    }
}

/// Ordered per-frame feature vectors `f(1..T)`.
#[derive(Clone, Debug, PartialEq)]
pub struct FrameFeatureSequence {
    frames: Vec<Vec<f64>>,
}

impl FrameFeatureSequence {
    pub fn new(frames: Vec<Vec<f64>>) -> Result<Self> {
        let Some(first) = frames.first() else {
            return domain_err("frame sequence must contain at least one frame");
        };
        let d = first.len();
        if let Some(bad) = frames.iter().find(|f| f.len() != d) {
            return dim_err(format!("frame of dimension {} in a sequence of dimension {}", bad.len(), d));
        }
        Ok(Self { frames })
    }

    pub fn frames(&self) -> &[Vec<f64>] {
        &self.frames
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.frames[0].len()
    }

    /// Frames reordered so that position `i` holds frame `perm[i]`.
    pub fn permuted(&self, perm: &[usize]) -> Self {
        Self {
            frames: perm.iter().map(|&i| self.frames[i].clone()).collect(),
        }
    }
}

/// Outputs `o(1..T)` of a stage.
#[derive(Clone, Debug, PartialEq)]
pub struct StageOutputSequence {
    outputs: Vec<Vec<f64>>,
}

impl StageOutputSequence {
    pub fn from_vectors(outputs: Vec<Vec<f64>>) -> Self {
        Self { outputs }
    }

    pub fn outputs(&self) -> &[Vec<f64>] {
        &self.outputs
    }

    pub fn len(&self) -> usize {
        self.outputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.outputs.is_empty()
    }
}

/// Pooled sequence embedding.
#[derive(Clone, Debug, PartialEq)]
pub struct SequenceDescriptor(pub Vec<f64>);

impl SequenceDescriptor {
    pub fn values(&self) -> &[f64] {
        &self.0
    }
}

fn check_frames(g: &Graph, frames: &[NodeId], leaves: &StageLeaves) -> Result<()> {
    if frames.is_empty() {
        return domain_err("stage input must contain at least one frame");
    }
    let d1 = g.value(leaves.w_i).shape()[1];
    for f in frames {
        if g.value(*f).len() != d1 {
            return dim_err(format!(
                "frame feature of dimension {} fed to a stage expecting {}",
                g.value(*f).len(),
                d1
            ));
        }
    }
    Ok(())
}

/// `W_i drop(f) + b_i` for each frame.
fn input_paths(
    g: &mut Graph,
    frames: &[NodeId],
    p: &StageLeaves,
    dropout: Dropout,
    rng: &mut RngStream,
) -> Result<Vec<NodeId>> {
    frames
        .iter()
        .map(|&f| {
            let x = g.dropout(f, dropout.p, rng, dropout.training)?;
            g.affine(x, p.w_i, Some(p.b_i))
        })
        .collect()
}

/// `W_s drop(tanh(x)) + b_s`
fn state_path(
    g: &mut Graph,
    x: NodeId,
    p: &StageLeaves,
    dropout: Dropout,
    rng: &mut RngStream,
) -> Result<NodeId> {
    let r = g.tanh(x);
    let r = g.dropout(r, dropout.p, rng, dropout.training)?;
    g.affine(r, p.w_s, Some(p.b_s))
}

/// Recurrent stage on the tape.
pub fn rnn_graph(
    g: &mut Graph,
    frames: &[NodeId],
    p: &StageLeaves,
    dropout: Dropout,
    rng: &mut RngStream,
) -> Result<Vec<NodeId>> {
    check_frames(g, frames, p)?;
    let mut outputs: Vec<NodeId> = Vec::with_capacity(frames.len());
    for &f in frames {
        let x = g.dropout(f, dropout.p, rng, dropout.training)?;
        let h = g.affine(x, p.w_i, Some(p.b_i))?;
        let o = match outputs.last() {
            // r(0) = 0, so W_s r(0) + b_s reduces to b_s
            None => g.add(h, p.b_s)?,
            Some(&prev) => {
                let s = state_path(g, prev, p, dropout, rng)?;
                g.add(h, s)?
            }
        };
        outputs.push(o);
    }
    Ok(outputs)
}

/// Feed-forward stage on the tape: `h + W_s tanh(h) + b_s` per frame.
pub fn fnn_graph(
    g: &mut Graph,
    frames: &[NodeId],
    p: &StageLeaves,
    dropout: Dropout,
    rng: &mut RngStream,
) -> Result<Vec<NodeId>> {
    check_frames(g, frames, p)?;
    let hs = input_paths(g, frames, p, dropout, rng)?;
    hs.into_iter()
        .map(|h| {
            let s = state_path(g, h, p, dropout, rng)?;
            g.add(h, s)
        })
        .collect()
}

/// One-step-dependency truncation of the recurrent stage:
/// `o(1) = h(1) + b_s`, `o(t) = h(t) + W_s tanh(h(t-1)) + b_s`.
pub fn truncated_rnn_graph(
    g: &mut Graph,
    frames: &[NodeId],
    p: &StageLeaves,
    dropout: Dropout,
    rng: &mut RngStream,
) -> Result<Vec<NodeId>> {
    check_frames(g, frames, p)?;
    let hs = input_paths(g, frames, p, dropout, rng)?;
    let mut outputs = Vec::with_capacity(hs.len());
    for t in 0..hs.len() {
        let o = if t == 0 {
            g.add(hs[0], p.b_s)?
        } else {
            let s = state_path(g, hs[t - 1], p, dropout, rng)?;
            g.add(hs[t], s)?
        };
        outputs.push(o);
    }
    Ok(outputs)
}

pub fn stage_graph(
    arch: Arch,
    g: &mut Graph,
    frames: &[NodeId],
    p: &StageLeaves,
    dropout: Dropout,
    rng: &mut RngStream,
) -> Result<Vec<NodeId>> {
    match arch {
        Arch::Rnn => rnn_graph(g, frames, p, dropout, rng),
        Arch::Fnn => fnn_graph(g, frames, p, dropout, rng),
    }
}

type StageFn =
    fn(&mut Graph, &[NodeId], &StageLeaves, Dropout, &mut RngStream) -> Result<Vec<NodeId>>;

fn evaluate(
    stage: StageFn,
    seq: &FrameFeatureSequence,
    params: &SeqStageParams,
    dropout: Dropout,
    rng: &mut RngStream,
) -> Result<StageOutputSequence> {
    if seq.dim() != params.d_in() {
        return dim_err(format!(
            "sequence dimension {} does not match stage input {}",
            seq.dim(),
            params.d_in()
        ));
    }
    let mut g = Graph::new();
    let leaves = params.leaves(&mut g);
    let frames: Vec<NodeId> = seq
        .frames()
        .iter()
        .map(|f| g.leaf(Tensor::from_parts(vec![f.len()], f.clone())))
        .collect();
    let outs = stage(&mut g, &frames, &leaves, dropout, rng)?;
    Ok(StageOutputSequence::from_vectors(
        outs.iter().map(|o| g.value(*o).data().to_vec()).collect(),
    ))
}

pub fn rnn_forward(
    seq: &FrameFeatureSequence,
    params: &SeqStageParams,
    dropout: Dropout,
    rng: &mut RngStream,
) -> Result<StageOutputSequence> {
    evaluate(rnn_graph, seq, params, dropout, rng)
}

pub fn fnn_forward(
    seq: &FrameFeatureSequence,
    params: &SeqStageParams,
    dropout: Dropout,
    rng: &mut RngStream,
) -> Result<StageOutputSequence> {
    evaluate(fnn_graph, seq, params, dropout, rng)
}

pub fn truncated_rnn_forward(
    seq: &FrameFeatureSequence,
    params: &SeqStageParams,
    dropout: Dropout,
    rng: &mut RngStream,
) -> Result<StageOutputSequence> {
    evaluate(truncated_rnn_graph, seq, params, dropout, rng)
}

pub fn stage_forward(
    arch: Arch,
    seq: &FrameFeatureSequence,
    params: &SeqStageParams,
    dropout: Dropout,
    rng: &mut RngStream,
) -> Result<StageOutputSequence> {
    match arch {
        Arch::Rnn => rnn_forward(seq, params, dropout, rng),
        Arch::Fnn => fnn_forward(seq, params, dropout, rng),
    }
}

/// Temporal average pooling.
pub fn pool(outputs: &StageOutputSequence) -> Result<SequenceDescriptor> {
    let mut g = Graph::new();
    let ids: Vec<NodeId> = outputs
        .outputs()
        .iter()
        .map(|o| g.leaf(Tensor::from_parts(vec![o.len()], o.clone())))
        .collect();
    let m = g.mean_over_time(&ids)?;
    Ok(SequenceDescriptor(g.value(m).data().to_vec()))
}

/// Reinterprets recurrent parameters for the feed-forward graph. The values
/// are the same record; only the consumer changes.
pub fn transplant(params: &SeqStageParams) -> SeqStageParams {
    params.clone()
}

/// Distance between recurrent and feed-forward outputs for the same
/// parameters, with dropout off.
#[derive(Clone, Debug, PartialEq)]
pub struct ApproxError {
    pub per_step: Vec<f64>,
    pub pooled: f64,
}

pub fn approx_error(seq: &FrameFeatureSequence, params: &SeqStageParams) -> Result<ApproxError> {
    let mut rng = RngStream::new(0);
    let rnn = rnn_forward(seq, params, Dropout::OFF, &mut rng)?;
    let fnn = fnn_forward(seq, params, Dropout::OFF, &mut rng)?;
    let per_step = rnn
        .outputs()
        .iter()
        .zip(fnn.outputs())
        .map(|(a, b)| l2_distance(a, b))
        .collect();
    let pooled = l2_distance(pool(&rnn)?.values(), pool(&fnn)?.values());
    Ok(ApproxError { per_step, pooled })
}

pub(crate) fn l2_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}
