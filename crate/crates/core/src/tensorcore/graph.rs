//! Tape-based reverse-mode differentiation.
//!
//! Nodes are appended in evaluation order, so the tape index order is already
//! a topological order and the backward sweep is a single reverse pass.

use crate::error::{dim_err, domain_err, Result};
use crate::tensorcore::{RngStream, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    /// `w · x (+ b)` with `w` of shape `[out, in]`.
    Affine {
        x: NodeId,
        w: NodeId,
        b: Option<NodeId>,
    },
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Scale(NodeId, f64),
    Tanh(NodeId),
    Mean(Vec<NodeId>),
    Sum(Vec<NodeId>),
    Mask {
        x: NodeId,
        mask: Vec<f64>,
    },
    Euclidean(NodeId, NodeId),
    Square(NodeId),
    /// `max(0, margin - x)`
    MarginHinge {
        x: NodeId,
        margin: f64,
    },
    SoftmaxXent {
        logits: NodeId,
        label: usize,
        probs: Vec<f64>,
    },
    /// Valid-padding, stride-1 convolution over `[C, H, W]` input.
    Conv2d {
        input: NodeId,
        kernel: NodeId,
        bias: NodeId,
    },
    /// 2x2 max pooling, stride 2, floor on odd sizes.
    MaxPool2 {
        input: NodeId,
        argmax: Vec<usize>,
    },
    Reshape(NodeId),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    grad: Option<Tensor>,
    op: Op,
}

/// A single-use computation tape.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op) -> NodeId {
        self.nodes.push(Node {
            value,
            grad: None,
            op,
        });
        NodeId(self.nodes.len() - 1)
    }

    /// Inputs, parameters and constants all enter as leaves.
    pub fn leaf(&mut self, value: Tensor) -> NodeId {
        self.push(value, Op::Leaf)
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    /// Accumulated gradient, or `None` if nothing flowed into this node.
    pub fn grad(&self, id: NodeId) -> Option<&Tensor> {
        self.nodes[id.0].grad.as_ref()
    }

    /// Gradient with an explicit zero tensor when nothing flowed in.
    pub fn grad_or_zeros(&self, id: NodeId) -> Tensor {
        self.grad(id)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(self.value(id).shape()))
    }

    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    pub fn affine(&mut self, x: NodeId, w: NodeId, b: Option<NodeId>) -> Result<NodeId> {
        let (xs, ws) = (self.value(x), self.value(w));
        if ws.shape().len() != 2 || xs.len() != ws.shape()[1] {
            return dim_err(format!(
                "affine: weight {:?} does not accept input {:?}",
                ws.shape(),
                xs.shape()
            ));
        }
        let (rows, cols) = (ws.shape()[0], ws.shape()[1]);
        if let Some(b) = b {
            if self.value(b).len() != rows {
                return dim_err(format!(
                    "affine: bias {:?} does not match {} outputs",
                    self.value(b).shape(),
                    rows
                ));
            }
        }
        let (xd, wd) = (xs.data(), ws.data());
        let mut out: Vec<f64> = (0..rows)
            .map(|r| {
                wd[r * cols..(r + 1) * cols]
                    .iter()
                    .zip(xd)
                    .map(|(a, b)| a * b)
                    .sum()
            })
            .collect();
        if let Some(b) = b {
            for (o, bv) in out.iter_mut().zip(self.value(b).data()) {
                *o += bv;
            }
        }
        Ok(self.push(Tensor::from_parts(vec![rows], out), Op::Affine { x, w, b }))
    }

    fn check_same(&self, a: NodeId, b: NodeId, what: &str) -> Result<()> {
        if self.value(a).shape() != self.value(b).shape() {
            return dim_err(format!(
                "{}: shapes {:?} and {:?} differ",
                what,
                self.value(a).shape(),
                self.value(b).shape()
            ));
        }
        Ok(())
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.check_same(a, b, "add")?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x + y)
            .collect();
        let shape = self.value(a).shape().to_vec();
        Ok(self.push(Tensor::from_parts(shape, data), Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.check_same(a, b, "sub")?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x - y)
            .collect();
        let shape = self.value(a).shape().to_vec();
        Ok(self.push(Tensor::from_parts(shape, data), Op::Sub(a, b)))
    }

    pub fn scale(&mut self, a: NodeId, factor: f64) -> NodeId {
        let v = self.value(a);
        let data = v.data().iter().map(|x| x * factor).collect();
        let shape = v.shape().to_vec();
        self.push(Tensor::from_parts(shape, data), Op::Scale(a, factor))
    }

    pub fn tanh(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a);
        let data = v.data().iter().map(|x| x.tanh()).collect();
        let shape = v.shape().to_vec();
        self.push(Tensor::from_parts(shape, data), Op::Tanh(a))
    }

    fn check_list(&self, xs: &[NodeId], what: &str) -> Result<Vec<usize>> {
        let Some(&first) = xs.first() else {
            return domain_err(format!("{what} of an empty list"));
        };
        let shape = self.value(first).shape().to_vec();
        for &x in &xs[1..] {
            if self.value(x).shape() != shape.as_slice() {
                return dim_err(format!(
                    "{}: element shape {:?} differs from {:?}",
                    what,
                    self.value(x).shape(),
                    shape
                ));
            }
        }
        Ok(shape)
    }

    fn sum_values(&self, xs: &[NodeId], shape: &[usize]) -> Vec<f64> {
        let mut acc = vec![0.0; shape.iter().product()];
        for &x in xs {
            for (a, v) in acc.iter_mut().zip(self.value(x).data()) {
                *a += v;
            }
        }
        acc
    }

    /// Arithmetic mean of equally shaped nodes, summed left to right.
    pub fn mean_over_time(&mut self, xs: &[NodeId]) -> Result<NodeId> {
        let shape = self.check_list(xs, "mean_over_time")?;
        let t = xs.len() as f64;
        let data = self
            .sum_values(xs, &shape)
            .into_iter()
            .map(|v| v / t)
            .collect();
        Ok(self.push(Tensor::from_parts(shape, data), Op::Mean(xs.to_vec())))
    }

    pub fn sum(&mut self, xs: &[NodeId]) -> Result<NodeId> {
        let shape = self.check_list(xs, "sum")?;
        let data = self.sum_values(xs, &shape);
        Ok(self.push(Tensor::from_parts(shape, data), Op::Sum(xs.to_vec())))
    }

    /// Inverted dropout. Identity (no new node) when not training or `p == 0`.
    pub fn dropout(
        &mut self,
        x: NodeId,
        p: f64,
        rng: &mut RngStream,
        training: bool,
    ) -> Result<NodeId> {
        if !(0.0..1.0).contains(&p) {
            return domain_err(format!("dropout probability {p} outside [0, 1)"));
        }
        if !training || p == 0.0 {
            return Ok(x);
        }
        let keep = 1.0 / (1.0 - p);
        let n = self.value(x).len();
        let mask: Vec<f64> = (0..n)
            .map(|_| if rng.bernoulli(p) { 0.0 } else { keep })
            .collect();
        let v = self.value(x);
        let data = v.data().iter().zip(&mask).map(|(a, m)| a * m).collect();
        let shape = v.shape().to_vec();
        Ok(self.push(Tensor::from_parts(shape, data), Op::Mask { x, mask }))
    }

    pub fn euclidean_distance(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.check_same(a, b, "euclidean_distance")?;
        let d = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| (x - y) * (x - y))
            .sum::<f64>()
            .sqrt();
        Ok(self.push(Tensor::scalar(d), Op::Euclidean(a, b)))
    }

    pub fn square(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a);
        let data = v.data().iter().map(|x| x * x).collect();
        let shape = v.shape().to_vec();
        self.push(Tensor::from_parts(shape, data), Op::Square(a))
    }

    /// Elementwise `max(0, margin - x)`.
    pub fn margin_hinge(&mut self, x: NodeId, margin: f64) -> NodeId {
        let v = self.value(x);
        let data = v.data().iter().map(|a| (margin - a).max(0.0)).collect();
        let shape = v.shape().to_vec();
        self.push(Tensor::from_parts(shape, data), Op::MarginHinge { x, margin })
    }

    /// Cross-entropy of `softmax(logits)` against a one-hot label.
    pub fn softmax_xent(&mut self, logits: NodeId, label: usize) -> Result<NodeId> {
        let l = self.value(logits).data();
        if label >= l.len() {
            return domain_err(format!("label {} out of range for {} classes", label, l.len()));
        }
        let max = l.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = l.iter().map(|v| (v - max).exp()).collect();
        let z: f64 = exps.iter().sum();
        let loss = z.ln() - (l[label] - max);
        let probs = exps.into_iter().map(|e| e / z).collect();
        Ok(self.push(
            Tensor::scalar(loss),
            Op::SoftmaxXent {
                logits,
                label,
                probs,
            },
        ))
    }

    pub fn conv2d(&mut self, input: NodeId, kernel: NodeId, bias: NodeId) -> Result<NodeId> {
        let (is, ks) = (self.value(input).shape(), self.value(kernel).shape());
        if is.len() != 3 || ks.len() != 4 || ks[1] != is[0] || ks[2] != ks[3] {
            return dim_err(format!("conv2d: kernel {ks:?} does not fit input {is:?}"));
        }
        let (c, h, w) = (is[0], is[1], is[2]);
        let (o, k) = (ks[0], ks[2]);
        if h < k || w < k {
            return dim_err(format!("conv2d: input {h}x{w} smaller than kernel {k}"));
        }
        if self.value(bias).len() != o {
            return dim_err(format!("conv2d: bias needs {o} entries"));
        }
        let (oh, ow) = (h - k + 1, w - k + 1);
        let (id, kd, bd) = (
            self.value(input).data(),
            self.value(kernel).data(),
            self.value(bias).data(),
        );
        let mut out = vec![0.0; o * oh * ow];
        for oc in 0..o {
            for y in 0..oh {
                for x in 0..ow {
                    let mut acc = bd[oc];
                    for ic in 0..c {
                        for ky in 0..k {
                            let irow = (ic * h + y + ky) * w + x;
                            let krow = ((oc * c + ic) * k + ky) * k;
                            for kx in 0..k {
                                acc += kd[krow + kx] * id[irow + kx];
                            }
                        }
                    }
                    out[(oc * oh + y) * ow + x] = acc;
                }
            }
        }
        Ok(self.push(
            Tensor::from_parts(vec![o, oh, ow], out),
            Op::Conv2d {
                input,
                kernel,
                bias,
            },
        ))
    }

    pub fn max_pool2(&mut self, input: NodeId) -> Result<NodeId> {
        let s = self.value(input).shape();
        if s.len() != 3 || s[1] < 2 || s[2] < 2 {
            return dim_err(format!("max_pool2: input {s:?} too small"));
        }
        let (c, h, w) = (s[0], s[1], s[2]);
        let (oh, ow) = (h / 2, w / 2);
        let d = self.value(input).data();
        let mut out = Vec::with_capacity(c * oh * ow);
        let mut argmax = Vec::with_capacity(c * oh * ow);
        for ch in 0..c {
            for y in 0..oh {
                for x in 0..ow {
                    let mut best = (ch * h + 2 * y) * w + 2 * x;
                    for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                        let idx = (ch * h + 2 * y + dy) * w + 2 * x + dx;
                        if d[idx] > d[best] {
                            best = idx;
                        }
                    }
                    out.push(d[best]);
                    argmax.push(best);
                }
            }
        }
        Ok(self.push(
            Tensor::from_parts(vec![c, oh, ow], out),
            Op::MaxPool2 { input, argmax },
        ))
    }

    pub fn reshape(&mut self, x: NodeId, shape: &[usize]) -> Result<NodeId> {
        let v = self.value(x).reshaped(shape)?;
        Ok(self.push(v, Op::Reshape(x)))
    }

    fn accumulate(grads: &mut [Option<Tensor>], id: NodeId, g: Tensor) {
        match &mut grads[id.0] {
            Some(existing) => existing.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    /// Reverse sweep from a scalar root. Gradients accumulate into whatever
    /// is already stored; call [`Graph::zero_grad`] to start fresh.
    pub fn backward(&mut self, root: NodeId) -> Result<()> {
        if self.value(root).len() != 1 {
            return dim_err(format!(
                "backward needs a scalar root, got shape {:?}",
                self.value(root).shape()
            ));
        }
        // Gradients from this sweep are collected separately and merged at
        // the end, so a second sweep adds exactly one more contribution.
        let mut grads: Vec<Option<Tensor>> = vec![None; root.0 + 1];
        grads[root.0] = Some(Tensor::scalar(1.0));
        for i in (0..=root.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        for (node, g) in self.nodes.iter_mut().zip(grads) {
            if let Some(g) = g {
                match &mut node.grad {
                    Some(existing) => existing.add_assign(&g),
                    slot @ None => *slot = Some(g),
                }
            }
        }
        Ok(())
    }

    fn propagate(&self, i: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let gd = g.data();
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::Affine { x, w, b } => {
                let (xv, wv) = (self.value(*x), self.value(*w));
                let (rows, cols) = (wv.shape()[0], wv.shape()[1]);
                let (xd, wd) = (xv.data(), wv.data());
                let mut gw = vec![0.0; rows * cols];
                let mut gx = vec![0.0; cols];
                for r in 0..rows {
                    let gr = gd[r];
                    if gr == 0.0 {
                        continue;
                    }
                    let row = &wd[r * cols..(r + 1) * cols];
                    let grow = &mut gw[r * cols..(r + 1) * cols];
                    for c in 0..cols {
                        grow[c] = gr * xd[c];
                        gx[c] += gr * row[c];
                    }
                }
                Self::accumulate(grads, *w, Tensor::from_parts(vec![rows, cols], gw));
                Self::accumulate(grads, *x, Tensor::from_parts(xv.shape().to_vec(), gx));
                if let Some(b) = b {
                    Self::accumulate(grads, *b, Tensor::from_parts(vec![rows], gd.to_vec()));
                }
            }
            Op::Add(a, b) => {
                Self::accumulate(grads, *a, g.clone());
                Self::accumulate(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                Self::accumulate(grads, *a, g.clone());
                let mut neg = g.clone();
                neg.scale(-1.0);
                Self::accumulate(grads, *b, neg);
            }
            Op::Scale(a, f) => {
                let mut s = g.clone();
                s.scale(*f);
                Self::accumulate(grads, *a, s);
            }
            Op::Tanh(a) => {
                let y = self.nodes[i].value.data();
                let data = gd.iter().zip(y).map(|(g, y)| g * (1.0 - y * y)).collect();
                Self::accumulate(grads, *a, Tensor::from_parts(g.shape().to_vec(), data));
            }
            Op::Mean(xs) => {
                let t = xs.len() as f64;
                let data: Vec<f64> = gd.iter().map(|v| v / t).collect();
                for x in xs {
                    Self::accumulate(grads, *x, Tensor::from_parts(g.shape().to_vec(), data.clone()));
                }
            }
            Op::Sum(xs) => {
                for x in xs {
                    Self::accumulate(grads, *x, g.clone());
                }
            }
            Op::Mask { x, mask } => {
                let data = gd.iter().zip(mask).map(|(g, m)| g * m).collect();
                Self::accumulate(grads, *x, Tensor::from_parts(g.shape().to_vec(), data));
            }
            Op::Euclidean(a, b) => {
                let d = self.nodes[i].value.item();
                let (av, bv) = (self.value(*a), self.value(*b));
                let shape = av.shape().to_vec();
                if d == 0.0 {
                    // subgradient choice at coincident points
                    Self::accumulate(grads, *a, Tensor::zeros(&shape));
                    Self::accumulate(grads, *b, Tensor::zeros(&shape));
                } else {
                    let s = gd[0] / d;
                    let ga: Vec<f64> = av
                        .data()
                        .iter()
                        .zip(bv.data())
                        .map(|(x, y)| s * (x - y))
                        .collect();
                    let gb = ga.iter().map(|v| -v).collect();
                    Self::accumulate(grads, *a, Tensor::from_parts(shape.clone(), ga));
                    Self::accumulate(grads, *b, Tensor::from_parts(shape, gb));
                }
            }
            Op::Square(a) => {
                let x = self.value(*a).data();
                let data = gd.iter().zip(x).map(|(g, x)| 2.0 * g * x).collect();
                Self::accumulate(grads, *a, Tensor::from_parts(g.shape().to_vec(), data));
            }
            Op::MarginHinge { x, margin } => {
                let xv = self.value(*x).data();
                let data = gd
                    .iter()
                    .zip(xv)
                    .map(|(g, x)| if margin - x > 0.0 { -g } else { 0.0 })
                    .collect();
                Self::accumulate(grads, *x, Tensor::from_parts(g.shape().to_vec(), data));
            }
            Op::SoftmaxXent {
                logits,
                label,
                probs,
            } => {
                let mut data: Vec<f64> = probs.iter().map(|p| p * gd[0]).collect();
                data[*label] -= gd[0];
                let shape = self.value(*logits).shape().to_vec();
                Self::accumulate(grads, *logits, Tensor::from_parts(shape, data));
            }
            Op::Conv2d {
                input,
                kernel,
                bias,
            } => {
                let (iv, kv) = (self.value(*input), self.value(*kernel));
                let (c, h, w) = (iv.shape()[0], iv.shape()[1], iv.shape()[2]);
                let (o, k) = (kv.shape()[0], kv.shape()[2]);
                let (oh, ow) = (h - k + 1, w - k + 1);
                let (id, kd) = (iv.data(), kv.data());
                let mut gi = vec![0.0; id.len()];
                let mut gk = vec![0.0; kd.len()];
                let mut gb = vec![0.0; o];
                for oc in 0..o {
                    for y in 0..oh {
                        for x in 0..ow {
                            let go = gd[(oc * oh + y) * ow + x];
                            if go == 0.0 {
                                continue;
                            }
                            gb[oc] += go;
                            for ic in 0..c {
                                for ky in 0..k {
                                    let irow = (ic * h + y + ky) * w + x;
                                    let krow = ((oc * c + ic) * k + ky) * k;
                                    for kx in 0..k {
                                        gk[krow + kx] += go * id[irow + kx];
                                        gi[irow + kx] += go * kd[krow + kx];
                                    }
                                }
                            }
                        }
                    }
                }
                Self::accumulate(grads, *input, Tensor::from_parts(iv.shape().to_vec(), gi));
                Self::accumulate(grads, *kernel, Tensor::from_parts(kv.shape().to_vec(), gk));
                Self::accumulate(grads, *bias, Tensor::from_parts(vec![o], gb));
            }
            Op::MaxPool2 { input, argmax } => {
                let iv = self.value(*input);
                let mut gi = vec![0.0; iv.len()];
                for (g, &src) in gd.iter().zip(argmax) {
                    gi[src] += g;
                }
                Self::accumulate(grads, *input, Tensor::from_parts(iv.shape().to_vec(), gi));
            }
            Op::Reshape(x) => {
                let shape = self.value(*x).shape().to_vec();
                Self::accumulate(grads, *x, Tensor::from_parts(shape, gd.to_vec()));
            }
        }
    }
}
