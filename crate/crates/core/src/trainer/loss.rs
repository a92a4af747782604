use crate::error::{domain_err, Result};
use crate::tensorcore::{Graph, NodeId, RngStream, Tensor};

/// Formula recorded at the top of every training log.
pub const CONTRASTIVE_FORMULA: &str = "positive: d^2, negative: max(0, m - d)^2, d = ||a - b||_2";

/// `d^2` for positive pairs, `max(0, m - d)^2` for negative pairs.
pub fn contrastive_loss(g: &mut Graph, a: NodeId, b: NodeId, positive: bool, margin: f64) -> Result<NodeId> {
    if !(margin > 0.0) {
        return domain_err(format!("margin must be positive, got {margin}"));
    }
    let d = g.euclidean_distance(a, b)?;
    let base = if positive { d } else { g.margin_hinge(d, margin) };
    Ok(g.square(base))
}

/// Affine classifier over the training identities; used only while training.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassifierHead {
    pub w: Tensor,
    pub b: Tensor,
}

impl ClassifierHead {
    pub fn init(classes: usize, dim: usize, rng: &mut RngStream) -> Self {
        let bound = 1.0 / (dim as f64).sqrt();
        Self {
            w: Tensor::uniform(&[classes, dim], bound, rng),
            b: Tensor::uniform(&[classes], bound, rng),
        }
    }

    pub fn zeros(classes: usize, dim: usize) -> Self {
        Self {
            w: Tensor::zeros(&[classes, dim]),
            b: Tensor::zeros(&[classes]),
        }
    }

    pub fn classes(&self) -> usize {
        self.b.len()
    }

    pub fn leaves(&self, g: &mut Graph) -> (NodeId, NodeId) {
        (g.leaf(self.w.clone()), g.leaf(self.b.clone()))
    }
}

/// Softmax cross-entropy of the head's logits against `label`.
pub fn identification_loss(
    g: &mut Graph,
    descriptor: NodeId,
    label: usize,
    head: (NodeId, NodeId),
) -> Result<NodeId> {
    let classes = g.value(head.1).len();
    if label >= classes {
        return domain_err(format!("identity label {label} outside {classes} training identities"));
    }
    let logits = g.affine(descriptor, head.0, Some(head.1))?;
    g.softmax_xent(logits, label)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::Error;

    fn pair(g: &mut Graph, a: Vec<f64>, b: Vec<f64>) -> (NodeId, NodeId) {
        (
            g.leaf(Tensor::vector(a).unwrap()),
            g.leaf(Tensor::vector(b).unwrap()),
        )
    }

    #[test]
    fn contrastive_examples() {
        let mut g = Graph::new();
        let (a, b) = pair(&mut g, vec![1.0, 2.0], vec![1.0, 2.0]);
        let l = contrastive_loss(&mut g, a, b, true, 2.0).unwrap();
        assert_eq!(g.value(l).item(), 0.0);

        let (a, b) = pair(&mut g, vec![0.0, 0.0], vec![3.0, 0.0]);
        let l = contrastive_loss(&mut g, a, b, false, 2.0).unwrap();
        assert_eq!(g.value(l).item(), 0.0);
        g.backward(l).unwrap();
        assert!(g.grad_or_zeros(a).data().iter().all(|&v| v == 0.0));

        let mut g = Graph::new();
        let (a, b) = pair(&mut g, vec![0.0, 0.0], vec![0.6, 0.8]);
        let l = contrastive_loss(&mut g, a, b, false, 2.0).unwrap();
        assert!((g.value(l).item() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn zero_head_gives_log_classes() {
        let mut g = Graph::new();
        let head = ClassifierHead::zeros(4, 3).leaves(&mut g);
        let (a, b) = pair(&mut g, vec![0.3, -1.0, 2.0], vec![1.0, 1.0, 1.0]);
        let la = identification_loss(&mut g, a, 0, head).unwrap();
        let lb = identification_loss(&mut g, b, 3, head).unwrap();
        assert!((g.value(la).item() - 4f64.ln()).abs() < 1e-12);
        let total = g.add(la, lb).unwrap();
        assert!((g.value(total).item() - 2.0 * 4f64.ln()).abs() < 1e-12);
        assert!(matches!(
            identification_loss(&mut g, a, 4, head),
            Err(Error::Domain(_))
        ));
    }
}
