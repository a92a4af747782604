//! Dense `f64` tensors, a seeded random stream, and a reverse-mode
//! differentiation tape with exactly the operations the models need.

mod graph;
mod rng;
mod tensor;

pub use graph::{Graph, NodeId};
pub use rng::RngStream;
pub use tensor::Tensor;

#[cfg(test)]
mod tests {
    use super::*;
    use crate::testutil::{central_difference, rel_err};

    fn v(data: &[f64]) -> Tensor {
        Tensor::vector(data.to_vec()).unwrap()
    }

    #[test]
    fn affine_identity_and_hand_product() {
        let mut g = Graph::new();
        let x = g.leaf(v(&[3.0, -1.0]));
        let w = g.leaf(Tensor::identity(2));
        let b = g.leaf(v(&[0.0, 0.0]));
        let y = g.affine(x, w, Some(b)).unwrap();
        assert_eq!(g.value(y).data(), &[3.0, -1.0]);

        let x = g.leaf(v(&[1.0, 1.0]));
        let w = g.leaf(Tensor::matrix(1, 2, vec![1.0, 2.0]).unwrap());
        let b = g.leaf(v(&[0.5]));
        let y = g.affine(x, w, Some(b)).unwrap();
        assert_eq!(g.value(y).data(), &[3.5]);

        let bad = g.leaf(v(&[1.0, 2.0, 3.0]));
        assert!(matches!(
            g.affine(bad, w, Some(b)),
            Err(crate::Error::Dimension(_))
        ));
    }

    #[test]
    fn affine_gradient_matches_finite_differences() {
        let mut rng = RngStream::new(5);
        let params = vec![
            Tensor::uniform(&[3], 1.0, &mut rng),
            Tensor::uniform(&[4, 3], 1.0, &mut rng),
            Tensor::uniform(&[4], 1.0, &mut rng),
        ];
        let build = |g: &mut Graph, ids: &[NodeId]| {
            let y = g.affine(ids[0], ids[1], Some(ids[2])).unwrap();
            // sum of the output vector
            let ones = g.leaf(Tensor::new(vec![1, 4], vec![1.0; 4]).unwrap());
            g.affine(y, ones, None).unwrap()
        };
        let mut g = Graph::new();
        let ids: Vec<NodeId> = params.iter().map(|p| g.leaf(p.clone())).collect();
        let out = build(&mut g, &ids);
        g.backward(out).unwrap();
        for (k, id) in ids.iter().enumerate() {
            let analytic = g.grad_or_zeros(*id);
            let numeric = central_difference(&params, k, 1e-5, |ps| {
                let mut g = Graph::new();
                let ids: Vec<NodeId> = ps.iter().map(|p| g.leaf(p.clone())).collect();
                let out = build(&mut g, &ids);
                g.value(out).item()
            });
            assert!(rel_err(analytic.data(), &numeric) < 1e-6);
        }
    }

    #[test]
    fn tanh_values() {
        let mut g = Graph::new();
        let x = g.leaf(v(&[0.0, 0.0]));
        let y = g.tanh(x);
        assert_eq!(g.value(y).data(), &[0.0, 0.0]);
        let x = g.leaf(v(&[1.0]));
        let y = g.tanh(x);
        assert!((g.value(y).item() - 0.761_594_155_955_764_9).abs() < 1e-15);
    }

    #[test]
    fn mean_over_time_examples() {
        let mut g = Graph::new();
        let a = g.leaf(v(&[2.0, 4.0]));
        let m = g.mean_over_time(&[a]).unwrap();
        assert_eq!(g.value(m).data(), &[2.0, 4.0]);

        let a = g.leaf(v(&[1.0, 0.0]));
        let b = g.leaf(v(&[3.0, 2.0]));
        let m = g.mean_over_time(&[a, b]).unwrap();
        assert_eq!(g.value(m).data(), &[2.0, 1.0]);
        let m2 = g.mean_over_time(&[b, a]).unwrap();
        assert_eq!(g.value(m2).data(), &[2.0, 1.0]);

        assert!(matches!(g.mean_over_time(&[]), Err(crate::Error::Domain(_))));
        let c = g.leaf(v(&[1.0]));
        assert!(matches!(
            g.mean_over_time(&[a, c]),
            Err(crate::Error::Dimension(_))
        ));
    }

    #[test]
    fn dropout_identity_cases_and_rate() {
        let mut rng = RngStream::new(9);
        let mut g = Graph::new();
        let x = g.leaf(v(&[1.0, 2.0, 3.0]));
        assert_eq!(g.dropout(x, 0.6, &mut rng, false).unwrap(), x);
        assert_eq!(g.dropout(x, 0.0, &mut rng, true).unwrap(), x);
        assert!(g.dropout(x, 1.0, &mut rng, true).is_err());
        assert!(g.dropout(x, -0.1, &mut rng, true).is_err());

        let n = 100_000;
        let big = g.leaf(Tensor::new(vec![n], vec![1.0; n]).unwrap());
        let d = g.dropout(big, 0.6, &mut rng, true).unwrap();
        let zeros = g.value(d).data().iter().filter(|&&x| x == 0.0).count();
        let frac = zeros as f64 / n as f64;
        assert!((frac - 0.6).abs() < 0.01, "zeroed fraction {frac}");
        let kept = g.value(d).data().iter().find(|&&x| x != 0.0).unwrap();
        assert!((kept - 2.5).abs() < 1e-12);
    }

    #[test]
    fn euclidean_examples() {
        let mut g = Graph::new();
        let a = g.leaf(v(&[1.0, 2.0]));
        let d = g.euclidean_distance(a, a).unwrap();
        assert_eq!(g.value(d).item(), 0.0);
        g.backward(d).unwrap();
        assert_eq!(g.grad(a).unwrap().data(), &[0.0, 0.0]);

        let mut g = Graph::new();
        let a = g.leaf(v(&[0.0, 0.0]));
        let b = g.leaf(v(&[3.0, 4.0]));
        let d = g.euclidean_distance(a, b).unwrap();
        assert_eq!(g.value(d).item(), 5.0);
        let c = g.leaf(v(&[1.0]));
        assert!(g.euclidean_distance(a, c).is_err());
    }

    #[test]
    fn softmax_xent_examples() {
        let mut g = Graph::new();
        let l = g.leaf(v(&[0.3; 4]));
        let x = g.softmax_xent(l, 2).unwrap();
        assert!((g.value(x).item() - 4f64.ln()).abs() < 1e-12);

        let l = g.leaf(v(&[1e6, 0.0]));
        let x = g.softmax_xent(l, 0).unwrap();
        assert!(g.value(x).item().abs() < 1e-12);

        assert!(matches!(g.softmax_xent(l, 2), Err(crate::Error::Domain(_))));
    }

    #[test]
    fn softmax_xent_gradient_is_probs_minus_onehot() {
        let mut g = Graph::new();
        let l = g.leaf(v(&[1.0, 2.0, 0.5]));
        let x = g.softmax_xent(l, 1).unwrap();
        g.backward(x).unwrap();
        let z: f64 = [1.0f64, 2.0, 0.5].iter().map(|v| v.exp()).sum();
        let expect = [1f64.exp() / z, 2f64.exp() / z - 1.0, 0.5f64.exp() / z];
        for (a, b) in g.grad(l).unwrap().data().iter().zip(expect) {
            assert!((a - b).abs() < 1e-14);
        }
    }

    #[test]
    fn shared_subgraph_accumulates_and_zero_grad_resets() {
        let build = |g: &mut Graph| {
            let x = g.leaf(v(&[0.7, -0.2]));
            let t = g.tanh(x);
            let s = g.add(t, t).unwrap();
            let sq = g.square(s);
            let ones = g.leaf(Tensor::new(vec![1, 2], vec![1.0, 1.0]).unwrap());
            let out = g.affine(sq, ones, None).unwrap();
            (x, out)
        };
        let mut g = Graph::new();
        let (x, out) = build(&mut g);
        g.backward(out).unwrap();
        let first = g.grad(x).unwrap().clone();
        // d/dx (2 tanh x)^2 = 8 tanh x (1 - tanh^2 x)
        for (gv, xv) in first.data().iter().zip([0.7f64, -0.2]) {
            let t = xv.tanh();
            assert!((gv - 8.0 * t * (1.0 - t * t)).abs() < 1e-14);
        }
        g.backward(out).unwrap();
        for (a, b) in g.grad(x).unwrap().data().iter().zip(first.data()) {
            assert_eq!(*a, 2.0 * b);
        }
        g.zero_grad();
        g.backward(out).unwrap();
        assert!(g.grad(x).unwrap().bits_eq(&first));
    }

    #[test]
    fn conv_and_pool_shapes() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::zeros(&[5, 8, 6]));
        let k = g.leaf(Tensor::zeros(&[2, 5, 3, 3]));
        let b = g.leaf(Tensor::zeros(&[2]));
        let c = g.conv2d(x, k, b).unwrap();
        assert_eq!(g.value(c).shape(), &[2, 6, 4]);
        let p = g.max_pool2(c).unwrap();
        assert_eq!(g.value(p).shape(), &[2, 3, 2]);
        let bad = g.leaf(Tensor::zeros(&[2, 3, 3, 3]));
        assert!(g.conv2d(x, bad, b).is_err());
    }

    #[test]
    fn conv_pool_gradient_matches_finite_differences() {
        let mut rng = RngStream::new(21);
        let params = vec![
            Tensor::uniform(&[2, 7, 6], 1.0, &mut rng),
            Tensor::uniform(&[3, 2, 3, 3], 0.5, &mut rng),
            Tensor::uniform(&[3], 0.5, &mut rng),
            Tensor::uniform(&[1, 12], 0.5, &mut rng),
        ];
        let build = |g: &mut Graph, p: &[Tensor]| {
            let ids: Vec<NodeId> = p.iter().map(|t| g.leaf(t.clone())).collect();
            let c = g.conv2d(ids[0], ids[1], ids[2]).unwrap();
            let t = g.tanh(c);
            let m = g.max_pool2(t).unwrap();
            let flat = g.reshape(m, &[12]).unwrap();
            let out = g.affine(flat, ids[3], None).unwrap();
            let out = g.reshape(out, &[]).unwrap();
            (ids, out)
        };
        let mut g = Graph::new();
        let (ids, out) = build(&mut g, &params);
        g.backward(out).unwrap();
        for which in 0..params.len() {
            let numeric = central_difference(&params, which, 1e-6, |p| {
                let mut g = Graph::new();
                let (_, out) = build(&mut g, p);
                g.value(out).item()
            });
            let analytic = g.grad_or_zeros(ids[which]);
            let e = rel_err(analytic.data(), &numeric);
            assert!(e < 1e-6, "block {which}: {e}");
        }
    }
}
