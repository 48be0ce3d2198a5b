//! Dense tensors and the reverse-mode tape used to train every loss.

pub mod graph;
pub mod tensor;

pub use graph::{DiffError, DiffGraph, Gradients, NodeId, OpKind, StopGradientMark};
pub use tensor::{Tensor, TensorError};

pub(crate) use graph::softmax_in_place;

#[cfg(test)]
mod tests {
    use super::*;

    fn v(xs: &[f64]) -> Tensor<f64> {
        Tensor::vector(xs.to_vec())
    }

    #[test]
    fn relu_forward() {
        let mut g = DiffGraph::new();
        let x = g.leaf(v(&[-1.0, 2.0]));
        let y = g.relu(x);
        assert_eq!(g.forward(y).unwrap().data(), &[0.0, 2.0]);
    }

    #[test]
    fn softmax_of_zeros_is_uniform() {
        let mut g = DiffGraph::new();
        let x = g.leaf(v(&[0.0, 0.0]));
        let y = g.softmax(x);
        assert_eq!(g.forward(y).unwrap().data(), &[0.5, 0.5]);
    }

    #[test]
    fn symmetric_l1_of_fixed_vectors() {
        let mut g = DiffGraph::new();
        let a = g.leaf(v(&[0.3, 0.7]));
        let b = g.leaf(v(&[0.7, 0.3]));
        let d = g.sub(a, b);
        let d = g.abs(d);
        let s = g.sum(d);
        let out = g.forward(s).unwrap().data()[0];
        assert!((out - 0.8).abs() < 1e-15);
    }

    #[test]
    fn forward_is_idempotent() {
        let mut g = DiffGraph::new();
        let x = g.leaf(v(&[0.1, -0.4, 2.0]));
        let e = g.exp(x);
        let s = g.sum(e);
        let first = g.forward(s).unwrap().clone();
        let second = g.forward(s).unwrap().clone();
        assert_eq!(first, second);
    }

    #[test]
    fn unbound_leaf_is_reported() {
        let mut g = DiffGraph::<f64>::new();
        let x = g.placeholder();
        let y = g.exp(x);
        assert_eq!(g.forward(y).unwrap_err(), DiffError::UnboundLeaf { node: x });
        g.bind(x, v(&[0.0])).unwrap();
        assert_eq!(g.forward(y).unwrap().data(), &[1.0]);
    }

    #[test]
    fn non_finite_reports_offending_node() {
        let mut g = DiffGraph::new();
        let x = g.leaf(v(&[0.0]));
        let y = g.log(x);
        let z = g.sum(y);
        match g.forward(z) {
            Err(DiffError::NonFinite { node, op }) => {
                assert_eq!(node, y);
                assert_eq!(op, OpKind::Log);
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn stop_grad_blocks_adjoint() {
        // y = stop_grad(x) * w at x = 2, w = 3
        let mut g = DiffGraph::new();
        let x = g.leaf(Tensor::scalar(2.0));
        let w = g.leaf(Tensor::scalar(3.0));
        let sx = g.stop_grad(x);
        let y = g.mul(sx, w);
        let grads = g.backward(y).unwrap();
        assert_eq!(grads.get(x).data(), &[0.0]);
        assert_eq!(grads.get(w).data(), &[2.0]);
        let mark = g.stop_gradient_mark(sx).unwrap();
        assert_eq!(mark.wrapped, x);
        assert_eq!(g.value(sx), g.value(x));
    }

    #[test]
    fn softmax_sum_has_zero_gradient() {
        let mut g = DiffGraph::new();
        let x = g.leaf(v(&[0.3, -1.2, 2.5, 0.0]));
        let y = g.softmax(x);
        let s = g.sum(y);
        let grad = g.backward(s).unwrap().get(x);
        assert!(grad.data().iter().all(|v| v.abs() < 1e-15));
    }

    #[test]
    fn backward_rejects_non_scalar_root() {
        let mut g = DiffGraph::new();
        let x = g.leaf(v(&[1.0, 2.0]));
        let y = g.exp(x);
        assert!(matches!(g.backward(y), Err(DiffError::NotScalar { .. })));
    }

    #[test]
    fn disconnected_leaf_gets_zero_adjoint() {
        let mut g = DiffGraph::new();
        let x = g.leaf(v(&[1.0, 2.0]));
        let unused = g.leaf(v(&[5.0, 6.0, 7.0]));
        let s = g.sum(x);
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(unused), Tensor::zeros(&[3]));
    }

    #[test]
    fn abs_subgradient_at_zero_is_zero() {
        let mut g = DiffGraph::new();
        let x = g.leaf(v(&[0.0, 1.0, -1.0]));
        let a = g.abs(x);
        let s = g.sum(a);
        assert_eq!(g.backward(s).unwrap().get(x).data(), &[0.0, 1.0, -1.0]);
    }

    #[test]
    fn quadratic_grad_check_is_tight() {
        let mut g = DiffGraph::new();
        let x = g.leaf(v(&[1.0, 2.0]));
        let sq = g.mul(x, x);
        let s = g.sum(sq);
        let half = g.scale(s, 0.5);
        assert!(g.grad_check(half, x, 1e-6).unwrap() <= 1e-7);
    }

    #[test]
    fn bind_rejects_non_leaf() {
        let mut g = DiffGraph::new();
        let x = g.leaf(v(&[1.0]));
        let y = g.exp(x);
        assert_eq!(g.bind(y, v(&[0.0])), Err(DiffError::NotALeaf { node: y }));
    }
}
