//! Dense tensors with reverse-mode differentiation.

pub mod svd;
mod tape;
mod tensor;

pub use tape::{leaky_softmax, softmax, Tape, Var};
pub use tensor::Tensor;

#[cfg(test)]
mod tests {
    use super::*;
    use crate::Error;
    use alloc::vec;

    #[test]
    fn sum_has_unit_gradient() {
        let mut t = Tape::new();
        let w = t.param(Tensor::vector(vec![0.3, -1.0, 2.0]));
        let l = t.sum(w).unwrap();
        t.backward(l).unwrap();
        assert_eq!(t.grad(w).unwrap().data(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn square_gradient_is_two_w() {
        let mut t = Tape::new();
        let w = t.param(Tensor::vector(vec![1.0, 2.0, 3.0]));
        let sq = t.mul(w, w).unwrap();
        let l = t.sum(sq).unwrap();
        t.backward(l).unwrap();
        assert_eq!(t.grad(w).unwrap().data(), &[2.0, 4.0, 6.0]);
    }

    #[test]
    fn repeated_backward_accumulates() {
        let mut t = Tape::new();
        let w = t.param(Tensor::vector(vec![1.0, 2.0]));
        let l = t.sum(w).unwrap();
        t.backward(l).unwrap();
        t.backward(l).unwrap();
        assert_eq!(t.grad(w).unwrap().data(), &[2.0, 2.0]);
        t.zero_grad();
        t.backward(l).unwrap();
        assert_eq!(t.grad(w).unwrap().data(), &[1.0, 1.0]);
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut t = Tape::new();
        let w = t.param(Tensor::vector(vec![1.0, 2.0]));
        assert_eq!(t.backward(w), Err(Error::NonScalarLoss(vec![2])));
    }

    #[test]
    fn non_finite_forward_names_the_node() {
        let mut t = Tape::new();
        let w = t.param(Tensor::vector(vec![0.0, 1.0]));
        match t.ln(w) {
            Err(Error::NonFinite { op, node }) => {
                assert_eq!(op, "ln");
                assert_eq!(node, 1);
            }
            other => panic!("expected NonFinite, got {other:?}"),
        }
    }

    #[test]
    fn gradient_reversal_forward_is_identity() {
        let mut t = Tape::new();
        let x = t.param(Tensor::vector(vec![1.5, -2.0]));
        let y = t.gradient_reversal(x, 1.0).unwrap();
        assert_eq!(t.value(y).data(), &[1.5, -2.0]);
        // Upstream gradient of ones through coeff 1.
        let l = t.sum(y).unwrap();
        t.backward(l).unwrap();
        assert_eq!(t.grad(x).unwrap().data(), &[-1.0, -1.0]);
    }

    #[test]
    fn gradient_reversal_scales_by_coeff() {
        let mut t = Tape::new();
        let w = t.param(Tensor::vector(vec![0.1, 7.0, -3.0]));
        let y = t.gradient_reversal(w, 2.0).unwrap();
        let l = t.sum(y).unwrap();
        t.backward(l).unwrap();
        assert_eq!(t.grad(w).unwrap().data(), &[-2.0, -2.0, -2.0]);
        assert!(t.gradient_reversal(w, 0.0).is_err());
    }

    #[test]
    fn stop_gradient_cuts_one_branch() {
        let mut t = Tape::new();
        let w = t.param(Tensor::vector(vec![0.2]));
        let s = t.stop_gradient(w).unwrap();
        assert_eq!(t.value(s).data(), &[0.2]);
        let l = t.sum(s).unwrap();
        t.backward(l).unwrap();
        assert_eq!(t.grad(w).unwrap().data(), &[0.0]);

        let mut t = Tape::new();
        let w = t.param(Tensor::vector(vec![3.0]));
        let s = t.stop_gradient(w).unwrap();
        let p = t.mul(w, s).unwrap();
        let l = t.sum(p).unwrap();
        t.backward(l).unwrap();
        assert_eq!(t.grad(w).unwrap().data(), &[3.0]);
    }

    #[test]
    fn nuclear_norm_examples() {
        let cases: [(&[f64], f64); 3] = [
            (&[1.0, 0.0, 0.0, 1.0], 2.0),
            (&[1.0, 0.0, 1.0, 0.0], core::f64::consts::SQRT_2),
            (&[0.0, 0.0, 0.0, 0.0], 0.0),
        ];
        for (rows, expected) in cases {
            let mut t = Tape::new();
            let a = t.param(Tensor::new(vec![2, 2], rows.to_vec()).unwrap());
            let n = t.nuclear_norm(a).unwrap();
            assert!((t.value(n).item() - expected).abs() < 1e-12);
        }
    }

    #[test]
    fn nuclear_norm_gradient_is_polar_factor() {
        // diag(3, 1): U V^T = I
        let mut t = Tape::new();
        let a = t.param(Tensor::new(vec![2, 2], vec![3.0, 0.0, 0.0, 1.0]).unwrap());
        let n = t.nuclear_norm(a).unwrap();
        t.backward(n).unwrap();
        let g = t.grad(a).unwrap().data();
        for (x, y) in g.iter().zip(&[1.0, 0.0, 0.0, 1.0]) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn softmax_examples() {
        assert_eq!(softmax(&[0.0, 0.0]), vec![0.5, 0.5]);
        let p = softmax(&[libm::log(3.0), 0.0]);
        assert!((p[0] - 0.75).abs() < 1e-15 && (p[1] - 0.25).abs() < 1e-15);
        let p = leaky_softmax(&[0.0, 0.0]);
        assert_eq!(p, vec![0.25, 0.25]);
    }
}
