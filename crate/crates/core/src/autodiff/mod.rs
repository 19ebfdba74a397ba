//! Reverse-mode automatic differentiation over dense `f64` tensors.
//!
//! A [`Tape`] lives for one loss evaluation. Leaves are registered either as
//! trainable parameters or as constants; only trainable leaves appear in the
//! [`Gradients`] returned by [`Tape::backward`]. Broadcasting is limited to
//! scalars (empty shape) in `add`, `sub` and `mul`; row-wise bias addition
//! has its own op.

mod gradcheck;
mod tape;
mod tensor;

pub use gradcheck::{check_gradient, finite_difference_gradient, max_relative_error, reverse_gradient};
pub use tape::{Activation, Gradients, Tape, Var};
pub use tensor::Tensor;

#[cfg(test)]
mod tests {
    use super::*;
    use crate::error::Error;
    use proptest::prelude::*;

    fn vec_t(v: &[f64]) -> Tensor {
        Tensor::vector(v.to_vec())
    }

    fn mat(r: usize, c: usize, v: &[f64]) -> Tensor {
        Tensor::matrix(r, c, v.to_vec()).unwrap()
    }

    #[test]
    fn elementwise_examples() {
        let tape = Tape::new();
        let a = tape.constant(vec_t(&[1.0, 2.0]));
        let b = tape.constant(vec_t(&[3.0, 4.0]));
        assert_eq!(a.add(b).unwrap().value().data(), &[4.0, 6.0]);

        let c = tape.constant(vec_t(&[2.0, 3.0]));
        let zero = tape.constant(Tensor::scalar(0.0));
        assert_eq!(c.mul(zero).unwrap().value().data(), &[0.0, 0.0]);
    }

    #[test]
    fn sub_self_is_zero_with_zero_gradient() {
        let tape = Tape::new();
        let x = tape.param(vec_t(&[0.3, -1.2, 4.0]));
        let loss = x.sub(x).unwrap().sum();
        assert_eq!(loss.item(), 0.0);
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.wrt(x).data(), &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn shape_mismatch_names_both_shapes() {
        let tape = Tape::new();
        let a = tape.constant(vec_t(&[1.0, 2.0]));
        let b = tape.constant(vec_t(&[1.0, 2.0, 3.0]));
        let err = a.add(b).unwrap_err();
        match &err {
            Error::ShapeMismatch { left, right, .. } => {
                assert_eq!(left, &vec![2]);
                assert_eq!(right, &vec![3]);
            }
            other => panic!("unexpected {other:?}"),
        }
        assert!(err.to_string().contains("[2]") && err.to_string().contains("[3]"));
    }

    #[test]
    fn matmul_examples() {
        let tape = Tape::new();
        let eye = tape.constant(mat(2, 2, &[1.0, 0.0, 0.0, 1.0]));
        let v = tape.constant(mat(2, 1, &[5.0, 7.0]));
        assert_eq!(eye.matmul(v).unwrap().value().data(), &[5.0, 7.0]);

        let a = tape.constant(mat(2, 2, &[1.0, 2.0, 3.0, 4.0]));
        let x = tape.param(mat(2, 1, &[1.0, 1.0]));
        let y = a.matmul(x).unwrap();
        assert_eq!(y.value().data(), &[3.0, 7.0]);
        let g = tape.backward(y.sum()).unwrap();
        // column sums of A
        assert_eq!(g.wrt(x).data(), &[4.0, 6.0]);
    }

    #[test]
    fn matmul_dimension_mismatch() {
        let tape = Tape::new();
        let a = tape.constant(mat(2, 3, &[0.0; 6]));
        let b = tape.constant(mat(2, 2, &[0.0; 4]));
        assert!(matches!(a.matmul(b), Err(Error::ShapeMismatch { .. })));
    }

    #[test]
    fn activation_examples() {
        assert!((Activation::Softplus.apply(0.0) - 2f64.ln()).abs() < 1e-15);
        assert_eq!(Activation::Relu.apply(-3.0), 0.0);
        assert_eq!(Activation::Tanh.apply(0.0), 0.0);
        assert_eq!(Activation::Tanh.derivative(0.0), 1.0);
        // no overflow far out in either tail
        assert_eq!(Activation::Softplus.apply(800.0), 800.0);
        assert_eq!(Activation::Softplus.apply(-800.0), 0.0);
    }

    #[test]
    fn reductions() {
        let tape = Tape::new();
        let a = tape.param(vec_t(&[3.0, 4.0]));
        assert_eq!(a.norm_sq().item(), 25.0);
        assert_eq!(tape.constant(Tensor::zeros(&[3])).sum().item(), 0.0);

        let b = tape.param(vec_t(&[1.0, -2.0]));
        let g = tape.backward(b.norm_sq()).unwrap();
        assert_eq!(g.wrt(b).data(), &[2.0, -4.0]);
    }

    #[test]
    fn backward_examples() {
        // d(w^2 x^2)/dw = 2 w x^2 = 36
        let tape = Tape::new();
        let w = tape.param(Tensor::scalar(2.0));
        let x = tape.constant(vec_t(&[3.0]));
        let loss = w.mul(x).unwrap().norm_sq();
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.wrt(w).item(), 36.0);

        // loss independent of a leaf
        let tape = Tape::new();
        let unused = tape.param(vec_t(&[1.0, 2.0]));
        let other = tape.param(vec_t(&[1.0]));
        let g = tape.backward(other.norm_sq()).unwrap();
        assert_eq!(g.wrt(unused).data(), &[0.0, 0.0]);

        // shared subgraph: d/dx ||x + x||^2 = 8x
        let tape = Tape::new();
        let x = tape.param(vec_t(&[0.5, -1.5]));
        let f = x.scale(1.0);
        let loss = f.add(f).unwrap().norm_sq();
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.wrt(x).data(), &[4.0, -12.0]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let tape = Tape::new();
        let x = tape.param(vec_t(&[1.0, 2.0]));
        assert!(tape.backward(x).is_err());
    }

    #[test]
    fn constants_get_no_gradient() {
        let tape = Tape::new();
        let c = tape.constant(vec_t(&[1.0, 2.0]));
        let p = tape.param(vec_t(&[1.0, 1.0]));
        let g = tape.backward(c.mul(p).unwrap().sum()).unwrap();
        assert!(g.get(c).is_none());
        assert_eq!(g.wrt(p).data(), &[1.0, 2.0]);
    }

    #[test]
    fn finite_difference_examples() {
        let g = finite_difference_gradient(|xs| Ok(xs[0].norm_sq()), &[vec_t(&[1.0, 2.0])], 1e-6).unwrap();
        assert!((g[0].data()[0] - 2.0).abs() < 1e-6);
        assert!((g[0].data()[1] - 4.0).abs() < 1e-6);

        let g = finite_difference_gradient(|_| Ok(3.0), &[vec_t(&[1.0, 2.0])], 1e-6).unwrap();
        assert_eq!(g[0].data(), &[0.0, 0.0]);
    }

    #[test]
    fn fan_out_sums_consumer_gradients() {
        // y feeds two consumers; total gradient equals the sum of each alone
        let x0 = mat(2, 2, &[0.3, -0.7, 1.1, 0.2]);
        let both = |tape: &Tape| {
            let x = tape.param(x0.clone());
            let y = x.activation(Activation::Tanh);
            let l1 = y.norm_sq();
            let l2 = y.scale(3.0).sum();
            let loss = l1.add(l2).unwrap();
            tape.backward(loss).unwrap().wrt(x)
        };
        let only = |tape: &Tape, first: bool| {
            let x = tape.param(x0.clone());
            let y = x.activation(Activation::Tanh);
            let loss = if first { y.norm_sq() } else { y.scale(3.0).sum() };
            tape.backward(loss).unwrap().wrt(x)
        };
        let total = both(&Tape::new());
        let a = only(&Tape::new(), true);
        let b = only(&Tape::new(), false);
        for i in 0..4 {
            assert!((total.data()[i] - a.data()[i] - b.data()[i]).abs() < 1e-15);
        }
    }

    fn leaf(len: usize) -> impl Strategy<Value = Vec<f64>> {
        prop::collection::vec(-2.0f64..2.0, len)
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        #[test]
        fn every_op_matches_finite_differences(
            a in leaf(6), b in leaf(6), w in leaf(6), bias in leaf(2), s in -2.0f64..2.0,
        ) {
            let leaves = [
                mat(3, 2, &a),
                mat(3, 2, &b),
                mat(2, 3, &w),
                vec_t(&bias),
                Tensor::scalar(s),
            ];
            for kind in [Activation::Softplus, Activation::Tanh] {
                let err = check_gradient(
                    |_t, v| {
                        let sum = v[0].add(v[1])?;
                        let diff = v[0].sub(v[1])?;
                        let prod = sum.mul(diff)?.mul(v[4])?;
                        let hidden = prod.matmul(v[2])?.activation(kind);
                        let joined = v[0].concat_cols(prod)?.scale(0.7);
                        let biased = v[0].add_bias(v[3])?.activation(kind);
                        hidden
                            .norm_sq()
                            .add(joined.norm_sq())?
                            .add(biased.sum())?
                            .add(v[4].mul(v[4])?)
                    },
                    &leaves,
                    1e-6,
                ).unwrap();
                prop_assert!(err < 1e-4, "{kind:?}: rel err {err}");
            }
        }
    }
}
