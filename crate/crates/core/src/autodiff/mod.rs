//! Reverse-mode automatic differentiation whose gradients are themselves
//! differentiable, so gradient-of-gradient-of-gradient chains work.

mod gradcheck;
mod tape;
mod tensor;

use thiserror::Error;

pub use gradcheck::{check_tape_fn, finite_diff_check, GradCheck};
pub use tape::{mean_all, sum_all, GradientRequest, Tape, Var};
pub use tensor::{Shape, Tensor};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AutodiffError {
    #[error("{op}: shape mismatch between {lhs} and {rhs}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Shape,
        rhs: Shape,
    },
    #[error("grad: output must be scalar, got shape {shape}")]
    NonScalarOutput { shape: Shape },
    #[error("{op}: empty operand")]
    Empty { op: &'static str },
    #[error("{op}: operand belongs to a different tape")]
    ForeignTape { op: &'static str },
    #[error("finite difference epsilon {0} outside [1e-7, 1e-3]")]
    InvalidEpsilon(f64),
    #[error("gradient has {got} entries, parameters have {expected}")]
    LengthMismatch { expected: usize, got: usize },
    #[error("non-finite function value {value} at probe coordinate {index}")]
    NonFiniteProbe { index: usize, value: f64 },
}

/// Convenience wrapper around [`Tape::grad`].
pub fn grad<'t>(
    output: Var<'t>,
    inputs: &[Var<'t>],
    create_graph: bool,
) -> Result<Vec<Var<'t>>, AutodiffError> {
    output.tape().grad(GradientRequest {
        output,
        inputs,
        create_graph,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn x_leaf(tape: &Tape, v: f64) -> Var<'_> {
        tape.leaf(Tensor::scalar(v))
    }

    #[test]
    fn relu_negative_branch_is_zero() {
        let tape = Tape::new();
        assert_eq!(tape.scalar(-1.5).relu().item(), 0.0);
    }

    #[test]
    fn matvec_identity() {
        let tape = Tape::new();
        let eye = tape.constant(Tensor::identity(2));
        let v = tape.constant(Tensor::column(vec![3.0, 4.0]));
        assert_eq!(eye.matvec(v).unwrap().value().data(), &[3.0, 4.0]);
    }

    #[test]
    fn mean_of_squared_difference() {
        let tape = Tape::new();
        let a = tape.constant(Tensor::column(vec![1.0, 2.0]));
        let z = tape.constant(Tensor::column(vec![0.0, 0.0]));
        let m = a.sub(z).unwrap().square().mean().unwrap();
        assert_eq!(m.item(), 2.5);
    }

    #[test]
    fn shape_mismatch_names_op_and_shapes() {
        let tape = Tape::new();
        let a = tape.constant(Tensor::column(vec![1.0, 2.0]));
        let b = tape.constant(Tensor::column(vec![1.0, 2.0, 3.0]));
        let err = a.add(b).unwrap_err();
        assert_eq!(
            err,
            AutodiffError::ShapeMismatch {
                op: "add",
                lhs: Shape::new(2, 1),
                rhs: Shape::new(3, 1)
            }
        );
        assert!(err.to_string().contains("2x1"));
        assert!(matches!(
            a.matmul(b),
            Err(AutodiffError::ShapeMismatch { op: "matmul", .. })
        ));
    }

    #[test]
    fn first_derivative_of_square() {
        let tape = Tape::new();
        let x = x_leaf(&tape, 3.0);
        let g = grad(x.square(), &[x], false).unwrap();
        assert_eq!(g[0].item(), 6.0);
    }

    #[test]
    fn second_derivative_of_cube() {
        let tape = Tape::new();
        let x = x_leaf(&tape, 2.0);
        let y = x * x * x;
        let d1 = grad(y, &[x], true).unwrap()[0];
        let d2 = grad(d1, &[x], false).unwrap()[0];
        assert_eq!(d2.item(), 12.0);
    }

    #[test]
    fn third_derivative_of_quartic() {
        let tape = Tape::new();
        let x = x_leaf(&tape, 1.0);
        let y = x.powi(4);
        let d1 = grad(y, &[x], true).unwrap()[0];
        let d2 = grad(d1, &[x], true).unwrap()[0];
        let d3 = grad(d2, &[x], false).unwrap()[0];
        assert_eq!(d3.item(), 24.0);
    }

    #[test]
    fn non_scalar_output_is_rejected() {
        let tape = Tape::new();
        let x = tape.leaf(Tensor::column(vec![1.0, 2.0]));
        assert!(matches!(
            grad(x.square(), &[x], false),
            Err(AutodiffError::NonScalarOutput { .. })
        ));
    }

    #[test]
    fn unreachable_input_gets_exact_zero() {
        let tape = Tape::new();
        let x = x_leaf(&tape, 1.0);
        let y = tape.leaf(Tensor::column(vec![5.0, 6.0]));
        let g = grad(x.sin(), &[x, y], false).unwrap();
        assert_eq!(g[1].value().data(), &[0.0, 0.0]);
        assert_eq!(g[0].item(), 1.0f64.cos());
    }

    #[test]
    fn input_created_after_output_gets_zero() {
        let tape = Tape::new();
        let x = x_leaf(&tape, 1.0);
        let out = x.square();
        let late = x_leaf(&tape, 2.0);
        let g = grad(out, &[late, x], false).unwrap();
        assert_eq!(g[0].item(), 0.0);
        assert_eq!(g[1].item(), 2.0);
    }

    #[test]
    fn relu_kink_uses_zero_subgradient() {
        let tape = Tape::new();
        let x = x_leaf(&tape, 0.0);
        assert_eq!(grad(x.relu(), &[x], false).unwrap()[0].item(), 0.0);
        let x = x_leaf(&tape, 0.5);
        assert_eq!(grad(x.relu(), &[x], false).unwrap()[0].item(), 1.0);
    }

    #[test]
    fn gradients_without_create_graph_are_constants_and_free_the_subgraph() {
        let tape = Tape::new();
        let x = x_leaf(&tape, 2.0);
        let y = x.powi(3);
        let before = tape.len();
        let g = grad(y, &[x], false).unwrap()[0];
        assert_eq!(tape.len(), before + 1);
        assert!(!g.is_leaf());
        // A constant gradient carries no dependence on x.
        assert_eq!(grad(g, &[x], false).unwrap()[0].item(), 0.0);
    }

    #[test]
    fn vector_chain_through_matmul_and_bias() {
        // f(W, b) = sum(relu(X W + b)^2) for X = [[1], [2]]
        let tape = Tape::new();
        let x = tape.constant(Tensor::column(vec![1.0, 2.0]));
        let w = tape.leaf(Tensor::row(vec![0.5, -1.0]));
        let b = tape.leaf(Tensor::row(vec![0.1, 3.0]));
        let h = x.matmul(w).unwrap().add_row(b).unwrap().relu();
        let f = h.square().sum();
        let g = grad(f, &[w, b], false).unwrap();
        // Column 0: pre = [0.6, 1.1]; column 1: pre = [2.0, 1.0].
        let dw0 = 2.0 * 0.6 * 1.0 + 2.0 * 1.1 * 2.0;
        let dw1 = 2.0 * 2.0 * 1.0 + 2.0 * 1.0 * 2.0;
        let db0 = 2.0 * 0.6 + 2.0 * 1.1;
        let db1 = 2.0 * 2.0 + 2.0 * 1.0;
        let close = |a: f64, b: f64| (a - b).abs() < 1e-12;
        assert!(close(g[0].value().get(0, 0), dw0));
        assert!(close(g[0].value().get(0, 1), dw1));
        assert!(close(g[1].value().get(0, 0), db0));
        assert!(close(g[1].value().get(0, 1), db1));
    }

    #[test]
    fn mixed_partials_commute() {
        let tape = Tape::new();
        let x = x_leaf(&tape, 0.7);
        let y = x_leaf(&tape, -1.3);
        let f = (x * y).sin() + x.powi(3) * y.square();
        let g = grad(f, &[x, y], true).unwrap();
        let dxy = grad(g[0], &[y], false).unwrap()[0].item();
        let dyx = grad(g[1], &[x], false).unwrap()[0].item();
        assert!((dxy - dyx).abs() < 1e-10, "{dxy} vs {dyx}");
    }

    #[test]
    fn foreign_tape_is_an_error() {
        let t1 = Tape::new();
        let t2 = Tape::new();
        let a = t1.scalar(1.0);
        let b = t2.scalar(1.0);
        assert!(matches!(a.add(b), Err(AutodiffError::ForeignTape { .. })));
    }

    #[test]
    fn empty_sum_all_errors() {
        assert!(sum_all(&[]).is_err());
    }
}
