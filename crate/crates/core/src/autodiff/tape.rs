use std::cell::RefCell;
use std::fmt;
use std::rc::Rc;

use super::tensor::{Shape, Tensor};
use super::AutodiffError;

type Result<T> = std::result::Result<T, AutodiffError>;

#[derive(Clone, Copy, Debug)]
enum Op {
    Leaf,
    Const,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, f64),
    Neg(usize),
    MatMul(usize, usize),
    Transpose(usize),
    Relu(usize),
    Sin(usize),
    Cos(usize),
    Square(usize),
    PowI(usize, i32),
    Sum(usize),
    /// Scalar repeated over a shape; adjoint of `Sum`.
    Expand(usize, Shape),
    /// `1×c` row repeated over `n` rows; adjoint of `SumRows`.
    BroadcastRows(usize, usize),
    SumRows(usize),
}

impl Op {
    fn parents(self) -> [Option<usize>; 2] {
        use Op::*;
        match self {
            Leaf | Const => [None, None],
            Add(a, b) | Sub(a, b) | Mul(a, b) | MatMul(a, b) => [Some(a), Some(b)],
            Scale(a, _)
            | Neg(a)
            | Transpose(a)
            | Relu(a)
            | Sin(a)
            | Cos(a)
            | Square(a)
            | PowI(a, _)
            | Sum(a)
            | Expand(a, _)
            | BroadcastRows(a, _)
            | SumRows(a) => [Some(a), None],
        }
    }
}

struct Node {
    value: Rc<Tensor>,
    op: Op,
}

/// An append-only computation graph.
///
/// Nodes are stored in creation order, which is also a topological order.
/// Gradients computed with `create_graph = true` are appended to the same
/// tape and can be differentiated again to any depth. A tape is confined to
/// one thread; independent tapes may live on different threads.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

impl fmt::Debug for Tape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tape").field("len", &self.len()).finish()
    }
}

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

impl fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Var")
            .field("id", &self.id)
            .field("shape", &self.shape())
            .finish()
    }
}

/// A request to differentiate a scalar `output` with respect to `inputs`.
#[derive(Clone, Copy, Debug)]
pub struct GradientRequest<'a, 't> {
    pub output: Var<'t>,
    pub inputs: &'a [Var<'t>],
    /// Keep the returned gradients differentiable.
    pub create_graph: bool,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// A differentiable input.
    pub fn leaf(&self, value: Tensor) -> Var<'_> {
        self.push(Rc::new(value), Op::Leaf)
    }

    /// A value that never receives gradients unless explicitly listed as an input.
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.push(Rc::new(value), Op::Const)
    }

    pub fn scalar(&self, v: f64) -> Var<'_> {
        self.constant(Tensor::scalar(v))
    }

    fn push(&self, value: Rc<Tensor>, op: Op) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { value, op });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    fn value(&self, id: usize) -> Rc<Tensor> {
        Rc::clone(&self.nodes.borrow()[id].value)
    }

    fn op(&self, id: usize) -> Op {
        self.nodes.borrow()[id].op
    }

    fn var(&self, id: usize) -> Var<'_> {
        Var { tape: self, id }
    }

    /// Reverse-mode gradients of `req.output` with respect to each input, in
    /// input order. Inputs that do not influence the output get exact zeros.
    ///
    /// With `create_graph = false` the backward subgraph is discarded and the
    /// results are constants.
    pub fn grad<'t>(&'t self, req: GradientRequest<'_, 't>) -> Result<Vec<Var<'t>>> {
        let GradientRequest {
            output,
            inputs,
            create_graph,
        } = req;
        self.check_owner("grad", output)?;
        for &v in inputs {
            self.check_owner("grad", v)?;
        }
        if output.shape() != Shape::SCALAR {
            return Err(AutodiffError::NonScalarOutput {
                shape: output.shape(),
            });
        }

        let mark = self.len();
        let out = output.id;
        let start = inputs.iter().map(|v| v.id).min().unwrap_or(out + 1);

        let mut adjoints: Vec<Option<Var<'t>>> = Vec::new();
        if start <= out {
            let span = out + 1 - start;
            let mut depends = vec![false; span];
            for v in inputs {
                if v.id <= out {
                    depends[v.id - start] = true;
                }
            }
            for i in start..=out {
                if depends[i - start] {
                    continue;
                }
                let reaches = self
                    .op(i)
                    .parents()
                    .iter()
                    .flatten()
                    .any(|&p| p >= start && depends[p - start]);
                depends[i - start] = reaches;
            }

            adjoints = vec![None; span];
            adjoints[out - start] = Some(self.constant(Tensor::scalar(1.0)));
            for i in (start..=out).rev() {
                if !depends[i - start] {
                    continue;
                }
                let Some(g) = adjoints[i - start] else {
                    continue;
                };
                let needed = |p: usize| p >= start && depends[p - start];
                for (parent, contribution) in self.pullback(self.op(i), g, needed) {
                    let slot = &mut adjoints[parent - start];
                    *slot = Some(match *slot {
                        Some(acc) => acc.binary(Op::Add(acc.id, contribution.id)),
                        None => contribution,
                    });
                }
            }
        }

        let grads: Vec<Var<'t>> = inputs
            .iter()
            .map(|v| {
                adjoints
                    .get(v.id.wrapping_sub(start))
                    .copied()
                    .flatten()
                    .unwrap_or_else(|| self.constant(Tensor::zeros(v.shape())))
            })
            .collect();

        if create_graph {
            return Ok(grads);
        }
        let values: Vec<Rc<Tensor>> = grads.iter().map(|g| self.value(g.id)).collect();
        self.nodes.borrow_mut().truncate(mark);
        Ok(values
            .into_iter()
            .map(|v| self.push(v, Op::Const))
            .collect())
    }

    /// Vector-Jacobian products for upstream gradient `g`, expressed as new
    /// tape nodes so they can be differentiated again. Parents for which
    /// `needed` is false are skipped.
    fn pullback<'t>(
        &'t self,
        op: Op,
        g: Var<'t>,
        needed: impl Fn(usize) -> bool,
    ) -> Vec<(usize, Var<'t>)> {
        use Op::*;
        let mut out = Vec::with_capacity(2);
        let mut emit = |parent: usize, f: &dyn Fn() -> Var<'t>| {
            if needed(parent) {
                out.push((parent, f()));
            }
        };
        match op {
            Leaf | Const => {}
            Add(a, b) => {
                emit(a, &|| g);
                emit(b, &|| g);
            }
            Sub(a, b) => {
                emit(a, &|| g);
                emit(b, &|| g.unary(Neg(g.id)));
            }
            Mul(a, b) => {
                emit(a, &|| g.binary(Mul(g.id, b)));
                emit(b, &|| g.binary(Mul(g.id, a)));
            }
            Scale(a, c) => emit(a, &|| g.unary(Scale(g.id, c))),
            Neg(a) => emit(a, &|| g.unary(Neg(g.id))),
            MatMul(a, b) => {
                emit(a, &|| {
                    let bt = self.var(b).unary(Transpose(b));
                    g.binary(MatMul(g.id, bt.id))
                });
                emit(b, &|| {
                    let at = self.var(a).unary(Transpose(a));
                    g.binary(MatMul(at.id, g.id))
                });
            }
            Transpose(a) => emit(a, &|| g.unary(Transpose(g.id))),
            Relu(a) => emit(a, &|| {
                // The step function has zero derivative almost everywhere;
                // the kink at exactly 0 takes subgradient 0.
                let mask = self.constant(self.value(a).map(|x| if x > 0.0 { 1.0 } else { 0.0 }));
                g.binary(Mul(g.id, mask.id))
            }),
            Sin(a) => emit(a, &|| {
                let c = self.var(a).unary(Cos(a));
                g.binary(Mul(g.id, c.id))
            }),
            Cos(a) => emit(a, &|| {
                let s = self.var(a).unary(Sin(a));
                let gs = g.binary(Mul(g.id, s.id));
                gs.unary(Neg(gs.id))
            }),
            Square(a) => emit(a, &|| {
                let two_a = self.var(a).unary(Scale(a, 2.0));
                g.binary(Mul(g.id, two_a.id))
            }),
            PowI(a, n) => match n {
                0 => {}
                1 => emit(a, &|| g),
                _ => emit(a, &|| {
                    let lower = self.var(a).unary(PowI(a, n - 1));
                    let d = lower.unary(Scale(lower.id, f64::from(n)));
                    g.binary(Mul(g.id, d.id))
                }),
            },
            Sum(a) => emit(a, &|| {
                let shape = self.value(a).shape();
                g.unary(Expand(g.id, shape))
            }),
            Expand(a, _) => emit(a, &|| g.unary(Sum(g.id))),
            BroadcastRows(a, _) => emit(a, &|| g.unary(SumRows(g.id))),
            SumRows(a) => emit(a, &|| {
                let n = self.value(a).shape().rows;
                g.unary(BroadcastRows(g.id, n))
            }),
        }
        out
    }

    fn check_owner(&self, op: &'static str, v: Var<'_>) -> Result<()> {
        if std::ptr::eq(self, v.tape) {
            Ok(())
        } else {
            Err(AutodiffError::ForeignTape { op })
        }
    }
}

fn eval(tape: &Tape, op: Op) -> Tensor {
    use Op::*;
    let v = |id| tape.value(id);
    match op {
        Leaf | Const => unreachable!("leaves carry their own values"),
        Add(a, b) => v(a).zip(&v(b), |x, y| x + y),
        Sub(a, b) => v(a).zip(&v(b), |x, y| x - y),
        Mul(a, b) => v(a).zip(&v(b), |x, y| x * y),
        Scale(a, c) => v(a).map(|x| c * x),
        Neg(a) => v(a).map(|x| -x),
        MatMul(a, b) => v(a).matmul(&v(b)),
        Transpose(a) => v(a).transpose(),
        Relu(a) => v(a).map(|x| x.max(0.0)),
        Sin(a) => v(a).map(f64::sin),
        Cos(a) => v(a).map(f64::cos),
        Square(a) => v(a).map(|x| x * x),
        PowI(a, n) => v(a).map(|x| x.powi(n)),
        Sum(a) => Tensor::scalar(v(a).sum()),
        Expand(a, shape) => Tensor::filled(shape, v(a).item()),
        BroadcastRows(a, n) => v(a).broadcast_rows(n),
        SumRows(a) => v(a).sum_rows(),
    }
}

impl<'t> Var<'t> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn value(&self) -> Rc<Tensor> {
        self.tape.value(self.id)
    }

    pub fn shape(&self) -> Shape {
        self.tape.nodes.borrow()[self.id].value.shape()
    }

    /// Value of a scalar node.
    pub fn item(&self) -> f64 {
        self.value().item()
    }

    pub fn is_leaf(&self) -> bool {
        matches!(self.tape.op(self.id), Op::Leaf)
    }

    /// A constant copy of this value, cut off from the graph.
    pub fn detach(&self) -> Var<'t> {
        self.tape.push(self.value(), Op::Const)
    }

    fn unary(&self, op: Op) -> Var<'t> {
        let value = eval(self.tape, op);
        self.tape.push(Rc::new(value), op)
    }

    fn binary(&self, op: Op) -> Var<'t> {
        self.unary(op)
    }

    fn same_shape(&self, op: &'static str, other: Var<'t>) -> Result<()> {
        self.tape.check_owner(op, other)?;
        let (l, r) = (self.shape(), other.shape());
        if l == r {
            Ok(())
        } else {
            Err(AutodiffError::ShapeMismatch { op, lhs: l, rhs: r })
        }
    }

    pub fn add(&self, other: Var<'t>) -> Result<Var<'t>> {
        self.same_shape("add", other)?;
        Ok(self.binary(Op::Add(self.id, other.id)))
    }

    pub fn sub(&self, other: Var<'t>) -> Result<Var<'t>> {
        self.same_shape("sub", other)?;
        Ok(self.binary(Op::Sub(self.id, other.id)))
    }

    /// Elementwise product.
    pub fn mul(&self, other: Var<'t>) -> Result<Var<'t>> {
        self.same_shape("mul", other)?;
        Ok(self.binary(Op::Mul(self.id, other.id)))
    }

    pub fn matmul(&self, other: Var<'t>) -> Result<Var<'t>> {
        self.tape.check_owner("matmul", other)?;
        let (l, r) = (self.shape(), other.shape());
        if l.cols != r.rows {
            return Err(AutodiffError::ShapeMismatch {
                op: "matmul",
                lhs: l,
                rhs: r,
            });
        }
        Ok(self.binary(Op::MatMul(self.id, other.id)))
    }

    /// Matrix times column vector.
    pub fn matvec(&self, v: Var<'t>) -> Result<Var<'t>> {
        if v.shape().cols != 1 {
            return Err(AutodiffError::ShapeMismatch {
                op: "matvec",
                lhs: self.shape(),
                rhs: v.shape(),
            });
        }
        self.matmul(v)
    }

    pub fn scale(&self, c: f64) -> Var<'t> {
        self.unary(Op::Scale(self.id, c))
    }

    pub fn neg(&self) -> Var<'t> {
        self.unary(Op::Neg(self.id))
    }

    pub fn transpose(&self) -> Var<'t> {
        self.unary(Op::Transpose(self.id))
    }

    pub fn relu(&self) -> Var<'t> {
        self.unary(Op::Relu(self.id))
    }

    pub fn sin(&self) -> Var<'t> {
        self.unary(Op::Sin(self.id))
    }

    pub fn cos(&self) -> Var<'t> {
        self.unary(Op::Cos(self.id))
    }

    pub fn square(&self) -> Var<'t> {
        self.unary(Op::Square(self.id))
    }

    pub fn powi(&self, n: i32) -> Var<'t> {
        assert!(n >= 0, "powi takes non-negative exponents");
        self.unary(Op::PowI(self.id, n))
    }

    /// Sum of all elements, as a scalar.
    pub fn sum(&self) -> Var<'t> {
        self.unary(Op::Sum(self.id))
    }

    /// Mean of all elements, as a scalar.
    pub fn mean(&self) -> Result<Var<'t>> {
        let n = self.shape().len();
        if n == 0 {
            return Err(AutodiffError::Empty { op: "mean" });
        }
        Ok(self.sum().scale(1.0 / n as f64))
    }

    /// Adds a `1×c` row to every row of an `n×c` matrix.
    pub fn add_row(&self, row: Var<'t>) -> Result<Var<'t>> {
        self.tape.check_owner("add_row", row)?;
        let (l, r) = (self.shape(), row.shape());
        if r.rows != 1 || r.cols != l.cols {
            return Err(AutodiffError::ShapeMismatch {
                op: "add_row",
                lhs: l,
                rhs: r,
            });
        }
        let expanded = row.unary(Op::BroadcastRows(row.id, l.rows));
        Ok(self.binary(Op::Add(self.id, expanded.id)))
    }

    /// Column sums as a `1×c` row.
    pub fn sum_rows(&self) -> Var<'t> {
        self.unary(Op::SumRows(self.id))
    }
}

/// Sum of same-shaped values. Errors on an empty list.
pub fn sum_all<'t>(values: &[Var<'t>]) -> Result<Var<'t>> {
    let (first, rest) = values
        .split_first()
        .ok_or(AutodiffError::Empty { op: "sum_all" })?;
    rest.iter().try_fold(*first, |acc, v| acc.add(*v))
}

/// Mean of same-shaped values. Errors on an empty list.
pub fn mean_all<'t>(values: &[Var<'t>]) -> Result<Var<'t>> {
    Ok(sum_all(values)?.scale(1.0 / values.len() as f64))
}

macro_rules! binary_operator {
    ($trait:ident, $method:ident) => {
        impl<'t> std::ops::$trait for Var<'t> {
            type Output = Var<'t>;

            /// Panics on shape mismatch; use the inherent method for a `Result`.
            fn $method(self, rhs: Var<'t>) -> Var<'t> {
                Var::$method(&self, rhs).unwrap_or_else(|e| panic!("{e}"))
            }
        }
    };
}

binary_operator!(Add, add);
binary_operator!(Sub, sub);
binary_operator!(Mul, mul);

impl<'t> std::ops::Neg for Var<'t> {
    type Output = Var<'t>;

    fn neg(self) -> Var<'t> {
        Var::neg(&self)
    }
}
