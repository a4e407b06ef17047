//! Wengert tape: every primitive applied to a [`Var`] is appended to the
//! owning [`Tape`]; [`Tape::grad`] walks the record in reverse.
//!
//! The reverse sweep is itself written in terms of tape primitives. When the
//! tape was created with `higher_order = true` those primitives are recorded
//! like any forward op, so the returned gradients are differentiable and a
//! second `grad` call yields Hessian-vector products. On a first-order tape
//! the sweep runs with recording switched off and gradients come back as
//! detached constants.

use std::cell::{Cell, Ref, RefCell};
use std::fmt;
use std::ops;
use std::rc::Rc;
use std::str::FromStr;

use crate::array::Array;
use crate::error::AdError;

/// Names of the recordable primitives.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Primitive {
    Leaf,
    Constant,
    StopGradient,
    Add,
    Sub,
    Mul,
    Div,
    Neg,
    Scale,
    Offset,
    MatMul,
    Transpose,
    Sum,
    Mean,
    SumRows,
    SumCols,
    BroadcastRows,
    BroadcastCols,
    BroadcastScalar,
    Square,
    Sqrt,
    Exp,
    Sigmoid,
    Relu,
    Silu,
    Sin,
    Cos,
    Softmax,
    ConcatCols,
    SliceCols,
    PadCols,
    Reshape,
}

impl Primitive {
    pub fn name(self) -> &'static str {
        use Primitive::*;
        match self {
            Leaf => "leaf",
            Constant => "constant",
            StopGradient => "stop_gradient",
            Add => "add",
            Sub => "sub",
            Mul => "mul",
            Div => "div",
            Neg => "neg",
            Scale => "scale",
            Offset => "offset",
            MatMul => "matmul",
            Transpose => "transpose",
            Sum => "sum",
            Mean => "mean",
            SumRows => "sum_rows",
            SumCols => "sum_cols",
            BroadcastRows => "broadcast_rows",
            BroadcastCols => "broadcast_cols",
            BroadcastScalar => "broadcast_scalar",
            Square => "square",
            Sqrt => "sqrt",
            Exp => "exp",
            Sigmoid => "sigmoid",
            Relu => "relu",
            Silu => "silu",
            Sin => "sin",
            Cos => "cos",
            Softmax => "softmax",
            ConcatCols => "concat",
            SliceCols => "slice",
            PadCols => "pad",
            Reshape => "reshape",
        }
    }
}

impl fmt::Display for Primitive {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Primitive {
    type Err = AdError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        use Primitive::*;
        const ALL: [Primitive; 32] = [
            Leaf, Constant, StopGradient, Add, Sub, Mul, Div, Neg, Scale, Offset, MatMul,
            Transpose, Sum, Mean, SumRows, SumCols, BroadcastRows, BroadcastCols,
            BroadcastScalar, Square, Sqrt, Exp, Sigmoid, Relu, Silu, Sin, Cos, Softmax,
            ConcatCols, SliceCols, PadCols, Reshape,
        ];
        ALL.into_iter()
            .find(|p| p.name() == s)
            .ok_or_else(|| AdError::UnsupportedPrimitive(s.to_string()))
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Constant,
    StopGradient(usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    Neg(usize),
    Scale(usize, f64),
    Offset(usize, f64),
    MatMul(usize, usize),
    Transpose(usize),
    Sum(usize),
    Mean(usize),
    SumRows(usize),
    SumCols(usize),
    BroadcastRows(usize, usize),
    BroadcastCols(usize, usize),
    BroadcastScalar(usize, usize, usize),
    Square(usize),
    Sqrt(usize),
    Exp(usize),
    Sigmoid(usize),
    Relu(usize),
    Silu(usize),
    Sin(usize),
    Cos(usize),
    Softmax(usize),
    ConcatCols(Vec<usize>),
    SliceCols(usize, usize, usize),
    PadCols(usize, usize, usize),
    Reshape(usize, usize, usize),
}

impl Op {
    fn primitive(&self) -> Primitive {
        match self {
            Op::Leaf => Primitive::Leaf,
            Op::Constant => Primitive::Constant,
            Op::StopGradient(_) => Primitive::StopGradient,
            Op::Add(..) => Primitive::Add,
            Op::Sub(..) => Primitive::Sub,
            Op::Mul(..) => Primitive::Mul,
            Op::Div(..) => Primitive::Div,
            Op::Neg(_) => Primitive::Neg,
            Op::Scale(..) => Primitive::Scale,
            Op::Offset(..) => Primitive::Offset,
            Op::MatMul(..) => Primitive::MatMul,
            Op::Transpose(_) => Primitive::Transpose,
            Op::Sum(_) => Primitive::Sum,
            Op::Mean(_) => Primitive::Mean,
            Op::SumRows(_) => Primitive::SumRows,
            Op::SumCols(_) => Primitive::SumCols,
            Op::BroadcastRows(..) => Primitive::BroadcastRows,
            Op::BroadcastCols(..) => Primitive::BroadcastCols,
            Op::BroadcastScalar(..) => Primitive::BroadcastScalar,
            Op::Square(_) => Primitive::Square,
            Op::Sqrt(_) => Primitive::Sqrt,
            Op::Exp(_) => Primitive::Exp,
            Op::Sigmoid(_) => Primitive::Sigmoid,
            Op::Relu(_) => Primitive::Relu,
            Op::Silu(_) => Primitive::Silu,
            Op::Sin(_) => Primitive::Sin,
            Op::Cos(_) => Primitive::Cos,
            Op::Softmax(_) => Primitive::Softmax,
            Op::ConcatCols(_) => Primitive::ConcatCols,
            Op::SliceCols(..) => Primitive::SliceCols,
            Op::PadCols(..) => Primitive::PadCols,
            Op::Reshape(..) => Primitive::Reshape,
        }
    }

    fn parents(&self) -> Vec<usize> {
        match self {
            Op::Leaf | Op::Constant => vec![],
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::Div(a, b) | Op::MatMul(a, b) => {
                vec![*a, *b]
            }
            Op::ConcatCols(parts) => parts.clone(),
            Op::StopGradient(a)
            | Op::Neg(a)
            | Op::Scale(a, _)
            | Op::Offset(a, _)
            | Op::Transpose(a)
            | Op::Sum(a)
            | Op::Mean(a)
            | Op::SumRows(a)
            | Op::SumCols(a)
            | Op::BroadcastRows(a, _)
            | Op::BroadcastCols(a, _)
            | Op::BroadcastScalar(a, _, _)
            | Op::Square(a)
            | Op::Sqrt(a)
            | Op::Exp(a)
            | Op::Sigmoid(a)
            | Op::Relu(a)
            | Op::Silu(a)
            | Op::Sin(a)
            | Op::Cos(a)
            | Op::Softmax(a)
            | Op::SliceCols(a, _, _)
            | Op::PadCols(a, _, _)
            | Op::Reshape(a, _, _) => vec![*a],
        }
    }
}

fn sigmoid(v: f64) -> f64 {
    1.0 / (1.0 + (-v).exp())
}

fn check_same_shape(op: Primitive, a: &Array, b: &Array) {
    assert!(
        a.shape() == b.shape(),
        "{op}: shape mismatch {:?} vs {:?}",
        a.shape(),
        b.shape()
    );
}

/// Forward kernel shared by recording and [`Tape::replay`].
fn eval_op(op: &Op, value: &dyn Fn(usize) -> Rc<Array>) -> Array {
    let prim = op.primitive();
    match op {
        Op::Leaf | Op::Constant => unreachable!("leaves carry their own value"),
        Op::StopGradient(a) => (*value(*a)).clone(),
        Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::Div(a, b) => {
            let (x, y) = (value(*a), value(*b));
            check_same_shape(prim, &x, &y);
            match op {
                Op::Add(..) => x.zip_with(&y, |p, q| p + q),
                Op::Sub(..) => x.zip_with(&y, |p, q| p - q),
                Op::Mul(..) => x.zip_with(&y, |p, q| p * q),
                _ => x.zip_with(&y, |p, q| p / q),
            }
        }
        Op::Neg(a) => value(*a).map(|v| -v),
        Op::Scale(a, c) => value(*a).map(|v| v * c),
        Op::Offset(a, c) => value(*a).map(|v| v + c),
        Op::MatMul(a, b) => value(*a).matmul(&value(*b)),
        Op::Transpose(a) => value(*a).transpose(),
        Op::Sum(a) => Array::scalar(value(*a).sum()),
        Op::Mean(a) => {
            let x = value(*a);
            Array::scalar(x.sum() / x.len() as f64)
        }
        Op::SumRows(a) => value(*a).sum_rows(),
        Op::SumCols(a) => value(*a).sum_cols(),
        Op::BroadcastRows(a, rows) => value(*a).broadcast_rows(*rows),
        Op::BroadcastCols(a, cols) => value(*a).broadcast_cols(*cols),
        Op::BroadcastScalar(a, rows, cols) => Array::filled(*rows, *cols, value(*a).item()),
        Op::Square(a) => value(*a).map(|v| v * v),
        Op::Sqrt(a) => value(*a).map(f64::sqrt),
        Op::Exp(a) => value(*a).map(f64::exp),
        Op::Sigmoid(a) => value(*a).map(sigmoid),
        Op::Relu(a) => value(*a).map(|v| v.max(0.0)),
        Op::Silu(a) => value(*a).map(|v| v * sigmoid(v)),
        Op::Sin(a) => value(*a).map(f64::sin),
        Op::Cos(a) => value(*a).map(f64::cos),
        Op::Softmax(a) => value(*a).softmax_rows(),
        Op::ConcatCols(parts) => {
            let vals: Vec<Rc<Array>> = parts.iter().map(|p| value(*p)).collect();
            let refs: Vec<&Array> = vals.iter().map(|v| v.as_ref()).collect();
            Array::concat_cols(&refs)
        }
        Op::SliceCols(a, s, e) => value(*a).slice_cols(*s, *e),
        Op::PadCols(a, s, total) => value(*a).pad_cols(*s, *total),
        Op::Reshape(a, rows, cols) => (*value(*a)).clone().reshaped(*rows, *cols),
    }
}

struct Node {
    value: Rc<Array>,
    op: Op,
    /// Whether gradients flow through this node.
    tracked: bool,
}

/// An ordered record of primitive applications.
///
/// Parents always precede children. A tape is single-threaded; independent
/// tapes can live on separate threads.
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    higher_order: bool,
    recording: Cell<bool>,
    non_finite: Cell<Option<(usize, Primitive)>>,
}

impl Default for Tape {
    fn default() -> Self {
        Tape::new()
    }
}

impl Tape {
    /// First-order tape: gradients are detached constants.
    pub fn new() -> Self {
        Tape::with_higher_order(false)
    }

    /// Tape whose reverse sweeps are recorded, so gradients can be
    /// differentiated again.
    pub fn higher_order() -> Self {
        Tape::with_higher_order(true)
    }

    pub fn with_higher_order(higher_order: bool) -> Self {
        Tape {
            nodes: RefCell::new(Vec::new()),
            higher_order,
            recording: Cell::new(true),
            non_finite: Cell::new(None),
        }
    }

    pub fn is_higher_order(&self) -> bool {
        self.higher_order
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// A differentiable input.
    pub fn leaf(&self, value: Array) -> Var<'_> {
        self.push_raw(value, Op::Leaf, true)
    }

    /// A value gradients never flow into.
    pub fn constant(&self, value: Array) -> Var<'_> {
        self.push_raw(value, Op::Constant, false)
    }

    pub fn scalar(&self, v: f64) -> Var<'_> {
        self.constant(Array::scalar(v))
    }

    fn push_raw(&self, value: Array, op: Op, tracked: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        let id = nodes.len();
        if self.non_finite.get().is_none() && !value.all_finite() {
            self.non_finite.set(Some((id, op.primitive())));
        }
        nodes.push(Node { value: Rc::new(value), op, tracked });
        Var { tape: self, id }
    }

    fn push(&self, op: Op) -> Var<'_> {
        let (value, tracked) = {
            let nodes = self.nodes.borrow();
            let value = eval_op(&op, &|i| Rc::clone(&nodes[i].value));
            let tracked = !matches!(op, Op::StopGradient(_))
                && self.recording.get()
                && op.parents().iter().any(|&p| nodes[p].tracked);
            (value, tracked)
        };
        self.push_raw(value, op, tracked)
    }

    fn value_of(&self, id: usize) -> Rc<Array> {
        Rc::clone(&self.nodes.borrow()[id].value)
    }

    fn var(&self, id: usize) -> Var<'_> {
        Var { tape: self, id }
    }

    /// Fails if any recorded value so far is NaN or infinite.
    pub fn check_finite(&self) -> Result<(), AdError> {
        match self.non_finite.get() {
            None => Ok(()),
            Some((node, prim)) => Err(AdError::NonFinite { node, primitive: prim }),
        }
    }

    /// Re-evaluates every node from its parents and returns the values in
    /// tape order. Leaves and constants are copied as-is.
    pub fn replay(&self) -> Vec<Array> {
        let nodes = self.nodes.borrow();
        let mut out: Vec<Rc<Array>> = Vec::with_capacity(nodes.len());
        for node in nodes.iter() {
            let v = match node.op {
                Op::Leaf | Op::Constant => Rc::clone(&node.value),
                ref op => Rc::new(eval_op(op, &|i| Rc::clone(&out[i]))),
            };
            out.push(v);
        }
        out.into_iter().map(|v| (*v).clone()).collect()
    }

    /// Values currently stored on the tape, in order.
    pub fn values(&self) -> Vec<Array> {
        self.nodes.borrow().iter().map(|n| (*n.value).clone()).collect()
    }

    /// Applies a primitive by name. Unknown names, and names that do not
    /// denote a plain one- or two-argument op, are reported as unsupported.
    pub fn apply_named<'t>(&'t self, name: &str, args: &[Var<'t>]) -> Result<Var<'t>, AdError> {
        let prim: Primitive = name.parse()?;
        let arity = |n: usize| {
            if args.len() == n {
                Ok(())
            } else {
                Err(AdError::Arity { primitive: prim, expected: n, got: args.len() })
            }
        };
        use Primitive::*;
        Ok(match prim {
            Add | Sub | Mul | Div | MatMul => {
                arity(2)?;
                let (a, b) = (args[0], args[1]);
                match prim {
                    Add => a + b,
                    Sub => a - b,
                    Mul => a * b,
                    Div => a / b,
                    _ => a.matmul(b),
                }
            }
            Neg | Transpose | Sum | Mean | SumRows | SumCols | Square | Sqrt | Exp | Sigmoid
            | Relu | Silu | Sin | Cos | Softmax | StopGradient => {
                arity(1)?;
                let a = args[0];
                match prim {
                    Neg => -a,
                    Transpose => a.t(),
                    Sum => a.sum(),
                    Mean => a.mean(),
                    SumRows => a.sum_rows(),
                    SumCols => a.sum_cols(),
                    Square => a.square(),
                    Sqrt => a.sqrt(),
                    Exp => a.exp(),
                    Sigmoid => a.sigmoid(),
                    Relu => a.relu(),
                    Silu => a.silu(),
                    Sin => a.sin(),
                    Cos => a.cos(),
                    Softmax => a.softmax(),
                    _ => a.stop_gradient(),
                }
            }
            ConcatCols => self.concat_cols(args),
            other => return Err(AdError::UnsupportedPrimitive(other.name().to_string())),
        })
    }

    pub fn concat_cols<'t>(&'t self, parts: &[Var<'t>]) -> Var<'t> {
        assert!(!parts.is_empty(), "concat of zero parts");
        self.push(Op::ConcatCols(parts.iter().map(|p| p.id).collect()))
    }

    /// Gradient of the scalar `output` with respect to each of `wrt`.
    ///
    /// Inputs that `output` does not depend on get an all-zero gradient.
    /// On a higher-order tape the returned `Var`s stay connected to the
    /// record and can be differentiated again.
    pub fn grad<'t>(&'t self, output: Var<'t>, wrt: &[Var<'t>]) -> Result<Vec<Var<'t>>, AdError> {
        let out_shape = output.shape();
        if out_shape != (1, 1) {
            return Err(AdError::NotScalar { rows: out_shape.0, cols: out_shape.1 });
        }
        self.check_finite()?;

        let previous = self.recording.replace(self.higher_order);
        let adjoints = self.backward(output, wrt.iter().map(|v| v.id).min().unwrap_or(0));
        let grads = wrt
            .iter()
            .map(|w| match adjoints.get(w.id).copied().flatten() {
                Some(g) => self.var(g),
                None => {
                    let (r, c) = w.shape();
                    self.constant(Array::zeros(r, c))
                }
            })
            .collect();
        self.recording.set(previous);
        self.check_finite()?;
        Ok(grads)
    }

    /// Hessian-vector products `H v` where `H` is the Hessian of `output`
    /// with respect to `wrt`, computed as the gradient of `grad(output) . v`.
    pub fn hvp<'t>(
        &'t self,
        output: Var<'t>,
        wrt: &[Var<'t>],
        v: &[Array],
    ) -> Result<Vec<Array>, AdError> {
        if !self.higher_order {
            return Err(AdError::FirstOrderTape);
        }
        if wrt.len() != v.len() {
            return Err(AdError::Arity { primitive: Primitive::Mul, expected: wrt.len(), got: v.len() });
        }
        let grads = self.grad(output, wrt)?;
        let mut dot: Option<Var<'t>> = None;
        for ((g, w), dir) in grads.iter().zip(wrt).zip(v) {
            if dir.shape() != w.shape() {
                return Err(AdError::ShapeMismatch {
                    primitive: Primitive::Mul,
                    lhs: w.shape(),
                    rhs: dir.shape(),
                });
            }
            let term = (*g * self.constant(dir.clone())).sum();
            dot = Some(match dot {
                Some(acc) => acc + term,
                None => term,
            });
        }
        let Some(dot) = dot else { return Ok(vec![]) };
        Ok(self.grad(dot, wrt)?.iter().map(|h| (*h.value()).clone()).collect())
    }

    fn backward(&self, output: Var<'_>, lowest: usize) -> Vec<Option<usize>> {
        let mut adjoints: Vec<Option<usize>> = vec![None; output.id + 1];
        adjoints[output.id] = Some(self.constant(Array::scalar(1.0)).id);

        for id in (lowest..=output.id).rev() {
            let Some(g) = adjoints[id] else { continue };
            let op = {
                let nodes = self.nodes.borrow();
                if !nodes[id].tracked {
                    continue;
                }
                nodes[id].op.clone()
            };
            let g = self.var(g);
            let y = self.var(id);
            let mut contribute = |parent: usize, contrib: Var<'_>| {
                if !self.nodes.borrow()[parent].tracked {
                    return;
                }
                adjoints[parent] = Some(match adjoints[parent] {
                    Some(prev) => (self.var(prev) + contrib).id,
                    None => contrib.id,
                });
            };
            match op {
                Op::Leaf | Op::Constant | Op::StopGradient(_) => {}
                Op::Add(a, b) => {
                    contribute(a, g);
                    contribute(b, g);
                }
                Op::Sub(a, b) => {
                    contribute(a, g);
                    contribute(b, -g);
                }
                Op::Mul(a, b) => {
                    let (va, vb) = (self.var(a), self.var(b));
                    contribute(a, g * vb);
                    contribute(b, g * va);
                }
                Op::Div(a, b) => {
                    let vb = self.var(b);
                    contribute(a, g / vb);
                    contribute(b, -(g * y) / vb);
                }
                Op::Neg(a) => contribute(a, -g),
                Op::Scale(a, c) => contribute(a, g.scale(c)),
                Op::Offset(a, _) => contribute(a, g),
                Op::MatMul(a, b) => {
                    let (va, vb) = (self.var(a), self.var(b));
                    contribute(a, g.matmul(vb.t()));
                    contribute(b, va.t().matmul(g));
                }
                Op::Transpose(a) => contribute(a, g.t()),
                Op::Sum(a) => {
                    let (r, c) = self.var(a).shape();
                    contribute(a, g.broadcast_scalar(r, c));
                }
                Op::Mean(a) => {
                    let (r, c) = self.var(a).shape();
                    contribute(a, g.broadcast_scalar(r, c).scale(1.0 / (r * c) as f64));
                }
                Op::SumRows(a) => {
                    let rows = self.var(a).shape().0;
                    contribute(a, g.broadcast_rows(rows));
                }
                Op::SumCols(a) => {
                    let cols = self.var(a).shape().1;
                    contribute(a, g.broadcast_cols(cols));
                }
                Op::BroadcastRows(a, _) => contribute(a, g.sum_rows()),
                Op::BroadcastCols(a, _) => contribute(a, g.sum_cols()),
                Op::BroadcastScalar(a, _, _) => contribute(a, g.sum()),
                Op::Square(a) => contribute(a, (g * self.var(a)).scale(2.0)),
                Op::Sqrt(a) => contribute(a, (g / y).scale(0.5)),
                Op::Exp(a) => contribute(a, g * y),
                Op::Sigmoid(a) => contribute(a, g * (y - y.square())),
                Op::Relu(a) => {
                    let mask = self.value_of(a).map(|v| if v > 0.0 { 1.0 } else { 0.0 });
                    contribute(a, g * self.constant(mask));
                }
                Op::Silu(a) => {
                    // d/dx x s(x) = s + x s (1 - s)
                    let x = self.var(a);
                    let s = x.sigmoid();
                    let ds = s + x * (s - s.square());
                    contribute(a, g * ds);
                }
                Op::Sin(a) => contribute(a, g * self.var(a).cos()),
                Op::Cos(a) => contribute(a, -(g * self.var(a).sin())),
                Op::Softmax(a) => {
                    let cols = y.shape().1;
                    let inner = (g * y).sum_cols().broadcast_cols(cols);
                    contribute(a, y * (g - inner));
                }
                Op::ConcatCols(parts) => {
                    let mut offset = 0;
                    for p in parts {
                        let w = self.var(p).shape().1;
                        contribute(p, g.slice_cols(offset, offset + w));
                        offset += w;
                    }
                }
                Op::SliceCols(a, s, _) => {
                    let total = self.var(a).shape().1;
                    contribute(a, g.pad_cols(s, total));
                }
                Op::PadCols(a, s, _) => {
                    let w = self.var(a).shape().1;
                    contribute(a, g.slice_cols(s, s + w));
                }
                Op::Reshape(a, _, _) => {
                    let (r, c) = self.var(a).shape();
                    contribute(a, g.reshape(r, c));
                }
            }
        }
        adjoints
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
        write!(f, "Var#{}({:?})", self.id, self.value())
    }
}

impl<'t> Var<'t> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn value(&self) -> Rc<Array> {
        self.tape.value_of(self.id)
    }

    /// Borrow of the stored value; do not hold it across further ops.
    pub fn value_ref(&self) -> Ref<'t, Array> {
        Ref::map(self.tape.nodes.borrow(), |n| n[self.id].value.as_ref())
    }

    pub fn shape(&self) -> (usize, usize) {
        self.value_ref().shape()
    }

    /// Value of a `1 x 1` node.
    pub fn item(&self) -> f64 {
        self.value_ref().item()
    }

    pub fn is_tracked(&self) -> bool {
        self.tape.nodes.borrow()[self.id].tracked
    }

    fn unary(self, op: Op) -> Var<'t> {
        self.tape.push(op)
    }

    pub fn matmul(self, rhs: Var<'t>) -> Var<'t> {
        self.unary(Op::MatMul(self.id, rhs.id))
    }

    pub fn t(self) -> Var<'t> {
        self.unary(Op::Transpose(self.id))
    }

    pub fn scale(self, c: f64) -> Var<'t> {
        self.unary(Op::Scale(self.id, c))
    }

    pub fn offset(self, c: f64) -> Var<'t> {
        self.unary(Op::Offset(self.id, c))
    }

    pub fn sum(self) -> Var<'t> {
        self.unary(Op::Sum(self.id))
    }

    pub fn mean(self) -> Var<'t> {
        self.unary(Op::Mean(self.id))
    }

    pub fn sum_rows(self) -> Var<'t> {
        self.unary(Op::SumRows(self.id))
    }

    pub fn sum_cols(self) -> Var<'t> {
        self.unary(Op::SumCols(self.id))
    }

    pub fn broadcast_rows(self, rows: usize) -> Var<'t> {
        self.unary(Op::BroadcastRows(self.id, rows))
    }

    pub fn broadcast_cols(self, cols: usize) -> Var<'t> {
        self.unary(Op::BroadcastCols(self.id, cols))
    }

    pub fn broadcast_scalar(self, rows: usize, cols: usize) -> Var<'t> {
        self.unary(Op::BroadcastScalar(self.id, rows, cols))
    }

    pub fn square(self) -> Var<'t> {
        self.unary(Op::Square(self.id))
    }

    pub fn sqrt(self) -> Var<'t> {
        self.unary(Op::Sqrt(self.id))
    }

    pub fn exp(self) -> Var<'t> {
        self.unary(Op::Exp(self.id))
    }

    pub fn sigmoid(self) -> Var<'t> {
        self.unary(Op::Sigmoid(self.id))
    }

    pub fn relu(self) -> Var<'t> {
        self.unary(Op::Relu(self.id))
    }

    pub fn silu(self) -> Var<'t> {
        self.unary(Op::Silu(self.id))
    }

    pub fn sin(self) -> Var<'t> {
        self.unary(Op::Sin(self.id))
    }

    pub fn cos(self) -> Var<'t> {
        self.unary(Op::Cos(self.id))
    }

    /// Row-wise softmax.
    pub fn softmax(self) -> Var<'t> {
        self.unary(Op::Softmax(self.id))
    }

    pub fn slice_cols(self, start: usize, end: usize) -> Var<'t> {
        self.unary(Op::SliceCols(self.id, start, end))
    }

    pub fn pad_cols(self, start: usize, total: usize) -> Var<'t> {
        self.unary(Op::PadCols(self.id, start, total))
    }

    /// Same data, new shape of equal size.
    pub fn reshape(self, rows: usize, cols: usize) -> Var<'t> {
        self.unary(Op::Reshape(self.id, rows, cols))
    }

    /// Identity in the forward pass, blocks gradients in the reverse pass.
    pub fn stop_gradient(self) -> Var<'t> {
        self.unary(Op::StopGradient(self.id))
    }

    /// Adds a `1 x n` row to every row of `self`.
    pub fn add_row(self, row: Var<'t>) -> Var<'t> {
        let rows = self.shape().0;
        self + row.broadcast_rows(rows)
    }

    /// Sum of elementwise products, as a scalar node.
    pub fn dot(self, rhs: Var<'t>) -> Var<'t> {
        (self * rhs).sum()
    }
}

macro_rules! binary_op {
    ($trait:ident, $method:ident, $variant:ident) => {
        impl<'t> ops::$trait for Var<'t> {
            type Output = Var<'t>;
            fn $method(self, rhs: Var<'t>) -> Var<'t> {
                debug_assert!(std::ptr::eq(self.tape, rhs.tape), "vars from different tapes");
                self.tape.push(Op::$variant(self.id, rhs.id))
            }
        }
    };
}

binary_op!(Add, add, Add);
binary_op!(Sub, sub, Sub);
binary_op!(Mul, mul, Mul);
binary_op!(Div, div, Div);

impl<'t> ops::Neg for Var<'t> {
    type Output = Var<'t>;
    fn neg(self) -> Var<'t> {
        self.tape.push(Op::Neg(self.id))
    }
}

impl<'t> ops::Mul<f64> for Var<'t> {
    type Output = Var<'t>;
    fn mul(self, rhs: f64) -> Var<'t> {
        self.scale(rhs)
    }
}

impl<'t> ops::Add<f64> for Var<'t> {
    type Output = Var<'t>;
    fn add(self, rhs: f64) -> Var<'t> {
        self.offset(rhs)
    }
}
