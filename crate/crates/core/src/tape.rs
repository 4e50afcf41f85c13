//! Reverse-mode differentiation over dense matrices.
//!
//! A [`Tape`] records every operation applied to [`Var`]s during a forward
//! pass. [`Tape::gradients`] then walks the record backwards and returns the
//! gradient of a scalar output with respect to every node that depends on a
//! parameter leaf. Constant leaves never receive gradients, so large fixed
//! inputs (features, masks) cost nothing on the way back.

use std::cell::RefCell;
use std::rc::Rc;
use std::sync::Arc;

use ndarray::{Array2, Axis, Zip};

use crate::sparse::CsrMatrix;

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(usize, usize),
    SpMatMul(Arc<CsrMatrix>, usize),
    AddRow(usize, usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Affine(usize, f64),
    Relu(usize),
    Exp(usize),
    Ln(usize),
    Square(usize),
    Clamp(usize, f64, f64),
    GatherRows(usize, Rc<[usize]>),
    ConcatRows(Vec<usize>),
    PairwiseSqDist(usize, usize),
    RowSum(usize),
    Sum(usize),
    MulConst(usize, Arc<Array2<f64>>),
    LogSoftmax(usize),
}

#[derive(Debug)]
struct Node {
    value: Rc<Array2<f64>>,
    op: Op,
    tracked: bool,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Var").field("id", &self.id).finish()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// A leaf that receives gradients.
    pub fn param(&self, value: Array2<f64>) -> Var<'_> {
        self.push(value, Op::Leaf, true)
    }

    /// A leaf that is treated as a constant.
    pub fn constant(&self, value: Array2<f64>) -> Var<'_> {
        self.push(value, Op::Leaf, false)
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Array2<f64>, op: Op, tracked: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value: Rc::new(value),
            op,
            tracked,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    fn value_of(&self, id: usize) -> Rc<Array2<f64>> {
        Rc::clone(&self.nodes.borrow()[id].value)
    }

    fn tracked(&self, id: usize) -> bool {
        self.nodes.borrow()[id].tracked
    }

    /// Back-propagates from the scalar `output` (a 1×1 node).
    pub fn gradients(&self, output: Var<'_>) -> Gradients {
        assert!(std::ptr::eq(self, output.tape), "output belongs to another tape");
        let nodes = self.nodes.borrow();
        assert_eq!(nodes[output.id].value.dim(), (1, 1), "gradients need a scalar output");
        let mut grads: Vec<Option<Array2<f64>>> = vec![None; nodes.len()];
        grads[output.id] = Some(Array2::ones((1, 1)));

        for id in (0..=output.id).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &nodes[id];
            if !node.tracked {
                continue;
            }
            if let Op::Leaf = node.op {
                grads[id] = Some(g);
                continue;
            }
            let val = |i: usize| &*nodes[i].value;
            let mut send = |i: usize, delta: Array2<f64>| {
                if !nodes[i].tracked {
                    return;
                }
                match &mut grads[i] {
                    Some(acc) => *acc += &delta,
                    slot @ None => *slot = Some(delta),
                }
            };
            match &node.op {
                Op::Leaf => unreachable!(),
                Op::MatMul(a, b) => {
                    if nodes[*a].tracked {
                        send(*a, g.dot(&val(*b).t()));
                    }
                    if nodes[*b].tracked {
                        send(*b, val(*a).t().dot(&g));
                    }
                }
                Op::SpMatMul(s, a) => send(*a, s.transpose_matmul(g.view())),
                Op::AddRow(a, b) => {
                    if nodes[*b].tracked {
                        send(*b, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                    }
                    send(*a, g);
                }
                Op::Add(a, b) => {
                    if nodes[*b].tracked {
                        send(*b, g.clone());
                    }
                    send(*a, g);
                }
                Op::Sub(a, b) => {
                    if nodes[*b].tracked {
                        send(*b, -&g);
                    }
                    send(*a, g);
                }
                Op::Mul(a, b) => {
                    if nodes[*a].tracked {
                        send(*a, &g * val(*b));
                    }
                    if nodes[*b].tracked {
                        send(*b, &g * val(*a));
                    }
                }
                Op::Affine(a, scale) => send(*a, g * *scale),
                Op::Relu(a) => {
                    let mut d = g;
                    Zip::from(&mut d).and(val(*a)).for_each(|d, &x| {
                        if x <= 0.0 {
                            *d = 0.0;
                        }
                    });
                    send(*a, d);
                }
                Op::Exp(a) => send(*a, g * &*node.value),
                Op::Ln(a) => send(*a, g / val(*a)),
                Op::Square(a) => send(*a, g * val(*a) * 2.0),
                Op::Clamp(a, lo, hi) => {
                    let mut d = g;
                    Zip::from(&mut d).and(val(*a)).for_each(|d, &x| {
                        if x < *lo || x > *hi {
                            *d = 0.0;
                        }
                    });
                    send(*a, d);
                }
                Op::GatherRows(a, rows) => {
                    let src = val(*a);
                    let mut d = Array2::zeros(src.dim());
                    for (k, &r) in rows.iter().enumerate() {
                        let mut dst = d.row_mut(r);
                        dst += &g.row(k);
                    }
                    send(*a, d);
                }
                Op::ConcatRows(parts) => {
                    let mut start = 0;
                    for &p in parts {
                        let n = val(p).nrows();
                        if nodes[p].tracked {
                            send(p, g.slice(ndarray::s![start..start + n, ..]).to_owned());
                        }
                        start += n;
                    }
                }
                Op::PairwiseSqDist(a, b) => {
                    let (av, bv) = (val(*a), val(*b));
                    if nodes[*a].tracked {
                        let rs = g.sum_axis(Axis(1)).insert_axis(Axis(1));
                        send(*a, (av * &rs - g.dot(bv)) * 2.0);
                    }
                    if nodes[*b].tracked {
                        let cs = g.sum_axis(Axis(0)).insert_axis(Axis(1));
                        send(*b, (bv * &cs - g.t().dot(av)) * 2.0);
                    }
                }
                Op::RowSum(a) => {
                    let d = Array2::ones(val(*a).dim()) * &g;
                    send(*a, d);
                }
                Op::Sum(a) => send(*a, Array2::from_elem(val(*a).dim(), g[[0, 0]])),
                Op::MulConst(a, c) => send(*a, g * &**c),
                Op::LogSoftmax(a) => {
                    let soft = node.value.mapv(f64::exp);
                    let rs = g.sum_axis(Axis(1)).insert_axis(Axis(1));
                    send(*a, g - soft * rs);
                }
            }
        }
        Gradients { grads }
    }
}

/// Gradients produced by [`Tape::gradients`], indexed by leaf.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Array2<f64>>>,
}

impl Gradients {
    pub fn get(&self, var: Var<'_>) -> Option<&Array2<f64>> {
        self.grads.get(var.id).and_then(Option::as_ref)
    }

    /// Gradient of `var`, or zeros of its shape when it did not influence
    /// the output.
    pub fn get_or_zeros(&self, var: Var<'_>) -> Array2<f64> {
        self.get(var)
            .cloned()
            .unwrap_or_else(|| Array2::zeros(var.value().dim()))
    }
}

impl<'t> Var<'t> {
    pub fn value(&self) -> Rc<Array2<f64>> {
        self.tape.value_of(self.id)
    }

    pub fn scalar(&self) -> f64 {
        let v = self.value();
        assert_eq!(v.dim(), (1, 1), "not a scalar");
        v[[0, 0]]
    }

    pub fn shape(&self) -> (usize, usize) {
        self.value().dim()
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    fn unary(self, value: Array2<f64>, op: Op) -> Var<'t> {
        let tracked = self.tape.tracked(self.id);
        self.tape.push(value, op, tracked)
    }

    fn binary(self, other: Var<'t>, value: Array2<f64>, op: Op) -> Var<'t> {
        assert!(std::ptr::eq(self.tape, other.tape), "vars from different tapes");
        let tracked = self.tape.tracked(self.id) || self.tape.tracked(other.id);
        self.tape.push(value, op, tracked)
    }

    pub fn matmul(self, other: Var<'t>) -> Var<'t> {
        let v = self.value().dot(&*other.value());
        self.binary(other, v, Op::MatMul(self.id, other.id))
    }

    /// `sparse · self`, with the sparse factor held constant.
    pub fn sp_lmul(self, sparse: &Arc<CsrMatrix>) -> Var<'t> {
        let v = sparse.matmul(self.value().view());
        self.unary(v, Op::SpMatMul(Arc::clone(sparse), self.id))
    }

    /// Adds a 1×m row vector to every row.
    pub fn add_row(self, row: Var<'t>) -> Var<'t> {
        let r = row.value();
        assert_eq!(r.nrows(), 1, "add_row expects a row vector");
        let v = &*self.value() + &*r;
        self.binary(row, v, Op::AddRow(self.id, row.id))
    }

    pub fn add(self, other: Var<'t>) -> Var<'t> {
        let v = &*self.value() + &*other.value();
        self.binary(other, v, Op::Add(self.id, other.id))
    }

    pub fn sub(self, other: Var<'t>) -> Var<'t> {
        let v = &*self.value() - &*other.value();
        self.binary(other, v, Op::Sub(self.id, other.id))
    }

    pub fn mul(self, other: Var<'t>) -> Var<'t> {
        let (a, b) = (self.value(), other.value());
        assert_eq!(a.dim(), b.dim(), "elementwise mul shapes");
        let v = &*a * &*b;
        self.binary(other, v, Op::Mul(self.id, other.id))
    }

    /// `scale · self + shift`.
    pub fn affine(self, scale: f64, shift: f64) -> Var<'t> {
        let v = self.value().mapv(|x| scale * x + shift);
        self.unary(v, Op::Affine(self.id, scale))
    }

    pub fn scale(self, scale: f64) -> Var<'t> {
        self.affine(scale, 0.0)
    }

    pub fn relu(self) -> Var<'t> {
        let v = self.value().mapv(|x| x.max(0.0));
        self.unary(v, Op::Relu(self.id))
    }

    pub fn exp(self) -> Var<'t> {
        let v = self.value().mapv(f64::exp);
        self.unary(v, Op::Exp(self.id))
    }

    pub fn ln(self) -> Var<'t> {
        let v = self.value().mapv(f64::ln);
        self.unary(v, Op::Ln(self.id))
    }

    pub fn square(self) -> Var<'t> {
        let v = self.value().mapv(|x| x * x);
        self.unary(v, Op::Square(self.id))
    }

    pub fn clamp(self, lo: f64, hi: f64) -> Var<'t> {
        let v = self.value().mapv(|x| x.clamp(lo, hi));
        self.unary(v, Op::Clamp(self.id, lo, hi))
    }

    pub fn gather_rows(self, rows: &[usize]) -> Var<'t> {
        let src = self.value();
        let v = src.select(Axis(0), rows);
        self.unary(v, Op::GatherRows(self.id, rows.into()))
    }

    /// Stacks the rows of `parts` in order. All parts must share a width.
    pub fn concat_rows(parts: &[Var<'t>]) -> Var<'t> {
        assert!(!parts.is_empty(), "concat of nothing");
        let tape = parts[0].tape;
        let values: Vec<_> = parts.iter().map(|p| p.value()).collect();
        let views: Vec<_> = values.iter().map(|v| v.view()).collect();
        let v = ndarray::concatenate(Axis(0), &views).expect("concat_rows widths differ");
        let tracked = parts.iter().any(|p| tape.tracked(p.id));
        tape.push(v, Op::ConcatRows(parts.iter().map(|p| p.id).collect()), tracked)
    }

    /// `out[i, j] = ‖self_i − other_j‖²`.
    pub fn pairwise_sq_dist(self, other: Var<'t>) -> Var<'t> {
        let (a, b) = (self.value(), other.value());
        assert_eq!(a.ncols(), b.ncols(), "pairwise distance widths");
        let mut v = Array2::zeros((a.nrows(), b.nrows()));
        for (i, ai) in a.outer_iter().enumerate() {
            for (j, bj) in b.outer_iter().enumerate() {
                v[[i, j]] = ai.iter().zip(bj).map(|(x, y)| (x - y) * (x - y)).sum();
            }
        }
        self.binary(other, v, Op::PairwiseSqDist(self.id, other.id))
    }

    pub fn row_sum(self) -> Var<'t> {
        let v = self.value().sum_axis(Axis(1)).insert_axis(Axis(1));
        self.unary(v, Op::RowSum(self.id))
    }

    pub fn sum(self) -> Var<'t> {
        let v = Array2::from_elem((1, 1), self.value().sum());
        self.unary(v, Op::Sum(self.id))
    }

    pub fn mean(self) -> Var<'t> {
        let n = self.value().len();
        self.sum().scale(1.0 / n as f64)
    }

    pub fn mul_const(self, c: Arc<Array2<f64>>) -> Var<'t> {
        let v = &*self.value() * &*c;
        self.unary(v, Op::MulConst(self.id, c))
    }

    pub fn log_softmax(self) -> Var<'t> {
        let a = self.value();
        let mut v = (*a).clone();
        for mut row in v.outer_iter_mut() {
            let m = row.fold(f64::NEG_INFINITY, |m, &x| m.max(x));
            let lse = m + row.iter().map(|&x| (x - m).exp()).sum::<f64>().ln();
            row.mapv_inplace(|x| x - lse);
        }
        self.unary(v, Op::LogSoftmax(self.id))
    }
}
