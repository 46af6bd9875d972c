//! Reverse-mode automatic differentiation on a tape arena.
//!
//! A [`Tape`] owns every node of one computation graph: its value tensor, the
//! op that produced it, and a gradient accumulator. [`Var`] is a copyable
//! handle (tape reference + node index). Graphs are define-by-run: each op
//! appends a node, so a parent's index is always smaller than its child's and
//! reverse index order is a topological order. Training code builds a fresh
//! tape per minibatch.
//!
//! `backward` requires a single-element root, seeds it with 1, propagates
//! vector-Jacobian products in reverse index order, and adds the result into
//! each node's persistent accumulator: repeated calls without
//! [`Tape::zero_grads`] accumulate. All accumulation orders are fixed, so a
//! given graph yields bit-identical gradients on every run.
//!
//! `abs` uses the subgradient +1 at 0 (matching the tie-break in
//! [`crate::latent::select_prior`]); `clamp` passes gradient on the closed
//! interval. Domain violations (log of a non-positive value, overflowing exp)
//! surface as panics from the non-finite output sweep, never as silent NaN.

use crate::tensor::Tensor;
use std::cell::RefCell;

#[derive(Clone, Copy, PartialEq, Eq)]
enum RowKind {
    Add,
    Sub,
    Mul,
}

enum Op {
    Leaf,
    Matmul {
        a: usize,
        b: usize,
    },
    Add {
        a: usize,
        b: usize,
    },
    Sub {
        a: usize,
        b: usize,
    },
    Mul {
        a: usize,
        b: usize,
    },
    Div {
        a: usize,
        b: usize,
    },
    AddScalar {
        x: usize,
    },
    MulScalar {
        x: usize,
        c: f64,
    },
    // Broadcast of a tracked rank-1 bias over the rows of a rank-2 input.
    AddRowVar {
        x: usize,
        row: usize,
    },
    // Broadcast of an untracked constant row; no gradient flows to `row`.
    RowConst {
        x: usize,
        row: Tensor,
        kind: RowKind,
    },
    Exp {
        x: usize,
    },
    Log {
        x: usize,
    },
    Sqrt {
        x: usize,
    },
    Square {
        x: usize,
    },
    Abs {
        x: usize,
    },
    Sigmoid {
        x: usize,
    },
    Softplus {
        x: usize,
    },
    Tanh {
        x: usize,
    },
    Clamp {
        x: usize,
        lo: f64,
        hi: f64,
    },
    SliceCols {
        x: usize,
        start: usize,
        width: usize,
    },
    SumAll {
        x: usize,
    },
    MeanAll {
        x: usize,
    },
    SumRows {
        x: usize,
    },
    // Numerically stable image-sum binary cross-entropy straight from logits:
    // out[i] = sum_j softplus(l_ij) - t_ij * l_ij, targets constant in [0,1].
    BceLogits {
        logits: usize,
        target: Tensor,
    },
    // Per-row softmax cross-entropy from logits against constant targets that
    // sum to 1 per row: out[i] = logsumexp(l_i) - sum_j t_ij l_ij.
    CeLogits {
        logits: usize,
        target: Tensor,
    },
}

// Row-stable logsumexp; the max shift changes no value or gradient.
fn logsumexp(row: &[f64]) -> f64 {
    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    m + row.iter().map(|&v| (v - m).exp()).sum::<f64>().ln()
}

struct Node {
    value: Tensor,
    op: Op,
    grad: Option<Tensor>,
}

#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

/// Handle to one tape node.
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

// Numerically stable scalar kernels shared by forward and backward.
pub(crate) fn sigmoid_stable(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn softplus_stable(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// Subgradient of |x| with the +1 convention at exactly 0.
pub(crate) fn abs_subgrad(x: f64) -> f64 {
    if x >= 0.0 {
        1.0
    } else {
        -1.0
    }
}

impl Tape {
    pub fn new() -> Tape {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Tensor, op: Op) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            op,
            grad: None,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    /// Tracked input node. Parameters, data batches and sampled noise all
    /// enter the graph this way; gradients are accumulated for every leaf and
    /// callers simply ignore the ones they do not need.
    pub fn leaf(&self, value: Tensor) -> Var<'_> {
        value.assert_finite("leaf");
        self.push(value, Op::Leaf)
    }

    pub fn value(&self, v: Var<'_>) -> Tensor {
        self.nodes.borrow()[v.id].value.clone()
    }

    /// Accumulated gradient of `v` after one or more `backward` calls.
    /// Zeros if no backward pass has reached the node.
    pub fn grad(&self, v: Var<'_>) -> Tensor {
        let nodes = self.nodes.borrow();
        match &nodes[v.id].grad {
            Some(g) => g.clone(),
            None => Tensor::zeros(nodes[v.id].value.shape()),
        }
    }

    pub fn zero_grads(&self) {
        for n in self.nodes.borrow_mut().iter_mut() {
            n.grad = None;
        }
    }

    /// Reverse pass from `root`, which must hold exactly one element.
    /// Adds into the persistent per-node accumulators.
    pub fn backward(&self, root: Var<'_>) {
        let mut nodes = self.nodes.borrow_mut();
        assert_eq!(
            nodes[root.id].value.numel(),
            1,
            "backward: root must be a single-element tensor, got shape {:?}",
            nodes[root.id].value.shape()
        );
        // Working buffers for this pass only; persistent accumulators receive
        // the finished contributions at the end so repeated backward calls
        // accumulate linearly instead of compounding.
        let mut work: Vec<Option<Tensor>> = vec![None; root.id + 1];
        work[root.id] = Some(Tensor::ones(nodes[root.id].value.shape()));

        fn add_into(slot: &mut Option<Tensor>, g: Tensor) {
            match slot {
                Some(t) => t.add_assign(&g),
                None => *slot = Some(g),
            }
        }

        // Reduce an upstream gradient onto a broadcast scalar operand.
        fn reduce_for(shape: &[usize], g: &Tensor) -> Tensor {
            if g.shape() == shape {
                g.clone()
            } else {
                Tensor::from_vec(shape, vec![g.sum()])
            }
        }

        for id in (0..=root.id).rev() {
            let g = match work[id].take() {
                Some(g) => g,
                None => continue,
            };
            g.assert_finite("backward upstream gradient");
            // Persist this pass's contribution before fanning out to parents.
            {
                let node = &mut nodes[id];
                match &mut node.grad {
                    Some(acc) => acc.add_assign(&g),
                    None => node.grad = Some(g.clone()),
                }
            }
            let (lhs, rest) = nodes.split_at_mut(id);
            let node = &rest[0];
            match &node.op {
                Op::Leaf => {}
                Op::Matmul { a, b } => {
                    let da = g.matmul_nt(&lhs[*b].value);
                    let db = lhs[*a].value.matmul_tn(&g);
                    add_into(&mut work[*a], da);
                    add_into(&mut work[*b], db);
                }
                Op::Add { a, b } => {
                    add_into(&mut work[*a], reduce_for(lhs[*a].value.shape(), &g));
                    add_into(&mut work[*b], reduce_for(lhs[*b].value.shape(), &g));
                }
                Op::Sub { a, b } => {
                    add_into(&mut work[*a], reduce_for(lhs[*a].value.shape(), &g));
                    add_into(
                        &mut work[*b],
                        reduce_for(lhs[*b].value.shape(), &g.scale(-1.0)),
                    );
                }
                Op::Mul { a, b } => {
                    let (va, vb) = (&lhs[*a].value, &lhs[*b].value);
                    add_into(
                        &mut work[*a],
                        reduce_for(va.shape(), &g.zip(vb, "mul_bwd", |x, y| x * y)),
                    );
                    add_into(
                        &mut work[*b],
                        reduce_for(vb.shape(), &g.zip(va, "mul_bwd", |x, y| x * y)),
                    );
                }
                Op::Div { a, b } => {
                    let (va, vb) = (&lhs[*a].value, &lhs[*b].value);
                    let da = g.zip(vb, "div_bwd", |x, y| x / y);
                    let db = g.zip(
                        &va.zip(vb, "div_bwd", |x, y| -x / (y * y)),
                        "div_bwd",
                        |x, y| x * y,
                    );
                    add_into(&mut work[*a], reduce_for(va.shape(), &da));
                    add_into(&mut work[*b], reduce_for(vb.shape(), &db));
                }
                Op::AddScalar { x } => add_into(&mut work[*x], g),
                Op::MulScalar { x, c } => add_into(&mut work[*x], g.scale(*c)),
                Op::AddRowVar { x, row } => {
                    add_into(&mut work[*row], g.col_sums());
                    add_into(&mut work[*x], g);
                }
                Op::RowConst { x, row, kind } => {
                    let dx = match kind {
                        RowKind::Add | RowKind::Sub => g,
                        RowKind::Mul => g.mul_row(row),
                    };
                    add_into(&mut work[*x], dx);
                }
                Op::Exp { x } => {
                    add_into(&mut work[*x], g.zip(&node.value, "exp_bwd", |a, y| a * y));
                }
                Op::Log { x } => {
                    add_into(
                        &mut work[*x],
                        g.zip(&lhs[*x].value, "log_bwd", |a, v| a / v),
                    );
                }
                Op::Sqrt { x } => {
                    add_into(
                        &mut work[*x],
                        g.zip(&node.value, "sqrt_bwd", |a, y| 0.5 * a / y),
                    );
                }
                Op::Square { x } => {
                    add_into(
                        &mut work[*x],
                        g.zip(&lhs[*x].value, "square_bwd", |a, v| 2.0 * a * v),
                    );
                }
                Op::Abs { x } => {
                    add_into(
                        &mut work[*x],
                        g.zip(&lhs[*x].value, "abs_bwd", |a, v| a * abs_subgrad(v)),
                    );
                }
                Op::Sigmoid { x } => {
                    add_into(
                        &mut work[*x],
                        g.zip(&node.value, "sigmoid_bwd", |a, y| a * y * (1.0 - y)),
                    );
                }
                Op::Softplus { x } => {
                    add_into(
                        &mut work[*x],
                        g.zip(&lhs[*x].value, "softplus_bwd", |a, v| a * sigmoid_stable(v)),
                    );
                }
                Op::Tanh { x } => {
                    add_into(
                        &mut work[*x],
                        g.zip(&node.value, "tanh_bwd", |a, y| a * (1.0 - y * y)),
                    );
                }
                Op::Clamp { x, lo, hi } => {
                    let (lo, hi) = (*lo, *hi);
                    add_into(
                        &mut work[*x],
                        g.zip(&lhs[*x].value, "clamp_bwd", |a, v| {
                            if v >= lo && v <= hi {
                                a
                            } else {
                                0.0
                            }
                        }),
                    );
                }
                Op::SliceCols { x, start, width } => {
                    let rows = lhs[*x].value.rows();
                    let len = node.value.cols();
                    let mut dx = Tensor::zeros(&[rows, *width]);
                    {
                        let d = dx.data_mut();
                        let gd = g.data();
                        for i in 0..rows {
                            d[i * width + start..i * width + start + len]
                                .copy_from_slice(&gd[i * len..(i + 1) * len]);
                        }
                    }
                    add_into(&mut work[*x], dx);
                }
                Op::SumAll { x } => {
                    let s = g.item();
                    add_into(&mut work[*x], Tensor::full(lhs[*x].value.shape(), s));
                }
                Op::MeanAll { x } => {
                    let n = lhs[*x].value.numel() as f64;
                    add_into(
                        &mut work[*x],
                        Tensor::full(lhs[*x].value.shape(), g.item() / n),
                    );
                }
                Op::SumRows { x } => {
                    let v = &lhs[*x].value;
                    let (m, n) = (v.rows(), v.cols());
                    let mut dx = Tensor::zeros(&[m, n]);
                    {
                        let d = dx.data_mut();
                        let gd = g.data();
                        for i in 0..m {
                            for j in 0..n {
                                d[i * n + j] = gd[i];
                            }
                        }
                    }
                    add_into(&mut work[*x], dx);
                }
                Op::BceLogits { logits, target } => {
                    let l = &lhs[*logits].value;
                    let n = l.cols();
                    let mut dl = Tensor::zeros(&[l.rows(), n]);
                    {
                        let d = dl.data_mut();
                        let ld = l.data();
                        let td = target.data();
                        let gd = g.data();
                        #[allow(clippy::needless_range_loop)]
                        for i in 0..l.rows() {
                            let gi = gd[i];
                            for j in 0..n {
                                let k = i * n + j;
                                d[k] = gi * (sigmoid_stable(ld[k]) - td[k]);
                            }
                        }
                    }
                    add_into(&mut work[*logits], dl);
                }
                Op::CeLogits { logits, target } => {
                    let l = &lhs[*logits].value;
                    let n = l.cols();
                    let mut dl = Tensor::zeros(&[l.rows(), n]);
                    {
                        let d = dl.data_mut();
                        let td = target.data();
                        let gd = g.data();
                        for i in 0..l.rows() {
                            let row = l.row(i);
                            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                            let z: f64 = row.iter().map(|&v| (v - m).exp()).sum();
                            for j in 0..n {
                                let soft = (row[j] - m).exp() / z;
                                d[i * n + j] = gd[i] * (soft - td[i * n + j]);
                            }
                        }
                    }
                    add_into(&mut work[*logits], dl);
                }
            }
        }
    }
}

impl<'t> Var<'t> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn value(&self) -> Tensor {
        self.tape.value(*self)
    }

    pub fn grad(&self) -> Tensor {
        self.tape.grad(*self)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.nodes.borrow()[self.id].value.shape().to_vec()
    }

    fn same_tape(&self, other: Var<'t>, op: &str) {
        assert!(
            std::ptr::eq(self.tape, other.tape),
            "{}: operands live on different tapes",
            op
        );
    }

    fn with_value<R>(&self, f: impl FnOnce(&Tensor) -> R) -> R {
        f(&self.tape.nodes.borrow()[self.id].value)
    }

    fn with_values<R>(&self, other: Var<'t>, f: impl FnOnce(&Tensor, &Tensor) -> R) -> R {
        let nodes = self.tape.nodes.borrow();
        f(&nodes[self.id].value, &nodes[other.id].value)
    }

    pub fn matmul(self, other: Var<'t>) -> Var<'t> {
        self.same_tape(other, "matmul");
        let v = self.with_values(other, |a, b| a.matmul(b));
        self.tape.push(
            v,
            Op::Matmul {
                a: self.id,
                b: other.id,
            },
        )
    }

    // Methods, not operator impls: tape vars are Copy indices and the
    // arithmetic must stay explicit about tape pushes.
    #[allow(clippy::should_implement_trait)]
    pub fn add(self, other: Var<'t>) -> Var<'t> {
        self.same_tape(other, "add");
        let v = self.with_values(other, |a, b| a.add(b));
        self.tape.push(
            v,
            Op::Add {
                a: self.id,
                b: other.id,
            },
        )
    }

    #[allow(clippy::should_implement_trait)]
    pub fn sub(self, other: Var<'t>) -> Var<'t> {
        self.same_tape(other, "sub");
        let v = self.with_values(other, |a, b| a.sub(b));
        self.tape.push(
            v,
            Op::Sub {
                a: self.id,
                b: other.id,
            },
        )
    }

    #[allow(clippy::should_implement_trait)]
    pub fn mul(self, other: Var<'t>) -> Var<'t> {
        self.same_tape(other, "mul");
        let v = self.with_values(other, |a, b| a.mul(b));
        self.tape.push(
            v,
            Op::Mul {
                a: self.id,
                b: other.id,
            },
        )
    }

    #[allow(clippy::should_implement_trait)]
    pub fn div(self, other: Var<'t>) -> Var<'t> {
        self.same_tape(other, "div");
        let v = self.with_values(other, |a, b| a.div(b));
        self.tape.push(
            v,
            Op::Div {
                a: self.id,
                b: other.id,
            },
        )
    }

    pub fn add_scalar(self, c: f64) -> Var<'t> {
        let v = self.with_value(|a| a.add_scalar(c));
        self.tape.push(v, Op::AddScalar { x: self.id })
    }

    pub fn mul_scalar(self, c: f64) -> Var<'t> {
        let v = self.with_value(|a| a.scale(c));
        self.tape.push(v, Op::MulScalar { x: self.id, c })
    }

    /// Row-broadcast add of a tracked rank-1 bias.
    pub fn add_row(self, bias: Var<'t>) -> Var<'t> {
        self.same_tape(bias, "add_row");
        let v = self.with_values(bias, |a, b| a.add_row(b));
        self.tape.push(
            v,
            Op::AddRowVar {
                x: self.id,
                row: bias.id,
            },
        )
    }

    pub fn add_row_const(self, row: &Tensor) -> Var<'t> {
        let v = self.with_value(|a| a.add_row(row));
        self.tape.push(
            v,
            Op::RowConst {
                x: self.id,
                row: row.clone(),
                kind: RowKind::Add,
            },
        )
    }

    pub fn sub_row_const(self, row: &Tensor) -> Var<'t> {
        let v = self.with_value(|a| a.sub_row(row));
        self.tape.push(
            v,
            Op::RowConst {
                x: self.id,
                row: row.clone(),
                kind: RowKind::Sub,
            },
        )
    }

    pub fn mul_row_const(self, row: &Tensor) -> Var<'t> {
        let v = self.with_value(|a| a.mul_row(row));
        self.tape.push(
            v,
            Op::RowConst {
                x: self.id,
                row: row.clone(),
                kind: RowKind::Mul,
            },
        )
    }

    pub fn exp(self) -> Var<'t> {
        let v = self.with_value(|a| a.map("exp", f64::exp));
        self.tape.push(v, Op::Exp { x: self.id })
    }

    pub fn log(self) -> Var<'t> {
        let v = self.with_value(|a| a.map("log", f64::ln));
        self.tape.push(v, Op::Log { x: self.id })
    }

    pub fn sqrt(self) -> Var<'t> {
        let v = self.with_value(|a| a.map("sqrt", f64::sqrt));
        self.tape.push(v, Op::Sqrt { x: self.id })
    }

    pub fn square(self) -> Var<'t> {
        let v = self.with_value(|a| a.map("square", |x| x * x));
        self.tape.push(v, Op::Square { x: self.id })
    }

    pub fn abs(self) -> Var<'t> {
        let v = self.with_value(|a| a.map("abs", f64::abs));
        self.tape.push(v, Op::Abs { x: self.id })
    }

    pub fn sigmoid(self) -> Var<'t> {
        let v = self.with_value(|a| a.map("sigmoid", sigmoid_stable));
        self.tape.push(v, Op::Sigmoid { x: self.id })
    }

    pub fn softplus(self) -> Var<'t> {
        let v = self.with_value(|a| a.map("softplus", softplus_stable));
        self.tape.push(v, Op::Softplus { x: self.id })
    }

    pub fn tanh(self) -> Var<'t> {
        let v = self.with_value(|a| a.map("tanh", f64::tanh));
        self.tape.push(v, Op::Tanh { x: self.id })
    }

    pub fn clamp(self, lo: f64, hi: f64) -> Var<'t> {
        assert!(lo <= hi, "clamp: lo {} > hi {}", lo, hi);
        let v = self.with_value(|a| a.map("clamp", |x| x.clamp(lo, hi)));
        self.tape.push(v, Op::Clamp { x: self.id, lo, hi })
    }

    pub fn slice_cols(self, start: usize, len: usize) -> Var<'t> {
        let (v, width) = self.with_value(|a| (a.slice_cols(start, len), a.cols()));
        self.tape.push(
            v,
            Op::SliceCols {
                x: self.id,
                start,
                width,
            },
        )
    }

    /// Sum of every element, as a `[1]` tensor.
    pub fn sum(self) -> Var<'t> {
        let v = self.with_value(|a| Tensor::scalar(a.sum()));
        v.assert_finite("sum");
        self.tape.push(v, Op::SumAll { x: self.id })
    }

    /// Mean of every element, as a `[1]` tensor.
    pub fn mean(self) -> Var<'t> {
        let v = self.with_value(|a| Tensor::scalar(a.mean()));
        v.assert_finite("mean");
        self.tape.push(v, Op::MeanAll { x: self.id })
    }

    /// Row sums: `[m, n] -> [m]`.
    pub fn sum_rows(self) -> Var<'t> {
        let v = self.with_value(|a| a.sum_rows());
        v.assert_finite("sum_rows");
        self.tape.push(v, Op::SumRows { x: self.id })
    }

    /// Per-row image-sum binary cross-entropy computed from logits:
    /// `out[i] = sum_j softplus(l_ij) - t_ij l_ij`, which equals the BCE of
    /// `sigmoid(l)` against `t` without ever forming saturated probabilities.
    pub fn bce_logits_row_sum(self, target: &Tensor) -> Var<'t> {
        let v = self.with_value(|l| {
            assert_eq!(
                l.shape(),
                target.shape(),
                "bce_logits_row_sum: logits {:?} vs target {:?}",
                l.shape(),
                target.shape()
            );
            for (i, &t) in target.data().iter().enumerate() {
                assert!(
                    (0.0..=1.0).contains(&t),
                    "bce_logits_row_sum: target {} at flat index {} outside [0, 1]",
                    t,
                    i
                );
            }
            let n = l.cols();
            let mut rows = Vec::with_capacity(l.rows());
            for i in 0..l.rows() {
                let mut s = 0.0;
                for j in 0..n {
                    let lij = l.at(i, j);
                    s += softplus_stable(lij) - target.at(i, j) * lij;
                }
                rows.push(s);
            }
            let out = Tensor::from_vec(&[l.rows()], rows);
            out.assert_finite("bce_logits_row_sum");
            out
        });
        self.tape.push(
            v,
            Op::BceLogits {
                logits: self.id,
                target: target.clone(),
            },
        )
    }

    /// Per-row softmax cross-entropy from logits: `out[i] = logsumexp(l_i) -
    /// sum_j t_ij l_ij`. Targets are constant, non-negative, and must sum to
    /// 1 per row (hard one-hot or soft distillation targets alike).
    pub fn ce_logits_rows(self, target: &Tensor) -> Var<'t> {
        let v = self.with_value(|l| {
            assert_eq!(
                l.shape(),
                target.shape(),
                "ce_logits_rows: logits {:?} vs target {:?}",
                l.shape(),
                target.shape()
            );
            let mut rows = Vec::with_capacity(l.rows());
            for i in 0..l.rows() {
                let t = target.row(i);
                let s: f64 = t.iter().sum();
                assert!(
                    (s - 1.0).abs() < 1e-6 && t.iter().all(|&v| v >= 0.0),
                    "ce_logits_rows: target row {} is not a distribution (sum {})",
                    i,
                    s
                );
                let row = l.row(i);
                let dot: f64 = row.iter().zip(t).map(|(a, b)| a * b).sum();
                rows.push(logsumexp(row) - dot);
            }
            let out = Tensor::from_vec(&[l.rows()], rows);
            out.assert_finite("ce_logits_rows");
            out
        });
        self.tape.push(
            v,
            Op::CeLogits {
                logits: self.id,
                target: target.clone(),
            },
        )
    }
}

impl<'t> std::ops::Add for Var<'t> {
    type Output = Var<'t>;
    fn add(self, rhs: Var<'t>) -> Var<'t> {
        Var::add(self, rhs)
    }
}

impl<'t> std::ops::Sub for Var<'t> {
    type Output = Var<'t>;
    fn sub(self, rhs: Var<'t>) -> Var<'t> {
        Var::sub(self, rhs)
    }
}

impl<'t> std::ops::Mul for Var<'t> {
    type Output = Var<'t>;
    fn mul(self, rhs: Var<'t>) -> Var<'t> {
        Var::mul(self, rhs)
    }
}

impl<'t> std::ops::Div for Var<'t> {
    type Output = Var<'t>;
    fn div(self, rhs: Var<'t>) -> Var<'t> {
        Var::div(self, rhs)
    }
}

impl<'t> std::ops::Add<f64> for Var<'t> {
    type Output = Var<'t>;
    fn add(self, c: f64) -> Var<'t> {
        self.add_scalar(c)
    }
}

impl<'t> std::ops::Sub<f64> for Var<'t> {
    type Output = Var<'t>;
    fn sub(self, c: f64) -> Var<'t> {
        self.add_scalar(-c)
    }
}

impl<'t> std::ops::Mul<f64> for Var<'t> {
    type Output = Var<'t>;
    fn mul(self, c: f64) -> Var<'t> {
        self.mul_scalar(c)
    }
}

impl<'t> std::ops::Mul<Var<'t>> for f64 {
    type Output = Var<'t>;
    fn mul(self, v: Var<'t>) -> Var<'t> {
        v.mul_scalar(self)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::check::{compare_grads, numerical_grad};
    use crate::rng::Rng;

    // Rebuilds the graph from flat leaf data on every evaluation, so finite
    // differences exercise the forward path only.
    fn fd_check(
        shapes: &[Vec<usize>],
        seed: u64,
        init: impl Fn(f64) -> f64,
        build: impl for<'a> Fn(&'a Tape, &[Var<'a>]) -> Var<'a>,
    ) {
        let mut rng = Rng::from_seed(seed);
        let leaves: Vec<Tensor> = shapes
            .iter()
            .map(|s| {
                let mut t = rng.normal_tensor(s);
                for v in t.data_mut() {
                    *v = init(*v);
                }
                t
            })
            .collect();

        let tape = Tape::new();
        let vars: Vec<Var<'_>> = leaves.iter().map(|t| tape.leaf(t.clone())).collect();
        let root = build(&tape, &vars);
        tape.backward(root);

        for (k, leaf) in leaves.iter().enumerate() {
            let analytic = tape.grad(vars[k]).into_data();
            let numeric = numerical_grad(
                |flat: &[f64]| {
                    let t2 = Tape::new();
                    let vars2: Vec<Var<'_>> = leaves
                        .iter()
                        .enumerate()
                        .map(|(i, t)| {
                            if i == k {
                                t2.leaf(Tensor::from_vec(t.shape(), flat.to_vec()))
                            } else {
                                t2.leaf(t.clone())
                            }
                        })
                        .collect();
                    build(&t2, &vars2).value().item()
                },
                leaf.data(),
                1e-5,
            );
            if let Err(e) = compare_grads(&analytic, &numeric, 1e-5, 1e-9) {
                panic!("leaf {}: {}", k, e);
            }
        }
    }

    #[test]
    fn sum_of_leaf_grad_is_ones() {
        let tape = Tape::new();
        let x = tape.leaf(Tensor::from_vec(
            &[2, 3],
            (0..6).map(|i| i as f64).collect(),
        ));
        let root = x.sum();
        tape.backward(root);
        assert_eq!(tape.grad(x).data(), &[1.0; 6]);
    }

    #[test]
    fn repeated_backward_accumulates() {
        let tape = Tape::new();
        let x = tape.leaf(Tensor::from_vec(&[3], vec![1.0, 2.0, 3.0]));
        let root = x.square().sum();
        tape.backward(root);
        tape.backward(root);
        assert_eq!(tape.grad(x).data(), &[4.0, 8.0, 12.0]);
        tape.zero_grads();
        tape.backward(root);
        assert_eq!(tape.grad(x).data(), &[2.0, 4.0, 6.0]);
    }

    #[test]
    #[should_panic(expected = "single-element tensor")]
    fn non_scalar_root_panics() {
        let tape = Tape::new();
        let x = tape.leaf(Tensor::zeros(&[2, 2]));
        tape.backward(x);
    }

    #[test]
    fn matmul_grad_matches_closed_form() {
        // root = sum(a x b): da = ones x b^T, db = a^T x ones.
        let mut rng = Rng::from_seed(5);
        let a = rng.normal_tensor(&[3, 4]);
        let b = rng.normal_tensor(&[4, 2]);
        let tape = Tape::new();
        let (va, vb) = (tape.leaf(a.clone()), tape.leaf(b.clone()));
        let root = va.matmul(vb).sum();
        tape.backward(root);
        let ones = Tensor::ones(&[3, 2]);
        assert!(tape.grad(va).max_abs_diff(&ones.matmul_nt(&b)) < 1e-12);
        assert!(tape.grad(vb).max_abs_diff(&a.matmul_tn(&ones)) < 1e-12);
    }

    #[test]
    fn matmul_grad_matches_fd() {
        fd_check(
            &[vec![3, 4], vec![4, 2]],
            5,
            |v| v,
            |_, vars| vars[0].matmul(vars[1]).square().sum(),
        );
    }

    #[test]
    fn elementwise_binary_grads_match_fd() {
        fd_check(
            &[vec![2, 3], vec![2, 3]],
            6,
            |v| v,
            |_, vars| (vars[0] * vars[1] + (vars[0] - vars[1])).square().sum(),
        );
        // Division keeps the denominator away from zero.
        fd_check(
            &[vec![2, 3], vec![2, 3]],
            7,
            |v| v.abs() + 0.5,
            |_, vars| (vars[0] / vars[1]).sum(),
        );
    }

    #[test]
    fn scalar_broadcast_binary_grads_match_fd() {
        // [1] op [2, 3]: broadcast side reduces by summation on backward.
        fd_check(
            &[vec![1], vec![2, 3]],
            8,
            |v| v.abs() + 0.5,
            |_, vars| ((vars[0] * vars[1]) + (vars[1] / vars[0])).square().sum(),
        );
    }

    #[test]
    fn unary_chain_grads_match_fd() {
        fd_check(
            &[vec![2, 4]],
            9,
            |v| v,
            |_, vars| {
                let x = vars[0];
                (x.tanh() + x.sigmoid() * x.softplus()).square().mean()
            },
        );
        fd_check(
            &[vec![5]],
            10,
            |v| v.abs() + 0.7,
            |_, vars| {
                let x = vars[0];
                (x.log() + x.sqrt().exp()).sum()
            },
        );
    }

    #[test]
    fn abs_subgradient_is_plus_one_at_zero() {
        let tape = Tape::new();
        let x = tape.leaf(Tensor::from_vec(&[3], vec![-2.0, 0.0, 3.0]));
        let root = x.abs().sum();
        tape.backward(root);
        assert_eq!(tape.grad(x).data(), &[-1.0, 1.0, 1.0]);
    }

    #[test]
    fn abs_grad_matches_fd_away_from_kink() {
        fd_check(
            &[vec![6]],
            11,
            |v| if v.abs() < 0.1 { v + 0.5 } else { v },
            |_, vars| (vars[0].abs() * 2.0 + 1.0).square().sum(),
        );
    }

    #[test]
    fn clamp_passes_inside_blocks_outside() {
        let tape = Tape::new();
        let x = tape.leaf(Tensor::from_vec(&[4], vec![-11.0, -10.0, 3.0, 12.0]));
        let root = x.clamp(-10.0, 10.0).sum();
        tape.backward(root);
        assert_eq!(tape.grad(x).data(), &[0.0, 1.0, 1.0, 0.0]);
    }

    #[test]
    fn slice_and_row_ops_match_fd() {
        fd_check(
            &[vec![3, 6], vec![3]],
            12,
            |v| v,
            |_, vars| {
                let mu = vars[0].slice_cols(0, 3);
                let lv = vars[0].slice_cols(3, 3);
                (mu.square() + lv.clamp(-10.0, 10.0).exp())
                    .add_row(vars[1])
                    .sum_rows()
                    .mean()
            },
        );
    }

    #[test]
    fn row_const_ops_match_fd() {
        let row = Tensor::from_vec(&[4], vec![0.5, -1.0, 2.0, 0.25]);
        fd_check(
            &[vec![2, 4]],
            13,
            |v| v,
            move |_, vars| {
                vars[0]
                    .sub_row_const(&row)
                    .abs()
                    .mul_row_const(&row)
                    .add_row_const(&row)
                    .square()
                    .sum()
            },
        );
    }

    #[test]
    fn bias_broadcast_grad_is_column_sums() {
        let tape = Tape::new();
        let x = tape.leaf(Tensor::zeros(&[5, 3]));
        let b = tape.leaf(Tensor::zeros(&[3]));
        let root = x.add_row(b).sum();
        tape.backward(root);
        assert_eq!(tape.grad(b).data(), &[5.0, 5.0, 5.0]);
    }

    #[test]
    fn bce_logits_matches_probability_form_and_fd() {
        let mut rng = Rng::from_seed(14);
        let logits = rng.normal_tensor(&[3, 5]);
        let target = Tensor::from_vec(&[3, 5], (0..15).map(|_| rng.uniform()).collect());
        // Value oracle: clamped-probability BCE.
        let tape = Tape::new();
        let l = tape.leaf(logits.clone());
        let out = l.bce_logits_row_sum(&target);
        let probs = logits.map("sigmoid", sigmoid_stable);
        for i in 0..3 {
            let mut want = 0.0;
            for j in 0..5 {
                let p = probs.at(i, j).clamp(1e-7, 1.0 - 1e-7);
                let t = target.at(i, j);
                want -= t * p.ln() + (1.0 - t) * (1.0 - p).ln();
            }
            assert!((out.value().data()[i] - want).abs() < 1e-9);
        }
        let t2 = target.clone();
        fd_check(
            &[vec![3, 5]],
            15,
            |v| v,
            move |_, vars| vars[0].bce_logits_row_sum(&t2).mean(),
        );
    }

    #[test]
    fn ce_logits_matches_manual_form_and_fd() {
        let mut rng = Rng::from_seed(16);
        let logits = rng.normal_tensor(&[4, 3]).scale(3.0);
        // Rows 0-1 hard one-hot, rows 2-3 soft targets.
        let target = Tensor::from_vec(
            &[4, 3],
            vec![1.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.5, 0.25, 0.25, 0.2, 0.3, 0.5],
        );
        let tape = Tape::new();
        let out = tape.leaf(logits.clone()).ce_logits_rows(&target);
        for i in 0..4 {
            let row = logits.row(i);
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = row.iter().map(|&v| (v - m).exp()).sum();
            let want: f64 = (0..3)
                .map(|j| -target.at(i, j) * ((row[j] - m).exp() / z).ln())
                .sum();
            assert!((out.value().data()[i] - want).abs() < 1e-10);
        }
        let t2 = target.clone();
        fd_check(
            &[vec![4, 3]],
            17,
            |v| v,
            move |_, vars| vars[0].ce_logits_rows(&t2).mean(),
        );
    }

    #[test]
    #[should_panic(expected = "not a distribution")]
    fn ce_logits_rejects_unnormalized_targets() {
        let tape = Tape::new();
        let l = tape.leaf(Tensor::zeros(&[1, 3]));
        let _ = l.ce_logits_rows(&Tensor::from_vec(&[1, 3], vec![0.5, 0.2, 0.1]));
    }

    #[test]
    #[should_panic(expected = "different tapes")]
    fn cross_tape_ops_panic() {
        let t1 = Tape::new();
        let t2 = Tape::new();
        let a = t1.leaf(Tensor::zeros(&[2]));
        let b = t2.leaf(Tensor::zeros(&[2]));
        let _ = a + b;
    }

    #[test]
    #[should_panic(expected = "non-finite")]
    fn log_of_non_positive_panics() {
        let tape = Tape::new();
        let x = tape.leaf(Tensor::from_vec(&[2], vec![1.0, -1.0]));
        let _ = x.log();
    }

    #[test]
    fn grads_are_bit_deterministic() {
        let run = || {
            let mut rng = Rng::from_seed(42);
            let tape = Tape::new();
            let a = tape.leaf(rng.normal_tensor(&[4, 6]));
            let b = tape.leaf(rng.normal_tensor(&[6, 3]));
            let root = a.matmul(b).tanh().square().mean();
            tape.backward(root);
            (tape.grad(a), tape.grad(b))
        };
        let (a1, b1) = run();
        let (a2, b2) = run();
        assert!(a1.bit_eq(&a2) && b1.bit_eq(&b2));
    }
}
