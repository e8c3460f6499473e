//! Reverse-mode automatic differentiation over `f64` matrices.
//!
//! A [`Tape`] records every operation applied to [`Var`] handles; calling
//! [`Tape::backward`] on a scalar result walks the record in reverse and
//! accumulates gradients for every node, including leaves. All values are
//! dense `Array2<f64>` so vectors are represented as `1×d` or `n×1`
//! matrices. The engine is single-threaded and allocation-order
//! deterministic: identical op sequences produce bit-identical gradients.

use std::cell::RefCell;
use std::ops::{Add, Mul, Sub};
use std::sync::Arc;

use ndarray::{concatenate, s, Array2, Axis};

/// Matrix value shared between the tape, parameter stores, and backward
/// closures. Atomically counted so models can be shared across threads;
/// each tape itself stays on one thread.
pub type Value = Arc<Array2<f64>>;

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(usize, usize),
    Transpose(usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    /// `(n×d) + (1×d)`, the row vector added to every row.
    AddRow(usize, usize),
    Scale(usize, f64),
    AddScalar(usize),
    Tanh(usize),
    Sigmoid(usize),
    Relu(usize),
    Sqrt(usize),
    Square(usize),
    SumAll(usize),
    MeanAll(usize),
    /// Sum over axis 0: `(n×d) -> (1×d)`.
    SumRows(usize),
    /// Sum over axis 1: `(n×d) -> (n×1)`.
    SumCols(usize),
    /// `(1×d) -> (n×d)`.
    BroadcastRow(usize),
    /// `(n×1) -> (n×d)`.
    BroadcastCol(usize),
    ConcatRows(Vec<usize>),
    ConcatCols(Vec<usize>),
    SliceCols(usize, usize, usize),
    GatherRows(usize, Vec<usize>),
    SoftmaxRows(usize),
    LayerNorm {
        x: usize,
        gamma: usize,
        beta: usize,
        eps: f64,
    },
    Dropout {
        x: usize,
        mask: Array2<f64>,
    },
    /// Weighted mean NLL over rows of a logits matrix.
    CrossEntropyRows {
        logits: usize,
        targets: Vec<usize>,
        weights: Vec<f64>,
    },
}

struct TapeInner {
    ops: Vec<Op>,
    vals: Vec<Value>,
}

/// Operation record for one forward computation.
pub struct Tape {
    inner: RefCell<TapeInner>,
}

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    idx: usize,
}

/// Gradients produced by [`Tape::backward`], indexed by node.
pub struct Grads {
    by_idx: Vec<Option<Array2<f64>>>,
}

impl Grads {
    /// Gradient of the backward root with respect to `var`, if any path
    /// connected them.
    pub fn get(&self, var: Var<'_>) -> Option<&Array2<f64>> {
        self.by_idx.get(var.idx).and_then(|g| g.as_ref())
    }

    /// Removes and returns the gradient for `var`.
    pub fn take(&mut self, var: Var<'_>) -> Option<Array2<f64>> {
        self.by_idx.get_mut(var.idx).and_then(|g| g.take())
    }
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            inner: RefCell::new(TapeInner {
                ops: Vec::new(),
                vals: Vec::new(),
            }),
        }
    }

    /// Number of recorded nodes.
    pub fn len(&self) -> usize {
        self.inner.borrow().ops.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, op: Op, val: Array2<f64>) -> Var<'_> {
        self.push_shared(op, Arc::new(val))
    }

    fn push_shared(&self, op: Op, val: Value) -> Var<'_> {
        let mut inner = self.inner.borrow_mut();
        inner.ops.push(op);
        inner.vals.push(val);
        Var {
            tape: self,
            idx: inner.ops.len() - 1,
        }
    }

    fn val(&self, idx: usize) -> Value {
        Arc::clone(&self.inner.borrow().vals[idx])
    }

    /// Introduces an owned matrix as a leaf node.
    pub fn leaf(&self, value: Array2<f64>) -> Var<'_> {
        self.push(Op::Leaf, value)
    }

    /// Introduces a shared matrix as a leaf node without copying the data.
    pub fn leaf_shared(&self, value: Value) -> Var<'_> {
        self.push_shared(Op::Leaf, value)
    }

    /// Runs reverse accumulation from `root`, which must be `1×1`.
    pub fn backward(&self, root: Var<'_>) -> Grads {
        let inner = self.inner.borrow();
        assert_eq!(
            inner.vals[root.idx].dim(),
            (1, 1),
            "backward root must be a 1x1 scalar"
        );
        let n = inner.ops.len();
        let mut grads: Vec<Option<Array2<f64>>> = vec![None; n];
        grads[root.idx] = Some(Array2::ones((1, 1)));

        for i in (0..n).rev() {
            // Clone rather than take: callers may read gradients of interior
            // nodes (e.g. gathered embedding rows) after backward finishes.
            let g = match grads[i].as_ref() {
                Some(g) => g.clone(),
                None => continue,
            };
            let vals = &inner.vals;
            let mut acc = |idx: usize, contrib: Array2<f64>| match &mut grads[idx] {
                Some(existing) => *existing += &contrib,
                slot @ None => *slot = Some(contrib),
            };
            match &inner.ops[i] {
                Op::Leaf => {}
                Op::MatMul(a, b) => {
                    acc(*a, g.dot(&vals[*b].t()));
                    acc(*b, vals[*a].t().dot(&g));
                }
                Op::Transpose(a) => acc(*a, g.t().to_owned()),
                Op::Add(a, b) => {
                    acc(*a, g.clone());
                    acc(*b, g.clone());
                }
                Op::Sub(a, b) => {
                    acc(*a, g.clone());
                    acc(*b, -&g);
                }
                Op::Mul(a, b) => {
                    acc(*a, &g * &*vals[*b]);
                    acc(*b, &g * &*vals[*a]);
                }
                Op::Div(a, b) => {
                    acc(*a, &g / &*vals[*b]);
                    let b_val = &*vals[*b];
                    acc(*b, -(&g * &*vals[*a]) / (b_val * b_val));
                }
                Op::AddRow(a, r) => {
                    acc(*a, g.clone());
                    acc(*r, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                }
                Op::Scale(a, c) => acc(*a, &g * *c),
                Op::AddScalar(a) => acc(*a, g.clone()),
                Op::Tanh(a) => {
                    let y = &*vals[i];
                    acc(*a, &g * &y.mapv(|v| 1.0 - v * v));
                }
                Op::Sigmoid(a) => {
                    let y = &*vals[i];
                    acc(*a, &g * &y.mapv(|v| v * (1.0 - v)));
                }
                Op::Relu(a) => {
                    let x = &*vals[*a];
                    acc(*a, &g * &x.mapv(|v| if v > 0.0 { 1.0 } else { 0.0 }));
                }
                Op::Sqrt(a) => {
                    let y = &*vals[i];
                    acc(*a, &g / &(y * 2.0));
                }
                Op::Square(a) => {
                    let x = &*vals[*a];
                    acc(*a, &g * &(x * 2.0));
                }
                Op::SumAll(a) => {
                    let (r, c) = vals[*a].dim();
                    acc(*a, Array2::from_elem((r, c), g[[0, 0]]));
                }
                Op::MeanAll(a) => {
                    let (r, c) = vals[*a].dim();
                    acc(*a, Array2::from_elem((r, c), g[[0, 0]] / (r * c) as f64));
                }
                Op::SumRows(a) => {
                    let n_rows = vals[*a].nrows();
                    acc(*a, broadcast_rows(&g, n_rows));
                }
                Op::SumCols(a) => {
                    let n_cols = vals[*a].ncols();
                    acc(*a, broadcast_cols(&g, n_cols));
                }
                Op::BroadcastRow(a) => acc(*a, g.sum_axis(Axis(0)).insert_axis(Axis(0))),
                Op::BroadcastCol(a) => acc(*a, g.sum_axis(Axis(1)).insert_axis(Axis(1))),
                Op::ConcatRows(parts) => {
                    let mut offset = 0;
                    for &p in parts {
                        let rows = vals[p].nrows();
                        acc(p, g.slice(s![offset..offset + rows, ..]).to_owned());
                        offset += rows;
                    }
                }
                Op::ConcatCols(parts) => {
                    let mut offset = 0;
                    for &p in parts {
                        let cols = vals[p].ncols();
                        acc(p, g.slice(s![.., offset..offset + cols]).to_owned());
                        offset += cols;
                    }
                }
                Op::SliceCols(a, start, end) => {
                    let mut full = Array2::zeros(vals[*a].dim());
                    full.slice_mut(s![.., *start..*end]).assign(&g);
                    acc(*a, full);
                }
                Op::GatherRows(a, rows) => {
                    let mut full = Array2::zeros(vals[*a].dim());
                    for (out_row, &src_row) in rows.iter().enumerate() {
                        let mut dst = full.row_mut(src_row);
                        dst += &g.row(out_row);
                    }
                    acc(*a, full);
                }
                Op::SoftmaxRows(a) => {
                    let y = &*vals[i];
                    let mut dx = Array2::zeros(y.dim());
                    for r in 0..y.nrows() {
                        let yr = y.row(r);
                        let gr = g.row(r);
                        let dot = yr.dot(&gr);
                        for c in 0..y.ncols() {
                            dx[[r, c]] = yr[c] * (gr[c] - dot);
                        }
                    }
                    acc(*a, dx);
                }
                Op::LayerNorm { x, gamma, beta, eps } => {
                    let xv = &*vals[*x];
                    let gv = &*vals[*gamma];
                    let d = xv.ncols() as f64;
                    let mut dx = Array2::zeros(xv.dim());
                    let mut dgamma = Array2::zeros((1, xv.ncols()));
                    let mut dbeta = Array2::zeros((1, xv.ncols()));
                    for r in 0..xv.nrows() {
                        let row = xv.row(r);
                        let mu = row.mean().unwrap();
                        let var = row.mapv(|v| (v - mu) * (v - mu)).mean().unwrap();
                        let sigma = (var + eps).sqrt();
                        let xhat = row.mapv(|v| (v - mu) / sigma);
                        let gr = g.row(r);
                        // d/dgamma, d/dbeta accumulate over rows
                        for c in 0..xv.ncols() {
                            dgamma[[0, c]] += gr[c] * xhat[c];
                            dbeta[[0, c]] += gr[c];
                        }
                        let dxhat: Vec<f64> =
                            (0..xv.ncols()).map(|c| gr[c] * gv[[0, c]]).collect();
                        let mean_dxhat: f64 = dxhat.iter().sum::<f64>() / d;
                        let mean_dxhat_xhat: f64 = dxhat
                            .iter()
                            .zip(xhat.iter())
                            .map(|(a, b)| a * b)
                            .sum::<f64>()
                            / d;
                        for c in 0..xv.ncols() {
                            dx[[r, c]] =
                                (dxhat[c] - mean_dxhat - xhat[c] * mean_dxhat_xhat) / sigma;
                        }
                    }
                    acc(*x, dx);
                    acc(*gamma, dgamma);
                    acc(*beta, dbeta);
                }
                Op::Dropout { x, mask } => acc(*x, &g * mask),
                Op::CrossEntropyRows {
                    logits,
                    targets,
                    weights,
                } => {
                    let lv = &*vals[*logits];
                    let total: f64 = weights.iter().sum();
                    let scale = g[[0, 0]] / total;
                    let mut dl = Array2::zeros(lv.dim());
                    for r in 0..lv.nrows() {
                        if weights[r] == 0.0 {
                            continue;
                        }
                        let probs = stable_softmax_row(&lv.row(r).to_owned().into_raw_vec_and_offset().0);
                        for c in 0..lv.ncols() {
                            let indicator = if c == targets[r] { 1.0 } else { 0.0 };
                            dl[[r, c]] = (probs[c] - indicator) * weights[r] * scale;
                        }
                    }
                    acc(*logits, dl);
                }
            }
        }
        Grads { by_idx: grads }
    }
}

fn broadcast_rows(row: &Array2<f64>, n: usize) -> Array2<f64> {
    let mut out = Array2::zeros((n, row.ncols()));
    for mut r in out.rows_mut() {
        r.assign(&row.row(0));
    }
    out
}

fn broadcast_cols(col: &Array2<f64>, d: usize) -> Array2<f64> {
    let mut out = Array2::zeros((col.nrows(), d));
    for (i, mut r) in out.rows_mut().into_iter().enumerate() {
        r.fill(col[[i, 0]]);
    }
    out
}

fn stable_softmax_row(row: &[f64]) -> Vec<f64> {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = row.iter().map(|v| (v - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

impl<'t> Var<'t> {
    /// Snapshot of this node's value.
    pub fn value(&self) -> Value {
        self.tape.val(self.idx)
    }

    pub fn dim(&self) -> (usize, usize) {
        self.value().dim()
    }

    pub fn matmul(self, rhs: Var<'t>) -> Var<'t> {
        let v = self.value().dot(&*rhs.value());
        self.tape.push(Op::MatMul(self.idx, rhs.idx), v)
    }

    pub fn t(self) -> Var<'t> {
        let v = self.value().t().to_owned();
        self.tape.push(Op::Transpose(self.idx), v)
    }

    /// Adds a `1×d` row vector to every row of an `n×d` matrix.
    pub fn add_row(self, row: Var<'t>) -> Var<'t> {
        let a = self.value();
        let r = row.value();
        debug_assert_eq!(r.nrows(), 1);
        let mut out = (*a).clone();
        for mut orow in out.rows_mut() {
            orow += &r.row(0);
        }
        self.tape.push(Op::AddRow(self.idx, row.idx), out)
    }

    pub fn scale(self, c: f64) -> Var<'t> {
        let v = &*self.value() * c;
        self.tape.push(Op::Scale(self.idx, c), v)
    }

    pub fn add_scalar(self, c: f64) -> Var<'t> {
        let v = &*self.value() + c;
        self.tape.push(Op::AddScalar(self.idx), v)
    }

    pub fn tanh(self) -> Var<'t> {
        let v = self.value().mapv(f64::tanh);
        self.tape.push(Op::Tanh(self.idx), v)
    }

    pub fn sigmoid(self) -> Var<'t> {
        let v = self.value().mapv(|x| 1.0 / (1.0 + (-x).exp()));
        self.tape.push(Op::Sigmoid(self.idx), v)
    }

    pub fn relu(self) -> Var<'t> {
        let v = self.value().mapv(|x| x.max(0.0));
        self.tape.push(Op::Relu(self.idx), v)
    }

    pub fn sqrt(self) -> Var<'t> {
        let v = self.value().mapv(f64::sqrt);
        self.tape.push(Op::Sqrt(self.idx), v)
    }

    pub fn square(self) -> Var<'t> {
        let v = self.value().mapv(|x| x * x);
        self.tape.push(Op::Square(self.idx), v)
    }

    pub fn div(self, rhs: Var<'t>) -> Var<'t> {
        let v = &*self.value() / &*rhs.value();
        self.tape.push(Op::Div(self.idx, rhs.idx), v)
    }

    pub fn sum_all(self) -> Var<'t> {
        let v = Array2::from_elem((1, 1), self.value().sum());
        self.tape.push(Op::SumAll(self.idx), v)
    }

    pub fn mean_all(self) -> Var<'t> {
        let a = self.value();
        let v = Array2::from_elem((1, 1), a.sum() / a.len() as f64);
        self.tape.push(Op::MeanAll(self.idx), v)
    }

    pub fn sum_rows(self) -> Var<'t> {
        let v = self.value().sum_axis(Axis(0)).insert_axis(Axis(0));
        self.tape.push(Op::SumRows(self.idx), v)
    }

    pub fn sum_cols(self) -> Var<'t> {
        let v = self.value().sum_axis(Axis(1)).insert_axis(Axis(1));
        self.tape.push(Op::SumCols(self.idx), v)
    }

    pub fn broadcast_row(self, n: usize) -> Var<'t> {
        let v = broadcast_rows(&self.value(), n);
        self.tape.push(Op::BroadcastRow(self.idx), v)
    }

    pub fn broadcast_col(self, d: usize) -> Var<'t> {
        let v = broadcast_cols(&self.value(), d);
        self.tape.push(Op::BroadcastCol(self.idx), v)
    }

    pub fn slice_cols(self, start: usize, end: usize) -> Var<'t> {
        let v = self.value().slice(s![.., start..end]).to_owned();
        self.tape.push(Op::SliceCols(self.idx, start, end), v)
    }

    /// Selects rows by index; indices may repeat.
    pub fn gather_rows(self, rows: &[usize]) -> Var<'t> {
        let a = self.value();
        let mut out = Array2::zeros((rows.len(), a.ncols()));
        for (i, &r) in rows.iter().enumerate() {
            out.row_mut(i).assign(&a.row(r));
        }
        self.tape
            .push(Op::GatherRows(self.idx, rows.to_vec()), out)
    }

    pub fn softmax_rows(self) -> Var<'t> {
        let a = self.value();
        let mut out = Array2::zeros(a.dim());
        for (i, row) in a.rows().into_iter().enumerate() {
            let probs = stable_softmax_row(&row.to_owned().into_raw_vec_and_offset().0);
            for (j, p) in probs.into_iter().enumerate() {
                out[[i, j]] = p;
            }
        }
        self.tape.push(Op::SoftmaxRows(self.idx), out)
    }

    /// Row-wise layer normalization with learned gain and bias (`1×d` each).
    pub fn layer_norm(self, gamma: Var<'t>, beta: Var<'t>, eps: f64) -> Var<'t> {
        let x = self.value();
        let gv = gamma.value();
        let bv = beta.value();
        let mut out = Array2::zeros(x.dim());
        for (r, row) in x.rows().into_iter().enumerate() {
            let mu = row.mean().unwrap();
            let var = row.mapv(|v| (v - mu) * (v - mu)).mean().unwrap();
            let sigma = (var + eps).sqrt();
            for c in 0..x.ncols() {
                out[[r, c]] = (row[c] - mu) / sigma * gv[[0, c]] + bv[[0, c]];
            }
        }
        self.tape.push(
            Op::LayerNorm {
                x: self.idx,
                gamma: gamma.idx,
                beta: beta.idx,
                eps,
            },
            out,
        )
    }

    /// Inverted dropout with a caller-supplied keep mask already scaled by
    /// `1/(1-p)`. Identity when `mask` is all ones.
    pub fn dropout_mask(self, mask: Array2<f64>) -> Var<'t> {
        let v = &*self.value() * &mask;
        self.tape.push(Op::Dropout { x: self.idx, mask }, v)
    }

    /// Weighted mean negative log-likelihood over rows. Rows with weight 0
    /// are excluded; weights must not all be zero.
    pub fn cross_entropy_rows(self, targets: &[usize], weights: &[f64]) -> Var<'t> {
        let logits = self.value();
        assert_eq!(logits.nrows(), targets.len());
        assert_eq!(logits.nrows(), weights.len());
        let total: f64 = weights.iter().sum();
        assert!(total > 0.0, "cross entropy needs at least one weighted row");
        let mut loss = 0.0;
        for (r, row) in logits.rows().into_iter().enumerate() {
            if weights[r] == 0.0 {
                continue;
            }
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            loss += weights[r] * (lse - row[targets[r]]);
        }
        let v = Array2::from_elem((1, 1), loss / total);
        self.tape.push(
            Op::CrossEntropyRows {
                logits: self.idx,
                targets: targets.to_vec(),
                weights: weights.to_vec(),
            },
            v,
        )
    }

    /// Stacks matrices vertically.
    pub fn concat_rows(vars: &[Var<'t>]) -> Var<'t> {
        assert!(!vars.is_empty());
        let tape = vars[0].tape;
        let vals: Vec<Value> = vars.iter().map(|v| v.value()).collect();
        let views: Vec<_> = vals.iter().map(|v| v.view()).collect();
        let out = concatenate(Axis(0), &views).expect("row concat shape mismatch");
        tape.push(Op::ConcatRows(vars.iter().map(|v| v.idx).collect()), out)
    }

    /// Stacks matrices horizontally.
    pub fn concat_cols(vars: &[Var<'t>]) -> Var<'t> {
        assert!(!vars.is_empty());
        let tape = vars[0].tape;
        let vals: Vec<Value> = vars.iter().map(|v| v.value()).collect();
        let views: Vec<_> = vals.iter().map(|v| v.view()).collect();
        let out = concatenate(Axis(1), &views).expect("col concat shape mismatch");
        tape.push(Op::ConcatCols(vars.iter().map(|v| v.idx).collect()), out)
    }
}

impl<'t> Add for Var<'t> {
    type Output = Var<'t>;
    fn add(self, rhs: Var<'t>) -> Var<'t> {
        let v = &*self.value() + &*rhs.value();
        self.tape.push(Op::Add(self.idx, rhs.idx), v)
    }
}

impl<'t> Sub for Var<'t> {
    type Output = Var<'t>;
    fn sub(self, rhs: Var<'t>) -> Var<'t> {
        let v = &*self.value() - &*rhs.value();
        self.tape.push(Op::Sub(self.idx, rhs.idx), v)
    }
}

impl<'t> Mul for Var<'t> {
    type Output = Var<'t>;
    fn mul(self, rhs: Var<'t>) -> Var<'t> {
        let v = &*self.value() * &*rhs.value();
        self.tape.push(Op::Mul(self.idx, rhs.idx), v)
    }
}
