//! Reverse-mode automatic differentiation over [`Matrix`] values.
//!
//! A [`Tape`] records every operation of one forward pass; [`Tape::backward`]
//! walks the recording in reverse and returns the gradient of a scalar output
//! with respect to every node. The op set is exactly what the prompt
//! generator, the recurrent prompt encoder and the toy masked LM need.

use std::cell::RefCell;

use super::matrix::Matrix;

const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(usize, usize),
    Add(usize, usize),
    /// Adds a 1xC row vector to every row of an RxC matrix.
    AddRow(usize, usize),
    Sub(usize, usize),
    Hadamard(usize, usize),
    Scale(usize, f64),
    Tanh(usize),
    Sigmoid(usize),
    SoftmaxRows(usize),
    LogSoftmaxRows(usize),
    LayerNormRows {
        x: usize,
        gain: usize,
        bias: usize,
    },
    ConcatCols(Vec<usize>),
    ConcatRows(Vec<usize>),
    SliceCols {
        x: usize,
        start: usize,
        len: usize,
    },
    SliceRows {
        x: usize,
        start: usize,
        len: usize,
    },
    Transpose(usize),
    /// Stacks rows `ids` of `x` into a new matrix (embedding lookup).
    GatherRows {
        x: usize,
        ids: Vec<usize>,
    },
    MeanAll(usize),
    Pick {
        x: usize,
        r: usize,
        c: usize,
    },
}

struct Node {
    op: Op,
    value: Matrix,
}

/// One forward-pass recording.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

/// Handle to a node on a tape. Cheap to copy; all arithmetic happens through
/// these handles so the backward pass can be replayed.
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    idx: usize,
    rows: usize,
    cols: usize,
}

/// Gradients of one scalar node with respect to every node on the tape.
pub struct Gradients {
    grads: Vec<Option<Matrix>>,
}

impl Gradients {
    /// Gradient for `var`, zeros if the loss does not depend on it.
    pub fn get(&self, var: Var<'_>) -> Matrix {
        self.grads[var.idx]
            .clone()
            .unwrap_or_else(|| Matrix::zeros(var.rows, var.cols))
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    fn push(&self, op: Op, value: Matrix) -> Var<'_> {
        let rows = value.rows;
        let cols = value.cols;
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { op, value });
        Var {
            tape: self,
            idx: nodes.len() - 1,
            rows,
            cols,
        }
    }

    /// Registers an input matrix (parameter or constant) on the tape.
    pub fn leaf(&self, value: Matrix) -> Var<'_> {
        self.push(Op::Leaf, value)
    }

    pub fn concat_rows<'t>(&'t self, parts: &[Var<'t>]) -> Var<'t> {
        assert!(!parts.is_empty(), "concat_rows of zero parts");
        let cols = parts[0].cols;
        let mut data = Vec::new();
        let mut rows = 0;
        {
            let nodes = self.nodes.borrow();
            for p in parts {
                assert!(std::ptr::eq(p.tape, self), "var from another tape");
                assert_eq!(p.cols, cols, "concat_rows column mismatch");
                data.extend_from_slice(&nodes[p.idx].value.data);
                rows += p.rows;
            }
        }
        self.push(
            Op::ConcatRows(parts.iter().map(|p| p.idx).collect()),
            Matrix::from_vec(rows, cols, data),
        )
    }

    pub fn concat_cols<'t>(&'t self, parts: &[Var<'t>]) -> Var<'t> {
        assert!(!parts.is_empty(), "concat_cols of zero parts");
        let rows = parts[0].rows;
        let cols: usize = parts.iter().map(|p| p.cols).sum();
        let mut out = Matrix::zeros(rows, cols);
        {
            let nodes = self.nodes.borrow();
            let mut offset = 0;
            for p in parts {
                assert!(std::ptr::eq(p.tape, self), "var from another tape");
                assert_eq!(p.rows, rows, "concat_cols row mismatch");
                let v = &nodes[p.idx].value;
                for r in 0..rows {
                    out.row_mut(r)[offset..offset + p.cols].copy_from_slice(v.row(r));
                }
                offset += p.cols;
            }
        }
        self.push(
            Op::ConcatCols(parts.iter().map(|p| p.idx).collect()),
            out,
        )
    }

    /// Mean of a set of scalar (1x1) nodes.
    pub fn mean_of_scalars<'t>(&'t self, parts: &[Var<'t>]) -> Var<'t> {
        let stacked = self.concat_rows(parts);
        stacked.mean_all()
    }

    /// Gradient of scalar `loss` w.r.t. every node on the tape.
    pub fn backward(&self, loss: Var<'_>) -> Gradients {
        assert!(std::ptr::eq(loss.tape, self), "loss from another tape");
        assert_eq!((loss.rows, loss.cols), (1, 1), "loss must be scalar");
        let nodes = self.nodes.borrow();
        let mut grads: Vec<Option<Matrix>> = (0..nodes.len()).map(|_| None).collect();
        grads[loss.idx] = Some(Matrix::filled(1, 1, 1.0));

        let add_to = |grads: &mut Vec<Option<Matrix>>, idx: usize, delta: Matrix| {
            match &mut grads[idx] {
                Some(existing) => existing.add_assign(&delta),
                slot @ None => *slot = Some(delta),
            }
        };

        for i in (0..=loss.idx).rev() {
            let Some(g) = grads[i].take() else { continue };
            let value = &nodes[i].value;
            match &nodes[i].op {
                Op::Leaf => {}
                Op::MatMul(a, b) => {
                    let av = &nodes[*a].value;
                    let bv = &nodes[*b].value;
                    add_to(&mut grads, *a, g.matmul(&bv.transpose()));
                    add_to(&mut grads, *b, av.transpose().matmul(&g));
                }
                Op::Add(a, b) => {
                    add_to(&mut grads, *a, g.clone());
                    add_to(&mut grads, *b, g.clone());
                }
                Op::AddRow(a, b) => {
                    add_to(&mut grads, *a, g.clone());
                    let mut gb = Matrix::zeros(1, g.cols);
                    for r in 0..g.rows {
                        for c in 0..g.cols {
                            gb.data[c] += g.get(r, c);
                        }
                    }
                    add_to(&mut grads, *b, gb);
                }
                Op::Sub(a, b) => {
                    add_to(&mut grads, *a, g.clone());
                    let mut gb = g.clone();
                    gb.scale_assign(-1.0);
                    add_to(&mut grads, *b, gb);
                }
                Op::Hadamard(a, b) => {
                    let av = &nodes[*a].value;
                    let bv = &nodes[*b].value;
                    let mut ga = g.clone();
                    for (x, y) in ga.data.iter_mut().zip(bv.data.iter()) {
                        *x *= y;
                    }
                    let mut gb = g.clone();
                    for (x, y) in gb.data.iter_mut().zip(av.data.iter()) {
                        *x *= y;
                    }
                    add_to(&mut grads, *a, ga);
                    add_to(&mut grads, *b, gb);
                }
                Op::Scale(a, f) => {
                    let mut ga = g.clone();
                    ga.scale_assign(*f);
                    add_to(&mut grads, *a, ga);
                }
                Op::Tanh(a) => {
                    let mut ga = g.clone();
                    for (x, y) in ga.data.iter_mut().zip(value.data.iter()) {
                        *x *= 1.0 - y * y;
                    }
                    add_to(&mut grads, *a, ga);
                }
                Op::Sigmoid(a) => {
                    let mut ga = g.clone();
                    for (x, y) in ga.data.iter_mut().zip(value.data.iter()) {
                        *x *= y * (1.0 - y);
                    }
                    add_to(&mut grads, *a, ga);
                }
                Op::SoftmaxRows(a) => {
                    // dx = y * (g - <g, y>) per row
                    let mut ga = Matrix::zeros(g.rows, g.cols);
                    for r in 0..g.rows {
                        let dot: f64 = g
                            .row(r)
                            .iter()
                            .zip(value.row(r).iter())
                            .map(|(x, y)| x * y)
                            .sum();
                        for c in 0..g.cols {
                            ga.set(r, c, value.get(r, c) * (g.get(r, c) - dot));
                        }
                    }
                    add_to(&mut grads, *a, ga);
                }
                Op::LogSoftmaxRows(a) => {
                    // dx = g - softmax(x) * sum(g) per row
                    let mut ga = Matrix::zeros(g.rows, g.cols);
                    for r in 0..g.rows {
                        let gsum: f64 = g.row(r).iter().sum();
                        for c in 0..g.cols {
                            let p = value.get(r, c).exp();
                            ga.set(r, c, g.get(r, c) - p * gsum);
                        }
                    }
                    add_to(&mut grads, *a, ga);
                }
                Op::LayerNormRows { x, gain, bias } => {
                    let xv = &nodes[*x].value;
                    let gainv = &nodes[*gain].value;
                    let n = xv.cols as f64;
                    let mut gx = Matrix::zeros(xv.rows, xv.cols);
                    let mut ggain = Matrix::zeros(1, xv.cols);
                    let mut gbias = Matrix::zeros(1, xv.cols);
                    for r in 0..xv.rows {
                        let row = xv.row(r);
                        let mean = row.iter().sum::<f64>() / n;
                        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
                        let inv_std = 1.0 / (var + LAYER_NORM_EPS).sqrt();
                        let xhat: Vec<f64> = row.iter().map(|v| (v - mean) * inv_std).collect();
                        let dxhat: Vec<f64> = (0..xv.cols)
                            .map(|c| g.get(r, c) * gainv.data[c])
                            .collect();
                        let mean_dxhat = dxhat.iter().sum::<f64>() / n;
                        let mean_dxhat_xhat = dxhat
                            .iter()
                            .zip(xhat.iter())
                            .map(|(a, b)| a * b)
                            .sum::<f64>()
                            / n;
                        for c in 0..xv.cols {
                            gx.set(
                                r,
                                c,
                                inv_std * (dxhat[c] - mean_dxhat - xhat[c] * mean_dxhat_xhat),
                            );
                            ggain.data[c] += g.get(r, c) * xhat[c];
                            gbias.data[c] += g.get(r, c);
                        }
                    }
                    add_to(&mut grads, *x, gx);
                    add_to(&mut grads, *gain, ggain);
                    add_to(&mut grads, *bias, gbias);
                }
                Op::ConcatCols(parts) => {
                    let mut offset = 0;
                    for p in parts {
                        let pc = nodes[*p].value.cols;
                        let mut gp = Matrix::zeros(g.rows, pc);
                        for r in 0..g.rows {
                            gp.row_mut(r).copy_from_slice(&g.row(r)[offset..offset + pc]);
                        }
                        add_to(&mut grads, *p, gp);
                        offset += pc;
                    }
                }
                Op::ConcatRows(parts) => {
                    let mut offset = 0;
                    for p in parts {
                        let pr = nodes[*p].value.rows;
                        let mut gp = Matrix::zeros(pr, g.cols);
                        for r in 0..pr {
                            gp.row_mut(r).copy_from_slice(g.row(offset + r));
                        }
                        add_to(&mut grads, *p, gp);
                        offset += pr;
                    }
                }
                Op::SliceCols { x, start, len } => {
                    let xv = &nodes[*x].value;
                    let mut gx = Matrix::zeros(xv.rows, xv.cols);
                    for r in 0..g.rows {
                        gx.row_mut(r)[*start..*start + *len].copy_from_slice(g.row(r));
                    }
                    add_to(&mut grads, *x, gx);
                }
                Op::SliceRows { x, start, len } => {
                    let xv = &nodes[*x].value;
                    let mut gx = Matrix::zeros(xv.rows, xv.cols);
                    for r in 0..*len {
                        gx.row_mut(*start + r).copy_from_slice(g.row(r));
                    }
                    add_to(&mut grads, *x, gx);
                }
                Op::Transpose(a) => {
                    add_to(&mut grads, *a, g.transpose());
                }
                Op::GatherRows { x, ids } => {
                    let xv = &nodes[*x].value;
                    let mut gx = Matrix::zeros(xv.rows, xv.cols);
                    for (r, id) in ids.iter().enumerate() {
                        let grow = g.row(r);
                        for (dst, src) in gx.row_mut(*id).iter_mut().zip(grow.iter()) {
                            *dst += src;
                        }
                    }
                    add_to(&mut grads, *x, gx);
                }
                Op::MeanAll(a) => {
                    let av = &nodes[*a].value;
                    let scale = g.data[0] / av.len() as f64;
                    add_to(&mut grads, *a, Matrix::filled(av.rows, av.cols, scale));
                }
                Op::Pick { x, r, c } => {
                    let xv = &nodes[*x].value;
                    let mut gx = Matrix::zeros(xv.rows, xv.cols);
                    gx.set(*r, *c, g.data[0]);
                    add_to(&mut grads, *x, gx);
                }
            }
            grads[i] = Some(g);
        }
        Gradients { grads }
    }
}

impl<'t> Var<'t> {
    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    /// Snapshot of the node's value.
    pub fn value(&self) -> Matrix {
        self.tape.nodes.borrow()[self.idx].value.clone()
    }

    pub fn scalar(&self) -> f64 {
        assert_eq!((self.rows, self.cols), (1, 1), "scalar() on non-scalar var");
        self.tape.nodes.borrow()[self.idx].value.data[0]
    }

    fn same_tape(&self, other: &Var<'t>) {
        assert!(std::ptr::eq(self.tape, other.tape), "vars from different tapes");
    }

    pub fn matmul(self, other: Var<'t>) -> Var<'t> {
        self.same_tape(&other);
        let value = {
            let nodes = self.tape.nodes.borrow();
            nodes[self.idx].value.matmul(&nodes[other.idx].value)
        };
        self.tape.push(Op::MatMul(self.idx, other.idx), value)
    }

    pub fn add(self, other: Var<'t>) -> Var<'t> {
        self.same_tape(&other);
        assert_eq!(self.shape(), other.shape(), "add shape mismatch");
        let value = {
            let nodes = self.tape.nodes.borrow();
            let mut v = nodes[self.idx].value.clone();
            v.add_assign(&nodes[other.idx].value);
            v
        };
        self.tape.push(Op::Add(self.idx, other.idx), value)
    }

    /// `self` is RxC, `row` is 1xC; adds `row` to every row.
    pub fn add_row(self, row: Var<'t>) -> Var<'t> {
        self.same_tape(&row);
        assert_eq!(row.rows, 1, "add_row expects a 1xC row vector");
        assert_eq!(self.cols, row.cols, "add_row column mismatch");
        let value = {
            let nodes = self.tape.nodes.borrow();
            let mut v = nodes[self.idx].value.clone();
            let rv = &nodes[row.idx].value;
            for r in 0..v.rows {
                for c in 0..v.cols {
                    v.data[r * v.cols + c] += rv.data[c];
                }
            }
            v
        };
        self.tape.push(Op::AddRow(self.idx, row.idx), value)
    }

    pub fn sub(self, other: Var<'t>) -> Var<'t> {
        self.same_tape(&other);
        assert_eq!(self.shape(), other.shape(), "sub shape mismatch");
        let value = {
            let nodes = self.tape.nodes.borrow();
            let a = &nodes[self.idx].value;
            let b = &nodes[other.idx].value;
            let data = a.data.iter().zip(b.data.iter()).map(|(x, y)| x - y).collect();
            Matrix::from_vec(a.rows, a.cols, data)
        };
        self.tape.push(Op::Sub(self.idx, other.idx), value)
    }

    pub fn hadamard(self, other: Var<'t>) -> Var<'t> {
        self.same_tape(&other);
        assert_eq!(self.shape(), other.shape(), "hadamard shape mismatch");
        let value = {
            let nodes = self.tape.nodes.borrow();
            let a = &nodes[self.idx].value;
            let b = &nodes[other.idx].value;
            let data = a.data.iter().zip(b.data.iter()).map(|(x, y)| x * y).collect();
            Matrix::from_vec(a.rows, a.cols, data)
        };
        self.tape.push(Op::Hadamard(self.idx, other.idx), value)
    }

    pub fn scale(self, factor: f64) -> Var<'t> {
        let value = {
            let mut v = self.value();
            v.scale_assign(factor);
            v
        };
        self.tape.push(Op::Scale(self.idx, factor), value)
    }

    pub fn tanh(self) -> Var<'t> {
        let value = {
            let mut v = self.value();
            for x in v.data.iter_mut() {
                *x = x.tanh();
            }
            v
        };
        self.tape.push(Op::Tanh(self.idx), value)
    }

    pub fn sigmoid(self) -> Var<'t> {
        let value = {
            let mut v = self.value();
            for x in v.data.iter_mut() {
                *x = 1.0 / (1.0 + (-*x).exp());
            }
            v
        };
        self.tape.push(Op::Sigmoid(self.idx), value)
    }

    pub fn softmax_rows(self) -> Var<'t> {
        let value = {
            let mut v = self.value();
            for r in 0..v.rows {
                let row = v.row_mut(r);
                let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let mut sum = 0.0;
                for x in row.iter_mut() {
                    *x = (*x - max).exp();
                    sum += *x;
                }
                for x in row.iter_mut() {
                    *x /= sum;
                }
            }
            v
        };
        self.tape.push(Op::SoftmaxRows(self.idx), value)
    }

    pub fn log_softmax_rows(self) -> Var<'t> {
        let value = {
            let mut v = self.value();
            for r in 0..v.rows {
                let row = v.row_mut(r);
                let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let log_sum = row.iter().map(|x| (x - max).exp()).sum::<f64>().ln() + max;
                for x in row.iter_mut() {
                    *x -= log_sum;
                }
            }
            v
        };
        self.tape.push(Op::LogSoftmaxRows(self.idx), value)
    }

    /// Row-wise layer normalization with learned gain and bias (both 1xC).
    pub fn layer_norm_rows(self, gain: Var<'t>, bias: Var<'t>) -> Var<'t> {
        self.same_tape(&gain);
        self.same_tape(&bias);
        assert_eq!(gain.shape(), (1, self.cols), "layer norm gain shape");
        assert_eq!(bias.shape(), (1, self.cols), "layer norm bias shape");
        let value = {
            let nodes = self.tape.nodes.borrow();
            let x = &nodes[self.idx].value;
            let gv = &nodes[gain.idx].value;
            let bv = &nodes[bias.idx].value;
            let n = x.cols as f64;
            let mut out = Matrix::zeros(x.rows, x.cols);
            for r in 0..x.rows {
                let row = x.row(r);
                let mean = row.iter().sum::<f64>() / n;
                let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
                let inv_std = 1.0 / (var + LAYER_NORM_EPS).sqrt();
                for c in 0..x.cols {
                    out.set(r, c, (row[c] - mean) * inv_std * gv.data[c] + bv.data[c]);
                }
            }
            out
        };
        self.tape.push(
            Op::LayerNormRows {
                x: self.idx,
                gain: gain.idx,
                bias: bias.idx,
            },
            value,
        )
    }

    pub fn slice_cols(self, start: usize, len: usize) -> Var<'t> {
        assert!(start + len <= self.cols, "slice_cols out of range");
        let value = {
            let nodes = self.tape.nodes.borrow();
            let x = &nodes[self.idx].value;
            let mut out = Matrix::zeros(x.rows, len);
            for r in 0..x.rows {
                out.row_mut(r).copy_from_slice(&x.row(r)[start..start + len]);
            }
            out
        };
        self.tape.push(
            Op::SliceCols {
                x: self.idx,
                start,
                len,
            },
            value,
        )
    }

    pub fn slice_rows(self, start: usize, len: usize) -> Var<'t> {
        assert!(start + len <= self.rows, "slice_rows out of range");
        let value = {
            let nodes = self.tape.nodes.borrow();
            let x = &nodes[self.idx].value;
            let mut out = Matrix::zeros(len, x.cols);
            for r in 0..len {
                out.row_mut(r).copy_from_slice(x.row(start + r));
            }
            out
        };
        self.tape.push(
            Op::SliceRows {
                x: self.idx,
                start,
                len,
            },
            value,
        )
    }

    pub fn transpose_var(self) -> Var<'t> {
        let value = self.value().transpose();
        self.tape.push(Op::Transpose(self.idx), value)
    }

    /// Stacks rows `ids` of `self` (an embedding table) into a new matrix.
    pub fn gather_rows(self, ids: &[usize]) -> Var<'t> {
        let value = {
            let nodes = self.tape.nodes.borrow();
            let x = &nodes[self.idx].value;
            let mut out = Matrix::zeros(ids.len(), x.cols);
            for (r, id) in ids.iter().enumerate() {
                assert!(*id < x.rows, "gather_rows id {} out of range {}", id, x.rows);
                out.row_mut(r).copy_from_slice(x.row(*id));
            }
            out
        };
        self.tape.push(
            Op::GatherRows {
                x: self.idx,
                ids: ids.to_vec(),
            },
            value,
        )
    }

    pub fn mean_all(self) -> Var<'t> {
        let value = {
            let nodes = self.tape.nodes.borrow();
            let x = &nodes[self.idx].value;
            Matrix::filled(1, 1, x.data.iter().sum::<f64>() / x.len() as f64)
        };
        self.tape.push(Op::MeanAll(self.idx), value)
    }

    pub fn pick(self, r: usize, c: usize) -> Var<'t> {
        assert!(r < self.rows && c < self.cols, "pick out of range");
        let value = {
            let nodes = self.tape.nodes.borrow();
            Matrix::filled(1, 1, nodes[self.idx].value.get(r, c))
        };
        self.tape.push(
            Op::Pick {
                x: self.idx,
                r,
                c,
            },
            value,
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Central finite differences on an arbitrary scalar function of one
    /// input matrix, compared against tape gradients.
    fn check_grad<F>(input: Matrix, f: F, tol: f64)
    where
        F: for<'a> Fn(&'a Tape, Var<'a>) -> Var<'a>,
    {
        let tape = Tape::new();
        let x = tape.leaf(input.clone());
        let loss = f(&tape, x);
        let grads = tape.backward(loss);
        let analytic = grads.get(x);

        let h = 1e-6;
        for i in 0..input.len() {
            let mut plus = input.clone();
            plus.data[i] += h;
            let tp = Tape::new();
            let lp = f(&tp, tp.leaf(plus)).scalar();

            let mut minus = input.clone();
            minus.data[i] -= h;
            let tm = Tape::new();
            let lm = f(&tm, tm.leaf(minus)).scalar();

            let numeric = (lp - lm) / (2.0 * h);
            let denom = analytic.data[i].abs().max(numeric.abs()).max(1e-8);
            let rel = (analytic.data[i] - numeric).abs() / denom;
            assert!(
                rel < tol,
                "element {}: analytic {} vs numeric {} (rel {})",
                i,
                analytic.data[i],
                numeric,
                rel
            );
        }
    }

    fn test_input(rows: usize, cols: usize) -> Matrix {
        let data = (0..rows * cols)
            .map(|i| ((i as f64 * 0.7).sin() + 0.1) * 0.8)
            .collect();
        Matrix::from_vec(rows, cols, data)
    }

    #[test]
    fn grad_matmul_tanh() {
        let w = Matrix::from_vec(3, 2, vec![0.3, -0.2, 0.5, 0.1, -0.4, 0.7]);
        check_grad(test_input(2, 3), |t, x| {
            let wv = t.leaf(w.clone());
            x.matmul(wv).tanh().mean_all()
        }, 1e-5);
    }

    #[test]
    fn grad_softmax_pick() {
        check_grad(test_input(2, 4), |_t, x| {
            x.softmax_rows().pick(1, 2)
        }, 1e-5);
    }

    #[test]
    fn grad_log_softmax() {
        check_grad(test_input(2, 5), |_t, x| {
            x.log_softmax_rows().pick(0, 3).scale(-1.0)
        }, 1e-5);
    }

    #[test]
    fn grad_layer_norm() {
        check_grad(test_input(3, 4), |t, x| {
            let gain = t.leaf(Matrix::row_vec(vec![1.1, 0.9, 1.3, 0.8]));
            let bias = t.leaf(Matrix::row_vec(vec![0.1, -0.2, 0.3, 0.0]));
            x.layer_norm_rows(gain, bias).tanh().mean_all()
        }, 1e-4);
    }

    #[test]
    fn grad_layer_norm_gain_bias() {
        let x = test_input(3, 4);
        let tape = Tape::new();
        let xv = tape.leaf(x.clone());
        let gain0 = Matrix::row_vec(vec![1.1, 0.9, 1.3, 0.8]);
        let bias0 = Matrix::row_vec(vec![0.1, -0.2, 0.3, 0.0]);
        let gain = tape.leaf(gain0.clone());
        let bias = tape.leaf(bias0.clone());
        let loss = xv.layer_norm_rows(gain, bias).tanh().mean_all();
        let grads = tape.backward(loss);
        let ggain = grads.get(gain);
        let gbias = grads.get(bias);

        let h = 1e-6;
        for i in 0..4 {
            for (param, analytic) in [(0, &ggain), (1, &gbias)] {
                let run = |delta: f64| {
                    let mut g = gain0.clone();
                    let mut b = bias0.clone();
                    if param == 0 {
                        g.data[i] += delta;
                    } else {
                        b.data[i] += delta;
                    }
                    let t = Tape::new();
                    let xv = t.leaf(x.clone());
                    let gv = t.leaf(g);
                    let bv = t.leaf(b);
                    xv.layer_norm_rows(gv, bv).tanh().mean_all().scalar()
                };
                let numeric = (run(h) - run(-h)) / (2.0 * h);
                let denom = analytic.data[i].abs().max(numeric.abs()).max(1e-8);
                assert!((analytic.data[i] - numeric).abs() / denom < 1e-4);
            }
        }
    }

    #[test]
    fn grad_concat_slice_gather() {
        check_grad(test_input(4, 3), |t, x| {
            let a = x.slice_rows(0, 2);
            let b = x.slice_rows(2, 2);
            let joined = t.concat_cols(&[a, b]);
            let picked = joined.gather_rows(&[1, 0, 1]);
            picked.sigmoid().mean_all()
        }, 1e-5);
    }

    #[test]
    fn grad_hadamard_add_row() {
        check_grad(test_input(3, 3), |t, x| {
            let row = t.leaf(Matrix::row_vec(vec![0.2, -0.3, 0.4]));
            let y = x.add_row(row);
            y.hadamard(y).mean_all()
        }, 1e-5);
    }

    #[test]
    fn grad_transpose_sub_scale() {
        check_grad(test_input(2, 3), |t, x| {
            let w = t.leaf(test_input(2, 3));
            x.sub(w).transpose_var().scale(2.5).tanh().mean_all()
        }, 1e-5);
    }

    #[test]
    fn grad_sigmoid_chain() {
        check_grad(test_input(1, 6), |_t, x| {
            x.sigmoid().tanh().mean_all()
        }, 1e-5);
    }

    #[test]
    fn gather_rows_accumulates_repeats() {
        let tape = Tape::new();
        let table = tape.leaf(test_input(3, 2));
        let picked = table.gather_rows(&[1, 1, 2]);
        let loss = picked.mean_all();
        let grads = tape.backward(loss);
        let g = grads.get(table);
        // row 1 picked twice, so its gradient is double row 2's
        assert!((g.get(1, 0) - 2.0 * g.get(2, 0)).abs() < 1e-12);
        assert_eq!(g.get(0, 0), 0.0);
    }
}
