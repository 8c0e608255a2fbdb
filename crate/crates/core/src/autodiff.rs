//! Reverse-mode automatic differentiation over a flat tape.
//!
//! A `Tape` records every operation applied to `Var` handles; `backward` walks
//! the tape once in reverse and accumulates gradients for every node. The op
//! set is exactly what the models here need — matrix products, row broadcasts,
//! rowwise softmax/layer-norm, gather/scatter for embeddings and convolution
//! patches — and nothing else. All values are dense f64 `Tensor`s.
//!
//! Shape violations inside the graph are programming errors and panic;
//! user-facing validation lives in the public wrappers one level up.

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use std::cell::RefCell;

/// Gradient bookkeeping for one recorded operation.
enum Op {
    Leaf,
    /// Elementwise a + b, equal shapes.
    Add(usize, usize),
    /// a (m x n) plus a row vector broadcast over the m rows.
    AddRow(usize, usize),
    Sub(usize, usize),
    /// Elementwise product, equal shapes.
    Mul(usize, usize),
    /// a (m x n) times a row vector broadcast over the m rows.
    MulRow(usize, usize),
    Scale(usize, f64),
    MatMul(usize, usize),
    Transpose(usize),
    Tanh(usize),
    Silu(usize),
    Softplus(usize),
    /// Rowwise softmax over the last axis.
    Softmax(usize),
    /// Rowwise layer norm (no affine) with the given epsilon.
    LayerNorm { a: usize, eps: f64 },
    /// Per-row cross entropy; value is (m x 1) of -log softmax(logits)[target].
    CeRows { logits: usize, targets: Vec<usize>, probs: Tensor },
    MeanAll(usize),
    SumAll(usize),
    ConcatRows(usize, usize),
    ConcatCols(usize, usize),
    SliceRows { a: usize, start: usize },
    SliceCols { a: usize, start: usize },
    /// Row gather: out[i] = table[indices[i]].
    EmbedRows { table: usize, indices: Vec<usize> },
    /// 3x3 "same" patch extraction over an (h x w x c) map, stride 1.
    Im2Col { a: usize, h: usize, w: usize, c: usize, k: usize },
    /// Row-major reshape: same element count, data order unchanged.
    Reshape(usize),
    /// Average adjacent row pairs: (2m x n) -> (m x n).
    PairAvgRows(usize),
}

struct Node {
    value: Tensor,
    op: Op,
}

#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

/// Handle to a node on a tape. Cheap to copy; only valid for its own tape.
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var#{}{:?}", self.id, self.shape())
    }
}

/// Gradients produced by one backward pass, indexed by node id.
pub struct Grads {
    g: Vec<Option<Tensor>>,
}

impl Grads {
    pub fn get(&self, v: Var<'_>) -> Option<&Tensor> {
        self.g.get(v.id).and_then(|o| o.as_ref())
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
        nodes.push(Node { value, op });
        Var { tape: self, id: nodes.len() - 1 }
    }

    /// A differentiable leaf (parameters, inputs under gradient check).
    pub fn leaf(&self, t: Tensor) -> Var<'_> {
        self.push(t, Op::Leaf)
    }

    /// A non-differentiable input; gradients flow into it but are never read.
    pub fn constant(&self, t: Tensor) -> Var<'_> {
        self.push(t, Op::Leaf)
    }

    fn value_of(&self, id: usize) -> Tensor {
        self.nodes.borrow()[id].value.clone()
    }

    /// Run reverse-mode accumulation from a scalar output.
    pub fn backward(&self, out: Var<'_>) -> Grads {
        assert!(std::ptr::eq(out.tape, self), "backward on foreign tape");
        let nodes = self.nodes.borrow();
        assert_eq!(nodes[out.id].value.len(), 1, "backward needs a scalar output");
        let mut g: Vec<Option<Tensor>> = (0..nodes.len()).map(|_| None).collect();
        g[out.id] = Some(Tensor::scalar(1.0));

        for id in (0..nodes.len()).rev() {
            let grad = match g[id].take() {
                Some(grad) => grad,
                None => continue,
            };
            let node = &nodes[id];
            match &node.op {
                Op::Leaf => {
                    g[id] = Some(grad);
                    continue;
                }
                Op::Add(a, b) => {
                    accumulate(&mut g, *a, grad.clone());
                    accumulate(&mut g, *b, grad);
                }
                Op::AddRow(a, row) => {
                    let n = nodes[*row].value.len();
                    let mut rg = Tensor::zeros(&[1, n]);
                    for r in 0..grad.rows() {
                        for c in 0..n {
                            rg.data_mut()[c] += grad.at(r, c);
                        }
                    }
                    accumulate(&mut g, *a, grad);
                    accumulate(&mut g, *row, rg);
                }
                Op::Sub(a, b) => {
                    accumulate(&mut g, *a, grad.clone());
                    accumulate(&mut g, *b, grad.scale(-1.0));
                }
                Op::Mul(a, b) => {
                    let av = &nodes[*a].value;
                    let bv = &nodes[*b].value;
                    accumulate(&mut g, *a, grad.hadamard(bv).unwrap());
                    accumulate(&mut g, *b, grad.hadamard(av).unwrap());
                }
                Op::MulRow(a, row) => {
                    let av = &nodes[*a].value;
                    let rv = &nodes[*row].value;
                    let n = rv.len();
                    let mut ag = grad.clone();
                    let mut rg = Tensor::zeros(&[1, n]);
                    for r in 0..grad.rows() {
                        for c in 0..n {
                            let gv = grad.at(r, c);
                            ag.set(r, c, gv * rv.data()[c]);
                            rg.data_mut()[c] += gv * av.at(r, c);
                        }
                    }
                    accumulate(&mut g, *a, ag);
                    accumulate(&mut g, *row, rg);
                }
                Op::Scale(a, s) => accumulate(&mut g, *a, grad.scale(*s)),
                Op::MatMul(a, b) => {
                    let av = &nodes[*a].value;
                    let bv = &nodes[*b].value;
                    accumulate(&mut g, *a, grad.matmul(&bv.transpose()).unwrap());
                    accumulate(&mut g, *b, av.transpose().matmul(&grad).unwrap());
                }
                Op::Transpose(a) => accumulate(&mut g, *a, grad.transpose()),
                Op::Reshape(a) => {
                    accumulate(&mut g, *a, grad.reshape(nodes[*a].value.shape()).unwrap())
                }
                Op::Tanh(a) => {
                    let y = &node.value;
                    let ag = grad.zip_map(y, |gv, yv| gv * (1.0 - yv * yv)).unwrap();
                    accumulate(&mut g, *a, ag);
                }
                Op::Silu(a) => {
                    let x = &nodes[*a].value;
                    let ag = grad
                        .zip_map(x, |gv, xv| {
                            let s = sigmoid(xv);
                            gv * s * (1.0 + xv * (1.0 - s))
                        })
                        .unwrap();
                    accumulate(&mut g, *a, ag);
                }
                Op::Softplus(a) => {
                    let x = &nodes[*a].value;
                    let ag = grad.zip_map(x, |gv, xv| gv * sigmoid(xv)).unwrap();
                    accumulate(&mut g, *a, ag);
                }
                Op::Softmax(a) => {
                    let s = &node.value;
                    let (m, n) = (s.rows(), s.cols());
                    let mut ag = Tensor::zeros(&[m, n]);
                    for r in 0..m {
                        let dot: f64 =
                            (0..n).map(|c| grad.at(r, c) * s.at(r, c)).sum();
                        for c in 0..n {
                            ag.set(r, c, s.at(r, c) * (grad.at(r, c) - dot));
                        }
                    }
                    accumulate(&mut g, *a, ag);
                }
                Op::LayerNorm { a, eps } => {
                    let x = &nodes[*a].value;
                    let y = &node.value;
                    let (m, n) = (x.rows(), x.cols());
                    let mut ag = Tensor::zeros(&[m, n]);
                    for r in 0..m {
                        let mean: f64 = x.row(r).iter().sum::<f64>() / n as f64;
                        let var: f64 = x.row(r).iter().map(|v| (v - mean) * (v - mean)).sum::<f64>()
                            / n as f64;
                        let inv = 1.0 / (var + eps).sqrt();
                        let gm: f64 = (0..n).map(|c| grad.at(r, c)).sum::<f64>() / n as f64;
                        let gym: f64 =
                            (0..n).map(|c| grad.at(r, c) * y.at(r, c)).sum::<f64>() / n as f64;
                        for c in 0..n {
                            ag.set(r, c, inv * (grad.at(r, c) - gm - y.at(r, c) * gym));
                        }
                    }
                    accumulate(&mut g, *a, ag);
                }
                Op::CeRows { logits, targets, probs } => {
                    let (m, v) = (probs.rows(), probs.cols());
                    let mut lg = Tensor::zeros(&[m, v]);
                    for r in 0..m {
                        let gr = grad.at(r, 0);
                        for c in 0..v {
                            let onehot = if c == targets[r] { 1.0 } else { 0.0 };
                            lg.set(r, c, gr * (probs.at(r, c) - onehot));
                        }
                    }
                    accumulate(&mut g, *logits, lg);
                }
                Op::MeanAll(a) => {
                    let n = nodes[*a].value.len();
                    let gv = grad.data()[0] / n as f64;
                    accumulate(&mut g, *a, Tensor::filled(nodes[*a].value.shape(), gv));
                }
                Op::SumAll(a) => {
                    let gv = grad.data()[0];
                    accumulate(&mut g, *a, Tensor::filled(nodes[*a].value.shape(), gv));
                }
                Op::ConcatRows(a, b) => {
                    let am = nodes[*a].value.rows();
                    let bm = nodes[*b].value.rows();
                    accumulate(&mut g, *a, grad.slice_rows(0, am).unwrap());
                    accumulate(&mut g, *b, grad.slice_rows(am, bm).unwrap());
                }
                Op::ConcatCols(a, b) => {
                    let an = nodes[*a].value.cols();
                    let bn = nodes[*b].value.cols();
                    let m = grad.rows();
                    let mut ag = Tensor::zeros(&[m, an]);
                    let mut bg = Tensor::zeros(&[m, bn]);
                    for r in 0..m {
                        for c in 0..an {
                            ag.set(r, c, grad.at(r, c));
                        }
                        for c in 0..bn {
                            bg.set(r, c, grad.at(r, an + c));
                        }
                    }
                    accumulate(&mut g, *a, ag);
                    accumulate(&mut g, *b, bg);
                }
                Op::SliceRows { a, start } => {
                    let (am, an) = (nodes[*a].value.rows(), nodes[*a].value.cols());
                    let mut ag = Tensor::zeros(&[am, an]);
                    for r in 0..grad.rows() {
                        for c in 0..an {
                            ag.set(start + r, c, grad.at(r, c));
                        }
                    }
                    accumulate(&mut g, *a, ag);
                }
                Op::SliceCols { a, start } => {
                    let (am, an) = (nodes[*a].value.rows(), nodes[*a].value.cols());
                    let mut ag = Tensor::zeros(&[am, an]);
                    for r in 0..am {
                        for c in 0..grad.cols() {
                            ag.set(r, start + c, grad.at(r, c));
                        }
                    }
                    accumulate(&mut g, *a, ag);
                }
                Op::EmbedRows { table, indices } => {
                    let (v, d) = (nodes[*table].value.rows(), nodes[*table].value.cols());
                    let mut tg = Tensor::zeros(&[v, d]);
                    for (r, &idx) in indices.iter().enumerate() {
                        for c in 0..d {
                            let cur = tg.at(idx, c);
                            tg.set(idx, c, cur + grad.at(r, c));
                        }
                    }
                    accumulate(&mut g, *table, tg);
                }
                Op::Im2Col { a, h, w, c, k } => {
                    let pad = k / 2;
                    let mut ag = Tensor::zeros(nodes[*a].value.shape());
                    for y in 0..*h {
                        for x in 0..*w {
                            let orow = y * w + x;
                            let mut col = 0;
                            for dy in 0..*k {
                                for dx in 0..*k {
                                    let sy = (y + dy) as isize - pad as isize;
                                    let sx = (x + dx) as isize - pad as isize;
                                    for ch in 0..*c {
                                        if sy >= 0
                                            && sy < *h as isize
                                            && sx >= 0
                                            && sx < *w as isize
                                        {
                                            let srow = sy as usize * w + sx as usize;
                                            let cur = ag.at(srow, ch);
                                            ag.set(srow, ch, cur + grad.at(orow, col));
                                        }
                                        col += 1;
                                    }
                                }
                            }
                        }
                    }
                    accumulate(&mut g, *a, ag);
                }
                Op::PairAvgRows(a) => {
                    let n = grad.cols();
                    let mut ag = Tensor::zeros(&[grad.rows() * 2, n]);
                    for r in 0..grad.rows() {
                        for c in 0..n {
                            let gv = grad.at(r, c) * 0.5;
                            ag.set(2 * r, c, gv);
                            ag.set(2 * r + 1, c, gv);
                        }
                    }
                    accumulate(&mut g, *a, ag);
                }
            }
        }
        Grads { g }
    }
}

fn accumulate(g: &mut [Option<Tensor>], id: usize, t: Tensor) {
    match &mut g[id] {
        Some(acc) => *acc = acc.add(&t).unwrap(),
        slot => *slot = Some(t),
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl<'t> Var<'t> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn value(&self) -> Tensor {
        self.tape.value_of(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.nodes.borrow()[self.id].value.shape().to_vec()
    }

    fn same_tape(&self, o: &Var<'t>) {
        assert!(std::ptr::eq(self.tape, o.tape), "vars from different tapes");
    }

    pub fn add(self, o: Var<'t>) -> Var<'t> {
        self.same_tape(&o);
        let v = self.value().add(&o.value()).expect("add shapes");
        self.tape.push(v, Op::Add(self.id, o.id))
    }

    /// Add a row vector to every row of `self`.
    pub fn add_row(self, row: Var<'t>) -> Var<'t> {
        self.same_tape(&row);
        let a = self.value();
        let r = row.value();
        assert_eq!(a.cols(), r.len(), "add_row width mismatch");
        let mut out = a.clone();
        let n = a.cols();
        for i in 0..a.rows() {
            for c in 0..n {
                out.data_mut()[i * n + c] += r.data()[c];
            }
        }
        self.tape.push(out, Op::AddRow(self.id, row.id))
    }

    pub fn sub(self, o: Var<'t>) -> Var<'t> {
        self.same_tape(&o);
        let v = self.value().sub(&o.value()).expect("sub shapes");
        self.tape.push(v, Op::Sub(self.id, o.id))
    }

    pub fn mul(self, o: Var<'t>) -> Var<'t> {
        self.same_tape(&o);
        let v = self.value().hadamard(&o.value()).expect("mul shapes");
        self.tape.push(v, Op::Mul(self.id, o.id))
    }

    /// Multiply every row of `self` elementwise by a row vector.
    pub fn mul_row(self, row: Var<'t>) -> Var<'t> {
        self.same_tape(&row);
        let a = self.value();
        let r = row.value();
        assert_eq!(a.cols(), r.len(), "mul_row width mismatch");
        let mut out = a.clone();
        let n = a.cols();
        for i in 0..a.rows() {
            for c in 0..n {
                out.data_mut()[i * n + c] *= r.data()[c];
            }
        }
        self.tape.push(out, Op::MulRow(self.id, row.id))
    }

    pub fn scale(self, s: f64) -> Var<'t> {
        let v = self.value().scale(s);
        self.tape.push(v, Op::Scale(self.id, s))
    }

    pub fn neg(self) -> Var<'t> {
        self.scale(-1.0)
    }

    pub fn matmul(self, o: Var<'t>) -> Var<'t> {
        self.same_tape(&o);
        let v = self.value().matmul(&o.value()).expect("matmul shapes");
        self.tape.push(v, Op::MatMul(self.id, o.id))
    }

    pub fn t(self) -> Var<'t> {
        let v = self.value().transpose();
        self.tape.push(v, Op::Transpose(self.id))
    }

    /// Row-major reshape; the element count must match.
    pub fn reshape(self, shape: &[usize]) -> Var<'t> {
        let v = self.value().reshape(shape).expect("reshape element count");
        self.tape.push(v, Op::Reshape(self.id))
    }

    pub fn tanh(self) -> Var<'t> {
        let v = self.value().map(f64::tanh);
        self.tape.push(v, Op::Tanh(self.id))
    }

    pub fn silu(self) -> Var<'t> {
        let v = self.value().map(|x| x * sigmoid(x));
        self.tape.push(v, Op::Silu(self.id))
    }

    pub fn softplus(self) -> Var<'t> {
        let v = self.value().map(|x| x.max(0.0) + (-x.abs()).exp().ln_1p());
        self.tape.push(v, Op::Softplus(self.id))
    }

    /// Rowwise softmax over the last axis. Rows must contain at least one
    /// finite entry (fully masked rows are a caller bug).
    pub fn softmax(self) -> Var<'t> {
        let x = self.value();
        let (m, n) = (x.rows(), x.cols());
        let mut out = Tensor::zeros(&[m, n]);
        for r in 0..m {
            let row = x.row(r);
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            assert!(max.is_finite(), "softmax row {r} fully masked");
            let mut sum = 0.0;
            for c in 0..n {
                let e = (row[c] - max).exp();
                out.set(r, c, e);
                sum += e;
            }
            for c in 0..n {
                let v = out.at(r, c) / sum;
                out.set(r, c, v);
            }
        }
        self.tape.push(out, Op::Softmax(self.id))
    }

    /// Rowwise layer norm without affine terms; constant rows map to zero.
    pub fn layer_norm(self, eps: f64) -> Var<'t> {
        let x = self.value();
        let (m, n) = (x.rows(), x.cols());
        let mut out = Tensor::zeros(&[m, n]);
        for r in 0..m {
            let row = x.row(r);
            let mean: f64 = row.iter().sum::<f64>() / n as f64;
            let var: f64 = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let inv = 1.0 / (var + eps).sqrt();
            for c in 0..n {
                out.set(r, c, (row[c] - mean) * inv);
            }
        }
        self.tape.push(out, Op::LayerNorm { a: self.id, eps })
    }

    /// Per-row negative log likelihood of the target class: (m x V) -> (m x 1).
    pub fn ce_rows(self, targets: &[usize]) -> Var<'t> {
        let x = self.value();
        let (m, v) = (x.rows(), x.cols());
        assert_eq!(m, targets.len(), "one target per logit row");
        let mut probs = Tensor::zeros(&[m, v]);
        let mut loss = Tensor::zeros(&[m, 1]);
        for r in 0..m {
            let t = targets[r];
            assert!(t < v, "target {t} out of range {v}");
            let row = x.row(r);
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for c in 0..v {
                let e = (row[c] - max).exp();
                probs.set(r, c, e);
                sum += e;
            }
            for c in 0..v {
                let p = probs.at(r, c) / sum;
                probs.set(r, c, p);
            }
            loss.set(r, 0, sum.ln() + max - row[t]);
        }
        self.tape
            .push(loss, Op::CeRows { logits: self.id, targets: targets.to_vec(), probs })
    }

    pub fn mean_all(self) -> Var<'t> {
        let v = Tensor::scalar(self.value().mean());
        self.tape.push(v, Op::MeanAll(self.id))
    }

    pub fn sum_all(self) -> Var<'t> {
        let v = Tensor::scalar(self.value().sum());
        self.tape.push(v, Op::SumAll(self.id))
    }

    /// Sum of squares over all elements, divided by the row count: the
    /// "per-frame squared norm" normalization used by the diffusion and flow
    /// losses.
    pub fn sq_norm_per_row(self) -> Var<'t> {
        let rows = self.value().rows() as f64;
        self.mul(self).sum_all().scale(1.0 / rows)
    }

    pub fn concat_rows(self, o: Var<'t>) -> Var<'t> {
        self.same_tape(&o);
        let v = Tensor::concat_rows(&[&self.value(), &o.value()]).expect("concat_rows");
        self.tape.push(v, Op::ConcatRows(self.id, o.id))
    }

    pub fn concat_cols(self, o: Var<'t>) -> Var<'t> {
        self.same_tape(&o);
        let a = self.value();
        let b = o.value();
        assert_eq!(a.rows(), b.rows(), "concat_cols row mismatch");
        let (m, an, bn) = (a.rows(), a.cols(), b.cols());
        let mut out = Tensor::zeros(&[m, an + bn]);
        for r in 0..m {
            for c in 0..an {
                out.set(r, c, a.at(r, c));
            }
            for c in 0..bn {
                out.set(r, an + c, b.at(r, c));
            }
        }
        self.tape.push(out, Op::ConcatCols(self.id, o.id))
    }

    pub fn slice_rows(self, start: usize, len: usize) -> Var<'t> {
        let v = self.value().slice_rows(start, len).expect("slice_rows");
        self.tape.push(v, Op::SliceRows { a: self.id, start })
    }

    pub fn slice_cols(self, start: usize, len: usize) -> Var<'t> {
        let a = self.value();
        let (m, n) = (a.rows(), a.cols());
        assert!(start + len <= n, "col slice out of range");
        let mut out = Tensor::zeros(&[m, len]);
        for r in 0..m {
            for c in 0..len {
                out.set(r, c, a.at(r, start + c));
            }
        }
        self.tape.push(out, Op::SliceCols { a: self.id, start })
    }

    /// Gather rows of an embedding table: table is (V x d), output (len x d).
    pub fn embed_rows(self, indices: &[usize]) -> Var<'t> {
        let table = self.value();
        let (v, d) = (table.rows(), table.cols());
        let mut out = Tensor::zeros(&[indices.len(), d]);
        for (r, &idx) in indices.iter().enumerate() {
            assert!(idx < v, "embedding index {idx} out of range {v}");
            for c in 0..d {
                out.set(r, c, table.at(idx, c));
            }
        }
        self.tape
            .push(out, Op::EmbedRows { table: self.id, indices: indices.to_vec() })
    }

    /// Extract k x k "same" patches from an (h x w x c) feature map, giving
    /// (h*w) x (k*k*c); a conv layer is this followed by a matmul.
    pub fn im2col(self, h: usize, w: usize, c: usize, k: usize) -> Var<'t> {
        let a = self.value();
        assert_eq!(a.len(), h * w * c, "im2col shape mismatch");
        assert!(k % 2 == 1, "im2col wants an odd kernel");
        let pad = k / 2;
        let mut out = Tensor::zeros(&[h * w, k * k * c]);
        for y in 0..h {
            for x in 0..w {
                let orow = y * w + x;
                let mut col = 0;
                for dy in 0..k {
                    for dx in 0..k {
                        let sy = (y + dy) as isize - pad as isize;
                        let sx = (x + dx) as isize - pad as isize;
                        for ch in 0..c {
                            if sy >= 0 && sy < h as isize && sx >= 0 && sx < w as isize {
                                let srow = sy as usize * w + sx as usize;
                                out.set(orow, col, a.data()[srow * c + ch]);
                            }
                            col += 1;
                        }
                    }
                }
            }
        }
        self.tape.push(out, Op::Im2Col { a: self.id, h, w, c, k })
    }

    /// Downsample token-rate rows to frame rate by averaging adjacent pairs.
    pub fn pair_avg_rows(self) -> Var<'t> {
        let a = self.value();
        assert!(a.rows() % 2 == 0, "pair_avg_rows needs an even row count");
        let (m, n) = (a.rows() / 2, a.cols());
        let mut out = Tensor::zeros(&[m, n]);
        for r in 0..m {
            for c in 0..n {
                out.set(r, c, 0.5 * (a.at(2 * r, c) + a.at(2 * r + 1, c)));
            }
        }
        self.tape.push(out, Op::PairAvgRows(self.id))
    }
}

/// Report from a finite-difference gradient check.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    /// (input index, element index) of the worst component.
    pub worst: (usize, usize),
}

/// Default central-difference step for gradient checks.
pub const GRAD_CHECK_EPS: f64 = 1e-5;

/// Gate used by the gradient suite: max relative error must stay below this.
pub const GRAD_CHECK_TOL: f64 = 1e-4;

/// Compare reverse-mode gradients against central finite differences.
///
/// `f` must be a pure function of its inputs: it is re-run 2N times with
/// perturbed copies. Relative error is |a - b| / max(1, |a|, |b|) so tiny
/// gradients are compared on an absolute scale.
pub fn grad_check<F>(f: F, inputs: &[Tensor], eps: f64) -> Result<GradCheckReport>
where
    F: for<'a> Fn(&'a Tape, &[Var<'a>]) -> Var<'a>,
{
    let eval = |tensors: &[Tensor]| -> f64 {
        let tape = Tape::new();
        let vars: Vec<Var> = tensors.iter().map(|t| tape.leaf(t.clone())).collect();
        f(&tape, &vars).value().data()[0]
    };

    let tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let out = f(&tape, &vars);
    let out_value = out.value();
    if out_value.len() != 1 {
        return Err(Error::input("grad_check target must be scalar"));
    }
    if !out_value.is_finite() {
        return Err(Error::non_finite("grad_check forward pass"));
    }
    let grads = tape.backward(out);
    let analytic: Vec<Tensor> = vars
        .iter()
        .zip(inputs)
        .map(|(v, t)| grads.get(*v).cloned().unwrap_or_else(|| Tensor::zeros(t.shape())))
        .collect();

    let mut work: Vec<Tensor> = inputs.to_vec();
    let mut max_rel = 0.0_f64;
    let mut worst = (0, 0);
    for i in 0..inputs.len() {
        for j in 0..inputs[i].len() {
            let orig = work[i].data()[j];
            work[i].data_mut()[j] = orig + eps;
            let fp = eval(&work);
            work[i].data_mut()[j] = orig - eps;
            let fm = eval(&work);
            work[i].data_mut()[j] = orig;
            let fd = (fp - fm) / (2.0 * eps);
            let a = analytic[i].data()[j];
            let rel = (a - fd).abs() / a.abs().max(fd.abs()).max(1.0);
            if rel > max_rel {
                max_rel = rel;
                worst = (i, j);
            }
        }
    }
    Ok(GradCheckReport { max_rel_err: max_rel, worst })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_from_seed;

    fn check<F>(f: F, inputs: &[Tensor])
    where
        F: for<'a> Fn(&'a Tape, &[Var<'a>]) -> Var<'a>,
    {
        let rep = grad_check(f, inputs, GRAD_CHECK_EPS).unwrap();
        assert!(
            rep.max_rel_err < GRAD_CHECK_TOL,
            "max rel err {} at input {} elem {}",
            rep.max_rel_err,
            rep.worst.0,
            rep.worst.1
        );
    }

    fn rand(shape: &[usize], seed: u64) -> Tensor {
        Tensor::rand_normal(shape, &mut rng_from_seed(seed))
    }

    #[test]
    fn grads_elementwise_chain() {
        check(
            |_, v| v[0].mul(v[1]).add(v[2]).tanh().silu().mean_all(),
            &[rand(&[3, 4], 1), rand(&[3, 4], 2), rand(&[3, 4], 3)],
        );
    }

    #[test]
    fn grads_matmul_transpose() {
        check(
            |_, v| v[0].matmul(v[1]).t().matmul(v[0]).sum_all(),
            &[rand(&[3, 4], 4), rand(&[4, 5], 5)],
        );
    }

    #[test]
    fn grads_row_broadcasts() {
        check(
            |_, v| v[0].mul_row(v[1]).add_row(v[2]).sq_norm_per_row(),
            &[rand(&[5, 3], 6), rand(&[1, 3], 7), rand(&[1, 3], 8)],
        );
    }

    #[test]
    fn grads_softmax_weighted() {
        check(
            |_, v| v[0].softmax().mul(v[1]).sum_all(),
            &[rand(&[4, 6], 9), rand(&[4, 6], 10)],
        );
    }

    #[test]
    fn grads_layer_norm() {
        check(
            |_, v| v[0].layer_norm(1e-5).mul(v[1]).sum_all(),
            &[rand(&[4, 8], 11), rand(&[4, 8], 12)],
        );
    }

    #[test]
    fn grads_cross_entropy_rows() {
        check(
            |_, v| v[0].ce_rows(&[2, 0, 4]).mean_all(),
            &[rand(&[3, 5], 13)],
        );
    }

    #[test]
    fn grads_softplus() {
        check(|_, v| v[0].softplus().sum_all(), &[rand(&[2, 7], 14)]);
    }

    #[test]
    fn grads_concat_slice() {
        check(
            |_, v| {
                let cat = v[0].concat_rows(v[1]).concat_cols(v[2]);
                cat.slice_rows(1, 3).slice_cols(2, 4).sq_norm_per_row()
            },
            &[rand(&[2, 3], 15), rand(&[3, 3], 16), rand(&[5, 4], 17)],
        );
    }

    #[test]
    fn grads_embedding_gather() {
        check(
            |_, v| v[0].embed_rows(&[1, 1, 0, 3]).mul(v[1]).sum_all(),
            &[rand(&[4, 5], 18), rand(&[4, 5], 19)],
        );
    }

    #[test]
    fn grads_im2col_conv() {
        // A full 3x3 conv: patches . kernel + bias.
        check(
            |_, v| {
                v[0].im2col(4, 4, 2, 3)
                    .matmul(v[1])
                    .add_row(v[2])
                    .silu()
                    .sq_norm_per_row()
            },
            &[rand(&[4, 4, 2], 20), rand(&[18, 3], 21), rand(&[1, 3], 22)],
        );
    }

    #[test]
    fn grads_pair_avg() {
        check(
            |_, v| v[0].pair_avg_rows().mul(v[1]).sum_all(),
            &[rand(&[6, 3], 23), rand(&[3, 3], 24)],
        );
    }

    #[test]
    fn grads_reshape_flatten() {
        // flatten a feature map into one row and push it through a linear
        check(
            |_, v| v[0].reshape(&[1, 12]).matmul(v[1]).silu().sum_all(),
            &[rand(&[4, 3], 26), rand(&[12, 2], 27)],
        );
    }

    #[test]
    fn reshape_round_trip_is_bitwise() {
        let tape = Tape::new();
        let x = tape.leaf(rand(&[3, 4], 28));
        let y = x.reshape(&[2, 6]).reshape(&[3, 4]);
        assert_eq!(x.value(), y.value());
    }

    #[test]
    fn shared_subexpression_accumulates() {
        // y = <x, x>; dy/dx = 2x exactly.
        let tape = Tape::new();
        let x = tape.leaf(rand(&[2, 3], 25));
        let y = x.mul(x).sum_all();
        let grads = tape.backward(y);
        let g = grads.get(x).unwrap();
        let expect = x.value().scale(2.0);
        for (a, b) in g.data().iter().zip(expect.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let tape = Tape::new();
        let x = tape.leaf(rand(&[5, 9], 26));
        let s = x.softmax().value();
        for r in 0..5 {
            let sum: f64 = s.row(r).iter().sum();
            assert!((sum - 1.0).abs() < 1e-12, "row {r} sums to {sum}");
        }
    }

    #[test]
    fn softmax_respects_neg_infinity_mask() {
        let tape = Tape::new();
        let x = tape.leaf(
            Tensor::new(vec![1, 3], vec![0.3, f64::NEG_INFINITY, 0.7]).unwrap(),
        );
        let s = x.softmax().value();
        assert_eq!(s.at(0, 1), 0.0, "masked slot must carry exactly zero weight");
        assert!((s.at(0, 0) + s.at(0, 2) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_uniform_logits_is_ln_v() {
        let tape = Tape::new();
        let x = tape.leaf(Tensor::zeros(&[1, 4]));
        let loss = x.ce_rows(&[1]).mean_all().value().data()[0];
        assert!((loss - 4.0_f64.ln()).abs() < 1e-12, "got {loss}");
    }

    #[test]
    fn layer_norm_constant_row_maps_to_zero() {
        let tape = Tape::new();
        let x = tape.leaf(Tensor::filled(&[2, 6], 3.25));
        let y = x.layer_norm(1e-5).value();
        for v in y.data() {
            assert_eq!(*v, 0.0);
        }
    }

    #[test]
    fn backward_wants_scalar_output() {
        let tape = Tape::new();
        let x = tape.leaf(rand(&[2, 2], 27));
        let y = x.tanh();
        let result = std::panic::catch_unwind(std::panic::AssertUnwindSafe(|| {
            tape.backward(y);
        }));
        assert!(result.is_err());
    }
}
