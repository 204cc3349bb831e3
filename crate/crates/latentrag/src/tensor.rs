//! Reverse-mode automatic differentiation over `f64` matrices.
//!
//! A [`Tape`] is a Wengert list: every operation appends one node holding its
//! output, so creation order is already a topological order and `backward`
//! is a single reverse sweep.  Tensors are cheap handles into the tape.  The
//! op set is exactly what the transformer, the retriever, and the losses
//! need — matrix products, row-wise softmax / layer norm, SiLU, gather /
//! concat plumbing, cross-entropy, KL, and cosine similarity.  There is no
//! general broadcasting; the only broadcast form is "matrix plus bias row".
//!
//! Tapes are deliberately not `Send`: a graph lives and dies on one thread.
//! Operations whose inputs all have gradient tracking disabled are folded to
//! constants so frozen components never bloat the tape.

use std::cell::RefCell;
use std::rc::Rc;

use crate::error::{Error, Result};
use crate::kernels;

// ── tape plumbing ──────────────────────────────────────────────────────────

#[derive(Debug)]
enum Op {
    Leaf,
    Add { a: usize, b: usize },
    /// `[m,n] + [1,n]`, the bias row broadcast over rows.
    AddRow { a: usize, bias: usize },
    Sub { a: usize, b: usize },
    Mul { a: usize, b: usize },
    Scale { a: usize, c: f64 },
    MatMul { a: usize, b: usize, m: usize, k: usize, n: usize },
    /// `a * b^T` with `b` stored row-major as `[n,k]`.
    MatMulNT { a: usize, b: usize, m: usize, k: usize, n: usize },
    Softmax { a: usize, temperature: f64 },
    LayerNorm { a: usize, gain: usize, bias: usize, xhat: Vec<f64>, inv_std: Vec<f64> },
    Silu { a: usize },
    Gather { table: usize, ids: Vec<usize> },
    SelectRows { a: usize, indices: Vec<usize> },
    ConcatRows { parts: Vec<usize> },
    ConcatCols { parts: Vec<usize> },
    MeanRows { a: usize },
    MeanAll { a: usize },
    SumAll { a: usize },
    CrossEntropy { logits: usize, targets: Vec<usize>, probs: Vec<f64> },
    /// KL(p || q) with `p` detached; gradients flow only into `q`.
    KlDivergence { q: usize, p: Vec<f64> },
    CosineSim { a: usize, b: usize },
    L2NormalizeRows { a: usize, norms: Vec<f64> },
    Dropout { a: usize, mask: Vec<f64> },
}

#[derive(Debug)]
struct Node {
    shape: (usize, usize),
    data: Vec<f64>,
    grad: Option<Vec<f64>>,
    requires_grad: bool,
    op: Op,
}

#[derive(Debug, Default)]
struct TapeInner {
    nodes: RefCell<Vec<Node>>,
}

/// A single-threaded compute graph; see the module docs.
#[derive(Debug, Clone, Default)]
pub struct Tape {
    inner: Rc<TapeInner>,
}

/// A handle to one node of a [`Tape`].
#[derive(Debug, Clone)]
pub struct Tensor {
    tape: Rc<TapeInner>,
    id: usize,
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    /// Number of nodes currently recorded.
    pub fn len(&self) -> usize {
        self.inner.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Create a leaf tensor with explicit shape and row-major data.
    pub fn leaf(&self, rows: usize, cols: usize, data: Vec<f64>, requires_grad: bool) -> Result<Tensor> {
        if data.len() != rows * cols {
            return Err(Error::Shape(format!(
                "leaf {}x{} needs {} values, got {}",
                rows,
                cols,
                rows * cols,
                data.len()
            )));
        }
        Ok(self.push(rows, cols, data, requires_grad, Op::Leaf))
    }

    /// A `[1,1]` constant.
    pub fn scalar(&self, v: f64) -> Tensor {
        self.push(1, 1, vec![v], false, Op::Leaf)
    }

    /// Concatenate tensors along rows (column counts must agree).
    pub fn concat_rows(&self, parts: &[Tensor]) -> Result<Tensor> {
        if parts.is_empty() {
            return Err(Error::Parameter("concat_rows of zero tensors".into()));
        }
        let cols = parts[0].cols();
        let mut rows = 0;
        let mut data = Vec::new();
        let mut rg = false;
        for p in parts {
            self.check_same_tape(p)?;
            if p.cols() != cols {
                return Err(Error::Shape(format!(
                    "concat_rows column mismatch: {} vs {}",
                    p.cols(),
                    cols
                )));
            }
            rows += p.rows();
            data.extend_from_slice(&p.data_ref());
            rg |= p.requires_grad();
        }
        let op = Op::ConcatRows { parts: parts.iter().map(|p| p.id).collect() };
        Ok(self.push_op(rows, cols, data, rg, op))
    }

    /// Concatenate tensors along columns (row counts must agree).
    pub fn concat_cols(&self, parts: &[Tensor]) -> Result<Tensor> {
        if parts.is_empty() {
            return Err(Error::Parameter("concat_cols of zero tensors".into()));
        }
        let rows = parts[0].rows();
        let mut cols = 0;
        let mut rg = false;
        for p in parts {
            self.check_same_tape(p)?;
            if p.rows() != rows {
                return Err(Error::Shape(format!(
                    "concat_cols row mismatch: {} vs {}",
                    p.rows(),
                    rows
                )));
            }
            cols += p.cols();
            rg |= p.requires_grad();
        }
        let mut data = vec![0.0; rows * cols];
        let mut offset = 0;
        for p in parts {
            let pd = p.data_ref();
            let pc = p.cols();
            for r in 0..rows {
                data[r * cols + offset..r * cols + offset + pc]
                    .copy_from_slice(&pd[r * pc..(r + 1) * pc]);
            }
            offset += pc;
        }
        let op = Op::ConcatCols { parts: parts.iter().map(|p| p.id).collect() };
        Ok(self.push_op(rows, cols, data, rg, op))
    }

    fn push(&self, rows: usize, cols: usize, data: Vec<f64>, requires_grad: bool, op: Op) -> Tensor {
        let mut nodes = self.inner.nodes.borrow_mut();
        let id = nodes.len();
        nodes.push(Node { shape: (rows, cols), data, grad: None, requires_grad, op });
        Tensor { tape: Rc::clone(&self.inner), id }
    }

    /// Push an op result; ops whose inputs are all frozen fold to leaves.
    fn push_op(&self, rows: usize, cols: usize, data: Vec<f64>, requires_grad: bool, op: Op) -> Tensor {
        let op = if requires_grad { op } else { Op::Leaf };
        self.push(rows, cols, data, requires_grad, op)
    }

    fn check_same_tape(&self, t: &Tensor) -> Result<()> {
        if !Rc::ptr_eq(&self.inner, &t.tape) {
            return Err(Error::Parameter("tensors belong to different graphs".into()));
        }
        Ok(())
    }
}

// ── tensor accessors ───────────────────────────────────────────────────────

impl Tensor {
    fn tape(&self) -> Tape {
        Tape { inner: Rc::clone(&self.tape) }
    }

    pub fn rows(&self) -> usize {
        self.tape.nodes.borrow()[self.id].shape.0
    }

    pub fn cols(&self) -> usize {
        self.tape.nodes.borrow()[self.id].shape.1
    }

    pub fn shape(&self) -> (usize, usize) {
        self.tape.nodes.borrow()[self.id].shape
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.nodes.borrow()[self.id].requires_grad
    }

    /// Clone of this tensor's values.
    pub fn data(&self) -> Vec<f64> {
        self.tape.nodes.borrow()[self.id].data.clone()
    }

    fn data_ref(&self) -> std::cell::Ref<'_, [f64]> {
        std::cell::Ref::map(self.tape.nodes.borrow(), |nodes| nodes[self.id].data.as_slice())
    }

    /// The value of a `[1,1]` tensor.
    pub fn item(&self) -> Result<f64> {
        if self.shape() != (1, 1) {
            return Err(Error::Shape(format!("item() on a {:?} tensor", self.shape())));
        }
        Ok(self.tape.nodes.borrow()[self.id].data[0])
    }

    /// Accumulated gradient, if `backward` has run and this tensor tracks one.
    pub fn grad(&self) -> Option<Vec<f64>> {
        self.tape.nodes.borrow()[self.id].grad.clone()
    }

    /// A gradient-free copy of this tensor's values on the same tape.
    pub fn detach(&self) -> Tensor {
        let (r, c) = self.shape();
        self.tape().push(r, c, self.data(), false, Op::Leaf)
    }
}

// ── forward ops ────────────────────────────────────────────────────────────

impl Tensor {
    fn binary_same_shape(&self, other: &Tensor, name: &str) -> Result<(usize, usize)> {
        self.tape().check_same_tape(other)?;
        if self.shape() != other.shape() {
            return Err(Error::Shape(format!(
                "{name} of {:?} and {:?}",
                self.shape(),
                other.shape()
            )));
        }
        Ok(self.shape())
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        let (r, c) = self.binary_same_shape(other, "add")?;
        let a = self.data_ref();
        let b = other.data_ref();
        let data = a.iter().zip(b.iter()).map(|(x, y)| x + y).collect();
        drop(a);
        drop(b);
        let rg = self.requires_grad() || other.requires_grad();
        Ok(self.tape().push_op(r, c, data, rg, Op::Add { a: self.id, b: other.id }))
    }

    /// Broadcast-add a `[1,n]` bias row to every row of `[m,n]`.
    pub fn add_row(&self, bias: &Tensor) -> Result<Tensor> {
        self.tape().check_same_tape(bias)?;
        let (r, c) = self.shape();
        if bias.shape() != (1, c) {
            return Err(Error::Shape(format!(
                "add_row: bias {:?} against matrix {:?}",
                bias.shape(),
                self.shape()
            )));
        }
        let a = self.data_ref();
        let b = bias.data_ref();
        let mut data = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                data[i * c + j] = a[i * c + j] + b[j];
            }
        }
        drop(a);
        drop(b);
        let rg = self.requires_grad() || bias.requires_grad();
        Ok(self.tape().push_op(r, c, data, rg, Op::AddRow { a: self.id, bias: bias.id }))
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        let (r, c) = self.binary_same_shape(other, "sub")?;
        let a = self.data_ref();
        let b = other.data_ref();
        let data = a.iter().zip(b.iter()).map(|(x, y)| x - y).collect();
        drop(a);
        drop(b);
        let rg = self.requires_grad() || other.requires_grad();
        Ok(self.tape().push_op(r, c, data, rg, Op::Sub { a: self.id, b: other.id }))
    }

    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        let (r, c) = self.binary_same_shape(other, "mul")?;
        let a = self.data_ref();
        let b = other.data_ref();
        let data = a.iter().zip(b.iter()).map(|(x, y)| x * y).collect();
        drop(a);
        drop(b);
        let rg = self.requires_grad() || other.requires_grad();
        Ok(self.tape().push_op(r, c, data, rg, Op::Mul { a: self.id, b: other.id }))
    }

    pub fn scale(&self, c: f64) -> Result<Tensor> {
        let (rows, cols) = self.shape();
        let data = self.data_ref().iter().map(|x| x * c).collect();
        let rg = self.requires_grad();
        Ok(self.tape().push_op(rows, cols, data, rg, Op::Scale { a: self.id, c }))
    }

    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        self.tape().check_same_tape(other)?;
        let (m, k) = self.shape();
        let (k2, n) = other.shape();
        if k != k2 {
            return Err(Error::Shape(format!(
                "matmul {:?} * {:?}: inner dimensions differ",
                self.shape(),
                other.shape()
            )));
        }
        let data = kernels::matmul(&self.data_ref(), &other.data_ref(), m, k, n);
        let rg = self.requires_grad() || other.requires_grad();
        Ok(self
            .tape()
            .push_op(m, n, data, rg, Op::MatMul { a: self.id, b: other.id, m, k, n }))
    }

    /// `self * other^T`, with `other` stored row-major as `[n,k]`.
    pub fn matmul_nt(&self, other: &Tensor) -> Result<Tensor> {
        self.tape().check_same_tape(other)?;
        let (m, k) = self.shape();
        let (n, k2) = other.shape();
        if k != k2 {
            return Err(Error::Shape(format!(
                "matmul_nt {:?} * {:?}^T: inner dimensions differ",
                self.shape(),
                other.shape()
            )));
        }
        let data = kernels::matmul_nt(&self.data_ref(), &other.data_ref(), m, k, n);
        let rg = self.requires_grad() || other.requires_grad();
        Ok(self
            .tape()
            .push_op(m, n, data, rg, Op::MatMulNT { a: self.id, b: other.id, m, k, n }))
    }

    /// Row-wise temperature softmax.
    pub fn softmax(&self, temperature: f64) -> Result<Tensor> {
        if temperature <= 0.0 {
            return Err(Error::Parameter(format!(
                "softmax temperature must be positive, got {temperature}"
            )));
        }
        let (r, c) = self.shape();
        let mut data = self.data();
        for row in data.chunks_mut(c) {
            kernels::softmax_row(row, temperature);
        }
        let rg = self.requires_grad();
        Ok(self.tape().push_op(r, c, data, rg, Op::Softmax { a: self.id, temperature }))
    }

    /// Row-wise layer norm with `[1,n]` gain and bias.
    pub fn layer_norm(&self, gain: &Tensor, bias: &Tensor) -> Result<Tensor> {
        self.tape().check_same_tape(gain)?;
        self.tape().check_same_tape(bias)?;
        let (r, c) = self.shape();
        if gain.shape() != (1, c) || bias.shape() != (1, c) {
            return Err(Error::Shape(format!(
                "layer_norm over {cols} columns needs [1,{cols}] gain/bias",
                cols = c
            )));
        }
        let x = self.data();
        let g = gain.data();
        let b = bias.data();
        let mut data = vec![0.0; r * c];
        let mut xhat = vec![0.0; r * c];
        let mut inv_std = vec![0.0; r];
        for i in 0..r {
            let row = &x[i * c..(i + 1) * c];
            kernels::layer_norm_row(row, &g, &b, &mut data[i * c..(i + 1) * c]);
            let n = c as f64;
            let mean = row.iter().sum::<f64>() / n;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
            let is = 1.0 / (var + kernels::LAYER_NORM_EPS).sqrt();
            inv_std[i] = is;
            for j in 0..c {
                xhat[i * c + j] = (row[j] - mean) * is;
            }
        }
        let rg = self.requires_grad() || gain.requires_grad() || bias.requires_grad();
        Ok(self.tape().push_op(
            r,
            c,
            data,
            rg,
            Op::LayerNorm { a: self.id, gain: gain.id, bias: bias.id, xhat, inv_std },
        ))
    }

    pub fn silu(&self) -> Result<Tensor> {
        let (r, c) = self.shape();
        let data = self.data_ref().iter().map(|&x| kernels::silu(x)).collect();
        let rg = self.requires_grad();
        Ok(self.tape().push_op(r, c, data, rg, Op::Silu { a: self.id }))
    }

    /// Gather rows of an embedding table by id.
    pub fn gather(&self, ids: &[usize]) -> Result<Tensor> {
        let (r, c) = self.shape();
        let table = self.data_ref();
        let mut data = Vec::with_capacity(ids.len() * c);
        for &id in ids {
            if id >= r {
                return Err(Error::Index(format!("gather id {id} out of {r} rows")));
            }
            data.extend_from_slice(&table[id * c..(id + 1) * c]);
        }
        drop(table);
        let rg = self.requires_grad();
        Ok(self
            .tape()
            .push_op(ids.len(), c, data, rg, Op::Gather { table: self.id, ids: ids.to_vec() }))
    }

    /// Select a subset of rows by index.
    pub fn select_rows(&self, indices: &[usize]) -> Result<Tensor> {
        let (r, c) = self.shape();
        let src = self.data_ref();
        let mut data = Vec::with_capacity(indices.len() * c);
        for &idx in indices {
            if idx >= r {
                return Err(Error::Index(format!("row {idx} out of {r} rows")));
            }
            data.extend_from_slice(&src[idx * c..(idx + 1) * c]);
        }
        drop(src);
        let rg = self.requires_grad();
        Ok(self.tape().push_op(
            indices.len(),
            c,
            data,
            rg,
            Op::SelectRows { a: self.id, indices: indices.to_vec() },
        ))
    }

    /// Mean over rows: `[m,n] -> [1,n]`.
    pub fn mean_rows(&self) -> Result<Tensor> {
        let (r, c) = self.shape();
        if r == 0 {
            return Err(Error::Shape("mean_rows of an empty matrix".into()));
        }
        let src = self.data_ref();
        let mut data = vec![0.0; c];
        for i in 0..r {
            for j in 0..c {
                data[j] += src[i * c + j];
            }
        }
        drop(src);
        for v in data.iter_mut() {
            *v /= r as f64;
        }
        let rg = self.requires_grad();
        Ok(self.tape().push_op(1, c, data, rg, Op::MeanRows { a: self.id }))
    }

    /// Mean of all entries, as a scalar tensor.
    pub fn mean_all(&self) -> Result<Tensor> {
        let (r, c) = self.shape();
        if r * c == 0 {
            return Err(Error::Shape("mean_all of an empty tensor".into()));
        }
        let sum: f64 = self.data_ref().iter().sum();
        let data = vec![sum / (r * c) as f64];
        let rg = self.requires_grad();
        Ok(self.tape().push_op(1, 1, data, rg, Op::MeanAll { a: self.id }))
    }

    /// Sum of all entries, as a scalar tensor.
    pub fn sum_all(&self) -> Result<Tensor> {
        let sum: f64 = self.data_ref().iter().sum();
        let rg = self.requires_grad();
        Ok(self.tape().push_op(1, 1, vec![sum], rg, Op::SumAll { a: self.id }))
    }

    /// Mean negative log-likelihood of `targets` under row-wise softmax of
    /// `self` (`[p,v]` logits, one target id per row).
    pub fn cross_entropy(&self, targets: &[usize]) -> Result<Tensor> {
        let (p, v) = self.shape();
        if targets.len() != p {
            return Err(Error::Shape(format!(
                "cross_entropy: {p} logit rows but {} targets",
                targets.len()
            )));
        }
        if p == 0 {
            return Err(Error::Shape("cross_entropy with no rows".into()));
        }
        let logits = self.data();
        let mut probs = vec![0.0; p * v];
        let mut total = 0.0;
        for (i, &t) in targets.iter().enumerate() {
            if t >= v {
                return Err(Error::Index(format!("target id {t} out of vocab {v}")));
            }
            let row = &logits[i * v..(i + 1) * v];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut denom = 0.0;
            for j in 0..v {
                let e = (row[j] - max).exp();
                probs[i * v + j] = e;
                denom += e;
            }
            for j in 0..v {
                probs[i * v + j] /= denom;
            }
            total += denom.ln() + max - row[t];
        }
        let data = vec![total / p as f64];
        let rg = self.requires_grad();
        Ok(self.tape().push_op(
            1,
            1,
            data,
            rg,
            Op::CrossEntropy { logits: self.id, targets: targets.to_vec(), probs },
        ))
    }

    /// L2-normalize each row; errors if any row is all zeros.
    pub fn l2_normalize_rows(&self) -> Result<Tensor> {
        let (r, c) = self.shape();
        let src = self.data();
        let mut data = vec![0.0; r * c];
        let mut norms = vec![0.0; r];
        for i in 0..r {
            let row = &src[i * c..(i + 1) * c];
            let n = kernels::l2_norm(row);
            if n == 0.0 {
                return Err(Error::Numeric(format!("cannot L2-normalize zero row {i}")));
            }
            norms[i] = n;
            for j in 0..c {
                data[i * c + j] = row[j] / n;
            }
        }
        let rg = self.requires_grad();
        Ok(self.tape().push_op(r, c, data, rg, Op::L2NormalizeRows { a: self.id, norms }))
    }

    /// Inverted dropout with a caller-supplied mask of `0.0` / `1/keep`
    /// entries; the caller owns the randomness so runs stay reproducible.
    pub fn dropout_with_mask(&self, mask: Vec<f64>) -> Result<Tensor> {
        let (r, c) = self.shape();
        if mask.len() != r * c {
            return Err(Error::Shape(format!(
                "dropout mask of {} entries on a {}x{} tensor",
                mask.len(),
                r,
                c
            )));
        }
        let src = self.data_ref();
        let data = src.iter().zip(mask.iter()).map(|(x, m)| x * m).collect();
        drop(src);
        let rg = self.requires_grad();
        Ok(self.tape().push_op(r, c, data, rg, Op::Dropout { a: self.id, mask }))
    }
}

// ── distance / divergence ops ──────────────────────────────────────────────

fn check_distribution(name: &str, x: &[f64]) -> Result<()> {
    let sum: f64 = x.iter().sum();
    if (sum - 1.0).abs() > 1e-6 {
        return Err(Error::Parameter(format!("{name} sums to {sum}, not 1")));
    }
    if x.iter().any(|&v| v < 0.0) {
        return Err(Error::Parameter(format!("{name} has negative entries")));
    }
    Ok(())
}

/// `KL(p || q) = sum p ln(p/q)` for row distributions, with `p` detached:
/// gradients flow only into `q`.  Errors if `q` has zero mass anywhere `p`
/// has support.
pub fn kl_divergence(p: &Tensor, q: &Tensor) -> Result<Tensor> {
    if p.shape() != q.shape() {
        return Err(Error::Shape(format!(
            "kl_divergence of {:?} against {:?}",
            p.shape(),
            q.shape()
        )));
    }
    let pd = p.data();
    let qd = q.data();
    check_distribution("p", &pd)?;
    check_distribution("q", &qd)?;
    let mut total = 0.0;
    for (i, (&pi, &qi)) in pd.iter().zip(qd.iter()).enumerate() {
        if pi > 0.0 {
            if qi <= 0.0 {
                return Err(Error::Numeric(format!(
                    "KL divergence undefined: q[{i}] = {qi} where p[{i}] = {pi}"
                )));
            }
            total += pi * (pi / qi).ln();
        }
    }
    let rg = q.requires_grad();
    let tape = Tape { inner: Rc::clone(&q.tape) };
    Ok(tape.push_op(1, 1, vec![total], rg, Op::KlDivergence { q: q.id, p: pd }))
}

/// Cosine similarity of two equal-length vectors (any `[r,c]` with the same
/// element count), differentiable in both arguments.
pub fn cosine_similarity(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let tape = Tape { inner: Rc::clone(&a.tape) };
    tape.check_same_tape(b)?;
    let ad = a.data();
    let bd = b.data();
    if ad.len() != bd.len() {
        return Err(Error::Shape(format!(
            "cosine_similarity of {} vs {} elements",
            ad.len(),
            bd.len()
        )));
    }
    let c = kernels::cosine(&ad, &bd)?;
    let rg = a.requires_grad() || b.requires_grad();
    Ok(tape.push_op(1, 1, vec![c], rg, Op::CosineSim { a: a.id, b: b.id }))
}

// ── backward ───────────────────────────────────────────────────────────────

impl Tensor {
    /// Reverse sweep from this scalar.  Every tensor on the tape with
    /// gradient tracking gets a populated gradient afterwards; tensors not
    /// reachable from the loss keep zeros.
    pub fn backward(&self) -> Result<()> {
        if self.shape() != (1, 1) {
            return Err(Error::Shape(format!(
                "backward from a {:?} tensor; losses must be scalar",
                self.shape()
            )));
        }
        let mut nodes = self.tape.nodes.borrow_mut();
        for node in nodes.iter_mut() {
            if node.requires_grad {
                node.grad = Some(vec![0.0; node.data.len()]);
            } else {
                node.grad = None;
            }
        }
        if !nodes[self.id].requires_grad {
            // A loss with no trainable inputs: all gradients stay zero.
            return Ok(());
        }
        nodes[self.id].grad.as_mut().unwrap()[0] = 1.0;

        for id in (0..=self.id).rev() {
            if !nodes[id].requires_grad {
                continue;
            }
            let grad = match nodes[id].grad.as_ref() {
                Some(g) if g.iter().any(|&v| v != 0.0) => g.clone(),
                _ => continue,
            };
            // Move the op out so input nodes can be mutated while reading it.
            let op = std::mem::replace(&mut nodes[id].op, Op::Leaf);
            macro_rules! add_grad {
                ($target:expr, $delta:expr) => {{
                    let t = $target;
                    if nodes[t].requires_grad {
                        let g = nodes[t].grad.as_mut().unwrap();
                        let d = $delta;
                        for (gi, di) in g.iter_mut().zip(d.iter()) {
                            *gi += di;
                        }
                    }
                }};
            }
            match &op {
                Op::Leaf => {}
                &Op::Add { a, b } => {
                    add_grad!(a, &grad);
                    add_grad!(b, &grad);
                }
                &Op::AddRow { a, bias } => {
                    add_grad!(a, &grad);
                    if nodes[bias].requires_grad {
                        let cols = nodes[bias].shape.1;
                        let mut d = vec![0.0; cols];
                        for (i, &g) in grad.iter().enumerate() {
                            d[i % cols] += g;
                        }
                        add_grad!(bias, &d);
                    }
                }
                &Op::Sub { a, b } => {
                    add_grad!(a, &grad);
                    if nodes[b].requires_grad {
                        let d: Vec<f64> = grad.iter().map(|g| -g).collect();
                        add_grad!(b, &d);
                    }
                }
                &Op::Mul { a, b } => {
                    if nodes[a].requires_grad {
                        let d: Vec<f64> =
                            grad.iter().zip(nodes[b].data.iter()).map(|(g, x)| g * x).collect();
                        add_grad!(a, &d);
                    }
                    if nodes[b].requires_grad {
                        let d: Vec<f64> =
                            grad.iter().zip(nodes[a].data.iter()).map(|(g, x)| g * x).collect();
                        add_grad!(b, &d);
                    }
                }
                &Op::Scale { a, c } => {
                    if nodes[a].requires_grad {
                        let d: Vec<f64> = grad.iter().map(|g| g * c).collect();
                        add_grad!(a, &d);
                    }
                }
                &Op::MatMul { a, b, m, k, n } => {
                    if nodes[a].requires_grad {
                        let d = kernels::matmul_nt(&grad, &nodes[b].data, m, n, k);
                        add_grad!(a, &d);
                    }
                    if nodes[b].requires_grad {
                        let d = kernels::matmul_tn(&nodes[a].data, &grad, m, k, n);
                        add_grad!(b, &d);
                    }
                }
                &Op::MatMulNT { a, b, m, k, n } => {
                    if nodes[a].requires_grad {
                        let d = kernels::matmul(&grad, &nodes[b].data, m, n, k);
                        add_grad!(a, &d);
                    }
                    if nodes[b].requires_grad {
                        let d = kernels::matmul_tn(&grad, &nodes[a].data, m, n, k);
                        add_grad!(b, &d);
                    }
                }
                &Op::Softmax { a, temperature } => {
                    if nodes[a].requires_grad {
                        let p = &nodes[id].data;
                        let cols = nodes[id].shape.1;
                        let mut d = vec![0.0; p.len()];
                        for r in 0..nodes[id].shape.0 {
                            let pr = &p[r * cols..(r + 1) * cols];
                            let gr = &grad[r * cols..(r + 1) * cols];
                            let dot: f64 = pr.iter().zip(gr.iter()).map(|(p, g)| p * g).sum();
                            for j in 0..cols {
                                d[r * cols + j] = pr[j] * (gr[j] - dot) / temperature;
                            }
                        }
                        add_grad!(a, &d);
                    }
                }
                Op::LayerNorm { a, gain, bias, xhat, inv_std } => {
                    let (a, gain, bias) = (*a, *gain, *bias);
                    let (rows, cols) = nodes[id].shape;
                    let gdata = nodes[gain].data.clone();
                    if nodes[gain].requires_grad {
                        let mut d = vec![0.0; cols];
                        for r in 0..rows {
                            for j in 0..cols {
                                d[j] += grad[r * cols + j] * xhat[r * cols + j];
                            }
                        }
                        add_grad!(gain, &d);
                    }
                    if nodes[bias].requires_grad {
                        let mut d = vec![0.0; cols];
                        for r in 0..rows {
                            for j in 0..cols {
                                d[j] += grad[r * cols + j];
                            }
                        }
                        add_grad!(bias, &d);
                    }
                    if nodes[a].requires_grad {
                        let xhat = xhat.clone();
                        let inv_std = inv_std.clone();
                        let mut d = vec![0.0; rows * cols];
                        let n = cols as f64;
                        for r in 0..rows {
                            let mut mean_gl = 0.0;
                            let mut mean_glx = 0.0;
                            for j in 0..cols {
                                let gl = grad[r * cols + j] * gdata[j];
                                mean_gl += gl;
                                mean_glx += gl * xhat[r * cols + j];
                            }
                            mean_gl /= n;
                            mean_glx /= n;
                            for j in 0..cols {
                                let gl = grad[r * cols + j] * gdata[j];
                                d[r * cols + j] =
                                    inv_std[r] * (gl - mean_gl - xhat[r * cols + j] * mean_glx);
                            }
                        }
                        add_grad!(a, &d);
                    }
                }
                &Op::Silu { a } => {
                    if nodes[a].requires_grad {
                        let d: Vec<f64> = grad
                            .iter()
                            .zip(nodes[a].data.iter())
                            .map(|(g, &x)| g * kernels::silu_deriv(x))
                            .collect();
                        add_grad!(a, &d);
                    }
                }
                Op::Gather { table, ids } => {
                    let table = *table;
                    if nodes[table].requires_grad {
                        let cols = nodes[table].shape.1;
                        let mut d = vec![0.0; nodes[table].data.len()];
                        for (row, &tid) in ids.iter().enumerate() {
                            for j in 0..cols {
                                d[tid * cols + j] += grad[row * cols + j];
                            }
                        }
                        add_grad!(table, &d);
                    }
                }
                Op::SelectRows { a, indices } => {
                    let a = *a;
                    if nodes[a].requires_grad {
                        let cols = nodes[a].shape.1;
                        let mut d = vec![0.0; nodes[a].data.len()];
                        for (row, &idx) in indices.iter().enumerate() {
                            for j in 0..cols {
                                d[idx * cols + j] += grad[row * cols + j];
                            }
                        }
                        add_grad!(a, &d);
                    }
                }
                Op::ConcatRows { parts } => {
                    let parts = parts.clone();
                    let mut offset = 0;
                    for pid in parts {
                        let len = nodes[pid].data.len();
                        if nodes[pid].requires_grad {
                            let d = grad[offset..offset + len].to_vec();
                            add_grad!(pid, &d);
                        }
                        offset += len;
                    }
                }
                Op::ConcatCols { parts } => {
                    let parts = parts.clone();
                    let rows = nodes[id].shape.0;
                    let total_cols = nodes[id].shape.1;
                    let mut offset = 0;
                    for pid in parts {
                        let pc = nodes[pid].shape.1;
                        if nodes[pid].requires_grad {
                            let mut d = vec![0.0; rows * pc];
                            for r in 0..rows {
                                d[r * pc..(r + 1) * pc].copy_from_slice(
                                    &grad[r * total_cols + offset..r * total_cols + offset + pc],
                                );
                            }
                            add_grad!(pid, &d);
                        }
                        offset += pc;
                    }
                }
                &Op::MeanRows { a } => {
                    if nodes[a].requires_grad {
                        let (rows, cols) = nodes[a].shape;
                        let mut d = vec![0.0; rows * cols];
                        for r in 0..rows {
                            for j in 0..cols {
                                d[r * cols + j] = grad[j] / rows as f64;
                            }
                        }
                        add_grad!(a, &d);
                    }
                }
                &Op::MeanAll { a } => {
                    if nodes[a].requires_grad {
                        let len = nodes[a].data.len();
                        let d = vec![grad[0] / len as f64; len];
                        add_grad!(a, &d);
                    }
                }
                &Op::SumAll { a } => {
                    if nodes[a].requires_grad {
                        let len = nodes[a].data.len();
                        let d = vec![grad[0]; len];
                        add_grad!(a, &d);
                    }
                }
                Op::CrossEntropy { logits, targets, probs } => {
                    let logits = *logits;
                    if nodes[logits].requires_grad {
                        let p = targets.len() as f64;
                        let cols = nodes[logits].shape.1;
                        let mut d = probs.clone();
                        for (row, &t) in targets.iter().enumerate() {
                            d[row * cols + t] -= 1.0;
                        }
                        for v in d.iter_mut() {
                            *v *= grad[0] / p;
                        }
                        add_grad!(logits, &d);
                    }
                }
                Op::KlDivergence { q, p } => {
                    let q = *q;
                    if nodes[q].requires_grad {
                        let d: Vec<f64> = p
                            .iter()
                            .zip(nodes[q].data.iter())
                            .map(|(&pi, &qi)| if pi > 0.0 { -grad[0] * pi / qi } else { 0.0 })
                            .collect();
                        add_grad!(q, &d);
                    }
                }
                &Op::CosineSim { a, b } => {
                    let ad = nodes[a].data.clone();
                    let bd = nodes[b].data.clone();
                    let na = kernels::l2_norm(&ad);
                    let nb = kernels::l2_norm(&bd);
                    let cval = nodes[id].data[0];
                    if nodes[a].requires_grad {
                        let d: Vec<f64> = ad
                            .iter()
                            .zip(bd.iter())
                            .map(|(&ai, &bi)| grad[0] * (bi / (na * nb) - cval * ai / (na * na)))
                            .collect();
                        add_grad!(a, &d);
                    }
                    if nodes[b].requires_grad {
                        let d: Vec<f64> = ad
                            .iter()
                            .zip(bd.iter())
                            .map(|(&ai, &bi)| grad[0] * (ai / (na * nb) - cval * bi / (nb * nb)))
                            .collect();
                        add_grad!(b, &d);
                    }
                }
                Op::L2NormalizeRows { a, norms } => {
                    let a = *a;
                    if nodes[a].requires_grad {
                        let (rows, cols) = nodes[id].shape;
                        let y = &nodes[id].data;
                        let mut d = vec![0.0; rows * cols];
                        for r in 0..rows {
                            let yr = &y[r * cols..(r + 1) * cols];
                            let gr = &grad[r * cols..(r + 1) * cols];
                            let dot: f64 = yr.iter().zip(gr.iter()).map(|(y, g)| y * g).sum();
                            for j in 0..cols {
                                d[r * cols + j] = (gr[j] - yr[j] * dot) / norms[r];
                            }
                        }
                        add_grad!(a, &d);
                    }
                }
                Op::Dropout { a, mask } => {
                    let a = *a;
                    if nodes[a].requires_grad {
                        let d: Vec<f64> =
                            grad.iter().zip(mask.iter()).map(|(g, m)| g * m).collect();
                        add_grad!(a, &d);
                    }
                }
            }
            nodes[id].op = op;
        }
        Ok(())
    }
}

// ── finite-difference gradient checking ────────────────────────────────────

/// Central finite-difference step.
pub const GRAD_CHECK_STEP: f64 = 1e-5;
/// Pass threshold on the max relative error.
pub const GRAD_CHECK_TOLERANCE: f64 = 1e-4;

/// Compare the analytic gradients of `f` against central finite differences
/// over every coordinate of every parameter; returns the max relative error.
///
/// `f` receives a fresh tape plus one gradient-tracked leaf per parameter and
/// must return a scalar loss.
pub fn grad_check<F>(f: F, params: &[(usize, usize, Vec<f64>)], eps: f64) -> Result<f64>
where
    F: Fn(&Tape, &[Tensor]) -> Result<Tensor>,
{
    let eval = |values: &[Vec<f64>], track: bool| -> Result<(f64, Vec<Option<Vec<f64>>>)> {
        let tape = Tape::new();
        let mut leaves = Vec::new();
        for ((r, c, _), vals) in params.iter().zip(values.iter()) {
            leaves.push(tape.leaf(*r, *c, vals.clone(), track)?);
        }
        let loss = f(&tape, &leaves)?;
        if track {
            loss.backward()?;
        }
        let grads = leaves.iter().map(|l| l.grad()).collect();
        Ok((loss.item()?, grads))
    };

    let base: Vec<Vec<f64>> = params.iter().map(|(_, _, v)| v.clone()).collect();
    let (_, analytic) = eval(&base, true)?;

    let mut max_rel = 0.0f64;
    for (pi, vals) in base.iter().enumerate() {
        let analytic = analytic[pi]
            .as_ref()
            .ok_or_else(|| Error::Numeric("gradient missing after backward".into()))?;
        for ci in 0..vals.len() {
            let mut plus = base.clone();
            plus[pi][ci] += eps;
            let (lp, _) = eval(&plus, false)?;
            let mut minus = base.clone();
            minus[pi][ci] -= eps;
            let (lm, _) = eval(&minus, false)?;
            let fd = (lp - lm) / (2.0 * eps);
            let a = analytic[ci];
            let rel = (fd - a).abs() / fd.abs().max(a.abs()).max(1e-6);
            max_rel = max_rel.max(rel);
        }
    }
    Ok(max_rel)
}
