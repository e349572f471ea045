//! Tape-based reverse-mode differentiation over [`Tensor`]s.
//!
//! Every operation executed through a [`Var`] appends a node to its [`Tape`]
//! holding the output value and a closure that maps the output gradient to
//! gradients for the node's inputs. [`Tape::backward`] walks the nodes in
//! exact reverse execution order and accumulates parameter gradients into a
//! [`ParamStore`].

use std::cell::{Cell, RefCell};
use std::collections::HashMap;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::tensor::{gemm_acc, gemm_nt_acc, gemm_tn_acc, Real, Tensor};

type BackwardFn<F> = Box<dyn Fn(&Tensor<F>, &[bool]) -> Vec<Option<Tensor<F>>> + Send>;

struct Node<F> {
    op: &'static str,
    value: Arc<Tensor<F>>,
    parents: Vec<usize>,
    backward: Option<BackwardFn<F>>,
    param: Option<ParamId>,
    requires_grad: bool,
}

thread_local! {
    static FLIPPED: Cell<Option<&'static str>> = const { Cell::new(None) };
}

/// Runs `f` with the backward rule of `op` sign-flipped on this thread.
///
/// Mutation hook for the verification suite: a correct gradient checker must
/// flag the affected block.
pub fn with_flipped_backward<R>(op: &'static str, f: impl FnOnce() -> R) -> R {
    let prev = FLIPPED.with(|c| c.replace(Some(op)));
    let out = f();
    FLIPPED.with(|c| c.set(prev));
    out
}

/// The ordered record of executed operations.
pub struct Tape<F: Real> {
    nodes: RefCell<Vec<Node<F>>>,
    leaves: RefCell<HashMap<ParamId, usize>>,
    check_finite: bool,
}

impl<F: Real> Default for Tape<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Real> Tape<F> {
    pub fn new() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
            leaves: RefCell::new(HashMap::new()),
            check_finite: false,
        }
    }

    /// A tape that panics as soon as any operation produces NaN or Inf.
    pub fn with_finite_checks() -> Self {
        Self {
            check_finite: true,
            ..Self::new()
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.borrow().is_empty()
    }

    fn push_node(&self, node: Node<F>) -> usize {
        if self.check_finite && !node.value.all_finite() {
            panic!("non-finite output from `{}`", node.op);
        }
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(node);
        nodes.len() - 1
    }

    pub fn constant(&self, value: Tensor<F>) -> Var<'_, F> {
        let id = self.push_node(Node {
            op: "constant",
            value: Arc::new(value),
            parents: Vec::new(),
            backward: None,
            param: None,
            requires_grad: false,
        });
        Var { tape: self, id }
    }

    /// Leaf for a stored parameter. Repeated calls return the same node.
    pub fn param(&self, store: &ParamStore<F>, pid: ParamId) -> Var<'_, F> {
        if let Some(&id) = self.leaves.borrow().get(&pid) {
            return Var { tape: self, id };
        }
        let id = self.push_node(Node {
            op: "param",
            value: store.value_arc(pid),
            parents: Vec::new(),
            backward: None,
            param: Some(pid),
            requires_grad: true,
        });
        self.leaves.borrow_mut().insert(pid, id);
        Var { tape: self, id }
    }

    /// Records an operation. `backward` receives the output gradient and a
    /// mask of which parents need gradients.
    pub(crate) fn op(
        &self,
        op: &'static str,
        value: Tensor<F>,
        parents: &[Var<'_, F>],
        backward: impl Fn(&Tensor<F>, &[bool]) -> Vec<Option<Tensor<F>>> + Send + 'static,
    ) -> Var<'_, F> {
        let parent_ids: Vec<usize> = parents.iter().map(|v| v.id).collect();
        let requires_grad = {
            let nodes = self.nodes.borrow();
            parent_ids.iter().any(|&p| nodes[p].requires_grad)
        };
        let id = self.push_node(Node {
            op,
            value: Arc::new(value),
            parents: parent_ids,
            backward: requires_grad.then(|| Box::new(backward) as BackwardFn<F>),
            param: None,
            requires_grad,
        });
        Var { tape: self, id }
    }

    fn value_of(&self, id: usize) -> Arc<Tensor<F>> {
        Arc::clone(&self.nodes.borrow()[id].value)
    }

    /// Propagates from a scalar loss and accumulates into `store` gradients.
    pub fn backward(&self, loss: Var<'_, F>, store: &mut ParamStore<F>) -> Result<()> {
        let value = loss.value();
        if value.len() != 1 {
            return Err(Error::Rank(format!(
                "backward needs a scalar loss, got shape {:?}",
                value.shape()
            )));
        }
        let seed = Tensor::full(value.shape(), F::one());
        self.backward_seeded(loss, seed, store)
    }

    /// Propagates an explicit output gradient `seed` from any node.
    pub fn backward_seeded(
        &self,
        out: Var<'_, F>,
        seed: Tensor<F>,
        store: &mut ParamStore<F>,
    ) -> Result<()> {
        for (pid, g) in self.gradients(out, seed)? {
            store.get_mut(pid).grad.add_assign(&g);
        }
        Ok(())
    }

    /// Gradients of every reachable parameter, in parameter-leaf order.
    pub fn gradients(&self, out: Var<'_, F>, seed: Tensor<F>) -> Result<Vec<(ParamId, Tensor<F>)>> {
        let nodes = self.nodes.borrow();
        if nodes.is_empty() {
            return Err(Error::Rank("backward on an empty tape".into()));
        }
        if seed.shape() != nodes[out.id].value.shape() {
            return Err(Error::Shape(format!(
                "seed {:?} does not match output {:?}",
                seed.shape(),
                nodes[out.id].value.shape()
            )));
        }
        let flipped = FLIPPED.with(Cell::get);
        let mut grads: Vec<Option<Tensor<F>>> = (0..=out.id).map(|_| None).collect();
        grads[out.id] = Some(seed);
        let mut result = Vec::new();
        for i in (0..=out.id).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &nodes[i];
            if let Some(pid) = node.param {
                result.push((pid, g));
                continue;
            }
            let Some(bw) = &node.backward else { continue };
            let mask: Vec<bool> = node
                .parents
                .iter()
                .map(|&p| nodes[p].requires_grad)
                .collect();
            let pgrads = bw(&g, &mask);
            let flip = flipped == Some(node.op);
            for ((&p, pg), &need) in node.parents.iter().zip(pgrads).zip(&mask) {
                let Some(mut pg) = pg else { continue };
                if !need {
                    continue;
                }
                if flip {
                    pg = pg.map(|x| -x);
                }
                match &mut grads[p] {
                    Some(acc) => acc.add_assign(&pg),
                    slot => *slot = Some(pg),
                }
            }
        }
        result.sort_by_key(|(pid, _)| *pid);
        Ok(result)
    }
}

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t, F: Real> {
    tape: &'t Tape<F>,
    id: usize,
}

/// Packed variable-length sequences: rows `offsets[i]..offsets[i+1]` form segment `i`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Segments {
    offsets: Vec<usize>,
}

impl Segments {
    pub fn from_lens(lens: &[usize]) -> Result<Self> {
        if lens.is_empty() {
            return Err(Error::Shape("no segments".into()));
        }
        if lens.contains(&0) {
            return Err(Error::Shape("empty segment".into()));
        }
        let mut offsets = Vec::with_capacity(lens.len() + 1);
        offsets.push(0);
        for &l in lens {
            offsets.push(offsets.last().unwrap() + l);
        }
        Ok(Self { offsets })
    }

    pub fn single(len: usize) -> Self {
        Self::from_lens(&[len]).expect("non-empty single segment")
    }

    pub fn count(&self) -> usize {
        self.offsets.len() - 1
    }

    pub fn total(&self) -> usize {
        *self.offsets.last().unwrap()
    }

    pub fn range(&self, i: usize) -> std::ops::Range<usize> {
        self.offsets[i]..self.offsets[i + 1]
    }

    pub fn lens(&self) -> Vec<usize> {
        self.offsets.windows(2).map(|w| w[1] - w[0]).collect()
    }

    pub fn iter(&self) -> impl Iterator<Item = std::ops::Range<usize>> + '_ {
        self.offsets.windows(2).map(|w| w[0]..w[1])
    }
}

fn same_shape<F: Real>(op: &str, a: &Tensor<F>, b: &Tensor<F>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::Shape(format!(
            "{op}: shapes {:?} and {:?} differ",
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
}

fn rank2<F: Real>(op: &str, a: &Tensor<F>) -> Result<(usize, usize)> {
    if a.rank() != 2 {
        return Err(Error::Rank(format!("{op} needs rank 2, got {:?}", a.shape())));
    }
    Ok((a.shape()[0], a.shape()[1]))
}

impl<'t, F: Real> Var<'t, F> {
    pub fn tape(&self) -> &'t Tape<F> {
        self.tape
    }

    pub fn value(&self) -> Arc<Tensor<F>> {
        self.tape.value_of(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.value().shape().to_vec()
    }

    pub fn rows(&self) -> usize {
        self.value().rows()
    }

    pub fn cols(&self) -> usize {
        self.value().cols()
    }

    fn unary(
        self,
        op: &'static str,
        f: impl Fn(F) -> F,
        df: impl Fn(F, F) -> F + Send + 'static,
    ) -> Var<'t, F> {
        let x = self.value();
        let y = x.map(f);
        let y_saved = Arc::new(y.clone());
        self.tape.op(op, y, &[self], move |g, _| {
            let dx = Tensor::new(
                g.shape(),
                g.data()
                    .iter()
                    .zip(x.data())
                    .zip(y_saved.data())
                    .map(|((&g, &x), &y)| g * df(x, y))
                    .collect(),
            )
            .expect("same shape");
            vec![Some(dx)]
        })
    }

    pub fn matmul(self, other: Var<'t, F>) -> Result<Var<'t, F>> {
        let a = self.value();
        let b = other.value();
        let (m, k) = rank2("matmul", &a)?;
        let (k2, n) = rank2("matmul", &b)?;
        if k != k2 {
            return Err(Error::Shape(format!(
                "matmul inner extents differ: {:?} x {:?}",
                a.shape(),
                b.shape()
            )));
        }
        let mut out = vec![F::zero(); m * n];
        gemm_acc(a.data(), b.data(), &mut out, m, k, n);
        let y = Tensor::new(&[m, n], out)?;
        Ok(self.tape.op("matmul", y, &[self, other], move |g, need| {
            let da = need[0].then(|| {
                let mut da = vec![F::zero(); m * k];
                gemm_nt_acc(g.data(), b.data(), &mut da, m, n, k);
                Tensor::new(&[m, k], da).unwrap()
            });
            let db = need[1].then(|| {
                let mut db = vec![F::zero(); k * n];
                gemm_tn_acc(a.data(), g.data(), &mut db, m, k, n);
                Tensor::new(&[k, n], db).unwrap()
            });
            vec![da, db]
        }))
    }

    pub fn add(self, other: Var<'t, F>) -> Result<Var<'t, F>> {
        let (a, b) = (self.value(), other.value());
        same_shape("add", &a, &b)?;
        let y = a.zip_map(&b, |x, y| x + y);
        Ok(self
            .tape
            .op("add", y, &[self, other], |g, _| vec![Some(g.clone()), Some(g.clone())]))
    }

    pub fn sub(self, other: Var<'t, F>) -> Result<Var<'t, F>> {
        let (a, b) = (self.value(), other.value());
        same_shape("sub", &a, &b)?;
        let y = a.zip_map(&b, |x, y| x - y);
        Ok(self.tape.op("sub", y, &[self, other], |g, _| {
            vec![Some(g.clone()), Some(g.map(|x| -x))]
        }))
    }

    /// Elementwise product.
    pub fn mul(self, other: Var<'t, F>) -> Result<Var<'t, F>> {
        let (a, b) = (self.value(), other.value());
        same_shape("mul", &a, &b)?;
        let y = a.zip_map(&b, |x, y| x * y);
        Ok(self.tape.op("mul", y, &[self, other], move |g, need| {
            vec![
                need[0].then(|| g.zip_map(&b, |g, b| g * b)),
                need[1].then(|| g.zip_map(&a, |g, a| g * a)),
            ]
        }))
    }

    pub fn scale(self, c: F) -> Var<'t, F> {
        let y = self.value().map(|x| x * c);
        self.tape
            .op("scale", y, &[self], move |g, _| vec![Some(g.map(|x| x * c))])
    }

    /// Adds a trailing-axis vector to every row.
    pub fn add_bias(self, bias: Var<'t, F>) -> Result<Var<'t, F>> {
        let x = self.value();
        let b = bias.value();
        let n = x.cols();
        if b.len() != n {
            return Err(Error::Shape(format!(
                "bias of length {} for rows of width {n}",
                b.len()
            )));
        }
        let mut y = (*x).clone();
        for row in y.data_mut().chunks_mut(n) {
            for (v, &bb) in row.iter_mut().zip(b.data()) {
                *v += bb;
            }
        }
        let bshape = b.shape().to_vec();
        Ok(self.tape.op("add_bias", y, &[self, bias], move |g, need| {
            let db = need[1].then(|| {
                let mut acc = vec![F::zero(); n];
                for row in g.data().chunks(n) {
                    for (a, &v) in acc.iter_mut().zip(row) {
                        *a += v;
                    }
                }
                Tensor::new(&bshape, acc).unwrap()
            });
            vec![Some(g.clone()), db]
        }))
    }

    /// Multiplies every row elementwise by a trailing-axis vector.
    pub fn mul_cols(self, gain: Var<'t, F>) -> Result<Var<'t, F>> {
        let x = self.value();
        let w = gain.value();
        let n = x.cols();
        if w.len() != n {
            return Err(Error::Shape(format!(
                "gain of length {} for rows of width {n}",
                w.len()
            )));
        }
        let mut y = (*x).clone();
        for row in y.data_mut().chunks_mut(n) {
            for (v, &ww) in row.iter_mut().zip(w.data()) {
                *v *= ww;
            }
        }
        let wshape = w.shape().to_vec();
        Ok(self.tape.op("mul_cols", y, &[self, gain], move |g, need| {
            let dx = need[0].then(|| {
                let mut dx = g.clone();
                for row in dx.data_mut().chunks_mut(n) {
                    for (v, &ww) in row.iter_mut().zip(w.data()) {
                        *v *= ww;
                    }
                }
                dx
            });
            let dw = need[1].then(|| {
                let mut acc = vec![F::zero(); n];
                for (grow, xrow) in g.data().chunks(n).zip(x.data().chunks(n)) {
                    for ((a, &gv), &xv) in acc.iter_mut().zip(grow).zip(xrow) {
                        *a += gv * xv;
                    }
                }
                Tensor::new(&wshape, acc).unwrap()
            });
            vec![dx, dw]
        }))
    }

    pub fn neg(self) -> Var<'t, F> {
        self.unary("neg", |x| -x, |_, _| -F::one())
    }

    pub fn exp(self) -> Var<'t, F> {
        self.unary("exp", F::exp, |_, y| y)
    }

    pub fn square(self) -> Var<'t, F> {
        self.unary("square", |x| x * x, |x, _| x + x)
    }

    pub fn sqrt(self) -> Var<'t, F> {
        self.unary("sqrt", F::sqrt, |_, y| F::lit(0.5) / y)
    }

    pub fn sigmoid(self) -> Var<'t, F> {
        self.unary("sigmoid", sigmoid, |_, y| y * (F::one() - y))
    }

    /// `x · sigmoid(x)`.
    pub fn silu(self) -> Var<'t, F> {
        self.unary("silu", silu, |x, _| {
            let s = sigmoid(x);
            s * (F::one() + x * (F::one() - s))
        })
    }

    /// `ln(1 + eˣ)`, evaluated without overflow.
    pub fn softplus(self) -> Var<'t, F> {
        self.unary("softplus", softplus, |x, _| sigmoid(x))
    }

    /// Elementwise clamp; the gradient passes only strictly inside the band.
    pub fn clamp(self, lo: F, hi: F) -> Var<'t, F> {
        self.unary(
            "clamp",
            move |x| x.max(lo).min(hi),
            move |x, _| {
                if x > lo && x < hi {
                    F::one()
                } else {
                    F::zero()
                }
            },
        )
    }

    pub fn sum(self) -> Var<'t, F> {
        let x = self.value();
        let s: F = x.data().iter().copied().sum();
        let shape = x.shape().to_vec();
        self.tape.op("sum", Tensor::scalar(s), &[self], move |g, _| {
            vec![Some(Tensor::full(&shape, g.item()))]
        })
    }

    pub fn mean(self) -> Var<'t, F> {
        let n = F::lit(self.value().len() as f64);
        self.sum().scale(F::one() / n)
    }

    /// Row sums of a rank-2 tensor, shape `[m, 1]`.
    pub fn sum_cols(self) -> Result<Var<'t, F>> {
        let x = self.value();
        let (m, n) = rank2("sum_cols", &x)?;
        let y: Vec<F> = x.data().chunks(n).map(|r| r.iter().copied().sum()).collect();
        Ok(self
            .tape
            .op("sum_cols", Tensor::new(&[m, 1], y)?, &[self], move |g, _| {
                let mut dx = Vec::with_capacity(m * n);
                for i in 0..m {
                    dx.extend(std::iter::repeat_n(g.data()[i], n));
                }
                vec![Some(Tensor::new(&[m, n], dx).unwrap())]
            }))
    }

    pub fn transpose(self) -> Result<Var<'t, F>> {
        let x = self.value();
        rank2("transpose", &x)?;
        let y = x.transpose2();
        Ok(self
            .tape
            .op("transpose", y, &[self], |g, _| vec![Some(g.transpose2())]))
    }

    /// Main diagonal of a square matrix, shape `[n]`.
    pub fn diag(self) -> Result<Var<'t, F>> {
        let x = self.value();
        let (m, n) = rank2("diag", &x)?;
        if m != n {
            return Err(Error::Shape(format!("diag of non-square {:?}", x.shape())));
        }
        let y = Tensor::vector((0..n).map(|i| x.at(i, i)).collect());
        Ok(self.tape.op("diag", y, &[self], move |g, _| {
            let mut dx = Tensor::zeros(&[n, n]);
            for i in 0..n {
                dx.data_mut()[i * n + i] = g.data()[i];
            }
            vec![Some(dx)]
        }))
    }

    /// Copies rows `start..end`.
    pub fn slice_rows(self, start: usize, end: usize) -> Result<Var<'t, F>> {
        let x = self.value();
        let (m, n) = rank2("slice_rows", &x)?;
        if start >= end || end > m {
            return Err(Error::Shape(format!("row slice {start}..{end} of {m}")));
        }
        let y = Tensor::new(&[end - start, n], x.data()[start * n..end * n].to_vec())?;
        Ok(self.tape.op("slice_rows", y, &[self], move |g, _| {
            let mut dx = Tensor::zeros(&[m, n]);
            dx.data_mut()[start * n..end * n].copy_from_slice(g.data());
            vec![Some(dx)]
        }))
    }

    /// Selects rows of a `[V, d]` table by index (an embedding lookup).
    pub fn gather_rows(self, indices: &[usize]) -> Result<Var<'t, F>> {
        let x = self.value();
        let (m, n) = rank2("gather_rows", &x)?;
        if indices.is_empty() {
            return Err(Error::Shape("gather with no indices".into()));
        }
        if let Some(&bad) = indices.iter().find(|&&i| i >= m) {
            return Err(Error::Shape(format!("row index {bad} out of {m}")));
        }
        let mut y = Vec::with_capacity(indices.len() * n);
        for &i in indices {
            y.extend_from_slice(x.row(i));
        }
        let idx = indices.to_vec();
        let y = Tensor::new(&[idx.len(), n], y)?;
        Ok(self.tape.op("gather_rows", y, &[self], move |g, _| {
            let mut dx = Tensor::zeros(&[m, n]);
            for (r, &i) in idx.iter().enumerate() {
                let src = g.row(r);
                for (d, &s) in dx.data_mut()[i * n..(i + 1) * n].iter_mut().zip(src) {
                    *d += s;
                }
            }
            vec![Some(dx)]
        }))
    }

    /// Column-wise concatenation of equal-height matrices.
    pub fn concat_cols(parts: &[Var<'t, F>]) -> Result<Var<'t, F>> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Shape("concat of nothing".into()))?;
        let values: Vec<_> = parts.iter().map(Var::value).collect();
        let m = values[0].rows();
        for v in &values {
            rank2("concat_cols", v)?;
            if v.rows() != m {
                return Err(Error::Shape("concat_cols row counts differ".into()));
            }
        }
        let widths: Vec<usize> = values.iter().map(|v| v.cols()).collect();
        let total: usize = widths.iter().sum();
        let mut y = Vec::with_capacity(m * total);
        for i in 0..m {
            for v in &values {
                y.extend_from_slice(v.row(i));
            }
        }
        let y = Tensor::new(&[m, total], y)?;
        Ok(first.tape.op("concat_cols", y, parts, move |g, _| {
            let mut off = 0;
            widths
                .iter()
                .map(|&w| {
                    let mut d = Vec::with_capacity(m * w);
                    for i in 0..m {
                        d.extend_from_slice(&g.row(i)[off..off + w]);
                    }
                    off += w;
                    Some(Tensor::new(&[m, w], d).unwrap())
                })
                .collect()
        }))
    }

    /// Row-wise concatenation of equal-width matrices.
    pub fn concat_rows(parts: &[Var<'t, F>]) -> Result<Var<'t, F>> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Shape("concat of nothing".into()))?;
        let values: Vec<_> = parts.iter().map(Var::value).collect();
        let n = values[0].cols();
        let mut heights = Vec::with_capacity(values.len());
        let mut y = Vec::new();
        for v in &values {
            rank2("concat_rows", v)?;
            if v.cols() != n {
                return Err(Error::Shape("concat_rows widths differ".into()));
            }
            heights.push(v.rows());
            y.extend_from_slice(v.data());
        }
        let m: usize = heights.iter().sum();
        let y = Tensor::new(&[m, n], y)?;
        Ok(first.tape.op("concat_rows", y, parts, move |g, _| {
            let mut off = 0;
            heights
                .iter()
                .map(|&h| {
                    let d = g.data()[off * n..(off + h) * n].to_vec();
                    off += h;
                    Some(Tensor::new(&[h, n], d).unwrap())
                })
                .collect()
        }))
    }

    /// Scales every row to unit Euclidean norm.
    pub fn l2_normalize_rows(self) -> Result<Var<'t, F>> {
        let x = self.value();
        let (m, n) = rank2("l2_normalize_rows", &x)?;
        let eps = F::lit(1e-12);
        let norms: Vec<F> = x
            .data()
            .chunks(n)
            .map(|r| r.iter().map(|&v| v * v).sum::<F>().sqrt().max(eps))
            .collect();
        let mut y = (*x).clone();
        for (row, &nrm) in y.data_mut().chunks_mut(n).zip(&norms) {
            row.iter_mut().for_each(|v| *v /= nrm);
        }
        let y_saved = y.clone();
        Ok(self.tape.op("l2_normalize", y, &[self], move |g, _| {
            let mut dx = vec![F::zero(); m * n];
            for i in 0..m {
                let yr = y_saved.row(i);
                let gr = g.row(i);
                let dot: F = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                for j in 0..n {
                    dx[i * n + j] = (gr[j] - yr[j] * dot) / norms[i];
                }
            }
            vec![Some(Tensor::new(&[m, n], dx).unwrap())]
        }))
    }

    /// Softmax over the last axis with max subtraction.
    pub fn softmax_rows(self) -> Var<'t, F> {
        let x = self.value();
        let n = x.cols();
        let mut y = (*x).clone();
        y.data_mut().chunks_mut(n).for_each(softmax_in_place);
        let y_saved = y.clone();
        self.tape.op("softmax", y, &[self], move |g, _| {
            let mut dx = g.clone();
            for (drow, yrow) in dx.data_mut().chunks_mut(n).zip(y_saved.data().chunks(n)) {
                let dot: F = drow.iter().zip(yrow).map(|(&a, &b)| a * b).sum();
                for (d, &yv) in drow.iter_mut().zip(yrow) {
                    *d = yv * (*d - dot);
                }
            }
            vec![Some(dx)]
        })
    }

    /// Log-softmax over the last axis.
    pub fn log_softmax_rows(self) -> Var<'t, F> {
        let x = self.value();
        let n = x.cols();
        let mut y = (*x).clone();
        for row in y.data_mut().chunks_mut(n) {
            let mx = row.iter().copied().fold(F::neg_infinity(), F::max);
            let lse = mx + row.iter().map(|&v| (v - mx).exp()).sum::<F>().ln();
            row.iter_mut().for_each(|v| *v -= lse);
        }
        let y_saved = y.clone();
        self.tape.op("log_softmax", y, &[self], move |g, _| {
            let mut dx = g.clone();
            for (drow, yrow) in dx.data_mut().chunks_mut(n).zip(y_saved.data().chunks(n)) {
                let gs: F = drow.iter().copied().sum();
                for (d, &yv) in drow.iter_mut().zip(yrow) {
                    *d -= yv.exp() * gs;
                }
            }
            vec![Some(dx)]
        })
    }

    /// Per-segment mean over rows: `[ΣL, d] → [S, d]`.
    pub fn mean_pool(self, segs: &Segments) -> Result<Var<'t, F>> {
        let x = self.value();
        let (m, n) = rank2("mean_pool", &x)?;
        check_segs(segs, m)?;
        let mut y = vec![F::zero(); segs.count() * n];
        for (s, r) in segs.iter().enumerate() {
            let inv = F::one() / F::lit(r.len() as f64);
            let out = &mut y[s * n..(s + 1) * n];
            for i in r {
                for (o, &v) in out.iter_mut().zip(x.row(i)) {
                    *o += v;
                }
            }
            out.iter_mut().for_each(|o| *o *= inv);
        }
        let segs = segs.clone();
        let y = Tensor::new(&[segs.count(), n], y)?;
        Ok(self.tape.op("mean_pool", y, &[self], move |g, _| {
            let mut dx = vec![F::zero(); m * n];
            for (s, r) in segs.iter().enumerate() {
                let inv = F::one() / F::lit(r.len() as f64);
                for i in r {
                    for (d, &gv) in dx[i * n..(i + 1) * n].iter_mut().zip(g.row(s)) {
                        *d = gv * inv;
                    }
                }
            }
            vec![Some(Tensor::new(&[m, n], dx).unwrap())]
        }))
    }

    /// Per-segment coordinatewise maximum; ties route the gradient to the first row.
    pub fn max_pool(self, segs: &Segments) -> Result<Var<'t, F>> {
        let x = self.value();
        let (m, n) = rank2("max_pool", &x)?;
        check_segs(segs, m)?;
        let mut y = vec![F::zero(); segs.count() * n];
        let mut arg = vec![0usize; segs.count() * n];
        for (s, r) in segs.iter().enumerate() {
            let start = r.start;
            y[s * n..(s + 1) * n].copy_from_slice(x.row(start));
            arg[s * n..(s + 1) * n].iter_mut().for_each(|a| *a = start);
            for i in r.skip(1) {
                for (j, &v) in x.row(i).iter().enumerate() {
                    if v > y[s * n + j] {
                        y[s * n + j] = v;
                        arg[s * n + j] = i;
                    }
                }
            }
        }
        let count = segs.count();
        let y = Tensor::new(&[count, n], y)?;
        Ok(self.tape.op("max_pool", y, &[self], move |g, _| {
            let mut dx = vec![F::zero(); m * n];
            for s in 0..count {
                for j in 0..n {
                    dx[arg[s * n + j] * n + j] += g.data()[s * n + j];
                }
            }
            vec![Some(Tensor::new(&[m, n], dx).unwrap())]
        }))
    }
}

pub(crate) fn check_segs(segs: &Segments, rows: usize) -> Result<()> {
    if segs.total() != rows {
        return Err(Error::Shape(format!(
            "segments cover {} rows, tensor has {rows}",
            segs.total()
        )));
    }
    Ok(())
}

#[inline]
pub fn sigmoid<F: Real>(x: F) -> F {
    if x >= F::zero() {
        F::one() / (F::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (F::one() + e)
    }
}

#[inline]
pub fn silu<F: Real>(x: F) -> F {
    x * sigmoid(x)
}

#[inline]
pub fn softplus<F: Real>(x: F) -> F {
    if x > F::lit(30.0) {
        x
    } else {
        x.max(F::zero()) + (-x.abs()).exp().ln_1p()
    }
}

pub(crate) fn softmax_in_place<F: Real>(row: &mut [F]) {
    let mx = row.iter().copied().fold(F::neg_infinity(), F::max);
    let mut s = F::zero();
    for v in row.iter_mut() {
        *v = (*v - mx).exp();
        s += *v;
    }
    row.iter_mut().for_each(|v| *v /= s);
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store_with(values: &[(&str, Tensor<f64>)]) -> (ParamStore<f64>, Vec<ParamId>) {
        let mut s = ParamStore::new();
        let ids = values
            .iter()
            .map(|(n, t)| s.add(*n, t.clone()).unwrap())
            .collect();
        (s, ids)
    }

    #[test]
    fn matmul_forward_and_backward() {
        let a = Tensor::from_rows(&[vec![1.0, 2.0]]).unwrap();
        let b = Tensor::from_rows(&[vec![3.0], vec![4.0]]).unwrap();
        let (mut s, ids) = store_with(&[("a", a), ("b", b)]);
        let tape = Tape::new();
        let y = tape.param(&s, ids[0]).matmul(tape.param(&s, ids[1])).unwrap();
        assert_eq!(y.value().data(), &[11.0]);
        tape.backward(y, &mut s).unwrap();
        assert_eq!(s.grad(ids[0]).data(), &[3.0, 4.0]);
        assert_eq!(s.grad(ids[1]).data(), &[1.0, 2.0]);
    }

    #[test]
    fn identity_matmul() {
        let tape = Tape::<f64>::new();
        let i2 = tape.constant(Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap());
        let m = Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
        let y = i2.matmul(tape.constant(m.clone())).unwrap();
        assert_eq!(*y.value(), m);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let tape = Tape::<f64>::new();
        let a = tape.constant(Tensor::zeros(&[2, 3]));
        let b = tape.constant(Tensor::zeros(&[2, 3]));
        let msg = a.matmul(b).err().unwrap().to_string();
        assert!(msg.contains("[2, 3]") && msg.contains("x [2, 3]"), "{msg}");
    }

    #[test]
    fn backward_sum_and_square() {
        let (mut s, ids) = store_with(&[("p", Tensor::vector(vec![1.0, 2.0, 3.0]))]);
        let tape = Tape::new();
        let loss = tape.param(&s, ids[0]).sum();
        tape.backward(loss, &mut s).unwrap();
        assert_eq!(s.grad(ids[0]).data(), &[1.0, 1.0, 1.0]);

        let (mut s, ids) = store_with(&[("p", Tensor::vector(vec![1.0, 2.0]))]);
        let tape = Tape::new();
        let loss = tape.param(&s, ids[0]).square().sum();
        tape.backward(loss, &mut s).unwrap();
        assert_eq!(s.grad(ids[0]).data(), &[2.0, 4.0]);
    }

    #[test]
    fn repeated_backward_accumulates() {
        let (mut s, ids) = store_with(&[("p", Tensor::vector(vec![1.0]))]);
        let tape = Tape::new();
        let loss = tape.param(&s, ids[0]).sum();
        tape.backward(loss, &mut s).unwrap();
        tape.backward(loss, &mut s).unwrap();
        assert_eq!(s.grad(ids[0]).data(), &[2.0]);
        s.zero_grad();
        assert_eq!(s.grad(ids[0]).data(), &[0.0]);
    }

    #[test]
    fn non_scalar_loss_is_rank_error() {
        let (mut s, ids) = store_with(&[("p", Tensor::vector(vec![1.0, 2.0]))]);
        let tape = Tape::new();
        let p = tape.param(&s, ids[0]);
        assert!(matches!(tape.backward(p, &mut s), Err(Error::Rank(_))));
    }

    #[test]
    fn shared_use_accumulates_additively() {
        let (mut s, ids) = store_with(&[("p", Tensor::vector(vec![3.0]))]);
        let tape = Tape::new();
        let p = tape.param(&s, ids[0]);
        let loss = p.mul(p).unwrap().add(p).unwrap().sum();
        tape.backward(loss, &mut s).unwrap();
        assert_eq!(s.grad(ids[0]).data(), &[7.0]);
    }

    #[test]
    fn softmax_examples() {
        let tape = Tape::<f64>::new();
        let y = tape.constant(Tensor::vector(vec![0.0, 0.0])).softmax_rows();
        assert_eq!(y.value().data(), &[0.5, 0.5]);
        let y = tape.constant(Tensor::vector(vec![1000.0, 0.0])).softmax_rows();
        assert!((y.value().data()[0] - 1.0).abs() < 1e-12);
        assert!(y.value().data()[1].abs() < 1e-12);
        let y = tape
            .constant(Tensor::vector(vec![2f64.ln(), 0.0]))
            .softmax_rows();
        assert!((y.value().data()[0] - 2.0 / 3.0).abs() < 1e-12);
        assert!((y.value().data()[1] - 1.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn silu_examples() {
        assert_eq!(silu(0.0f64), 0.0);
        assert!((silu(1.0f64) - 0.7310585786).abs() < 1e-10);
        let v = silu(-20.0f64);
        assert!((v + 20.0 * (-20f64).exp() / (1.0 + (-20f64).exp())).abs() < 1e-20);
        assert!((v + 4.1e-8).abs() < 1e-9);
    }

    #[test]
    fn max_pool_routes_to_argmax() {
        let (mut s, ids) = store_with(&[(
            "x",
            Tensor::from_rows(&[vec![1.0, 5.0], vec![3.0, 2.0], vec![0.0, 0.0]]).unwrap(),
        )]);
        let tape = Tape::new();
        let segs = Segments::from_lens(&[2, 1]).unwrap();
        let y = tape.param(&s, ids[0]).max_pool(&segs).unwrap();
        assert_eq!(y.value().data(), &[3.0, 5.0, 0.0, 0.0]);
        tape.backward(y.sum(), &mut s).unwrap();
        assert_eq!(s.grad(ids[0]).data(), &[0.0, 1.0, 1.0, 0.0, 1.0, 1.0]);
    }

    #[test]
    #[should_panic(expected = "non-finite")]
    fn finite_checks_trip_on_overflow() {
        let tape = Tape::<f32>::with_finite_checks();
        let _ = tape.constant(Tensor::vector(vec![100.0])).exp();
    }

    #[test]
    fn flipped_backward_negates_one_rule() {
        let (mut s, ids) = store_with(&[("p", Tensor::vector(vec![1.0, 2.0]))]);
        let tape = Tape::new();
        let loss = tape.param(&s, ids[0]).square().sum();
        with_flipped_backward("square", || tape.backward(loss, &mut s).unwrap());
        assert_eq!(s.grad(ids[0]).data(), &[-2.0, -4.0]);
    }
}
