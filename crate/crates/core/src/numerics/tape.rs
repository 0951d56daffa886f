//! Reverse-mode automatic differentiation over a linear tape.
//!
//! Every operation appends a node holding its forward value and enough
//! context to push gradients to its inputs. Parameters enter the tape by
//! reference; [`Tape::backward`] returns one gradient per registered
//! parameter (zeros where the parameter was not reached).

use std::borrow::Cow;
use std::rc::Rc;

use super::params::{ParamId, ParamStore};
use super::tensor::{mm, mm_t, sigmoid, t_mm, Tensor, TensorError};

pub const LAYER_NORM_EPS: f64 = 1e-5;
/// Gate value below which a whole neighborhood counts as switched off.
pub const GATE_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Param(ParamId),
    MatMul(Var, Var),
    MatMulT(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    MulCol(Var, Var),
    Scale(Var, f64),
    Sigmoid(Var),
    Tanh(Var),
    Relu(Var),
    Softmax(Var),
    MaskedFill(Var, Rc<Vec<bool>>),
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<f64>, rstd: Vec<f64> },
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    SliceCols(Var, usize),
    GatherRows(Var, Rc<Vec<usize>>),
    ScatterRows(Var, Rc<Vec<usize>>),
    RowDot(Var, Var),
    EdgeScores { q: Var, k: Var, rel: Var, edges: Rc<EdgeIndex> },
    EdgeAggregate { v: Var, alpha: Var, src: Rc<Vec<usize>>, dst: Rc<Vec<usize>> },
    SegmentSoftmax { scores: Var, gates: Option<Var>, seg: Rc<Segments>, ratio: Vec<f64>, live: Vec<bool> },
    CrossEntropy { logits: Var, targets: Rc<Vec<Option<u32>>>, probs: Vec<f64>, denom: f64 },
    Sum(Var),
}

struct Node<'p> {
    value: Cow<'p, Tensor>,
    op: Op,
}

/// Edge grouping for segment softmax: `members[s]` lists the edges whose
/// destination segment is `s`.
#[derive(Debug, Clone, PartialEq)]
pub struct Segments {
    pub index: Vec<usize>,
    pub members: Vec<Vec<usize>>,
}

impl Segments {
    pub fn new(index: Vec<usize>, num_segments: usize) -> Self {
        let mut members = vec![Vec::new(); num_segments];
        for (e, &s) in index.iter().enumerate() {
            members[s].push(e);
        }
        Self { index, members }
    }
}

/// Per-edge row indices for [`Tape::edge_scores`]: edge `e` reads query row
/// `query[e]`, key row `src[e]` and relation row `rel[e]`.
#[derive(Debug, Clone, PartialEq)]
pub struct EdgeIndex {
    pub query: Vec<usize>,
    pub src: Vec<usize>,
    pub rel: Vec<usize>,
}

fn check_rows(op: &'static str, index: &[usize], len: usize) -> Result<(), TensorError> {
    match index.iter().find(|&&i| i >= len) {
        Some(&index) => Err(TensorError::IndexOutOfRange { op, index, len }),
        None => Ok(()),
    }
}

/// Gradients aligned with a [`ParamStore`]'s registration order.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn zeros_like(store: &ParamStore) -> Self {
        Self { grads: store.iter().map(|(_, p)| Some(Tensor::zeros(p.tensor.shape()))).collect() }
    }

    /// Gradients with only some entries present; the rest count as missing.
    pub fn from_partial(grads: Vec<Option<Tensor>>) -> Self {
        Self { grads }
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    pub fn get(&self, id: ParamId) -> Option<&Tensor> {
        self.grads.get(id.0).and_then(Option::as_ref)
    }

    pub fn accumulate(&mut self, other: &Gradients) {
        for (a, b) in self.grads.iter_mut().zip(&other.grads) {
            match (a, b) {
                (Some(a), Some(b)) => {
                    for (x, y) in a.data_mut().iter_mut().zip(b.data()) {
                        *x += y;
                    }
                }
                (a @ None, Some(b)) => *a = Some(b.clone()),
                _ => {}
            }
        }
    }

    pub fn global_norm(&self) -> f64 {
        self.grads
            .iter()
            .flatten()
            .flat_map(|t| t.data())
            .map(|x| x * x)
            .sum::<f64>()
            .sqrt()
    }

    pub fn scale(&mut self, factor: f64) {
        for t in self.grads.iter_mut().flatten() {
            t.data_mut().iter_mut().for_each(|x| *x *= factor);
        }
    }
}

fn mismatch(op: &'static str, a: &Tensor, b: &Tensor) -> TensorError {
    TensorError::ShapeMismatch { op, left: a.shape().to_vec(), right: b.shape().to_vec() }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

pub struct Tape<'p> {
    store: &'p ParamStore,
    nodes: Vec<Node<'p>>,
    param_vars: Vec<Option<Var>>,
}

impl<'p> Tape<'p> {
    pub fn new(store: &'p ParamStore) -> Self {
        Self { store, nodes: Vec::new(), param_vars: vec![None; store.len()] }
    }

    pub fn store(&self) -> &'p ParamStore {
        self.store
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        debug_assert!(value.is_finite(), "non-finite value produced by {op:?}");
        self.nodes.push(Node { value: Cow::Owned(value), op });
        Var(self.nodes.len() - 1)
    }

    fn shaped(rows: usize, cols: usize, data: Vec<f64>) -> Tensor {
        Tensor::matrix(rows, cols, data).expect("op output shape")
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.param_vars[id.0] {
            return v;
        }
        self.nodes.push(Node { value: Cow::Borrowed(self.store.tensor(id)), op: Op::Param(id) });
        let v = Var(self.nodes.len() - 1);
        self.param_vars[id.0] = Some(v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.cols() != tb.rows() {
            return Err(mismatch("matmul", ta, tb));
        }
        let (m, k, n) = (ta.rows(), ta.cols(), tb.cols());
        let out = mm(ta.data(), m, k, tb.data(), n);
        Ok(self.push(Self::shaped(m, n, out), Op::MatMul(a, b)))
    }

    /// `a * b^T`
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.cols() != tb.cols() {
            return Err(mismatch("matmul_t", ta, tb));
        }
        let (m, k, n) = (ta.rows(), ta.cols(), tb.rows());
        let out = mm_t(ta.data(), m, k, tb.data(), n);
        Ok(self.push(Self::shaped(m, n, out), Op::MatMulT(a, b)))
    }

    fn zip_same(&mut self, op: &'static str, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Result<Tensor, TensorError> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(mismatch(op, ta, tb));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| f(*x, *y)).collect();
        Ok(Tensor::new(ta.shape().to_vec(), data).expect("same shape"))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let t = self.zip_same("add", a, b, |x, y| x + y)?;
        Ok(self.push(t, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let t = self.zip_same("sub", a, b, |x, y| x - y)?;
        Ok(self.push(t, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let t = self.zip_same("mul", a, b, |x, y| x * y)?;
        Ok(self.push(t, Op::Mul(a, b)))
    }

    /// `a[m,n] + b[1,n]` broadcast over rows.
    pub fn add_row(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (ta, tb) = (self.value(a), self.value(b));
        if tb.rows() != 1 || tb.cols() != ta.cols() {
            return Err(mismatch("add_row", ta, tb));
        }
        let n = ta.cols();
        let data = ta.data().iter().enumerate().map(|(i, x)| x + tb.data()[i % n]).collect();
        Ok(self.push(Self::shaped(ta.rows(), n, data), Op::AddRow(a, b)))
    }

    /// `a[m,n] * c[m,1]` broadcast over columns.
    pub fn mul_col(&mut self, a: Var, c: Var) -> Result<Var, TensorError> {
        let (ta, tc) = (self.value(a), self.value(c));
        if tc.cols() != 1 || tc.rows() != ta.rows() {
            return Err(mismatch("mul_col", ta, tc));
        }
        let n = ta.cols();
        let data = ta.data().iter().enumerate().map(|(i, x)| x * tc.data()[i / n]).collect();
        Ok(self.push(Self::shaped(ta.rows(), n, data), Op::MulCol(a, c)))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let ta = self.value(a);
        let data = ta.data().iter().map(|x| x * s).collect();
        let t = Tensor::new(ta.shape().to_vec(), data).expect("same shape");
        self.push(t, Op::Scale(a, s))
    }

    fn map(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let ta = self.value(a);
        let data = ta.data().iter().map(|&x| f(x)).collect();
        let t = Tensor::new(ta.shape().to_vec(), data).expect("same shape");
        self.push(t, op)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.map(a, sigmoid, Op::Sigmoid(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.map(a, f64::tanh, Op::Tanh(a))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.map(a, |x| x.max(0.0), Op::Relu(a))
    }

    /// Row-wise softmax over the last dimension.
    pub fn softmax(&mut self, a: Var) -> Var {
        let ta = self.value(a);
        let n = ta.cols();
        let mut data = ta.data().to_vec();
        for row in data.chunks_mut(n.max(1)) {
            softmax_in_place(row);
        }
        let t = Tensor::new(ta.shape().to_vec(), data).expect("same shape");
        self.push(t, Op::Softmax(a))
    }

    /// Replace masked entries (`mask[i] == true`) by `value`; they receive no
    /// gradient.
    pub fn masked_fill(&mut self, a: Var, mask: Rc<Vec<bool>>, value: f64) -> Result<Var, TensorError> {
        let ta = self.value(a);
        if mask.len() != ta.numel() {
            return Err(TensorError::ShapeMismatch {
                op: "masked_fill",
                left: ta.shape().to_vec(),
                right: vec![mask.len()],
            });
        }
        let data = ta.data().iter().zip(mask.iter()).map(|(&x, &m)| if m { value } else { x }).collect();
        let t = Tensor::new(ta.shape().to_vec(), data).expect("same shape");
        Ok(self.push(t, Op::MaskedFill(a, mask)))
    }

    /// Row-wise layer normalization with affine `gamma[1,n]`, `beta[1,n]`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var, TensorError> {
        let (tx, tg, tb) = (self.value(x), self.value(gamma), self.value(beta));
        let n = tx.cols();
        if tg.numel() != n || tb.numel() != n {
            return Err(mismatch("layer_norm", tx, tg));
        }
        let rows = tx.rows();
        let mut xhat = vec![0.0; rows * n];
        let mut rstd = vec![0.0; rows];
        let mut out = vec![0.0; rows * n];
        for r in 0..rows {
            let row = tx.row_slice(r);
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let rs = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            rstd[r] = rs;
            for c in 0..n {
                let h = (row[c] - mean) * rs;
                xhat[r * n + c] = h;
                out[r * n + c] = h * tg.data()[c] + tb.data()[c];
            }
        }
        Ok(self.push(Self::shaped(rows, n, out), Op::LayerNorm { x, gamma, beta, xhat, rstd }))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var, TensorError> {
        let cols = self.value(parts[0]).cols();
        let mut data = Vec::new();
        for &p in parts {
            let t = self.value(p);
            if t.cols() != cols {
                return Err(mismatch("concat_rows", self.value(parts[0]), t));
            }
            data.extend_from_slice(t.data());
        }
        let rows = data.len() / cols.max(1);
        Ok(self.push(Self::shaped(rows, cols, data), Op::ConcatRows(parts.to_vec())))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var, TensorError> {
        let rows = self.value(parts[0]).rows();
        let mut total = 0;
        for &p in parts {
            let t = self.value(p);
            if t.rows() != rows {
                return Err(mismatch("concat_cols", self.value(parts[0]), t));
            }
            total += t.cols();
        }
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for &p in parts {
                data.extend_from_slice(self.value(p).row_slice(r));
            }
        }
        Ok(self.push(Self::shaped(rows, total, data), Op::ConcatCols(parts.to_vec())))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var, TensorError> {
        let ta = self.value(a);
        if start + len > ta.cols() {
            return Err(TensorError::ShapeMismatch {
                op: "slice_cols",
                left: ta.shape().to_vec(),
                right: vec![start, len],
            });
        }
        let rows = ta.rows();
        let mut data = Vec::with_capacity(rows * len);
        for r in 0..rows {
            data.extend_from_slice(&ta.row_slice(r)[start..start + len]);
        }
        Ok(self.push(Self::shaped(rows, len, data), Op::SliceCols(a, start)))
    }

    /// `out[i] = a[index[i]]`
    pub fn gather_rows(&mut self, a: Var, index: Rc<Vec<usize>>) -> Result<Var, TensorError> {
        let ta = self.value(a);
        let n = ta.cols();
        let mut data = Vec::with_capacity(index.len() * n);
        for &i in index.iter() {
            if i >= ta.rows() {
                return Err(TensorError::IndexOutOfRange { op: "gather_rows", index: i, len: ta.rows() });
            }
            data.extend_from_slice(ta.row_slice(i));
        }
        Ok(self.push(Self::shaped(index.len(), n, data), Op::GatherRows(a, index)))
    }

    /// `out[index[i]] += a[i]`, with `out` having `rows` rows.
    pub fn scatter_rows(&mut self, a: Var, index: Rc<Vec<usize>>, rows: usize) -> Result<Var, TensorError> {
        let ta = self.value(a);
        if index.len() != ta.rows() {
            return Err(TensorError::ShapeMismatch {
                op: "scatter_rows",
                left: ta.shape().to_vec(),
                right: vec![index.len()],
            });
        }
        let n = ta.cols();
        let mut data = vec![0.0; rows * n];
        for (e, &i) in index.iter().enumerate() {
            if i >= rows {
                return Err(TensorError::IndexOutOfRange { op: "scatter_rows", index: i, len: rows });
            }
            add_into(&mut data[i * n..(i + 1) * n], ta.row_slice(e));
        }
        Ok(self.push(Self::shaped(rows, n, data), Op::ScatterRows(a, index)))
    }

    /// Per-row dot product, `[m,n] x [m,n] -> [m,1]`.
    pub fn row_dot(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(mismatch("row_dot", ta, tb));
        }
        let data: Vec<f64> = (0..ta.rows())
            .map(|r| ta.row_slice(r).iter().zip(tb.row_slice(r)).map(|(x, y)| x * y).sum())
            .collect();
        Ok(self.push(Self::shaped(ta.rows(), 1, data), Op::RowDot(a, b)))
    }

    /// `s_e = q[query_e] . (k[src_e] + rel[rel_e])`, as `[E, 1]`. Equal, bit
    /// for bit, to gathering the three row sets and taking `row_dot(q, k + rel)`,
    /// without materializing `[E, m]` intermediates.
    pub fn edge_scores(&mut self, q: Var, k: Var, rel: Var, edges: Rc<EdgeIndex>) -> Result<Var, TensorError> {
        let (tq, tk, tr) = (self.value(q), self.value(k), self.value(rel));
        let m = tk.cols();
        if tq.cols() != m || tr.cols() != m || edges.query.len() != edges.src.len() || edges.rel.len() != edges.src.len() {
            return Err(mismatch("edge_scores", tq, tk));
        }
        check_rows("edge_scores", &edges.query, tq.rows())?;
        check_rows("edge_scores", &edges.src, tk.rows())?;
        check_rows("edge_scores", &edges.rel, tr.rows())?;
        let data: Vec<f64> = (0..edges.src.len())
            .map(|e| {
                let (qr, kr, rr) = (tq.row_slice(edges.query[e]), tk.row_slice(edges.src[e]), tr.row_slice(edges.rel[e]));
                qr.iter().zip(kr.iter().zip(rr)).map(|(x, (a, b))| x * (a + b)).sum()
            })
            .collect();
        let rows = data.len();
        Ok(self.push(Self::shaped(rows, 1, data), Op::EdgeScores { q, k, rel, edges }))
    }

    /// `out[dst_e] += alpha_e * v[src_e]` over `rows` output rows. Equal, bit
    /// for bit, to `scatter_rows(mul_col(gather_rows(v, src), alpha), dst)`.
    pub fn edge_aggregate(
        &mut self,
        v: Var,
        alpha: Var,
        src: Rc<Vec<usize>>,
        dst: Rc<Vec<usize>>,
        rows: usize,
    ) -> Result<Var, TensorError> {
        let (tv, ta) = (self.value(v), self.value(alpha));
        if ta.cols() != 1 || ta.rows() != src.len() || dst.len() != src.len() {
            return Err(mismatch("edge_aggregate", tv, ta));
        }
        check_rows("edge_aggregate", &src, tv.rows())?;
        check_rows("edge_aggregate", &dst, rows)?;
        let n = tv.cols();
        let mut data = vec![0.0; rows * n];
        for (e, (&s, &d)) in src.iter().zip(dst.iter()).enumerate() {
            let a = ta.data()[e];
            for (o, x) in data[d * n..(d + 1) * n].iter_mut().zip(tv.row_slice(s)) {
                *o += x * a;
            }
        }
        Ok(self.push(Self::shaped(rows, n, data), Op::EdgeAggregate { v, alpha, src, dst }))
    }

    /// Softmax of edge scores within each destination segment, optionally
    /// weighted by per-edge gates: `alpha_e = g_e exp(s_e) / sum g exp(s)`.
    ///
    /// Weights are formed in log space (`s + ln g`) so a gate of exactly zero
    /// removes its edge while every other edge keeps a proper distribution.
    /// A segment whose largest gate is below [`GATE_FLOOR`] uses gates clamped
    /// to the floor (those gates get no gradient).
    pub fn segment_softmax(&mut self, scores: Var, gates: Option<Var>, seg: Rc<Segments>) -> Result<Var, TensorError> {
        let ts = self.value(scores);
        let e_count = seg.index.len();
        if ts.numel() != e_count || ts.cols() != 1 {
            return Err(TensorError::ShapeMismatch {
                op: "segment_softmax",
                left: ts.shape().to_vec(),
                right: vec![e_count, 1],
            });
        }
        let tg = match gates {
            Some(g) => {
                let tg = self.value(g);
                if tg.shape() != ts.shape() {
                    return Err(mismatch("segment_softmax", ts, tg));
                }
                Some(tg.data())
            }
            None => None,
        };
        let s = ts.data();
        let mut alpha = vec![0.0; e_count];
        let mut ratio = vec![0.0; e_count];
        let mut live = vec![true; e_count];
        for members in &seg.members {
            if members.is_empty() {
                continue;
            }
            let gate_of = |e: usize| tg.map_or(1.0, |g| g[e]);
            let max_gate = members.iter().map(|&e| gate_of(e)).fold(f64::NEG_INFINITY, f64::max);
            let clamp = max_gate < GATE_FLOOR;
            let eff = |e: usize| if clamp { gate_of(e).max(GATE_FLOOR) } else { gate_of(e) };
            let key = |e: usize| s[e] + eff(e).ln();
            let m = members.iter().map(|&e| key(e)).fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for &e in members {
                let w = (key(e) - m).exp();
                alpha[e] = w;
                z += w;
            }
            for &e in members {
                alpha[e] /= z;
                ratio[e] = (s[e] - m).exp() / z;
                live[e] = !(clamp && gate_of(e) < GATE_FLOOR);
            }
        }
        let t = Self::shaped(e_count, 1, alpha);
        Ok(self.push(t, Op::SegmentSoftmax { scores, gates, seg, ratio, live }))
    }

    /// Sum of `-log softmax(logits)[t, target_t]` over rows with a target,
    /// divided by `denom`.
    pub fn cross_entropy(&mut self, logits: Var, targets: Rc<Vec<Option<u32>>>, denom: f64) -> Result<Var, TensorError> {
        let tl = self.value(logits);
        let v = tl.cols();
        if targets.len() != tl.rows() {
            return Err(TensorError::ShapeMismatch {
                op: "cross_entropy",
                left: tl.shape().to_vec(),
                right: vec![targets.len()],
            });
        }
        let mut probs = tl.data().to_vec();
        let mut loss = 0.0;
        for (r, t) in targets.iter().enumerate() {
            let row = &mut probs[r * v..(r + 1) * v];
            let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + row.iter().map(|x| (x - m).exp()).sum::<f64>().ln();
            if let Some(t) = *t {
                let t = t as usize;
                if t >= v {
                    return Err(TensorError::IndexOutOfRange { op: "cross_entropy", index: t, len: v });
                }
                loss += lse - row[t];
            }
            for x in row.iter_mut() {
                *x = (*x - lse).exp();
            }
        }
        let t = Tensor::scalar(loss / denom);
        Ok(self.push(t, Op::CrossEntropy { logits, targets, probs, denom }))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(a))
    }

    /// Gradients of a scalar node with respect to every parameter of the store.
    pub fn backward(&self, loss: Var) -> Result<Gradients, TensorError> {
        let lt = self.value(loss);
        if lt.numel() != 1 {
            return Err(TensorError::NonScalarLoss { shape: lt.shape().to_vec() });
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);
        let mut out = Gradients::zeros_like(self.store);

        fn acc(grads: &mut [Option<Vec<f64>>], v: Var, len: usize) -> &mut Vec<f64> {
            grads[v.0].get_or_insert_with(|| vec![0.0; len])
        }

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            let y: &Tensor = &node.value;
            let numel = |v: Var| self.value(v).numel();
            match &node.op {
                Op::Leaf => {}
                Op::Param(id) => {
                    if let Some(t) = out.grads[id.0].as_mut() {
                        add_into(t.data_mut(), &g);
                    }
                }
                Op::MatMul(a, b) => {
                    let (ta, tb) = (self.value(*a), self.value(*b));
                    let (m, k, n) = (ta.rows(), ta.cols(), tb.cols());
                    let da = mm_t(&g, m, n, tb.data(), k);
                    add_into(acc(&mut grads, *a, m * k), &da);
                    let db = t_mm(ta.data(), m, k, &g, n);
                    add_into(acc(&mut grads, *b, k * n), &db);
                }
                Op::MatMulT(a, b) => {
                    let (ta, tb) = (self.value(*a), self.value(*b));
                    let (m, k, n) = (ta.rows(), ta.cols(), tb.rows());
                    let da = mm(&g, m, n, tb.data(), k);
                    add_into(acc(&mut grads, *a, m * k), &da);
                    let db = t_mm(&g, m, n, ta.data(), k);
                    add_into(acc(&mut grads, *b, n * k), &db);
                }
                Op::Add(a, b) => {
                    add_into(acc(&mut grads, *a, g.len()), &g);
                    add_into(acc(&mut grads, *b, g.len()), &g);
                }
                Op::Sub(a, b) => {
                    add_into(acc(&mut grads, *a, g.len()), &g);
                    let gb = acc(&mut grads, *b, g.len());
                    for (d, s) in gb.iter_mut().zip(&g) {
                        *d -= s;
                    }
                }
                Op::Mul(a, b) => {
                    let (ta, tb) = (self.value(*a).data(), self.value(*b).data());
                    let ga = acc(&mut grads, *a, g.len());
                    for ((d, gi), bi) in ga.iter_mut().zip(&g).zip(tb) {
                        *d += gi * bi;
                    }
                    let gb = acc(&mut grads, *b, g.len());
                    for ((d, gi), ai) in gb.iter_mut().zip(&g).zip(ta) {
                        *d += gi * ai;
                    }
                }
                Op::AddRow(a, b) => {
                    add_into(acc(&mut grads, *a, g.len()), &g);
                    let n = numel(*b);
                    let gb = acc(&mut grads, *b, n);
                    for (i, gi) in g.iter().enumerate() {
                        gb[i % n] += gi;
                    }
                }
                Op::MulCol(a, c) => {
                    let ta = self.value(*a);
                    let tc = self.value(*c).data();
                    let n = ta.cols();
                    let ga = acc(&mut grads, *a, g.len());
                    for (i, gi) in g.iter().enumerate() {
                        ga[i] += gi * tc[i / n];
                    }
                    let gc = acc(&mut grads, *c, tc.len());
                    for (i, gi) in g.iter().enumerate() {
                        gc[i / n] += gi * ta.data()[i];
                    }
                }
                Op::Scale(a, s) => {
                    let ga = acc(&mut grads, *a, g.len());
                    for (d, gi) in ga.iter_mut().zip(&g) {
                        *d += gi * s;
                    }
                }
                Op::Sigmoid(a) => {
                    let ga = acc(&mut grads, *a, g.len());
                    for ((d, gi), yi) in ga.iter_mut().zip(&g).zip(y.data()) {
                        *d += gi * yi * (1.0 - yi);
                    }
                }
                Op::Tanh(a) => {
                    let ga = acc(&mut grads, *a, g.len());
                    for ((d, gi), yi) in ga.iter_mut().zip(&g).zip(y.data()) {
                        *d += gi * (1.0 - yi * yi);
                    }
                }
                Op::Relu(a) => {
                    let x = self.value(*a).data();
                    let ga = acc(&mut grads, *a, g.len());
                    for ((d, gi), xi) in ga.iter_mut().zip(&g).zip(x) {
                        if *xi > 0.0 {
                            *d += gi;
                        }
                    }
                }
                Op::Softmax(a) => {
                    let n = y.cols().max(1);
                    let ga = acc(&mut grads, *a, g.len());
                    for ((dr, gr), yr) in ga.chunks_mut(n).zip(g.chunks(n)).zip(y.data().chunks(n)) {
                        let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                        for ((d, gi), yi) in dr.iter_mut().zip(gr).zip(yr) {
                            *d += yi * (gi - dot);
                        }
                    }
                }
                Op::MaskedFill(a, mask) => {
                    let ga = acc(&mut grads, *a, g.len());
                    for ((d, gi), m) in ga.iter_mut().zip(&g).zip(mask.iter()) {
                        if !m {
                            *d += gi;
                        }
                    }
                }
                Op::LayerNorm { x, gamma, beta, xhat, rstd } => {
                    let n = y.cols();
                    let tg = self.value(*gamma).data();
                    let mut dgamma = vec![0.0; n];
                    let mut dbeta = vec![0.0; n];
                    let mut dx = vec![0.0; g.len()];
                    for (r, rs) in rstd.iter().enumerate() {
                        let gr = &g[r * n..(r + 1) * n];
                        let hr = &xhat[r * n..(r + 1) * n];
                        let mut mean_dh = 0.0;
                        let mut mean_dh_h = 0.0;
                        for c in 0..n {
                            dgamma[c] += gr[c] * hr[c];
                            dbeta[c] += gr[c];
                            let dh = gr[c] * tg[c];
                            mean_dh += dh;
                            mean_dh_h += dh * hr[c];
                        }
                        mean_dh /= n as f64;
                        mean_dh_h /= n as f64;
                        for c in 0..n {
                            let dh = gr[c] * tg[c];
                            dx[r * n + c] = rs * (dh - mean_dh - hr[c] * mean_dh_h);
                        }
                    }
                    add_into(acc(&mut grads, *x, dx.len()), &dx);
                    add_into(acc(&mut grads, *gamma, n), &dgamma);
                    add_into(acc(&mut grads, *beta, n), &dbeta);
                }
                Op::ConcatRows(parts) => {
                    let mut off = 0;
                    for &p in parts {
                        let len = numel(p);
                        add_into(acc(&mut grads, p, len), &g[off..off + len]);
                        off += len;
                    }
                }
                Op::ConcatCols(parts) => {
                    let total = y.cols();
                    let rows = y.rows();
                    let mut col = 0;
                    for &p in parts {
                        let w = self.value(p).cols();
                        let gp = acc(&mut grads, p, rows * w);
                        for r in 0..rows {
                            add_into(&mut gp[r * w..(r + 1) * w], &g[r * total + col..r * total + col + w]);
                        }
                        col += w;
                    }
                }
                Op::SliceCols(a, start) => {
                    let ta = self.value(*a);
                    let (rows, n) = (ta.rows(), ta.cols());
                    let w = y.cols();
                    let ga = acc(&mut grads, *a, rows * n);
                    for r in 0..rows {
                        add_into(&mut ga[r * n + start..r * n + start + w], &g[r * w..(r + 1) * w]);
                    }
                }
                Op::GatherRows(a, index) => {
                    let n = y.cols();
                    let len = numel(*a);
                    let ga = acc(&mut grads, *a, len);
                    for (r, &i) in index.iter().enumerate() {
                        add_into(&mut ga[i * n..(i + 1) * n], &g[r * n..(r + 1) * n]);
                    }
                }
                Op::ScatterRows(a, index) => {
                    let n = y.cols();
                    let len = numel(*a);
                    let ga = acc(&mut grads, *a, len);
                    for (e, &i) in index.iter().enumerate() {
                        add_into(&mut ga[e * n..(e + 1) * n], &g[i * n..(i + 1) * n]);
                    }
                }
                Op::RowDot(a, b) => {
                    let (ta, tb) = (self.value(*a), self.value(*b));
                    let n = ta.cols();
                    let ga = acc(&mut grads, *a, ta.numel());
                    for (r, gi) in g.iter().enumerate() {
                        for c in 0..n {
                            ga[r * n + c] += gi * tb.data()[r * n + c];
                        }
                    }
                    let gb = acc(&mut grads, *b, tb.numel());
                    for (r, gi) in g.iter().enumerate() {
                        for c in 0..n {
                            gb[r * n + c] += gi * ta.data()[r * n + c];
                        }
                    }
                }
                Op::EdgeScores { q, k, rel, edges } => {
                    let (tq, tk, tr) = (self.value(*q), self.value(*k), self.value(*rel));
                    let m = tk.cols();
                    let mut sum = vec![0.0; m];
                    {
                        let gq = acc(&mut grads, *q, tq.numel());
                        for (e, ge) in g.iter().enumerate() {
                            let (kr, rr) = (tk.row_slice(edges.src[e]), tr.row_slice(edges.rel[e]));
                            for ((s, a), b) in sum.iter_mut().zip(kr).zip(rr) {
                                *s = a + b;
                            }
                            let row = edges.query[e] * m;
                            for (d, s) in gq[row..row + m].iter_mut().zip(&sum) {
                                *d += ge * s;
                            }
                        }
                    }
                    for (target, index, len) in [(*k, &edges.src, tk.numel()), (*rel, &edges.rel, tr.numel())] {
                        let gt = acc(&mut grads, target, len);
                        for (e, ge) in g.iter().enumerate() {
                            let qr = tq.row_slice(edges.query[e]);
                            let row = index[e] * m;
                            for (d, x) in gt[row..row + m].iter_mut().zip(qr) {
                                *d += ge * x;
                            }
                        }
                    }
                }
                Op::EdgeAggregate { v, alpha, src, dst } => {
                    let (tv, ta) = (self.value(*v), self.value(*alpha));
                    let n = tv.cols();
                    let gv = acc(&mut grads, *v, tv.numel());
                    for (e, (&s, &d)) in src.iter().zip(dst.iter()).enumerate() {
                        let a = ta.data()[e];
                        for (o, x) in gv[s * n..(s + 1) * n].iter_mut().zip(&g[d * n..(d + 1) * n]) {
                            *o += x * a;
                        }
                    }
                    let ga = acc(&mut grads, *alpha, ta.numel());
                    for (e, (&s, &d)) in src.iter().zip(dst.iter()).enumerate() {
                        for (x, y) in g[d * n..(d + 1) * n].iter().zip(tv.row_slice(s)) {
                            ga[e] += x * y;
                        }
                    }
                }
                Op::SegmentSoftmax { scores, gates, seg, ratio, live } => {
                    let alpha = y.data();
                    let mut ds = vec![0.0; alpha.len()];
                    let mut dg = vec![0.0; alpha.len()];
                    for members in &seg.members {
                        let c: f64 = members.iter().map(|&e| alpha[e] * g[e]).sum();
                        for &e in members {
                            ds[e] = alpha[e] * (g[e] - c);
                            if live[e] {
                                dg[e] = ratio[e] * (g[e] - c);
                            }
                        }
                    }
                    add_into(acc(&mut grads, *scores, ds.len()), &ds);
                    if let Some(gv) = gates {
                        add_into(acc(&mut grads, *gv, dg.len()), &dg);
                    }
                }
                Op::CrossEntropy { logits, targets, probs, denom } => {
                    let v = self.value(*logits).cols();
                    let scale = g[0] / denom;
                    let gl = acc(&mut grads, *logits, probs.len());
                    for (r, t) in targets.iter().enumerate() {
                        if let Some(t) = *t {
                            for c in 0..v {
                                gl[r * v + c] += scale * probs[r * v + c];
                            }
                            gl[r * v + t as usize] -= scale;
                        }
                    }
                }
                Op::Sum(a) => {
                    let len = numel(*a);
                    let ga = acc(&mut grads, *a, len);
                    for d in ga.iter_mut() {
                        *d += g[0];
                    }
                }
            }
        }
        Ok(out)
    }
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut z = 0.0;
    for x in row.iter_mut() {
        *x = (*x - m).exp();
        z += *x;
    }
    for x in row.iter_mut() {
        *x /= z;
    }
}
