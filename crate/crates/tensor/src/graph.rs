//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Graph`] records every op applied during one forward pass. Parameters are
//! borrowed from a [`ParamStore`] rather than copied; [`Graph::backward`] consumes
//! the tape and returns the gradient of a scalar root with respect to every
//! trainable parameter that was reached.

use std::collections::HashMap;

use rayon::prelude::*;

use crate::attention;
use crate::error::{Result, TensorError};
use crate::params::{Gradients, ParamId, ParamStore};
use crate::real::{gemm, Real, View};
use crate::tensor::Tensor;

/// Handle to a node on the tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// First op that produced a non-finite value.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Fault {
    pub op: &'static str,
    pub node: usize,
}

enum Slot<'p, F> {
    Owned(Tensor<F>),
    Borrowed(&'p Tensor<F>),
}

impl<F> Slot<'_, F> {
    fn get(&self) -> &Tensor<F> {
        match self {
            Slot::Owned(t) => t,
            Slot::Borrowed(t) => t,
        }
    }
}

enum Op<F> {
    Leaf,
    Param(ParamId),
    ParamBlock { id: ParamId, offset: usize },
    MatMul { a: Var, b: Var, trans_b: bool },
    Add { a: Var, b: Var },
    AddBias { x: Var, bias: Var },
    Mul { a: Var, b: Var },
    Scale { x: Var, c: F },
    Relu { x: Var },
    MulRows { x: Var, g: Var },
    LayerNorm { x: Var, gain: Var, bias: Var, stats: Vec<(F, F)> },
    Embedding { table: Var, ids: Vec<usize> },
    GatherRows { x: Var, idx: Vec<usize> },
    ScatterRows { parts: Vec<(Var, Vec<usize>)> },
    ConcatCols { parts: Vec<Var> },
    SoftmaxRows { x: Var },
    Pick { x: Var, cols: Vec<usize> },
    Sum { x: Var },
    WeightedSum { x: Var, w: Vec<F> },
    CrossEntropy { logits: Var, targets: Vec<usize>, probs: Vec<F> },
    CausalAttention { qkv: Var, batch: usize, seq: usize, heads: usize, probs: Vec<F> },
}

struct Node<'p, F> {
    value: Slot<'p, F>,
    op: Op<F>,
    needs_grad: bool,
}

pub struct Graph<'p, F: Real> {
    store: &'p ParamStore<F>,
    nodes: Vec<Node<'p, F>>,
    param_vars: Vec<Option<Var>>,
    block_vars: HashMap<(ParamId, usize), Var>,
    grad_enabled: bool,
    fault: Option<Fault>,
}

impl<'p, F: Real> Graph<'p, F> {
    /// Tape that records gradients for trainable parameters of `store`.
    pub fn new(store: &'p ParamStore<F>) -> Self {
        Self {
            store,
            nodes: Vec::new(),
            param_vars: vec![None; store.len()],
            block_vars: HashMap::new(),
            grad_enabled: true,
            fault: None,
        }
    }

    /// Tape for evaluation only: no parameter requires a gradient.
    pub fn inference(store: &'p ParamStore<F>) -> Self {
        Self { grad_enabled: false, ..Self::new(store) }
    }

    pub fn value(&self, v: Var) -> &Tensor<F> {
        self.nodes[v.0].value.get()
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.value(v).shape()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn fault(&self) -> Option<&Fault> {
        self.fault.as_ref()
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Gradient buffer for `v`. Parameter leaves write straight into their
    /// output gradient instead of an intermediate node buffer.
    fn param_grad<'a>(&self, v: Var, len: usize, grads: &'a mut [Option<Vec<F>>], out: &'a mut [Option<Tensor<F>>]) -> &'a mut [F] {
        let (id, offset) = match self.nodes[v.0].op {
            Op::Param(id) => (id, 0),
            Op::ParamBlock { id, offset } => (id, offset),
            _ => return grad_buf(grads, v, len),
        };
        let slot = out[id.0].get_or_insert_with(|| Tensor::zeros(self.store.value(id).shape()));
        &mut slot.data_mut()[offset..offset + len]
    }

    fn push(&mut self, name: &'static str, value: Tensor<F>, op: Op<F>, needs_grad: bool) -> Var {
        let id = self.nodes.len();
        if self.fault.is_none() && !value.all_finite() {
            self.fault = Some(Fault { op: name, node: id });
        }
        self.nodes.push(Node { value: Slot::Owned(value), op, needs_grad });
        Var(id)
    }

    /// Constant input that never receives a gradient.
    pub fn constant(&mut self, t: Tensor<F>) -> Var {
        self.push("constant", t, Op::Leaf, false)
    }

    /// Leaf for a stored parameter; repeated calls return the same node.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.param_vars[id.0] {
            return v;
        }
        let needs_grad = self.grad_enabled && self.store.is_trainable(id);
        let var = Var(self.nodes.len());
        self.nodes.push(Node { value: Slot::Borrowed(self.store.value(id)), op: Op::Param(id), needs_grad });
        self.param_vars[id.0] = Some(var);
        var
    }

    /// Leaf for block `index` of a parameter whose data is a stack of equally
    /// sized blocks of shape `block_shape` (e.g. one expert out of `[K, d, D]`).
    pub fn param_block(&mut self, id: ParamId, index: usize, block_shape: &[usize]) -> Result<Var> {
        if let Some(&v) = self.block_vars.get(&(id, index)) {
            return Ok(v);
        }
        let full = self.store.value(id);
        let size: usize = block_shape.iter().product();
        let count = if size == 0 { 0 } else { full.numel() / size };
        if size == 0 || full.numel() % size != 0 {
            return Err(TensorError::ShapeMismatch { op: "param_block", left: full.shape().to_vec(), right: block_shape.to_vec() });
        }
        if index >= count {
            return Err(TensorError::IndexOutOfRange { op: "param_block", index, bound: count });
        }
        let offset = index * size;
        let t = Tensor::new(block_shape, full.data()[offset..offset + size].to_vec())?;
        let needs_grad = self.grad_enabled && self.store.is_trainable(id);
        let v = self.push("param_block", t, Op::ParamBlock { id, offset }, needs_grad);
        self.block_vars.insert((id, index), v);
        Ok(v)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, false)
    }

    /// `a · bᵀ`.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, true)
    }

    fn matmul_impl(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (n, k) = ta.dims2();
        let (br, bc) = tb.dims2();
        let (kb, m) = if trans_b { (bc, br) } else { (br, bc) };
        if ta.shape().len() != 2 || tb.shape().len() != 2 || k != kb {
            return Err(TensorError::ShapeMismatch {
                op: if trans_b { "matmul_t" } else { "matmul" },
                left: ta.shape().to_vec(),
                right: tb.shape().to_vec(),
            });
        }
        let mut out = vec![F::zero(); n * m];
        let av = View::rm(ta.data(), 0, n, k, k);
        let bv = if trans_b { View::rm(tb.data(), 0, m, k, k).t() } else { View::rm(tb.data(), 0, k, m, m) };
        gemm(av, bv, &mut out, m, false);
        let t = Tensor::new(&[n, m], out)?;
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push("matmul", t, Op::MatMul { a, b, trans_b }, ng))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(TensorError::ShapeMismatch { op: "add", left: ta.shape().to_vec(), right: tb.shape().to_vec() });
        }
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| x + y).collect();
        let t = Tensor::new(ta.shape(), data)?;
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push("add", t, Op::Add { a, b }, ng))
    }

    /// Adds a length-`c` bias to every row of an `n x c` matrix.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (tx, tb) = (self.value(x), self.value(bias));
        let (_, c) = tx.dims2();
        if tb.numel() != c || tx.shape().len() != 2 {
            return Err(TensorError::ShapeMismatch { op: "add_bias", left: tx.shape().to_vec(), right: tb.shape().to_vec() });
        }
        let mut data = tx.data().to_vec();
        if c > 0 {
            for row in data.chunks_exact_mut(c) {
                for (o, &b) in row.iter_mut().zip(tb.data()) {
                    *o += b;
                }
            }
        }
        let t = Tensor::new(tx.shape(), data)?;
        let ng = self.needs(x) || self.needs(bias);
        Ok(self.push("add_bias", t, Op::AddBias { x, bias }, ng))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(TensorError::ShapeMismatch { op: "mul", left: ta.shape().to_vec(), right: tb.shape().to_vec() });
        }
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| x * y).collect();
        let t = Tensor::new(ta.shape(), data)?;
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push("mul", t, Op::Mul { a, b }, ng))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let c = F::from_f64(c);
        let t = self.value(x).map(|v| v * c);
        let ng = self.needs(x);
        self.push("scale", t, Op::Scale { x, c }, ng)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let t = self.value(x).map(|v| if v > F::zero() { v } else { F::zero() });
        let ng = self.needs(x);
        self.push("relu", t, Op::Relu { x }, ng)
    }

    /// Scales row `i` of `x` (`n x c`) by `g[i]`, where `g` holds `n` values.
    pub fn mul_rows(&mut self, x: Var, g: Var) -> Result<Var> {
        let (tx, tg) = (self.value(x), self.value(g));
        let (n, c) = tx.dims2();
        if tg.numel() != n || tx.shape().len() != 2 {
            return Err(TensorError::ShapeMismatch { op: "mul_rows", left: tx.shape().to_vec(), right: tg.shape().to_vec() });
        }
        let mut data = tx.data().to_vec();
        if c > 0 {
            for (row, &s) in data.chunks_exact_mut(c).zip(tg.data()) {
                row.iter_mut().for_each(|v| *v *= s);
            }
        }
        let t = Tensor::new(tx.shape(), data)?;
        let ng = self.needs(x) || self.needs(g);
        Ok(self.push("mul_rows", t, Op::MulRows { x, g }, ng))
    }

    /// Row-wise layer normalization followed by an affine map.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let (tx, tg, tb) = (self.value(x), self.value(gain), self.value(bias));
        let (n, c) = tx.dims2();
        if tg.numel() != c || tb.numel() != c || c == 0 {
            return Err(TensorError::ShapeMismatch { op: "layer_norm", left: tx.shape().to_vec(), right: tg.shape().to_vec() });
        }
        let eps = F::from_f64(eps);
        let cf = F::from_f64(c as f64);
        let mut out = vec![F::zero(); n * c];
        let mut stats = Vec::with_capacity(n);
        for (row, o) in tx.data().chunks_exact(c).zip(out.chunks_exact_mut(c)) {
            let mean = row.iter().copied().sum::<F>() / cf;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<F>() / cf;
            let rstd = F::one() / (var + eps).sqrt();
            for j in 0..c {
                o[j] = (row[j] - mean) * rstd * tg.data()[j] + tb.data()[j];
            }
            stats.push((mean, rstd));
        }
        let t = Tensor::new(tx.shape(), out)?;
        let ng = self.needs(x) || self.needs(gain) || self.needs(bias);
        Ok(self.push("layer_norm", t, Op::LayerNorm { x, gain, bias, stats }, ng))
    }

    /// Gathers rows of `table` (`V x d`) by id.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let tt = self.value(table);
        let (v, d) = tt.dims2();
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= v {
                return Err(TensorError::IndexOutOfRange { op: "embedding", index: id, bound: v });
            }
            out.extend_from_slice(tt.row(id));
        }
        let t = Tensor::new(&[ids.len(), d], out)?;
        let ng = self.needs(table);
        Ok(self.push("embedding", t, Op::Embedding { table, ids: ids.to_vec() }, ng))
    }

    /// Selects rows `idx` of `x`.
    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let tx = self.value(x);
        let (n, c) = tx.dims2();
        let mut out = Vec::with_capacity(idx.len() * c);
        for &i in idx {
            if i >= n {
                return Err(TensorError::IndexOutOfRange { op: "gather_rows", index: i, bound: n });
            }
            out.extend_from_slice(tx.row(i));
        }
        let t = Tensor::new(&[idx.len(), c], out)?;
        let ng = self.needs(x);
        Ok(self.push("gather_rows", t, Op::GatherRows { x, idx: idx.to_vec() }, ng))
    }

    /// Builds an `n_rows x c` matrix where row `idx[r]` receives row `r` of the
    /// corresponding part. Rows hit by no part are zero; overlapping rows add.
    pub fn scatter_rows(&mut self, parts: Vec<(Var, Vec<usize>)>, n_rows: usize, cols: usize) -> Result<Var> {
        let mut out = vec![F::zero(); n_rows * cols];
        let mut ng = false;
        for (v, idx) in &parts {
            let tv = self.value(*v);
            let (r, c) = tv.dims2();
            if c != cols || r != idx.len() {
                return Err(TensorError::ShapeMismatch { op: "scatter_rows", left: tv.shape().to_vec(), right: vec![idx.len(), cols] });
            }
            for (src, &dst) in idx.iter().enumerate() {
                if dst >= n_rows {
                    return Err(TensorError::IndexOutOfRange { op: "scatter_rows", index: dst, bound: n_rows });
                }
                for (o, &s) in out[dst * cols..(dst + 1) * cols].iter_mut().zip(tv.row(src)) {
                    *o += s;
                }
            }
            ng |= self.needs(*v);
        }
        let t = Tensor::new(&[n_rows, cols], out)?;
        Ok(self.push("scatter_rows", t, Op::ScatterRows { parts }, ng))
    }

    /// Concatenates matrices with equal row counts along columns.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let n = parts.first().map(|&p| self.value(p).dims2().0).unwrap_or(0);
        let widths: Vec<usize> = parts.iter().map(|&p| self.value(p).dims2().1).collect();
        for &p in parts {
            if self.value(p).dims2().0 != n {
                return Err(TensorError::ShapeMismatch {
                    op: "concat_cols",
                    left: self.value(parts[0]).shape().to_vec(),
                    right: self.value(p).shape().to_vec(),
                });
            }
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(n * total);
        for r in 0..n {
            for &p in parts {
                out.extend_from_slice(self.value(p).row(r));
            }
        }
        let t = Tensor::new(&[n, total], out)?;
        let ng = parts.iter().any(|&p| self.needs(p));
        Ok(self.push("concat_cols", t, Op::ConcatCols { parts: parts.to_vec() }, ng))
    }

    pub fn softmax_rows(&mut self, x: Var) -> Var {
        let tx = self.value(x);
        let (_, c) = tx.dims2();
        let mut out = tx.data().to_vec();
        if c > 0 {
            out.chunks_exact_mut(c).for_each(softmax_in_place);
        }
        let t = Tensor::new(tx.shape(), out).expect("same shape");
        let ng = self.needs(x);
        self.push("softmax_rows", t, Op::SoftmaxRows { x }, ng)
    }

    /// `out[i] = x[i, cols[i]]`, shaped `n x 1`.
    pub fn pick(&mut self, x: Var, cols: &[usize]) -> Result<Var> {
        let tx = self.value(x);
        let (n, c) = tx.dims2();
        if cols.len() != n {
            return Err(TensorError::ShapeMismatch { op: "pick", left: tx.shape().to_vec(), right: vec![cols.len()] });
        }
        let mut out = Vec::with_capacity(n);
        for (r, &j) in cols.iter().enumerate() {
            if j >= c {
                return Err(TensorError::IndexOutOfRange { op: "pick", index: j, bound: c });
            }
            out.push(tx.data()[r * c + j]);
        }
        let t = Tensor::new(&[n, 1], out)?;
        let ng = self.needs(x);
        Ok(self.push("pick", t, Op::Pick { x, cols: cols.to_vec() }, ng))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().copied().sum::<F>();
        let ng = self.needs(x);
        self.push("sum", Tensor::scalar(s), Op::Sum { x }, ng)
    }

    /// `Σ x ⊙ w` for a constant weight tensor of the same shape.
    pub fn weighted_sum(&mut self, x: Var, w: Tensor<F>) -> Result<Var> {
        let tx = self.value(x);
        if tx.numel() != w.numel() {
            return Err(TensorError::ShapeMismatch { op: "weighted_sum", left: tx.shape().to_vec(), right: w.shape().to_vec() });
        }
        let s = tx.data().iter().zip(w.data()).map(|(&a, &b)| a * b).sum::<F>();
        let ng = self.needs(x);
        Ok(self.push("weighted_sum", Tensor::scalar(s), Op::WeightedSum { x, w: w.into_data() }, ng))
    }

    /// Mean negative log-likelihood of `targets` under row-wise softmax of `logits`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let tl = self.value(logits);
        let (n, v) = tl.dims2();
        if targets.len() != n || tl.shape().len() != 2 {
            return Err(TensorError::ShapeMismatch { op: "cross_entropy", left: tl.shape().to_vec(), right: vec![targets.len()] });
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= v) {
            return Err(TensorError::IndexOutOfRange { op: "cross_entropy", index: bad, bound: v });
        }
        let mut probs = tl.data().to_vec();
        let losses: Vec<f64> = probs
            .par_chunks_mut(v)
            .zip(targets.par_iter())
            .map(|(row, &t)| {
                let max = row.iter().copied().fold(F::neg_infinity(), F::max);
                let shifted_target = (row[t] - max).as_f64();
                let mut z = F::zero();
                for x in row.iter_mut() {
                    *x = (*x - max).exp();
                    z += *x;
                }
                let inv = F::one() / z;
                row.iter_mut().for_each(|x| *x *= inv);
                // -log softmax[t] = log z - (logit_t - max)
                z.as_f64().ln() - shifted_target
            })
            .collect();
        let mean = losses.iter().sum::<f64>() / n.max(1) as f64;
        let ng = self.needs(logits);
        let probs = if ng { probs } else { Vec::new() };
        Ok(self.push(
            "cross_entropy",
            Tensor::scalar(F::from_f64(mean)),
            Op::CrossEntropy { logits, targets: targets.to_vec(), probs },
            ng,
        ))
    }

    /// Causal multi-head self-attention over a fused `[batch*seq, 3*d]` input holding
    /// queries, keys and values side by side. Returns `[batch*seq, d]`.
    pub fn causal_attention(&mut self, qkv: Var, batch: usize, seq: usize, heads: usize) -> Result<Var> {
        let tq = self.value(qkv);
        let (n, c3) = tq.dims2();
        if n != batch * seq || c3 % 3 != 0 || heads == 0 || (c3 / 3) % heads != 0 {
            return Err(TensorError::Invalid {
                op: "causal_attention",
                msg: format!("input {:?} incompatible with batch={batch} seq={seq} heads={heads}", tq.shape()),
            });
        }
        let (out, probs) = attention::forward(tq.data(), batch, seq, heads, c3 / 3);
        let t = Tensor::new(&[n, c3 / 3], out)?;
        let ng = self.needs(qkv);
        Ok(self.push("causal_attention", t, Op::CausalAttention { qkv, batch, seq, heads, probs }, ng))
    }

    /// Reverse pass from a scalar root; consumes the tape.
    pub fn backward(self, loss: Var) -> Result<Gradients<F>> {
        let root = self.value(loss);
        if !root.is_scalar() {
            return Err(TensorError::NonScalarBackward(root.shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<F>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![F::one()]);
        let mut out: Vec<Option<Tensor<F>>> = vec![None; self.store.len()];

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let Some(dy) = grads[i].take() else { continue };
            self.backward_node(node, &dy, &mut grads, &mut out);
        }
        Ok(Gradients { grads: out })
    }

    fn backward_node(&self, node: &Node<'p, F>, dy: &[F], grads: &mut [Option<Vec<F>>], out: &mut [Option<Tensor<F>>]) {
        let y = node.value.get();
        match &node.op {
            Op::Leaf => {}
            Op::Param(id) => {
                let slot = out[id.0].get_or_insert_with(|| Tensor::zeros(y.shape()));
                for (g, &d) in slot.data_mut().iter_mut().zip(dy) {
                    *g += d;
                }
            }
            Op::ParamBlock { id, offset } => {
                let slot = out[id.0].get_or_insert_with(|| Tensor::zeros(self.store.value(*id).shape()));
                add_into(&mut slot.data_mut()[*offset..*offset + dy.len()], dy);
            }
            Op::MatMul { a, b, trans_b } => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (n, k) = ta.dims2();
                let m = y.dims2().1;
                let dyv = View::rm(dy, 0, n, m, m);
                if self.needs(*a) {
                    let da = grad_buf(grads, *a, n * k);
                    // dA = dY · Bᵀ  (or dY · B when B was transposed)
                    let bv = if *trans_b { View::rm(tb.data(), 0, m, k, k) } else { View::rm(tb.data(), 0, k, m, m).t() };
                    gemm(dyv, bv, da, k, true);
                }
                if self.needs(*b) {
                    let db = self.param_grad(*b, tb.numel(), grads, out);
                    let av = View::rm(ta.data(), 0, n, k, k);
                    if *trans_b {
                        gemm(dyv.t(), av, db, k, true);
                    } else {
                        gemm(av.t(), dyv, db, m, true);
                    }
                }
            }
            Op::Add { a, b } => {
                for v in [*a, *b] {
                    if self.needs(v) {
                        add_into(grad_buf(grads, v, dy.len()), dy);
                    }
                }
            }
            Op::AddBias { x, bias } => {
                if self.needs(*x) {
                    add_into(grad_buf(grads, *x, dy.len()), dy);
                }
                if self.needs(*bias) {
                    let c = y.dims2().1;
                    let db = self.param_grad(*bias, c, grads, out);
                    if c > 0 {
                        for row in dy.chunks_exact(c) {
                            add_into(db, row);
                        }
                    }
                }
            }
            Op::Mul { a, b } => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                if self.needs(*a) {
                    let da = grad_buf(grads, *a, dy.len());
                    for ((g, &d), &o) in da.iter_mut().zip(dy).zip(tb.data()) {
                        *g += d * o;
                    }
                }
                if self.needs(*b) {
                    let db = grad_buf(grads, *b, dy.len());
                    for ((g, &d), &o) in db.iter_mut().zip(dy).zip(ta.data()) {
                        *g += d * o;
                    }
                }
            }
            Op::Scale { x, c } => {
                let dx = grad_buf(grads, *x, dy.len());
                for (g, &d) in dx.iter_mut().zip(dy) {
                    *g += d * *c;
                }
            }
            Op::Relu { x } => {
                let dx = grad_buf(grads, *x, dy.len());
                for ((g, &d), &o) in dx.iter_mut().zip(dy).zip(y.data()) {
                    if o > F::zero() {
                        *g += d;
                    }
                }
            }
            Op::MulRows { x, g } => {
                let (tx, tg) = (self.value(*x), self.value(*g));
                let (n, c) = tx.dims2();
                if self.needs(*x) {
                    let dx = grad_buf(grads, *x, n * c);
                    for r in 0..n {
                        let s = tg.data()[r];
                        for j in 0..c {
                            dx[r * c + j] += dy[r * c + j] * s;
                        }
                    }
                }
                if self.needs(*g) {
                    let dg = grad_buf(grads, *g, n);
                    for r in 0..n {
                        let mut acc = F::zero();
                        for j in 0..c {
                            acc += dy[r * c + j] * tx.data()[r * c + j];
                        }
                        dg[r] += acc;
                    }
                }
            }
            Op::LayerNorm { x, gain, bias, stats } => {
                let (tx, tg) = (self.value(*x), self.value(*gain));
                let (n, c) = tx.dims2();
                let cf = F::from_f64(c as f64);
                let mut dgain = vec![F::zero(); c];
                let mut dbias = vec![F::zero(); c];
                let mut dx = if self.needs(*x) { Some(vec![F::zero(); n * c]) } else { None };
                let mut xhat = vec![F::zero(); c];
                let mut dxhat = vec![F::zero(); c];
                for r in 0..n {
                    let (mean, rstd) = stats[r];
                    let row = &tx.data()[r * c..(r + 1) * c];
                    let dyr = &dy[r * c..(r + 1) * c];
                    let mut sum_d = F::zero();
                    let mut sum_dx = F::zero();
                    for j in 0..c {
                        xhat[j] = (row[j] - mean) * rstd;
                        dgain[j] += dyr[j] * xhat[j];
                        dbias[j] += dyr[j];
                        dxhat[j] = dyr[j] * tg.data()[j];
                        sum_d += dxhat[j];
                        sum_dx += dxhat[j] * xhat[j];
                    }
                    if let Some(dx) = dx.as_mut() {
                        let (md, mdx) = (sum_d / cf, sum_dx / cf);
                        for j in 0..c {
                            dx[r * c + j] = rstd * (dxhat[j] - md - xhat[j] * mdx);
                        }
                    }
                }
                if let Some(dx) = dx {
                    add_into(grad_buf(grads, *x, n * c), &dx);
                }
                if self.needs(*gain) {
                    add_into(grad_buf(grads, *gain, c), &dgain);
                }
                if self.needs(*bias) {
                    add_into(grad_buf(grads, *bias, c), &dbias);
                }
            }
            Op::Embedding { table, ids } => {
                let tt = self.value(*table);
                let d = tt.dims2().1;
                let dt = grad_buf(grads, *table, tt.numel());
                for (r, &id) in ids.iter().enumerate() {
                    add_into(&mut dt[id * d..(id + 1) * d], &dy[r * d..(r + 1) * d]);
                }
            }
            Op::GatherRows { x, idx } => {
                let tx = self.value(*x);
                let c = tx.dims2().1;
                let dx = grad_buf(grads, *x, tx.numel());
                for (r, &i) in idx.iter().enumerate() {
                    add_into(&mut dx[i * c..(i + 1) * c], &dy[r * c..(r + 1) * c]);
                }
            }
            Op::ScatterRows { parts } => {
                let c = y.dims2().1;
                for (v, idx) in parts {
                    if !self.needs(*v) {
                        continue;
                    }
                    let dv = grad_buf(grads, *v, idx.len() * c);
                    for (r, &i) in idx.iter().enumerate() {
                        add_into(&mut dv[r * c..(r + 1) * c], &dy[i * c..(i + 1) * c]);
                    }
                }
            }
            Op::ConcatCols { parts } => {
                let (n, total) = y.dims2();
                let mut off = 0;
                for &p in parts {
                    let w = self.value(p).dims2().1;
                    if self.needs(p) {
                        let dp = grad_buf(grads, p, n * w);
                        for r in 0..n {
                            add_into(&mut dp[r * w..(r + 1) * w], &dy[r * total + off..r * total + off + w]);
                        }
                    }
                    off += w;
                }
            }
            Op::SoftmaxRows { x } => {
                let c = y.dims2().1;
                let dx = grad_buf(grads, *x, dy.len());
                if c > 0 {
                    for ((g, d), p) in dx.chunks_exact_mut(c).zip(dy.chunks_exact(c)).zip(y.data().chunks_exact(c)) {
                        let dot = d.iter().zip(p).map(|(&a, &b)| a * b).sum::<F>();
                        for j in 0..c {
                            g[j] += p[j] * (d[j] - dot);
                        }
                    }
                }
            }
            Op::Pick { x, cols } => {
                let tx = self.value(*x);
                let c = tx.dims2().1;
                let dx = grad_buf(grads, *x, tx.numel());
                for (r, &j) in cols.iter().enumerate() {
                    dx[r * c + j] += dy[r];
                }
            }
            Op::Sum { x } => {
                let dx = grad_buf(grads, *x, self.value(*x).numel());
                dx.iter_mut().for_each(|g| *g += dy[0]);
            }
            Op::WeightedSum { x, w } => {
                let dx = grad_buf(grads, *x, w.len());
                for (g, &wi) in dx.iter_mut().zip(w) {
                    *g += dy[0] * wi;
                }
            }
            Op::CrossEntropy { logits, targets, probs } => {
                let n = targets.len();
                let v = self.value(*logits).dims2().1;
                let scale = dy[0] / F::from_f64(n.max(1) as f64);
                let dl = grad_buf(grads, *logits, n * v);
                dl.par_chunks_mut(v).zip(probs.par_chunks(v)).zip(targets.par_iter()).for_each(|((g, p), &t)| {
                    for j in 0..v {
                        g[j] += p[j] * scale;
                    }
                    g[t] -= scale;
                });
            }
            Op::CausalAttention { qkv, batch, seq, heads, probs } => {
                let tq = self.value(*qkv);
                let d = tq.dims2().1 / 3;
                let dq = grad_buf(grads, *qkv, tq.numel());
                attention::backward(tq.data(), probs, dy, dq, *batch, *seq, *heads, d);
            }
        }
    }
}

fn grad_buf<F: Real>(grads: &mut [Option<Vec<F>>], v: Var, len: usize) -> &mut [F] {
    grads[v.0].get_or_insert_with(|| vec![F::zero(); len])
}

fn add_into<F: Real>(dst: &mut [F], src: &[F]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

pub(crate) fn softmax_in_place<F: Real>(row: &mut [F]) {
    let max = row.iter().copied().fold(F::neg_infinity(), F::max);
    let mut z = F::zero();
    for x in row.iter_mut() {
        *x = (*x - max).exp();
        z += *x;
    }
    let inv = F::one() / z;
    row.iter_mut().for_each(|x| *x *= inv);
}
