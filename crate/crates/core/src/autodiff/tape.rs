use std::collections::HashMap;

use crate::autodiff::kernels::{gemm_nn, gemm_nt, gemm_tn};
use crate::autodiff::params::{Gradients, ParamId, ParamStore};
use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Backward policy for [`Tape::straight_through`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum SteMode {
    /// Gradient passes where the quantizer did not saturate, zero elsewhere.
    #[default]
    Clipped,
    /// Gradient passes everywhere.
    Identity,
}

/// Elementwise quantizer wrapped by a straight-through node.
pub trait ElementQuantizer<T> {
    fn quantize(&self, v: T) -> T;
    /// True when the clamp stage leaves `v` untouched.
    fn in_range(&self, v: T) -> bool;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum OpKind {
    Leaf,
    Param,
    Constant,
    MatMul,
    MatMulNT,
    Add,
    AddRow,
    Mul,
    Scale,
    ScaleRows,
    Transpose,
    Reshape,
    Softmax,
    Gelu,
    Embedding,
    CrossEntropy,
    LayerNorm,
    StraightThrough,
    Slice,
    Assemble,
    Sum,
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Param(ParamId),
    Constant,
    MatMul(Var, Var),
    MatMulNT(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    ScaleRows(Var, Vec<T>),
    Transpose(Var),
    Reshape(Var),
    Softmax(Var),
    Gelu(Var),
    Embedding {
        table: Var,
        ids: Vec<usize>,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        probs: Vec<T>,
    },
    LayerNorm {
        x: Var,
        gain: Option<Var>,
        shift: Option<Var>,
        xhat: Vec<T>,
        inv_std: Vec<T>,
    },
    StraightThrough {
        x: Var,
        mask: Option<Vec<bool>>,
    },
    Slice {
        x: Var,
        r0: usize,
        c0: usize,
    },
    Assemble {
        parts: Vec<(Var, usize, usize)>,
    },
    Sum(Var),
}

impl<T> Op<T> {
    fn kind(&self) -> OpKind {
        match self {
            Op::Leaf => OpKind::Leaf,
            Op::Param(_) => OpKind::Param,
            Op::Constant => OpKind::Constant,
            Op::MatMul(..) => OpKind::MatMul,
            Op::MatMulNT(..) => OpKind::MatMulNT,
            Op::Add(..) => OpKind::Add,
            Op::AddRow(..) => OpKind::AddRow,
            Op::Mul(..) => OpKind::Mul,
            Op::Scale(..) => OpKind::Scale,
            Op::ScaleRows(..) => OpKind::ScaleRows,
            Op::Transpose(_) => OpKind::Transpose,
            Op::Reshape(_) => OpKind::Reshape,
            Op::Softmax(_) => OpKind::Softmax,
            Op::Gelu(_) => OpKind::Gelu,
            Op::Embedding { .. } => OpKind::Embedding,
            Op::CrossEntropy { .. } => OpKind::CrossEntropy,
            Op::LayerNorm { .. } => OpKind::LayerNorm,
            Op::StraightThrough { .. } => OpKind::StraightThrough,
            Op::Slice { .. } => OpKind::Slice,
            Op::Assemble { .. } => OpKind::Assemble,
            Op::Sum(_) => OpKind::Sum,
        }
    }

    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf | Op::Param(_) | Op::Constant => vec![],
            Op::MatMul(a, b) | Op::MatMulNT(a, b) | Op::Add(a, b) | Op::AddRow(a, b) | Op::Mul(a, b) => {
                vec![*a, *b]
            }
            Op::Scale(a, _)
            | Op::ScaleRows(a, _)
            | Op::Transpose(a)
            | Op::Reshape(a)
            | Op::Softmax(a)
            | Op::Gelu(a)
            | Op::Sum(a) => vec![*a],
            Op::Embedding { table, .. } => vec![*table],
            Op::CrossEntropy { logits, .. } => vec![*logits],
            Op::LayerNorm { x, gain, shift, .. } => {
                let mut v = vec![*x];
                v.extend(gain.iter().copied());
                v.extend(shift.iter().copied());
                v
            }
            Op::StraightThrough { x, .. } | Op::Slice { x, .. } => vec![*x],
            Op::Assemble { parts } => parts.iter().map(|p| p.0).collect(),
        }
    }
}

#[derive(Debug)]
struct Node<T> {
    /// `None` for parameter nodes, whose value lives in the store.
    value: Option<Tensor<T>>,
    op: Op<T>,
    requires_grad: bool,
}

/// Reverse-mode gradient tape.
///
/// Nodes are appended in evaluation order, so the node list is already a
/// topological order of the graph. Parameters are borrowed from a
/// [`ParamStore`] rather than copied.
///
/// Gradients of leaves and parameters accumulate across calls to
/// [`Tape::backward`]; intermediate gradients are recomputed each call.
#[derive(Debug)]
pub struct Tape<'p, T: Scalar> {
    store: Option<&'p ParamStore<T>>,
    nodes: Vec<Node<T>>,
    param_vars: HashMap<ParamId, Var>,
    leaf_grads: HashMap<usize, Vec<T>>,
}

impl<T: Scalar> Default for Tape<'static, T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<'static, T> {
    pub fn new() -> Self {
        Self {
            store: None,
            nodes: Vec::new(),
            param_vars: HashMap::new(),
            leaf_grads: HashMap::new(),
        }
    }
}

impl<'p, T: Scalar> Tape<'p, T> {
    pub fn with_params(store: &'p ParamStore<T>) -> Self {
        Self {
            store: Some(store),
            nodes: Vec::new(),
            param_vars: HashMap::new(),
            leaf_grads: HashMap::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn kind(&self, v: Var) -> OpKind {
        self.nodes[v.0].op.kind()
    }

    pub fn inputs(&self, v: Var) -> Vec<Var> {
        self.nodes[v.0].op.inputs()
    }

    /// Every node of the given kind, in tape order.
    pub fn nodes_of_kind(&self, kind: OpKind) -> Vec<Var> {
        (0..self.nodes.len())
            .filter(|&i| self.nodes[i].op.kind() == kind)
            .map(Var)
            .collect()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        node_value(&self.nodes, self.store, v)
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.value(v).shape()
    }

    /// Accumulated gradient of a leaf or parameter node.
    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.leaf_grads.get(&v.0).map(|g| g.as_slice())
    }

    /// Trainable input.
    pub fn leaf(&mut self, t: Tensor<T>) -> Var {
        self.push(Some(t), Op::Leaf, true)
    }

    /// Input that never receives a gradient.
    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.push(Some(t), Op::Constant, false)
    }

    /// Parameter from the attached store; repeated calls return the same node.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(&v) = self.param_vars.get(&id) {
            return v;
        }
        assert!(self.store.is_some(), "tape has no parameter store attached");
        let v = self.push(None, Op::Param(id), true);
        self.param_vars.insert(id, v);
        v
    }

    /// Gradients of every parameter reached by `backward`.
    pub fn param_grads(&self) -> Gradients<T> {
        let n = self.store.map_or(0, |s| s.len());
        let mut raw = vec![None; n];
        for (id, v) in &self.param_vars {
            if let Some(g) = self.leaf_grads.get(&v.0) {
                raw[id.index()] = Some(g.clone());
            }
        }
        Gradients::from_raw(raw)
    }

    fn push(&mut self, value: Option<Tensor<T>>, op: Op<T>, leaf_grad: bool) -> Var {
        let requires_grad = leaf_grad || op.inputs().iter().any(|i| self.nodes[i.0].requires_grad);
        if cfg!(debug_assertions) {
            if let Some(t) = &value {
                if !t.is_finite() {
                    let inputs_finite = op
                        .inputs()
                        .iter()
                        .all(|&i| node_value(&self.nodes, self.store, i).is_finite());
                    assert!(!inputs_finite, "{:?} produced a non-finite value from finite inputs", op.kind());
                }
            }
        }
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn matrix_dims(&self, op: &'static str, v: Var) -> Result<(usize, usize)> {
        let s = self.shape(v);
        if s.len() != 2 {
            return Err(Error::shape(op, s, &[0, 0]));
        }
        Ok((s[0], s[1]))
    }

    /// `a[m×k] · b[k×n]`
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.matrix_dims("matmul", a)?;
        let (k2, n) = self.matrix_dims("matmul", b)?;
        if k != k2 {
            return Err(Error::shape("matmul", self.shape(a), self.shape(b)));
        }
        let mut out = vec![T::zero(); m * n];
        gemm_nn(self.value(a).data(), self.value(b).data(), m, k, n, &mut out);
        Ok(self.push(Some(Tensor::new(&[m, n], out)?), Op::MatMul(a, b), false))
    }

    /// `a[m×k] · b[n×k]ᵀ`, the shape of `x·Wᵀ`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.matrix_dims("matmul_nt", a)?;
        let (n, k2) = self.matrix_dims("matmul_nt", b)?;
        if k != k2 {
            return Err(Error::shape("matmul_nt", self.shape(a), self.shape(b)));
        }
        let mut out = vec![T::zero(); m * n];
        gemm_nt(self.value(a).data(), self.value(b).data(), m, k, n, &mut out);
        Ok(self.push(Some(Tensor::new(&[m, n], out)?), Op::MatMulNT(a, b), false))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let out = zip_map(self.value(a), self.value(b), |x, y| x + y);
        Ok(self.push(Some(out), Op::Add(a, b), false))
    }

    /// Adds a length-`cols` vector to every row of `x`.
    pub fn add_row(&mut self, x: Var, row: Var) -> Result<Var> {
        let c = self.value(x).cols();
        if self.value(row).len() != c {
            return Err(Error::shape("add_row", self.shape(x), self.shape(row)));
        }
        let r = self.value(row).data().to_vec();
        let mut out = self.value(x).clone();
        for chunk in out.data_mut().chunks_mut(c.max(1)) {
            chunk.iter_mut().zip(&r).for_each(|(o, b)| *o += *b);
        }
        Ok(self.push(Some(out), Op::AddRow(x, row), false))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let out = zip_map(self.value(a), self.value(b), |x, y| x * y);
        Ok(self.push(Some(out), Op::Mul(a, b), false))
    }

    pub fn scale(&mut self, x: Var, c: T) -> Var {
        let out = self.value(x).map(|v| v * c);
        self.push(Some(out), Op::Scale(x, c), false)
    }

    /// Multiplies row `r` by the constant `factors[r]`.
    pub fn scale_rows(&mut self, x: Var, factors: Vec<T>) -> Result<Var> {
        let t = self.value(x);
        if factors.len() != t.rows() {
            return Err(Error::shape("scale_rows", t.shape(), &[factors.len()]));
        }
        let c = t.cols();
        let mut out = t.clone();
        for (chunk, &f) in out.data_mut().chunks_mut(c.max(1)).zip(&factors) {
            chunk.iter_mut().for_each(|v| *v *= f);
        }
        Ok(self.push(Some(out), Op::ScaleRows(x, factors), false))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        self.matrix_dims("transpose", x)?;
        let out = self.value(x).transpose();
        Ok(self.push(Some(out), Op::Transpose(x), false))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).clone().reshaped(shape)?;
        Ok(self.push(Some(out), Op::Reshape(x), false))
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, x: Var) -> Var {
        let mut out = self.value(x).clone();
        let c = out.cols();
        if c > 0 {
            for row in out.data_mut().chunks_mut(c) {
                softmax_in_place(row);
            }
        }
        self.push(Some(out), Op::Softmax(x), false)
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(gelu);
        self.push(Some(out), Op::Gelu(x), false)
    }

    /// Gathers rows of `table` by id.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (v, d) = self.matrix_dims("embedding", table)?;
        let t = self.value(table);
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= v {
                return Err(Error::Index {
                    op: "embedding",
                    index: id,
                    bound: v,
                });
            }
            out.extend_from_slice(t.row(id));
        }
        let out = Tensor::new(&[ids.len(), d], out)?;
        Ok(self.push(
            Some(out),
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
            false,
        ))
    }

    /// Mean token cross-entropy; `targets[i]` indexes row `i` of `logits`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let (n, v) = self.matrix_dims("cross_entropy", logits)?;
        if targets.len() != n || n == 0 {
            return Err(Error::shape("cross_entropy", &[n, v], &[targets.len()]));
        }
        let z = self.value(logits);
        let mut probs = z.data().to_vec();
        let mut total = 0.0f64;
        for (i, &t) in targets.iter().enumerate() {
            if t >= v {
                return Err(Error::Index {
                    op: "cross_entropy",
                    index: t,
                    bound: v,
                });
            }
            let row = &mut probs[i * v..(i + 1) * v];
            let m = row.iter().fold(T::neg_infinity(), |a, &b| a.max(b));
            let lse = row.iter().map(|&x| (x - m).exp()).sum::<T>().ln() + m;
            total += (lse - row[t]).as_f64();
            softmax_in_place(row);
        }
        let loss = Tensor::scalar(T::lit(total / n as f64));
        Ok(self.push(
            Some(loss),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
            false,
        ))
    }

    /// Normalizes each row of `x` to zero mean and unit variance, then applies
    /// the optional gain and shift (each of length `cols`).
    pub fn layer_norm(&mut self, x: Var, gain: Option<Var>, shift: Option<Var>, eps: T) -> Result<Var> {
        let c = self.value(x).cols();
        for p in gain.iter().chain(shift.iter()) {
            if self.value(*p).len() != c {
                return Err(Error::shape("layer_norm", self.shape(x), self.shape(*p)));
            }
        }
        let (xhat, inv_std) = layer_norm_rows(self.value(x), eps);
        let mut out = Tensor::new(self.shape(x), xhat.clone())?;
        if let Some(g) = gain {
            let g = self.value(g).data().to_vec();
            for row in out.data_mut().chunks_mut(c.max(1)) {
                row.iter_mut().zip(&g).for_each(|(o, gv)| *o *= *gv);
            }
        }
        if let Some(s) = shift {
            let s = self.value(s).data().to_vec();
            for row in out.data_mut().chunks_mut(c.max(1)) {
                row.iter_mut().zip(&s).for_each(|(o, sv)| *o += *sv);
            }
        }
        Ok(self.push(
            Some(out),
            Op::LayerNorm {
                x,
                gain,
                shift,
                xhat,
                inv_std,
            },
            false,
        ))
    }

    /// Applies `q` in the forward pass; the backward pass follows `mode`.
    pub fn straight_through(&mut self, x: Var, q: &dyn ElementQuantizer<T>, mode: SteMode) -> Var {
        let t = self.value(x);
        let out = t.map(|v| q.quantize(v));
        let mask = match mode {
            SteMode::Clipped => Some(t.data().iter().map(|&v| q.in_range(v)).collect()),
            SteMode::Identity => None,
        };
        self.push(Some(out), Op::StraightThrough { x, mask }, false)
    }

    /// Rectangular block `[r0, r0+nr) × [c0, c0+nc)` of a matrix.
    pub fn slice(&mut self, x: Var, r0: usize, nr: usize, c0: usize, nc: usize) -> Result<Var> {
        let (r, c) = self.matrix_dims("slice", x)?;
        if r0 + nr > r || c0 + nc > c {
            return Err(Error::shape("slice", &[r, c], &[r0 + nr, c0 + nc]));
        }
        let t = self.value(x);
        let mut out = Vec::with_capacity(nr * nc);
        for i in r0..r0 + nr {
            out.extend_from_slice(&t.row(i)[c0..c0 + nc]);
        }
        let out = Tensor::new(&[nr, nc], out)?;
        Ok(self.push(Some(out), Op::Slice { x, r0, c0 }, false))
    }

    /// Places matrix blocks at `(row, col)` offsets inside a zero `rows×cols`
    /// matrix. Blocks must not overlap.
    pub fn assemble(&mut self, rows: usize, cols: usize, parts: &[(Var, usize, usize)]) -> Result<Var> {
        let mut out = Tensor::zeros(&[rows, cols]);
        for &(p, r0, c0) in parts {
            let (pr, pc) = self.matrix_dims("assemble", p)?;
            if r0 + pr > rows || c0 + pc > cols {
                return Err(Error::shape("assemble", &[rows, cols], &[r0 + pr, c0 + pc]));
            }
            let src = node_value(&self.nodes, self.store, p);
            for i in 0..pr {
                out.row_mut(r0 + i)[c0..c0 + pc].copy_from_slice(src.row(i));
            }
        }
        Ok(self.push(
            Some(out),
            Op::Assemble {
                parts: parts.to_vec(),
            },
            false,
        ))
    }

    /// Stacks matrices with equal column counts.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let cols = parts.first().map_or(0, |&p| self.value(p).cols());
        let mut placed = Vec::with_capacity(parts.len());
        let mut r = 0;
        for &p in parts {
            let (pr, pc) = self.matrix_dims("concat_rows", p)?;
            if pc != cols {
                return Err(Error::shape("concat_rows", &[r, cols], &[pr, pc]));
            }
            placed.push((p, r, 0));
            r += pr;
        }
        self.assemble(r, cols, &placed)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().copied().sum::<T>();
        self.push(Some(Tensor::scalar(s)), Op::Sum(x), false)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(op, self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    /// Back-propagates from `root`, seeding its gradient with ones.
    pub fn backward(&mut self, root: Var) {
        let nodes = &self.nodes;
        let store = self.store;
        let mut grads: Vec<Option<Vec<T>>> = vec![None; root.0 + 1];
        grads[root.0] = Some(vec![T::one(); node_value(nodes, store, root).len()]);

        for i in (0..=root.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &nodes[i];
            if !node.requires_grad {
                continue;
            }
            let val = |v: Var| node_value(nodes, store, v);
            let wants = |v: Var| nodes[v.0].requires_grad;
            match &node.op {
                Op::Leaf | Op::Param(_) => {
                    match self.leaf_grads.get_mut(&i) {
                        Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += *b),
                        None => {
                            self.leaf_grads.insert(i, g);
                        }
                    }
                }
                Op::Constant => {}
                Op::MatMul(a, b) => {
                    let (m, k) = (val(*a).rows(), val(*a).cols());
                    let n = val(*b).cols();
                    if wants(*a) {
                        let mut da = vec![T::zero(); m * k];
                        gemm_nt(&g, val(*b).data(), m, n, k, &mut da);
                        accumulate(&mut grads, *a, da);
                    }
                    if wants(*b) {
                        let mut db = vec![T::zero(); k * n];
                        gemm_tn(val(*a).data(), &g, m, k, n, &mut db);
                        accumulate(&mut grads, *b, db);
                    }
                }
                Op::MatMulNT(a, b) => {
                    let (m, k) = (val(*a).rows(), val(*a).cols());
                    let n = val(*b).rows();
                    if wants(*a) {
                        let mut da = vec![T::zero(); m * k];
                        gemm_nn(&g, val(*b).data(), m, n, k, &mut da);
                        accumulate(&mut grads, *a, da);
                    }
                    if wants(*b) {
                        let mut db = vec![T::zero(); n * k];
                        gemm_tn(&g, val(*a).data(), m, n, k, &mut db);
                        accumulate(&mut grads, *b, db);
                    }
                }
                Op::Add(a, b) => {
                    if wants(*a) {
                        accumulate(&mut grads, *a, g.clone());
                    }
                    if wants(*b) {
                        accumulate(&mut grads, *b, g);
                    }
                }
                Op::AddRow(x, row) => {
                    if wants(*row) {
                        let c = val(*row).len();
                        let mut db = vec![T::zero(); c];
                        for chunk in g.chunks(c.max(1)) {
                            db.iter_mut().zip(chunk).for_each(|(d, v)| *d += *v);
                        }
                        accumulate(&mut grads, *row, db);
                    }
                    if wants(*x) {
                        accumulate(&mut grads, *x, g);
                    }
                }
                Op::Mul(a, b) => {
                    if wants(*a) {
                        let da = g.iter().zip(val(*b).data()).map(|(g, y)| *g * *y).collect();
                        accumulate(&mut grads, *a, da);
                    }
                    if wants(*b) {
                        let db = g.iter().zip(val(*a).data()).map(|(g, x)| *g * *x).collect();
                        accumulate(&mut grads, *b, db);
                    }
                }
                Op::Scale(x, c) => {
                    accumulate(&mut grads, *x, g.iter().map(|v| *v * *c).collect());
                }
                Op::ScaleRows(x, f) => {
                    let c = val(*x).cols().max(1);
                    let mut dx = g;
                    for (chunk, &s) in dx.chunks_mut(c).zip(f) {
                        chunk.iter_mut().for_each(|v| *v *= s);
                    }
                    accumulate(&mut grads, *x, dx);
                }
                Op::Transpose(x) => {
                    let t = val(*x);
                    let (r, c) = (t.rows(), t.cols());
                    let mut dx = vec![T::zero(); r * c];
                    for a in 0..r {
                        for b in 0..c {
                            dx[a * c + b] = g[b * r + a];
                        }
                    }
                    accumulate(&mut grads, *x, dx);
                }
                Op::Reshape(x) => accumulate(&mut grads, *x, g),
                Op::Softmax(x) => {
                    let y = node.value.as_ref().expect("softmax output");
                    let c = y.cols().max(1);
                    let mut dx = vec![T::zero(); g.len()];
                    for ((dr, gr), yr) in dx.chunks_mut(c).zip(g.chunks(c)).zip(y.data().chunks(c)) {
                        let dotp: T = gr.iter().zip(yr).map(|(a, b)| *a * *b).sum();
                        for ((d, gv), yv) in dr.iter_mut().zip(gr).zip(yr) {
                            *d = *yv * (*gv - dotp);
                        }
                    }
                    accumulate(&mut grads, *x, dx);
                }
                Op::Gelu(x) => {
                    let dx = g
                        .iter()
                        .zip(val(*x).data())
                        .map(|(gv, xv)| *gv * gelu_grad(*xv))
                        .collect();
                    accumulate(&mut grads, *x, dx);
                }
                Op::Embedding { table, ids } => {
                    let t = val(*table);
                    let d = t.cols();
                    let mut dt = vec![T::zero(); t.len()];
                    for (r, &id) in ids.iter().enumerate() {
                        let src = &g[r * d..(r + 1) * d];
                        dt[id * d..(id + 1) * d]
                            .iter_mut()
                            .zip(src)
                            .for_each(|(a, b)| *a += *b);
                    }
                    accumulate(&mut grads, *table, dt);
                }
                Op::CrossEntropy { logits, targets, probs } => {
                    let v = val(*logits).cols();
                    let scale = g[0] / T::lit(targets.len() as f64);
                    let mut dz: Vec<T> = probs.iter().map(|p| *p * scale).collect();
                    for (i, &t) in targets.iter().enumerate() {
                        dz[i * v + t] -= scale;
                    }
                    accumulate(&mut grads, *logits, dz);
                }
                Op::LayerNorm {
                    x,
                    gain,
                    shift,
                    xhat,
                    inv_std,
                } => {
                    let c = val(*x).cols().max(1);
                    if let Some(s) = shift {
                        if wants(*s) {
                            let mut ds = vec![T::zero(); c];
                            for chunk in g.chunks(c) {
                                ds.iter_mut().zip(chunk).for_each(|(d, v)| *d += *v);
                            }
                            accumulate(&mut grads, *s, ds);
                        }
                    }
                    let gain_vals = gain.map(|gv| val(gv).data().to_vec());
                    if let Some(gv) = gain {
                        if wants(*gv) {
                            let mut dg = vec![T::zero(); c];
                            for (gr, xr) in g.chunks(c).zip(xhat.chunks(c)) {
                                for ((d, a), b) in dg.iter_mut().zip(gr).zip(xr) {
                                    *d += *a * *b;
                                }
                            }
                            accumulate(&mut grads, *gv, dg);
                        }
                    }
                    if wants(*x) {
                        let cf = T::lit(c as f64);
                        let mut dx = vec![T::zero(); g.len()];
                        let mut dxhat = vec![T::zero(); c];
                        for (r, ((dr, gr), xr)) in dx.chunks_mut(c).zip(g.chunks(c)).zip(xhat.chunks(c)).enumerate() {
                            for (j, d) in dxhat.iter_mut().enumerate() {
                                *d = match &gain_vals {
                                    Some(gv) => gr[j] * gv[j],
                                    None => gr[j],
                                };
                            }
                            let mean_d = dxhat.iter().copied().sum::<T>() / cf;
                            let mean_dx = dxhat.iter().zip(xr).map(|(a, b)| *a * *b).sum::<T>() / cf;
                            for j in 0..c {
                                dr[j] = inv_std[r] * (dxhat[j] - mean_d - xr[j] * mean_dx);
                            }
                        }
                        accumulate(&mut grads, *x, dx);
                    }
                }
                Op::StraightThrough { x, mask } => {
                    let dx = match mask {
                        Some(m) => g
                            .iter()
                            .zip(m)
                            .map(|(gv, &keep)| if keep { *gv } else { T::zero() })
                            .collect(),
                        None => g,
                    };
                    accumulate(&mut grads, *x, dx);
                }
                Op::Slice { x, r0, c0 } => {
                    let src = val(*x);
                    let out = node.value.as_ref().expect("slice output");
                    let (nr, nc) = (out.rows(), out.cols());
                    let c = src.cols();
                    let mut dx = vec![T::zero(); src.len()];
                    for i in 0..nr {
                        let dst = (r0 + i) * c + c0;
                        dx[dst..dst + nc].copy_from_slice(&g[i * nc..(i + 1) * nc]);
                    }
                    accumulate(&mut grads, *x, dx);
                }
                Op::Assemble { parts } => {
                    let cols = node.value.as_ref().expect("assemble output").cols();
                    for &(p, r0, c0) in parts {
                        if !wants(p) {
                            continue;
                        }
                        let (pr, pc) = (val(p).rows(), val(p).cols());
                        let mut dp = Vec::with_capacity(pr * pc);
                        for i in 0..pr {
                            let s = (r0 + i) * cols + c0;
                            dp.extend_from_slice(&g[s..s + pc]);
                        }
                        accumulate(&mut grads, p, dp);
                    }
                }
                Op::Sum(x) => {
                    let n = val(*x).len();
                    accumulate(&mut grads, *x, vec![g[0]; n]);
                }
            }
        }
    }
}

fn node_value<'a, T: Scalar>(nodes: &'a [Node<T>], store: Option<&'a ParamStore<T>>, v: Var) -> &'a Tensor<T> {
    let node = &nodes[v.0];
    match (&node.value, &node.op) {
        (Some(t), _) => t,
        (None, Op::Param(id)) => store.expect("parameter store").get(*id),
        _ => unreachable!("node without value"),
    }
}

fn accumulate<T: Scalar>(grads: &mut [Option<Vec<T>>], v: Var, g: Vec<T>) {
    match &mut grads[v.0] {
        Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += *b),
        slot @ None => *slot = Some(g),
    }
}

fn zip_map<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, f: impl Fn(T, T) -> T) -> Tensor<T> {
    let data = a.data().iter().zip(b.data()).map(|(x, y)| f(*x, *y)).collect();
    Tensor::new(a.shape(), data).expect("same shape")
}

/// Max-shifted softmax of one row.
pub fn softmax_in_place<T: Scalar>(row: &mut [T]) {
    let m = row.iter().fold(T::neg_infinity(), |a, &b| a.max(b));
    let mut sum = T::zero();
    for v in row.iter_mut() {
        *v = (*v - m).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

/// Non-affine row normalization; returns `(xhat, 1/std per row)`.
pub fn layer_norm_rows<T: Scalar>(x: &Tensor<T>, eps: T) -> (Vec<T>, Vec<T>) {
    let c = x.cols();
    let cf = T::lit(c as f64);
    let mut xhat = Vec::with_capacity(x.len());
    let mut inv = Vec::with_capacity(x.rows());
    if c == 0 {
        return (xhat, inv);
    }
    for row in x.data().chunks(c) {
        let mean = row.iter().copied().sum::<T>() / cf;
        let var = row.iter().map(|v| (*v - mean) * (*v - mean)).sum::<T>() / cf;
        let is = T::one() / (var + eps).sqrt();
        xhat.extend(row.iter().map(|v| (*v - mean) * is));
        inv.push(is);
    }
    (xhat, inv)
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

#[inline]
pub fn gelu<T: Scalar>(x: T) -> T {
    let half = T::lit(0.5);
    let inner = T::lit(GELU_C) * (x + T::lit(GELU_A) * x * x * x);
    half * x * (T::one() + inner.tanh())
}

#[inline]
fn gelu_grad<T: Scalar>(x: T) -> T {
    let half = T::lit(0.5);
    let inner = T::lit(GELU_C) * (x + T::lit(GELU_A) * x * x * x);
    let t = inner.tanh();
    let dinner = T::lit(GELU_C) * (T::one() + T::lit(3.0 * GELU_A) * x * x);
    half * (T::one() + t) + half * x * (T::one() - t * t) * dinner
}
