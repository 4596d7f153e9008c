//! Tape-based reverse-mode differentiation over [`Tensor`] values.
//!
//! A [`Graph`] records every primitive application in creation order. Parameters
//! enter as leaves bound to a [`ParamStore`] entry; [`Graph::backward`] sweeps the
//! tape once in reverse and adds the total derivative into each parameter's grad
//! slot. Gradients accumulate: callers zero them between optimizer steps.

use std::collections::{BTreeMap, HashMap};

use super::kernels::{self, Activation};
use super::tensor::{rows_cols, ParamId, ParamStore, Tensor};
use crate::error::{Error, Result};

/// Handle to a recorded node.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// A fused primitive with a hand-written adjoint, recorded through [`Graph::custom`].
pub trait CustomOp {
    fn name(&self) -> &'static str;

    /// Vector-Jacobian product: one gradient per input, `None` where the input
    /// receives nothing.
    fn backward(
        &self,
        inputs: &[&[f64]],
        output: &[f64],
        grad_out: &[f64],
    ) -> Vec<Option<Vec<f64>>>;
}

enum Op {
    Leaf,
    MatMul { x: Var, w: Var },
    AddBias { x: Var, b: Var },
    Add { a: Var, b: Var },
    Sub { a: Var, b: Var },
    Mul { a: Var, b: Var },
    ScaleCols { x: Var, s: Var },
    ScaleBy { s: Var, x: Var },
    Affine { x: Var, mul: Vec<f64> },
    Act { x: Var, kind: Activation },
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<f64>, inv_std: Vec<f64> },
    Conv1d { x: Var, kernel: Var, causal: bool },
    ReverseRows { x: Var },
    ConcatCols { parts: Vec<Var> },
    ConcatRows { parts: Vec<Var> },
    SliceRows { x: Var, start: usize },
    Select { x: Var, idx: Vec<usize> },
    MeanRows { x: Var },
    Norm2 { x: Var },
    Sum { x: Var },
    Reshape { x: Var },
    Im2col { x: Var, h: usize, w: usize, c: usize, k: usize },
    Patchify { x: Var, s: usize, c: usize, patch: usize },
    Custom { inputs: Vec<Var>, op: Box<dyn CustomOp> },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul { .. } => "matmul",
            Op::AddBias { .. } => "add_bias",
            Op::Add { .. } => "add",
            Op::Sub { .. } => "sub",
            Op::Mul { .. } => "mul",
            Op::ScaleCols { .. } => "scale_cols",
            Op::ScaleBy { .. } => "scale_by",
            Op::Affine { .. } => "affine",
            Op::Act { kind, .. } => kind.name(),
            Op::LayerNorm { .. } => "layer_norm",
            Op::Conv1d { .. } => "depthwise_conv1d",
            Op::ReverseRows { .. } => "reverse_rows",
            Op::ConcatCols { .. } => "concat_cols",
            Op::ConcatRows { .. } => "concat_rows",
            Op::SliceRows { .. } => "slice_rows",
            Op::Select { .. } => "select",
            Op::MeanRows { .. } => "mean_rows",
            Op::Norm2 { .. } => "norm2",
            Op::Sum { .. } => "sum",
            Op::Reshape { .. } => "reshape",
            Op::Im2col { .. } => "im2col",
            Op::Patchify { .. } => "patchify",
            Op::Custom { op, .. } => op.name(),
        }
    }
}

struct Node {
    shape: Vec<usize>,
    value: Vec<f64>,
    op: Op,
    param: Option<ParamId>,
}

/// Per-node adjoints produced by one backward sweep.
pub struct Gradients {
    nodes: Vec<Option<Vec<f64>>>,
    params: BTreeMap<ParamId, Vec<f64>>,
}

impl Gradients {
    pub fn wrt(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].as_deref()
    }

    pub fn param(&self, id: ParamId) -> Option<&[f64]> {
        self.params.get(&id).map(Vec::as_slice)
    }

    pub fn params(&self) -> impl Iterator<Item = (ParamId, &[f64])> {
        self.params.iter().map(|(k, v)| (*k, v.as_slice()))
    }

    /// Adds every parameter adjoint into the store's grad slots.
    pub fn accumulate_into(&self, store: &mut ParamStore) {
        for (id, g) in &self.params {
            store.get_mut(*id).accumulate_grad(g);
        }
    }
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    bound: HashMap<ParamId, Var>,
    fault: Option<&'static str>,
}

fn add_into(slot: &mut Option<Vec<f64>>, delta: &[f64]) {
    match slot {
        Some(g) => {
            for (a, b) in g.iter_mut().zip(delta) {
                *a += b;
            }
        }
        None => *slot = Some(delta.to_vec()),
    }
}

fn add_owned(slot: &mut Option<Vec<f64>>, delta: Vec<f64>) {
    match slot {
        Some(g) => {
            for (a, b) in g.iter_mut().zip(&delta) {
                *a += b;
            }
        }
        None => *slot = Some(delta),
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    /// Mutation hook for the gradient checker's self-test: scales the adjoint
    /// flowing into every node of the named op by 1.5.
    #[doc(hidden)]
    pub fn inject_adjoint_fault(&mut self, op_name: &'static str) {
        self.fault = Some(op_name);
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<f64>, op: Op) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        self.nodes.push(Node {
            shape,
            value,
            op,
            param: None,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value[0]
    }

    pub fn tensor(&self, v: Var) -> Tensor {
        let n = &self.nodes[v.0];
        Tensor::new(&n.shape, n.value.clone()).expect("node shape is consistent")
    }

    /// Records a constant leaf (no parameter binding).
    pub fn constant(&mut self, t: &Tensor) -> Var {
        self.push(t.shape().to_vec(), t.data().to_vec(), Op::Leaf)
    }

    pub fn constant_scalar(&mut self, v: f64) -> Var {
        self.push(vec![1], vec![v], Op::Leaf)
    }

    /// Binds a stored parameter as a leaf; repeated calls return the same node.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&v) = self.bound.get(&id) {
            return v;
        }
        let t = store.get(id);
        let v = self.push(t.shape().to_vec(), t.data().to_vec(), Op::Leaf);
        if t.requires_grad() {
            self.nodes[v.0].param = Some(id);
        }
        self.bound.insert(id, v);
        v
    }

    /// `x · w` over the trailing dimension of `x`.
    pub fn matmul(&mut self, x: Var, w: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        let (m, k) = rows_cols(&xs);
        if ws.len() != 2 || ws[0] != k {
            return Err(Error::shape("linear", &xs, &ws));
        }
        let n = ws[1];
        let mut out = vec![0.0; m * n];
        kernels::gemm(m, k, n, self.value(x), false, self.value(w), false, 0.0, &mut out);
        let mut shape = xs;
        *shape.last_mut().unwrap() = n;
        Ok(self.push(shape, out, Op::MatMul { x, w }))
    }

    /// Adds `b` along the trailing dimension.
    pub fn add_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let (_, d) = rows_cols(&xs);
        if self.shape(b).iter().product::<usize>() != d {
            return Err(Error::shape("add_bias", &xs, self.shape(b)));
        }
        let bv = self.value(b);
        let out = self
            .value(x)
            .iter()
            .enumerate()
            .map(|(i, v)| v + bv[i % d])
            .collect();
        Ok(self.push(xs, out, Op::AddBias { x, b }))
    }

    /// `x · w + b`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let y = self.matmul(x, w)?;
        match b {
            Some(b) => self.add_bias(y, b),
            None => Ok(y),
        }
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<Vec<usize>> {
        let sa = self.shape(a);
        let sb = self.shape(b);
        if sa.iter().product::<usize>() != sb.iter().product::<usize>() {
            return Err(Error::shape(op, sa, sb));
        }
        Ok(sa.to_vec())
    }

    fn zip_with(&self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
        self.value(a)
            .iter()
            .zip(self.value(b))
            .map(|(&x, &y)| f(x, y))
            .collect()
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let shape = self.same_shape("add", a, b)?;
        let out = self.zip_with(a, b, |x, y| x + y);
        Ok(self.push(shape, out, Op::Add { a, b }))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let shape = self.same_shape("sub", a, b)?;
        let out = self.zip_with(a, b, |x, y| x - y);
        Ok(self.push(shape, out, Op::Sub { a, b }))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let shape = self.same_shape("mul", a, b)?;
        let out = self.zip_with(a, b, |x, y| x * y);
        Ok(self.push(shape, out, Op::Mul { a, b }))
    }

    /// Multiplies each column `j` of `x` by `s[j]` (trailing-dimension broadcast).
    pub fn scale_cols(&mut self, x: Var, s: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let (_, d) = rows_cols(&xs);
        if self.shape(s).iter().product::<usize>() != d {
            return Err(Error::shape("scale_cols", &xs, self.shape(s)));
        }
        let sv = self.value(s);
        let out = self
            .value(x)
            .iter()
            .enumerate()
            .map(|(i, v)| v * sv[i % d])
            .collect();
        Ok(self.push(xs, out, Op::ScaleCols { x, s }))
    }

    /// Multiplies every entry of `x` by the single-element node `s`.
    pub fn scale_by(&mut self, s: Var, x: Var) -> Result<Var> {
        if self.value(s).len() != 1 {
            return Err(Error::shape("scale_by", self.shape(s), &[1]));
        }
        let k = self.scalar(s);
        let out = self.value(x).iter().map(|v| v * k).collect();
        let shape = self.shape(x).to_vec();
        Ok(self.push(shape, out, Op::ScaleBy { s, x }))
    }

    /// `x · mul + add` with constant scalars.
    pub fn affine(&mut self, x: Var, mul: f64, add: f64) -> Var {
        let n = self.value(x).len();
        self.affine_elementwise(x, vec![mul; n], vec![add; n])
            .expect("lengths match")
    }

    /// `x[i] · mul[i] + add[i]` with constant vectors.
    pub fn affine_elementwise(&mut self, x: Var, mul: Vec<f64>, add: Vec<f64>) -> Result<Var> {
        let n = self.value(x).len();
        if mul.len() != n || add.len() != n {
            return Err(Error::shape("affine", self.shape(x), &[mul.len(), add.len()]));
        }
        let out = self
            .value(x)
            .iter()
            .zip(mul.iter().zip(&add))
            .map(|(v, (m, a))| v * m + a)
            .collect();
        let shape = self.shape(x).to_vec();
        Ok(self.push(shape, out, Op::Affine { x, mul }))
    }

    pub fn activation(&mut self, x: Var, kind: Activation) -> Var {
        let out = self.value(x).iter().map(|&v| kind.apply(v)).collect();
        let shape = self.shape(x).to_vec();
        self.push(shape, out, Op::Act { x, kind })
    }

    pub fn silu(&mut self, x: Var) -> Var {
        self.activation(x, Activation::Silu)
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        self.activation(x, Activation::Gelu)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.activation(x, Activation::Sigmoid)
    }

    pub fn softplus(&mut self, x: Var) -> Var {
        self.activation(x, Activation::Softplus)
    }

    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let (_, d) = rows_cols(&xs);
        if d == 0 || eps <= 0.0 {
            return Err(Error::Param(format!("layer_norm needs D >= 1 and eps > 0, got D={d}, eps={eps}")));
        }
        if self.value(gamma).len() != d || self.value(beta).len() != d {
            return Err(Error::shape("layer_norm", &xs, self.shape(gamma)));
        }
        let (out, xhat, inv_std) =
            kernels::layer_norm_forward(self.value(x), d, self.value(gamma), self.value(beta), eps);
        let op = Op::LayerNorm {
            x,
            gamma,
            beta,
            xhat,
            inv_std,
        };
        Ok(self.push(xs, out, op))
    }

    /// Depthwise 1-D convolution along rows of `x: [L, D]` with `kernel: [K, D]`.
    pub fn depthwise_conv1d(&mut self, x: Var, kernel: Var, causal: bool) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ks = self.shape(kernel).to_vec();
        if xs.len() != 2 || ks.len() != 2 || ks[1] != xs[1] {
            return Err(Error::shape("depthwise_conv1d", &xs, &ks));
        }
        if ks[0] == 0 {
            return Err(Error::Param("depthwise_conv1d kernel length must be >= 1".into()));
        }
        let out = kernels::depthwise_conv1d_forward(
            self.value(x),
            self.value(kernel),
            xs[0],
            xs[1],
            ks[0],
            causal,
        );
        Ok(self.push(xs, out, Op::Conv1d { x, kernel, causal }))
    }

    /// Reverses the order of the rows of a `[L, D]` node.
    pub fn reverse_rows(&mut self, x: Var) -> Var {
        let shape = self.shape(x).to_vec();
        let (rows, d) = rows_cols(&shape);
        let src = self.value(x);
        let mut out = Vec::with_capacity(src.len());
        for r in (0..rows).rev() {
            out.extend_from_slice(&src[r * d..(r + 1) * d]);
        }
        self.push(shape, out, Op::ReverseRows { x })
    }

    /// Concatenates `[L, a_i]` nodes along the trailing dimension.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let rows = rows_cols(self.shape(parts[0])).0;
        let mut width = 0;
        for &p in parts {
            let (r, c) = rows_cols(self.shape(p));
            if r != rows {
                return Err(Error::shape("concat_cols", self.shape(parts[0]), self.shape(p)));
            }
            width += c;
        }
        let mut out = Vec::with_capacity(rows * width);
        for r in 0..rows {
            for &p in parts {
                let c = rows_cols(self.shape(p)).1;
                out.extend_from_slice(&self.value(p)[r * c..(r + 1) * c]);
            }
        }
        let mut shape = self.shape(parts[0]).to_vec();
        *shape.last_mut().unwrap() = width;
        Ok(self.push(shape, out, Op::ConcatCols { parts: parts.to_vec() }))
    }

    /// Stacks `[L_i, D]` nodes along the leading dimension.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let d = rows_cols(self.shape(parts[0])).1;
        let mut rows = 0;
        let mut out = Vec::new();
        for &p in parts {
            let (r, c) = rows_cols(self.shape(p));
            if c != d {
                return Err(Error::shape("concat_rows", self.shape(parts[0]), self.shape(p)));
            }
            rows += r;
            out.extend_from_slice(self.value(p));
        }
        Ok(self.push(vec![rows, d], out, Op::ConcatRows { parts: parts.to_vec() }))
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (rows, d) = rows_cols(self.shape(x));
        if start + len > rows {
            return Err(Error::shape("slice_rows", self.shape(x), &[start, len]));
        }
        let out = self.value(x)[start * d..(start + len) * d].to_vec();
        Ok(self.push(vec![len, d], out, Op::SliceRows { x, start }))
    }

    /// Gathers flat indices into a 1-D node.
    pub fn select(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let n = self.value(x).len();
        if let Some(&bad) = idx.iter().find(|&&i| i >= n) {
            return Err(Error::shape("select", self.shape(x), &[bad]));
        }
        let src = self.value(x);
        let out = idx.iter().map(|&i| src[i]).collect();
        Ok(self.push(vec![idx.len()], out, Op::Select { x, idx: idx.to_vec() }))
    }

    /// Mean over rows: `[L, D] -> [D]`.
    pub fn mean_rows(&mut self, x: Var) -> Var {
        let (rows, d) = rows_cols(self.shape(x));
        let mut out = vec![0.0; d];
        for row in self.value(x).chunks(d) {
            for (o, v) in out.iter_mut().zip(row) {
                *o += v;
            }
        }
        out.iter_mut().for_each(|o| *o /= rows as f64);
        self.push(vec![d], out, Op::MeanRows { x })
    }

    /// Euclidean norm of all entries.
    pub fn norm2(&mut self, x: Var) -> Var {
        let n = self.value(x).iter().map(|v| v * v).sum::<f64>().sqrt();
        self.push(vec![1], vec![n], Op::Norm2 { x })
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).iter().sum();
        self.push(vec![1], vec![s], Op::Sum { x })
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).len() as f64;
        let s = self.sum(x);
        self.affine(s, 1.0 / n, 0.0)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        if shape.iter().product::<usize>() != self.value(x).len() {
            return Err(Error::shape("reshape", self.shape(x), shape));
        }
        let out = self.value(x).to_vec();
        Ok(self.push(shape.to_vec(), out, Op::Reshape { x }))
    }

    /// Same-padded `k × k` neighborhood gather of an `[h, w, c]` grid.
    pub fn im2col(&mut self, x: Var, k: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 3 || k % 2 == 0 {
            return Err(Error::shape("im2col", &s, &[k]));
        }
        let (h, w, c) = (s[0], s[1], s[2]);
        let out = kernels::im2col(self.value(x), h, w, c, k);
        Ok(self.push(vec![h * w, k * k * c], out, Op::Im2col { x, h, w, c, k }))
    }

    /// Non-overlapping patch flattening of an `[s, s, c]` grid.
    pub fn patchify(&mut self, x: Var, patch: usize) -> Result<Var> {
        let sh = self.shape(x).to_vec();
        if sh.len() != 3 || sh[0] != sh[1] || patch == 0 || sh[0] % patch != 0 {
            return Err(Error::shape("patchify", &sh, &[patch]));
        }
        let (s, c) = (sh[0], sh[2]);
        let g = s / patch;
        let out = kernels::patchify(self.value(x), s, c, patch);
        Ok(self.push(vec![g * g, patch * patch * c], out, Op::Patchify { x, s, c, patch }))
    }

    /// Records a fused op whose forward value was computed by the caller.
    pub fn custom(
        &mut self,
        inputs: &[Var],
        shape: Vec<usize>,
        value: Vec<f64>,
        op: Box<dyn CustomOp>,
    ) -> Var {
        self.push(
            shape,
            value,
            Op::Custom {
                inputs: inputs.to_vec(),
                op,
            },
        )
    }

    /// Backward sweep from a scalar node; returns every reached adjoint.
    pub fn gradients(&self, loss: Var) -> Result<Gradients> {
        if self.nodes[loss.0].value.len() != 1 {
            return Err(Error::NotScalar(self.nodes[loss.0].shape.clone()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(mut dy) = grads[i].take() else {
                continue;
            };
            let node = &self.nodes[i];
            if self.fault == Some(node.op.name()) {
                dy.iter_mut().for_each(|g| *g *= 1.5);
            }
            self.backward_node(node, &dy, &mut grads);
            grads[i] = Some(dy);
        }
        let mut params = BTreeMap::new();
        for (i, node) in self.nodes.iter().enumerate() {
            if let (Some(id), Some(g)) = (node.param, grads[i].as_ref()) {
                params.insert(id, g.clone());
            }
        }
        Ok(Gradients {
            nodes: grads,
            params,
        })
    }

    /// Adds d(loss)/d(param) into every reachable parameter's grad slot.
    /// Calling it again on the same graph adds the same amount again.
    pub fn backward(&self, loss: Var, store: &mut ParamStore) -> Result<()> {
        self.gradients(loss)?.accumulate_into(store);
        Ok(())
    }

    fn backward_node(&self, node: &Node, dy: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let val = |v: Var| self.nodes[v.0].value.as_slice();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul { x, w } => {
                let (m, k) = rows_cols(&self.nodes[x.0].shape);
                let n = self.nodes[w.0].shape[1];
                let mut dx = vec![0.0; m * k];
                kernels::gemm(m, n, k, dy, false, val(*w), true, 0.0, &mut dx);
                let mut dw = vec![0.0; k * n];
                kernels::gemm(k, m, n, val(*x), true, dy, false, 0.0, &mut dw);
                add_owned(&mut grads[x.0], dx);
                add_owned(&mut grads[w.0], dw);
            }
            Op::AddBias { x, b } => {
                let d = self.nodes[b.0].value.len();
                let mut db = vec![0.0; d];
                for row in dy.chunks(d) {
                    for (o, g) in db.iter_mut().zip(row) {
                        *o += g;
                    }
                }
                add_into(&mut grads[x.0], dy);
                add_owned(&mut grads[b.0], db);
            }
            Op::Add { a, b } => {
                add_into(&mut grads[a.0], dy);
                add_into(&mut grads[b.0], dy);
            }
            Op::Sub { a, b } => {
                add_into(&mut grads[a.0], dy);
                add_owned(&mut grads[b.0], dy.iter().map(|g| -g).collect());
            }
            Op::Mul { a, b } => {
                let da = dy.iter().zip(val(*b)).map(|(g, v)| g * v).collect();
                let db = dy.iter().zip(val(*a)).map(|(g, v)| g * v).collect();
                add_owned(&mut grads[a.0], da);
                add_owned(&mut grads[b.0], db);
            }
            Op::ScaleCols { x, s } => {
                let sv = val(*s);
                let d = sv.len();
                let xv = val(*x);
                let mut ds = vec![0.0; d];
                let mut dx = vec![0.0; dy.len()];
                for (i, g) in dy.iter().enumerate() {
                    dx[i] = g * sv[i % d];
                    ds[i % d] += g * xv[i];
                }
                add_owned(&mut grads[x.0], dx);
                add_owned(&mut grads[s.0], ds);
            }
            Op::ScaleBy { s, x } => {
                let k = val(*s)[0];
                let ds: f64 = dy.iter().zip(val(*x)).map(|(g, v)| g * v).sum();
                add_owned(&mut grads[x.0], dy.iter().map(|g| g * k).collect());
                add_owned(&mut grads[s.0], vec![ds]);
            }
            Op::Affine { x, mul } => {
                add_owned(&mut grads[x.0], dy.iter().zip(mul).map(|(g, m)| g * m).collect());
            }
            Op::Act { x, kind } => {
                let dx = dy
                    .iter()
                    .zip(val(*x))
                    .map(|(g, &v)| g * kind.derivative(v))
                    .collect();
                add_owned(&mut grads[x.0], dx);
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let d = self.nodes[gamma.0].value.len();
                let (dx, dgamma, dbeta) =
                    kernels::layer_norm_backward(dy, xhat, inv_std, val(*gamma), d);
                add_owned(&mut grads[x.0], dx);
                add_owned(&mut grads[gamma.0], dgamma);
                add_owned(&mut grads[beta.0], dbeta);
            }
            Op::Conv1d { x, kernel, causal } => {
                let s = &self.nodes[x.0].shape;
                let k = self.nodes[kernel.0].shape[0];
                let (dx, dk) = kernels::depthwise_conv1d_backward(
                    dy,
                    val(*x),
                    val(*kernel),
                    s[0],
                    s[1],
                    k,
                    *causal,
                );
                add_owned(&mut grads[x.0], dx);
                add_owned(&mut grads[kernel.0], dk);
            }
            Op::ReverseRows { x } => {
                let (rows, d) = rows_cols(&node.shape);
                let mut dx = Vec::with_capacity(dy.len());
                for r in (0..rows).rev() {
                    dx.extend_from_slice(&dy[r * d..(r + 1) * d]);
                }
                add_owned(&mut grads[x.0], dx);
            }
            Op::ConcatCols { parts } => {
                let (rows, width) = rows_cols(&node.shape);
                let mut off = 0;
                for p in parts {
                    let c = rows_cols(&self.nodes[p.0].shape).1;
                    let mut dp = Vec::with_capacity(rows * c);
                    for r in 0..rows {
                        dp.extend_from_slice(&dy[r * width + off..r * width + off + c]);
                    }
                    add_owned(&mut grads[p.0], dp);
                    off += c;
                }
            }
            Op::ConcatRows { parts } => {
                let mut off = 0;
                for p in parts {
                    let n = self.nodes[p.0].value.len();
                    add_into(&mut grads[p.0], &dy[off..off + n]);
                    off += n;
                }
            }
            Op::SliceRows { x, start } => {
                let d = rows_cols(&node.shape).1;
                let mut dx = vec![0.0; self.nodes[x.0].value.len()];
                dx[start * d..start * d + dy.len()].copy_from_slice(dy);
                add_owned(&mut grads[x.0], dx);
            }
            Op::Select { x, idx } => {
                let mut dx = vec![0.0; self.nodes[x.0].value.len()];
                for (g, &i) in dy.iter().zip(idx) {
                    dx[i] += g;
                }
                add_owned(&mut grads[x.0], dx);
            }
            Op::MeanRows { x } => {
                let (rows, d) = rows_cols(&self.nodes[x.0].shape);
                let inv = 1.0 / rows as f64;
                let dx = (0..rows * d).map(|i| dy[i % d] * inv).collect();
                add_owned(&mut grads[x.0], dx);
            }
            Op::Norm2 { x } => {
                let n = node.value[0];
                let dx = if n > 0.0 {
                    val(*x).iter().map(|v| dy[0] * v / n).collect()
                } else {
                    vec![0.0; self.nodes[x.0].value.len()]
                };
                add_owned(&mut grads[x.0], dx);
            }
            Op::Sum { x } => {
                add_owned(&mut grads[x.0], vec![dy[0]; self.nodes[x.0].value.len()]);
            }
            Op::Reshape { x } => add_into(&mut grads[x.0], dy),
            Op::Im2col { x, h, w, c, k } => {
                add_owned(&mut grads[x.0], kernels::im2col_backward(dy, *h, *w, *c, *k));
            }
            Op::Patchify { x, s, c, patch } => {
                add_owned(&mut grads[x.0], kernels::unpatchify(dy, *s, *c, *patch));
            }
            Op::Custom { inputs, op } => {
                let ins: Vec<&[f64]> = inputs.iter().map(|v| val(*v)).collect();
                for (v, g) in inputs.iter().zip(op.backward(&ins, &node.value, dy)) {
                    if let Some(g) = g {
                        add_owned(&mut grads[v.0], g);
                    }
                }
            }
        }
    }
}
