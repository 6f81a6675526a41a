//! Dense row-major `f64` tensors with a small reverse-mode gradient tape.
//!
//! Every operation returns a new immutable [`Tensor`]. When any operand
//! requires gradients the result records its parents together with a
//! backward closure; [`Tensor::backward`] walks that graph in reverse
//! topological order and accumulates into the grad-requiring leaves.
//!
//! The op set is deliberately narrow: exactly what relational
//! distillation, prototype attention and their verification need.

use std::collections::{HashMap, HashSet};
use std::fmt;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};

use rand::Rng;

use crate::error::{Error, Result};

/// Maps the upstream gradient of an op's output to one optional gradient
/// per parent (same order as the parents were given).
pub type BackwardFn = Box<dyn Fn(&[f64]) -> Vec<Option<Vec<f64>>> + Send + Sync>;

static NEXT_ID: AtomicU64 = AtomicU64::new(0);

struct GradFn {
    parents: Vec<Tensor>,
    backward: BackwardFn,
}

struct Node {
    id: u64,
    shape: Vec<usize>,
    data: Vec<f64>,
    requires_grad: bool,
    grad: Mutex<Option<Vec<f64>>>,
    grad_fn: Option<GradFn>,
}

/// Immutable dense tensor. Cloning is cheap (shared storage).
#[derive(Clone)]
pub struct Tensor {
    node: Arc<Node>,
}

/// How an elementwise loss is reduced to a scalar.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Reduction {
    Mean,
    Sum,
}

/// Sparse interpolation weights for one output coordinate along one axis.
pub type AxisWeights = Vec<(usize, f64)>;

fn numel_of(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl Tensor {
    fn from_parts(
        shape: Vec<usize>,
        data: Vec<f64>,
        requires_grad: bool,
        grad_fn: Option<GradFn>,
    ) -> Self {
        debug_assert_eq!(numel_of(&shape), data.len());
        Tensor {
            node: Arc::new(Node {
                id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
                shape,
                data,
                requires_grad,
                grad: Mutex::new(None),
                grad_fn,
            }),
        }
    }

    /// Constant tensor. Every dimension must be positive and every value
    /// finite. An empty `shape` denotes a scalar.
    pub fn new(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        if let Some(d) = shape.iter().position(|&d| d == 0) {
            return Err(Error::dim(format!(
                "dimension {d} of shape {shape:?} is zero"
            )));
        }
        let n = shape
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| Error::dim(format!("shape {shape:?} overflows")))?;
        if n != data.len() {
            return Err(Error::dim(format!(
                "shape {shape:?} needs {n} values, got {}",
                data.len()
            )));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::Validation(format!(
                "non-finite value {} at flat index {i}",
                data[i]
            )));
        }
        Ok(Self::from_parts(shape.to_vec(), data, false, None))
    }

    /// Grad-requiring leaf.
    pub fn leaf(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        Ok(Self::new(shape, data)?.into_leaf())
    }

    pub fn scalar(value: f64) -> Self {
        Self::from_parts(Vec::new(), vec![value], false, None)
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, 1.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        assert!(shape.iter().all(|&d| d > 0), "zero dimension in {shape:?}");
        Self::from_parts(shape.to_vec(), vec![value; numel_of(shape)], false, None)
    }

    pub fn eye(n: usize) -> Self {
        let mut data = vec![0.0; n * n];
        for i in 0..n {
            data[i * n + i] = 1.0;
        }
        Self::from_parts(vec![n, n], data, false, None)
    }

    /// Uniform samples in `[lo, hi)`.
    pub fn rand_uniform<R: Rng + ?Sized>(shape: &[usize], lo: f64, hi: f64, rng: &mut R) -> Self {
        assert!(shape.iter().all(|&d| d > 0), "zero dimension in {shape:?}");
        let data = (0..numel_of(shape))
            .map(|_| rng.random_range(lo..hi))
            .collect();
        Self::from_parts(shape.to_vec(), data, false, None)
    }

    /// Builds a tensor produced by a custom differentiable operation.
    ///
    /// `backward` receives the gradient of the output and must return one
    /// entry per parent. Used by downstream code and by the gradient
    /// checker's negative controls.
    pub fn from_op(
        shape: &[usize],
        data: Vec<f64>,
        parents: Vec<Tensor>,
        backward: BackwardFn,
    ) -> Result<Self> {
        if numel_of(shape) != data.len() {
            return Err(Error::dim(format!(
                "shape {shape:?} needs {} values, got {}",
                numel_of(shape),
                data.len()
            )));
        }
        Ok(Self::op_result(shape.to_vec(), data, parents, backward))
    }

    fn op_result(
        shape: Vec<usize>,
        data: Vec<f64>,
        parents: Vec<Tensor>,
        backward: BackwardFn,
    ) -> Self {
        if parents.iter().any(Tensor::requires_grad) {
            Self::from_parts(shape, data, true, Some(GradFn { parents, backward }))
        } else {
            Self::from_parts(shape, data, false, None)
        }
    }

    /// Fresh grad-requiring leaf holding a copy of this tensor's values.
    pub fn into_leaf(self) -> Self {
        Self::from_parts(self.node.shape.clone(), self.node.data.clone(), true, None)
    }

    /// Constant copy cut from the tape.
    pub fn detach(&self) -> Self {
        Self::from_parts(self.node.shape.clone(), self.node.data.clone(), false, None)
    }

    pub fn shape(&self) -> &[usize] {
        &self.node.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.node.data
    }

    pub fn to_vec(&self) -> Vec<f64> {
        self.node.data.clone()
    }

    pub fn numel(&self) -> usize {
        self.node.data.len()
    }

    pub fn ndim(&self) -> usize {
        self.node.shape.len()
    }

    pub fn requires_grad(&self) -> bool {
        self.node.requires_grad
    }

    pub fn is_leaf(&self) -> bool {
        self.node.grad_fn.is_none()
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> Result<f64> {
        if self.numel() != 1 {
            return Err(Error::contract(format!(
                "item() on tensor of shape {:?}",
                self.shape()
            )));
        }
        Ok(self.node.data[0])
    }

    /// Same storage identity (not value equality).
    pub fn same_storage(&self, other: &Tensor) -> bool {
        Arc::ptr_eq(&self.node, &other.node)
    }

    /// Accumulated gradient of a leaf, if any backward pass reached it.
    pub fn grad(&self) -> Option<Tensor> {
        let guard = self.node.grad.lock().expect("grad lock poisoned");
        guard
            .as_ref()
            .map(|g| Self::from_parts(self.node.shape.clone(), g.clone(), false, None))
    }

    pub fn zero_grad(&self) {
        *self.node.grad.lock().expect("grad lock poisoned") = None;
    }

    /// Reverse-mode pass from a one-element tensor. Gradients accumulate
    /// into every grad-requiring leaf; call [`Tensor::zero_grad`] to reset.
    pub fn backward(&self) -> Result<()> {
        if self.numel() != 1 {
            return Err(Error::contract(format!(
                "backward() needs a scalar loss, got shape {:?}",
                self.shape()
            )));
        }
        if !self.requires_grad() {
            return Ok(());
        }

        // post-order DFS over the grad-requiring subgraph
        let mut order: Vec<Tensor> = Vec::new();
        let mut visited: HashSet<u64> = HashSet::new();
        let mut stack: Vec<(Tensor, bool)> = vec![(self.clone(), false)];
        while let Some((t, expanded)) = stack.pop() {
            if expanded {
                order.push(t);
                continue;
            }
            if !visited.insert(t.node.id) {
                continue;
            }
            stack.push((t.clone(), true));
            if let Some(f) = &t.node.grad_fn {
                for p in &f.parents {
                    if p.requires_grad() && !visited.contains(&p.node.id) {
                        stack.push((p.clone(), false));
                    }
                }
            }
        }

        let mut grads: HashMap<u64, Vec<f64>> = HashMap::new();
        grads.insert(self.node.id, vec![1.0]);
        for t in order.iter().rev() {
            let Some(g) = grads.remove(&t.node.id) else {
                continue;
            };
            match &t.node.grad_fn {
                None => {
                    let mut slot = t.node.grad.lock().expect("grad lock poisoned");
                    match slot.as_mut() {
                        Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                        None => *slot = Some(g),
                    }
                }
                Some(f) => {
                    let parent_grads = (f.backward)(&g);
                    debug_assert_eq!(parent_grads.len(), f.parents.len());
                    for (p, pg) in f.parents.iter().zip(parent_grads) {
                        let Some(pg) = pg else { continue };
                        if !p.requires_grad() {
                            continue;
                        }
                        debug_assert_eq!(pg.len(), p.numel());
                        match grads.get_mut(&p.node.id) {
                            Some(acc) => acc.iter_mut().zip(&pg).for_each(|(a, b)| *a += b),
                            None => {
                                grads.insert(p.node.id, pg);
                            }
                        }
                    }
                }
            }
        }
        Ok(())
    }

    fn expect_2d(&self, op: &str) -> Result<(usize, usize)> {
        match self.shape() {
            &[r, c] => Ok((r, c)),
            s => Err(Error::dim(format!(
                "{op} expects a 2-D tensor, got shape {s:?}"
            ))),
        }
    }

    fn expect_same_shape(&self, other: &Tensor, op: &str) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(Error::dim(format!(
                "{op}: shapes {:?} and {:?} differ",
                self.shape(),
                other.shape()
            )));
        }
        Ok(())
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        if shape.contains(&0) || numel_of(shape) != self.numel() {
            return Err(Error::dim(format!(
                "cannot reshape {:?} into {shape:?}",
                self.shape()
            )));
        }
        Ok(Self::op_result(
            shape.to_vec(),
            self.to_vec(),
            vec![self.clone()],
            Box::new(|g| vec![Some(g.to_vec())]),
        ))
    }

    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        let (m, k) = self.expect_2d("matmul")?;
        let (k2, n) = other.expect_2d("matmul")?;
        if k != k2 {
            return Err(Error::dim(format!(
                "matmul: inner dimensions of {:?} and {:?} disagree",
                self.shape(),
                other.shape()
            )));
        }
        let out = matmul_raw(self.data(), other.data(), m, k, n);
        let a = self.clone();
        let b = other.clone();
        Ok(Self::op_result(
            vec![m, n],
            out,
            vec![self.clone(), other.clone()],
            Box::new(move |g| {
                let ga = a.requires_grad().then(|| {
                    // G (m×n) · Bᵀ (n×k)
                    let bt = transpose_raw(b.data(), k, n);
                    matmul_raw(g, &bt, m, n, k)
                });
                let gb = b.requires_grad().then(|| {
                    let at = transpose_raw(a.data(), m, k);
                    matmul_raw(&at, g, k, m, n)
                });
                vec![ga, gb]
            }),
        ))
    }

    pub fn transpose(&self) -> Result<Tensor> {
        let (r, c) = self.expect_2d("transpose")?;
        Ok(Self::op_result(
            vec![c, r],
            transpose_raw(self.data(), r, c),
            vec![self.clone()],
            Box::new(move |g| vec![Some(transpose_raw(g, c, r))]),
        ))
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        self.expect_same_shape(other, "add")?;
        let out = self
            .data()
            .iter()
            .zip(other.data())
            .map(|(a, b)| a + b)
            .collect();
        Ok(Self::op_result(
            self.shape().to_vec(),
            out,
            vec![self.clone(), other.clone()],
            Box::new(|g| vec![Some(g.to_vec()), Some(g.to_vec())]),
        ))
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        self.expect_same_shape(other, "sub")?;
        let out = self
            .data()
            .iter()
            .zip(other.data())
            .map(|(a, b)| a - b)
            .collect();
        Ok(Self::op_result(
            self.shape().to_vec(),
            out,
            vec![self.clone(), other.clone()],
            Box::new(|g| vec![Some(g.to_vec()), Some(g.iter().map(|v| -v).collect())]),
        ))
    }

    /// Elementwise product.
    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        self.expect_same_shape(other, "mul")?;
        let out = self
            .data()
            .iter()
            .zip(other.data())
            .map(|(a, b)| a * b)
            .collect();
        let a = self.clone();
        let b = other.clone();
        Ok(Self::op_result(
            self.shape().to_vec(),
            out,
            vec![self.clone(), other.clone()],
            Box::new(move |g| {
                let ga = g.iter().zip(b.data()).map(|(g, b)| g * b).collect();
                let gb = g.iter().zip(a.data()).map(|(g, a)| g * a).collect();
                vec![Some(ga), Some(gb)]
            }),
        ))
    }

    pub fn scale(&self, factor: f64) -> Tensor {
        Self::op_result(
            self.shape().to_vec(),
            self.data().iter().map(|v| v * factor).collect(),
            vec![self.clone()],
            Box::new(move |g| vec![Some(g.iter().map(|v| v * factor).collect())]),
        )
    }

    /// `n×d` plus a length-`d` row vector broadcast over rows.
    pub fn add_row(&self, row: &Tensor) -> Result<Tensor> {
        let (n, d) = self.expect_2d("add_row")?;
        if row.numel() != d || row.ndim() != 1 {
            return Err(Error::dim(format!(
                "add_row: row of shape {:?} does not match {:?}",
                row.shape(),
                self.shape()
            )));
        }
        let mut out = self.to_vec();
        for chunk in out.chunks_mut(d) {
            chunk.iter_mut().zip(row.data()).for_each(|(o, r)| *o += r);
        }
        Ok(Self::op_result(
            vec![n, d],
            out,
            vec![self.clone(), row.clone()],
            Box::new(move |g| {
                let mut gr = vec![0.0; d];
                for chunk in g.chunks(d) {
                    gr.iter_mut().zip(chunk).for_each(|(a, b)| *a += b);
                }
                vec![Some(g.to_vec()), Some(gr)]
            }),
        ))
    }

    pub fn sum(&self) -> Tensor {
        let n = self.numel();
        Self::op_result(
            Vec::new(),
            vec![self.data().iter().sum()],
            vec![self.clone()],
            Box::new(move |g| vec![Some(vec![g[0]; n])]),
        )
    }

    pub fn mean(&self) -> Tensor {
        self.sum().scale(1.0 / self.numel() as f64)
    }

    /// Contiguous slice `[start, start+len)` along the first axis.
    pub fn narrow(&self, start: usize, len: usize) -> Result<Tensor> {
        let Some(&first) = self.shape().first() else {
            return Err(Error::dim("narrow on a scalar"));
        };
        if len == 0 || start + len > first {
            return Err(Error::dim(format!(
                "narrow [{start}, {}) out of range for first axis of {:?}",
                start + len,
                self.shape()
            )));
        }
        let inner: usize = self.shape()[1..].iter().product();
        let mut shape = self.shape().to_vec();
        shape[0] = len;
        let total = self.numel();
        let lo = start * inner;
        let hi = lo + len * inner;
        Ok(Self::op_result(
            shape,
            self.data()[lo..hi].to_vec(),
            vec![self.clone()],
            Box::new(move |g| {
                let mut full = vec![0.0; total];
                full[lo..hi].copy_from_slice(g);
                vec![Some(full)]
            }),
        ))
    }

    /// Sub-tensor at position `index` of the first axis, with that axis removed.
    pub fn index(&self, index: usize) -> Result<Tensor> {
        let sliced = self.narrow(index, 1)?;
        let shape = self.shape()[1..].to_vec();
        sliced.reshape(&shape)
    }

    /// Columns `[start, start+len)` of a 2-D tensor.
    pub fn narrow_cols(&self, start: usize, len: usize) -> Result<Tensor> {
        let (r, c) = self.expect_2d("narrow_cols")?;
        if len == 0 || start + len > c {
            return Err(Error::dim(format!(
                "narrow_cols [{start}, {}) out of range for {:?}",
                start + len,
                self.shape()
            )));
        }
        let mut out = Vec::with_capacity(r * len);
        for row in self.data().chunks(c) {
            out.extend_from_slice(&row[start..start + len]);
        }
        Ok(Self::op_result(
            vec![r, len],
            out,
            vec![self.clone()],
            Box::new(move |g| {
                let mut full = vec![0.0; r * c];
                for (i, grow) in g.chunks(len).enumerate() {
                    full[i * c + start..i * c + start + len].copy_from_slice(grow);
                }
                vec![Some(full)]
            }),
        ))
    }

    /// Horizontal concatenation of 2-D tensors with equal row counts.
    pub fn concat_cols(parts: &[Tensor]) -> Result<Tensor> {
        let Some(first) = parts.first() else {
            return Err(Error::contract("concat_cols of zero tensors"));
        };
        let (r, _) = first.expect_2d("concat_cols")?;
        let mut widths = Vec::with_capacity(parts.len());
        for p in parts {
            let (pr, pc) = p.expect_2d("concat_cols")?;
            if pr != r {
                return Err(Error::dim(format!(
                    "concat_cols: row counts {:?} and {:?} differ",
                    first.shape(),
                    p.shape()
                )));
            }
            widths.push(pc);
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(r * total);
        for i in 0..r {
            for (p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&p.data()[i * w..(i + 1) * w]);
            }
        }
        Ok(Self::op_result(
            vec![r, total],
            out,
            parts.to_vec(),
            Box::new(move |g| {
                let mut offset = 0;
                widths
                    .iter()
                    .map(|&w| {
                        let mut gp = Vec::with_capacity(r * w);
                        for i in 0..r {
                            gp.extend_from_slice(&g[i * total + offset..i * total + offset + w]);
                        }
                        offset += w;
                        Some(gp)
                    })
                    .collect()
            }),
        ))
    }

    /// Row-wise softmax, stabilised by subtracting each row's maximum.
    pub fn softmax_rows(&self) -> Result<Tensor> {
        let (r, c) = self.expect_2d("softmax_rows")?;
        let mut out = Vec::with_capacity(r * c);
        for row in self.data().chunks(c) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = row.iter().map(|v| (v - max).exp()).collect();
            let total: f64 = exps.iter().sum();
            out.extend(exps.into_iter().map(|e| e / total));
        }
        let y = out.clone();
        Ok(Self::op_result(
            vec![r, c],
            out,
            vec![self.clone()],
            Box::new(move |g| {
                let mut gx = Vec::with_capacity(r * c);
                for (yr, gr) in y.chunks(c).zip(g.chunks(c)) {
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    gx.extend(yr.iter().zip(gr).map(|(y, g)| y * (g - dot)));
                }
                vec![Some(gx)]
            }),
        ))
    }

    /// Per-row layer normalisation with population variance, then
    /// `gain * x̂ + bias`.
    pub fn layer_norm(&self, gain: &Tensor, bias: &Tensor, eps: f64) -> Result<Tensor> {
        let (n, d) = self.expect_2d("layer_norm")?;
        if gain.shape() != [d] || bias.shape() != [d] {
            return Err(Error::dim(format!(
                "layer_norm: gain {:?} / bias {:?} do not match width {d}",
                gain.shape(),
                bias.shape()
            )));
        }
        if eps <= 0.0 {
            return Err(Error::contract(format!(
                "layer_norm eps must be > 0, got {eps}"
            )));
        }
        let mut xhat = Vec::with_capacity(n * d);
        let mut inv_std = Vec::with_capacity(n);
        for row in self.data().chunks(d) {
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std.push(is);
            xhat.extend(row.iter().map(|v| (v - mean) * is));
        }
        let out = xhat
            .chunks(d)
            .flat_map(|row| {
                row.iter()
                    .zip(gain.data())
                    .zip(bias.data())
                    .map(|((x, g), b)| g * x + b)
            })
            .collect();
        let gain_c = gain.clone();
        Ok(Self::op_result(
            vec![n, d],
            out,
            vec![self.clone(), gain.clone(), bias.clone()],
            Box::new(move |g| {
                let mut gx = Vec::with_capacity(n * d);
                let mut gg = vec![0.0; d];
                let mut gb = vec![0.0; d];
                for i in 0..n {
                    let gr = &g[i * d..(i + 1) * d];
                    let xr = &xhat[i * d..(i + 1) * d];
                    let dxhat: Vec<f64> =
                        gr.iter().zip(gain_c.data()).map(|(a, b)| a * b).collect();
                    let m1 = dxhat.iter().sum::<f64>() / d as f64;
                    let m2 = dxhat.iter().zip(xr).map(|(a, b)| a * b).sum::<f64>() / d as f64;
                    gx.extend(
                        dxhat
                            .iter()
                            .zip(xr)
                            .map(|(dx, x)| inv_std[i] * (dx - m1 - x * m2)),
                    );
                    for j in 0..d {
                        gg[j] += gr[j] * xr[j];
                        gb[j] += gr[j];
                    }
                }
                vec![Some(gx), Some(gg), Some(gb)]
            }),
        ))
    }

    /// Divides each column of a `C×N` tensor by `max(‖column‖₂, eps)`.
    pub fn l2_normalize_columns(&self, eps: f64) -> Result<Tensor> {
        let (c, n) = self.expect_2d("l2_normalize_columns")?;
        if eps <= 0.0 {
            return Err(Error::contract(format!(
                "l2 normalisation eps must be > 0, got {eps}"
            )));
        }
        let x = self.data();
        let norms: Vec<f64> = (0..n)
            .map(|j| {
                (0..c)
                    .map(|i| x[i * n + j] * x[i * n + j])
                    .sum::<f64>()
                    .sqrt()
            })
            .collect();
        let denom: Vec<f64> = norms.iter().map(|&v| v.max(eps)).collect();
        let out: Vec<f64> = (0..c * n).map(|k| x[k] / denom[k % n]).collect();
        let z = out.clone();
        Ok(Self::op_result(
            vec![c, n],
            out,
            vec![self.clone()],
            Box::new(move |g| {
                let mut gx = vec![0.0; c * n];
                for j in 0..n {
                    if norms[j] > eps {
                        let dot: f64 = (0..c).map(|i| z[i * n + j] * g[i * n + j]).sum();
                        for i in 0..c {
                            gx[i * n + j] = (g[i * n + j] - z[i * n + j] * dot) / norms[j];
                        }
                    } else {
                        for i in 0..c {
                            gx[i * n + j] = g[i * n + j] / eps;
                        }
                    }
                }
                vec![Some(gx)]
            }),
        ))
    }

    /// Square matrix with its diagonal set to exactly zero.
    pub fn mask_diagonal(&self) -> Result<Tensor> {
        let (r, c) = self.expect_2d("mask_diagonal")?;
        if r != c {
            return Err(Error::dim(format!(
                "mask_diagonal needs a square matrix, got {:?}",
                self.shape()
            )));
        }
        let mut out = self.to_vec();
        for i in 0..r {
            out[i * r + i] = 0.0;
        }
        Ok(Self::op_result(
            vec![r, r],
            out,
            vec![self.clone()],
            Box::new(move |g| {
                let mut gx = g.to_vec();
                for i in 0..r {
                    gx[i * r + i] = 0.0;
                }
                vec![Some(gx)]
            }),
        ))
    }

    /// Separable linear resampling of a `C×H×W` map: output cell `(i, j)`
    /// is `Σ_a Σ_b rows[i][a] · cols[j][b] · x[:, a, b]`.
    pub fn separable_resample(&self, rows: &[AxisWeights], cols: &[AxisWeights]) -> Result<Tensor> {
        let &[c, h, w] = self.shape() else {
            return Err(Error::dim(format!(
                "separable_resample expects C×H×W, got {:?}",
                self.shape()
            )));
        };
        let (ho, wo) = (rows.len(), cols.len());
        if ho == 0 || wo == 0 {
            return Err(Error::dim("separable_resample to an empty grid"));
        }
        let in_range = |ws: &[AxisWeights], lim: usize| ws.iter().flatten().all(|&(k, _)| k < lim);
        if !in_range(rows, h) || !in_range(cols, w) {
            return Err(Error::dim(
                "separable_resample weight index outside input grid",
            ));
        }
        let x = self.data();
        let mut out = vec![0.0; c * ho * wo];
        for ch in 0..c {
            let xin = &x[ch * h * w..(ch + 1) * h * w];
            let o = &mut out[ch * ho * wo..(ch + 1) * ho * wo];
            for (i, rw) in rows.iter().enumerate() {
                for (j, cw) in cols.iter().enumerate() {
                    let mut acc = 0.0;
                    for &(a, wa) in rw {
                        for &(b, wb) in cw {
                            acc += wa * wb * xin[a * w + b];
                        }
                    }
                    o[i * wo + j] = acc;
                }
            }
        }
        let rows = rows.to_vec();
        let cols = cols.to_vec();
        Ok(Self::op_result(
            vec![c, ho, wo],
            out,
            vec![self.clone()],
            Box::new(move |g| {
                let mut gx = vec![0.0; c * h * w];
                for ch in 0..c {
                    let gin = &g[ch * ho * wo..(ch + 1) * ho * wo];
                    let gout = &mut gx[ch * h * w..(ch + 1) * h * w];
                    for (i, rw) in rows.iter().enumerate() {
                        for (j, cw) in cols.iter().enumerate() {
                            let gij = gin[i * wo + j];
                            for &(a, wa) in rw {
                                for &(b, wb) in cw {
                                    gout[a * w + b] += wa * wb * gij;
                                }
                            }
                        }
                    }
                }
                vec![Some(gx)]
            }),
        ))
    }
}

/// Smooth-ℓ1 between `pred` and `target`, reduced to a scalar.
///
/// Elementwise `0.5·d²/β` for `|d| < β` and `|d| − 0.5·β` otherwise. Both
/// branches agree in value and slope at `|d| = β`, so the derivative is
/// continuous and no knee convention is needed.
pub fn smooth_l1_with(
    pred: &Tensor,
    target: &Tensor,
    beta: f64,
    reduction: Reduction,
) -> Result<Tensor> {
    pred.expect_same_shape(target, "smooth_l1")?;
    if beta <= 0.0 {
        return Err(Error::contract(format!(
            "smooth_l1 beta must be > 0, got {beta}"
        )));
    }
    let diffs: Vec<f64> = pred
        .data()
        .iter()
        .zip(target.data())
        .map(|(p, t)| p - t)
        .collect();
    let total: f64 = diffs
        .iter()
        .map(|&d| {
            if d.abs() < beta {
                0.5 * d * d / beta
            } else {
                d.abs() - 0.5 * beta
            }
        })
        .sum();
    let norm = match reduction {
        Reduction::Mean => 1.0 / diffs.len() as f64,
        Reduction::Sum => 1.0,
    };
    Ok(Tensor::op_result(
        Vec::new(),
        vec![total * norm],
        vec![pred.clone(), target.clone()],
        Box::new(move |g| {
            let gp: Vec<f64> = diffs
                .iter()
                .map(|&d| {
                    let slope = if d.abs() < beta { d / beta } else { d.signum() };
                    g[0] * norm * slope
                })
                .collect();
            let gt = gp.iter().map(|v| -v).collect();
            vec![Some(gp), Some(gt)]
        }),
    ))
}

/// Mean-reduced Smooth-ℓ1.
pub fn smooth_l1(pred: &Tensor, target: &Tensor, beta: f64) -> Result<Tensor> {
    smooth_l1_with(pred, target, beta, Reduction::Mean)
}

fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            orow.iter_mut().zip(brow).for_each(|(o, bv)| *o += av * bv);
        }
    }
    out
}

fn transpose_raw(a: &[f64], r: usize, c: usize) -> Vec<f64> {
    let mut out = vec![0.0; r * c];
    for i in 0..r {
        for j in 0..c {
            out[j * r + i] = a[i * c + j];
        }
    }
    out
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        const SHOWN: usize = 8;
        let data = self.data();
        let head = &data[..data.len().min(SHOWN)];
        f.debug_struct("Tensor")
            .field("shape", &self.shape())
            .field("requires_grad", &self.requires_grad())
            .field(
                "data",
                &format_args!("{head:?}{}", if data.len() > SHOWN { " …" } else { "" }),
            )
            .finish()
    }
}
