//! Reverse-mode automatic differentiation over a linear tape.
//!
//! Every op appends a node holding its forward value; `backward` walks the
//! tape in reverse and accumulates vector-Jacobian products. Parameters live
//! in a [`ParamStore`] and are bound into a graph once per forward pass.

use std::collections::HashMap;

use super::tensor::kernels::{gemm_nn, gemm_nt, gemm_tn, softmax_rows};
use super::{NumError, Real, Tensor};

/// Handle to a node on the tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Handle to a trainable tensor in a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Named trainable tensors, in registration order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore<S: Real = f32> {
    names: Vec<String>,
    tensors: Vec<Tensor<S>>,
}

impl<S: Real> ParamStore<S> {
    pub fn new() -> Self {
        Self { names: Vec::new(), tensors: Vec::new() }
    }

    pub fn add(&mut self, name: impl Into<String>, mut tensor: Tensor<S>) -> ParamId {
        tensor.set_requires_grad(true);
        self.names.push(name.into());
        self.tensors.push(tensor);
        ParamId(self.tensors.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn get(&self, id: ParamId) -> &Tensor<S> {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<S> {
        &mut self.tensors[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<S>)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    /// Total number of scalar parameters.
    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    pub fn zero_grads(&mut self) {
        self.tensors.iter_mut().for_each(Tensor::zero_grad);
    }

    /// Adds `scale * dL/dθ` from a finished backward pass into the stored gradients.
    pub fn accumulate(&mut self, grads: &Gradients<S>, scale: S) {
        for (&id, &var) in &grads.bound {
            if let (Some(src), Some(dst)) = (grads.of(var), self.tensors[id.0].grad_mut()) {
                for (d, &s) in dst.iter_mut().zip(src) {
                    *d += scale * s;
                }
            }
        }
    }

    pub fn grad_norm(&self) -> S {
        let mut acc = S::zero();
        for t in &self.tensors {
            if let Some(g) = t.grad() {
                for &x in g {
                    acc += x * x;
                }
            }
        }
        acc.sqrt()
    }

    /// Rescales gradients so their global L2 norm is at most `max_norm`.
    /// Returns the norm before clipping.
    pub fn clip_grad_norm(&mut self, max_norm: S) -> S {
        let norm = self.grad_norm();
        if norm > max_norm && norm > S::zero() {
            let k = max_norm / norm;
            for t in &mut self.tensors {
                if let Some(g) = t.grad_mut() {
                    g.iter_mut().for_each(|x| *x *= k);
                }
            }
        }
        norm
    }

    pub fn cast<T: Real>(&self) -> ParamStore<T> {
        ParamStore { names: self.names.clone(), tensors: self.tensors.iter().map(Tensor::cast).collect() }
    }
}

#[derive(Clone, Debug)]
enum Op<S> {
    Leaf,
    Param,
    MatMul(Var, Var),
    MatMulNT(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, S),
    Tanh(Var),
    Sigmoid(Var),
    Relu(Var),
    Gelu(Var),
    Softmax(Var),
    CrossEntropy { logits: Var, probs: Vec<S>, targets: Vec<usize> },
    BceWithLogits { logits: Var, targets: Vec<S>, weights: Vec<S>, total_weight: S },
    Mse { pred: Var, target: Vec<S> },
    LayerNorm { x: Var, gain: Var, bias: Var, xhat: Vec<S>, inv_std: Vec<S> },
    GatherRows { x: Var, idx: Vec<usize> },
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceCols { x: Var, start: usize },
    SliceRows { x: Var, start: usize },
    SumAll(Var),
    MeanRows(Var),
    PairDiff(Var),
    Reshape(Var),
    GradReverse(Var),
}

struct Node<S: Real> {
    value: Tensor<S>,
    op: Op<S>,
}

/// A single forward pass recorded for differentiation.
pub struct Graph<S: Real = f32> {
    nodes: Vec<Node<S>>,
    bound: HashMap<ParamId, Var>,
}

impl<S: Real> Default for Graph<S> {
    fn default() -> Self {
        Self::new()
    }
}

fn shape_err<T>(msg: String) -> Result<T, NumError> {
    Err(NumError::Shape(msg))
}

fn gelu_parts<S: Real>(x: S) -> (S, S) {
    // tanh approximation
    let c = S::of((2.0 / std::f64::consts::PI).sqrt());
    let k = S::of(0.044715);
    let half = S::of(0.5);
    let one = S::one();
    let inner = c * (x + k * x * x * x);
    let t = inner.tanh();
    let y = half * x * (one + t);
    let dinner = c * (one + S::of(3.0) * k * x * x);
    let dy = half * (one + t) + half * x * (one - t * t) * dinner;
    (y, dy)
}

fn sigmoid<S: Real>(x: S) -> S {
    if x >= S::zero() {
        S::one() / (S::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (S::one() + e)
    }
}

impl<S: Real> Graph<S> {
    pub fn new() -> Self {
        Self { nodes: Vec::new(), bound: HashMap::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<S>, op: Op<S>) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor<S> {
        &self.nodes[v.0].value
    }

    pub fn dims(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.dims()
    }

    fn mat(&self, v: Var) -> Result<(usize, usize), NumError> {
        self.nodes[v.0].value.matrix_dims()
    }

    /// Scalar value of a one-element node.
    pub fn scalar(&self, v: Var) -> S {
        self.value(v).data()[0]
    }

    pub fn constant(&mut self, t: Tensor<S>) -> Var {
        self.push(t, Op::Leaf)
    }

    /// Binds a stored parameter into this graph; repeated calls reuse the node.
    pub fn param(&mut self, store: &ParamStore<S>, id: ParamId) -> Var {
        if let Some(&v) = self.bound.get(&id) {
            return v;
        }
        let mut value = store.get(id).clone();
        value.set_requires_grad(false);
        let v = self.push(value, Op::Param);
        self.bound.insert(id, v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, NumError> {
        let (m, k) = self.mat(a)?;
        let (k2, n) = self.mat(b)?;
        if k != k2 {
            return shape_err(format!("matmul inner dims differ: {m}x{k} * {k2}x{n}"));
        }
        let mut out = vec![S::zero(); m * n];
        gemm_nn(self.value(a).data(), self.value(b).data(), &mut out, m, k, n);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::MatMul(a, b)))
    }

    /// `a · bᵀ` without materialising the transpose.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var, NumError> {
        let (m, k) = self.mat(a)?;
        let (n, k2) = self.mat(b)?;
        if k != k2 {
            return shape_err(format!("matmul_nt inner dims differ: {m}x{k} * ({n}x{k2})ᵀ"));
        }
        let mut out = vec![S::zero(); m * n];
        gemm_nt(self.value(a).data(), self.value(b).data(), &mut out, m, k, n);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::MatMulNT(a, b)))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var, NumError> {
        let t = self.value(a).transpose()?;
        Ok(self.push(t, Op::Transpose(a)))
    }

    fn zip_same(&mut self, a: Var, b: Var, f: impl Fn(S, S) -> S, op: Op<S>) -> Result<Var, NumError> {
        let (x, y) = (self.value(a), self.value(b));
        if x.dims() != y.dims() {
            return shape_err(format!("elementwise dims differ: {:?} vs {:?}", x.dims(), y.dims()));
        }
        let out = x.data().iter().zip(y.data()).map(|(&p, &q)| f(p, q)).collect();
        let t = Tensor::new(x.dims().to_vec(), out)?;
        Ok(self.push(t, op))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, NumError> {
        self.zip_same(a, b, |p, q| p + q, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, NumError> {
        self.zip_same(a, b, |p, q| p - q, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, NumError> {
        self.zip_same(a, b, |p, q| p * q, Op::Mul(a, b))
    }

    /// Adds a row vector to every row of `x`.
    pub fn add_row(&mut self, x: Var, row: Var) -> Result<Var, NumError> {
        let (r, c) = self.mat(x)?;
        if self.value(row).numel() != c {
            return shape_err(format!("row of {} cannot broadcast over {r}x{c}", self.value(row).numel()));
        }
        let b = self.value(row).data();
        let mut out = self.value(x).data().to_vec();
        for chunk in out.chunks_mut(c) {
            for (o, &bv) in chunk.iter_mut().zip(b) {
                *o += bv;
            }
        }
        let t = Tensor::new(self.value(x).dims().to_vec(), out)?;
        Ok(self.push(t, Op::AddRow(x, row)))
    }

    pub fn scale(&mut self, x: Var, k: S) -> Var {
        let t = self.map(x, |v| v * k);
        self.push(t, Op::Scale(x, k))
    }

    fn map(&self, x: Var, f: impl Fn(S) -> S) -> Tensor<S> {
        let v = self.value(x);
        Tensor::new(v.dims().to_vec(), v.data().iter().map(|&p| f(p)).collect()).expect("same dims")
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let t = self.map(x, S::tanh);
        self.push(t, Op::Tanh(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let t = self.map(x, sigmoid);
        self.push(t, Op::Sigmoid(x))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let t = self.map(x, |v| v.max(S::zero()));
        self.push(t, Op::Relu(x))
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let t = self.map(x, |v| gelu_parts(v).0);
        self.push(t, Op::Gelu(x))
    }

    /// Row softmax; masked (`false`) entries come out exactly zero.
    pub fn softmax(&mut self, x: Var, mask: Option<&[bool]>) -> Result<Var, NumError> {
        let t = super::tensor::softmax(self.value(x), mask)?;
        Ok(self.push(t, Op::Softmax(x)))
    }

    /// Mean over rows of `-log softmax(logits)[target]`, honouring an
    /// optional keep-mask. A target that falls on a masked entry is rejected.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize], mask: Option<&[bool]>) -> Result<Var, NumError> {
        let (r, c) = self.mat(logits)?;
        if targets.len() != r {
            return shape_err(format!("{} targets for {r} rows", targets.len()));
        }
        for (row, &t) in targets.iter().enumerate() {
            let masked = match mask {
                Some(m) if m.len() == c => !m[t],
                Some(m) => !m[row * c + t],
                None => false,
            };
            if t >= c || masked {
                return Err(NumError::MaskedTarget { row, target: t });
            }
        }
        let mut probs = self.value(logits).data().to_vec();
        softmax_rows(&mut probs, r, c, mask)?;
        let mut loss = S::zero();
        for (row, &t) in targets.iter().enumerate() {
            // log-sum-exp form keeps very confident rows finite
            let logit_row = self.value(logits).row(row);
            let keep = |j: usize| match mask {
                None => true,
                Some(m) if m.len() == c => m[j],
                Some(m) => m[row * c + j],
            };
            let max = (0..c).filter(|&j| keep(j)).map(|j| logit_row[j]).fold(S::neg_infinity(), S::max);
            let lse = (0..c).filter(|&j| keep(j)).map(|j| (logit_row[j] - max).exp()).sum::<S>().ln() + max;
            loss += lse - logit_row[t];
        }
        loss = loss / S::of(r as f64);
        let node = Op::CrossEntropy { logits, probs, targets: targets.to_vec() };
        Ok(self.push(Tensor::scalar(loss), node))
    }

    /// Weighted mean binary cross-entropy of `sigmoid(logits)` against targets.
    pub fn bce_with_logits(&mut self, logits: Var, targets: &[S], weights: &[S]) -> Result<Var, NumError> {
        let x = self.value(logits).data();
        if targets.len() != x.len() || weights.len() != x.len() {
            return shape_err(format!(
                "bce sizes differ: logits {}, targets {}, weights {}",
                x.len(),
                targets.len(),
                weights.len()
            ));
        }
        let total_weight: S = weights.iter().copied().sum();
        if total_weight <= S::zero() {
            return shape_err("bce needs positive total weight".into());
        }
        let mut loss = S::zero();
        for ((&xi, &yi), &wi) in x.iter().zip(targets).zip(weights) {
            if wi == S::zero() {
                continue;
            }
            let l = xi.max(S::zero()) - xi * yi + (S::one() + (-xi.abs()).exp()).ln();
            loss += wi * l;
        }
        let value = Tensor::scalar(loss / total_weight);
        let op = Op::BceWithLogits { logits, targets: targets.to_vec(), weights: weights.to_vec(), total_weight };
        Ok(self.push(value, op))
    }

    pub fn mse(&mut self, pred: Var, target: &[S]) -> Result<Var, NumError> {
        let p = self.value(pred).data();
        if p.len() != target.len() {
            return shape_err(format!("mse sizes differ: {} vs {}", p.len(), target.len()));
        }
        let n = S::of(p.len() as f64);
        let loss = p.iter().zip(target).map(|(&a, &b)| (a - b) * (a - b)).sum::<S>() / n;
        Ok(self.push(Tensor::scalar(loss), Op::Mse { pred, target: target.to_vec() }))
    }

    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: S) -> Result<Var, NumError> {
        let (r, c) = self.mat(x)?;
        if self.value(gain).numel() != c || self.value(bias).numel() != c {
            return shape_err(format!("layer norm affine params must have {c} entries"));
        }
        let xv = self.value(x).data();
        let g = self.value(gain).data();
        let b = self.value(bias).data();
        let mut xhat = vec![S::zero(); r * c];
        let mut inv_std = vec![S::zero(); r];
        let mut out = vec![S::zero(); r * c];
        let cn = S::of(c as f64);
        for i in 0..r {
            let row = &xv[i * c..(i + 1) * c];
            let mean = row.iter().copied().sum::<S>() / cn;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<S>() / cn;
            let is = S::one() / (var + eps).sqrt();
            inv_std[i] = is;
            for j in 0..c {
                let h = (row[j] - mean) * is;
                xhat[i * c + j] = h;
                out[i * c + j] = h * g[j] + b[j];
            }
        }
        let t = Tensor::new(self.value(x).dims().to_vec(), out)?;
        Ok(self.push(t, Op::LayerNorm { x, gain, bias, xhat, inv_std }))
    }

    /// Selects rows of a matrix (repeats allowed).
    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> Result<Var, NumError> {
        let (r, c) = self.mat(x)?;
        if idx.is_empty() {
            return shape_err("gather needs at least one index".into());
        }
        let mut out = Vec::with_capacity(idx.len() * c);
        for &i in idx {
            if i >= r {
                return shape_err(format!("row index {i} out of range for {r} rows"));
            }
            out.extend_from_slice(self.value(x).row(i));
        }
        let t = Tensor::new(vec![idx.len(), c], out)?;
        Ok(self.push(t, Op::GatherRows { x, idx: idx.to_vec() }))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var, NumError> {
        let r = self.mat(parts[0])?.0;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (pr, pc) = self.mat(p)?;
            if pr != r {
                return shape_err(format!("concat_cols row counts differ: {pr} vs {r}"));
            }
            widths.push(pc);
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(r * total);
        for i in 0..r {
            for &p in parts {
                out.extend_from_slice(self.value(p).row(i));
            }
        }
        let t = Tensor::new(vec![r, total], out)?;
        Ok(self.push(t, Op::ConcatCols(parts.to_vec())))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var, NumError> {
        let c = self.mat(parts[0])?.1;
        let mut out = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let (pr, pc) = self.mat(p)?;
            if pc != c {
                return shape_err(format!("concat_rows col counts differ: {pc} vs {c}"));
            }
            rows += pr;
            out.extend_from_slice(self.value(p).data());
        }
        let t = Tensor::new(vec![rows, c], out)?;
        Ok(self.push(t, Op::ConcatRows(parts.to_vec())))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var, NumError> {
        let (r, c) = self.mat(x)?;
        if len == 0 || start + len > c {
            return shape_err(format!("column slice {start}+{len} out of range for {c}"));
        }
        let v = self.value(x);
        let mut out = Vec::with_capacity(r * len);
        for i in 0..r {
            out.extend_from_slice(&v.row(i)[start..start + len]);
        }
        let t = Tensor::new(vec![r, len], out)?;
        Ok(self.push(t, Op::SliceCols { x, start }))
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var, NumError> {
        let (r, c) = self.mat(x)?;
        if len == 0 || start + len > r {
            return shape_err(format!("row slice {start}+{len} out of range for {r}"));
        }
        let out = self.value(x).data()[start * c..(start + len) * c].to_vec();
        let t = Tensor::new(vec![len, c], out)?;
        Ok(self.push(t, Op::SliceRows { x, start }))
    }

    pub fn sum_all(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().copied().sum();
        self.push(Tensor::scalar(s), Op::SumAll(x))
    }

    /// Column means of a matrix, as a 1×c row.
    pub fn mean_rows(&mut self, x: Var) -> Result<Var, NumError> {
        let (r, c) = self.mat(x)?;
        let v = self.value(x).data();
        let mut out = vec![S::zero(); c];
        for chunk in v.chunks(c) {
            for (o, &p) in out.iter_mut().zip(chunk) {
                *o += p;
            }
        }
        let rn = S::of(r as f64);
        out.iter_mut().for_each(|o| *o = *o / rn);
        let t = Tensor::new(vec![1, c], out)?;
        Ok(self.push(t, Op::MeanRows(x)))
    }

    /// All ordered row differences: output row `i * n + j` is `x[j] - x[i]`.
    pub fn pair_diff(&mut self, x: Var) -> Result<Var, NumError> {
        let (n, c) = self.mat(x)?;
        let v = self.value(x);
        let mut out = Vec::with_capacity(n * n * c);
        for i in 0..n {
            let xi = v.row(i);
            for j in 0..n {
                out.extend(v.row(j).iter().zip(xi).map(|(&a, &b)| a - b));
            }
        }
        let t = Tensor::new(vec![n * n, c], out)?;
        Ok(self.push(t, Op::PairDiff(x)))
    }

    pub fn reshape(&mut self, x: Var, dims: &[usize]) -> Result<Var, NumError> {
        let t = self.value(x).clone().reshaped(dims.to_vec())?;
        Ok(self.push(t, Op::Reshape(x)))
    }

    /// Identity on the forward pass; negates the gradient on the way back.
    pub fn grad_reverse(&mut self, x: Var) -> Var {
        let t = self.value(x).clone();
        self.push(t, Op::GradReverse(x))
    }

    /// Reverse pass from a scalar node.
    pub fn backward(&self, loss: Var) -> Result<Gradients<S>, NumError> {
        if self.value(loss).numel() != 1 {
            return shape_err(format!("backward needs a scalar, got {:?}", self.dims(loss)));
        }
        let mut grads: Vec<Option<Vec<S>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![S::one()]);

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            match &node.op {
                Op::Leaf | Op::Param => {
                    grads[idx] = Some(g);
                }
                Op::MatMul(a, b) => {
                    let (m, k) = self.mat(*a)?;
                    let n = self.mat(*b)?.1;
                    let ga = slot(&mut grads, *a, m * k);
                    gemm_nt(&g, self.value(*b).data(), ga, m, n, k);
                    let gb = slot(&mut grads, *b, k * n);
                    gemm_tn(self.value(*a).data(), &g, gb, k, m, n);
                }
                Op::MatMulNT(a, b) => {
                    let (m, k) = self.mat(*a)?;
                    let n = self.mat(*b)?.0;
                    let ga = slot(&mut grads, *a, m * k);
                    gemm_nn(&g, self.value(*b).data(), ga, m, n, k);
                    let gb = slot(&mut grads, *b, n * k);
                    gemm_tn(&g, self.value(*a).data(), gb, n, m, k);
                }
                Op::Transpose(a) => {
                    let (r, c) = self.mat(*a)?;
                    let ga = slot(&mut grads, *a, r * c);
                    for i in 0..r {
                        for j in 0..c {
                            ga[i * c + j] += g[j * r + i];
                        }
                    }
                }
                Op::Add(a, b) => {
                    add_into(slot(&mut grads, *a, g.len()), &g, S::one());
                    add_into(slot(&mut grads, *b, g.len()), &g, S::one());
                }
                Op::Sub(a, b) => {
                    add_into(slot(&mut grads, *a, g.len()), &g, S::one());
                    add_into(slot(&mut grads, *b, g.len()), &g, -S::one());
                }
                Op::Mul(a, b) => {
                    let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                    let ga = slot(&mut grads, *a, g.len());
                    for ((o, &gi), &bi) in ga.iter_mut().zip(&g).zip(bv) {
                        *o += gi * bi;
                    }
                    let gb = slot(&mut grads, *b, g.len());
                    for ((o, &gi), &ai) in gb.iter_mut().zip(&g).zip(av) {
                        *o += gi * ai;
                    }
                }
                Op::AddRow(x, row) => {
                    add_into(slot(&mut grads, *x, g.len()), &g, S::one());
                    let c = self.value(*row).numel();
                    let gr = slot(&mut grads, *row, c);
                    for chunk in g.chunks(c) {
                        add_into(gr, chunk, S::one());
                    }
                }
                Op::Scale(x, k) => add_into(slot(&mut grads, *x, g.len()), &g, *k),
                Op::GradReverse(x) => add_into(slot(&mut grads, *x, g.len()), &g, -S::one()),
                Op::Reshape(x) => add_into(slot(&mut grads, *x, g.len()), &g, S::one()),
                Op::Tanh(x) => {
                    let y = node.value.data();
                    let gx = slot(&mut grads, *x, g.len());
                    for ((o, &gi), &yi) in gx.iter_mut().zip(&g).zip(y) {
                        *o += gi * (S::one() - yi * yi);
                    }
                }
                Op::Sigmoid(x) => {
                    let y = node.value.data();
                    let gx = slot(&mut grads, *x, g.len());
                    for ((o, &gi), &yi) in gx.iter_mut().zip(&g).zip(y) {
                        *o += gi * yi * (S::one() - yi);
                    }
                }
                Op::Relu(x) => {
                    let xv = self.value(*x).data();
                    let gx = slot(&mut grads, *x, g.len());
                    for ((o, &gi), &xi) in gx.iter_mut().zip(&g).zip(xv) {
                        if xi > S::zero() {
                            *o += gi;
                        }
                    }
                }
                Op::Gelu(x) => {
                    let xv = self.value(*x).data();
                    let gx = slot(&mut grads, *x, g.len());
                    for ((o, &gi), &xi) in gx.iter_mut().zip(&g).zip(xv) {
                        *o += gi * gelu_parts(xi).1;
                    }
                }
                Op::Softmax(x) => {
                    let y = node.value.data();
                    let c = node.value.cols();
                    let gx = slot(&mut grads, *x, g.len());
                    for ((go, gi), yi) in gx.chunks_mut(c).zip(g.chunks(c)).zip(y.chunks(c)) {
                        let dot: S = gi.iter().zip(yi).map(|(&a, &b)| a * b).sum();
                        for ((o, &gg), &yy) in go.iter_mut().zip(gi).zip(yi) {
                            *o += yy * (gg - dot);
                        }
                    }
                }
                Op::CrossEntropy { logits, probs, targets } => {
                    let (r, c) = self.mat(*logits)?;
                    let k = g[0] / S::of(r as f64);
                    let gl = slot(&mut grads, *logits, r * c);
                    for (row, &t) in targets.iter().enumerate() {
                        for j in 0..c {
                            let onehot = if j == t { S::one() } else { S::zero() };
                            gl[row * c + j] += k * (probs[row * c + j] - onehot);
                        }
                    }
                }
                Op::BceWithLogits { logits, targets, weights, total_weight } => {
                    let xv = self.value(*logits).data();
                    let k = g[0] / *total_weight;
                    let gl = slot(&mut grads, *logits, xv.len());
                    for (i, o) in gl.iter_mut().enumerate() {
                        *o += k * weights[i] * (sigmoid(xv[i]) - targets[i]);
                    }
                }
                Op::Mse { pred, target } => {
                    let pv = self.value(*pred).data();
                    let k = g[0] * S::of(2.0) / S::of(pv.len() as f64);
                    let gp = slot(&mut grads, *pred, pv.len());
                    for ((o, &p), &t) in gp.iter_mut().zip(pv).zip(target) {
                        *o += k * (p - t);
                    }
                }
                Op::LayerNorm { x, gain, bias, xhat, inv_std } => {
                    let (r, c) = self.mat(*x)?;
                    let gv = self.value(*gain).data().to_vec();
                    {
                        let gg = slot(&mut grads, *gain, c);
                        for i in 0..r {
                            for j in 0..c {
                                gg[j] += g[i * c + j] * xhat[i * c + j];
                            }
                        }
                    }
                    {
                        let gb = slot(&mut grads, *bias, c);
                        for chunk in g.chunks(c) {
                            add_into(gb, chunk, S::one());
                        }
                    }
                    let cn = S::of(c as f64);
                    let gx = slot(&mut grads, *x, r * c);
                    for i in 0..r {
                        let mut mean_d = S::zero();
                        let mut mean_dx = S::zero();
                        for j in 0..c {
                            let d = g[i * c + j] * gv[j];
                            mean_d += d;
                            mean_dx += d * xhat[i * c + j];
                        }
                        mean_d = mean_d / cn;
                        mean_dx = mean_dx / cn;
                        for j in 0..c {
                            let d = g[i * c + j] * gv[j];
                            gx[i * c + j] += inv_std[i] * (d - mean_d - xhat[i * c + j] * mean_dx);
                        }
                    }
                }
                Op::GatherRows { x, idx } => {
                    let c = node.value.cols();
                    let len = self.value(*x).numel();
                    let gx = slot(&mut grads, *x, len);
                    for (k, &i) in idx.iter().enumerate() {
                        add_into(&mut gx[i * c..(i + 1) * c], &g[k * c..(k + 1) * c], S::one());
                    }
                }
                Op::ConcatCols(parts) => {
                    let total = node.value.cols();
                    let r = node.value.rows();
                    let mut offset = 0;
                    for &p in parts {
                        let pc = self.value(p).cols();
                        let gp = slot(&mut grads, p, r * pc);
                        for i in 0..r {
                            let src = &g[i * total + offset..i * total + offset + pc];
                            add_into(&mut gp[i * pc..(i + 1) * pc], src, S::one());
                        }
                        offset += pc;
                    }
                }
                Op::ConcatRows(parts) => {
                    let mut offset = 0;
                    for &p in parts {
                        let len = self.value(p).numel();
                        add_into(slot(&mut grads, p, len), &g[offset..offset + len], S::one());
                        offset += len;
                    }
                }
                Op::SliceCols { x, start } => {
                    let (r, c) = self.mat(*x)?;
                    let len = node.value.cols();
                    let gx = slot(&mut grads, *x, r * c);
                    for i in 0..r {
                        add_into(&mut gx[i * c + start..i * c + start + len], &g[i * len..(i + 1) * len], S::one());
                    }
                }
                Op::SliceRows { x, start } => {
                    let c = node.value.cols();
                    let total = self.value(*x).numel();
                    let gx = slot(&mut grads, *x, total);
                    add_into(&mut gx[start * c..start * c + g.len()], &g, S::one());
                }
                Op::SumAll(x) => {
                    let len = self.value(*x).numel();
                    slot(&mut grads, *x, len).iter_mut().for_each(|o| *o += g[0]);
                }
                Op::MeanRows(x) => {
                    let (r, c) = self.mat(*x)?;
                    let k = S::one() / S::of(r as f64);
                    let gx = slot(&mut grads, *x, r * c);
                    for chunk in gx.chunks_mut(c) {
                        add_into(chunk, &g, k);
                    }
                }
                Op::PairDiff(x) => {
                    let (n, c) = self.mat(*x)?;
                    let gx = slot(&mut grads, *x, n * c);
                    for i in 0..n {
                        for j in 0..n {
                            let gij = &g[(i * n + j) * c..(i * n + j + 1) * c];
                            add_into(&mut gx[j * c..(j + 1) * c], gij, S::one());
                            add_into(&mut gx[i * c..(i + 1) * c], gij, -S::one());
                        }
                    }
                }
            }
        }
        Ok(Gradients { grads, bound: self.bound.clone() })
    }
}

fn slot<S: Real>(grads: &mut [Option<Vec<S>>], v: Var, len: usize) -> &mut [S] {
    grads[v.0].get_or_insert_with(|| vec![S::zero(); len])
}

fn add_into<S: Real>(dst: &mut [S], src: &[S], k: S) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += k * s;
    }
}

/// Result of a reverse pass: gradients of the loss w.r.t. leaf and parameter nodes.
pub struct Gradients<S: Real> {
    grads: Vec<Option<Vec<S>>>,
    bound: HashMap<ParamId, Var>,
}

impl<S: Real> Gradients<S> {
    pub fn of(&self, v: Var) -> Option<&[S]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn of_param(&self, id: ParamId) -> Option<&[S]> {
        self.bound.get(&id).and_then(|&v| self.of(v))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_of_squares_gradient() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::new(vec![3], vec![1.0, -2.0, 0.5]).unwrap());
        let sq = g.mul(x, x).unwrap();
        let s = g.sum_all(sq);
        assert_eq!(g.scalar(s), 5.25);
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.of(x).unwrap(), &[2.0, -4.0, 1.0]);
    }

    #[test]
    fn pair_diff_layout() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::from_rows(&[[1.0, 10.0], [3.0, 30.0]]).unwrap());
        let d = g.pair_diff(x).unwrap();
        assert_eq!(g.value(d).data(), &[0.0, 0.0, 2.0, 20.0, -2.0, -20.0, 0.0, 0.0]);
    }

    #[test]
    fn params_bind_once_and_accumulate() {
        let mut store = ParamStore::<f64>::new();
        let w = store.add("w", Tensor::new(vec![1, 2], vec![1.0, 2.0]).unwrap());
        let mut g = Graph::new();
        let a = g.param(&store, w);
        let b = g.param(&store, w);
        assert_eq!(a, b);
        let s = g.sum_all(a);
        let grads = g.backward(s).unwrap();
        store.accumulate(&grads, 0.5);
        store.accumulate(&grads, 0.5);
        assert_eq!(store.get(w).grad().unwrap(), &[1.0, 1.0]);
        store.zero_grads();
        assert_eq!(store.get(w).grad().unwrap(), &[0.0, 0.0]);
    }

    #[test]
    fn cross_entropy_rejects_masked_target() {
        let mut g = Graph::<f64>::new();
        let l = g.constant(Tensor::new(vec![1, 3], vec![0.0; 3]).unwrap());
        let err = g.cross_entropy(l, &[1], Some(&[true, false, true]));
        assert!(matches!(err, Err(NumError::MaskedTarget { row: 0, target: 1 })));
        let ok = g.cross_entropy(l, &[2], Some(&[true, false, true])).unwrap();
        assert!((g.scalar(ok) - 2f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn clip_scales_to_max_norm() {
        let mut store = ParamStore::<f64>::new();
        let w = store.add("w", Tensor::new(vec![2], vec![0.0, 0.0]).unwrap());
        store.get_mut(w).grad_mut().unwrap().copy_from_slice(&[3.0, 4.0]);
        let before = store.clip_grad_norm(1.0);
        assert_eq!(before, 5.0);
        let g = store.get(w).grad().unwrap();
        assert!((g[0] - 0.6).abs() < 1e-12 && (g[1] - 0.8).abs() < 1e-12);
    }
}
