use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{broadcast_offsets, broadcast_shape, strides, ParamId, ParamStore, Scalar, Tensor};
use crate::error::{Error, Result};
use crate::seed::mix_seed;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug)]
enum Op<T> {
    Leaf(Option<ParamId>),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Scale(Var, T),
    MatMul { a: Var, b: Var, rows: usize, k: usize, n: usize },
    BatchMatMul { a: Var, b: Var, batch: usize, m: usize, k: usize, n: usize },
    Reshape(Var),
    Permute(Var, Vec<usize>),
    Gelu(Var),
    Sigmoid(Var),
    Tanh(Var),
    Log(Var),
    Exp(Var),
    Softmax { x: Var, axis: usize },
    LayerNorm { x: Var, gain: Var, bias: Var, xhat: Vec<T>, rstd: Vec<T> },
    Dropout { x: Var, mask: Vec<T> },
    Gather { table: Var, ids: Vec<usize> },
    Select { x: Var, axis: usize, index: usize },
    Sum(Var),
    Mean(Var),
    CrossEntropy { logits: Var, labels: Vec<i64>, probs: Vec<T>, count: usize },
    BinaryCrossEntropy { p: Var, targets: Vec<T>, weights: Vec<T>, count: usize },
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Records one forward pass. Consumed by [`Tape::backward`].
#[derive(Debug)]
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    dropout_seed: u64,
    dropout_calls: u64,
}

/// Gradients of every recorded node after a backward pass.
#[derive(Debug)]
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, var: Var) -> Option<&Tensor<T>> {
        self.grads[var.0].as_ref()
    }
}

fn t<T: Scalar>(v: f64) -> T {
    T::from_f64_lossy(v)
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new(0)
    }
}

impl<T: Scalar> Tape<T> {
    /// `dropout_seed` seeds the per-op dropout mask stream of this pass.
    pub fn new(dropout_seed: u64) -> Self {
        Self {
            nodes: Vec::new(),
            dropout_seed,
            dropout_calls: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn data(&self, v: Var) -> &[T] {
        self.nodes[v.0].value.data()
    }

    /// Non-differentiable input.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf(None), false)
    }

    /// Differentiable input that is not backed by a stored parameter.
    pub fn leaf(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf(None), true)
    }

    /// Records a copy of a stored parameter. Its gradient is accumulated
    /// into the store on [`Tape::backward`].
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        self.push(store.value(id).clone(), Op::Leaf(Some(id)), true)
    }

    fn binary(&mut self, a: Var, b: Var, name: &'static str, f: impl Fn(T, T) -> T) -> Result<(Tensor<T>, bool)> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        let out_shape = broadcast_shape(sa, sb).ok_or_else(|| Error::Dimension {
            op: name,
            lhs: sa.to_vec(),
            rhs: sb.to_vec(),
        })?;
        let oa = broadcast_offsets(sa, &out_shape);
        let ob = broadcast_offsets(sb, &out_shape);
        let (da, db) = (self.data(a), self.data(b));
        let data = oa.iter().zip(&ob).map(|(&i, &j)| f(da[i], db[j])).collect();
        Ok((Tensor::from_parts(out_shape, data), self.rg(a) || self.rg(b)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (v, rg) = self.binary(a, b, "add", |x, y| x + y)?;
        Ok(self.push(v, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (v, rg) = self.binary(a, b, "sub", |x, y| x - y)?;
        Ok(self.push(v, Op::Sub(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (v, rg) = self.binary(a, b, "mul", |x, y| x * y)?;
        Ok(self.push(v, Op::Mul(a, b), rg))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        let (v, rg) = self.binary(a, b, "div", |x, y| x / y)?;
        Ok(self.push(v, Op::Div(a, b), rg))
    }

    pub fn scale(&mut self, x: Var, factor: T) -> Var {
        let v = self.map(x, |v| v * factor);
        let rg = self.rg(x);
        self.push(v, Op::Scale(x, factor), rg)
    }

    fn map(&self, x: Var, f: impl Fn(T) -> T) -> Tensor<T> {
        let value = self.value(x);
        Tensor::from_parts(value.shape().to_vec(), value.data().iter().map(|&v| f(v)).collect())
    }

    /// `a[..., m, k] × b[k, n] → [..., m, n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sb.len() != 2 || sa.is_empty() || sa[sa.len() - 1] != sb[0] {
            return Err(Error::Dimension {
                op: "matmul",
                lhs: sa,
                rhs: sb,
            });
        }
        let (k, n) = (sb[0], sb[1]);
        let rows = self.value(a).numel() / k;
        let mut out = vec![T::zero(); rows * n];
        matmul_into(self.data(a), self.data(b), &mut out, rows, k, n);
        let mut shape = sa;
        *shape.last_mut().unwrap() = n;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::from_parts(shape, out), Op::MatMul { a, b, rows, k, n }, rg))
    }

    /// `a[..., m, k] × b[..., k, n] → [..., m, n]` with identical leading dims.
    pub fn batch_matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let ok = sa.len() >= 2
            && sa.len() == sb.len()
            && sa[..sa.len() - 2] == sb[..sb.len() - 2]
            && sa[sa.len() - 1] == sb[sb.len() - 2];
        if !ok {
            return Err(Error::Dimension {
                op: "batch_matmul",
                lhs: sa,
                rhs: sb,
            });
        }
        let r = sa.len();
        let (m, k, n) = (sa[r - 2], sa[r - 1], sb[r - 1]);
        let batch: usize = sa[..r - 2].iter().product();
        let mut out = vec![T::zero(); batch * m * n];
        let (da, db) = (self.data(a), self.data(b));
        for bi in 0..batch {
            matmul_into(
                &da[bi * m * k..(bi + 1) * m * k],
                &db[bi * k * n..(bi + 1) * k * n],
                &mut out[bi * m * n..(bi + 1) * m * n],
                m,
                k,
                n,
            );
        }
        let mut shape = sa;
        shape[r - 1] = n;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(
            Tensor::from_parts(shape, out),
            Op::BatchMatMul { a, b, batch, m, k, n },
            rg,
        ))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let v = self.value(x).clone().reshape(shape)?;
        let rg = self.rg(x);
        Ok(self.push(v, Op::Reshape(x), rg))
    }

    /// Reorders axes: output axis `i` is input axis `perm[i]`.
    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let mut seen = vec![false; shape.len()];
        if perm.len() != shape.len() || perm.iter().any(|&p| p >= shape.len() || std::mem::replace(&mut seen[p], true)) {
            return Err(Error::contract(format!("invalid permutation {perm:?} for shape {shape:?}")));
        }
        let map = permute_offsets(&shape, perm);
        let src = self.data(x);
        let data = map.iter().map(|&i| src[i]).collect();
        let out_shape = perm.iter().map(|&p| shape[p]).collect();
        let rg = self.rg(x);
        Ok(self.push(Tensor::from_parts(out_shape, data), Op::Permute(x, perm.to_vec()), rg))
    }

    /// Tanh approximation of GELU.
    pub fn gelu(&mut self, x: Var) -> Var {
        let v = self.map(x, |v| gelu(v).0);
        let rg = self.rg(x);
        self.push(v, Op::Gelu(x), rg)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let v = self.map(x, sigmoid);
        let rg = self.rg(x);
        self.push(v, Op::Sigmoid(x), rg)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let v = self.map(x, |v| v.tanh());
        let rg = self.rg(x);
        self.push(v, Op::Tanh(x), rg)
    }

    pub fn log(&mut self, x: Var) -> Var {
        let v = self.map(x, |v| v.ln());
        let rg = self.rg(x);
        self.push(v, Op::Log(x), rg)
    }

    pub fn exp(&mut self, x: Var) -> Var {
        let v = self.map(x, |v| v.exp());
        let rg = self.rg(x);
        self.push(v, Op::Exp(x), rg)
    }

    /// Max-subtracted softmax along `axis`.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(Error::contract(format!("softmax axis {axis} out of range for {shape:?}")));
        }
        let (outer, len, inner) = split_axis(&shape, axis);
        let mut out = self.data(x).to_vec();
        for o in 0..outer {
            for i in 0..inner {
                let base = o * len * inner + i;
                let mut max = T::neg_infinity();
                for j in 0..len {
                    max = max.max(out[base + j * inner]);
                }
                let mut sum = T::zero();
                for j in 0..len {
                    let e = (out[base + j * inner] - max).exp();
                    out[base + j * inner] = e;
                    sum = sum + e;
                }
                for j in 0..len {
                    out[base + j * inner] = out[base + j * inner] / sum;
                }
            }
        }
        let rg = self.rg(x);
        Ok(self.push(Tensor::from_parts(shape, out), Op::Softmax { x, axis }, rg))
    }

    /// Normalizes over the last axis, then applies `gain` and `bias`
    /// (both shaped like the last axis).
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: T) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let h = *shape.last().ok_or_else(|| Error::contract("layer_norm on empty shape"))?;
        for p in [gain, bias] {
            if self.shape(p) != [h] {
                return Err(Error::Dimension {
                    op: "layer_norm",
                    lhs: shape.clone(),
                    rhs: self.shape(p).to_vec(),
                });
            }
        }
        let rows = self.value(x).numel() / h;
        let src = self.data(x);
        let (g, b) = (self.data(gain), self.data(bias));
        let hf = t::<T>(h as f64);
        let mut xhat = vec![T::zero(); rows * h];
        let mut rstd = vec![T::zero(); rows];
        let mut out = vec![T::zero(); rows * h];
        for r in 0..rows {
            let row = &src[r * h..(r + 1) * h];
            let mean = row.iter().fold(T::zero(), |a, &v| a + v) / hf;
            let var = row.iter().fold(T::zero(), |a, &v| a + (v - mean) * (v - mean)) / hf;
            let rs = T::one() / (var + eps).sqrt();
            rstd[r] = rs;
            for j in 0..h {
                let xh = (row[j] - mean) * rs;
                xhat[r * h + j] = xh;
                out[r * h + j] = xh * g[j] + b[j];
            }
        }
        let rg = self.rg(x) || self.rg(gain) || self.rg(bias);
        Ok(self.push(
            Tensor::from_parts(shape, out),
            Op::LayerNorm { x, gain, bias, xhat, rstd },
            rg,
        ))
    }

    /// Inverted dropout. Identity when `p == 0` or `train` is false; masks
    /// come from the tape's seed stream so a pass replays exactly.
    pub fn dropout(&mut self, x: Var, p: f64, train: bool) -> Result<Var> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::contract(format!("dropout probability {p} not in [0, 1)")));
        }
        if p == 0.0 || !train {
            return Ok(x);
        }
        let seed = mix_seed(&[self.dropout_seed, self.dropout_calls]);
        self.dropout_calls += 1;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let keep_scale = t::<T>(1.0 / (1.0 - p));
        let n = self.value(x).numel();
        let mask: Vec<T> = (0..n)
            .map(|_| if rng.gen::<f64>() < p { T::zero() } else { keep_scale })
            .collect();
        let data = self.data(x).iter().zip(&mask).map(|(&v, &m)| v * m).collect();
        let shape = self.shape(x).to_vec();
        let rg = self.rg(x);
        Ok(self.push(Tensor::from_parts(shape, data), Op::Dropout { x, mask }, rg))
    }

    /// Row lookup: `table[V, h]` indexed by `ids` gives `[ids_shape..., h]`.
    pub fn gather(&mut self, table: Var, ids: &[usize], ids_shape: &[usize]) -> Result<Var> {
        let ts = self.shape(table).to_vec();
        if ts.len() != 2 {
            return Err(Error::contract(format!("gather table must be 2-D, got {ts:?}")));
        }
        if ids_shape.iter().product::<usize>() != ids.len() {
            return Err(Error::Dimension {
                op: "gather",
                lhs: ids_shape.to_vec(),
                rhs: vec![ids.len()],
            });
        }
        let (v, h) = (ts[0], ts[1]);
        if let Some(&bad) = ids.iter().find(|&&i| i >= v) {
            return Err(Error::contract(format!("id {bad} out of range for table of {v} rows")));
        }
        let src = self.data(table);
        let mut out = Vec::with_capacity(ids.len() * h);
        for &i in ids {
            out.extend_from_slice(&src[i * h..(i + 1) * h]);
        }
        let mut shape = ids_shape.to_vec();
        shape.push(h);
        let rg = self.rg(table);
        Ok(self.push(
            Tensor::from_parts(shape, out),
            Op::Gather { table, ids: ids.to_vec() },
            rg,
        ))
    }

    /// Picks `index` along `axis`, removing that axis.
    pub fn select(&mut self, x: Var, axis: usize, index: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() || index >= shape[axis] {
            return Err(Error::contract(format!("select({axis}, {index}) out of range for {shape:?}")));
        }
        let (outer, len, inner) = split_axis(&shape, axis);
        let src = self.data(x);
        let mut out = Vec::with_capacity(outer * inner);
        for o in 0..outer {
            let base = (o * len + index) * inner;
            out.extend_from_slice(&src[base..base + inner]);
        }
        let mut out_shape = shape;
        out_shape.remove(axis);
        if out_shape.is_empty() {
            out_shape.push(1);
        }
        let rg = self.rg(x);
        Ok(self.push(Tensor::from_parts(out_shape, out), Op::Select { x, axis, index }, rg))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.data(x).iter().fold(T::zero(), |a, &v| a + v);
        let rg = self.rg(x);
        self.push(Tensor::scalar(s), Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = t::<T>(self.value(x).numel() as f64);
        let s = self.data(x).iter().fold(T::zero(), |a, &v| a + v) / n;
        let rg = self.rg(x);
        self.push(Tensor::scalar(s), Op::Mean(x), rg)
    }

    /// Mean cross-entropy over rows of `logits[..., V]` whose label is not
    /// negative. Rows labelled negative contribute nothing to the value and
    /// receive an exactly zero gradient. With no labelled rows the loss is 0.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[i64]) -> Result<Var> {
        let shape = self.shape(logits).to_vec();
        let v = *shape.last().ok_or_else(|| Error::contract("cross_entropy on empty shape"))?;
        let rows = self.value(logits).numel() / v;
        if labels.len() != rows {
            return Err(Error::Dimension {
                op: "cross_entropy",
                lhs: shape,
                rhs: vec![labels.len()],
            });
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= v as i64) {
            return Err(Error::contract(format!("label {bad} out of range for {v} classes")));
        }
        let src = self.data(logits);
        let mut probs = vec![T::zero(); rows * v];
        let mut total = T::zero();
        let mut count = 0usize;
        for (r, &label) in labels.iter().enumerate() {
            if label < 0 {
                continue;
            }
            let row = &src[r * v..(r + 1) * v];
            let max = row.iter().fold(T::neg_infinity(), |a, &b| a.max(b));
            let sum = row.iter().fold(T::zero(), |a, &b| a + (b - max).exp());
            let lse = max + sum.ln();
            for j in 0..v {
                probs[r * v + j] = (row[j] - lse).exp();
            }
            total = total + (lse - row[label as usize]);
            count += 1;
        }
        let value = if count == 0 {
            log::warn!("cross_entropy: no labelled positions, loss defined as 0");
            T::zero()
        } else {
            total / t::<T>(count as f64)
        };
        let rg = self.rg(logits);
        Ok(self.push(
            Tensor::scalar(value),
            Op::CrossEntropy { logits, labels: labels.to_vec(), probs, count },
            rg,
        ))
    }

    /// Mean binary cross-entropy of probabilities `p` against 0/1 targets.
    pub fn binary_cross_entropy(&mut self, p: Var, targets: &[T]) -> Result<Var> {
        let include = vec![true; targets.len()];
        self.binary_cross_entropy_masked(p, targets, &include)
    }

    /// Binary cross-entropy averaged over the entries with `include` set;
    /// the others get a zero gradient. No included entry gives a loss of 0.
    pub fn binary_cross_entropy_masked(&mut self, p: Var, targets: &[T], include: &[bool]) -> Result<Var> {
        if self.value(p).numel() != targets.len() || targets.len() != include.len() {
            return Err(Error::Dimension {
                op: "binary_cross_entropy",
                lhs: self.shape(p).to_vec(),
                rhs: vec![targets.len(), include.len()],
            });
        }
        let weights: Vec<T> = include.iter().map(|&b| if b { T::one() } else { T::zero() }).collect();
        let count = include.iter().filter(|&&b| b).count();
        let mut total = T::zero();
        for ((&pv, &y), &w) in self.data(p).iter().zip(targets).zip(&weights) {
            if w == T::zero() {
                continue;
            }
            let pc = clamp_prob(pv);
            total = total - (y * pc.ln() + (T::one() - y) * (T::one() - pc).ln());
        }
        let value = if count == 0 { T::zero() } else { total / t::<T>(count as f64) };
        let rg = self.rg(p);
        Ok(self.push(
            Tensor::scalar(value),
            Op::BinaryCrossEntropy { p, targets: targets.to_vec(), weights, count },
            rg,
        ))
    }

    /// Reverse pass from a one-element `loss`. Parameter gradients are added
    /// to whatever the store already holds.
    pub fn backward(self, loss: Var, store: &mut ParamStore<T>) -> Result<Gradients<T>> {
        if self.value(loss).numel() != 1 {
            return Err(Error::contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if node.requires_grad {
                self.backprop_node(node, &g, &mut grads);
            }
            grads[idx] = Some(g);
        }
        for (node, g) in self.nodes.iter().zip(&grads) {
            if let (Op::Leaf(Some(id)), Some(g)) = (&node.op, g) {
                store.accumulate_grad(*id, g);
            }
        }
        let grads = self
            .nodes
            .iter()
            .zip(grads)
            .map(|(n, g)| g.map(|g| Tensor::from_parts(n.value.shape().to_vec(), g)))
            .collect();
        Ok(Gradients { grads })
    }

    fn backprop_node(&self, node: &Node<T>, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let out_shape = node.value.shape();
        match &node.op {
            Op::Leaf(_) => {}
            Op::Add(a, b) | Op::Sub(a, b) => {
                let negate_b = matches!(node.op, Op::Sub(..));
                let oa = broadcast_offsets(self.shape(*a), out_shape);
                let ob = broadcast_offsets(self.shape(*b), out_shape);
                if self.rg(*a) {
                    let mut ga = vec![T::zero(); self.value(*a).numel()];
                    for (i, &o) in oa.iter().enumerate() {
                        ga[o] = ga[o] + g[i];
                    }
                    accumulate(grads, *a, ga);
                }
                if self.rg(*b) {
                    let mut gb = vec![T::zero(); self.value(*b).numel()];
                    for (i, &o) in ob.iter().enumerate() {
                        gb[o] = if negate_b { gb[o] - g[i] } else { gb[o] + g[i] };
                    }
                    accumulate(grads, *b, gb);
                }
            }
            Op::Mul(a, b) | Op::Div(a, b) => {
                let div = matches!(node.op, Op::Div(..));
                let oa = broadcast_offsets(self.shape(*a), out_shape);
                let ob = broadcast_offsets(self.shape(*b), out_shape);
                let (da, db) = (self.data(*a), self.data(*b));
                if self.rg(*a) {
                    let mut ga = vec![T::zero(); da.len()];
                    for i in 0..g.len() {
                        let d = if div { g[i] / db[ob[i]] } else { g[i] * db[ob[i]] };
                        ga[oa[i]] = ga[oa[i]] + d;
                    }
                    accumulate(grads, *a, ga);
                }
                if self.rg(*b) {
                    let mut gb = vec![T::zero(); db.len()];
                    for i in 0..g.len() {
                        let (x, y) = (da[oa[i]], db[ob[i]]);
                        let d = if div { -g[i] * x / (y * y) } else { g[i] * x };
                        gb[ob[i]] = gb[ob[i]] + d;
                    }
                    accumulate(grads, *b, gb);
                }
            }
            Op::Scale(x, f) => accumulate(grads, *x, g.iter().map(|&v| v * *f).collect()),
            Op::MatMul { a, b, rows, k, n } => {
                let (rows, k, n) = (*rows, *k, *n);
                if self.rg(*a) {
                    let mut ga = vec![T::zero(); rows * k];
                    matmul_nt_into(g, self.data(*b), &mut ga, rows, n, k);
                    accumulate(grads, *a, ga);
                }
                if self.rg(*b) {
                    let mut gb = vec![T::zero(); k * n];
                    matmul_tn_into(self.data(*a), g, &mut gb, rows, k, n);
                    accumulate(grads, *b, gb);
                }
            }
            Op::BatchMatMul { a, b, batch, m, k, n } => {
                let (batch, m, k, n) = (*batch, *m, *k, *n);
                let (da, db) = (self.data(*a), self.data(*b));
                if self.rg(*a) {
                    let mut ga = vec![T::zero(); batch * m * k];
                    for bi in 0..batch {
                        matmul_nt_into(
                            &g[bi * m * n..(bi + 1) * m * n],
                            &db[bi * k * n..(bi + 1) * k * n],
                            &mut ga[bi * m * k..(bi + 1) * m * k],
                            m,
                            n,
                            k,
                        );
                    }
                    accumulate(grads, *a, ga);
                }
                if self.rg(*b) {
                    let mut gb = vec![T::zero(); batch * k * n];
                    for bi in 0..batch {
                        matmul_tn_into(
                            &da[bi * m * k..(bi + 1) * m * k],
                            &g[bi * m * n..(bi + 1) * m * n],
                            &mut gb[bi * k * n..(bi + 1) * k * n],
                            m,
                            k,
                            n,
                        );
                    }
                    accumulate(grads, *b, gb);
                }
            }
            Op::Reshape(x) => accumulate(grads, *x, g.to_vec()),
            Op::Permute(x, perm) => {
                let map = permute_offsets(self.shape(*x), perm);
                let mut gx = vec![T::zero(); g.len()];
                for (i, &src) in map.iter().enumerate() {
                    gx[src] = g[i];
                }
                accumulate(grads, *x, gx);
            }
            Op::Gelu(x) => {
                let gx = self.data(*x).iter().zip(g).map(|(&v, &gv)| gv * gelu(v).1).collect();
                accumulate(grads, *x, gx);
            }
            Op::Sigmoid(x) => {
                let y = node.value.data();
                let gx = y.iter().zip(g).map(|(&s, &gv)| gv * s * (T::one() - s)).collect();
                accumulate(grads, *x, gx);
            }
            Op::Tanh(x) => {
                let y = node.value.data();
                let gx = y.iter().zip(g).map(|(&v, &gv)| gv * (T::one() - v * v)).collect();
                accumulate(grads, *x, gx);
            }
            Op::Log(x) => {
                let gx = self.data(*x).iter().zip(g).map(|(&v, &gv)| gv / v).collect();
                accumulate(grads, *x, gx);
            }
            Op::Exp(x) => {
                let y = node.value.data();
                let gx = y.iter().zip(g).map(|(&v, &gv)| gv * v).collect();
                accumulate(grads, *x, gx);
            }
            Op::Softmax { x, axis } => {
                let (outer, len, inner) = split_axis(out_shape, *axis);
                let y = node.value.data();
                let mut gx = vec![T::zero(); y.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let base = o * len * inner + i;
                        let mut dot = T::zero();
                        for j in 0..len {
                            let at = base + j * inner;
                            dot = dot + y[at] * g[at];
                        }
                        for j in 0..len {
                            let at = base + j * inner;
                            gx[at] = y[at] * (g[at] - dot);
                        }
                    }
                }
                accumulate(grads, *x, gx);
            }
            Op::LayerNorm { x, gain, bias, xhat, rstd } => {
                let h = *out_shape.last().unwrap();
                let rows = rstd.len();
                let gain_v = self.data(*gain);
                let hf = t::<T>(h as f64);
                if self.rg(*x) {
                    let mut gx = vec![T::zero(); rows * h];
                    for r in 0..rows {
                        let mut mean_d = T::zero();
                        let mut mean_dx = T::zero();
                        for j in 0..h {
                            let d = g[r * h + j] * gain_v[j];
                            mean_d = mean_d + d;
                            mean_dx = mean_dx + d * xhat[r * h + j];
                        }
                        mean_d = mean_d / hf;
                        mean_dx = mean_dx / hf;
                        for j in 0..h {
                            let d = g[r * h + j] * gain_v[j];
                            gx[r * h + j] = rstd[r] * (d - mean_d - xhat[r * h + j] * mean_dx);
                        }
                    }
                    accumulate(grads, *x, gx);
                }
                if self.rg(*gain) {
                    let mut gg = vec![T::zero(); h];
                    for r in 0..rows {
                        for j in 0..h {
                            gg[j] = gg[j] + g[r * h + j] * xhat[r * h + j];
                        }
                    }
                    accumulate(grads, *gain, gg);
                }
                if self.rg(*bias) {
                    let mut gb = vec![T::zero(); h];
                    for r in 0..rows {
                        for j in 0..h {
                            gb[j] = gb[j] + g[r * h + j];
                        }
                    }
                    accumulate(grads, *bias, gb);
                }
            }
            Op::Dropout { x, mask } => {
                accumulate(grads, *x, g.iter().zip(mask).map(|(&a, &m)| a * m).collect());
            }
            Op::Gather { table, ids } => {
                let h = self.shape(*table)[1];
                let mut gt = vec![T::zero(); self.value(*table).numel()];
                for (row, &id) in ids.iter().enumerate() {
                    for j in 0..h {
                        gt[id * h + j] = gt[id * h + j] + g[row * h + j];
                    }
                }
                accumulate(grads, *table, gt);
            }
            Op::Select { x, axis, index } => {
                let shape = self.shape(*x);
                let (outer, len, inner) = split_axis(shape, *axis);
                let mut gx = vec![T::zero(); self.value(*x).numel()];
                for o in 0..outer {
                    let base = (o * len + index) * inner;
                    gx[base..base + inner].copy_from_slice(&g[o * inner..(o + 1) * inner]);
                }
                accumulate(grads, *x, gx);
            }
            Op::Sum(x) => accumulate(grads, *x, vec![g[0]; self.value(*x).numel()]),
            Op::Mean(x) => {
                let n = self.value(*x).numel();
                accumulate(grads, *x, vec![g[0] / t::<T>(n as f64); n]);
            }
            Op::CrossEntropy { logits, labels, probs, count } => {
                let mut gx = vec![T::zero(); probs.len()];
                if *count > 0 {
                    let v = probs.len() / labels.len();
                    let scale = g[0] / t::<T>(*count as f64);
                    for (r, &label) in labels.iter().enumerate() {
                        if label < 0 {
                            continue;
                        }
                        for j in 0..v {
                            gx[r * v + j] = probs[r * v + j] * scale;
                        }
                        let at = r * v + label as usize;
                        gx[at] = gx[at] - scale;
                    }
                }
                accumulate(grads, *logits, gx);
            }
            Op::BinaryCrossEntropy { p, targets, weights, count } => {
                let n = t::<T>((*count).max(1) as f64);
                let gx = self
                    .data(*p)
                    .iter()
                    .zip(targets)
                    .zip(weights)
                    .map(|((&pv, &y), &w)| {
                        let pc = clamp_prob(pv);
                        w * g[0] * (pc - y) / (pc * (T::one() - pc)) / n
                    })
                    .collect();
                accumulate(grads, *p, gx);
            }
        }
    }
}

fn accumulate<T: Scalar>(grads: &mut [Option<Vec<T>>], v: Var, g: Vec<T>) {
    match &mut grads[v.0] {
        Some(acc) => {
            for (a, b) in acc.iter_mut().zip(g) {
                *a = *a + b;
            }
        }
        slot @ None => *slot = Some(g),
    }
}

fn clamp_prob<T: Scalar>(p: T) -> T {
    let eps = t::<T>(1e-7);
    p.max(eps).min(T::one() - eps)
}

pub(crate) fn sigmoid<T: Scalar>(v: T) -> T {
    if v >= T::zero() {
        T::one() / (T::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::one() + e)
    }
}

/// Value and derivative of the tanh-approximated GELU.
fn gelu<T: Scalar>(x: T) -> (T, T) {
    let c = t::<T>((2.0 / std::f64::consts::PI).sqrt());
    let a = t::<T>(0.044715);
    let half = t::<T>(0.5);
    let three = t::<T>(3.0);
    let u = c * (x + a * x * x * x);
    let th = u.tanh();
    let value = half * x * (T::one() + th);
    let du = c * (T::one() + three * a * x * x);
    let deriv = half * (T::one() + th) + half * x * (T::one() - th * th) * du;
    (value, deriv)
}

fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

/// For each output element of the permuted tensor, its source offset.
fn permute_offsets(shape: &[usize], perm: &[usize]) -> Vec<usize> {
    let in_strides = strides(shape);
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let eff: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let numel: usize = shape.iter().product();
    let mut offsets = Vec::with_capacity(numel);
    let mut idx = vec![0usize; out_shape.len()];
    let mut off = 0usize;
    for _ in 0..numel {
        offsets.push(off);
        for axis in (0..out_shape.len()).rev() {
            idx[axis] += 1;
            off += eff[axis];
            if idx[axis] < out_shape[axis] {
                break;
            }
            off -= eff[axis] * idx[axis];
            idx[axis] = 0;
        }
    }
    offsets
}

/// `out[m, n] += a[m, k] · b[k, n]`, fixed reduction order.
fn matmul_into<T: Scalar>(a: &[T], b: &[T], out: &mut [T], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == T::zero() {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o = *o + av * bv;
            }
        }
    }
}

/// `out[m, k] += g[m, n] · b[k, n]ᵀ`.
fn matmul_nt_into<T: Scalar>(g: &[T], b: &[T], out: &mut [T], m: usize, n: usize, k: usize) {
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        for p in 0..k {
            let brow = &b[p * n..(p + 1) * n];
            let dot = grow.iter().zip(brow).fold(T::zero(), |acc, (&x, &y)| acc + x * y);
            out[i * k + p] = out[i * k + p] + dot;
        }
    }
}

/// `out[k, n] += a[m, k]ᵀ · g[m, n]`.
fn matmul_tn_into<T: Scalar>(a: &[T], g: &[T], out: &mut [T], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == T::zero() {
                continue;
            }
            let orow = &mut out[p * n..(p + 1) * n];
            for (o, &gv) in orow.iter_mut().zip(grow) {
                *o = *o + av * gv;
            }
        }
    }
}
