use rand::Rng;

use super::kernels::MatmulPlan;
use super::{Scalar, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op<T> {
    Leaf,
    MatMul {
        a: Var,
        b: Var,
        plan: MatmulPlan,
    },
    /// `a + b` where `b`'s shape is a suffix of `a`'s (broadcast over leading dims).
    Add {
        a: Var,
        b: Var,
    },
    Mul {
        a: Var,
        b: Var,
    },
    Scale {
        a: Var,
        factor: T,
    },
    Reshape {
        a: Var,
    },
    Permute {
        a: Var,
        axes: Vec<usize>,
    },
    Softmax {
        a: Var,
        axis: usize,
    },
    /// Last-axis softmax with key positions `>= key_lens[b]` forced to zero,
    /// where `b` is the leading index.
    MaskedSoftmax {
        a: Var,
    },
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        rstd: Vec<T>,
    },
    Gelu {
        a: Var,
    },
    Tanh {
        a: Var,
    },
    Gather {
        table: Var,
        ids: Vec<usize>,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<i64>,
        ignore_index: i64,
        probs: Vec<T>,
        count: usize,
    },
    Sum {
        a: Var,
    },
    Mean {
        a: Var,
    },
    Dropout {
        a: Var,
        mask: Vec<T>,
    },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Ordered record of executed operations.
///
/// A tape is single-writer: build one per forward/backward pass and drop it
/// afterwards. Values are owned by the tape and reachable through [`Var`]s.
pub struct Tape<T: Scalar = f32> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// `√(2/π)`, the tanh-approximation GELU constant.
const GELU_SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;
/// Cubic coefficient of the tanh-approximation GELU.
const GELU_CUBIC: f64 = 0.044_715;

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Record an input. It participates in differentiation iff
    /// `tensor.requires_grad()`.
    pub fn leaf(&mut self, tensor: Tensor<T>) -> Var {
        let needs_grad = tensor.requires_grad();
        self.push(tensor, Op::Leaf, needs_grad)
    }

    /// Record a trainable input regardless of the tensor's own flag.
    pub fn param(&mut self, tensor: Tensor<T>) -> Var {
        self.leaf(tensor.with_requires_grad(true))
    }

    /// Record a non-differentiable input.
    pub fn constant(&mut self, tensor: Tensor<T>) -> Var {
        self.leaf(tensor.with_requires_grad(false))
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn data(&self, v: Var) -> &[T] {
        self.nodes[v.0].value.data()
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value: value.with_requires_grad(needs_grad),
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn unchecked(shape: Vec<usize>, data: Vec<T>) -> Tensor<T> {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Tensor {
            shape,
            data,
            requires_grad: false,
        }
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, false)
    }

    /// `a · bᵀ` over the last two axes of `b`.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, true)
    }

    fn matmul_impl(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let plan = MatmulPlan::new(self.shape(a), self.shape(b), trans_b)?;
        let out = plan.forward(self.data(a), self.data(b));
        let value = Self::unchecked(plan.out_shape.clone(), out);
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(value, Op::MatMul { a, b, plan }, needs))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sb.len() > sa.len() || sa[sa.len() - sb.len()..] != *sb {
            return Err(Error::shape(format!(
                "add: {sb:?} does not broadcast onto {sa:?}"
            )));
        }
        let bd = self.data(b);
        let out: Vec<T> = self
            .data(a)
            .chunks(bd.len())
            .flat_map(|row| row.iter().zip(bd).map(|(&x, &y)| x + y))
            .collect();
        let value = Self::unchecked(sa.to_vec(), out);
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(value, Op::Add { a, b }, needs))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(format!(
                "mul: shapes differ {:?} vs {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        let out = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(&x, &y)| x * y)
            .collect();
        let value = Self::unchecked(self.shape(a).to_vec(), out);
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(value, Op::Mul { a, b }, needs))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let factor = T::from_f64(factor);
        let out = self.data(a).iter().map(|&x| x * factor).collect();
        let value = Self::unchecked(self.shape(a).to_vec(), out);
        let needs = self.needs(a);
        self.push(value, Op::Scale { a, factor }, needs)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let value = Tensor::new(shape.to_vec(), self.data(a).to_vec())?;
        let needs = self.needs(a);
        Ok(self.push(value, Op::Reshape { a }, needs))
    }

    /// Reorder axes: output axis `i` is input axis `axes[i]`.
    pub fn permute(&mut self, a: Var, axes: &[usize]) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let mut seen = vec![false; shape.len()];
        if axes.len() != shape.len()
            || axes
                .iter()
                .any(|&ax| ax >= shape.len() || std::mem::replace(&mut seen[ax], true))
        {
            return Err(Error::index(format!(
                "permute: {axes:?} is not a permutation of the axes of {shape:?}"
            )));
        }
        let out_shape: Vec<usize> = axes.iter().map(|&ax| shape[ax]).collect();
        let out = permute_data(self.data(a), &shape, axes);
        let value = Self::unchecked(out_shape, out);
        let needs = self.needs(a);
        Ok(self.push(
            value,
            Op::Permute {
                a,
                axes: axes.to_vec(),
            },
            needs,
        ))
    }

    /// Numerically stable softmax along `axis`.
    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() {
            return Err(Error::index(format!(
                "softmax axis {axis} out of range for rank {}",
                shape.len()
            )));
        }
        let (outer, len, inner) = axis_split(&shape, axis);
        let x = self.data(a);
        let mut y = vec![T::zero(); x.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| o * len * inner + j * inner + i;
                let max = (0..len).map(|j| x[at(j)]).fold(T::neg_infinity(), T::max);
                let mut sum = T::zero();
                for j in 0..len {
                    let e = (x[at(j)] - max).exp();
                    y[at(j)] = e;
                    sum = sum + e;
                }
                for j in 0..len {
                    y[at(j)] = y[at(j)] / sum;
                }
            }
        }
        let value = Self::unchecked(shape, y);
        let needs = self.needs(a);
        Ok(self.push(value, Op::Softmax { a, axis }, needs))
    }

    /// Softmax over the last axis where, for leading index `b`, entries at
    /// last-axis positions `>= key_lens[b]` get weight exactly zero.
    pub fn masked_softmax(&mut self, a: Var, key_lens: &[usize]) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if shape.len() < 2 || shape[0] != key_lens.len() {
            return Err(Error::shape(format!(
                "masked_softmax: leading dim of {shape:?} must equal {} key lengths",
                key_lens.len()
            )));
        }
        let len = shape[shape.len() - 1];
        if let Some(&bad) = key_lens.iter().find(|&&l| l == 0 || l > len) {
            return Err(Error::index(format!(
                "masked_softmax: key length {bad} outside 1..={len}"
            )));
        }
        let rows_per_lead = shape[1..shape.len() - 1].iter().product::<usize>();
        let x = self.data(a);
        let mut y = vec![T::zero(); x.len()];
        for (r, (xr, yr)) in x.chunks(len).zip(y.chunks_mut(len)).enumerate() {
            let valid = key_lens[r / rows_per_lead];
            let max = xr[..valid].iter().copied().fold(T::neg_infinity(), T::max);
            let mut sum = T::zero();
            for j in 0..valid {
                let e = (xr[j] - max).exp();
                yr[j] = e;
                sum = sum + e;
            }
            for v in &mut yr[..valid] {
                *v = *v / sum;
            }
        }
        let value = Self::unchecked(shape, y);
        let needs = self.needs(a);
        Ok(self.push(value, Op::MaskedSoftmax { a }, needs))
    }

    /// Normalize the trailing dimension, then apply `gamma`/`beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let d = *shape.last().unwrap_or(&1);
        if shape.is_empty() || self.shape(gamma) != [d] || self.shape(beta) != [d] {
            return Err(Error::shape(format!(
                "layer_norm: gamma {:?} / beta {:?} must be [{d}] for input {shape:?}",
                self.shape(gamma),
                self.shape(beta)
            )));
        }
        let eps = T::from_f64(eps);
        let dn = T::from_f64(d as f64);
        let (xd, g, b) = (self.data(x), self.data(gamma), self.data(beta));
        let rows = xd.len() / d;
        let mut xhat = vec![T::zero(); xd.len()];
        let mut rstd = vec![T::zero(); rows];
        let mut y = vec![T::zero(); xd.len()];
        for r in 0..rows {
            let row = &xd[r * d..(r + 1) * d];
            let mean = row.iter().copied().sum::<T>() / dn;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / dn;
            let rs = T::one() / (var + eps).sqrt();
            rstd[r] = rs;
            for j in 0..d {
                let h = (row[j] - mean) * rs;
                xhat[r * d + j] = h;
                y[r * d + j] = h * g[j] + b[j];
            }
        }
        let value = Self::unchecked(shape, y);
        let needs = self.needs(x) || self.needs(gamma) || self.needs(beta);
        Ok(self.push(
            value,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
            needs,
        ))
    }

    /// GELU, tanh approximation:
    /// `0.5·x·(1 + tanh(√(2/π)·(x + 0.044715·x³)))`.
    pub fn gelu(&mut self, a: Var) -> Var {
        let (c, k) = (T::from_f64(GELU_SQRT_2_OVER_PI), T::from_f64(GELU_CUBIC));
        let half = T::from_f64(0.5);
        let out = self
            .data(a)
            .iter()
            .map(|&x| half * x * (T::one() + (c * (x + k * x * x * x)).tanh()))
            .collect();
        let value = Self::unchecked(self.shape(a).to_vec(), out);
        let needs = self.needs(a);
        self.push(value, Op::Gelu { a }, needs)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let out = self.data(a).iter().map(|x| x.tanh()).collect();
        let value = Self::unchecked(self.shape(a).to_vec(), out);
        let needs = self.needs(a);
        self.push(value, Op::Tanh { a }, needs)
    }

    /// Rows of a rank-2 `table` selected by `ids`; output `[ids.len(), cols]`.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let shape = self.shape(table);
        if shape.len() != 2 {
            return Err(Error::shape(format!(
                "embedding table must be rank 2, got {shape:?}"
            )));
        }
        let (rows, cols) = (shape[0], shape[1]);
        if let Some((pos, id)) = ids.iter().enumerate().find(|(_, &id)| id >= rows) {
            return Err(Error::index(format!(
                "id {id} at position {pos} outside table of {rows} rows"
            )));
        }
        if ids.is_empty() {
            return Err(Error::shape("embedding lookup with no ids"));
        }
        let t = self.data(table);
        let mut out = Vec::with_capacity(ids.len() * cols);
        for &id in ids {
            out.extend_from_slice(&t[id * cols..(id + 1) * cols]);
        }
        let value = Self::unchecked(vec![ids.len(), cols], out);
        let needs = self.needs(table);
        Ok(self.push(
            value,
            Op::Gather {
                table,
                ids: ids.to_vec(),
            },
            needs,
        ))
    }

    /// Mean negative log-likelihood over rows whose target differs from
    /// `ignore_index`. Returns a scalar.
    pub fn cross_entropy(
        &mut self,
        logits: Var,
        targets: &[i64],
        ignore_index: i64,
    ) -> Result<Var> {
        let shape = self.shape(logits);
        if shape.len() != 2 || shape[0] != targets.len() {
            return Err(Error::shape(format!(
                "cross_entropy: logits {shape:?} vs {} targets",
                targets.len()
            )));
        }
        let k = shape[1];
        let x = self.data(logits);
        let mut probs = vec![T::zero(); x.len()];
        let mut total = T::zero();
        let mut count = 0usize;
        for (r, &t) in targets.iter().enumerate() {
            if t == ignore_index {
                continue;
            }
            if t < 0 || t as usize >= k {
                return Err(Error::index(format!(
                    "target {t} at position {r} outside {k} classes"
                )));
            }
            let row = &x[r * k..(r + 1) * k];
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let sum: T = row.iter().map(|&v| (v - max).exp()).sum();
            let log_z = max + sum.ln();
            for j in 0..k {
                probs[r * k + j] = (row[j] - log_z).exp();
            }
            total = total + (log_z - row[t as usize]);
            count += 1;
        }
        if count == 0 {
            return Err(Error::EmptyLoss);
        }
        let loss = total / T::from_f64(count as f64);
        let needs = self.needs(logits);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                ignore_index,
                probs,
                count,
            },
            needs,
        ))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.data(a).iter().copied().sum();
        let needs = self.needs(a);
        self.push(Tensor::scalar(s), Op::Sum { a }, needs)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let d = self.data(a);
        let s = d.iter().copied().sum::<T>() / T::from_f64(d.len() as f64);
        let needs = self.needs(a);
        self.push(Tensor::scalar(s), Op::Mean { a }, needs)
    }

    /// Inverted dropout: zero each element with probability `p`, scale the
    /// rest by `1/(1-p)`. `p == 0` returns `a` unchanged.
    pub fn dropout<R: Rng + ?Sized>(&mut self, a: Var, p: f64, rng: &mut R) -> Result<Var> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::config(format!(
                "dropout probability {p} outside [0, 1)"
            )));
        }
        if p == 0.0 {
            return Ok(a);
        }
        let keep = T::from_f64(1.0 / (1.0 - p));
        let mask: Vec<T> = (0..self.data(a).len())
            .map(|_| {
                if rng.random::<f64>() < p {
                    T::zero()
                } else {
                    keep
                }
            })
            .collect();
        let out = self
            .data(a)
            .iter()
            .zip(&mask)
            .map(|(&x, &m)| x * m)
            .collect();
        let value = Self::unchecked(self.shape(a).to_vec(), out);
        let needs = self.needs(a);
        Ok(self.push(value, Op::Dropout { a, mask }, needs))
    }

    /// Reverse pass from a rank-0 `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let root = &self.nodes[loss.0];
        if root.value.rank() != 0 {
            return Err(Error::contract(format!(
                "backward needs a rank-0 loss, got shape {:?}",
                root.value.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(node, &g, &mut grads);
            grads[idx] = Some(g);
        }

        let shapes = self
            .nodes
            .iter()
            .map(|n| n.value.shape().to_vec())
            .collect();
        Ok(Gradients { grads, shapes })
    }

    fn propagate(&self, node: &Node<T>, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let acc = |v: Var, grads: &mut [Option<Vec<T>>]| -> Option<usize> {
            if !self.needs(v) {
                return None;
            }
            if grads[v.0].is_none() {
                grads[v.0] = Some(vec![T::zero(); self.data(v).len()]);
            }
            Some(v.0)
        };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul { a, b, plan } => {
                if let Some(i) = acc(*a, grads) {
                    let ga = grads[i].as_mut().unwrap();
                    plan.backward_a(self.data(*b), g, ga);
                }
                if let Some(i) = acc(*b, grads) {
                    let gb = grads[i].as_mut().unwrap();
                    plan.backward_b(self.data(*a), g, gb);
                }
            }
            Op::Add { a, b } => {
                if let Some(i) = acc(*a, grads) {
                    for (d, &s) in grads[i].as_mut().unwrap().iter_mut().zip(g) {
                        *d = *d + s;
                    }
                }
                if let Some(i) = acc(*b, grads) {
                    let gb = grads[i].as_mut().unwrap();
                    let n = gb.len();
                    for chunk in g.chunks(n) {
                        for (d, &s) in gb.iter_mut().zip(chunk) {
                            *d = *d + s;
                        }
                    }
                }
            }
            Op::Mul { a, b } => {
                if let Some(i) = acc(*a, grads) {
                    let other = self.data(*b);
                    for ((d, &s), &o) in grads[i].as_mut().unwrap().iter_mut().zip(g).zip(other) {
                        *d = *d + s * o;
                    }
                }
                if let Some(i) = acc(*b, grads) {
                    let other = self.data(*a);
                    for ((d, &s), &o) in grads[i].as_mut().unwrap().iter_mut().zip(g).zip(other) {
                        *d = *d + s * o;
                    }
                }
            }
            Op::Scale { a, factor } => {
                if let Some(i) = acc(*a, grads) {
                    for (d, &s) in grads[i].as_mut().unwrap().iter_mut().zip(g) {
                        *d = *d + s * *factor;
                    }
                }
            }
            Op::Reshape { a } => {
                if let Some(i) = acc(*a, grads) {
                    for (d, &s) in grads[i].as_mut().unwrap().iter_mut().zip(g) {
                        *d = *d + s;
                    }
                }
            }
            Op::Permute { a, axes } => {
                if let Some(i) = acc(*a, grads) {
                    let mut inverse = vec![0; axes.len()];
                    for (o, &ax) in axes.iter().enumerate() {
                        inverse[ax] = o;
                    }
                    let back = permute_data(g, node.value.shape(), &inverse);
                    for (d, s) in grads[i].as_mut().unwrap().iter_mut().zip(back) {
                        *d = *d + s;
                    }
                }
            }
            Op::Softmax { a, axis } => {
                if let Some(i) = acc(*a, grads) {
                    let y = node.value.data();
                    let (outer, len, inner) = axis_split(node.value.shape(), *axis);
                    let ga = grads[i].as_mut().unwrap();
                    for o in 0..outer {
                        for k in 0..inner {
                            let at = |j: usize| o * len * inner + j * inner + k;
                            let dot: T = (0..len).map(|j| g[at(j)] * y[at(j)]).sum();
                            for j in 0..len {
                                ga[at(j)] = ga[at(j)] + y[at(j)] * (g[at(j)] - dot);
                            }
                        }
                    }
                }
            }
            Op::MaskedSoftmax { a } => {
                if let Some(i) = acc(*a, grads) {
                    let y = node.value.data();
                    let len = *node.value.shape().last().unwrap();
                    let ga = grads[i].as_mut().unwrap();
                    for ((yr, gr), dr) in y.chunks(len).zip(g.chunks(len)).zip(ga.chunks_mut(len)) {
                        let dot: T = yr.iter().zip(gr).map(|(&p, &q)| p * q).sum();
                        for j in 0..len {
                            dr[j] = dr[j] + yr[j] * (gr[j] - dot);
                        }
                    }
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let d = self.data(*gamma).len();
                let gam = self.data(*gamma);
                if let Some(i) = acc(*x, grads) {
                    let gx = grads[i].as_mut().unwrap();
                    let dn = T::from_f64(d as f64);
                    for (r, &rs) in rstd.iter().enumerate() {
                        let span = r * d..(r + 1) * d;
                        let (gr, hr) = (&g[span.clone()], &xhat[span.clone()]);
                        let mut sum_dh = T::zero();
                        let mut sum_dh_h = T::zero();
                        for j in 0..d {
                            let dh = gr[j] * gam[j];
                            sum_dh = sum_dh + dh;
                            sum_dh_h = sum_dh_h + dh * hr[j];
                        }
                        for j in 0..d {
                            let dh = gr[j] * gam[j];
                            let v = rs / dn * (dn * dh - sum_dh - hr[j] * sum_dh_h);
                            gx[r * d + j] = gx[r * d + j] + v;
                        }
                    }
                }
                if let Some(i) = acc(*gamma, grads) {
                    let gg = grads[i].as_mut().unwrap();
                    for (gr, hr) in g.chunks(d).zip(xhat.chunks(d)) {
                        for j in 0..d {
                            gg[j] = gg[j] + gr[j] * hr[j];
                        }
                    }
                }
                if let Some(i) = acc(*beta, grads) {
                    let gb = grads[i].as_mut().unwrap();
                    for gr in g.chunks(d) {
                        for j in 0..d {
                            gb[j] = gb[j] + gr[j];
                        }
                    }
                }
            }
            Op::Gelu { a } => {
                if let Some(i) = acc(*a, grads) {
                    let (c, k) = (T::from_f64(GELU_SQRT_2_OVER_PI), T::from_f64(GELU_CUBIC));
                    let half = T::from_f64(0.5);
                    let three = T::from_f64(3.0);
                    let xs = self.data(*a);
                    for ((d, &s), &x) in grads[i].as_mut().unwrap().iter_mut().zip(g).zip(xs) {
                        let t = (c * (x + k * x * x * x)).tanh();
                        let dudx = c * (T::one() + three * k * x * x);
                        let deriv = half * (T::one() + t) + half * x * (T::one() - t * t) * dudx;
                        *d = *d + s * deriv;
                    }
                }
            }
            Op::Tanh { a } => {
                if let Some(i) = acc(*a, grads) {
                    let ys = node.value.data();
                    for ((d, &s), &y) in grads[i].as_mut().unwrap().iter_mut().zip(g).zip(ys) {
                        *d = *d + s * (T::one() - y * y);
                    }
                }
            }
            Op::Gather { table, ids } => {
                if let Some(i) = acc(*table, grads) {
                    let cols = self.shape(*table)[1];
                    let gt = grads[i].as_mut().unwrap();
                    for (r, &id) in ids.iter().enumerate() {
                        for j in 0..cols {
                            gt[id * cols + j] = gt[id * cols + j] + g[r * cols + j];
                        }
                    }
                }
            }
            Op::CrossEntropy {
                logits,
                targets,
                ignore_index,
                probs,
                count,
            } => {
                if let Some(i) = acc(*logits, grads) {
                    let k = self.shape(*logits)[1];
                    let scale = g[0] / T::from_f64(*count as f64);
                    let gl = grads[i].as_mut().unwrap();
                    for (r, &t) in targets.iter().enumerate() {
                        if t == *ignore_index {
                            continue;
                        }
                        for j in 0..k {
                            let onehot = if j == t as usize { T::one() } else { T::zero() };
                            gl[r * k + j] = gl[r * k + j] + scale * (probs[r * k + j] - onehot);
                        }
                    }
                }
            }
            Op::Sum { a } => {
                if let Some(i) = acc(*a, grads) {
                    for d in grads[i].as_mut().unwrap().iter_mut() {
                        *d = *d + g[0];
                    }
                }
            }
            Op::Mean { a } => {
                if let Some(i) = acc(*a, grads) {
                    let gi = grads[i].as_mut().unwrap();
                    let s = g[0] / T::from_f64(gi.len() as f64);
                    for d in gi.iter_mut() {
                        *d = *d + s;
                    }
                }
            }
            Op::Dropout { a, mask } => {
                if let Some(i) = acc(*a, grads) {
                    for ((d, &s), &m) in grads[i].as_mut().unwrap().iter_mut().zip(g).zip(mask) {
                        *d = *d + s * m;
                    }
                }
            }
        }
    }
}

/// Result of [`Tape::backward`].
pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
    shapes: Vec<Vec<usize>>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient of the loss w.r.t. `v`; `None` when `v` is not on a
    /// differentiable path to the loss.
    pub fn get(&self, v: Var) -> Option<Tensor<T>> {
        self.grads[v.0]
            .as_ref()
            .map(|g| Tape::unchecked(self.shapes[v.0].clone(), g.clone()))
    }

    /// Gradient of the loss w.r.t. `v`, zero-filled when unreachable.
    pub fn wrt(&self, v: Var) -> Tensor<T> {
        self.get(v).unwrap_or_else(|| {
            let shape = self.shapes[v.0].clone();
            let n = shape.iter().product();
            Tape::unchecked(shape, vec![T::zero(); n])
        })
    }

    /// Borrowed gradient buffer, if any.
    pub fn slice(&self, v: Var) -> Option<&[T]> {
        self.grads[v.0].as_deref()
    }
}

fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn permute_data<T: Copy>(data: &[T], shape: &[usize], axes: &[usize]) -> Vec<T> {
    let rank = shape.len();
    let mut in_strides = vec![1; rank];
    for d in (0..rank.saturating_sub(1)).rev() {
        in_strides[d] = in_strides[d + 1] * shape[d + 1];
    }
    let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
    let strides: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
    let mut out = Vec::with_capacity(data.len());
    let mut idx = vec![0usize; rank];
    let mut src = 0usize;
    for _ in 0..data.len() {
        out.push(data[src]);
        for d in (0..rank).rev() {
            idx[d] += 1;
            src += strides[d];
            if idx[d] < out_shape[d] {
                break;
            }
            src -= strides[d] * out_shape[d];
            idx[d] = 0;
        }
    }
    out
}
