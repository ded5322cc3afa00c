//! Append-only recording tape for reverse-mode differentiation.
//!
//! Nodes are pushed in evaluation order, so the graph is acyclic by
//! construction and the backward sweep visits each node once, from the last
//! index to the first. Frozen weights are borrowed for the lifetime `'w` and
//! never receive gradient storage; only [`Tape::leaf`] variables do.

use super::array::first_non_finite;
use super::kernels::{
    cosine_slices, dot, gelu_derivative, gelu_scalar, layer_norm_row, matmul_a_bt_acc, matmul_acc,
    matmul_at_b_acc, multi_head_attention, softmax_in_place,
};
use super::{NumericsError, Real, RealArray, Result};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Deliberate corruption of one backward rule. Only used to prove that the
/// gradient checker detects a wrong derivative.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BackwardFault {
    /// Scales the GELU derivative by 1.1.
    GeluSlope,
}

enum Op<'w, T> {
    Leaf,
    Constant,
    MatMul(Var, Var),
    Linear {
        input: Var,
        weight: &'w RealArray<T>,
    },
    Add(Var, Var),
    ConcatRows(Vec<Var>),
    SelectRow {
        input: Var,
        row: usize,
    },
    LayerNorm {
        input: Var,
        gain: &'w RealArray<T>,
        normalized: Vec<T>,
        inv_std: Vec<T>,
    },
    Gelu(Var),
    Softmax(Var),
    Attention {
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        probs: Vec<T>,
    },
    CosineScores {
        images: Var,
        classes: Var,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        scale: T,
        probs: Vec<T>,
    },
    Dot {
        input: Var,
        weights: Vec<T>,
    },
    Sum(Var),
    Scale(Var, T),
    WeightedSquaredDistance {
        input: Var,
        anchor: Vec<T>,
        weights: Vec<T>,
        scale: T,
    },
}

struct Node<'w, T> {
    value: RealArray<T>,
    op: Op<'w, T>,
    needs_grad: bool,
}

pub struct Tape<'w, T: Real> {
    nodes: Vec<Node<'w, T>>,
    fault: Option<BackwardFault>,
}

impl<'w, T: Real> Default for Tape<'w, T> {
    fn default() -> Self {
        Self::new()
    }
}

fn as_matrix(shape: &[usize]) -> (usize, usize) {
    match shape.len() {
        0 => (1, 1),
        1 => (1, shape[0]),
        _ => (shape[..shape.len() - 1].iter().product(), shape[shape.len() - 1]),
    }
}

impl<'w, T: Real> Tape<'w, T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            fault: None,
        }
    }

    pub fn set_backward_fault(&mut self, fault: Option<BackwardFault>) {
        self.fault = fault;
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, var: Var) -> &RealArray<T> {
        &self.nodes[var.0].value
    }

    pub fn is_leaf(&self, var: Var) -> bool {
        matches!(self.nodes.get(var.0).map(|n| &n.op), Some(Op::Leaf))
    }

    fn node(&self, var: Var) -> Result<&Node<'w, T>> {
        self.nodes.get(var.0).ok_or(NumericsError::UnknownVar(var.0))
    }

    fn needs(&self, var: Var) -> bool {
        self.nodes[var.0].needs_grad
    }

    fn push(&mut self, value: RealArray<T>, op: Op<'w, T>, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Trainable parameter; the only kind of node gradients are reported for.
    pub fn leaf(&mut self, value: RealArray<T>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    pub fn constant(&mut self, value: RealArray<T>) -> Var {
        self.push(value, Op::Constant, false)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = super::kernels::matmul(&self.node(a)?.value, &self.node(b)?.value)?;
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(value, Op::MatMul(a, b), needs))
    }

    /// `input[s×in] · weight[in×out] + bias[out]` with frozen weight and bias.
    pub fn linear(
        &mut self,
        input: Var,
        weight: &'w RealArray<T>,
        bias: Option<&'w RealArray<T>>,
    ) -> Result<Var> {
        let x = &self.node(input)?.value;
        let (s, n_in) = as_matrix(x.shape());
        if weight.ndim() != 2 || weight.shape()[0] != n_in {
            return Err(NumericsError::ShapeMismatch {
                op: "linear",
                left: x.shape().to_vec(),
                right: weight.shape().to_vec(),
            });
        }
        let n_out = weight.shape()[1];
        let mut out = vec![T::zero(); s * n_out];
        if let Some(b) = bias {
            if b.len() != n_out {
                return Err(NumericsError::ShapeMismatch {
                    op: "linear",
                    left: weight.shape().to_vec(),
                    right: b.shape().to_vec(),
                });
            }
            for row in out.chunks_exact_mut(n_out) {
                row.copy_from_slice(b.data());
            }
        }
        matmul_acc(x.data(), weight.data(), s, n_in, n_out, &mut out);
        let mut shape = x.shape().to_vec();
        match shape.last_mut() {
            Some(last) => *last = n_out,
            None => shape.push(n_out),
        }
        let value = RealArray::checked("linear", shape, out)?;
        let needs = self.needs(input);
        Ok(self.push(value, Op::Linear { input, weight }, needs))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.node(a)?.value.add(&self.node(b)?.value)?;
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(value, Op::Add(a, b), needs))
    }

    /// Stacks 1-D or 2-D inputs with a common column count into one matrix.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts.first().ok_or(NumericsError::Empty { op: "concat_rows" })?;
        let cols = self.node(*first)?.value.cols();
        let mut rows = 0;
        let mut data = Vec::new();
        for &p in parts {
            let v = &self.node(p)?.value;
            if v.ndim() > 2 || v.cols() != cols {
                return Err(NumericsError::ShapeMismatch {
                    op: "concat_rows",
                    left: vec![cols],
                    right: v.shape().to_vec(),
                });
            }
            rows += v.len() / cols.max(1);
            data.extend_from_slice(v.data());
        }
        if cols == 0 {
            rows = 0;
        }
        let value = RealArray::from_parts(vec![rows, cols], data);
        let needs = parts.iter().any(|&p| self.needs(p));
        Ok(self.push(value, Op::ConcatRows(parts.to_vec()), needs))
    }

    /// Extracts one row of a matrix as a vector.
    pub fn select_row(&mut self, input: Var, row: usize) -> Result<Var> {
        let x = &self.node(input)?.value;
        if x.ndim() != 2 || row >= x.rows() {
            return Err(NumericsError::Invalid {
                op: "select_row",
                message: format!("row {row} out of range for shape {:?}", x.shape()),
            });
        }
        let value = RealArray::from_parts(vec![x.cols()], x.row(row).to_vec());
        let needs = self.needs(input);
        Ok(self.push(value, Op::SelectRow { input, row }, needs))
    }

    /// Layer normalization applied independently to every row.
    pub fn layer_norm(
        &mut self,
        input: Var,
        gain: &'w RealArray<T>,
        bias: &'w RealArray<T>,
        eps: T,
    ) -> Result<Var> {
        let x = &self.node(input)?.value;
        let (rows, cols) = as_matrix(x.shape());
        if gain.len() != cols || bias.len() != cols {
            return Err(NumericsError::ShapeMismatch {
                op: "layer_norm",
                left: x.shape().to_vec(),
                right: gain.shape().to_vec(),
            });
        }
        let mut out = vec![T::zero(); rows * cols];
        let mut normalized = vec![T::zero(); rows * cols];
        let mut inv_std = Vec::with_capacity(rows);
        for r in 0..rows {
            let span = r * cols..(r + 1) * cols;
            inv_std.push(layer_norm_row(
                &x.data()[span.clone()],
                gain.data(),
                bias.data(),
                eps,
                &mut out[span.clone()],
                &mut normalized[span],
            ));
        }
        let value = RealArray::checked("layer_norm", x.shape().to_vec(), out)?;
        let needs = self.needs(input);
        Ok(self.push(
            value,
            Op::LayerNorm {
                input,
                gain,
                normalized,
                inv_std,
            },
            needs,
        ))
    }

    pub fn gelu(&mut self, input: Var) -> Result<Var> {
        let value = self.node(input)?.value.map(gelu_scalar)?;
        let needs = self.needs(input);
        Ok(self.push(value, Op::Gelu(input), needs))
    }

    /// Softmax over the trailing axis.
    pub fn softmax(&mut self, input: Var) -> Result<Var> {
        let x = &self.node(input)?.value;
        if x.is_empty() {
            return Err(NumericsError::Empty { op: "softmax" });
        }
        let (_, cols) = as_matrix(x.shape());
        let mut out = x.data().to_vec();
        for row in out.chunks_exact_mut(cols) {
            softmax_in_place(row);
        }
        let value = RealArray::checked("softmax", x.shape().to_vec(), out)?;
        let needs = self.needs(input);
        Ok(self.push(value, Op::Softmax(input), needs))
    }

    /// Multi-head self-attention over `[s×d]` projections; `mask[j]` marks
    /// key position `j` as valid.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, heads: usize, mask: &[bool]) -> Result<Var> {
        let (qv, kv, vv) = (&self.node(q)?.value, &self.node(k)?.value, &self.node(v)?.value);
        if qv.ndim() != 2 || kv.shape() != qv.shape() || vv.shape() != qv.shape() {
            return Err(NumericsError::ShapeMismatch {
                op: "attention",
                left: qv.shape().to_vec(),
                right: kv.shape().to_vec(),
            });
        }
        let (s, d) = (qv.rows(), qv.cols());
        if heads == 0 || d % heads != 0 || mask.len() != s {
            return Err(NumericsError::Invalid {
                op: "attention",
                message: format!("{heads} heads over dim {d} with mask of length {}", mask.len()),
            });
        }
        let mut out = vec![T::zero(); s * d];
        let mut probs = vec![T::zero(); heads * s * s];
        multi_head_attention(qv.data(), kv.data(), vv.data(), s, d, heads, mask, &mut out, &mut probs)?;
        let value = RealArray::checked("attention", vec![s, d], out)?;
        let needs = self.needs(q) || self.needs(k) || self.needs(v);
        Ok(self.push(
            value,
            Op::Attention {
                q,
                k,
                v,
                heads,
                probs,
            },
            needs,
        ))
    }

    /// Cosine similarity of every row of `images [B×D]` against every row of
    /// `classes [C×D]`, giving `[B×C]`.
    pub fn cosine_scores(&mut self, images: Var, classes: Var) -> Result<Var> {
        let (a, m) = (&self.node(images)?.value, &self.node(classes)?.value);
        if a.ndim() != 2 || m.ndim() != 2 || a.cols() != m.cols() {
            return Err(NumericsError::ShapeMismatch {
                op: "cosine_scores",
                left: a.shape().to_vec(),
                right: m.shape().to_vec(),
            });
        }
        let (b, c) = (a.rows(), m.rows());
        let mut out = Vec::with_capacity(b * c);
        for i in 0..b {
            for j in 0..c {
                out.push(cosine_slices(a.row(i), m.row(j))?);
            }
        }
        let value = RealArray::from_parts(vec![b, c], out);
        let needs = self.needs(images) || self.needs(classes);
        Ok(self.push(value, Op::CosineScores { images, classes }, needs))
    }

    /// Mean over rows of `-log softmax(scale · logits_row)[target]`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize], scale: T) -> Result<Var> {
        let z = &self.node(logits)?.value;
        if z.ndim() != 2 || z.rows() != targets.len() {
            return Err(NumericsError::ShapeMismatch {
                op: "cross_entropy",
                left: z.shape().to_vec(),
                right: vec![targets.len()],
            });
        }
        if targets.is_empty() {
            return Err(NumericsError::Empty { op: "cross_entropy" });
        }
        let cols = z.cols();
        if let Some(&bad) = targets.iter().find(|&&t| t >= cols) {
            return Err(NumericsError::Invalid {
                op: "cross_entropy",
                message: format!("target {bad} out of range for {cols} classes"),
            });
        }
        let mut probs = Vec::with_capacity(z.len());
        let mut total = T::zero();
        for (r, &t) in targets.iter().enumerate() {
            let row: Vec<T> = z.row(r).iter().map(|&v| v * scale).collect();
            let max = row.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
            let lse = max + row.iter().map(|&v| (v - max).exp()).sum::<T>().ln();
            total += lse - row[t];
            probs.extend(row.iter().map(|&v| (v - lse).exp()));
        }
        let loss = total / T::of(targets.len() as f64);
        let value = RealArray::checked("cross_entropy", Vec::new(), vec![loss])?;
        let needs = self.needs(logits);
        Ok(self.push(
            value,
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                scale,
                probs,
            },
            needs,
        ))
    }

    /// Inner product with a constant vector of matching length.
    pub fn dot_const(&mut self, input: Var, weights: &[T]) -> Result<Var> {
        let x = &self.node(input)?.value;
        if x.len() != weights.len() {
            return Err(NumericsError::ShapeMismatch {
                op: "dot",
                left: x.shape().to_vec(),
                right: vec![weights.len()],
            });
        }
        let value = RealArray::checked("dot", Vec::new(), vec![dot(x.data(), weights)])?;
        let needs = self.needs(input);
        Ok(self.push(
            value,
            Op::Dot {
                input,
                weights: weights.to_vec(),
            },
            needs,
        ))
    }

    pub fn sum(&mut self, input: Var) -> Result<Var> {
        let value = RealArray::checked("sum", Vec::new(), vec![self.node(input)?.value.sum()])?;
        let needs = self.needs(input);
        Ok(self.push(value, Op::Sum(input), needs))
    }

    pub fn scale(&mut self, input: Var, factor: T) -> Result<Var> {
        let value = self.node(input)?.value.scale(factor)?;
        let needs = self.needs(input);
        Ok(self.push(value, Op::Scale(input, factor), needs))
    }

    /// `scale · Σ weights ⊙ (input − anchor)²`
    pub fn weighted_squared_distance(
        &mut self,
        input: Var,
        anchor: &[T],
        weights: &[T],
        scale: T,
    ) -> Result<Var> {
        let x = &self.node(input)?.value;
        if x.len() != anchor.len() || x.len() != weights.len() {
            return Err(NumericsError::ShapeMismatch {
                op: "weighted_squared_distance",
                left: x.shape().to_vec(),
                right: vec![anchor.len(), weights.len()],
            });
        }
        let total: T = x
            .data()
            .iter()
            .zip(anchor)
            .zip(weights)
            .map(|((&v, &a), &w)| w * (v - a) * (v - a))
            .sum();
        let value = RealArray::checked("weighted_squared_distance", Vec::new(), vec![scale * total])?;
        let needs = self.needs(input);
        Ok(self.push(
            value,
            Op::WeightedSquaredDistance {
                input,
                anchor: anchor.to_vec(),
                weights: weights.to_vec(),
                scale,
            },
            needs,
        ))
    }

    /// Reverse sweep from `output` seeded with `cotangent`, returning the
    /// accumulated gradient of every leaf.
    pub fn backward(&self, output: Var, cotangent: &RealArray<T>) -> Result<Gradients<T>> {
        let out_node = self.node(output)?;
        if cotangent.len() != out_node.value.len() {
            return Err(NumericsError::ShapeMismatch {
                op: "backward",
                left: out_node.value.shape().to_vec(),
                right: cotangent.shape().to_vec(),
            });
        }
        let mut grads: Vec<Option<Vec<T>>> = Vec::with_capacity(output.0 + 1);
        grads.resize_with(output.0 + 1, || None);
        if out_node.needs_grad {
            grads[output.0] = Some(cotangent.data().to_vec());
        }
        for index in (0..=output.0).rev() {
            let node = &self.nodes[index];
            if !node.needs_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[index].take() else { continue };
            self.apply_rule(node, &g, &mut grads);
        }

        let mut leaves = Vec::new();
        for (index, node) in self.nodes.iter().enumerate().take(output.0 + 1) {
            if let Op::Leaf = node.op {
                let data = grads[index]
                    .take()
                    .unwrap_or_else(|| vec![T::zero(); node.value.len()]);
                if let Some(bad) = first_non_finite(&data) {
                    return Err(NumericsError::NonFinite {
                        op: "backward",
                        index: bad,
                    });
                }
                leaves.push((Var(index), RealArray::from_parts(node.value.shape().to_vec(), data)));
            }
        }
        Ok(Gradients { leaves })
    }

    fn apply_rule(&self, node: &Node<'w, T>, g: &[T], grads: &mut [Option<Vec<T>>]) {
        match &node.op {
            Op::Leaf | Op::Constant => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
                let (m, k) = (av.rows(), av.cols());
                let n = bv.cols();
                if self.needs(*a) {
                    matmul_a_bt_acc(g, bv.data(), m, n, k, self.slot(grads, *a));
                }
                if self.needs(*b) {
                    matmul_at_b_acc(av.data(), g, m, k, n, self.slot(grads, *b));
                }
            }
            Op::Linear { input, weight } => {
                if self.needs(*input) {
                    let (n_in, n_out) = (weight.shape()[0], weight.shape()[1]);
                    let rows = g.len() / n_out;
                    matmul_a_bt_acc(g, weight.data(), rows, n_out, n_in, self.slot(grads, *input));
                }
            }
            Op::Add(a, b) => {
                for v in [a, b] {
                    if self.needs(*v) {
                        accumulate(self.slot(grads, *v), g);
                    }
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for p in parts {
                    let len = self.nodes[p.0].value.len();
                    if self.needs(*p) {
                        accumulate(self.slot(grads, *p), &g[offset..offset + len]);
                    }
                    offset += len;
                }
            }
            Op::SelectRow { input, row } => {
                let cols = g.len();
                let slot = self.slot(grads, *input);
                accumulate(&mut slot[row * cols..(row + 1) * cols], g);
            }
            Op::LayerNorm {
                input,
                gain,
                normalized,
                inv_std,
            } => {
                let cols = gain.len();
                let n = T::of(cols as f64);
                let slot = self.slot(grads, *input);
                let mut dxhat = vec![T::zero(); cols];
                for (r, &istd) in inv_std.iter().enumerate() {
                    let span = r * cols..(r + 1) * cols;
                    let (gr, xh) = (&g[span.clone()], &normalized[span.clone()]);
                    let mut sum_d = T::zero();
                    let mut sum_dx = T::zero();
                    for c in 0..cols {
                        dxhat[c] = gr[c] * gain.data()[c];
                        sum_d += dxhat[c];
                        sum_dx += dxhat[c] * xh[c];
                    }
                    let dst = &mut slot[span];
                    for c in 0..cols {
                        dst[c] += istd / n * (n * dxhat[c] - sum_d - xh[c] * sum_dx);
                    }
                }
            }
            Op::Gelu(input) => {
                let x = self.nodes[input.0].value.data();
                let factor = match self.fault {
                    Some(BackwardFault::GeluSlope) => T::of(1.1),
                    None => T::one(),
                };
                let slot = self.slot(grads, *input);
                for ((d, &gv), &xv) in slot.iter_mut().zip(g).zip(x) {
                    *d += gv * gelu_derivative(xv) * factor;
                }
            }
            Op::Softmax(input) => {
                let y = node.value.data();
                let cols = node.value.cols();
                let slot = self.slot(grads, *input);
                for ((dst, gr), yr) in slot
                    .chunks_exact_mut(cols)
                    .zip(g.chunks_exact(cols))
                    .zip(y.chunks_exact(cols))
                {
                    let inner: T = gr.iter().zip(yr).map(|(&a, &b)| a * b).sum();
                    for c in 0..cols {
                        dst[c] += yr[c] * (gr[c] - inner);
                    }
                }
            }
            Op::Attention {
                q,
                k,
                v,
                heads,
                probs,
            } => self.attention_backward(*q, *k, *v, *heads, probs, g, grads),
            Op::CosineScores { images, classes } => {
                let (a, m) = (&self.nodes[images.0].value, &self.nodes[classes.0].value);
                let (b, c, d) = (a.rows(), m.rows(), a.cols());
                let a_norm: Vec<T> = (0..b).map(|i| a.row(i).iter().map(|&x| x * x).sum::<T>().sqrt()).collect();
                let m_norm: Vec<T> = (0..c).map(|j| m.row(j).iter().map(|&x| x * x).sum::<T>().sqrt()).collect();
                let s = node.value.data();
                if self.needs(*classes) {
                    let slot = self.slot(grads, *classes);
                    for i in 0..b {
                        for j in 0..c {
                            let gij = g[i * c + j];
                            if gij == T::zero() {
                                continue;
                            }
                            let inv = T::one() / (a_norm[i] * m_norm[j]);
                            let self_term = s[i * c + j] / (m_norm[j] * m_norm[j]);
                            let (ar, mr) = (a.row(i), m.row(j));
                            let dst = &mut slot[j * d..(j + 1) * d];
                            for t in 0..d {
                                dst[t] += gij * (ar[t] * inv - self_term * mr[t]);
                            }
                        }
                    }
                }
                if self.needs(*images) {
                    let slot = self.slot(grads, *images);
                    for i in 0..b {
                        for j in 0..c {
                            let gij = g[i * c + j];
                            if gij == T::zero() {
                                continue;
                            }
                            let inv = T::one() / (a_norm[i] * m_norm[j]);
                            let self_term = s[i * c + j] / (a_norm[i] * a_norm[i]);
                            let (ar, mr) = (a.row(i), m.row(j));
                            let dst = &mut slot[i * d..(i + 1) * d];
                            for t in 0..d {
                                dst[t] += gij * (mr[t] * inv - self_term * ar[t]);
                            }
                        }
                    }
                }
            }
            Op::CrossEntropy {
                logits,
                targets,
                scale,
                probs,
            } => {
                let cols = probs.len() / targets.len();
                let factor = g[0] * *scale / T::of(targets.len() as f64);
                let slot = self.slot(grads, *logits);
                for (r, &t) in targets.iter().enumerate() {
                    for c in 0..cols {
                        let indicator = if c == t { T::one() } else { T::zero() };
                        slot[r * cols + c] += factor * (probs[r * cols + c] - indicator);
                    }
                }
            }
            Op::Dot { input, weights } => {
                let slot = self.slot(grads, *input);
                for (d, &w) in slot.iter_mut().zip(weights) {
                    *d += g[0] * w;
                }
            }
            Op::Sum(input) => {
                for d in self.slot(grads, *input).iter_mut() {
                    *d += g[0];
                }
            }
            Op::Scale(input, factor) => {
                let slot = self.slot(grads, *input);
                for (d, &gv) in slot.iter_mut().zip(g) {
                    *d += gv * *factor;
                }
            }
            Op::WeightedSquaredDistance {
                input,
                anchor,
                weights,
                scale,
            } => {
                let x = self.nodes[input.0].value.data();
                let two = T::of(2.0);
                let slot = self.slot(grads, *input);
                for i in 0..slot.len() {
                    slot[i] += g[0] * two * *scale * weights[i] * (x[i] - anchor[i]);
                }
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn attention_backward(
        &self,
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        probs: &[T],
        g: &[T],
        grads: &mut [Option<Vec<T>>],
    ) {
        let (qv, kv, vv) = (&self.nodes[q.0].value, &self.nodes[k.0].value, &self.nodes[v.0].value);
        let (s, d) = (qv.rows(), qv.cols());
        let head_dim = d / heads;
        let scale = T::one() / T::of(head_dim as f64).sqrt();
        let (need_q, need_k, need_v) = (self.needs(q), self.needs(k), self.needs(v));
        let mut dq = vec![T::zero(); if need_q { s * d } else { 0 }];
        let mut dk = vec![T::zero(); if need_k { s * d } else { 0 }];
        let mut dv = vec![T::zero(); if need_v { s * d } else { 0 }];
        let mut dscore = vec![T::zero(); s];
        for h in 0..heads {
            let off = h * head_dim;
            for i in 0..s {
                let p = &probs[(h * s + i) * s..(h * s + i + 1) * s];
                let go = &g[i * d + off..i * d + off + head_dim];
                if need_v {
                    for j in 0..s {
                        if p[j] == T::zero() {
                            continue;
                        }
                        let dst = &mut dv[j * d + off..j * d + off + head_dim];
                        for (x, &y) in dst.iter_mut().zip(go) {
                            *x += p[j] * y;
                        }
                    }
                }
                if !(need_q || need_k) {
                    continue;
                }
                let mut inner = T::zero();
                for j in 0..s {
                    let dp = dot(go, &vv.data()[j * d + off..j * d + off + head_dim]);
                    dscore[j] = dp;
                    inner += p[j] * dp;
                }
                for j in 0..s {
                    dscore[j] = p[j] * (dscore[j] - inner) * scale;
                }
                if need_q {
                    let dst = &mut dq[i * d + off..i * d + off + head_dim];
                    for j in 0..s {
                        if dscore[j] == T::zero() {
                            continue;
                        }
                        let kj = &kv.data()[j * d + off..j * d + off + head_dim];
                        for (x, &y) in dst.iter_mut().zip(kj) {
                            *x += dscore[j] * y;
                        }
                    }
                }
                if need_k {
                    let qi = &qv.data()[i * d + off..i * d + off + head_dim];
                    for j in 0..s {
                        if dscore[j] == T::zero() {
                            continue;
                        }
                        let dst = &mut dk[j * d + off..j * d + off + head_dim];
                        for (x, &y) in dst.iter_mut().zip(qi) {
                            *x += dscore[j] * y;
                        }
                    }
                }
            }
        }
        for (var, buf, need) in [(q, dq, need_q), (k, dk, need_k), (v, dv, need_v)] {
            if need {
                accumulate(self.slot(grads, var), &buf);
            }
        }
    }

    fn slot<'g>(&self, grads: &'g mut [Option<Vec<T>>], var: Var) -> &'g mut [T] {
        let len = self.nodes[var.0].value.len();
        grads[var.0].get_or_insert_with(|| vec![T::zero(); len])
    }
}

fn accumulate<T: Real>(dst: &mut [T], src: &[T]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

/// Leaf gradients produced by [`Tape::backward`].
#[derive(Debug, Clone)]
pub struct Gradients<T> {
    leaves: Vec<(Var, RealArray<T>)>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, leaf: Var) -> Option<&RealArray<T>> {
        self.leaves.iter().find(|(v, _)| *v == leaf).map(|(_, g)| g)
    }

    pub fn take(self, leaf: Var) -> Option<RealArray<T>> {
        self.leaves.into_iter().find(|(v, _)| *v == leaf).map(|(_, g)| g)
    }
}

/// Gradient of the scalar `loss` with respect to the leaf `leaf`.
pub fn grad<T: Real>(tape: &Tape<'_, T>, loss: Var, leaf: Var) -> Result<RealArray<T>> {
    let value = &tape.node(loss)?.value;
    if value.len() != 1 {
        return Err(NumericsError::NotScalar {
            shape: value.shape().to_vec(),
        });
    }
    tape.node(leaf)?;
    if !tape.is_leaf(leaf) {
        return Err(NumericsError::NotALeaf(leaf.0));
    }
    if leaf.0 > loss.0 {
        // recorded after the loss, so the loss cannot depend on it
        return Ok(RealArray::zeros(tape.value(leaf).shape().to_vec()));
    }
    let seed = RealArray::from_parts(value.shape().to_vec(), vec![T::one()]);
    let grads = tape.backward(loss, &seed)?;
    Ok(grads
        .take(leaf)
        .unwrap_or_else(|| RealArray::zeros(tape.value(leaf).shape().to_vec())))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::gradcheck::{check_leaf, DEFAULT_FLOOR, DEFAULT_STEP};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(seed: u64, shape: Vec<usize>) -> RealArray<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = shape.iter().product();
        RealArray::new(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    fn assert_grad<'w>(theta: &RealArray<f64>, build: impl Fn(&mut Tape<'w, f64>, Var) -> Result<Var>) {
        let report = check_leaf(build, |_| {}, theta, DEFAULT_STEP, DEFAULT_FLOOR).unwrap();
        assert!(
            report.max_rel_error < 1e-5,
            "rel err {} at {}: {} vs {}",
            report.max_rel_error,
            report.worst_index,
            report.analytic[report.worst_index],
            report.numeric[report.worst_index]
        );
    }

    fn probe(t: &mut Tape<'_, f64>, x: Var, seed: u64) -> Result<Var> {
        let w = random(seed, vec![t.value(x).len()]);
        t.dot_const(x, w.data())
    }

    #[test]
    fn matmul_and_linear_gradients() {
        let b = random(2, vec![4, 3]);
        let bias = random(3, vec![3]);
        assert_grad(&random(1, vec![2, 4]), |t, x| {
            let c = t.constant(b.clone());
            let y = t.matmul(x, c)?;
            probe(t, y, 9)
        });
        assert_grad(&random(1, vec![4, 3]), |t, x| {
            let a = t.constant(random(5, vec![2, 4]));
            let y = t.matmul(a, x)?;
            probe(t, y, 9)
        });
        let w = random(4, vec![4, 3]);
        let w: &'static RealArray<f64> = Box::leak(Box::new(w));
        let bias: &'static RealArray<f64> = Box::leak(Box::new(bias));
        assert_grad(&random(1, vec![2, 4]), |t, x| {
            let y = t.linear(x, w, Some(bias))?;
            probe(t, y, 9)
        });
    }

    #[test]
    fn layer_norm_gelu_softmax_gradients() {
        let gain: &'static RealArray<f64> = Box::leak(Box::new(random(7, vec![6])));
        let bias: &'static RealArray<f64> = Box::leak(Box::new(random(8, vec![6])));
        assert_grad(&random(1, vec![3, 6]), |t, x| {
            let y = t.layer_norm(x, gain, bias, 1e-5)?;
            probe(t, y, 2)
        });
        assert_grad(&random(1, vec![3, 6]).scale(3.0).unwrap(), |t, x| {
            let y = t.gelu(x)?;
            probe(t, y, 2)
        });
        assert_grad(&random(1, vec![3, 6]), |t, x| {
            let y = t.softmax(x)?;
            probe(t, y, 2)
        });
    }

    #[test]
    fn attention_gradients_through_each_input() {
        let mask = [true, false, true, true];
        let others = [random(2, vec![4, 6]), random(3, vec![4, 6])];
        for slot in 0..3 {
            assert_grad(&random(1, vec![4, 6]), |t, x| {
                let a = t.constant(others[0].clone());
                let b = t.constant(others[1].clone());
                let (q, k, v) = match slot {
                    0 => (x, a, b),
                    1 => (a, x, b),
                    _ => (a, b, x),
                };
                let y = t.attention(q, k, v, 2, &mask)?;
                probe(t, y, 4)
            });
        }
        // shared input, as in self-attention
        assert_grad(&random(1, vec![4, 6]), |t, x| {
            let y = t.attention(x, x, x, 3, &[true; 4])?;
            probe(t, y, 4)
        });
    }

    #[test]
    fn cosine_and_cross_entropy_gradients() {
        let images = random(2, vec![5, 4]);
        assert_grad(&random(1, vec![3, 4]), |t, x| {
            let a = t.constant(images.clone());
            let s = t.cosine_scores(a, x)?;
            t.cross_entropy(s, &[0, 1, 2, 1, 0], 7.0)
        });
        let classes = random(2, vec![3, 4]);
        assert_grad(&random(1, vec![5, 4]), |t, x| {
            let m = t.constant(classes.clone());
            let s = t.cosine_scores(x, m)?;
            probe(t, s, 6)
        });
    }

    #[test]
    fn structural_op_gradients() {
        let anchor = random(3, vec![8]);
        let weights = random(4, vec![8]).map(f64::abs).unwrap();
        assert_grad(&random(1, vec![2, 4]), |t, x| {
            let c = t.constant(random(5, vec![4]));
            let r = t.select_row(x, 1)?;
            let stacked = t.concat_rows(&[x, c, r])?;
            let doubled = t.add(stacked, stacked)?;
            let scaled = t.scale(doubled, -0.5)?;
            let s = t.sum(scaled)?;
            let d = t.weighted_squared_distance(x, anchor.data(), weights.data(), 0.3)?;
            let p = probe(t, stacked, 7)?;
            let sd = t.add(s, d)?;
            t.add(sd, p)
        });
    }

    #[test]
    fn cross_entropy_uniform_logits() {
        let mut t = Tape::<f64>::new();
        let z = t.leaf(RealArray::zeros(vec![2, 4]));
        let l = t.cross_entropy(z, &[0, 3], 10.0).unwrap();
        assert!((t.value(l).data()[0] - 4f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn unreached_leaf_has_zero_gradient() {
        let mut t = Tape::<f64>::new();
        let a = t.leaf(random(1, vec![3]));
        let b = t.leaf(random(2, vec![3]));
        let s = t.sum(a).unwrap();
        assert_eq!(grad(&t, s, b).unwrap().data(), &[0.0; 3]);
        assert_eq!(grad(&t, s, a).unwrap().data(), &[1.0; 3]);
    }

    #[test]
    fn grad_rejects_non_scalar_and_non_leaf() {
        let mut t = Tape::<f64>::new();
        let a = t.leaf(random(1, vec![3]));
        let y = t.scale(a, 2.0).unwrap();
        assert!(matches!(grad(&t, y, a), Err(NumericsError::NotScalar { .. })));
        let s = t.sum(y).unwrap();
        assert_eq!(grad(&t, s, y), Err(NumericsError::NotALeaf(y.index())));
        assert_eq!(grad(&t, s, Var(99)), Err(NumericsError::UnknownVar(99)));
    }

    #[test]
    fn constants_do_not_need_gradients() {
        let mut t = Tape::<f64>::new();
        let c = t.constant(random(1, vec![2, 2]));
        let y = t.matmul(c, c).unwrap();
        assert!(!t.needs(y));
    }

    #[test]
    fn injected_fault_is_visible() {
        let theta = random(1, vec![6]).scale(2.0).unwrap();
        let build = |t: &mut Tape<'_, f64>, x: Var| {
            let y = t.gelu(x)?;
            t.sum(y)
        };
        let report = check_leaf(
            build,
            |t| t.set_backward_fault(Some(BackwardFault::GeluSlope)),
            &theta,
            DEFAULT_STEP,
            DEFAULT_FLOOR,
        )
        .unwrap();
        assert!(report.max_rel_error > 0.05);
    }

    #[test]
    fn non_finite_forward_is_an_error() {
        let mut t = Tape::<f64>::new();
        let a = t.leaf(RealArray::vector(vec![1e300, 1e300]).unwrap());
        let y = t.scale(a, 1e300);
        assert!(matches!(y, Err(NumericsError::NonFinite { .. })));
    }
}
