//! Reverse-mode automatic differentiation over a linear tape.
//!
//! Every forward op appends one node holding its output value and enough
//! saved state to run its backward rule. Nodes only reference earlier nodes,
//! so the tape is topologically ordered by construction and a single reverse
//! sweep visits each record exactly once. `backward` consumes the tape.

use crate::error::{MvftError, Result};
use crate::tensor::{gemm_acc, gemm_nt_acc, gemm_tn_acc, softmax_into, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    /// `b` matches the trailing axes of `a` and is repeated over the rest.
    AddBroadcast(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    /// `a[.., k] · b[k, n]`, leading axes of `a` flattened into rows.
    MatMul(Var, Var),
    /// Batched `a[B, m, k] · b[B, k, n]`, or `· b[B, n, k]ᵀ` when transposed.
    BatchMatMul { a: Var, b: Var, transpose_b: bool },
    Softmax(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        normalized: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Gelu(Var),
    Concat { inputs: Vec<Var>, axis: usize },
    Reshape(Var),
    /// Prepends an axis of the given extent.
    Expand(Var),
    Gather { table: Var, indices: Vec<usize> },
    CrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<f64>,
    },
    Sum(Var),
    Mean(Var),
    WeightedSum { x: Var, weights: Vec<f64> },
    Dropout { x: Var, mask: Vec<f64> },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Tape::backward`], indexed by the forward `Var`s.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, var: Var) -> Option<&Tensor> {
        self.grads.get(var.0).and_then(Option::as_ref)
    }

    /// Gradient of `var`, or zeros of `shape` if nothing flowed into it.
    pub fn get_or_zeros(&self, var: Var, shape: &[usize]) -> Tensor {
        self.get(var).cloned().unwrap_or_else(|| Tensor::zeros(shape))
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, var: Var) -> &Tensor {
        &self.nodes[var.0].value
    }

    pub fn shape(&self, var: Var) -> &[usize] {
        self.nodes[var.0].value.shape()
    }

    pub fn requires_grad(&self, var: Var) -> bool {
        self.nodes[var.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        debug_assert!(value.all_finite(), "non-finite output from {op:?}");
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Records a trainable leaf.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Records a constant leaf (no gradient).
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(MvftError::shape("add", va.shape(), vb.shape()));
        }
        let data = va.data().iter().zip(vb.data()).map(|(x, y)| x + y).collect();
        let out = Tensor::new(va.shape().to_vec(), data)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::Add(a, b), rg))
    }

    pub fn add_broadcast(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if !va.shape().ends_with(vb.shape()) {
            return Err(MvftError::shape("add_broadcast", va.shape(), vb.shape()));
        }
        let bd = vb.data();
        let data = va
            .data()
            .chunks(bd.len())
            .flat_map(|chunk| chunk.iter().zip(bd).map(|(x, y)| x + y))
            .collect();
        let out = Tensor::new(va.shape().to_vec(), data)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::AddBroadcast(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(MvftError::shape("mul", va.shape(), vb.shape()));
        }
        let data = va.data().iter().zip(vb.data()).map(|(x, y)| x * y).collect();
        let out = Tensor::new(va.shape().to_vec(), data)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let out = self.value(a).map(|x| x * factor);
        let rg = self.rg(&[a]);
        self.push(out, Op::Scale(a, factor), rg)
    }

    /// Matrix product with `b` two-dimensional; leading axes of `a` are
    /// treated as rows, so `[B, L, k] · [k, n] -> [B, L, n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.rank() < 2 || vb.rank() != 2 || va.last_dim() != vb.shape()[0] {
            return Err(MvftError::shape("matmul", va.shape(), vb.shape()));
        }
        let k = va.last_dim();
        let n = vb.shape()[1];
        let m = va.len() / k;
        let mut data = vec![0.0; m * n];
        gemm_acc(va.data(), vb.data(), &mut data, m, k, n);
        let mut shape = va.shape().to_vec();
        *shape.last_mut().unwrap() = n;
        let out = Tensor::new(shape, data)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::MatMul(a, b), rg))
    }

    /// Batched product `[B, m, k] · [B, k, n] -> [B, m, n]`.
    pub fn bmm(&mut self, a: Var, b: Var) -> Result<Var> {
        self.batch_matmul(a, b, false)
    }

    /// Batched product with the right operand transposed:
    /// `[B, m, k] · [B, n, k]ᵀ -> [B, m, n]`.
    pub fn bmm_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        self.batch_matmul(a, b, true)
    }

    fn batch_matmul(&mut self, a: Var, b: Var, transpose_b: bool) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        let op = if transpose_b { "bmm_nt" } else { "bmm" };
        if va.rank() != 3 || vb.rank() != 3 || va.shape()[0] != vb.shape()[0] {
            return Err(MvftError::shape(op, va.shape(), vb.shape()));
        }
        let (batch, m, k) = (va.shape()[0], va.shape()[1], va.shape()[2]);
        let (inner, n) = if transpose_b {
            (vb.shape()[2], vb.shape()[1])
        } else {
            (vb.shape()[1], vb.shape()[2])
        };
        if inner != k {
            return Err(MvftError::shape(op, va.shape(), vb.shape()));
        }
        let mut data = vec![0.0; batch * m * n];
        for bi in 0..batch {
            let asl = &va.data()[bi * m * k..(bi + 1) * m * k];
            let bsl = &vb.data()[bi * k * n..(bi + 1) * k * n];
            let csl = &mut data[bi * m * n..(bi + 1) * m * n];
            if transpose_b {
                gemm_nt_acc(asl, bsl, csl, m, k, n);
            } else {
                gemm_acc(asl, bsl, csl, m, k, n);
            }
        }
        let out = Tensor::new(vec![batch, m, n], data)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::BatchMatMul { a, b, transpose_b }, rg))
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, x: Var) -> Var {
        let vx = self.value(x);
        let d = vx.last_dim();
        let mut data = vec![0.0; vx.len()];
        for (row, out) in vx.data().chunks(d).zip(data.chunks_mut(d)) {
            softmax_into(row, out);
        }
        let out = Tensor::new(vx.shape().to_vec(), data).expect("same shape");
        let rg = self.rg(&[x]);
        self.push(out, Op::Softmax(x), rg)
    }

    /// Layer normalization over the last axis (population variance).
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        if eps <= 0.0 {
            return Err(MvftError::contract("layer_norm eps must be positive"));
        }
        let (vx, vg, vb) = (self.value(x), self.value(gamma), self.value(beta));
        let d = vx.last_dim();
        if vg.shape() != [d] || vb.shape() != [d] {
            return Err(MvftError::shape("layer_norm", vx.shape(), vg.shape()));
        }
        let rows = vx.len() / d;
        let mut normalized = vec![0.0; vx.len()];
        let mut inv_std = vec![0.0; rows];
        let mut data = vec![0.0; vx.len()];
        for r in 0..rows {
            let row = &vx.data()[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[r] = is;
            for j in 0..d {
                let nh = (row[j] - mean) * is;
                normalized[r * d + j] = nh;
                data[r * d + j] = nh * vg.data()[j] + vb.data()[j];
            }
        }
        let out = Tensor::new(vx.shape().to_vec(), data)?;
        let rg = self.rg(&[x, gamma, beta]);
        Ok(self.push(
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                normalized,
                inv_std,
            },
            rg,
        ))
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(gelu);
        let rg = self.rg(&[x]);
        self.push(out, Op::Gelu(x), rg)
    }

    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = self
            .shape(*inputs.first().ok_or_else(|| MvftError::contract("concat of nothing"))?)
            .to_vec();
        if axis >= first.len() {
            return Err(MvftError::contract(format!(
                "concat axis {axis} out of range for rank {}",
                first.len()
            )));
        }
        let mut total = 0;
        for &v in inputs {
            let s = self.shape(v);
            let compatible = s.len() == first.len()
                && s.iter()
                    .zip(&first)
                    .enumerate()
                    .all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(MvftError::shape("concat", &first, s));
            }
            total += s[axis];
        }
        let outer: usize = first[..axis].iter().product();
        let inner: usize = first[axis + 1..].iter().product();
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &v in inputs {
                let len = self.shape(v)[axis] * inner;
                data.extend_from_slice(&self.value(v).data()[o * len..(o + 1) * len]);
            }
        }
        let mut shape = first;
        shape[axis] = total;
        let out = Tensor::new(shape, data)?;
        let rg = self.rg(inputs);
        Ok(self.push(
            out,
            Op::Concat {
                inputs: inputs.to_vec(),
                axis,
            },
            rg,
        ))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).reshape(shape)?;
        let rg = self.rg(&[x]);
        Ok(self.push(out, Op::Reshape(x), rg))
    }

    /// Repeats `x` along a new leading axis of extent `n`.
    pub fn expand(&mut self, x: Var, n: usize) -> Var {
        let vx = self.value(x);
        let mut shape = vec![n];
        shape.extend_from_slice(vx.shape());
        let data = vx.data().repeat(n);
        let out = Tensor::new(shape, data).expect("n > 0");
        let rg = self.rg(&[x]);
        self.push(out, Op::Expand(x), rg)
    }

    /// Looks up rows of `table[n, d]`; the output has shape `index_shape ++ [d]`.
    pub fn gather(&mut self, table: Var, indices: &[usize], index_shape: &[usize]) -> Result<Var> {
        let vt = self.value(table);
        if vt.rank() != 2 || index_shape.iter().product::<usize>() != indices.len() {
            return Err(MvftError::shape("gather", vt.shape(), index_shape));
        }
        let (n, d) = (vt.shape()[0], vt.shape()[1]);
        if let Some(&bad) = indices.iter().find(|&&i| i >= n) {
            return Err(MvftError::contract(format!(
                "gather index {bad} out of range for table with {n} rows"
            )));
        }
        let mut data = Vec::with_capacity(indices.len() * d);
        for &i in indices {
            data.extend_from_slice(vt.row(i));
        }
        let mut shape = index_shape.to_vec();
        shape.push(d);
        let out = Tensor::new(shape, data)?;
        let rg = self.rg(&[table]);
        Ok(self.push(
            out,
            Op::Gather {
                table,
                indices: indices.to_vec(),
            },
            rg,
        ))
    }

    /// Mean cross-entropy of `logits[B, K]` against class indices.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let vl = self.value(logits);
        if vl.rank() != 2 || vl.shape()[0] != labels.len() {
            return Err(MvftError::shape("cross_entropy", vl.shape(), &[labels.len()]));
        }
        let (batch, k) = (vl.shape()[0], vl.shape()[1]);
        if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
            return Err(MvftError::contract(format!(
                "label {bad} out of range for {k} classes"
            )));
        }
        let mut probs = vec![0.0; batch * k];
        let mut loss = 0.0;
        for (b, &label) in labels.iter().enumerate() {
            let row = vl.row(b);
            softmax_into(row, &mut probs[b * k..(b + 1) * k]);
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
            loss += lse - row[label];
        }
        let out = Tensor::scalar(loss / batch as f64);
        let rg = self.rg(&[logits]);
        Ok(self.push(
            out,
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            rg,
        ))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let out = Tensor::scalar(self.value(x).sum());
        let rg = self.rg(&[x]);
        self.push(out, Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let vx = self.value(x);
        let out = Tensor::scalar(vx.sum() / vx.len() as f64);
        let rg = self.rg(&[x]);
        self.push(out, Op::Mean(x), rg)
    }

    /// Scalar `Σ x·w` for a constant weight buffer of the same size.
    pub fn weighted_sum(&mut self, x: Var, weights: &[f64]) -> Result<Var> {
        let vx = self.value(x);
        if vx.len() != weights.len() {
            return Err(MvftError::shape("weighted_sum", vx.shape(), &[weights.len()]));
        }
        let total = vx.data().iter().zip(weights).map(|(a, b)| a * b).sum();
        let rg = self.rg(&[x]);
        Ok(self.push(
            Tensor::scalar(total),
            Op::WeightedSum {
                x,
                weights: weights.to_vec(),
            },
            rg,
        ))
    }

    /// Inverted dropout with a precomputed keep mask already scaled by
    /// `1 / (1 - rate)`.
    pub fn dropout(&mut self, x: Var, mask: Vec<f64>) -> Result<Var> {
        let vx = self.value(x);
        if vx.len() != mask.len() {
            return Err(MvftError::shape("dropout", vx.shape(), &[mask.len()]));
        }
        let data = vx.data().iter().zip(&mask).map(|(a, m)| a * m).collect();
        let out = Tensor::new(vx.shape().to_vec(), data)?;
        let rg = self.rg(&[x]);
        Ok(self.push(out, Op::Dropout { x, mask }, rg))
    }

    /// Runs the reverse sweep from a scalar `loss`, consuming the tape.
    pub fn backward(self, loss: Var) -> Result<Gradients> {
        if !self.value(loss).is_scalar() {
            return Err(MvftError::contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let nodes = self.nodes;
        let mut grads: Vec<Option<Tensor>> = (0..nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::new(nodes[loss.0].value.shape().to_vec(), vec![1.0])?);

        for idx in (0..=loss.0).rev() {
            let node = &nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            let contributions = backward_rule(&nodes, node, &g);
            grads[idx] = Some(g);
            for (var, delta) in contributions {
                if !nodes[var.0].requires_grad {
                    continue;
                }
                accumulate(&mut grads[var.0], delta, nodes[var.0].value.shape());
            }
        }
        Ok(Gradients { grads })
    }
}

fn accumulate(slot: &mut Option<Tensor>, delta: Vec<f64>, shape: &[usize]) {
    match slot {
        Some(existing) => {
            for (e, d) in existing.data_mut().iter_mut().zip(&delta) {
                *e += d;
            }
        }
        None => *slot = Some(Tensor::new(shape.to_vec(), delta).expect("grad shape")),
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + 0.044715 * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}

/// Returns `(input, gradient contribution)` pairs for one node.
fn backward_rule(nodes: &[Node], node: &Node, g: &Tensor) -> Vec<(Var, Vec<f64>)> {
    let val = |v: Var| &nodes[v.0].value;
    let gd = g.data();
    match &node.op {
        Op::Leaf => vec![],
        Op::Add(a, b) => vec![(*a, gd.to_vec()), (*b, gd.to_vec())],
        Op::AddBroadcast(a, b) => {
            let n = val(*b).len();
            let mut gb = vec![0.0; n];
            for chunk in gd.chunks(n) {
                for (acc, x) in gb.iter_mut().zip(chunk) {
                    *acc += x;
                }
            }
            vec![(*a, gd.to_vec()), (*b, gb)]
        }
        Op::Mul(a, b) => {
            let ga = gd.iter().zip(val(*b).data()).map(|(x, y)| x * y).collect();
            let gb = gd.iter().zip(val(*a).data()).map(|(x, y)| x * y).collect();
            vec![(*a, ga), (*b, gb)]
        }
        Op::Scale(a, f) => vec![(*a, gd.iter().map(|x| x * f).collect())],
        Op::MatMul(a, b) => {
            let (va, vb) = (val(*a), val(*b));
            let k = va.last_dim();
            let n = vb.shape()[1];
            let m = va.len() / k;
            let mut ga = vec![0.0; m * k];
            let mut gb = vec![0.0; k * n];
            gemm_nt_acc(gd, vb.data(), &mut ga, m, n, k);
            gemm_tn_acc(va.data(), gd, &mut gb, m, k, n);
            vec![(*a, ga), (*b, gb)]
        }
        Op::BatchMatMul { a, b, transpose_b } => {
            let (va, vb) = (val(*a), val(*b));
            let (batch, m, k) = (va.shape()[0], va.shape()[1], va.shape()[2]);
            let n = g.shape()[2];
            let mut ga = vec![0.0; va.len()];
            let mut gb = vec![0.0; vb.len()];
            for bi in 0..batch {
                let asl = &va.data()[bi * m * k..(bi + 1) * m * k];
                let bsl = &vb.data()[bi * k * n..(bi + 1) * k * n];
                let gsl = &gd[bi * m * n..(bi + 1) * m * n];
                let gasl = &mut ga[bi * m * k..(bi + 1) * m * k];
                let gbsl = &mut gb[bi * k * n..(bi + 1) * k * n];
                if *transpose_b {
                    // c = a·bᵀ with b [n×k]
                    gemm_acc(gsl, bsl, gasl, m, n, k);
                    gemm_tn_acc(gsl, asl, gbsl, m, n, k);
                } else {
                    gemm_nt_acc(gsl, bsl, gasl, m, n, k);
                    gemm_tn_acc(asl, gsl, gbsl, m, k, n);
                }
            }
            vec![(*a, ga), (*b, gb)]
        }
        Op::Softmax(x) => {
            let y = node.value.data();
            let d = node.value.last_dim();
            let mut gx = vec![0.0; y.len()];
            for ((yr, gr), out) in y.chunks(d).zip(gd.chunks(d)).zip(gx.chunks_mut(d)) {
                let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                for j in 0..d {
                    out[j] = yr[j] * (gr[j] - dot);
                }
            }
            vec![(*x, gx)]
        }
        Op::LayerNorm {
            x,
            gamma,
            beta,
            normalized,
            inv_std,
        } => {
            let gam = val(*gamma).data();
            let d = gam.len();
            let mut gx = vec![0.0; normalized.len()];
            let mut gg = vec![0.0; d];
            let mut gbeta = vec![0.0; d];
            for (r, &is) in inv_std.iter().enumerate() {
                let nrow = &normalized[r * d..(r + 1) * d];
                let grow = &gd[r * d..(r + 1) * d];
                let mut mean_dn = 0.0;
                let mut mean_dn_n = 0.0;
                for j in 0..d {
                    let dn = grow[j] * gam[j];
                    mean_dn += dn;
                    mean_dn_n += dn * nrow[j];
                    gg[j] += grow[j] * nrow[j];
                    gbeta[j] += grow[j];
                }
                mean_dn /= d as f64;
                mean_dn_n /= d as f64;
                for j in 0..d {
                    let dn = grow[j] * gam[j];
                    gx[r * d + j] = is * (dn - mean_dn - nrow[j] * mean_dn_n);
                }
            }
            vec![(*x, gx), (*gamma, gg), (*beta, gbeta)]
        }
        Op::Gelu(x) => {
            let gx = gd
                .iter()
                .zip(val(*x).data())
                .map(|(g, &v)| g * gelu_grad(v))
                .collect();
            vec![(*x, gx)]
        }
        Op::Concat { inputs, axis } => {
            let shape = node.value.shape();
            let outer: usize = shape[..*axis].iter().product();
            let inner: usize = shape[axis + 1..].iter().product();
            let mut parts: Vec<Vec<f64>> =
                inputs.iter().map(|v| Vec::with_capacity(val(*v).len())).collect();
            let mut pos = 0;
            for _ in 0..outer {
                for (i, v) in inputs.iter().enumerate() {
                    let len = val(*v).shape()[*axis] * inner;
                    parts[i].extend_from_slice(&gd[pos..pos + len]);
                    pos += len;
                }
            }
            inputs.iter().copied().zip(parts).collect()
        }
        Op::Reshape(x) => vec![(*x, gd.to_vec())],
        Op::Expand(x) => {
            let n = val(*x).len();
            let mut gx = vec![0.0; n];
            for chunk in gd.chunks(n) {
                for (acc, v) in gx.iter_mut().zip(chunk) {
                    *acc += v;
                }
            }
            vec![(*x, gx)]
        }
        Op::Gather { table, indices } => {
            let vt = val(*table);
            let d = vt.shape()[1];
            let mut gt = vec![0.0; vt.len()];
            for (pos, &i) in indices.iter().enumerate() {
                for j in 0..d {
                    gt[i * d + j] += gd[pos * d + j];
                }
            }
            vec![(*table, gt)]
        }
        Op::CrossEntropy {
            logits,
            labels,
            probs,
        } => {
            let k = val(*logits).shape()[1];
            let scale = gd[0] / labels.len() as f64;
            let mut gl: Vec<f64> = probs.iter().map(|p| p * scale).collect();
            for (b, &label) in labels.iter().enumerate() {
                gl[b * k + label] -= scale;
            }
            vec![(*logits, gl)]
        }
        Op::Sum(x) => vec![(*x, vec![gd[0]; val(*x).len()])],
        Op::Mean(x) => {
            let n = val(*x).len();
            vec![(*x, vec![gd[0] / n as f64; n])]
        }
        Op::WeightedSum { x, weights } => vec![(*x, weights.iter().map(|w| w * gd[0]).collect())],
        Op::Dropout { x, mask } => vec![(*x, gd.iter().zip(mask).map(|(a, m)| a * m).collect())],
    }
}
