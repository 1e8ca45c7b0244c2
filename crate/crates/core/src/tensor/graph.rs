use super::{axis_split, Result, Tensor, TensorError};

/// Handle to a node on a [`Graph`].
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
    Sub(Var, Var),
    Mul(Var, Var),
    AddBias(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Matmul(Var, Var),
    Transpose(Var),
    Reshape(Var),
    Concat { parts: Vec<Var>, axis: usize },
    Slice { x: Var, axis: usize, start: usize },
    GatherRows { x: Var, rows: Vec<usize> },
    Relu(Var),
    Sigmoid(Var),
    Log(Var),
    Exp(Var),
    Abs(Var),
    Square(Var),
    Clamp { x: Var, lo: f64, hi: f64 },
    // Masked softmax shares this rule: masked outputs are exactly zero.
    Softmax { x: Var, axis: usize },
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    Sum(Var),
    Mean(Var),
    Conv2d(Var, Var),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    requires_grad: bool,
    op: Op,
}

/// Tape of operations recorded during one forward pass.
///
/// Nodes are appended in execution order, so the tape order is already a
/// topological order of the computation.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients produced by one [`Graph::backward`] call.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient for `var`, or `None` when the node does not require grad.
    pub fn get(&self, var: Var) -> Option<&Tensor> {
        self.grads.get(var.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, var: Var) -> Option<Tensor> {
        self.grads.get_mut(var.0).and_then(Option::take)
    }
}

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(TensorError::Shape {
            op,
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    Ok(())
}

fn rank2(op: &'static str, t: &Tensor) -> Result<(usize, usize)> {
    match *t.shape() {
        [m, n] => Ok((m, n)),
        _ => Err(TensorError::Invalid {
            op,
            reason: format!("expected a 2-D tensor, got shape {:?}", t.shape()),
        }),
    }
}

fn check_axis(op: &'static str, shape: &[usize], axis: usize) -> Result<()> {
    if axis >= shape.len() {
        return Err(TensorError::Invalid {
            op,
            reason: format!("axis {axis} out of range for shape {shape:?}"),
        });
    }
    Ok(())
}

fn accumulate(slot: &mut Option<Vec<f64>>, delta: &[f64]) {
    match slot {
        Some(buf) => buf.iter_mut().zip(delta).for_each(|(g, d)| *g += d),
        None => *slot = Some(delta.to_vec()),
    }
}

fn accumulate_owned(slot: &mut Option<Vec<f64>>, delta: Vec<f64>) {
    match slot {
        Some(buf) => buf.iter_mut().zip(&delta).for_each(|(g, d)| *g += d),
        None => *slot = Some(delta),
    }
}

fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let out_row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let b_row = &b[p * n..(p + 1) * n];
            for (o, bv) in out_row.iter_mut().zip(b_row) {
                *o += av * bv;
            }
        }
    }
    out
}

fn transpose_raw(a: &[f64], m: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            out[j * m + i] = a[i * n + j];
        }
    }
    out
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            requires_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    /// Registers a trainable leaf.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            value,
            requires_grad: true,
            op: Op::Leaf,
        });
        Var(self.nodes.len() - 1)
    }

    /// Registers an untracked leaf.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            value,
            requires_grad: false,
            op: Op::Leaf,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn item(&self, v: Var) -> f64 {
        self.nodes[v.0].value.item()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn binary(
        &mut self,
        op: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Tensor> {
        let (ta, tb) = (self.value(a), self.value(b));
        same_shape(op, ta, tb)?;
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| f(*x, *y)).collect();
        Tensor::new(ta.shape().to_vec(), data)
    }

    fn unary(&self, v: Var, f: impl Fn(f64) -> f64) -> Tensor {
        let t = self.value(v);
        Tensor {
            shape: t.shape().to_vec(),
            data: t.data().iter().map(|x| f(*x)).collect(),
        }
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.binary("add", a, b, |x, y| x + y)?;
        Ok(self.push(out, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.binary("sub", a, b, |x, y| x - y)?;
        Ok(self.push(out, Op::Sub(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.binary("mul", a, b, |x, y| x * y)?;
        Ok(self.push(out, Op::Mul(a, b), &[a, b]))
    }

    /// Adds `bias` (shape `[n]`) to every length-`n` row of `x`.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (tx, tb) = (self.value(x), self.value(bias));
        let n = tb.numel();
        if tb.shape().len() != 1 || tx.shape().last() != Some(&n) {
            return Err(TensorError::Shape {
                op: "add_bias",
                lhs: tx.shape().to_vec(),
                rhs: tb.shape().to_vec(),
            });
        }
        let mut data = tx.data().to_vec();
        for row in data.chunks_mut(n) {
            row.iter_mut().zip(tb.data()).for_each(|(o, b)| *o += b);
        }
        let out = Tensor::new(tx.shape().to_vec(), data)?;
        Ok(self.push(out, Op::AddBias(x, bias), &[x, bias]))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        let out = self.unary(x, |v| v * c);
        Ok(self.push(out, Op::Scale(x, c), &[x]))
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Result<Var> {
        let out = self.unary(x, |v| v + c);
        Ok(self.push(out, Op::AddScalar(x), &[x]))
    }

    /// `1 - x`, elementwise.
    pub fn one_minus(&mut self, x: Var) -> Result<Var> {
        let neg = self.scale(x, -1.0)?;
        self.add_scalar(neg, 1.0)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (m, k) = rank2("matmul", ta)?;
        let (k2, n) = rank2("matmul", tb)?;
        if k != k2 {
            return Err(TensorError::Shape {
                op: "matmul",
                lhs: ta.shape().to_vec(),
                rhs: tb.shape().to_vec(),
            });
        }
        let out = Tensor::new(vec![m, n], matmul_raw(ta.data(), tb.data(), m, k, n))?;
        Ok(self.push(out, Op::Matmul(a, b), &[a, b]))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let (m, n) = rank2("transpose", t)?;
        let out = Tensor::new(vec![n, m], transpose_raw(t.data(), m, n))?;
        Ok(self.push(out, Op::Transpose(x), &[x]))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x);
        if shape.iter().product::<usize>() != t.numel() {
            return Err(TensorError::Shape {
                op: "reshape",
                lhs: t.shape().to_vec(),
                rhs: shape.to_vec(),
            });
        }
        let out = Tensor::new(shape.to_vec(), t.data().to_vec())?;
        Ok(self.push(out, Op::Reshape(x), &[x]))
    }

    /// Concatenates along `axis`; all other extents must agree.
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = parts.first().ok_or_else(|| TensorError::Invalid {
            op: "concat",
            reason: "no inputs".into(),
        })?;
        let base = self.value(*first).shape().to_vec();
        check_axis("concat", &base, axis)?;
        let mut total = 0;
        for p in parts {
            let s = self.value(*p).shape();
            let compatible = s.len() == base.len()
                && s.iter()
                    .zip(&base)
                    .enumerate()
                    .all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(TensorError::Shape {
                    op: "concat",
                    lhs: base.clone(),
                    rhs: s.to_vec(),
                });
            }
            total += s[axis];
        }
        let mut shape = base.clone();
        shape[axis] = total;
        let (outer, _, inner) = axis_split(&shape, axis);
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for p in parts {
                let t = self.value(*p);
                let chunk = t.shape()[axis] * inner;
                data.extend_from_slice(&t.data()[o * chunk..(o + 1) * chunk]);
            }
        }
        let out = Tensor::new(shape, data)?;
        Ok(self.push(
            out,
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
            parts,
        ))
    }

    /// Takes `len` entries starting at `start` along `axis`.
    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let t = self.value(x);
        check_axis("slice", t.shape(), axis)?;
        if start + len > t.shape()[axis] {
            return Err(TensorError::Index {
                op: "slice",
                index: start + len,
                len: t.shape()[axis],
            });
        }
        let (outer, n, inner) = axis_split(t.shape(), axis);
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = o * n * inner + start * inner;
            data.extend_from_slice(&t.data()[base..base + len * inner]);
        }
        let mut shape = t.shape().to_vec();
        shape[axis] = len;
        let out = Tensor::new(shape, data)?;
        Ok(self.push(out, Op::Slice { x, axis, start }, &[x]))
    }

    /// Selects rows of a tensor viewed as `[shape[0], rest]`.
    pub fn gather_rows(&mut self, x: Var, rows: &[usize]) -> Result<Var> {
        let t = self.value(x);
        let n = t.shape()[0];
        let cols = t.numel() / n.max(1);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for &r in rows {
            if r >= n {
                return Err(TensorError::Index {
                    op: "gather_rows",
                    index: r,
                    len: n,
                });
            }
            data.extend_from_slice(&t.data()[r * cols..(r + 1) * cols]);
        }
        let mut shape = t.shape().to_vec();
        shape[0] = rows.len();
        let out = Tensor::new(shape, data)?;
        Ok(self.push(
            out,
            Op::GatherRows {
                x,
                rows: rows.to_vec(),
            },
            &[x],
        ))
    }

    /// Row lookup into a `[vocab, d]` table.
    pub fn embedding_lookup(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        if self.value(table).shape().len() != 2 {
            return Err(TensorError::Invalid {
                op: "embedding_lookup",
                reason: "table must be 2-D".into(),
            });
        }
        self.gather_rows(table, ids)
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let out = self.unary(x, |v| v.max(0.0));
        Ok(self.push(out, Op::Relu(x), &[x]))
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        let out = self.unary(x, |v| {
            if v >= 0.0 {
                1.0 / (1.0 + (-v).exp())
            } else {
                let e = v.exp();
                e / (1.0 + e)
            }
        });
        Ok(self.push(out, Op::Sigmoid(x), &[x]))
    }

    /// Natural log; every input must be strictly positive.
    pub fn log(&mut self, x: Var) -> Result<Var> {
        if self.value(x).data().iter().any(|v| !(*v > 0.0) || !v.is_finite()) {
            return Err(TensorError::NonFinite { op: "log" });
        }
        let out = self.unary(x, f64::ln);
        Ok(self.push(out, Op::Log(x), &[x]))
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        let out = self.unary(x, f64::exp);
        if !out.is_finite() {
            return Err(TensorError::NonFinite { op: "exp" });
        }
        Ok(self.push(out, Op::Exp(x), &[x]))
    }

    pub fn abs(&mut self, x: Var) -> Result<Var> {
        let out = self.unary(x, f64::abs);
        Ok(self.push(out, Op::Abs(x), &[x]))
    }

    pub fn square(&mut self, x: Var) -> Result<Var> {
        let out = self.unary(x, |v| v * v);
        Ok(self.push(out, Op::Square(x), &[x]))
    }

    /// Clamps into `[lo, hi]`; gradient passes only strictly inside the range.
    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Result<Var> {
        let out = self.unary(x, |v| v.clamp(lo, hi));
        Ok(self.push(out, Op::Clamp { x, lo, hi }, &[x]))
    }

    /// Max-subtracted softmax along `axis`.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let t = self.value(x);
        check_axis("softmax", t.shape(), axis)?;
        if !t.is_finite() {
            return Err(TensorError::NonFinite { op: "softmax" });
        }
        let (outer, n, inner) = axis_split(t.shape(), axis);
        let src = t.data();
        let mut data = vec![0.0; src.len()];
        for o in 0..outer {
            for i in 0..inner {
                let idx = |j: usize| o * n * inner + j * inner + i;
                let max = (0..n).map(|j| src[idx(j)]).fold(f64::NEG_INFINITY, f64::max);
                let mut total = 0.0;
                for j in 0..n {
                    let e = (src[idx(j)] - max).exp();
                    data[idx(j)] = e;
                    total += e;
                }
                for j in 0..n {
                    data[idx(j)] /= total;
                }
            }
        }
        let out = Tensor::new(t.shape().to_vec(), data)?;
        Ok(self.push(out, Op::Softmax { x, axis }, &[x]))
    }

    /// Softmax over the last axis of a 2-D tensor restricted to columns with
    /// `mask[j] == true`. Masked columns receive exactly zero weight; a row
    /// with no valid column is all zeros.
    pub fn masked_softmax(&mut self, x: Var, mask: &[bool]) -> Result<Var> {
        let t = self.value(x);
        let (m, n) = rank2("masked_softmax", t)?;
        if mask.len() != n {
            return Err(TensorError::Shape {
                op: "masked_softmax",
                lhs: t.shape().to_vec(),
                rhs: vec![mask.len()],
            });
        }
        if !t.is_finite() {
            return Err(TensorError::NonFinite {
                op: "masked_softmax",
            });
        }
        let src = t.data();
        let mut data = vec![0.0; m * n];
        for r in 0..m {
            let row = &src[r * n..(r + 1) * n];
            let max = row
                .iter()
                .zip(mask)
                .filter(|(_, ok)| **ok)
                .map(|(v, _)| *v)
                .fold(f64::NEG_INFINITY, f64::max);
            if max == f64::NEG_INFINITY {
                continue;
            }
            let out = &mut data[r * n..(r + 1) * n];
            let mut total = 0.0;
            for j in 0..n {
                if mask[j] {
                    out[j] = (row[j] - max).exp();
                    total += out[j];
                }
            }
            out.iter_mut().for_each(|v| *v /= total);
        }
        let out = Tensor::new(vec![m, n], data)?;
        Ok(self.push(out, Op::Softmax { x, axis: 1 }, &[x]))
    }

    /// Normalizes every row over the last dimension, then applies gain and bias.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let (tx, tg, tb) = (self.value(x), self.value(gain), self.value(bias));
        let n = *tx.shape().last().unwrap_or(&0);
        if tg.shape() != [n] || tb.shape() != [n] {
            return Err(TensorError::Shape {
                op: "layer_norm",
                lhs: tx.shape().to_vec(),
                rhs: tg.shape().to_vec(),
            });
        }
        let rows = tx.numel() / n.max(1);
        let mut xhat = vec![0.0; tx.numel()];
        let mut rstd = vec![0.0; rows];
        let mut data = vec![0.0; tx.numel()];
        for r in 0..rows {
            let row = &tx.data()[r * n..(r + 1) * n];
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let inv = 1.0 / (var + eps).sqrt();
            rstd[r] = inv;
            for j in 0..n {
                let h = (row[j] - mean) * inv;
                xhat[r * n + j] = h;
                data[r * n + j] = h * tg.data()[j] + tb.data()[j];
            }
        }
        let out = Tensor::new(tx.shape().to_vec(), data)?;
        Ok(self.push(
            out,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            },
            &[x, gain, bias],
        ))
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).data().iter().sum();
        Ok(self.push(Tensor::scalar(s), Op::Sum(x), &[x]))
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        if t.numel() == 0 {
            return Err(TensorError::Invalid {
                op: "mean",
                reason: "empty tensor".into(),
            });
        }
        let s = t.data().iter().sum::<f64>() / t.numel() as f64;
        Ok(self.push(Tensor::scalar(s), Op::Mean(x), &[x]))
    }

    /// Same-padded 2-D convolution over an `[h, w, c_in]` map with an
    /// odd-sized `[kh, kw, c_in, c_out]` kernel.
    pub fn conv2d(&mut self, x: Var, weight: Var) -> Result<Var> {
        let (tx, tw) = (self.value(x), self.value(weight));
        let (h, w, cin, kh, kw, cout) = conv_dims(tx.shape(), tw.shape())?;
        let mut out = vec![0.0; h * w * cout];
        let (ph, pw) = (kh / 2, kw / 2);
        let (xd, wd) = (tx.data(), tw.data());
        for i in 0..h {
            for j in 0..w {
                let o = &mut out[(i * w + j) * cout..(i * w + j + 1) * cout];
                for a in 0..kh {
                    let Some(si) = (i + a).checked_sub(ph).filter(|v| *v < h) else {
                        continue;
                    };
                    for b in 0..kw {
                        let Some(sj) = (j + b).checked_sub(pw).filter(|v| *v < w) else {
                            continue;
                        };
                        let xin = &xd[(si * w + sj) * cin..(si * w + sj + 1) * cin];
                        let kbase = (a * kw + b) * cin * cout;
                        for (ci, xv) in xin.iter().enumerate() {
                            if *xv == 0.0 {
                                continue;
                            }
                            let krow = &wd[kbase + ci * cout..kbase + (ci + 1) * cout];
                            o.iter_mut().zip(krow).for_each(|(acc, k)| *acc += xv * k);
                        }
                    }
                }
            }
        }
        let out = Tensor::new(vec![h, w, cout], out)?;
        Ok(self.push(out, Op::Conv2d(x, weight), &[x, weight]))
    }

    /// Scaled dot-product attention. Returns `(output, weights)`; columns with
    /// `key_mask[j] == false` are excluded.
    pub fn attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        key_mask: Option<&[bool]>,
    ) -> Result<(Var, Var)> {
        let dk = *self.shape(q).last().unwrap_or(&1);
        let kt = self.transpose(k)?;
        let scores = self.matmul(q, kt)?;
        let scaled = self.scale(scores, 1.0 / (dk as f64).sqrt())?;
        let weights = match key_mask {
            Some(mask) => self.masked_softmax(scaled, mask)?,
            None => self.softmax(scaled, 1)?,
        };
        let out = self.matmul(weights, v)?;
        Ok((out, weights))
    }

    /// Reverse pass from a one-element `loss`. Gradient buffers start at zero
    /// on every call; nothing is carried between calls.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).numel() != 1 {
            return Err(TensorError::Invalid {
                op: "backward",
                reason: format!("loss must be a scalar, got {:?}", self.shape(loss)),
            });
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(gy) = grads[idx].take() else {
                continue;
            };
            self.backprop(idx, &gy, &mut grads);
            grads[idx] = Some(gy);
        }
        let grads = self
            .nodes
            .iter()
            .zip(grads)
            .map(|(node, g)| {
                node.requires_grad.then(|| {
                    let data = g.unwrap_or_else(|| vec![0.0; node.value.numel()]);
                    Tensor {
                        shape: node.value.shape().to_vec(),
                        data,
                    }
                })
            })
            .collect();
        Ok(Gradients { grads })
    }

    fn backprop(&self, idx: usize, gy: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[idx];
        let rg = |v: Var| self.nodes[v.0].requires_grad;
        let val = |v: Var| self.nodes[v.0].value.data();
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                if rg(*a) {
                    accumulate(&mut grads[a.0], gy);
                }
                if rg(*b) {
                    accumulate(&mut grads[b.0], gy);
                }
            }
            Op::Sub(a, b) => {
                if rg(*a) {
                    accumulate(&mut grads[a.0], gy);
                }
                if rg(*b) {
                    accumulate_owned(&mut grads[b.0], gy.iter().map(|g| -g).collect());
                }
            }
            Op::Mul(a, b) => {
                if rg(*a) {
                    let d = gy.iter().zip(val(*b)).map(|(g, y)| g * y).collect();
                    accumulate_owned(&mut grads[a.0], d);
                }
                if rg(*b) {
                    let d = gy.iter().zip(val(*a)).map(|(g, x)| g * x).collect();
                    accumulate_owned(&mut grads[b.0], d);
                }
            }
            Op::AddBias(x, b) => {
                if rg(*x) {
                    accumulate(&mut grads[x.0], gy);
                }
                if rg(*b) {
                    let n = val(*b).len();
                    let mut d = vec![0.0; n];
                    for row in gy.chunks(n) {
                        d.iter_mut().zip(row).for_each(|(o, g)| *o += g);
                    }
                    accumulate_owned(&mut grads[b.0], d);
                }
            }
            Op::Scale(x, c) => {
                accumulate_owned(&mut grads[x.0], gy.iter().map(|g| g * c).collect());
            }
            Op::AddScalar(x) | Op::Reshape(x) => accumulate(&mut grads[x.0], gy),
            Op::Matmul(a, b) => {
                let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
                let (m, k) = (ta.shape()[0], ta.shape()[1]);
                let n = tb.shape()[1];
                if rg(*a) {
                    let bt = transpose_raw(tb.data(), k, n);
                    accumulate_owned(&mut grads[a.0], matmul_raw(gy, &bt, m, n, k));
                }
                if rg(*b) {
                    let at = transpose_raw(ta.data(), m, k);
                    accumulate_owned(&mut grads[b.0], matmul_raw(&at, gy, k, m, n));
                }
            }
            Op::Transpose(x) => {
                let s = node.value.shape();
                accumulate_owned(&mut grads[x.0], transpose_raw(gy, s[0], s[1]));
            }
            Op::Concat { parts, axis } => {
                let (outer, _, inner) = axis_split(node.value.shape(), *axis);
                let total = node.value.shape()[*axis];
                let mut offset = 0;
                for p in parts {
                    let len = self.nodes[p.0].value.shape()[*axis];
                    if rg(*p) {
                        let mut d = Vec::with_capacity(outer * len * inner);
                        for o in 0..outer {
                            let base = o * total * inner + offset * inner;
                            d.extend_from_slice(&gy[base..base + len * inner]);
                        }
                        accumulate_owned(&mut grads[p.0], d);
                    }
                    offset += len;
                }
            }
            Op::Slice { x, axis, start } => {
                let src = &self.nodes[x.0].value;
                let (outer, n, inner) = axis_split(src.shape(), *axis);
                let len = node.value.shape()[*axis];
                let mut d = vec![0.0; src.numel()];
                for o in 0..outer {
                    let dst = o * n * inner + start * inner;
                    let from = o * len * inner;
                    d[dst..dst + len * inner].copy_from_slice(&gy[from..from + len * inner]);
                }
                accumulate_owned(&mut grads[x.0], d);
            }
            Op::GatherRows { x, rows } => {
                let src = &self.nodes[x.0].value;
                let cols = src.numel() / src.shape()[0].max(1);
                let slot = grads[x.0].get_or_insert_with(|| vec![0.0; src.numel()]);
                for (k, r) in rows.iter().enumerate() {
                    let dst = &mut slot[r * cols..(r + 1) * cols];
                    dst.iter_mut()
                        .zip(&gy[k * cols..(k + 1) * cols])
                        .for_each(|(o, g)| *o += g);
                }
            }
            Op::Relu(x) => {
                let d = gy
                    .iter()
                    .zip(val(*x))
                    .map(|(g, v)| if *v > 0.0 { *g } else { 0.0 })
                    .collect();
                accumulate_owned(&mut grads[x.0], d);
            }
            Op::Sigmoid(x) => {
                let d = gy
                    .iter()
                    .zip(node.value.data())
                    .map(|(g, y)| g * y * (1.0 - y))
                    .collect();
                accumulate_owned(&mut grads[x.0], d);
            }
            Op::Log(x) => {
                let d = gy.iter().zip(val(*x)).map(|(g, v)| g / v).collect();
                accumulate_owned(&mut grads[x.0], d);
            }
            Op::Exp(x) => {
                let d = gy.iter().zip(node.value.data()).map(|(g, y)| g * y).collect();
                accumulate_owned(&mut grads[x.0], d);
            }
            Op::Abs(x) => {
                let d = gy
                    .iter()
                    .zip(val(*x))
                    .map(|(g, v)| {
                        if *v > 0.0 {
                            *g
                        } else if *v < 0.0 {
                            -g
                        } else {
                            0.0
                        }
                    })
                    .collect();
                accumulate_owned(&mut grads[x.0], d);
            }
            Op::Square(x) => {
                let d = gy.iter().zip(val(*x)).map(|(g, v)| 2.0 * g * v).collect();
                accumulate_owned(&mut grads[x.0], d);
            }
            Op::Clamp { x, lo, hi } => {
                let d = gy
                    .iter()
                    .zip(val(*x))
                    .map(|(g, v)| if *v > *lo && *v < *hi { *g } else { 0.0 })
                    .collect();
                accumulate_owned(&mut grads[x.0], d);
            }
            Op::Softmax { x, axis } => {
                let y = node.value.data();
                let (outer, n, inner) = axis_split(node.value.shape(), *axis);
                let mut d = vec![0.0; y.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let idx = |j: usize| o * n * inner + j * inner + i;
                        let dot: f64 = (0..n).map(|j| y[idx(j)] * gy[idx(j)]).sum();
                        for j in 0..n {
                            d[idx(j)] = y[idx(j)] * (gy[idx(j)] - dot);
                        }
                    }
                }
                accumulate_owned(&mut grads[x.0], d);
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            } => {
                let g = val(*gain);
                let n = g.len();
                if rg(*x) {
                    let mut d = vec![0.0; xhat.len()];
                    for (r, inv) in rstd.iter().enumerate() {
                        let span = r * n..(r + 1) * n;
                        let (gyr, xh) = (&gy[span.clone()], &xhat[span.clone()]);
                        let dxhat: Vec<f64> = gyr.iter().zip(g).map(|(a, b)| a * b).collect();
                        let mean_d = dxhat.iter().sum::<f64>() / n as f64;
                        let mean_dx =
                            dxhat.iter().zip(xh).map(|(a, b)| a * b).sum::<f64>() / n as f64;
                        for j in 0..n {
                            d[r * n + j] = inv * (dxhat[j] - mean_d - xh[j] * mean_dx);
                        }
                    }
                    accumulate_owned(&mut grads[x.0], d);
                }
                if rg(*gain) {
                    let mut d = vec![0.0; n];
                    for (gyr, xh) in gy.chunks(n).zip(xhat.chunks(n)) {
                        for j in 0..n {
                            d[j] += gyr[j] * xh[j];
                        }
                    }
                    accumulate_owned(&mut grads[gain.0], d);
                }
                if rg(*bias) {
                    let mut d = vec![0.0; n];
                    for gyr in gy.chunks(n) {
                        d.iter_mut().zip(gyr).for_each(|(o, g)| *o += g);
                    }
                    accumulate_owned(&mut grads[bias.0], d);
                }
            }
            Op::Sum(x) => {
                let n = self.nodes[x.0].value.numel();
                accumulate_owned(&mut grads[x.0], vec![gy[0]; n]);
            }
            Op::Mean(x) => {
                let n = self.nodes[x.0].value.numel();
                accumulate_owned(&mut grads[x.0], vec![gy[0] / n as f64; n]);
            }
            Op::Conv2d(x, weight) => {
                let (tx, tw) = (&self.nodes[x.0].value, &self.nodes[weight.0].value);
                let (h, w, cin, kh, kw, cout) =
                    conv_dims(tx.shape(), tw.shape()).expect("validated in forward");
                let (ph, pw) = (kh / 2, kw / 2);
                let (xd, wd) = (tx.data(), tw.data());
                let mut dx = rg(*x).then(|| vec![0.0; xd.len()]);
                let mut dw = rg(*weight).then(|| vec![0.0; wd.len()]);
                for i in 0..h {
                    for j in 0..w {
                        let g = &gy[(i * w + j) * cout..(i * w + j + 1) * cout];
                        if g.iter().all(|v| *v == 0.0) {
                            continue;
                        }
                        for a in 0..kh {
                            let Some(si) = (i + a).checked_sub(ph).filter(|v| *v < h) else {
                                continue;
                            };
                            for b in 0..kw {
                                let Some(sj) = (j + b).checked_sub(pw).filter(|v| *v < w) else {
                                    continue;
                                };
                                let xoff = (si * w + sj) * cin;
                                let kbase = (a * kw + b) * cin * cout;
                                for ci in 0..cin {
                                    let krange = kbase + ci * cout..kbase + (ci + 1) * cout;
                                    if let Some(dx) = dx.as_mut() {
                                        dx[xoff + ci] += wd[krange.clone()]
                                            .iter()
                                            .zip(g)
                                            .map(|(k, gv)| k * gv)
                                            .sum::<f64>();
                                    }
                                    if let Some(dw) = dw.as_mut() {
                                        let xv = xd[xoff + ci];
                                        if xv != 0.0 {
                                            dw[krange]
                                                .iter_mut()
                                                .zip(g)
                                                .for_each(|(o, gv)| *o += xv * gv);
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
                if let Some(dx) = dx {
                    accumulate_owned(&mut grads[x.0], dx);
                }
                if let Some(dw) = dw {
                    accumulate_owned(&mut grads[weight.0], dw);
                }
            }
        }
    }
}

fn conv_dims(x: &[usize], w: &[usize]) -> Result<(usize, usize, usize, usize, usize, usize)> {
    match (x, w) {
        ([h, wd, cin], [kh, kw, kcin, cout]) if cin == kcin && kh % 2 == 1 && kw % 2 == 1 => {
            Ok((*h, *wd, *cin, *kh, *kw, *cout))
        }
        _ => Err(TensorError::Shape {
            op: "conv2d",
            lhs: x.to_vec(),
            rhs: w.to_vec(),
        }),
    }
}
