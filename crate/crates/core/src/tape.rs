//! Define-by-run reverse-mode differentiation.
//!
//! A [`Tape`] owns every value produced during one forward pass. Ops append
//! a node holding the output and, when any input requires a gradient, the
//! information its backward rule needs. [`Tape::backward`] walks the nodes
//! in reverse insertion order, which is a valid topological order because
//! inputs always exist before the ops that consume them.
//!
//! There is no implicit broadcasting. Bias-style adaptation goes through
//! [`Tape::expand`] (new leading axis) followed by an explicit reshape.

use rand::Rng;

use crate::error::{Error, Result};
use crate::kernels;
use crate::tensor::{memory, numel, Tensor};

const LAYERNORM_EPS: f64 = 1e-5;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Scale(Var, f64),
    MulScalar(Var, Var),
    MatMul(Var, Var),
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    Exp(Var),
    Log(Var),
    Sigmoid(Var),
    Relu(Var),
    Silu(Var),
    Softplus(Var),
    Softmax {
        a: Var,
        axis: usize,
    },
    LayerNorm {
        a: Var,
        gamma: Option<Var>,
        beta: Option<Var>,
        normed: Vec<f64>,
        rstd: Vec<f64>,
    },
    Reshape(Var),
    Permute {
        a: Var,
        axes: Vec<usize>,
    },
    Concat {
        parts: Vec<Var>,
        axis: usize,
    },
    Slice {
        a: Var,
        axis: usize,
        start: usize,
    },
    Sum(Var),
    Mean(Var),
    Expand(Var),
    IndexRows {
        table: Var,
        idx: Vec<usize>,
    },
    Unfold {
        a: Var,
        size: usize,
        step: usize,
    },
    CausalConv {
        x: Var,
        w: Var,
    },
    Scan {
        a: Var,
        b: Var,
        h0: Var,
    },
    SsmDecay {
        delta: Var,
        a: Var,
    },
    SsmInput {
        delta: Var,
        b: Var,
        x: Var,
    },
    SsmReadout {
        h: Var,
        c: Var,
    },
    SelectiveScan(SelectiveScanInputs),
    Dropout {
        a: Var,
        mask: Vec<f64>,
    },
}

/// Inputs of the fused selective scan. Shapes: `u`, `delta` are
/// `[seqs, steps, d_inner]`; `a` is `[d_inner, d_state]`; `b`, `c` are
/// `[seqs, steps, d_state]`; `d` is `[d_inner]`.
#[derive(Clone, Copy, Debug)]
pub struct SelectiveScanInputs {
    pub u: Var,
    pub delta: Var,
    pub a: Var,
    pub b: Var,
    pub c: Var,
    pub d: Var,
}

struct Node {
    value: Tensor,
    requires_grad: bool,
    op: Op,
    grad: Option<Vec<f64>>,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    consumed: bool,
    tracked_bytes: usize,
}

impl Drop for Tape {
    fn drop(&mut self) {
        memory::free(self.tracked_bytes);
    }
}

fn bytes(n: usize) -> usize {
    n * std::mem::size_of::<f64>()
}

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(op, a.shape(), b.shape()));
    }
    Ok(())
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

    fn push(&mut self, value: Tensor, requires_grad: bool, op: Op) -> Var {
        let b = bytes(value.numel());
        self.tracked_bytes += b;
        memory::alloc(b);
        let op = if requires_grad { op } else { Op::Leaf };
        self.nodes.push(Node {
            value,
            requires_grad,
            op,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    /// Records a leaf. Leaves with `requires_grad` collect gradients.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, requires_grad, Op::Leaf)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient accumulated into `v` by the last backward pass.
    pub fn grad(&self, v: Var) -> Option<Tensor> {
        let node = &self.nodes[v.0];
        node.grad
            .as_ref()
            .map(|g| Tensor::new(node.value.shape().to_vec(), g.clone()).expect("grad shape"))
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    fn map_unary(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let x = self.value(a);
        let out = Tensor::new(x.shape().to_vec(), x.data().iter().map(|&v| f(v)).collect())
            .expect("same length");
        let rg = self.rg(&[a]);
        self.push(out, rg, op)
    }

    fn zip_binary(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var> {
        let (x, y) = (self.value(a), self.value(b));
        same_shape(name, x, y)?;
        let data = x.data().iter().zip(y.data()).map(|(&p, &q)| f(p, q)).collect();
        let out = Tensor::new(x.shape().to_vec(), data)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, rg, op))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_binary("add", a, b, |p, q| p + q, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_binary("sub", a, b, |p, q| p - q, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_binary("mul", a, b, |p, q| p * q, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_binary("div", a, b, |p, q| p / q, Op::Div(a, b))
    }

    /// Multiplies by a compile-time constant.
    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        self.map_unary(a, |v| v * c, Op::Scale(a, c))
    }

    /// Multiplies every element of `a` by the single element of `s`.
    pub fn mul_scalar(&mut self, a: Var, s: Var) -> Result<Var> {
        if self.value(s).numel() != 1 {
            return Err(Error::shape("mul_scalar", self.shape(a), self.shape(s)));
        }
        let c = self.value(s).data()[0];
        let x = self.value(a);
        let out = Tensor::new(x.shape().to_vec(), x.data().iter().map(|v| v * c).collect())?;
        let rg = self.rg(&[a, s]);
        Ok(self.push(out, rg, Op::MulScalar(a, s)))
    }

    /// `[m, k] · [k, n] -> [m, n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (x, y) = (self.value(a), self.value(b));
        if x.rank() != 2 || y.rank() != 2 || x.shape()[1] != y.shape()[0] {
            return Err(Error::shape("matmul", x.shape(), y.shape()));
        }
        let (m, k, n) = (x.shape()[0], x.shape()[1], y.shape()[1]);
        let mut out = vec![0.0; m * n];
        kernels::gemm(m, k, n, x.data(), false, y.data(), false, 0.0, &mut out);
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::new(vec![m, n], out)?, rg, Op::MatMul(a, b)))
    }

    /// Affine map over the last axis: `x · wᵀ + b` with `w: [out, in]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (xv, wv) = (self.value(x), self.value(w));
        let in_dim = *xv.shape().last().unwrap_or(&0);
        if wv.rank() != 2 || xv.rank() == 0 || wv.shape()[1] != in_dim {
            return Err(Error::shape("linear", xv.shape(), wv.shape()));
        }
        let out_dim = wv.shape()[0];
        if let Some(b) = b {
            if self.value(b).shape() != [out_dim] {
                return Err(Error::shape("linear", wv.shape(), self.shape(b)));
            }
        }
        let rows = xv.numel() / in_dim.max(1);
        let mut out = vec![0.0; rows * out_dim];
        if let Some(b) = b {
            let bias = self.value(b).data();
            for r in out.chunks_mut(out_dim) {
                r.copy_from_slice(bias);
            }
        }
        let beta = if b.is_some() { 1.0 } else { 0.0 };
        kernels::gemm(rows, in_dim, out_dim, xv.data(), false, wv.data(), true, beta, &mut out);
        let mut shape = xv.shape().to_vec();
        *shape.last_mut().unwrap() = out_dim;
        let mut deps = vec![x, w];
        deps.extend(b);
        let rg = self.rg(&deps);
        Ok(self.push(Tensor::new(shape, out)?, rg, Op::Linear { x, w, b }))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.map_unary(a, f64::exp, Op::Exp(a))
    }

    pub fn log(&mut self, a: Var) -> Var {
        self.map_unary(a, f64::ln, Op::Log(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.map_unary(a, kernels::sigmoid, Op::Sigmoid(a))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.map_unary(a, |v| v.max(0.0), Op::Relu(a))
    }

    pub fn silu(&mut self, a: Var) -> Var {
        self.map_unary(a, |v| v * kernels::sigmoid(v), Op::Silu(a))
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        self.map_unary(a, kernels::softplus, Op::Softplus(a))
    }

    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        let x = self.value(a);
        if axis >= x.rank() {
            return Err(Error::Axis {
                op: "softmax",
                axis,
                rank: x.rank(),
            });
        }
        let (outer, n, inner) = split_axis(x.shape(), axis);
        let mut out = vec![0.0; x.numel()];
        let d = x.data();
        for o in 0..outer {
            for i in 0..inner {
                let idx = |j: usize| (o * n + j) * inner + i;
                let max = (0..n).map(|j| d[idx(j)]).fold(f64::NEG_INFINITY, f64::max);
                let mut total = 0.0;
                for j in 0..n {
                    let e = (d[idx(j)] - max).exp();
                    out[idx(j)] = e;
                    total += e;
                }
                for j in 0..n {
                    out[idx(j)] /= total;
                }
            }
        }
        let out = Tensor::new(x.shape().to_vec(), out)?;
        let rg = self.rg(&[a]);
        Ok(self.push(out, rg, Op::Softmax { a, axis }))
    }

    /// Normalizes over the last axis (epsilon 1e-5), then applies the
    /// optional per-feature affine `gamma`, `beta`.
    pub fn layernorm(&mut self, a: Var, gamma: Option<Var>, beta: Option<Var>) -> Result<Var> {
        let x = self.value(a);
        let d = *x.shape().last().ok_or_else(|| Error::invalid("layernorm", "rank 0 input"))?;
        for p in gamma.iter().chain(beta.iter()) {
            if self.value(*p).shape() != [d] {
                return Err(Error::shape("layernorm", x.shape(), self.shape(*p)));
            }
        }
        let rows = x.numel() / d.max(1);
        let mut normed = vec![0.0; x.numel()];
        let mut rstd = vec![0.0; rows];
        for r in 0..rows {
            let row = &x.data()[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let rs = 1.0 / (var + LAYERNORM_EPS).sqrt();
            rstd[r] = rs;
            for (o, v) in normed[r * d..(r + 1) * d].iter_mut().zip(row) {
                *o = (v - mean) * rs;
            }
        }
        let mut out = normed.clone();
        if let Some(g) = gamma {
            let g = self.value(g).data();
            for row in out.chunks_mut(d) {
                row.iter_mut().zip(g).for_each(|(o, g)| *o *= g);
            }
        }
        if let Some(b) = beta {
            let b = self.value(b).data();
            for row in out.chunks_mut(d) {
                row.iter_mut().zip(b).for_each(|(o, b)| *o += b);
            }
        }
        let out = Tensor::new(x.shape().to_vec(), out)?;
        let mut deps = vec![a];
        deps.extend(gamma);
        deps.extend(beta);
        let rg = self.rg(&deps);
        Ok(self.push(
            out,
            rg,
            Op::LayerNorm {
                a,
                gamma,
                beta,
                normed,
                rstd,
            },
        ))
    }

    pub fn reshape(&mut self, a: Var, shape: impl Into<Vec<usize>>) -> Result<Var> {
        let out = self.value(a).clone().reshape(shape)?;
        let rg = self.rg(&[a]);
        Ok(self.push(out, rg, Op::Reshape(a)))
    }

    /// Reorders axes: output axis `i` is input axis `axes[i]`.
    pub fn permute(&mut self, a: Var, axes: &[usize]) -> Result<Var> {
        let x = self.value(a);
        let mut seen = vec![false; x.rank()];
        if axes.len() != x.rank() {
            return Err(Error::shape("permute", x.shape(), axes));
        }
        for &ax in axes {
            if ax >= x.rank() || seen[ax] {
                return Err(Error::invalid("permute", format!("invalid axes {axes:?}")));
            }
            seen[ax] = true;
        }
        let out = permute_tensor(x, axes);
        let rg = self.rg(&[a]);
        Ok(self.push(
            out,
            rg,
            Op::Permute {
                a,
                axes: axes.to_vec(),
            },
        ))
    }

    /// 2-D transpose.
    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        if self.value(a).rank() != 2 {
            return Err(Error::invalid("transpose", "expects a rank-2 tensor"));
        }
        self.permute(a, &[1, 0])
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = self
            .value(*parts.first().ok_or_else(|| Error::invalid("concat", "no inputs"))?)
            .shape()
            .to_vec();
        if axis >= first.len() {
            return Err(Error::Axis {
                op: "concat",
                axis,
                rank: first.len(),
            });
        }
        let mut total = 0;
        for &p in parts {
            let s = self.shape(p);
            let ok = s.len() == first.len()
                && s.iter().zip(&first).enumerate().all(|(i, (x, y))| i == axis || x == y);
            if !ok {
                return Err(Error::shape("concat", &first, s));
            }
            total += s[axis];
        }
        let (outer, _, inner) = split_axis(&first, axis);
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &p in parts {
                let x = self.value(p);
                let w = x.shape()[axis] * inner;
                out.extend_from_slice(&x.data()[o * w..(o + 1) * w]);
            }
        }
        let mut shape = first;
        shape[axis] = total;
        let rg = self.rg(parts);
        Ok(self.push(
            Tensor::new(shape, out)?,
            rg,
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
        ))
    }

    /// Keeps indices `start..end` along `axis`.
    pub fn slice(&mut self, a: Var, axis: usize, start: usize, end: usize) -> Result<Var> {
        let x = self.value(a);
        if axis >= x.rank() {
            return Err(Error::Axis {
                op: "slice",
                axis,
                rank: x.rank(),
            });
        }
        if start > end || end > x.shape()[axis] {
            return Err(Error::invalid(
                "slice",
                format!("range {start}..{end} out of bounds for {:?}", x.shape()),
            ));
        }
        let (outer, n, inner) = split_axis(x.shape(), axis);
        let w = (end - start) * inner;
        let mut out = Vec::with_capacity(outer * w);
        for o in 0..outer {
            let base = o * n * inner + start * inner;
            out.extend_from_slice(&x.data()[base..base + w]);
        }
        let mut shape = x.shape().to_vec();
        shape[axis] = end - start;
        let rg = self.rg(&[a]);
        Ok(self.push(Tensor::new(shape, out)?, rg, Op::Slice { a, axis, start }))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        let rg = self.rg(&[a]);
        self.push(Tensor::scalar(s), rg, Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let s = x.data().iter().sum::<f64>() / x.numel().max(1) as f64;
        let rg = self.rg(&[a]);
        self.push(Tensor::scalar(s), rg, Op::Mean(a))
    }

    /// Repeats `a` along a new leading axis of extent `n`.
    pub fn expand(&mut self, a: Var, n: usize) -> Var {
        let x = self.value(a);
        let mut data = Vec::with_capacity(n * x.numel());
        for _ in 0..n {
            data.extend_from_slice(x.data());
        }
        let mut shape = vec![n];
        shape.extend_from_slice(x.shape());
        let rg = self.rg(&[a]);
        self.push(Tensor::new(shape, data).expect("expand"), rg, Op::Expand(a))
    }

    /// Gathers rows of a `[rows, width]` table.
    pub fn index_rows(&mut self, table: Var, idx: &[usize]) -> Result<Var> {
        let t = self.value(table);
        if t.rank() != 2 {
            return Err(Error::invalid("index_rows", "table must be rank 2"));
        }
        let (rows, w) = (t.shape()[0], t.shape()[1]);
        let mut out = Vec::with_capacity(idx.len() * w);
        for &i in idx {
            if i >= rows {
                return Err(Error::invalid(
                    "index_rows",
                    format!("row {i} out of range for {rows} rows"),
                ));
            }
            out.extend_from_slice(&t.data()[i * w..(i + 1) * w]);
        }
        let rg = self.rg(&[table]);
        Ok(self.push(
            Tensor::new(vec![idx.len(), w], out)?,
            rg,
            Op::IndexRows {
                table,
                idx: idx.to_vec(),
            },
        ))
    }

    /// Sliding windows over the last axis: `[.., len] -> [.., count, size]`
    /// with `count = (len - size) / step + 1`; trailing remainder dropped.
    pub fn unfold(&mut self, a: Var, size: usize, step: usize) -> Result<Var> {
        let x = self.value(a);
        let len = *x.shape().last().ok_or_else(|| Error::invalid("unfold", "rank 0 input"))?;
        if size == 0 || step == 0 || size > len {
            return Err(Error::invalid(
                "unfold",
                format!("window {size} step {step} does not fit length {len}"),
            ));
        }
        let count = (len - size) / step + 1;
        let outer = x.numel() / len;
        let mut out = Vec::with_capacity(outer * count * size);
        for o in 0..outer {
            let row = &x.data()[o * len..(o + 1) * len];
            for n in 0..count {
                out.extend_from_slice(&row[n * step..n * step + size]);
            }
        }
        let mut shape = x.shape()[..x.rank() - 1].to_vec();
        shape.extend([count, size]);
        let rg = self.rg(&[a]);
        Ok(self.push(Tensor::new(shape, out)?, rg, Op::Unfold { a, size, step }))
    }

    /// Causal depthwise convolution over `[steps, ch]` or `[seqs, steps, ch]`
    /// with kernel `[k, ch]`; output length equals input length.
    pub fn causal_conv1d(&mut self, x: Var, w: Var) -> Result<Var> {
        let (xv, wv) = (self.value(x), self.value(w));
        let (seqs, steps, ch) = match xv.shape() {
            [t, c] => (1, *t, *c),
            [s, t, c] => (*s, *t, *c),
            _ => return Err(Error::invalid("causal_conv1d", "input must be rank 2 or 3")),
        };
        if wv.rank() != 2 || wv.shape()[1] != ch || wv.shape()[0] == 0 {
            return Err(Error::shape("causal_conv1d", xv.shape(), wv.shape()));
        }
        let mut out = vec![0.0; xv.numel()];
        kernels::causal_conv_forward(xv.data(), wv.data(), seqs, steps, ch, &mut out);
        let out = Tensor::new(xv.shape().to_vec(), out)?;
        let rg = self.rg(&[x, w]);
        Ok(self.push(out, rg, Op::CausalConv { x, w }))
    }

    /// `h_t = a_t ⊙ h_{t-1} + b_t` with `a`, `b` of shape `[steps, ..state]`
    /// and `h0` of shape `state`. Returns every `h_t`.
    pub fn linear_recurrence_scan(&mut self, a: Var, b: Var, h0: Var) -> Result<Var> {
        let (av, bv, hv) = (self.value(a), self.value(b), self.value(h0));
        same_shape("linear_recurrence_scan", av, bv)?;
        if av.rank() < 1 || av.shape()[1..] != *hv.shape() {
            return Err(Error::shape("linear_recurrence_scan", av.shape(), hv.shape()));
        }
        let width = hv.numel();
        let mut out = vec![0.0; av.numel()];
        kernels::scan_forward(av.data(), bv.data(), hv.data(), width, &mut out);
        let out = Tensor::new(av.shape().to_vec(), out)?;
        let rg = self.rg(&[a, b, h0]);
        Ok(self.push(out, rg, Op::Scan { a, b, h0 }))
    }

    /// Zero-order-hold decay `exp(Δ[r, i] · A[i, j])`:
    /// `[rows, d_inner] × [d_inner, d_state] -> [rows, d_inner, d_state]`.
    pub fn ssm_decay(&mut self, delta: Var, a: Var) -> Result<Var> {
        let (dv, av) = (self.value(delta), self.value(a));
        if dv.rank() != 2 || av.rank() != 2 || dv.shape()[1] != av.shape()[0] {
            return Err(Error::shape("ssm_decay", dv.shape(), av.shape()));
        }
        let (rows, di, ds) = (dv.shape()[0], av.shape()[0], av.shape()[1]);
        let mut out = vec![0.0; rows * di * ds];
        for r in 0..rows {
            for i in 0..di {
                let d = dv.data()[r * di + i];
                for j in 0..ds {
                    out[(r * di + i) * ds + j] = (d * av.data()[i * ds + j]).exp();
                }
            }
        }
        let rg = self.rg(&[delta, a]);
        Ok(self.push(
            Tensor::new(vec![rows, di, ds], out)?,
            rg,
            Op::SsmDecay { delta, a },
        ))
    }

    /// Euler input term `Δ[r, i] · x[r, i] · B[r, j]` -> `[rows, d_inner, d_state]`.
    pub fn ssm_input(&mut self, delta: Var, b: Var, x: Var) -> Result<Var> {
        let (dv, bv, xv) = (self.value(delta), self.value(b), self.value(x));
        same_shape("ssm_input", dv, xv)?;
        if dv.rank() != 2 || bv.rank() != 2 || bv.shape()[0] != dv.shape()[0] {
            return Err(Error::shape("ssm_input", dv.shape(), bv.shape()));
        }
        let (rows, di, ds) = (dv.shape()[0], dv.shape()[1], bv.shape()[1]);
        let mut out = vec![0.0; rows * di * ds];
        for r in 0..rows {
            for i in 0..di {
                let s = dv.data()[r * di + i] * xv.data()[r * di + i];
                for j in 0..ds {
                    out[(r * di + i) * ds + j] = s * bv.data()[r * ds + j];
                }
            }
        }
        let rg = self.rg(&[delta, b, x]);
        Ok(self.push(
            Tensor::new(vec![rows, di, ds], out)?,
            rg,
            Op::SsmInput { delta, b, x },
        ))
    }

    /// `y[r, i] = Σ_j h[r, i, j] · C[r, j]`.
    pub fn ssm_readout(&mut self, h: Var, c: Var) -> Result<Var> {
        let (hv, cv) = (self.value(h), self.value(c));
        if hv.rank() != 3
            || cv.rank() != 2
            || hv.shape()[0] != cv.shape()[0]
            || hv.shape()[2] != cv.shape()[1]
        {
            return Err(Error::shape("ssm_readout", hv.shape(), cv.shape()));
        }
        let (rows, di, ds) = (hv.shape()[0], hv.shape()[1], hv.shape()[2]);
        let mut out = vec![0.0; rows * di];
        for r in 0..rows {
            let cr = &cv.data()[r * ds..(r + 1) * ds];
            for i in 0..di {
                let hr = &hv.data()[(r * di + i) * ds..(r * di + i + 1) * ds];
                out[r * di + i] = hr.iter().zip(cr).map(|(p, q)| p * q).sum();
            }
        }
        let rg = self.rg(&[h, c]);
        Ok(self.push(Tensor::new(vec![rows, di], out)?, rg, Op::SsmReadout { h, c }))
    }

    /// Fused selective scan over independent sequences:
    ///
    /// `h_t = exp(Δ_t A) ⊙ h_{t-1} + Δ_t B_t u_t`, `y_t = C_t · h_t + D ⊙ u_t`,
    /// with `h_0 = 0`. Hidden states are recomputed during backward instead
    /// of stored, so memory stays at the size of the inputs.
    pub fn selective_scan(&mut self, inp: SelectiveScanInputs) -> Result<Var> {
        let u = self.value(inp.u);
        let (seqs, steps, di) = match u.shape() {
            [s, t, d] => (*s, *t, *d),
            _ => return Err(Error::invalid("selective_scan", "u must be [seqs, steps, d_inner]")),
        };
        same_shape("selective_scan", u, self.value(inp.delta))?;
        let a = self.value(inp.a);
        if a.rank() != 2 || a.shape()[0] != di {
            return Err(Error::shape("selective_scan", u.shape(), a.shape()));
        }
        let ds = a.shape()[1];
        for v in [inp.b, inp.c] {
            if self.shape(v) != [seqs, steps, ds] {
                return Err(Error::shape("selective_scan", a.shape(), self.shape(v)));
            }
        }
        if self.shape(inp.d) != [di] {
            return Err(Error::shape("selective_scan", u.shape(), self.shape(inp.d)));
        }
        let mut y = vec![0.0; seqs * steps * di];
        let mut ws = ScanWorkspace::new(steps, ds);
        let sv = self.scan_views(&inp);
        for s in 0..seqs {
            for i in 0..di {
                ws.forward(&sv, s, i);
                for t in 0..steps {
                    let c = &sv.c[(s * steps + t) * ds..(s * steps + t + 1) * ds];
                    let h = &ws.h[t * ds..(t + 1) * ds];
                    let idx = (s * steps + t) * di + i;
                    y[idx] = c.iter().zip(h).map(|(p, q)| p * q).sum::<f64>() + sv.d[i] * sv.u[idx];
                }
            }
        }
        let deps = [inp.u, inp.delta, inp.a, inp.b, inp.c, inp.d];
        let rg = self.rg(&deps);
        Ok(self.push(
            Tensor::new(vec![seqs, steps, di], y)?,
            rg,
            Op::SelectiveScan(inp),
        ))
    }

    fn scan_views(&self, inp: &SelectiveScanInputs) -> ScanViews<'_> {
        let u = self.value(inp.u);
        let a = self.value(inp.a);
        ScanViews {
            u: u.data(),
            delta: self.value(inp.delta).data(),
            a: a.data(),
            b: self.value(inp.b).data(),
            c: self.value(inp.c).data(),
            d: self.value(inp.d).data(),
            steps: u.shape()[1],
            di: u.shape()[2],
            ds: a.shape()[1],
        }
    }

    /// Inverted dropout. Identity in eval mode or when `p == 0`.
    pub fn dropout<R: Rng + ?Sized>(
        &mut self,
        a: Var,
        p: f64,
        train: bool,
        rng: &mut R,
    ) -> Result<Var> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::invalid("dropout", format!("p = {p} outside [0, 1)")));
        }
        if !train || p == 0.0 {
            return Ok(a);
        }
        let keep = 1.0 / (1.0 - p);
        let x = self.value(a);
        let mask: Vec<f64> = (0..x.numel())
            .map(|_| if rng.random::<f64>() < p { 0.0 } else { keep })
            .collect();
        let data = x.data().iter().zip(&mask).map(|(v, m)| v * m).collect();
        let out = Tensor::new(x.shape().to_vec(), data)?;
        let rg = self.rg(&[a]);
        Ok(self.push(out, rg, Op::Dropout { a, mask }))
    }

    /// Populates gradients of every `requires_grad` value reachable from
    /// the scalar `loss`. A tape can be differentiated once.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.consumed {
            return Err(Error::TapeConsumed);
        }
        let shape = self.shape(loss).to_vec();
        if numel(&shape) != 1 {
            return Err(Error::NonScalarLoss(shape));
        }
        self.consumed = true;
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        self.accumulate(loss, |_, g| g[0] += 1.0);
        for i in (0..=loss.0).rev() {
            let Some(g) = self.nodes[i].grad.take() else {
                continue;
            };
            let op = std::mem::replace(&mut self.nodes[i].op, Op::Leaf);
            self.backward_op(i, &op, &g);
            self.nodes[i].op = op;
            self.nodes[i].grad = Some(g);
        }
        Ok(())
    }

    /// Runs `f` on the gradient buffer of `v`, allocating it on first use.
    /// No-op for values that do not require gradients.
    fn accumulate(&mut self, v: Var, f: impl FnOnce(&[Node], &mut [f64])) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        let mut buf = match self.nodes[v.0].grad.take() {
            Some(b) => b,
            None => {
                let n = self.nodes[v.0].value.numel();
                self.tracked_bytes += bytes(n);
                memory::alloc(bytes(n));
                vec![0.0; n]
            }
        };
        f(&self.nodes, &mut buf);
        self.nodes[v.0].grad = Some(buf);
    }

    fn add_into(&mut self, v: Var, src: &[f64]) {
        self.accumulate(v, |_, g| g.iter_mut().zip(src).for_each(|(g, s)| *g += s));
    }

    fn backward_op(&mut self, i: usize, op: &Op, g: &[f64]) {
        let out = Var(i);
        match *op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.add_into(a, g);
                self.add_into(b, g);
            }
            Op::Sub(a, b) => {
                self.add_into(a, g);
                self.accumulate(b, |_, gb| gb.iter_mut().zip(g).for_each(|(x, y)| *x -= y));
            }
            Op::Mul(a, b) => {
                self.accumulate(a, |n, ga| {
                    let y = n[b.0].value.data();
                    for k in 0..ga.len() {
                        ga[k] += g[k] * y[k];
                    }
                });
                self.accumulate(b, |n, gb| {
                    let x = n[a.0].value.data();
                    for k in 0..gb.len() {
                        gb[k] += g[k] * x[k];
                    }
                });
            }
            Op::Div(a, b) => {
                self.accumulate(a, |n, ga| {
                    let y = n[b.0].value.data();
                    for k in 0..ga.len() {
                        ga[k] += g[k] / y[k];
                    }
                });
                self.accumulate(b, |n, gb| {
                    let x = n[a.0].value.data();
                    let y = n[b.0].value.data();
                    for k in 0..gb.len() {
                        gb[k] -= g[k] * x[k] / (y[k] * y[k]);
                    }
                });
            }
            Op::Scale(a, c) => {
                self.accumulate(a, |_, ga| ga.iter_mut().zip(g).for_each(|(x, y)| *x += c * y));
            }
            Op::MulScalar(a, s) => {
                self.accumulate(a, |n, ga| {
                    let c = n[s.0].value.data()[0];
                    ga.iter_mut().zip(g).for_each(|(x, y)| *x += c * y);
                });
                self.accumulate(s, |n, gs| {
                    let x = n[a.0].value.data();
                    gs[0] += x.iter().zip(g).map(|(p, q)| p * q).sum::<f64>();
                });
            }
            Op::MatMul(a, b) => {
                self.accumulate(a, |n, ga| {
                    let (x, y) = (&n[a.0].value, &n[b.0].value);
                    let (m, k, nn) = (x.shape()[0], x.shape()[1], y.shape()[1]);
                    kernels::gemm(m, nn, k, g, false, y.data(), true, 1.0, ga);
                });
                self.accumulate(b, |n, gb| {
                    let (x, y) = (&n[a.0].value, &n[b.0].value);
                    let (m, k, nn) = (x.shape()[0], x.shape()[1], y.shape()[1]);
                    kernels::gemm(k, m, nn, x.data(), true, g, false, 1.0, gb);
                });
            }
            Op::Linear { x, w, b } => {
                let (in_dim, out_dim) = {
                    let wv = &self.nodes[w.0].value;
                    (wv.shape()[1], wv.shape()[0])
                };
                let rows = g.len() / out_dim.max(1);
                self.accumulate(x, |n, gx| {
                    let wv = n[w.0].value.data();
                    kernels::gemm(rows, out_dim, in_dim, g, false, wv, false, 1.0, gx);
                });
                self.accumulate(w, |n, gw| {
                    let xv = n[x.0].value.data();
                    kernels::gemm(out_dim, rows, in_dim, g, true, xv, false, 1.0, gw);
                });
                if let Some(b) = b {
                    self.accumulate(b, |_, gb| {
                        for row in g.chunks(out_dim) {
                            gb.iter_mut().zip(row).for_each(|(p, q)| *p += q);
                        }
                    });
                }
            }
            Op::Exp(a) => self.accumulate(a, |n, ga| {
                let y = n[out.0].value.data();
                for k in 0..ga.len() {
                    ga[k] += g[k] * y[k];
                }
            }),
            Op::Log(a) => self.accumulate(a, |n, ga| {
                let x = n[a.0].value.data();
                for k in 0..ga.len() {
                    ga[k] += g[k] / x[k];
                }
            }),
            Op::Sigmoid(a) => self.accumulate(a, |n, ga| {
                let y = n[out.0].value.data();
                for k in 0..ga.len() {
                    ga[k] += g[k] * y[k] * (1.0 - y[k]);
                }
            }),
            Op::Relu(a) => self.accumulate(a, |n, ga| {
                let x = n[a.0].value.data();
                for k in 0..ga.len() {
                    if x[k] > 0.0 {
                        ga[k] += g[k];
                    }
                }
            }),
            Op::Silu(a) => self.accumulate(a, |n, ga| {
                let x = n[a.0].value.data();
                for k in 0..ga.len() {
                    let s = kernels::sigmoid(x[k]);
                    ga[k] += g[k] * (s + x[k] * s * (1.0 - s));
                }
            }),
            Op::Softplus(a) => self.accumulate(a, |n, ga| {
                let x = n[a.0].value.data();
                for k in 0..ga.len() {
                    ga[k] += g[k] * kernels::sigmoid(x[k]);
                }
            }),
            Op::Softmax { a, axis } => self.accumulate(a, |n, ga| {
                let y = &n[out.0].value;
                let (outer, len, inner) = split_axis(y.shape(), axis);
                let y = y.data();
                for o in 0..outer {
                    for ii in 0..inner {
                        let idx = |j: usize| (o * len + j) * inner + ii;
                        let dot: f64 = (0..len).map(|j| g[idx(j)] * y[idx(j)]).sum();
                        for j in 0..len {
                            ga[idx(j)] += y[idx(j)] * (g[idx(j)] - dot);
                        }
                    }
                }
            }),
            Op::LayerNorm {
                a,
                gamma,
                beta,
                ref normed,
                ref rstd,
            } => {
                let d = *self.nodes[a.0].value.shape().last().unwrap();
                let rows = g.len() / d.max(1);
                self.accumulate(a, |n, ga| {
                    let gm = gamma.map(|v| n[v.0].value.data());
                    let mut gy = vec![0.0; d];
                    for r in 0..rows {
                        let gr = &g[r * d..(r + 1) * d];
                        let yr = &normed[r * d..(r + 1) * d];
                        for k in 0..d {
                            gy[k] = gr[k] * gm.map_or(1.0, |w| w[k]);
                        }
                        let mean_g = gy.iter().sum::<f64>() / d as f64;
                        let mean_gy = gy.iter().zip(yr).map(|(p, q)| p * q).sum::<f64>() / d as f64;
                        for k in 0..d {
                            ga[r * d + k] += rstd[r] * (gy[k] - mean_g - yr[k] * mean_gy);
                        }
                    }
                });
                if let Some(gv) = gamma {
                    self.accumulate(gv, |_, gg| {
                        for r in 0..rows {
                            for k in 0..d {
                                gg[k] += g[r * d + k] * normed[r * d + k];
                            }
                        }
                    });
                }
                if let Some(bv) = beta {
                    self.accumulate(bv, |_, gb| {
                        for row in g.chunks(d) {
                            gb.iter_mut().zip(row).for_each(|(p, q)| *p += q);
                        }
                    });
                }
            }
            Op::Reshape(a) => self.add_into(a, g),
            Op::Permute { a, ref axes } => {
                let out_shape = self.nodes[i].value.shape().to_vec();
                let mut inverse = vec![0; axes.len()];
                for (k, &ax) in axes.iter().enumerate() {
                    inverse[ax] = k;
                }
                let gt = Tensor::new(out_shape, g.to_vec()).expect("grad shape");
                let back = permute_tensor(&gt, &inverse);
                self.add_into(a, back.data());
            }
            Op::Concat { ref parts, axis } => {
                let out_shape = self.nodes[i].value.shape().to_vec();
                let (outer, total, inner) = split_axis(&out_shape, axis);
                let mut offset = 0;
                for &p in parts {
                    let len = self.nodes[p.0].value.shape()[axis];
                    self.accumulate(p, |_, gp| {
                        let w = len * inner;
                        for o in 0..outer {
                            let src = &g[(o * total + offset) * inner..][..w];
                            gp[o * w..(o + 1) * w]
                                .iter_mut()
                                .zip(src)
                                .for_each(|(x, y)| *x += y);
                        }
                    });
                    offset += len;
                }
            }
            Op::Slice { a, axis, start } => {
                let in_shape = self.nodes[a.0].value.shape().to_vec();
                let len = self.nodes[i].value.shape()[axis];
                let (outer, n, inner) = split_axis(&in_shape, axis);
                self.accumulate(a, |_, ga| {
                    let w = len * inner;
                    for o in 0..outer {
                        let dst = &mut ga[o * n * inner + start * inner..][..w];
                        dst.iter_mut()
                            .zip(&g[o * w..(o + 1) * w])
                            .for_each(|(x, y)| *x += y);
                    }
                });
            }
            Op::Sum(a) => self.accumulate(a, |_, ga| ga.iter_mut().for_each(|x| *x += g[0])),
            Op::Mean(a) => self.accumulate(a, |_, ga| {
                let c = g[0] / ga.len().max(1) as f64;
                ga.iter_mut().for_each(|x| *x += c);
            }),
            Op::Expand(a) => self.accumulate(a, |_, ga| {
                for chunk in g.chunks(ga.len().max(1)) {
                    ga.iter_mut().zip(chunk).for_each(|(x, y)| *x += y);
                }
            }),
            Op::IndexRows { table, ref idx } => {
                let w = self.nodes[table.0].value.shape()[1];
                self.accumulate(table, |_, gt| {
                    for (k, &r) in idx.iter().enumerate() {
                        gt[r * w..(r + 1) * w]
                            .iter_mut()
                            .zip(&g[k * w..(k + 1) * w])
                            .for_each(|(x, y)| *x += y);
                    }
                });
            }
            Op::Unfold { a, size, step } => {
                let len = *self.nodes[a.0].value.shape().last().unwrap();
                let count = (len - size) / step + 1;
                self.accumulate(a, |_, ga| {
                    let outer = ga.len() / len;
                    for o in 0..outer {
                        for n in 0..count {
                            let src = &g[(o * count + n) * size..][..size];
                            let dst = &mut ga[o * len + n * step..][..size];
                            dst.iter_mut().zip(src).for_each(|(x, y)| *x += y);
                        }
                    }
                });
            }
            Op::CausalConv { x, w } => {
                let (seqs, steps, ch) = match *self.nodes[x.0].value.shape() {
                    [t, c] => (1, t, c),
                    [s, t, c] => (s, t, c),
                    _ => unreachable!("checked in forward"),
                };
                self.accumulate(x, |n, gx| {
                    let wv = n[w.0].value.data();
                    kernels::causal_conv_backward(
                        &[],
                        wv,
                        g,
                        seqs,
                        steps,
                        ch,
                        Some(gx),
                        None,
                    );
                });
                self.accumulate(w, |n, gw| {
                    let xv = n[x.0].value.data();
                    let wv = n[w.0].value.data();
                    kernels::causal_conv_backward(xv, wv, g, seqs, steps, ch, None, Some(gw));
                });
            }
            Op::Scan { a, b, h0 } => {
                let width = self.nodes[h0.0].value.numel();
                let mut gh = g.to_vec();
                let mut ga = vec![0.0; g.len()];
                let mut gh0 = vec![0.0; width];
                kernels::scan_backward(
                    self.nodes[a.0].value.data(),
                    self.nodes[h0.0].value.data(),
                    self.nodes[i].value.data(),
                    width,
                    &mut gh,
                    &mut ga,
                    &mut gh0,
                );
                self.add_into(a, &ga);
                self.add_into(b, &gh);
                self.add_into(h0, &gh0);
            }
            Op::SsmDecay { delta, a } => {
                let (di, ds) = {
                    let s = self.nodes[a.0].value.shape();
                    (s[0], s[1])
                };
                let rows = g.len() / (di * ds).max(1);
                self.accumulate(delta, |n, gd| {
                    let (y, av) = (n[out.0].value.data(), n[a.0].value.data());
                    for r in 0..rows {
                        for ii in 0..di {
                            let base = (r * di + ii) * ds;
                            gd[r * di + ii] += (0..ds)
                                .map(|j| g[base + j] * y[base + j] * av[ii * ds + j])
                                .sum::<f64>();
                        }
                    }
                });
                self.accumulate(a, |n, gav| {
                    let (y, dv) = (n[out.0].value.data(), n[delta.0].value.data());
                    for r in 0..rows {
                        for ii in 0..di {
                            let base = (r * di + ii) * ds;
                            let d = dv[r * di + ii];
                            for j in 0..ds {
                                gav[ii * ds + j] += g[base + j] * y[base + j] * d;
                            }
                        }
                    }
                });
            }
            Op::SsmInput { delta, b, x } => {
                let (rows, di) = {
                    let s = self.nodes[delta.0].value.shape();
                    (s[0], s[1])
                };
                let ds = self.nodes[b.0].value.shape()[1];
                // Σ_j g[r,i,j] B[r,j]
                let gb_dot: Vec<f64> = {
                    let bv = self.nodes[b.0].value.data();
                    (0..rows * di)
                        .map(|ri| {
                            let r = ri / di;
                            (0..ds).map(|j| g[ri * ds + j] * bv[r * ds + j]).sum()
                        })
                        .collect()
                };
                self.accumulate(delta, |n, gd| {
                    let xv = n[x.0].value.data();
                    for k in 0..rows * di {
                        gd[k] += gb_dot[k] * xv[k];
                    }
                });
                self.accumulate(x, |n, gx| {
                    let dv = n[delta.0].value.data();
                    for k in 0..rows * di {
                        gx[k] += gb_dot[k] * dv[k];
                    }
                });
                self.accumulate(b, |n, gbv| {
                    let (dv, xv) = (n[delta.0].value.data(), n[x.0].value.data());
                    for r in 0..rows {
                        for ii in 0..di {
                            let s = dv[r * di + ii] * xv[r * di + ii];
                            for j in 0..ds {
                                gbv[r * ds + j] += g[(r * di + ii) * ds + j] * s;
                            }
                        }
                    }
                });
            }
            Op::SsmReadout { h, c } => {
                let (rows, di, ds) = {
                    let s = self.nodes[h.0].value.shape();
                    (s[0], s[1], s[2])
                };
                self.accumulate(h, |n, gh| {
                    let cv = n[c.0].value.data();
                    for r in 0..rows {
                        for ii in 0..di {
                            for j in 0..ds {
                                gh[(r * di + ii) * ds + j] += g[r * di + ii] * cv[r * ds + j];
                            }
                        }
                    }
                });
                self.accumulate(c, |n, gc| {
                    let hv = n[h.0].value.data();
                    for r in 0..rows {
                        for ii in 0..di {
                            for j in 0..ds {
                                gc[r * ds + j] += g[r * di + ii] * hv[(r * di + ii) * ds + j];
                            }
                        }
                    }
                });
            }
            Op::SelectiveScan(inp) => self.selective_scan_backward(&inp, g),
            Op::Dropout { a, ref mask } => self.accumulate(a, |_, ga| {
                for k in 0..ga.len() {
                    ga[k] += g[k] * mask[k];
                }
            }),
        }
    }

    fn selective_scan_backward(&mut self, inp: &SelectiveScanInputs, gy: &[f64]) {
        let sv = self.scan_views(inp);
        let (steps, di, ds) = (sv.steps, sv.di, sv.ds);
        let seqs = sv.u.len() / (steps * di).max(1);
        let mut gu = vec![0.0; sv.u.len()];
        let mut gdelta = vec![0.0; sv.u.len()];
        let mut ga_param = vec![0.0; sv.a.len()];
        let mut gb_in = vec![0.0; sv.b.len()];
        let mut gc = vec![0.0; sv.c.len()];
        let mut gd = vec![0.0; di];
        let mut ws = ScanWorkspace::new(steps, ds);
        let mut gh = vec![0.0; steps * ds];
        let mut ga = vec![0.0; steps * ds];
        let mut gh0 = vec![0.0; ds];
        for s in 0..seqs {
            for i in 0..di {
                ws.forward(&sv, s, i);
                for t in 0..steps {
                    let idx = (s * steps + t) * di + i;
                    let g = gy[idx];
                    let row = (s * steps + t) * ds;
                    for j in 0..ds {
                        gh[t * ds + j] = g * sv.c[row + j];
                        gc[row + j] += g * ws.h[t * ds + j];
                    }
                    gd[i] += g * sv.u[idx];
                    gu[idx] += g * sv.d[i];
                }
                kernels::scan_backward(&ws.a, &ws.h0, &ws.h, ds, &mut gh, &mut ga, &mut gh0);
                for t in 0..steps {
                    let idx = (s * steps + t) * di + i;
                    let (dt, u) = (sv.delta[idx], sv.u[idx]);
                    let row = (s * steps + t) * ds;
                    let mut g_dt = 0.0;
                    let mut g_u = 0.0;
                    for j in 0..ds {
                        let k = t * ds + j;
                        let a_ij = sv.a[i * ds + j];
                        let dec = ga[k] * ws.a[k];
                        g_dt += dec * a_ij + gh[k] * sv.b[row + j] * u;
                        ga_param[i * ds + j] += dec * dt;
                        g_u += gh[k] * dt * sv.b[row + j];
                        gb_in[row + j] += gh[k] * dt * u;
                    }
                    gdelta[idx] += g_dt;
                    gu[idx] += g_u;
                }
            }
        }
        self.add_into(inp.u, &gu);
        self.add_into(inp.delta, &gdelta);
        self.add_into(inp.a, &ga_param);
        self.add_into(inp.b, &gb_in);
        self.add_into(inp.c, &gc);
        self.add_into(inp.d, &gd);
    }
}

struct ScanViews<'a> {
    u: &'a [f64],
    delta: &'a [f64],
    a: &'a [f64],
    b: &'a [f64],
    c: &'a [f64],
    d: &'a [f64],
    steps: usize,
    di: usize,
    ds: usize,
}

/// Per-(sequence, inner channel) buffers for the fused scan.
struct ScanWorkspace {
    a: Vec<f64>,
    b: Vec<f64>,
    h: Vec<f64>,
    h0: Vec<f64>,
}

impl ScanWorkspace {
    fn new(steps: usize, ds: usize) -> Self {
        ScanWorkspace {
            a: vec![0.0; steps * ds],
            b: vec![0.0; steps * ds],
            h: vec![0.0; steps * ds],
            h0: vec![0.0; ds],
        }
    }

    /// Discretizes channel `i` of sequence `s` and runs the recurrence.
    fn forward(&mut self, v: &ScanViews<'_>, s: usize, i: usize) {
        let (steps, di, ds) = (v.steps, v.di, v.ds);
        for t in 0..steps {
            let idx = (s * steps + t) * di + i;
            let (dt, u) = (v.delta[idx], v.u[idx]);
            let row = (s * steps + t) * ds;
            for j in 0..ds {
                self.a[t * ds + j] = (dt * v.a[i * ds + j]).exp();
                self.b[t * ds + j] = dt * v.b[row + j] * u;
            }
        }
        kernels::scan_forward(&self.a, &self.b, &self.h0, ds, &mut self.h);
    }
}

/// `(outer, extent, inner)` sizes around `axis`.
fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    (
        numel(&shape[..axis]),
        shape[axis],
        numel(&shape[axis + 1..]),
    )
}

fn permute_tensor(x: &Tensor, axes: &[usize]) -> Tensor {
    let in_shape = x.shape();
    let rank = in_shape.len();
    let mut in_strides = vec![1; rank];
    for k in (0..rank.saturating_sub(1)).rev() {
        in_strides[k] = in_strides[k + 1] * in_shape[k + 1];
    }
    let out_shape: Vec<usize> = axes.iter().map(|&a| in_shape[a]).collect();
    let strides: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
    let mut out = Vec::with_capacity(x.numel());
    let mut idx = vec![0; rank];
    let src = x.data();
    for _ in 0..x.numel() {
        let off: usize = idx.iter().zip(&strides).map(|(i, s)| i * s).sum();
        out.push(src[off]);
        for k in (0..rank).rev() {
            idx[k] += 1;
            if idx[k] < out_shape[k] {
                break;
            }
            idx[k] = 0;
        }
    }
    Tensor::new(out_shape, out).expect("permute")
}
