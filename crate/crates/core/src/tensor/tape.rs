use super::kernels::{gelu, gelu_grad, gemm_nn, gemm_nt, gemm_tn};
use super::{axis_split, Tensor};
use crate::error::{dim_err, Error, Result};
use rand::Rng;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
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
    Scale(Var, f64),
    MatMul(Var, Var),
    Linear(Var, Var),
    Bmm { a: Var, b: Var, transpose_b: bool },
    Softmax { x: Var, axis: usize },
    LayerNorm { x: Var, gain: Var, bias: Var, axis: usize, xhat: Vec<f64>, inv_std: Vec<f64> },
    Gelu(Var),
    Relu(Var),
    Sum(Var),
    Mean(Var),
    Concat { inputs: Vec<Var>, axis: usize },
    Slice { x: Var, axis: usize, start: usize },
    Permute { x: Var, axes: Vec<usize> },
    Reshape(Var),
    Tile { x: Var },
    Dropout { x: Var, mask: Vec<f64> },
}

struct Node {
    value: Tensor,
    grad: Option<Vec<f64>>,
    requires_grad: bool,
    op: Op,
}

/// Append-only record of a forward computation.
///
/// Nodes are stored in creation order, which is a valid topological order:
/// an op can only reference vars that already exist.
pub struct Tape {
    nodes: Vec<Node>,
    check_finite: bool,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            check_finite: cfg!(debug_assertions),
        }
    }

    /// Turns the per-op NaN/Inf scan on or off. On by default in debug builds.
    pub fn set_check_finite(&mut self, on: bool) {
        self.check_finite = on;
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            grad: None,
            requires_grad,
            op: Op::Leaf,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
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

    /// Accumulated gradient of a leaf, if a backward pass has reached it.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].grad.as_deref()
    }

    pub fn zero_grad(&mut self) {
        for node in &mut self.nodes {
            node.grad = None;
        }
    }

    fn push(&mut self, name: &str, value: Tensor, op: Op, inputs: &[Var]) -> Result<Var> {
        if self.check_finite && !value.all_finite() {
            return Err(Error::Numerical(format!("{name} produced a non-finite value")));
        }
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            grad: None,
            requires_grad,
            op,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    // ---- elementwise -------------------------------------------------

    fn broadcast_check(&self, op: &str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.ends_with(sb) {
            Ok(())
        } else {
            Err(dim_err!("{op}: shape {sb:?} does not broadcast onto {sa:?}"))
        }
    }

    fn zip_broadcast(&self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let av = self.value(a);
        let bv = self.value(b).data();
        let n = bv.len();
        let data = av
            .data()
            .chunks_exact(n)
            .flat_map(|chunk| chunk.iter().zip(bv).map(|(&x, &y)| f(x, y)))
            .collect();
        Tensor::new(av.shape().to_vec(), data).expect("shape preserved")
    }

    /// `a + b`, where `b`'s shape must equal `a`'s or a trailing suffix of it.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.broadcast_check("add", a, b)?;
        let out = self.zip_broadcast(a, b, |x, y| x + y);
        self.push("add", out, Op::Add(a, b), &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.broadcast_check("sub", a, b)?;
        let out = self.zip_broadcast(a, b, |x, y| x - y);
        self.push("sub", out, Op::Sub(a, b), &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.broadcast_check("mul", a, b)?;
        let out = self.zip_broadcast(a, b, |x, y| x * y);
        self.push("mul", out, Op::Mul(a, b), &[a, b])
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Result<Var> {
        let v = self.value(a);
        let out = Tensor::new(v.shape().to_vec(), v.data().iter().map(|x| x * s).collect())?;
        self.push("scale", out, Op::Scale(a, s), &[a])
    }

    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x);
        let out = Tensor::new(v.shape().to_vec(), v.data().iter().map(|&z| gelu(z)).collect())?;
        self.push("gelu", out, Op::Gelu(x), &[x])
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x);
        let out = Tensor::new(v.shape().to_vec(), v.data().iter().map(|&z| z.max(0.0)).collect())?;
        self.push("relu", out, Op::Relu(x), &[x])
    }

    /// Inverted dropout: surviving entries are scaled by `1 / (1 - p)`.
    pub fn dropout<R: Rng + ?Sized>(&mut self, x: Var, p: f64, rng: &mut R) -> Result<Var> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::Config(format!("dropout probability {p} outside [0, 1)")));
        }
        if p == 0.0 {
            return Ok(x);
        }
        let v = self.value(x);
        let keep = 1.0 / (1.0 - p);
        let mask: Vec<f64> = (0..v.numel())
            .map(|_| if rng.gen::<f64>() < p { 0.0 } else { keep })
            .collect();
        let data = v.data().iter().zip(&mask).map(|(a, m)| a * m).collect();
        let out = Tensor::new(v.shape().to_vec(), data)?;
        self.push("dropout", out, Op::Dropout { x, mask }, &[x])
    }

    // ---- reductions --------------------------------------------------

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let total = self.value(x).data().iter().sum();
        self.push("sum", Tensor::scalar(total), Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x);
        let total: f64 = v.data().iter().sum();
        let out = Tensor::scalar(total / v.numel() as f64);
        self.push("mean", out, Op::Mean(x), &[x])
    }

    /// Mean of squared differences over every element.
    pub fn mse(&mut self, pred: Var, target: Var) -> Result<Var> {
        if self.shape(pred) != self.shape(target) {
            return Err(dim_err!(
                "mse: prediction {:?} vs target {:?}",
                self.shape(pred),
                self.shape(target)
            ));
        }
        let diff = self.sub(pred, target)?;
        let sq = self.mul(diff, diff)?;
        self.mean(sq)
    }

    // ---- products ----------------------------------------------------

    /// Plain matrix product of two rank-2 tensors.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(dim_err!("matmul: {sa:?} x {sb:?}"));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        gemm_nn(self.value(a).data(), self.value(b).data(), &mut out, m, k, n);
        self.push("matmul", Tensor::new(vec![m, n], out)?, Op::MatMul(a, b), &[a, b])
    }

    /// `x · wᵀ` applied over the last axis of `x`; `w` is stored `[out, in]`.
    pub fn linear(&mut self, x: Var, w: Var) -> Result<Var> {
        let (sx, sw) = (self.shape(x), self.shape(w));
        if sw.len() != 2 || sx.last() != Some(&sw[1]) {
            return Err(dim_err!("linear: input {sx:?} against weight {sw:?}"));
        }
        let (fan_in, fan_out) = (sw[1], sw[0]);
        let rows = self.value(x).numel() / fan_in;
        let mut shape = sx.to_vec();
        *shape.last_mut().unwrap() = fan_out;
        let mut out = vec![0.0; rows * fan_out];
        gemm_nt(self.value(x).data(), self.value(w).data(), &mut out, rows, fan_in, fan_out);
        self.push("linear", Tensor::new(shape, out)?, Op::Linear(x, w), &[x, w])
    }

    /// Batched product over the leading axis: `[g, m, k] · [g, k, n]`, or
    /// `[g, m, k] · [g, n, k]ᵀ` when `transpose_b` is set.
    pub fn bmm(&mut self, a: Var, b: Var, transpose_b: bool) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let ok = sa.len() == 3
            && sb.len() == 3
            && sa[0] == sb[0]
            && if transpose_b { sa[2] == sb[2] } else { sa[2] == sb[1] };
        if !ok {
            return Err(dim_err!("bmm: {sa:?} x {sb:?} (transpose_b = {transpose_b})"));
        }
        let (g, m, k) = (sa[0], sa[1], sa[2]);
        let n = if transpose_b { sb[1] } else { sb[2] };
        let (ad, bd) = (self.value(a).data(), self.value(b).data());
        let mut out = vec![0.0; g * m * n];
        for gi in 0..g {
            let a_blk = &ad[gi * m * k..(gi + 1) * m * k];
            let b_blk = &bd[gi * k * n..(gi + 1) * k * n];
            let o_blk = &mut out[gi * m * n..(gi + 1) * m * n];
            if transpose_b {
                gemm_nt(a_blk, b_blk, o_blk, m, k, n);
            } else {
                gemm_nn(a_blk, b_blk, o_blk, m, k, n);
            }
        }
        let op = Op::Bmm { a, b, transpose_b };
        self.push("bmm", Tensor::new(vec![g, m, n], out)?, op, &[a, b])
    }

    // ---- normalisation -----------------------------------------------

    /// Max-subtracted softmax along `axis`.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let v = self.value(x);
        if axis >= v.rank() {
            return Err(dim_err!("softmax: axis {axis} for shape {:?}", v.shape()));
        }
        let (outer, len, inner) = axis_split(v.shape(), axis);
        let src = v.data();
        let mut out = vec![0.0; src.len()];
        for o in 0..outer {
            for i in 0..inner {
                let idx = |j: usize| (o * len + j) * inner + i;
                let max = (0..len).map(|j| src[idx(j)]).fold(f64::NEG_INFINITY, f64::max);
                let mut total = 0.0;
                for j in 0..len {
                    let e = (src[idx(j)] - max).exp();
                    out[idx(j)] = e;
                    total += e;
                }
                for j in 0..len {
                    out[idx(j)] /= total;
                }
            }
        }
        let out = Tensor::new(v.shape().to_vec(), out)?;
        self.push("softmax", out, Op::Softmax { x, axis }, &[x])
    }

    /// Layer normalisation along `axis` with population variance and an
    /// epsilon of 1e-5 under the square root.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, axis: usize) -> Result<Var> {
        const EPS: f64 = 1e-5;
        let v = self.value(x);
        if axis >= v.rank() {
            return Err(dim_err!("layer_norm: axis {axis} for shape {:?}", v.shape()));
        }
        let (outer, len, inner) = axis_split(v.shape(), axis);
        if self.shape(gain) != [len] || self.shape(bias) != [len] {
            return Err(dim_err!(
                "layer_norm: gain {:?} / bias {:?} must both be [{len}]",
                self.shape(gain),
                self.shape(bias)
            ));
        }
        let (g, b) = (self.value(gain).data(), self.value(bias).data());
        let src = v.data();
        let mut out = vec![0.0; src.len()];
        let mut xhat = vec![0.0; src.len()];
        let mut inv_std = Vec::with_capacity(outer * inner);
        for o in 0..outer {
            for i in 0..inner {
                let idx = |j: usize| (o * len + j) * inner + i;
                let mean = (0..len).map(|j| src[idx(j)]).sum::<f64>() / len as f64;
                let var = (0..len).map(|j| (src[idx(j)] - mean).powi(2)).sum::<f64>() / len as f64;
                let r = 1.0 / (var + EPS).sqrt();
                inv_std.push(r);
                for j in 0..len {
                    let h = (src[idx(j)] - mean) * r;
                    xhat[idx(j)] = h;
                    out[idx(j)] = h * g[j] + b[j];
                }
            }
        }
        let out = Tensor::new(v.shape().to_vec(), out)?;
        let op = Op::LayerNorm { x, gain, bias, axis, xhat, inv_std };
        self.push("layer_norm", out, op, &[x, gain, bias])
    }

    // ---- layout ------------------------------------------------------

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).clone().reshape(shape)?;
        self.push("reshape", out, Op::Reshape(x), &[x])
    }

    pub fn permute(&mut self, x: Var, axes: &[usize]) -> Result<Var> {
        let v = self.value(x);
        let rank = v.rank();
        let mut seen = vec![false; rank];
        if axes.len() != rank || axes.iter().any(|&a| a >= rank || std::mem::replace(&mut seen[a], true)) {
            return Err(dim_err!("permute: {axes:?} is not a permutation of rank {rank}"));
        }
        let shape: Vec<usize> = axes.iter().map(|&a| v.shape()[a]).collect();
        let data = permute_data(v.data(), v.shape(), axes);
        let out = Tensor::new(shape, data)?;
        self.push("permute", out, Op::Permute { x, axes: axes.to_vec() }, &[x])
    }

    /// Swaps the two axes of a rank-2 tensor.
    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        if self.value(x).rank() != 2 {
            return Err(dim_err!("transpose expects rank 2, got {:?}", self.shape(x)));
        }
        self.permute(x, &[1, 0])
    }

    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = inputs.first().ok_or_else(|| dim_err!("concat of zero tensors"))?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(dim_err!("concat: axis {axis} for shape {base:?}"));
        }
        let mut total = 0;
        for v in inputs {
            let s = self.shape(*v);
            let compatible = s.len() == base.len()
                && s.iter().zip(&base).enumerate().all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(dim_err!("concat: {s:?} incompatible with {base:?} on axis {axis}"));
            }
            total += s[axis];
        }
        let (outer, _, inner) = axis_split(&base, axis);
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for v in inputs {
                let t = self.value(*v);
                let chunk = t.shape()[axis] * inner;
                data.extend_from_slice(&t.data()[o * chunk..(o + 1) * chunk]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let out = Tensor::new(shape, data)?;
        self.push("concat", out, Op::Concat { inputs: inputs.to_vec(), axis }, inputs)
    }

    /// Copies indices `start..end` of `axis`.
    pub fn slice(&mut self, x: Var, axis: usize, start: usize, end: usize) -> Result<Var> {
        let v = self.value(x);
        if axis >= v.rank() || start >= end || end > v.shape()[axis] {
            return Err(dim_err!("slice {start}..{end} on axis {axis} of {:?}", v.shape()));
        }
        let (outer, len, inner) = axis_split(v.shape(), axis);
        let width = (end - start) * inner;
        let mut data = Vec::with_capacity(outer * width);
        for o in 0..outer {
            let from = (o * len + start) * inner;
            data.extend_from_slice(&v.data()[from..from + width]);
        }
        let mut shape = v.shape().to_vec();
        shape[axis] = end - start;
        let out = Tensor::new(shape, data)?;
        self.push("slice", out, Op::Slice { x, axis, start }, &[x])
    }

    /// Stacks `n` copies of `x` along a new leading axis.
    pub fn tile(&mut self, x: Var, n: usize) -> Result<Var> {
        if n == 0 {
            return Err(dim_err!("tile count must be positive"));
        }
        let v = self.value(x);
        let mut shape = vec![n];
        shape.extend_from_slice(v.shape());
        let data = v.data().repeat(n);
        let out = Tensor::new(shape, data)?;
        self.push("tile", out, Op::Tile { x }, &[x])
    }

    // ---- reverse pass ------------------------------------------------

    /// Back-propagates from a scalar `loss`, adding into the `grad` of every
    /// leaf that requires one. Calling it twice without [`Tape::zero_grad`]
    /// accumulates.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if !self.value(loss).is_scalar() {
            return Err(Error::Usage(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);

        for id in (0..=loss.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            if !self.nodes[id].requires_grad {
                continue;
            }
            if let Op::Leaf = self.nodes[id].op {
                let node = &mut self.nodes[id];
                match &mut node.grad {
                    Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                    None => node.grad = Some(g),
                }
                continue;
            }
            self.propagate(id, &g, &mut grads);
        }
        Ok(())
    }

    fn propagate(&self, id: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let nodes = &self.nodes;
        let val = |v: Var| &nodes[v.0].value;
        let wants = |v: Var| nodes[v.0].requires_grad;
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [f64])| {
            if nodes[v.0].requires_grad {
                let slot = grads[v.0].get_or_insert_with(|| vec![0.0; nodes[v.0].value.numel()]);
                f(slot);
            }
        };

        match &nodes[id].op {
            Op::Leaf => unreachable!(),
            Op::Add(a, b) | Op::Sub(a, b) => {
                let sign = if matches!(nodes[id].op, Op::Sub(..)) { -1.0 } else { 1.0 };
                acc(*a, &mut |ga| ga.iter_mut().zip(g).for_each(|(x, y)| *x += y));
                let n = val(*b).numel();
                acc(*b, &mut |gb| {
                    for chunk in g.chunks_exact(n) {
                        gb.iter_mut().zip(chunk).for_each(|(x, y)| *x += sign * y);
                    }
                });
            }
            Op::Mul(a, b) => {
                let (av, bv) = (val(*a).data(), val(*b).data());
                let n = bv.len();
                acc(*a, &mut |ga| {
                    for (i, x) in ga.iter_mut().enumerate() {
                        *x += g[i] * bv[i % n];
                    }
                });
                acc(*b, &mut |gb| {
                    for (i, (&gi, &ai)) in g.iter().zip(av).enumerate() {
                        gb[i % n] += gi * ai;
                    }
                });
            }
            Op::Scale(a, s) => acc(*a, &mut |ga| ga.iter_mut().zip(g).for_each(|(x, y)| *x += s * y)),
            Op::Gelu(x) => {
                let xv = val(*x).data();
                acc(*x, &mut |gx| {
                    for i in 0..gx.len() {
                        gx[i] += g[i] * gelu_grad(xv[i]);
                    }
                });
            }
            Op::Relu(x) => {
                let xv = val(*x).data();
                acc(*x, &mut |gx| {
                    for i in 0..gx.len() {
                        if xv[i] > 0.0 {
                            gx[i] += g[i];
                        }
                    }
                });
            }
            Op::Dropout { x, mask } => {
                acc(*x, &mut |gx| gx.iter_mut().zip(g.iter().zip(mask)).for_each(|(a, (b, m))| *a += b * m))
            }
            Op::Sum(x) => acc(*x, &mut |gx| gx.iter_mut().for_each(|a| *a += g[0])),
            Op::Mean(x) => {
                let n = val(*x).numel() as f64;
                acc(*x, &mut |gx| gx.iter_mut().for_each(|a| *a += g[0] / n));
            }
            Op::MatMul(a, b) => {
                let (sa, sb) = (val(*a).shape(), val(*b).shape());
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                if wants(*a) {
                    acc(*a, &mut |ga| gemm_nt(g, val(*b).data(), ga, m, n, k));
                }
                if wants(*b) {
                    acc(*b, &mut |gb| gemm_tn(val(*a).data(), g, gb, k, m, n));
                }
            }
            Op::Linear(x, w) => {
                let sw = val(*w).shape();
                let (fan_out, fan_in) = (sw[0], sw[1]);
                let rows = val(*x).numel() / fan_in;
                if wants(*x) {
                    acc(*x, &mut |gx| gemm_nn(g, val(*w).data(), gx, rows, fan_out, fan_in));
                }
                if wants(*w) {
                    acc(*w, &mut |gw| gemm_tn(g, val(*x).data(), gw, fan_out, rows, fan_in));
                }
            }
            Op::Bmm { a, b, transpose_b } => {
                let (sa, sb) = (val(*a).shape(), val(*b).shape());
                let (batch, m, k) = (sa[0], sa[1], sa[2]);
                let n = if *transpose_b { sb[1] } else { sb[2] };
                let (ad, bd) = (val(*a).data(), val(*b).data());
                if wants(*a) {
                    acc(*a, &mut |ga| {
                        for i in 0..batch {
                            let gi = &g[i * m * n..(i + 1) * m * n];
                            let bi = &bd[i * k * n..(i + 1) * k * n];
                            let out = &mut ga[i * m * k..(i + 1) * m * k];
                            if *transpose_b {
                                // C = A Bᵀ, B is n×k: dA = dC B
                                gemm_nn(gi, bi, out, m, n, k);
                            } else {
                                // C = A B, B is k×n: dA = dC Bᵀ
                                gemm_nt(gi, bi, out, m, n, k);
                            }
                        }
                    });
                }
                if wants(*b) {
                    acc(*b, &mut |gb| {
                        for i in 0..batch {
                            let gi = &g[i * m * n..(i + 1) * m * n];
                            let ai = &ad[i * m * k..(i + 1) * m * k];
                            let out = &mut gb[i * k * n..(i + 1) * k * n];
                            if *transpose_b {
                                // dB = dCᵀ A  (n×k)
                                gemm_tn(gi, ai, out, n, m, k);
                            } else {
                                // dB = Aᵀ dC  (k×n)
                                gemm_tn(ai, gi, out, k, m, n);
                            }
                        }
                    });
                }
            }
            Op::Softmax { x, axis } => {
                let y = nodes[id].value.data();
                let (outer, len, inner) = axis_split(nodes[id].value.shape(), *axis);
                acc(*x, &mut |gx| {
                    for o in 0..outer {
                        for i in 0..inner {
                            let idx = |j: usize| (o * len + j) * inner + i;
                            let dot: f64 = (0..len).map(|j| g[idx(j)] * y[idx(j)]).sum();
                            for j in 0..len {
                                gx[idx(j)] += y[idx(j)] * (g[idx(j)] - dot);
                            }
                        }
                    }
                });
            }
            Op::LayerNorm { x, gain, bias, axis, xhat, inv_std } => {
                let (outer, len, inner) = axis_split(nodes[id].value.shape(), *axis);
                let gv = val(*gain).data();
                acc(*x, &mut |gx| {
                    for o in 0..outer {
                        for i in 0..inner {
                            let idx = |j: usize| (o * len + j) * inner + i;
                            let r = inv_std[o * inner + i];
                            let mut mean_d = 0.0;
                            let mut mean_dh = 0.0;
                            for j in 0..len {
                                let d = g[idx(j)] * gv[j];
                                mean_d += d;
                                mean_dh += d * xhat[idx(j)];
                            }
                            mean_d /= len as f64;
                            mean_dh /= len as f64;
                            for j in 0..len {
                                let d = g[idx(j)] * gv[j];
                                gx[idx(j)] += r * (d - mean_d - xhat[idx(j)] * mean_dh);
                            }
                        }
                    }
                });
                acc(*gain, &mut |gg| {
                    for (k, (&gk, &hk)) in g.iter().zip(xhat.iter()).enumerate() {
                        gg[(k / inner) % len] += gk * hk;
                    }
                });
                acc(*bias, &mut |gb| {
                    for (k, &gk) in g.iter().enumerate() {
                        gb[(k / inner) % len] += gk;
                    }
                });
            }
            Op::Reshape(x) => acc(*x, &mut |gx| gx.iter_mut().zip(g).for_each(|(a, b)| *a += b)),
            Op::Permute { x, axes } => {
                let mut inverse = vec![0; axes.len()];
                for (i, &a) in axes.iter().enumerate() {
                    inverse[a] = i;
                }
                let back = permute_data(g, nodes[id].value.shape(), &inverse);
                acc(*x, &mut |gx| gx.iter_mut().zip(&back).for_each(|(a, b)| *a += b));
            }
            Op::Concat { inputs, axis } => {
                let shape = nodes[id].value.shape();
                let (outer, total, inner) = axis_split(shape, *axis);
                let mut offset = 0;
                for v in inputs {
                    let width = val(*v).shape()[*axis];
                    acc(*v, &mut |gv| {
                        for o in 0..outer {
                            let src = (o * total + offset) * inner;
                            let dst = o * width * inner;
                            for t in 0..width * inner {
                                gv[dst + t] += g[src + t];
                            }
                        }
                    });
                    offset += width;
                }
            }
            Op::Slice { x, axis, start } => {
                let (outer, len, inner) = axis_split(val(*x).shape(), *axis);
                let width = nodes[id].value.shape()[*axis] * inner;
                acc(*x, &mut |gx| {
                    for o in 0..outer {
                        let dst = (o * len + start) * inner;
                        for t in 0..width {
                            gx[dst + t] += g[o * width + t];
                        }
                    }
                });
            }
            Op::Tile { x } => {
                let n = val(*x).numel();
                acc(*x, &mut |gx| {
                    for chunk in g.chunks_exact(n) {
                        gx.iter_mut().zip(chunk).for_each(|(a, b)| *a += b);
                    }
                });
            }
        }
    }
}

/// Reorders row-major `src` of `shape` so output axis `i` is input axis `axes[i]`.
fn permute_data(src: &[f64], shape: &[usize], axes: &[usize]) -> Vec<f64> {
    let rank = shape.len();
    let mut strides = vec![1; rank];
    for i in (0..rank.saturating_sub(1)).rev() {
        strides[i] = strides[i + 1] * shape[i + 1];
    }
    let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
    let out_strides: Vec<usize> = axes.iter().map(|&a| strides[a]).collect();
    let mut out = Vec::with_capacity(src.len());
    let last = rank - 1;
    let (inner_len, inner_stride) = (out_shape[last], out_strides[last]);
    let mut counter = vec![0usize; rank];
    let mut base = 0usize;
    loop {
        for t in 0..inner_len {
            out.push(src[base + t * inner_stride]);
        }
        // advance the odometer over all but the last output axis
        let mut axis = last;
        loop {
            if axis == 0 {
                return out;
            }
            axis -= 1;
            counter[axis] += 1;
            base += out_strides[axis];
            if counter[axis] < out_shape[axis] {
                break;
            }
            base -= out_strides[axis] * out_shape[axis];
            counter[axis] = 0;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    /// Central-difference gradient of `f` at `x`, step 1e-5.
    fn numeric_grad(x: &Tensor, f: &dyn Fn(&Tensor) -> f64) -> Vec<f64> {
        let h = 1e-5;
        (0..x.numel())
            .map(|i| {
                let mut plus = x.clone();
                plus.data_mut()[i] += h;
                let mut minus = x.clone();
                minus.data_mut()[i] -= h;
                (f(&plus) - f(&minus)) / (2.0 * h)
            })
            .collect()
    }

    fn rel_err(a: &[f64], b: &[f64]) -> f64 {
        let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
        let scale: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt() + b.iter().map(|x| x * x).sum::<f64>().sqrt();
        if scale < 1e-12 {
            diff
        } else {
            diff / scale
        }
    }

    /// Checks every input's analytic gradient of `sum(w ⊙ op(inputs))` against
    /// finite differences, using a fixed random weighting `w`.
    fn check_op(inputs: &[Tensor], tol: f64, op: &dyn Fn(&mut Tape, &[Var]) -> Result<Var>) {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let probe = {
            let mut tape = Tape::new();
            let vars: Vec<Var> = inputs.iter().map(|x| tape.constant(x.clone())).collect();
            let out = op(&mut tape, &vars).unwrap();
            Tensor::uniform(tape.shape(out), -1.0, 1.0, &mut rng)
        };
        let objective = |xs: &[Tensor]| {
            let mut tape = Tape::new();
            let vars: Vec<Var> = xs.iter().map(|x| tape.constant(x.clone())).collect();
            let out = op(&mut tape, &vars).unwrap();
            tape.value(out).data().iter().zip(probe.data()).map(|(a, b)| a * b).sum::<f64>()
        };

        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|x| tape.leaf(x.clone(), true)).collect();
        let out = op(&mut tape, &vars).unwrap();
        let w = tape.constant(probe.clone());
        let weighted = tape.mul(out, w).unwrap();
        let loss = tape.sum(weighted).unwrap();
        tape.backward(loss).unwrap();

        for (i, v) in vars.iter().enumerate() {
            let analytic = tape.grad(*v).map(|g| g.to_vec()).unwrap_or_else(|| vec![0.0; inputs[i].numel()]);
            let numeric = numeric_grad(&inputs[i], &|xi| {
                let mut xs = inputs.to_vec();
                xs[i] = xi.clone();
                objective(&xs)
            });
            let err = rel_err(&analytic, &numeric);
            assert!(err < tol, "input {i}: relative error {err:e}");
        }
    }

    fn rand_t(shape: &[usize], seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::uniform(shape, -2.0, 2.0, &mut rng)
    }

    #[test]
    fn matmul_identity_and_hand_values() {
        let mut tape = Tape::new();
        let i2 = tape.constant(t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
        let m = tape.constant(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let p = tape.matmul(i2, m).unwrap();
        assert_eq!(tape.value(p).data(), &[1.0, 2.0, 3.0, 4.0]);

        let a = tape.constant(t(&[1, 2], &[1.0, 2.0]));
        let b = tape.constant(t(&[2, 1], &[3.0, 4.0]));
        let c = tape.matmul(a, b).unwrap();
        assert_eq!(tape.value(c).data(), &[11.0]);

        let bad = tape.matmul(a, a);
        assert!(matches!(bad, Err(Error::Dimension(_))));
    }

    #[test]
    fn matmul_gradient() {
        check_op(&[rand_t(&[5, 7], 1), rand_t(&[7, 3], 2)], 1e-6, &|tp, v| tp.matmul(v[0], v[1]));
    }

    #[test]
    fn softmax_values() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[2], &[0.0, 0.0]));
        let y = tape.softmax(x, 0).unwrap();
        assert_eq!(tape.value(y).data(), &[0.5, 0.5]);

        let x = tape.constant(t(&[2], &[1000.0, 0.0]));
        let y = tape.softmax(x, 0).unwrap();
        let d = tape.value(y).data();
        assert_eq!(d[0], 1.0);
        assert!(d[1] >= 0.0 && d[1] < 1e-300);
    }

    #[test]
    fn softmax_gradient_all_axes() {
        check_op(&[rand_t(&[4], 3)], 1e-6, &|tp, v| tp.softmax(v[0], 0));
        for axis in 0..3 {
            check_op(&[rand_t(&[2, 3, 4], 4)], 1e-6, &|tp, v| tp.softmax(v[0], axis));
        }
    }

    #[test]
    fn layer_norm_values() {
        let mut tape = Tape::new();
        let g = tape.constant(Tensor::full(&[3], 1.0));
        let b = tape.constant(Tensor::zeros(&[3]));
        let x = tape.constant(t(&[3], &[5.0, 5.0, 5.0]));
        let y = tape.layer_norm(x, g, b, 0).unwrap();
        assert_eq!(tape.value(y).data(), &[0.0, 0.0, 0.0]);

        let g = tape.constant(Tensor::full(&[2], 1.0));
        let b = tape.constant(Tensor::zeros(&[2]));
        let x = tape.constant(t(&[2], &[1.0, 3.0]));
        let y = tape.layer_norm(x, g, b, 0).unwrap();
        let d = tape.value(y).data();
        // variance 1 + eps
        let expect = 1.0 / (1.0f64 + 1e-5).sqrt();
        assert!((d[0] + expect).abs() < 1e-15 && (d[1] - expect).abs() < 1e-15);
        assert!((d[1] - 1.0).abs() < 1e-5);
    }

    #[test]
    fn layer_norm_gradient() {
        check_op(&[rand_t(&[3, 5], 5), rand_t(&[5], 6), rand_t(&[5], 7)], 1e-5, &|tp, v| {
            tp.layer_norm(v[0], v[1], v[2], 1)
        });
        check_op(&[rand_t(&[3, 4, 2], 8), rand_t(&[4], 9), rand_t(&[4], 10)], 1e-5, &|tp, v| {
            tp.layer_norm(v[0], v[1], v[2], 1)
        });
    }

    #[test]
    fn elementwise_gradients() {
        let a = rand_t(&[2, 3], 20);
        let b = rand_t(&[2, 3], 21);
        let row = rand_t(&[3], 22);
        check_op(&[a.clone(), b.clone()], 1e-5, &|tp, v| tp.add(v[0], v[1]));
        check_op(&[a.clone(), row.clone()], 1e-5, &|tp, v| tp.add(v[0], v[1]));
        check_op(&[a.clone(), row.clone()], 1e-5, &|tp, v| tp.sub(v[0], v[1]));
        check_op(&[a.clone(), b.clone()], 1e-5, &|tp, v| tp.mul(v[0], v[1]));
        check_op(&[a.clone(), row], 1e-5, &|tp, v| tp.mul(v[0], v[1]));
        check_op(std::slice::from_ref(&a), 1e-5, &|tp, v| tp.scale(v[0], -1.7));
        check_op(std::slice::from_ref(&a), 1e-5, &|tp, v| tp.mean(v[0]));
        check_op(std::slice::from_ref(&a), 1e-5, &|tp, v| tp.sum(v[0]));
        check_op(std::slice::from_ref(&a), 1e-5, &|tp, v| tp.gelu(v[0]));
        check_op(std::slice::from_ref(&a), 1e-5, &|tp, v| tp.relu(v[0]));
        check_op(&[a.clone(), b.clone()], 1e-5, &|tp, v| tp.concat(&[v[0], v[1]], 1));
        check_op(&[a.clone(), b], 1e-5, &|tp, v| tp.concat(&[v[0], v[1]], 0));
        check_op(std::slice::from_ref(&a), 1e-5, &|tp, v| tp.slice(v[0], 1, 1, 3));
        check_op(std::slice::from_ref(&a), 1e-5, &|tp, v| tp.transpose(v[0]));
        check_op(std::slice::from_ref(&a), 1e-5, &|tp, v| tp.reshape(v[0], &[3, 2]));
        check_op(&[a], 1e-5, &|tp, v| tp.tile(v[0], 3));
        check_op(&[rand_t(&[2, 3, 4], 23)], 1e-5, &|tp, v| tp.permute(v[0], &[2, 0, 1]));
        check_op(&[rand_t(&[4, 3], 24), rand_t(&[4, 3], 25)], 1e-5, &|tp, v| tp.mse(v[0], v[1]));
    }

    #[test]
    fn product_gradients() {
        check_op(&[rand_t(&[2, 3, 4], 30), rand_t(&[5, 4], 31)], 1e-6, &|tp, v| tp.linear(v[0], v[1]));
        check_op(&[rand_t(&[2, 3, 4], 32), rand_t(&[2, 4, 5], 33)], 1e-6, &|tp, v| tp.bmm(v[0], v[1], false));
        check_op(&[rand_t(&[2, 3, 4], 34), rand_t(&[2, 5, 4], 35)], 1e-6, &|tp, v| tp.bmm(v[0], v[1], true));
    }

    #[test]
    fn identity_and_shape_arithmetic() {
        let mut tape = Tape::new();
        let x = tape.constant(rand_t(&[2, 3], 40));
        let z = tape.constant(Tensor::zeros(&[2, 3]));
        let y = tape.add(x, z).unwrap();
        assert_eq!(tape.value(y), tape.value(x));
        let c = tape.concat(&[x, y], 1).unwrap();
        assert_eq!(tape.shape(c), &[2, 6]);
        let bad = tape.constant(Tensor::zeros(&[3, 2]));
        assert!(tape.add(x, bad).is_err());
    }

    #[test]
    fn permute_matches_index_oracle() {
        let x = Tensor::from_fn(&[2, 3, 4], |i| i as f64);
        let mut tape = Tape::new();
        let v = tape.constant(x.clone());
        let p = tape.permute(v, &[1, 2, 0]).unwrap();
        let out = tape.value(p);
        assert_eq!(out.shape(), &[3, 4, 2]);
        for a in 0..2 {
            for b in 0..3 {
                for c in 0..4 {
                    assert_eq!(out.get(&[b, c, a]), x.get(&[a, b, c]));
                }
            }
        }
    }

    #[test]
    fn backward_rejects_non_scalar_and_accumulates() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[2], &[1.0, 2.0]), true);
        assert!(matches!(tape.backward(x), Err(Error::Usage(_))));
        let s = tape.sum(x).unwrap();
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[1.0, 1.0]);
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[2.0, 2.0]);
        tape.zero_grad();
        assert!(tape.grad(x).is_none());
    }

    #[test]
    fn non_finite_values_are_reported_when_checking() {
        let mut tape = Tape::new();
        tape.set_check_finite(true);
        let x = tape.constant(t(&[1], &[f64::MAX]));
        assert!(matches!(tape.scale(x, 10.0), Err(Error::Numerical(_))));
    }

    #[test]
    fn constants_do_not_require_grad() {
        let mut tape = Tape::new();
        let a = tape.constant(t(&[1], &[1.0]));
        let b = tape.leaf(t(&[1], &[2.0]), true);
        let c = tape.add(a, a).unwrap();
        let d = tape.add(c, b).unwrap();
        assert!(!tape.requires_grad(c));
        assert!(tape.requires_grad(d));
    }
}
