//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Graph`] records every operation applied during a forward pass in
//! execution order. [`Graph::backward`] walks the tape in exact reverse and
//! accumulates gradients additively. Nodes whose inputs do not require a
//! gradient are never visited, so frozen sub-networks cost nothing on the
//! backward pass.

use std::collections::HashMap;

use crate::error::{dim_err, Error, Result};
use crate::params::{ParamId, ParameterStore};
use crate::tensor::{matmul_raw, Tensor};

/// Handle to a node of a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

const LN_EPS: f64 = 1e-5;
const LN_2PI: f64 = 1.837_877_066_409_345_3;

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Param,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    Tanh(Var),
    Exp(Var),
    Square(Var),
    Sum(Var),
    Pick(Var, usize),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceCols(Var, usize, usize),
    GatherRows(Var, Vec<usize>),
    Reshape(Var),
    MaxPool {
        x: Var,
        /// Flat input index feeding each output element.
        argmax: Vec<usize>,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        scale: f64,
        /// Softmax weights, `heads × nq × nk`.
        probs: Vec<f64>,
    },
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    LogSoftmaxRows(Var),
    SinusoidalPe {
        x: Var,
        dim: usize,
    },
    GaussianNll {
        raw: Var,
        target: Vec<f64>,
    },
}

#[derive(Debug, Clone)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Recorded forward computation.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    bound_params: HashMap<ParamId, Var>,
    work: u64,
}

/// Per-node gradients produced by [`Graph::backward`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }
}

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(dim_err(op, format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    Ok(())
}

fn accumulate(grads: &mut [Option<Vec<f64>>], v: Var, contrib: &[f64]) {
    match &mut grads[v.0] {
        Some(g) => g.iter_mut().zip(contrib).for_each(|(a, c)| *a += c),
        slot @ None => *slot = Some(contrib.to_vec()),
    }
}

fn accumulate_with(grads: &mut [Option<Vec<f64>>], v: Var, len: usize, f: impl FnOnce(&mut [f64])) {
    let slot = grads[v.0].get_or_insert_with(|| vec![0.0; len]);
    f(slot);
}

/// Frequencies `base^(-2i/width)` for `i in 0..width/2`.
fn pe_frequencies(width: usize) -> Vec<f64> {
    (0..width / 2)
        .map(|i| 10_000f64.powf(-2.0 * i as f64 / width as f64))
        .collect()
}

/// Sinusoidal positional encoding of `[n × c]` coordinates (`c` is 1 or 2).
///
/// Each coordinate gets `dim / c` channels of interleaved `sin, cos` pairs
/// over geometrically spaced frequencies with base 10000.
pub fn sinusoidal_pe(positions: &Tensor, dim: usize) -> Result<Tensor> {
    let (n, c) = positions.dims2()?;
    let width = pe_width(c, dim)?;
    let freqs = pe_frequencies(width);
    let mut out = vec![0.0; n * dim];
    for r in 0..n {
        for j in 0..c {
            let x = positions.data()[r * c + j];
            for (i, w) in freqs.iter().enumerate() {
                let (s, co) = (x * w).sin_cos();
                out[r * dim + j * width + 2 * i] = s;
                out[r * dim + j * width + 2 * i + 1] = co;
            }
        }
    }
    Tensor::new(&[n, dim], out)
}

fn pe_width(coords: usize, dim: usize) -> Result<usize> {
    if coords == 0 || coords > 2 {
        return Err(dim_err("sinusoidal_pe", format!("positions need 1 or 2 columns, got {coords}")));
    }
    if dim == 0 || dim % (2 * coords) != 0 {
        return Err(Error::Config(format!(
            "positional encoding width {dim} must be a positive multiple of {}",
            2 * coords
        )));
    }
    Ok(dim / coords)
}

/// Stable `log(1 - tanh(q)^2) = -2 log cosh(q)`.
fn log_one_minus_tanh_sq(q: f64) -> f64 {
    let a = q.abs();
    -2.0 * (a + (-2.0 * a).exp().ln_1p() - std::f64::consts::LN_2)
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

    /// Approximate floating-point work (multiply-adds) performed so far,
    /// forward and backward. Deterministic for a given computation.
    pub fn work(&self) -> u64 {
        self.work
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool, op_name: &'static str) -> Result<Var> {
        value.ensure_finite(op_name)?;
        self.work += value.numel() as u64;
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// A value that is not differentiated.
    pub fn constant(&mut self, value: Tensor) -> Result<Var> {
        self.push(value, Op::Leaf, false, "constant")
    }

    /// A leaf that receives a gradient (used for input sensitivities).
    pub fn input(&mut self, value: Tensor) -> Result<Var> {
        self.push(value, Op::Leaf, true, "input")
    }

    /// Binds a stored parameter; repeated calls return the same node.
    pub fn param(&mut self, store: &ParameterStore, id: ParamId) -> Result<Var> {
        if let Some(&v) = self.bound_params.get(&id) {
            return Ok(v);
        }
        let e = store.entry(id);
        let v = self.push(e.value.clone(), Op::Param, e.trainable, "param")?;
        self.bound_params.insert(id, v);
        Ok(v)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (n, k) = self.value(a).dims2()?;
        let (k2, m) = self.value(b).dims2()?;
        if k != k2 {
            return Err(dim_err("matmul", format!("[{n}x{k}] x [{k2}x{m}]")));
        }
        let out = matmul_raw(self.value(a).data(), self.value(b).data(), n, k, m);
        self.work += (n * k * m) as u64;
        let rg = self.rg(a) || self.rg(b);
        self.push(Tensor::new(&[n, m], out)?, Op::MatMul(a, b), rg, "matmul")
    }

    fn zip_op(&mut self, a: Var, b: Var, name: &'static str, f: impl Fn(f64, f64) -> f64, op: Op) -> Result<Var> {
        same_shape(name, self.value(a), self.value(b))?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| f(*x, *y))
            .collect();
        let shape = self.value(a).shape().to_vec();
        let rg = self.rg(a) || self.rg(b);
        self.push(Tensor::new(&shape, data)?, op, rg, name)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_op(a, b, "add", |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_op(a, b, "sub", |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_op(a, b, "mul", |x, y| x * y, Op::Mul(a, b))
    }

    /// `a[n×m] + b[m]`, broadcasting `b` over rows.
    pub fn add_row(&mut self, a: Var, b: Var) -> Result<Var> {
        let (n, m) = self.value(a).dims2()?;
        if self.value(b).numel() != m {
            return Err(dim_err("add_row", format!("[{n}x{m}] + {:?}", self.value(b).shape())));
        }
        let bias = self.value(b).data().to_vec();
        let mut data = self.value(a).data().to_vec();
        for row in data.chunks_mut(m) {
            row.iter_mut().zip(&bias).for_each(|(x, b)| *x += b);
        }
        let rg = self.rg(a) || self.rg(b);
        self.push(Tensor::new(&[n, m], data)?, Op::AddRow(a, b), rg, "add_row")
    }

    fn map_op(&mut self, a: Var, name: &'static str, f: impl Fn(f64) -> f64, op: Op) -> Result<Var> {
        let t = self.value(a);
        let data = t.data().iter().map(|x| f(*x)).collect();
        let shape = t.shape().to_vec();
        let rg = self.rg(a);
        self.push(Tensor::new(&shape, data)?, op, rg, name)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        self.map_op(a, "scale", |x| x * c, Op::Scale(a, c))
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.map_op(a, "relu", |x| x.max(0.0), Op::Relu(a))
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        self.map_op(a, "tanh", f64::tanh, Op::Tanh(a))
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.map_op(a, "exp", f64::exp, Op::Exp(a))
    }

    pub fn square(&mut self, a: Var) -> Result<Var> {
        self.map_op(a, "square", |x| x * x, Op::Square(a))
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).data().iter().sum();
        let rg = self.rg(a);
        self.push(Tensor::scalar(s), Op::Sum(a), rg, "sum")
    }

    /// Sum of scalar nodes.
    pub fn sum_scalars(&mut self, items: &[Var]) -> Result<Var> {
        let mut iter = items.iter();
        let first = *iter
            .next()
            .ok_or_else(|| Error::Input("sum of zero terms".into()))?;
        iter.try_fold(first, |acc, v| self.add(acc, *v))
    }

    /// Single element at flat index `idx`, as a scalar.
    pub fn pick(&mut self, a: Var, idx: usize) -> Result<Var> {
        let t = self.value(a);
        if idx >= t.numel() {
            return Err(dim_err("pick", format!("index {idx} of {:?}", t.shape())));
        }
        let v = t.data()[idx];
        let rg = self.rg(a);
        self.push(Tensor::scalar(v), Op::Pick(a, idx), rg, "pick")
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let n = match parts.first() {
            Some(p) => self.value(*p).dims2()?.0,
            None => return Err(dim_err("concat_cols", "no inputs")),
        };
        let mut widths = Vec::with_capacity(parts.len());
        for p in parts {
            let (r, c) = self.value(*p).dims2()?;
            if r != n {
                return Err(dim_err("concat_cols", format!("row counts {n} vs {r}")));
            }
            widths.push(c);
        }
        let total: usize = widths.iter().sum();
        let mut data = vec![0.0; n * total];
        let mut offset = 0;
        for (p, w) in parts.iter().zip(&widths) {
            let src = self.value(*p).data();
            for r in 0..n {
                data[r * total + offset..r * total + offset + w].copy_from_slice(&src[r * w..(r + 1) * w]);
            }
            offset += w;
        }
        let rg = parts.iter().any(|p| self.rg(*p));
        self.push(Tensor::new(&[n, total], data)?, Op::ConcatCols(parts.to_vec()), rg, "concat_cols")
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let m = match parts.first() {
            Some(p) => self.value(*p).dims2()?.1,
            None => return Err(dim_err("concat_rows", "no inputs")),
        };
        let mut data = Vec::new();
        let mut rows = 0;
        for p in parts {
            let (r, c) = self.value(*p).dims2()?;
            if c != m {
                return Err(dim_err("concat_rows", format!("column counts {m} vs {c}")));
            }
            rows += r;
            data.extend_from_slice(self.value(*p).data());
        }
        let rg = parts.iter().any(|p| self.rg(*p));
        self.push(Tensor::new(&[rows, m], data)?, Op::ConcatRows(parts.to_vec()), rg, "concat_rows")
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let (n, m) = self.value(a).dims2()?;
        if start >= end || end > m {
            return Err(dim_err("slice_cols", format!("{start}..{end} of {m} columns")));
        }
        let w = end - start;
        let src = self.value(a).data();
        let mut data = Vec::with_capacity(n * w);
        for r in 0..n {
            data.extend_from_slice(&src[r * m + start..r * m + end]);
        }
        let rg = self.rg(a);
        self.push(Tensor::new(&[n, w], data)?, Op::SliceCols(a, start, end), rg, "slice_cols")
    }

    pub fn gather_rows(&mut self, a: Var, rows: &[usize]) -> Result<Var> {
        let (n, m) = self.value(a).dims2()?;
        if let Some(bad) = rows.iter().find(|&&r| r >= n) {
            return Err(dim_err("gather_rows", format!("row {bad} of {n}")));
        }
        let src = self.value(a).data();
        let mut data = Vec::with_capacity(rows.len() * m);
        for &r in rows {
            data.extend_from_slice(&src[r * m..(r + 1) * m]);
        }
        let rg = self.rg(a);
        self.push(
            Tensor::new(&[rows.len(), m], data)?,
            Op::GatherRows(a, rows.to_vec()),
            rg,
            "gather_rows",
        )
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(a).clone().reshape(shape)?;
        let rg = self.rg(a);
        self.push(t, Op::Reshape(a), rg, "reshape")
    }

    /// Masked max over the middle axis of `[N × P × D]`.
    ///
    /// `mask` has `N × P` entries; every row needs at least one valid entry.
    pub fn max_pool(&mut self, x: Var, mask: &[bool]) -> Result<Var> {
        let (n, p, d) = self.value(x).dims3()?;
        if mask.len() != n * p {
            return Err(dim_err("max_pool", format!("mask has {} entries, need {}", mask.len(), n * p)));
        }
        let src = self.value(x).data();
        let mut out = vec![0.0; n * d];
        let mut argmax = vec![0usize; n * d];
        for i in 0..n {
            let valid: Vec<usize> = (0..p).filter(|&j| mask[i * p + j]).collect();
            if valid.is_empty() {
                return Err(Error::Degenerate(format!("polyline {i} has no valid points")));
            }
            for f in 0..d {
                let mut best = valid[0];
                for &j in &valid[1..] {
                    if src[(i * p + j) * d + f] > src[(i * p + best) * d + f] {
                        best = j;
                    }
                }
                let idx = (i * p + best) * d + f;
                out[i * d + f] = src[idx];
                argmax[i * d + f] = idx;
            }
        }
        let rg = self.rg(x);
        self.push(Tensor::new(&[n, d], out)?, Op::MaxPool { x, argmax }, rg, "max_pool")
    }

    /// Multi-head scaled dot-product attention on already projected inputs.
    ///
    /// `q: [nq × dk]`, `k: [nk × dk]`, `v: [nk × dv]`; both `dk` and `dv`
    /// are split evenly across `heads`. Logits are scaled by `1/sqrt(dk/heads)`.
    /// `mask[i * nk + j] == false` excludes key `j` for query `i` (logit -inf).
    pub fn attention(&mut self, q: Var, k: Var, v: Var, heads: usize, mask: Option<&[bool]>) -> Result<Var> {
        let (nq, dk) = self.value(q).dims2()?;
        let (nk, dk2) = self.value(k).dims2()?;
        let (nv, dv) = self.value(v).dims2()?;
        if dk != dk2 || nk != nv {
            return Err(dim_err(
                "attention",
                format!("q [{nq}x{dk}], k [{nk}x{dk2}], v [{nv}x{dv}]"),
            ));
        }
        if heads == 0 || dk % heads != 0 || dv % heads != 0 {
            return Err(Error::Config(format!(
                "{heads} heads do not divide key width {dk} and value width {dv}"
            )));
        }
        if nk == 0 {
            return Err(Error::Degenerate("attention over zero keys".into()));
        }
        if let Some(m) = mask {
            if m.len() != nq * nk {
                return Err(dim_err("attention", format!("mask has {} entries, need {}", m.len(), nq * nk)));
            }
            for i in 0..nq {
                if !m[i * nk..(i + 1) * nk].iter().any(|&b| b) {
                    return Err(Error::Degenerate(format!("query {i} has every key masked")));
                }
            }
        }
        let hk = dk / heads;
        let hv = dv / heads;
        let scale = 1.0 / (hk as f64).sqrt();
        let (qd, kd, vd) = (self.value(q).data(), self.value(k).data(), self.value(v).data());
        let mut probs = vec![0.0; heads * nq * nk];
        let mut out = vec![0.0; nq * dv];
        let mut logits = vec![0.0; nk];
        for h in 0..heads {
            for i in 0..nq {
                let qi = &qd[i * dk + h * hk..i * dk + (h + 1) * hk];
                let mut max = f64::NEG_INFINITY;
                for j in 0..nk {
                    if mask.is_some_and(|m| !m[i * nk + j]) {
                        logits[j] = f64::NEG_INFINITY;
                        continue;
                    }
                    let kj = &kd[j * dk + h * hk..j * dk + (h + 1) * hk];
                    let s: f64 = qi.iter().zip(kj).map(|(a, b)| a * b).sum::<f64>() * scale;
                    logits[j] = s;
                    max = max.max(s);
                }
                let row = &mut probs[(h * nq + i) * nk..(h * nq + i + 1) * nk];
                let mut total = 0.0;
                for (p, l) in row.iter_mut().zip(&logits) {
                    *p = (l - max).exp();
                    total += *p;
                }
                row.iter_mut().for_each(|p| *p /= total);
                let o = &mut out[i * dv + h * hv..i * dv + (h + 1) * hv];
                for j in 0..nk {
                    let p = row[j];
                    if p == 0.0 {
                        continue;
                    }
                    let vj = &vd[j * dv + h * hv..j * dv + (h + 1) * hv];
                    o.iter_mut().zip(vj).for_each(|(a, b)| *a += p * b);
                }
            }
        }
        self.work += (nq * nk * (dk + dv)) as u64;
        let rg = self.rg(q) || self.rg(k) || self.rg(v);
        self.push(
            Tensor::new(&[nq, dv], out)?,
            Op::Attention {
                q,
                k,
                v,
                heads,
                scale,
                probs,
            },
            rg,
            "attention",
        )
    }

    /// Softmax weights recorded by an attention node, `heads × nq × nk`.
    pub fn attention_probs(&self, v: Var) -> Option<&[f64]> {
        match &self.nodes.get(v.0)?.op {
            Op::Attention { probs, .. } => Some(probs),
            _ => None,
        }
    }

    /// Row-wise layer normalization with learned scale and shift.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let (n, d) = self.value(x).dims2()?;
        if self.value(gamma).numel() != d || self.value(beta).numel() != d {
            return Err(dim_err("layer_norm", format!("width {d} vs affine params")));
        }
        let src = self.value(x).data();
        let (g, b) = (self.value(gamma).data(), self.value(beta).data());
        let mut xhat = vec![0.0; n * d];
        let mut inv_std = vec![0.0; n];
        let mut out = vec![0.0; n * d];
        for r in 0..n {
            let row = &src[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let is = 1.0 / (var + LN_EPS).sqrt();
            inv_std[r] = is;
            for c in 0..d {
                let xh = (row[c] - mean) * is;
                xhat[r * d + c] = xh;
                out[r * d + c] = g[c] * xh + b[c];
            }
        }
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        self.push(
            Tensor::new(&[n, d], out)?,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            rg,
            "layer_norm",
        )
    }

    pub fn log_softmax_rows(&mut self, a: Var) -> Result<Var> {
        let (n, m) = self.value(a).dims2()?;
        let src = self.value(a).data();
        let mut out = vec![0.0; n * m];
        for r in 0..n {
            let row = &src[r * m..(r + 1) * m];
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            for c in 0..m {
                out[r * m + c] = row[c] - lse;
            }
        }
        let rg = self.rg(a);
        self.push(Tensor::new(&[n, m], out)?, Op::LogSoftmaxRows(a), rg, "log_softmax_rows")
    }

    /// Differentiable [`sinusoidal_pe`].
    pub fn sinusoidal_pe(&mut self, x: Var, dim: usize) -> Result<Var> {
        let out = sinusoidal_pe(self.value(x), dim)?;
        let rg = self.rg(x);
        self.push(out, Op::SinusoidalPe { x, dim }, rg, "sinusoidal_pe")
    }

    /// Summed negative log-likelihood of `target [T × 2]` under per-step
    /// bivariate Gaussians parameterized by `raw [T × 5]` =
    /// `(mu_x, mu_y, log sigma_x, log sigma_y, atanh rho)`.
    pub fn gaussian_nll(&mut self, raw: Var, target: &Tensor) -> Result<Var> {
        let (t, c) = self.value(raw).dims2()?;
        if c != 5 || target.shape() != [t, 2] {
            return Err(dim_err(
                "gaussian_nll",
                format!("raw {:?}, target {:?}", self.value(raw).shape(), target.shape()),
            ));
        }
        let r = self.value(raw).data();
        let y = target.data();
        let mut total = 0.0;
        for s in 0..t {
            let p = &r[s * 5..s * 5 + 5];
            let (sx, sy) = (p[2].exp(), p[3].exp());
            let rho = p[4].tanh();
            let dx = (y[s * 2] - p[0]) / sx;
            let dy = (y[s * 2 + 1] - p[1]) / sy;
            let log1m = log_one_minus_tanh_sq(p[4]);
            let z = dx * dx + dy * dy - 2.0 * rho * dx * dy;
            total += LN_2PI + p[2] + p[3] + 0.5 * log1m + 0.5 * z * (-log1m).exp();
        }
        let rg = self.rg(raw);
        self.push(
            Tensor::scalar(total),
            Op::GaussianNll {
                raw,
                target: y.to_vec(),
            },
            rg,
            "gaussian_nll",
        )
    }

    /// Reverse pass from the scalar `loss`.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients> {
        if loss.0 >= self.nodes.len() {
            return Err(Error::State("backward called before the loss was recorded".into()));
        }
        if self.nodes[loss.0].value.numel() != 1 {
            return Err(Error::State(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.nodes[loss.0].value.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        let mut work = 0u64;
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            work += 2 * node.value.numel() as u64;
            self.backprop_node(node, &g, &mut grads, &mut work)?;
            grads[i] = Some(g);
        }
        self.work += work;
        Ok(Gradients { grads })
    }

    fn backprop_node(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>], work: &mut u64) -> Result<()> {
        let nodes = &self.nodes;
        let rg = |v: &Var| nodes[v.0].requires_grad;
        let val = |v: &Var| &nodes[v.0].value;
        match &node.op {
            Op::Leaf | Op::Param => {}
            Op::MatMul(a, b) => {
                let (n, k) = val(a).dims2()?;
                let m = val(b).dims2()?.1;
                if rg(a) {
                    // g[n×m] · bᵀ[m×k]
                    let bd = val(b).data();
                    accumulate_with(grads, *a, n * k, |ga| {
                        for i in 0..n {
                            for p in 0..k {
                                let br = &bd[p * m..(p + 1) * m];
                                let gr = &g[i * m..(i + 1) * m];
                                ga[i * k + p] += gr.iter().zip(br).map(|(x, y)| x * y).sum::<f64>();
                            }
                        }
                    });
                    *work += (n * k * m) as u64;
                }
                if rg(b) {
                    // aᵀ[k×n] · g[n×m]
                    let ad = val(a).data();
                    accumulate_with(grads, *b, k * m, |gb| {
                        for i in 0..n {
                            let gr = &g[i * m..(i + 1) * m];
                            for p in 0..k {
                                let av = ad[i * k + p];
                                if av == 0.0 {
                                    continue;
                                }
                                let row = &mut gb[p * m..(p + 1) * m];
                                row.iter_mut().zip(gr).for_each(|(x, y)| *x += av * y);
                            }
                        }
                    });
                    *work += (n * k * m) as u64;
                }
            }
            Op::Add(a, b) => {
                if rg(a) {
                    accumulate(grads, *a, g);
                }
                if rg(b) {
                    accumulate(grads, *b, g);
                }
            }
            Op::Sub(a, b) => {
                if rg(a) {
                    accumulate(grads, *a, g);
                }
                if rg(b) {
                    accumulate_with(grads, *b, g.len(), |gb| gb.iter_mut().zip(g).for_each(|(x, y)| *x -= y));
                }
            }
            Op::Mul(a, b) => {
                if rg(a) {
                    let bd = val(b).data();
                    accumulate_with(grads, *a, g.len(), |ga| {
                        ga.iter_mut().zip(g).zip(bd).for_each(|((x, gy), bv)| *x += gy * bv)
                    });
                }
                if rg(b) {
                    let ad = val(a).data();
                    accumulate_with(grads, *b, g.len(), |gb| {
                        gb.iter_mut().zip(g).zip(ad).for_each(|((x, gy), av)| *x += gy * av)
                    });
                }
            }
            Op::AddRow(a, b) => {
                if rg(a) {
                    accumulate(grads, *a, g);
                }
                if rg(b) {
                    let m = val(b).numel();
                    accumulate_with(grads, *b, m, |gb| {
                        for row in g.chunks(m) {
                            gb.iter_mut().zip(row).for_each(|(x, y)| *x += y);
                        }
                    });
                }
            }
            Op::Scale(a, c) => {
                accumulate_with(grads, *a, g.len(), |ga| ga.iter_mut().zip(g).for_each(|(x, y)| *x += c * y));
            }
            Op::Relu(a) => {
                let ad = val(a).data();
                accumulate_with(grads, *a, g.len(), |ga| {
                    ga.iter_mut().zip(g).zip(ad).for_each(|((x, y), av)| {
                        if *av > 0.0 {
                            *x += y
                        }
                    })
                });
            }
            Op::Tanh(a) => {
                let out = node.value.data();
                accumulate_with(grads, *a, g.len(), |ga| {
                    ga.iter_mut().zip(g).zip(out).for_each(|((x, y), o)| *x += y * (1.0 - o * o))
                });
            }
            Op::Exp(a) => {
                let out = node.value.data();
                accumulate_with(grads, *a, g.len(), |ga| {
                    ga.iter_mut().zip(g).zip(out).for_each(|((x, y), o)| *x += y * o)
                });
            }
            Op::Square(a) => {
                let ad = val(a).data();
                accumulate_with(grads, *a, g.len(), |ga| {
                    ga.iter_mut().zip(g).zip(ad).for_each(|((x, y), av)| *x += 2.0 * y * av)
                });
            }
            Op::Sum(a) => {
                let n = val(a).numel();
                accumulate_with(grads, *a, n, |ga| ga.iter_mut().for_each(|x| *x += g[0]));
            }
            Op::Pick(a, idx) => {
                let n = val(a).numel();
                accumulate_with(grads, *a, n, |ga| ga[*idx] += g[0]);
            }
            Op::ConcatCols(parts) => {
                let total = node.value.dims2()?.1;
                let n = node.value.dims2()?.0;
                let mut offset = 0;
                for p in parts {
                    let w = val(p).dims2()?.1;
                    if rg(p) {
                        accumulate_with(grads, *p, n * w, |gp| {
                            for r in 0..n {
                                let src = &g[r * total + offset..r * total + offset + w];
                                gp[r * w..(r + 1) * w].iter_mut().zip(src).for_each(|(x, y)| *x += y);
                            }
                        });
                    }
                    offset += w;
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for p in parts {
                    let len = val(p).numel();
                    if rg(p) {
                        accumulate(grads, *p, &g[offset..offset + len]);
                    }
                    offset += len;
                }
            }
            Op::SliceCols(a, start, end) => {
                let (n, m) = val(a).dims2()?;
                let w = end - start;
                accumulate_with(grads, *a, n * m, |ga| {
                    for r in 0..n {
                        ga[r * m + start..r * m + end]
                            .iter_mut()
                            .zip(&g[r * w..(r + 1) * w])
                            .for_each(|(x, y)| *x += y);
                    }
                });
            }
            Op::GatherRows(a, rows) => {
                let (n, m) = val(a).dims2()?;
                accumulate_with(grads, *a, n * m, |ga| {
                    for (out_r, &src_r) in rows.iter().enumerate() {
                        ga[src_r * m..(src_r + 1) * m]
                            .iter_mut()
                            .zip(&g[out_r * m..(out_r + 1) * m])
                            .for_each(|(x, y)| *x += y);
                    }
                });
            }
            Op::Reshape(a) => accumulate(grads, *a, g),
            Op::MaxPool { x, argmax } => {
                let n = val(x).numel();
                accumulate_with(grads, *x, n, |gx| {
                    for (o, &src) in argmax.iter().enumerate() {
                        gx[src] += g[o];
                    }
                });
            }
            Op::Attention {
                q,
                k,
                v,
                heads,
                scale,
                probs,
            } => {
                let (nq, dk) = val(q).dims2()?;
                let (nk, dv) = val(v).dims2()?;
                let (hk, hv) = (dk / heads, dv / heads);
                let (qd, kd, vd) = (val(q).data(), val(k).data(), val(v).data());
                let mut gq = vec![0.0; nq * dk];
                let mut gk = vec![0.0; nk * dk];
                let mut gv = vec![0.0; nk * dv];
                let mut gp = vec![0.0; nk];
                for h in 0..*heads {
                    for i in 0..nq {
                        let p = &probs[(h * nq + i) * nk..(h * nq + i + 1) * nk];
                        let go = &g[i * dv + h * hv..i * dv + (h + 1) * hv];
                        let mut dot = 0.0;
                        for j in 0..nk {
                            if p[j] == 0.0 {
                                gp[j] = 0.0;
                                continue;
                            }
                            let vj = &vd[j * dv + h * hv..j * dv + (h + 1) * hv];
                            gp[j] = go.iter().zip(vj).map(|(a, b)| a * b).sum();
                            dot += gp[j] * p[j];
                            let gvj = &mut gv[j * dv + h * hv..j * dv + (h + 1) * hv];
                            gvj.iter_mut().zip(go).for_each(|(x, y)| *x += p[j] * y);
                        }
                        let qi = &qd[i * dk + h * hk..i * dk + (h + 1) * hk];
                        for j in 0..nk {
                            if p[j] == 0.0 {
                                continue;
                            }
                            let gs = p[j] * (gp[j] - dot) * scale;
                            let kj = &kd[j * dk + h * hk..j * dk + (h + 1) * hk];
                            let gqi = &mut gq[i * dk + h * hk..i * dk + (h + 1) * hk];
                            gqi.iter_mut().zip(kj).for_each(|(x, y)| *x += gs * y);
                            let gkj = &mut gk[j * dk + h * hk..j * dk + (h + 1) * hk];
                            gkj.iter_mut().zip(qi).for_each(|(x, y)| *x += gs * y);
                        }
                    }
                }
                *work += 2 * (nq * nk * (dk + dv)) as u64;
                if rg(q) {
                    accumulate(grads, *q, &gq);
                }
                if rg(k) {
                    accumulate(grads, *k, &gk);
                }
                if rg(v) {
                    accumulate(grads, *v, &gv);
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let (n, d) = val(x).dims2()?;
                let gd = val(gamma).data();
                if rg(gamma) {
                    accumulate_with(grads, *gamma, d, |gg| {
                        for r in 0..n {
                            for c in 0..d {
                                gg[c] += g[r * d + c] * xhat[r * d + c];
                            }
                        }
                    });
                }
                if rg(beta) {
                    accumulate_with(grads, *beta, d, |gb| {
                        for r in 0..n {
                            for c in 0..d {
                                gb[c] += g[r * d + c];
                            }
                        }
                    });
                }
                if rg(x) {
                    accumulate_with(grads, *x, n * d, |gx| {
                        for r in 0..n {
                            let mut mean_g = 0.0;
                            let mut mean_gx = 0.0;
                            for c in 0..d {
                                let gh = g[r * d + c] * gd[c];
                                mean_g += gh;
                                mean_gx += gh * xhat[r * d + c];
                            }
                            mean_g /= d as f64;
                            mean_gx /= d as f64;
                            for c in 0..d {
                                let gh = g[r * d + c] * gd[c];
                                gx[r * d + c] += inv_std[r] * (gh - mean_g - xhat[r * d + c] * mean_gx);
                            }
                        }
                    });
                }
            }
            Op::LogSoftmaxRows(a) => {
                let (n, m) = node.value.dims2()?;
                let out = node.value.data();
                accumulate_with(grads, *a, n * m, |ga| {
                    for r in 0..n {
                        let gsum: f64 = g[r * m..(r + 1) * m].iter().sum();
                        for c in 0..m {
                            ga[r * m + c] += g[r * m + c] - out[r * m + c].exp() * gsum;
                        }
                    }
                });
            }
            Op::SinusoidalPe { x, dim } => {
                let (n, c) = val(x).dims2()?;
                let width = dim / c;
                let freqs = pe_frequencies(width);
                let out = node.value.data();
                accumulate_with(grads, *x, n * c, |gx| {
                    for r in 0..n {
                        for j in 0..c {
                            let mut acc = 0.0;
                            for (i, w) in freqs.iter().enumerate() {
                                let base = r * dim + j * width + 2 * i;
                                // d sin = w cos, d cos = -w sin
                                acc += w * (g[base] * out[base + 1] - g[base + 1] * out[base]);
                            }
                            gx[r * c + j] += acc;
                        }
                    }
                });
            }
            Op::GaussianNll { raw, target } => {
                let t = val(raw).dims2()?.0;
                let r = val(raw).data();
                accumulate_with(grads, *raw, t * 5, |gr| {
                    for s in 0..t {
                        let p = &r[s * 5..s * 5 + 5];
                        let (sx, sy) = (p[2].exp(), p[3].exp());
                        let rho = p[4].tanh();
                        let dx = (target[s * 2] - p[0]) / sx;
                        let dy = (target[s * 2 + 1] - p[1]) / sy;
                        let a = (-log_one_minus_tanh_sq(p[4])).exp();
                        let z = dx * dx + dy * dy - 2.0 * rho * dx * dy;
                        let o = &mut gr[s * 5..s * 5 + 5];
                        o[0] += g[0] * (-a * (dx - rho * dy) / sx);
                        o[1] += g[0] * (-a * (dy - rho * dx) / sy);
                        o[2] += g[0] * (1.0 - a * (dx * dx - rho * dx * dy));
                        o[3] += g[0] * (1.0 - a * (dy * dy - rho * dx * dy));
                        o[4] += g[0] * (-rho + z * rho * a - dx * dy);
                    }
                });
            }
        }
        Ok(())
    }

    /// Writes the gradients of every bound trainable parameter into `store`.
    pub fn accumulate_param_grads(&self, grads: &Gradients, store: &mut ParameterStore) -> Result<()> {
        let mut bound: Vec<(&ParamId, &Var)> = self.bound_params.iter().collect();
        bound.sort_by_key(|(id, _)| id.index());
        for (id, var) in bound {
            if !self.nodes[var.0].requires_grad {
                continue;
            }
            if let Some(g) = grads.get(*var) {
                g.iter()
                    .try_for_each(|v| if v.is_finite() { Ok(()) } else { Err(()) })
                    .map_err(|_| Error::Numeric {
                        op: "backward",
                        detail: format!("non-finite gradient for '{}'", store.entry(*id).name),
                    })?;
                store.accumulate_grad(*id, g)?;
            }
        }
        Ok(())
    }
}
