//! Tape-based reverse-mode differentiation over `Tensor<f64>`.
//!
//! Every operation computes its forward value immediately and appends a node
//! holding the inputs' ids and whatever intermediates the backward rule needs.
//! Node ids are assigned in recording order, so walking the tape backwards is
//! a valid reverse topological order.

use std::sync::atomic::{AtomicU64, Ordering};

use crate::error::{Error, Result};
use crate::linalg::{sym_eig, sym_fn_from_eig, sym_fn_vjp_from_eig, SpectralFn, SymEig};
use crate::tensor::{matmul_into, Tensor};

static NEXT_TAPE: AtomicU64 = AtomicU64::new(1);

type T64 = Tensor<f64>;

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var {
    tape: u64,
    index: usize,
}

impl Var {
    pub fn index(self) -> usize {
        self.index
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Conv2dSpec {
    pub stride: (usize, usize),
    pub dilation: (usize, usize),
}

impl Default for Conv2dSpec {
    fn default() -> Self {
        Self {
            stride: (1, 1),
            dilation: (1, 1),
        }
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    Scale(usize, f64),
    AddConst(usize),
    Exp(usize),
    Log(usize),
    Sqrt(usize),
    Sum(usize),
    MeanAxis0(usize),
    Reshape(usize),
    MatMul(usize, usize),
    Transpose(usize),
    BatchMatMul(usize, usize),
    Conv2d {
        input: usize,
        weight: usize,
        bias: Option<usize>,
        spec: Conv2dSpec,
    },
    LeakyRelu {
        x: usize,
        slope: f64,
    },
    MaxPoolTime {
        x: usize,
        argmax: Vec<usize>,
    },
    CenterLast(usize),
    Covariance {
        x: usize,
        centered: T64,
    },
    TraceShrink {
        x: usize,
        rel: f64,
    },
    SymFn {
        x: usize,
        f: SpectralFn,
        eigs: Vec<SymEig<f64>>,
    },
    Congruence {
        w: usize,
        c: usize,
    },
    Concat {
        inputs: Vec<usize>,
        axis: usize,
    },
    Gather {
        x: usize,
        axis: usize,
        indices: Vec<usize>,
    },
    Linear {
        x: usize,
        w: usize,
        b: Option<usize>,
    },
    CrossEntropy {
        logits: usize,
        targets: Vec<usize>,
        probs: T64,
    },
    BatchNorm {
        x: usize,
        gamma: usize,
        beta: usize,
        xhat: T64,
        inv_std: Vec<f64>,
        /// Batch statistics participate in the forward map (training mode).
        batch_stats: bool,
    },
}

#[derive(Debug)]
struct Node {
    value: T64,
    op: Op,
    requires_grad: bool,
}

/// Per-channel statistics produced by a training-mode batch norm.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    /// Unbiased variance.
    pub var: Vec<f64>,
}

/// Recording of a forward computation; single-owner.
#[derive(Debug)]
pub struct Tape {
    id: u64,
    nodes: Vec<Node>,
    consumed: bool,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients of a scalar loss with respect to every recorded node.
#[derive(Debug)]
pub struct Gradients {
    tape: u64,
    grads: Vec<Option<T64>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient for `v`; all zeros when `v` does not influence the loss.
    pub fn get(&self, v: Var) -> Result<T64> {
        if v.tape != self.tape {
            return Err(Error::TapeMismatch);
        }
        Ok(match &self.grads[v.index] {
            Some(g) => g.clone(),
            None => Tensor::zeros(&self.shapes[v.index]),
        })
    }

    pub fn take(&mut self, v: Var) -> Result<T64> {
        if v.tape != self.tape {
            return Err(Error::TapeMismatch);
        }
        Ok(match self.grads[v.index].take() {
            Some(g) => g,
            None => Tensor::zeros(&self.shapes[v.index]),
        })
    }
}

fn shape_err(msg: impl Into<String>) -> Error {
    Error::Shape(msg.into())
}

/// `(outer, axis_len, inner)` split of a shape around `axis`.
fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

/// Batch view of a square-matrix or matrix-batch tensor.
fn matrix_batch(t: &T64) -> Result<(usize, usize)> {
    match t.shape() {
        &[n, m] if n == m => Ok((1, n)),
        &[b, n, m] if n == m => Ok((b, n)),
        s => Err(shape_err(format!("expected square matrix or batch, got {s:?}"))),
    }
}

impl Tape {
    pub fn new() -> Self {
        Self {
            id: NEXT_TAPE.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
            consumed: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn check(&self, v: Var) -> Result<usize> {
        if v.tape != self.id {
            return Err(Error::TapeMismatch);
        }
        Ok(v.index)
    }

    fn push(&mut self, value: T64, op: Op, parents: &[usize]) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite(op_name(&op).to_string()));
        }
        let requires_grad = parents.iter().any(|&p| self.nodes[p].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var {
            tape: self.id,
            index: self.nodes.len() - 1,
        })
    }

    pub fn leaf(&mut self, value: T64, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var {
            tape: self.id,
            index: self.nodes.len() - 1,
        }
    }

    pub fn param(&mut self, value: T64) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: T64) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> Result<&T64> {
        let i = self.check(v)?;
        Ok(&self.nodes[i].value)
    }

    pub fn shape(&self, v: Var) -> Result<&[usize]> {
        Ok(self.value(v)?.shape())
    }

    fn val(&self, i: usize) -> &T64 {
        &self.nodes[i].value
    }

    // ----- elementwise ----------------------------------------------------

    fn broadcast_binary(
        &mut self,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        make: impl Fn(usize, usize) -> Op,
    ) -> Result<Var> {
        let (ia, ib) = (self.check(a)?, self.check(b)?);
        let (va, vb) = (self.val(ia), self.val(ib));
        let out = if va.shape() == vb.shape() {
            va.zip_map(vb, &f)?
        } else if vb.numel() == 1 {
            let s = vb.data()[0];
            va.map(|x| f(x, s))
        } else if va.numel() == 1 {
            let s = va.data()[0];
            vb.map(|x| f(s, x))
        } else {
            return Err(shape_err(format!(
                "cannot broadcast {:?} with {:?}",
                va.shape(),
                vb.shape()
            )));
        };
        self.push(out, make(ia, ib), &[ia, ib])
    }

    /// Elementwise sum; a single-element operand broadcasts.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.broadcast_binary(a, b, |x, y| x + y, Op::Add)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.broadcast_binary(a, b, |x, y| x - y, Op::Sub)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.broadcast_binary(a, b, |x, y| x * y, Op::Mul)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.broadcast_binary(a, b, |x, y| x / y, Op::Div)
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Result<Var> {
        let i = self.check(x)?;
        let out = self.val(i).scale(s);
        self.push(out, Op::Scale(i, s), &[i])
    }

    pub fn add_const(&mut self, x: Var, c: f64) -> Result<Var> {
        let i = self.check(x)?;
        let out = self.val(i).map(|v| v + c);
        self.push(out, Op::AddConst(i), &[i])
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        let i = self.check(x)?;
        let out = self.val(i).map(f64::exp);
        self.push(out, Op::Exp(i), &[i])
    }

    pub fn log(&mut self, x: Var) -> Result<Var> {
        let i = self.check(x)?;
        let out = self.val(i).map(f64::ln);
        self.push(out, Op::Log(i), &[i])
    }

    pub fn sqrt(&mut self, x: Var) -> Result<Var> {
        let i = self.check(x)?;
        let out = self.val(i).map(f64::sqrt);
        self.push(out, Op::Sqrt(i), &[i])
    }

    pub fn leaky_relu(&mut self, x: Var, slope: f64) -> Result<Var> {
        let i = self.check(x)?;
        let out = self.val(i).map(|v| if v > 0.0 { v } else { slope * v });
        self.push(out, Op::LeakyRelu { x: i, slope }, &[i])
    }

    // ----- reductions and reshapes ---------------------------------------

    /// Sum of all elements, shape `[]`.
    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let i = self.check(x)?;
        let out = Tensor::scalar(self.val(i).sum());
        self.push(out, Op::Sum(i), &[i])
    }

    /// Mean over the leading axis.
    pub fn mean_axis0(&mut self, x: Var) -> Result<Var> {
        let i = self.check(x)?;
        let v = self.val(i);
        let Some((&b, rest)) = v.shape().split_first() else {
            return Err(shape_err("mean over axis 0 of a scalar"));
        };
        if b == 0 {
            return Err(shape_err("mean over an empty axis"));
        }
        let sz: usize = rest.iter().product();
        let mut acc = vec![0.0; sz];
        for k in 0..b {
            for (a, &x) in acc.iter_mut().zip(&v.data()[k * sz..(k + 1) * sz]) {
                *a += x;
            }
        }
        let inv = 1.0 / b as f64;
        let out = Tensor::new(rest.to_vec(), acc.into_iter().map(|a| a * inv).collect())?;
        self.push(out, Op::MeanAxis0(i), &[i])
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let i = self.check(x)?;
        let out = self.val(i).reshape(shape)?;
        self.push(out, Op::Reshape(i), &[i])
    }

    /// Concatenation along `axis`; all other axes must agree.
    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        let idx: Vec<usize> = xs.iter().map(|&v| self.check(v)).collect::<Result<_>>()?;
        let Some(&first) = idx.first() else {
            return Err(shape_err("concat of nothing"));
        };
        let base = self.val(first).shape().to_vec();
        if axis >= base.len() {
            return Err(shape_err(format!("concat axis {axis} for rank {}", base.len())));
        }
        let mut total = 0;
        for &i in &idx {
            let s = self.val(i).shape();
            if s.len() != base.len()
                || s.iter().zip(&base).enumerate().any(|(a, (x, y))| a != axis && x != y)
            {
                return Err(shape_err(format!("concat {s:?} with {base:?} along {axis}")));
            }
            total += s[axis];
        }
        let mut shape = base.clone();
        shape[axis] = total;
        let (outer, _, inner) = split_axis(&shape, axis);
        let mut data = Vec::with_capacity(shape.iter().product());
        for o in 0..outer {
            for &i in &idx {
                let v = self.val(i);
                let len = v.shape()[axis] * inner;
                data.extend_from_slice(&v.data()[o * len..(o + 1) * len]);
            }
        }
        let out = Tensor::new(shape, data)?;
        self.push(out, Op::Concat { inputs: idx.clone(), axis }, &idx)
    }

    /// Selects `indices` (repeats allowed) along `axis`.
    pub fn gather(&mut self, x: Var, axis: usize, indices: &[usize]) -> Result<Var> {
        let i = self.check(x)?;
        let v = self.val(i);
        if axis >= v.ndim() {
            return Err(shape_err(format!("gather axis {axis} for rank {}", v.ndim())));
        }
        let (outer, len, inner) = split_axis(v.shape(), axis);
        if let Some(&bad) = indices.iter().find(|&&k| k >= len) {
            return Err(shape_err(format!("gather index {bad} out of {len}")));
        }
        let mut shape = v.shape().to_vec();
        shape[axis] = indices.len();
        let mut data = Vec::with_capacity(outer * indices.len() * inner);
        for o in 0..outer {
            for &k in indices {
                let start = (o * len + k) * inner;
                data.extend_from_slice(&v.data()[start..start + inner]);
            }
        }
        let out = Tensor::new(shape, data)?;
        self.push(
            out,
            Op::Gather {
                x: i,
                axis,
                indices: indices.to_vec(),
            },
            &[i],
        )
    }

    // ----- linear algebra -------------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = (self.check(a)?, self.check(b)?);
        let out = self.val(ia).matmul(self.val(ib))?;
        self.push(out, Op::MatMul(ia, ib), &[ia, ib])
    }

    /// Swaps the last two axes of a matrix or matrix batch.
    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let i = self.check(x)?;
        let out = transpose_last(self.val(i))?;
        self.push(out, Op::Transpose(i), &[i])
    }

    /// `[b, m, k] · [b, k, n]`.
    pub fn batch_matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = (self.check(a)?, self.check(b)?);
        let out = bmm(self.val(ia), self.val(ib))?;
        self.push(out, Op::BatchMatMul(ia, ib), &[ia, ib])
    }

    /// `W · C · Wᵀ` for a shared `W` (`[p, n]`) and `C` of shape `[n, n]` or `[b, n, n]`.
    pub fn congruence(&mut self, w: Var, c: Var) -> Result<Var> {
        let (iw, ic) = (self.check(w)?, self.check(c)?);
        let wv = self.val(iw);
        let cv = self.val(ic);
        let (p, n) = wv.dims2()?;
        let (b, m) = matrix_batch(cv)?;
        if m != n {
            return Err(shape_err(format!("congruence of {n}-column W with {m}x{m} C")));
        }
        let wt = wv.transpose()?;
        let mut data = Vec::with_capacity(b * p * p);
        let mut tmp = vec![0.0; p * n];
        let mut out = vec![0.0; p * p];
        for k in 0..b {
            let ck = &cv.data()[k * n * n..(k + 1) * n * n];
            matmul_into(wv.data(), ck, &mut tmp, p, n, n);
            matmul_into(&tmp, wt.data(), &mut out, p, n, p);
            data.extend_from_slice(&out);
        }
        let shape = if cv.ndim() == 2 { vec![p, p] } else { vec![b, p, p] };
        let out = Tensor::new(shape, data)?;
        self.push(out, Op::Congruence { w: iw, c: ic }, &[iw, ic])
    }

    /// Spectral function of a symmetric matrix or of every matrix in a batch.
    pub fn sym_fn(&mut self, x: Var, f: SpectralFn) -> Result<Var> {
        let i = self.check(x)?;
        let v = self.val(i);
        let (b, n) = matrix_batch(v)?;
        let mats: Vec<T64> = if v.ndim() == 2 { vec![v.clone()] } else { v.unstack()? };
        let eigs = crate::linalg::batched_apply(&mats, sym_eig)?;
        let mut data = Vec::with_capacity(b * n * n);
        for e in &eigs {
            data.extend_from_slice(sym_fn_from_eig(e, f)?.data());
        }
        let out = Tensor::new(v.shape().to_vec(), data)?;
        self.push(out, Op::SymFn { x: i, f, eigs }, &[i])
    }

    /// Per-sample covariance of the rows of `[b, n, m]` with divisor `m − 1`.
    pub fn covariance(&mut self, x: Var) -> Result<Var> {
        let i = self.check(x)?;
        let v = self.val(i);
        let (b, n, m) = v.dims3()?;
        if m < 2 {
            return Err(shape_err(format!("covariance needs at least 2 columns, got {m}")));
        }
        let centered = center_last(v);
        let inv = 1.0 / (m - 1) as f64;
        let mut data = vec![0.0; b * n * n];
        for k in 0..b {
            let f = &centered.data()[k * n * m..(k + 1) * n * m];
            let o = &mut data[k * n * n..(k + 1) * n * n];
            for r in 0..n {
                for c in r..n {
                    let s: f64 = f[r * m..(r + 1) * m]
                        .iter()
                        .zip(&f[c * m..(c + 1) * m])
                        .map(|(a, b)| a * b)
                        .sum::<f64>()
                        * inv;
                    o[r * n + c] = s;
                    o[c * n + r] = s;
                }
            }
        }
        let out = Tensor::new(vec![b, n, n], data)?;
        self.push(out, Op::Covariance { x: i, centered }, &[i])
    }

    /// Subtracts the mean along the last axis.
    pub fn center_last(&mut self, x: Var) -> Result<Var> {
        let i = self.check(x)?;
        if self.val(i).ndim() == 0 {
            return Err(shape_err("centering a scalar"));
        }
        let out = center_last(self.val(i));
        self.push(out, Op::CenterLast(i), &[i])
    }

    /// `C + (rel · tr(C)/n + floor) · I` for every matrix of a batch.
    pub fn trace_shrink(&mut self, x: Var, rel: f64, floor: f64) -> Result<Var> {
        let i = self.check(x)?;
        let v = self.val(i);
        let (b, n) = matrix_batch(v)?;
        let mut out = v.clone();
        {
            let d = out.data_mut();
            for k in 0..b {
                let m = &mut d[k * n * n..(k + 1) * n * n];
                let tr: f64 = (0..n).map(|r| m[r * n + r]).sum();
                let lambda = rel * tr / n as f64 + floor;
                for r in 0..n {
                    m[r * n + r] += lambda;
                }
            }
        }
        self.push(out, Op::TraceShrink { x: i, rel }, &[i])
    }

    // ----- network layers -------------------------------------------------

    /// Valid cross-correlation of `[b, cin, h, w]` with `[cout, cin, kh, kw]`.
    pub fn conv2d(&mut self, input: Var, weight: Var, bias: Option<Var>, spec: Conv2dSpec) -> Result<Var> {
        let ii = self.check(input)?;
        let iw = self.check(weight)?;
        let ib = bias.map(|b| self.check(b)).transpose()?;
        let x = self.val(ii);
        let w = self.val(iw);
        let geo = ConvGeometry::new(x.shape(), w.shape(), spec)?;
        if let Some(ib) = ib {
            if self.val(ib).shape() != [geo.cout] {
                return Err(shape_err(format!(
                    "conv bias {:?} for {} output channels",
                    self.val(ib).shape(),
                    geo.cout
                )));
            }
        }
        let mut out = vec![0.0; geo.out_len()];
        geo.forward(x.data(), w.data(), &mut out);
        if let Some(ib) = ib {
            let bias = self.val(ib).data();
            let plane = geo.oh * geo.ow;
            for (k, chunk) in out.chunks_mut(plane).enumerate() {
                let bv = bias[k % geo.cout];
                chunk.iter_mut().for_each(|v| *v += bv);
            }
        }
        let out = Tensor::new(vec![geo.b, geo.cout, geo.oh, geo.ow], out)?;
        let mut parents = vec![ii, iw];
        parents.extend(ib);
        self.push(
            out,
            Op::Conv2d {
                input: ii,
                weight: iw,
                bias: ib,
                spec,
            },
            &parents,
        )
    }

    /// Max-pooling of `[b, c, h, w]` along the last axis with kernel = stride = `pool`.
    /// Ties route to the earliest index.
    pub fn max_pool_time(&mut self, x: Var, pool: usize) -> Result<Var> {
        let i = self.check(x)?;
        let v = self.val(i);
        if v.ndim() != 4 || pool == 0 {
            return Err(shape_err(format!("max_pool_time on {:?} with pool {pool}", v.shape())));
        }
        let w = v.shape()[3];
        let ow = w / pool;
        if ow == 0 {
            return Err(shape_err(format!("pool {pool} longer than axis {w}")));
        }
        let rows = v.numel() / w;
        let mut data = Vec::with_capacity(rows * ow);
        let mut argmax = Vec::with_capacity(rows * ow);
        for r in 0..rows {
            let row = &v.data()[r * w..(r + 1) * w];
            for o in 0..ow {
                let mut best = o * pool;
                for k in (o * pool + 1)..(o * pool + pool) {
                    if row[k] > row[best] {
                        best = k;
                    }
                }
                data.push(row[best]);
                argmax.push(r * w + best);
            }
        }
        let mut shape = v.shape().to_vec();
        shape[3] = ow;
        let out = Tensor::new(shape, data)?;
        self.push(out, Op::MaxPoolTime { x: i, argmax }, &[i])
    }

    /// `x · Wᵀ + b` for `x: [b, in]`, `W: [out, in]`, `b: [out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let ix = self.check(x)?;
        let iw = self.check(w)?;
        let ib = b.map(|b| self.check(b)).transpose()?;
        let xv = self.val(ix);
        let wv = self.val(iw);
        let (_, fin) = xv.dims2()?;
        let (fout, fin2) = wv.dims2()?;
        if fin != fin2 {
            return Err(shape_err(format!("linear input {fin} vs weight {fout}x{fin2}")));
        }
        let mut out = xv.matmul(&wv.transpose()?)?;
        if let Some(ib) = ib {
            let bias = self.val(ib);
            if bias.shape() != [fout] {
                return Err(shape_err(format!("linear bias {:?} for {fout} outputs", bias.shape())));
            }
            for row in out.data_mut().chunks_mut(fout) {
                for (o, &bv) in row.iter_mut().zip(bias.data()) {
                    *o += bv;
                }
            }
        }
        let mut parents = vec![ix, iw];
        parents.extend(ib);
        self.push(out, Op::Linear { x: ix, w: iw, b: ib }, &parents)
    }

    /// Mean negative log-likelihood of `log_softmax(logits)` at `targets`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let i = self.check(logits)?;
        let v = self.val(i);
        let (b, c) = v.dims2()?;
        if targets.len() != b {
            return Err(shape_err(format!("{} targets for {b} rows", targets.len())));
        }
        if let Some(&t) = targets.iter().find(|&&t| t >= c) {
            return Err(shape_err(format!("target class {t} with {c} logits")));
        }
        let mut probs = vec![0.0; b * c];
        let mut loss = 0.0;
        for r in 0..b {
            let row = &v.data()[r * c..(r + 1) * c];
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + row.iter().map(|&x| (x - m).exp()).sum::<f64>().ln();
            for k in 0..c {
                probs[r * c + k] = (row[k] - lse).exp();
            }
            loss -= row[targets[r]] - lse;
        }
        let out = Tensor::scalar(loss / b as f64);
        let probs = Tensor::new(vec![b, c], probs)?;
        self.push(
            out,
            Op::CrossEntropy {
                logits: i,
                targets: targets.to_vec(),
                probs,
            },
            &[i],
        )
    }

    /// Batch normalization over axis 1 using the batch's own statistics.
    /// Returns the output and the statistics (mean, unbiased variance).
    pub fn batch_norm_train(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<(Var, BatchStats)> {
        let ix = self.check(x)?;
        let (ig, ib) = (self.check(gamma)?, self.check(beta)?);
        let v = self.val(ix);
        let (outer, c, inner) = bn_geometry(v, self.val(ig), self.val(ib))?;
        let count = outer * inner;
        if count < 2 {
            return Err(shape_err("batch norm needs at least two values per channel"));
        }
        let mut mean = vec![0.0; c];
        let mut var = vec![0.0; c];
        for o in 0..outer {
            for ch in 0..c {
                let s = &v.data()[(o * c + ch) * inner..(o * c + ch + 1) * inner];
                mean[ch] += s.iter().sum::<f64>();
            }
        }
        mean.iter_mut().for_each(|m| *m /= count as f64);
        for o in 0..outer {
            for ch in 0..c {
                let s = &v.data()[(o * c + ch) * inner..(o * c + ch + 1) * inner];
                var[ch] += s.iter().map(|x| (x - mean[ch]).powi(2)).sum::<f64>();
            }
        }
        let biased: Vec<f64> = var.iter().map(|s| s / count as f64).collect();
        let unbiased: Vec<f64> = var.iter().map(|s| s / (count - 1) as f64).collect();
        let inv_std: Vec<f64> = biased.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let stats = BatchStats {
            mean: mean.clone(),
            var: unbiased,
        };
        let out = self.bn_apply(ix, ig, ib, &mean, inv_std, true)?;
        Ok((out, stats))
    }

    /// Batch normalization with fixed statistics.
    pub fn batch_norm_eval(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running_mean: &[f64],
        running_var: &[f64],
        eps: f64,
    ) -> Result<Var> {
        let ix = self.check(x)?;
        let (ig, ib) = (self.check(gamma)?, self.check(beta)?);
        let (_, c, _) = bn_geometry(self.val(ix), self.val(ig), self.val(ib))?;
        if running_mean.len() != c || running_var.len() != c {
            return Err(shape_err("running statistics length differs from channel count"));
        }
        let inv_std: Vec<f64> = running_var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        self.bn_apply(ix, ig, ib, running_mean, inv_std, false)
    }

    fn bn_apply(
        &mut self,
        ix: usize,
        ig: usize,
        ib: usize,
        mean: &[f64],
        inv_std: Vec<f64>,
        batch_stats: bool,
    ) -> Result<Var> {
        let v = self.val(ix);
        let (outer, c, inner) = split_axis(v.shape(), 1);
        let gamma = self.val(ig).data();
        let beta = self.val(ib).data();
        let mut xhat = vec![0.0; v.numel()];
        let mut out = vec![0.0; v.numel()];
        for o in 0..outer {
            for ch in 0..c {
                let base = (o * c + ch) * inner;
                for k in base..base + inner {
                    let h = (v.data()[k] - mean[ch]) * inv_std[ch];
                    xhat[k] = h;
                    out[k] = gamma[ch] * h + beta[ch];
                }
            }
        }
        let shape = v.shape().to_vec();
        let xhat = Tensor::new(shape.clone(), xhat)?;
        let out = Tensor::new(shape, out)?;
        self.push(
            out,
            Op::BatchNorm {
                x: ix,
                gamma: ig,
                beta: ib,
                xhat,
                inv_std,
                batch_stats,
            },
            &[ix, ig, ib],
        )
    }

    // ----- backward -------------------------------------------------------

    /// Reverse sweep from a scalar `loss`. A tape supports one backward pass.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients> {
        let li = self.check(loss)?;
        if self.consumed {
            return Err(Error::TapeConsumed);
        }
        let lv = &self.nodes[li].value;
        if lv.numel() != 1 {
            return Err(Error::NonScalarLoss(lv.shape().to_vec()));
        }
        self.consumed = true;
        let mut grads: Vec<Option<T64>> = vec![None; self.nodes.len()];
        grads[li] = Some(Tensor::full(lv.shape(), 1.0));
        for i in (0..=li).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            self.propagate(i, &g, &mut grads)?;
            grads[i] = Some(g);
        }
        Ok(Gradients {
            tape: self.id,
            shapes: self.nodes.iter().map(|n| n.value.shape().to_vec()).collect(),
            grads,
        })
    }

    fn propagate(&self, i: usize, g: &T64, grads: &mut [Option<T64>]) -> Result<()> {
        let node = &self.nodes[i];
        let needs = |p: usize| self.nodes[p].requires_grad;
        let acc = |p: usize, t: T64, grads: &mut [Option<T64>]| -> Result<()> {
            match &mut grads[p] {
                Some(existing) => existing.add_assign(&t),
                slot @ None => {
                    *slot = Some(t);
                    Ok(())
                }
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) | Op::Sub(a, b) => {
                let sign = if matches!(node.op, Op::Sub(..)) { -1.0 } else { 1.0 };
                if needs(*a) {
                    acc(*a, reduce_broadcast(g, self.val(*a).shape()), grads)?;
                }
                if needs(*b) {
                    acc(*b, reduce_broadcast(g, self.val(*b).shape()).scale(sign), grads)?;
                }
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.val(*a), self.val(*b));
                if needs(*a) {
                    let t = broadcast_mul(g, vb)?;
                    acc(*a, reduce_broadcast(&t, va.shape()), grads)?;
                }
                if needs(*b) {
                    let t = broadcast_mul(g, va)?;
                    acc(*b, reduce_broadcast(&t, vb.shape()), grads)?;
                }
            }
            Op::Div(a, b) => {
                let (va, vb) = (self.val(*a), self.val(*b));
                if needs(*a) {
                    let inv = vb.map(|x| 1.0 / x);
                    let t = broadcast_mul(g, &inv)?;
                    acc(*a, reduce_broadcast(&t, va.shape()), grads)?;
                }
                if needs(*b) {
                    // d(a/b)/db = -out / b
                    let inv = vb.map(|x| -1.0 / x);
                    let t = broadcast_mul(&broadcast_mul(g, &node.value)?, &inv)?;
                    acc(*b, reduce_broadcast(&t, vb.shape()), grads)?;
                }
            }
            Op::Scale(x, s) => acc(*x, g.scale(*s), grads)?,
            Op::AddConst(x) | Op::Reshape(x) => {
                let t = g.reshape(self.val(*x).shape())?;
                acc(*x, t, grads)?;
            }
            Op::Exp(x) => acc(*x, g.zip_map(&node.value, |a, y| a * y)?, grads)?,
            Op::Log(x) => acc(*x, g.zip_map(self.val(*x), |a, v| a / v)?, grads)?,
            // zero where the output is zero, the subgradient convention at the kink
            Op::Sqrt(x) => {
                let t = g.zip_map(&node.value, |a, y| if y > 0.0 { a * 0.5 / y } else { 0.0 })?;
                acc(*x, t, grads)?;
            }
            Op::LeakyRelu { x, slope } => {
                let t = g.zip_map(self.val(*x), |a, v| if v > 0.0 { a } else { a * slope })?;
                acc(*x, t, grads)?;
            }
            Op::Sum(x) => {
                let s = g.data()[0];
                acc(*x, Tensor::full(self.val(*x).shape(), s), grads)?;
            }
            Op::MeanAxis0(x) => {
                let shape = self.val(*x).shape();
                let b = shape[0];
                let inv = 1.0 / b as f64;
                let mut data = Vec::with_capacity(b * g.numel());
                for _ in 0..b {
                    data.extend(g.data().iter().map(|v| v * inv));
                }
                acc(*x, Tensor::new(shape.to_vec(), data)?, grads)?;
            }
            Op::Concat { inputs, axis } => {
                let (outer, _, inner) = split_axis(node.value.shape(), *axis);
                let total = node.value.shape()[*axis];
                let mut offset = 0;
                for &p in inputs {
                    let shape = self.val(p).shape();
                    let len = shape[*axis];
                    if needs(p) {
                        let mut data = Vec::with_capacity(outer * len * inner);
                        for o in 0..outer {
                            let start = (o * total + offset) * inner;
                            data.extend_from_slice(&g.data()[start..start + len * inner]);
                        }
                        acc(p, Tensor::new(shape.to_vec(), data)?, grads)?;
                    }
                    offset += len;
                }
            }
            Op::Gather { x, axis, indices } => {
                let shape = self.val(*x).shape();
                let (outer, len, inner) = split_axis(shape, *axis);
                let mut data = vec![0.0; outer * len * inner];
                let n = indices.len();
                for o in 0..outer {
                    for (j, &k) in indices.iter().enumerate() {
                        let src = (o * n + j) * inner;
                        let dst = (o * len + k) * inner;
                        for q in 0..inner {
                            data[dst + q] += g.data()[src + q];
                        }
                    }
                }
                acc(*x, Tensor::new(shape.to_vec(), data)?, grads)?;
            }
            Op::MatMul(a, b) => {
                let (va, vb) = (self.val(*a), self.val(*b));
                if needs(*a) {
                    acc(*a, g.matmul(&vb.transpose()?)?, grads)?;
                }
                if needs(*b) {
                    acc(*b, va.transpose()?.matmul(g)?, grads)?;
                }
            }
            Op::Transpose(x) => acc(*x, transpose_last(g)?, grads)?,
            Op::BatchMatMul(a, b) => {
                let (va, vb) = (self.val(*a), self.val(*b));
                if needs(*a) {
                    acc(*a, bmm(g, &transpose_last(vb)?)?, grads)?;
                }
                if needs(*b) {
                    acc(*b, bmm(&transpose_last(va)?, g)?, grads)?;
                }
            }
            Op::Congruence { w, c } => {
                let wv = self.val(*w);
                let cv = self.val(*c);
                let (p, n) = wv.dims2()?;
                let (b, _) = matrix_batch(cv)?;
                let wt = wv.transpose()?;
                let mut gw = vec![0.0; p * n];
                let mut gc = Vec::with_capacity(b * n * n);
                let mut t1 = vec![0.0; p * n];
                let mut t2 = vec![0.0; p * n];
                let mut t3 = vec![0.0; n * p];
                let mut t4 = vec![0.0; n * n];
                for k in 0..b {
                    let gk = &g.data()[k * p * p..(k + 1) * p * p];
                    let ck = &cv.data()[k * n * n..(k + 1) * n * n];
                    if needs(*w) {
                        // (G + Gᵀ) W C for symmetric C; written for general C below
                        let gkt = transpose_slice(gk, p, p);
                        let ckt = transpose_slice(ck, n, n);
                        matmul_into(gk, wv.data(), &mut t1, p, p, n);
                        matmul_into(&t1, &ckt, &mut t2, p, n, n);
                        for (a, v) in gw.iter_mut().zip(&t2) {
                            *a += v;
                        }
                        matmul_into(&gkt, wv.data(), &mut t1, p, p, n);
                        matmul_into(&t1, ck, &mut t2, p, n, n);
                        for (a, v) in gw.iter_mut().zip(&t2) {
                            *a += v;
                        }
                    }
                    if needs(*c) {
                        matmul_into(wt.data(), gk, &mut t3, n, p, p);
                        matmul_into(&t3, wv.data(), &mut t4, n, p, n);
                        gc.extend_from_slice(&t4);
                    }
                }
                if needs(*w) {
                    acc(*w, Tensor::new(vec![p, n], gw)?, grads)?;
                }
                if needs(*c) {
                    acc(*c, Tensor::new(cv.shape().to_vec(), gc)?, grads)?;
                }
            }
            Op::SymFn { x, f, eigs } => {
                let n = eigs[0].dim();
                let mut data = Vec::with_capacity(eigs.len() * n * n);
                for (k, e) in eigs.iter().enumerate() {
                    let gk = Tensor::new(vec![n, n], g.data()[k * n * n..(k + 1) * n * n].to_vec())?;
                    data.extend_from_slice(sym_fn_vjp_from_eig(e, *f, &gk)?.data());
                }
                acc(*x, Tensor::new(self.val(*x).shape().to_vec(), data)?, grads)?;
            }
            Op::Covariance { x, centered } => {
                let (b, n, m) = centered.dims3()?;
                let inv = 1.0 / (m - 1) as f64;
                let mut data = vec![0.0; b * n * m];
                for k in 0..b {
                    let gk = &g.data()[k * n * n..(k + 1) * n * n];
                    let sym: Vec<f64> = (0..n * n)
                        .map(|q| (gk[q] + gk[(q % n) * n + q / n]) * inv)
                        .collect();
                    matmul_into(
                        &sym,
                        &centered.data()[k * n * m..(k + 1) * n * m],
                        &mut data[k * n * m..(k + 1) * n * m],
                        n,
                        n,
                        m,
                    );
                }
                acc(*x, Tensor::new(vec![b, n, m], data)?, grads)?;
            }
            Op::CenterLast(x) => acc(*x, center_last(g), grads)?,
            Op::TraceShrink { x, rel } => {
                let (b, n) = matrix_batch(g)?;
                let mut out = g.clone();
                let d = out.data_mut();
                for k in 0..b {
                    let m = &mut d[k * n * n..(k + 1) * n * n];
                    let tr: f64 = (0..n).map(|r| m[r * n + r]).sum();
                    let add = rel * tr / n as f64;
                    for r in 0..n {
                        m[r * n + r] += add;
                    }
                }
                acc(*x, out, grads)?;
            }
            Op::Conv2d {
                input,
                weight,
                bias,
                spec,
            } => {
                let xv = self.val(*input);
                let wv = self.val(*weight);
                let geo = ConvGeometry::new(xv.shape(), wv.shape(), *spec)?;
                if needs(*input) {
                    let mut gx = vec![0.0; xv.numel()];
                    geo.backward_input(g.data(), wv.data(), &mut gx);
                    acc(*input, Tensor::new(xv.shape().to_vec(), gx)?, grads)?;
                }
                if needs(*weight) {
                    let mut gw = vec![0.0; wv.numel()];
                    geo.backward_weight(g.data(), xv.data(), &mut gw);
                    acc(*weight, Tensor::new(wv.shape().to_vec(), gw)?, grads)?;
                }
                if let Some(b) = bias.filter(|&b| needs(b)) {
                    let plane = geo.oh * geo.ow;
                    let mut gb = vec![0.0; geo.cout];
                    for (k, chunk) in g.data().chunks(plane).enumerate() {
                        gb[k % geo.cout] += chunk.iter().sum::<f64>();
                    }
                    acc(b, Tensor::new(vec![geo.cout], gb)?, grads)?;
                }
            }
            Op::MaxPoolTime { x, argmax } => {
                let mut gx = vec![0.0; self.val(*x).numel()];
                for (&src, &gv) in argmax.iter().zip(g.data()) {
                    gx[src] += gv;
                }
                acc(*x, Tensor::new(self.val(*x).shape().to_vec(), gx)?, grads)?;
            }
            Op::Linear { x, w, b } => {
                let xv = self.val(*x);
                let wv = self.val(*w);
                if needs(*x) {
                    acc(*x, g.matmul(wv)?, grads)?;
                }
                if needs(*w) {
                    acc(*w, g.transpose()?.matmul(xv)?, grads)?;
                }
                if let Some(b) = b.filter(|&b| needs(b)) {
                    let (_, fout) = g.dims2()?;
                    let mut gb = vec![0.0; fout];
                    for row in g.data().chunks(fout) {
                        for (a, v) in gb.iter_mut().zip(row) {
                            *a += v;
                        }
                    }
                    acc(b, Tensor::new(vec![fout], gb)?, grads)?;
                }
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
            } => {
                let (b, c) = probs.dims2()?;
                let s = g.data()[0] / b as f64;
                let mut gl = probs.data().to_vec();
                for (r, &t) in targets.iter().enumerate() {
                    gl[r * c + t] -= 1.0;
                }
                gl.iter_mut().for_each(|v| *v *= s);
                acc(*logits, Tensor::new(vec![b, c], gl)?, grads)?;
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats,
            } => {
                let (outer, c, inner) = split_axis(xhat.shape(), 1);
                let gv = self.val(*gamma).data();
                let mut dgamma = vec![0.0; c];
                let mut dbeta = vec![0.0; c];
                for o in 0..outer {
                    for ch in 0..c {
                        let base = (o * c + ch) * inner;
                        for k in base..base + inner {
                            dgamma[ch] += g.data()[k] * xhat.data()[k];
                            dbeta[ch] += g.data()[k];
                        }
                    }
                }
                if needs(*x) {
                    let count = (outer * inner) as f64;
                    let mut gx = vec![0.0; xhat.numel()];
                    for o in 0..outer {
                        for ch in 0..c {
                            let base = (o * c + ch) * inner;
                            for k in base..base + inner {
                                let dxhat = g.data()[k] * gv[ch];
                                gx[k] = if *batch_stats {
                                    inv_std[ch] / count
                                        * (count * dxhat
                                            - dbeta[ch] * gv[ch]
                                            - xhat.data()[k] * dgamma[ch] * gv[ch])
                                } else {
                                    dxhat * inv_std[ch]
                                };
                            }
                        }
                    }
                    acc(*x, Tensor::new(xhat.shape().to_vec(), gx)?, grads)?;
                }
                if needs(*gamma) {
                    acc(*gamma, Tensor::new(vec![c], dgamma)?, grads)?;
                }
                if needs(*beta) {
                    acc(*beta, Tensor::new(vec![c], dbeta)?, grads)?;
                }
            }
        }
        Ok(())
    }
}

fn op_name(op: &Op) -> &'static str {
    match op {
        Op::Leaf => "leaf",
        Op::Add(..) => "add",
        Op::Sub(..) => "sub",
        Op::Mul(..) => "mul",
        Op::Div(..) => "div",
        Op::Scale(..) => "scale",
        Op::AddConst(..) => "add_const",
        Op::Exp(..) => "exp",
        Op::Log(..) => "log",
        Op::Sqrt(..) => "sqrt",
        Op::Sum(..) => "sum",
        Op::MeanAxis0(..) => "mean_axis0",
        Op::Reshape(..) => "reshape",
        Op::MatMul(..) => "matmul",
        Op::Transpose(..) => "transpose",
        Op::BatchMatMul(..) => "batch_matmul",
        Op::Conv2d { .. } => "conv2d",
        Op::LeakyRelu { .. } => "leaky_relu",
        Op::MaxPoolTime { .. } => "max_pool_time",
        Op::CenterLast(..) => "center_last",
        Op::Covariance { .. } => "covariance",
        Op::TraceShrink { .. } => "trace_shrink",
        Op::SymFn { .. } => "sym_fn",
        Op::Congruence { .. } => "congruence",
        Op::Concat { .. } => "concat",
        Op::Gather { .. } => "gather",
        Op::Linear { .. } => "linear",
        Op::CrossEntropy { .. } => "cross_entropy",
        Op::BatchNorm { .. } => "batch_norm",
    }
}

fn bn_geometry(x: &T64, gamma: &T64, beta: &T64) -> Result<(usize, usize, usize)> {
    if x.ndim() < 2 {
        return Err(shape_err(format!("batch norm input {:?}", x.shape())));
    }
    let (outer, c, inner) = split_axis(x.shape(), 1);
    if gamma.shape() != [c] || beta.shape() != [c] {
        return Err(shape_err(format!(
            "batch norm affine {:?}/{:?} for {c} channels",
            gamma.shape(),
            beta.shape()
        )));
    }
    Ok((outer, c, inner))
}

/// Multiplies elementwise where `b` may be a single element.
fn broadcast_mul(a: &T64, b: &T64) -> Result<T64> {
    if a.shape() == b.shape() {
        a.zip_map(b, |x, y| x * y)
    } else if b.numel() == 1 {
        Ok(a.scale(b.data()[0]))
    } else if a.numel() == 1 {
        Ok(b.scale(a.data()[0]))
    } else {
        Err(shape_err(format!("broadcast {:?} with {:?}", a.shape(), b.shape())))
    }
}

/// Sums a gradient down to `shape` when the operand was broadcast.
fn reduce_broadcast(g: &T64, shape: &[usize]) -> T64 {
    if g.shape() == shape {
        g.clone()
    } else {
        let n: usize = shape.iter().product();
        debug_assert_eq!(n, 1);
        Tensor::full(shape, g.sum())
    }
}

fn transpose_slice(a: &[f64], r: usize, c: usize) -> Vec<f64> {
    let mut out = vec![0.0; r * c];
    for i in 0..r {
        for j in 0..c {
            out[j * r + i] = a[i * c + j];
        }
    }
    out
}

fn transpose_last(t: &T64) -> Result<T64> {
    match t.shape() {
        &[_, _] => t.transpose(),
        &[b, r, c] => {
            let mut data = Vec::with_capacity(t.numel());
            for k in 0..b {
                data.extend(transpose_slice(&t.data()[k * r * c..(k + 1) * r * c], r, c));
            }
            Tensor::new(vec![b, c, r], data)
        }
        s => Err(shape_err(format!("transpose of rank-{} tensor", s.len()))),
    }
}

fn bmm(a: &T64, b: &T64) -> Result<T64> {
    let (ba, m, k) = a.dims3()?;
    let (bb, k2, n) = b.dims3()?;
    if ba != bb || k != k2 {
        return Err(shape_err(format!("batch_matmul {:?} by {:?}", a.shape(), b.shape())));
    }
    let mut out = vec![0.0; ba * m * n];
    for q in 0..ba {
        matmul_into(
            &a.data()[q * m * k..(q + 1) * m * k],
            &b.data()[q * k * n..(q + 1) * k * n],
            &mut out[q * m * n..(q + 1) * m * n],
            m,
            k,
            n,
        );
    }
    Tensor::new(vec![ba, m, n], out)
}

fn center_last(t: &T64) -> T64 {
    let m = *t.shape().last().expect("rank >= 1");
    let mut out = t.clone();
    if m == 0 {
        return out;
    }
    for row in out.data_mut().chunks_mut(m) {
        let mean = row.iter().sum::<f64>() / m as f64;
        row.iter_mut().for_each(|v| *v -= mean);
    }
    out
}

struct ConvGeometry {
    b: usize,
    cin: usize,
    h: usize,
    w: usize,
    cout: usize,
    kh: usize,
    kw: usize,
    oh: usize,
    ow: usize,
    spec: Conv2dSpec,
}

impl ConvGeometry {
    fn new(x: &[usize], w: &[usize], spec: Conv2dSpec) -> Result<Self> {
        let (&[b, cin, h, wd], &[cout, cin2, kh, kw]) = (x, w) else {
            return Err(shape_err(format!("conv2d input {x:?} with weight {w:?}")));
        };
        if cin != cin2 {
            return Err(shape_err(format!("conv2d: {cin} input channels vs weight {w:?}")));
        }
        let (sh, sw) = spec.stride;
        let (dh, dw) = spec.dilation;
        if sh == 0 || sw == 0 || dh == 0 || dw == 0 || kh == 0 || kw == 0 {
            return Err(shape_err("conv2d with zero stride, dilation or kernel"));
        }
        let span_h = dh * (kh - 1) + 1;
        let span_w = dw * (kw - 1) + 1;
        if span_h > h || span_w > wd {
            return Err(shape_err(format!(
                "conv2d kernel span {span_h}x{span_w} exceeds input {h}x{wd}"
            )));
        }
        Ok(Self {
            b,
            cin,
            h,
            w: wd,
            cout,
            kh,
            kw,
            oh: (h - span_h) / sh + 1,
            ow: (wd - span_w) / sw + 1,
            spec,
        })
    }

    fn out_len(&self) -> usize {
        self.b * self.cout * self.oh * self.ow
    }

    #[inline]
    fn x_at(&self, b: usize, ci: usize, ih: usize) -> usize {
        ((b * self.cin + ci) * self.h + ih) * self.w
    }

    #[inline]
    fn w_at(&self, co: usize, ci: usize, kh: usize, kw: usize) -> usize {
        ((co * self.cin + ci) * self.kh + kh) * self.kw + kw
    }

    #[inline]
    fn o_at(&self, b: usize, co: usize, oh: usize) -> usize {
        ((b * self.cout + co) * self.oh + oh) * self.ow
    }

    /// Visits every (input row, output row, weight index, column offset) tuple.
    fn for_each_tap(&self, mut f: impl FnMut(usize, usize, usize, usize)) {
        let (sh, sw) = self.spec.stride;
        let (dh, dw) = self.spec.dilation;
        debug_assert!(sw >= 1);
        for b in 0..self.b {
            for co in 0..self.cout {
                for ci in 0..self.cin {
                    for kh in 0..self.kh {
                        for oh in 0..self.oh {
                            let ih = oh * sh + kh * dh;
                            let xrow = self.x_at(b, ci, ih);
                            let orow = self.o_at(b, co, oh);
                            for kw in 0..self.kw {
                                f(xrow + kw * dw, orow, self.w_at(co, ci, kh, kw), sw);
                            }
                        }
                    }
                }
            }
        }
    }

    fn forward(&self, x: &[f64], w: &[f64], out: &mut [f64]) {
        let ow = self.ow;
        self.for_each_tap(|xs, os, wi, sw| {
            let wv = w[wi];
            let orow = &mut out[os..os + ow];
            for (o, val) in orow.iter_mut().enumerate() {
                *val += wv * x[xs + o * sw];
            }
        });
    }

    fn backward_input(&self, g: &[f64], w: &[f64], gx: &mut [f64]) {
        let ow = self.ow;
        self.for_each_tap(|xs, os, wi, sw| {
            let wv = w[wi];
            for o in 0..ow {
                gx[xs + o * sw] += wv * g[os + o];
            }
        });
    }

    fn backward_weight(&self, g: &[f64], x: &[f64], gw: &mut [f64]) {
        let ow = self.ow;
        self.for_each_tap(|xs, os, wi, sw| {
            let mut s = 0.0;
            for o in 0..ow {
                s += x[xs + o * sw] * g[os + o];
            }
            gw[wi] += s;
        });
    }
}
