//! Tape-based reverse-mode differentiation.
//!
//! A [`Graph`] records every op in execution order, so the node list is
//! already topologically sorted and [`Graph::backward`] is a single reverse
//! sweep. Parameters enter the tape by reference; nothing is copied until an
//! op produces a new value.

use std::borrow::Cow;
use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::array::Tensor;
use super::params::{ParamGrads, ParamId, ParamStore};
use super::scalar::{gemm, lit, Float};
use crate::error::{Error, Result};

/// Additive surrogate for minus infinity used by masked softmax.
pub const MASK_NEG: f64 = -1e9;

const LN_EPS: f64 = 1e-5;

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Binary keep-mask for [`Graph::softmax_masked`]; `true` means the position
/// takes part in the softmax. Broadcasts against the logits with numpy rules
/// (right-aligned, size-1 dims stretch).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Mask {
    shape: Vec<usize>,
    keep: Vec<bool>,
}

impl Mask {
    pub fn new(shape: Vec<usize>, keep: Vec<bool>) -> Result<Self> {
        if shape.iter().product::<usize>() != keep.len() {
            return Err(Error::dim(
                "mask",
                format!("shape {:?} vs {} entries", shape, keep.len()),
            ));
        }
        Ok(Mask { shape, keep })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn keep(&self) -> &[bool] {
        &self.keep
    }

    /// Materializes the mask at `target` shape.
    pub fn expand(&self, target: &[usize]) -> Result<Vec<bool>> {
        if self.shape.len() > target.len() {
            return Err(self.broadcast_err(target));
        }
        let offset = target.len() - self.shape.len();
        let mut strides = vec![0usize; target.len()];
        let mut stride = 1;
        for (i, &d) in self.shape.iter().enumerate().rev() {
            let t = target[offset + i];
            if d == t {
                strides[offset + i] = stride;
            } else if d != 1 {
                return Err(self.broadcast_err(target));
            }
            stride *= d;
        }
        let total: usize = target.iter().product();
        if self.shape == target {
            return Ok(self.keep.clone());
        }
        let mut out = Vec::with_capacity(total);
        let mut idx = vec![0usize; target.len()];
        for _ in 0..total {
            let src: usize = idx.iter().zip(&strides).map(|(i, s)| i * s).sum();
            out.push(self.keep[src]);
            for ax in (0..target.len()).rev() {
                idx[ax] += 1;
                if idx[ax] < target[ax] {
                    break;
                }
                idx[ax] = 0;
            }
        }
        Ok(out)
    }

    fn broadcast_err(&self, target: &[usize]) -> Error {
        Error::dim(
            "softmax_masked",
            format!("mask {:?} not broadcastable to {:?}", self.shape, target),
        )
    }
}

/// What to do with a softmax row whose every entry is masked.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EmptyRows {
    /// Fail with [`Error::DegenerateMask`].
    Error,
    /// Emit an all-zero probability row.
    Zero,
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    MatMul {
        a: Var,
        b: Var,
        m: usize,
        k: usize,
        n: usize,
        trans_b: bool,
    },
    Bmm {
        a: Var,
        b: Var,
        batch: usize,
        m: usize,
        k: usize,
        n: usize,
        trans_b: bool,
    },
    Add(Var, Var),
    AddBias {
        x: Var,
        bias: Var,
    },
    Mul(Var, Var),
    Scale {
        x: Var,
        factor: T,
    },
    ScaleRows {
        x: Var,
        factors: Vec<T>,
    },
    Relu(Var),
    Sigmoid(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        rstd: Vec<T>,
    },
    Embedding {
        table: Var,
        ids: Vec<usize>,
    },
    Softmax {
        x: Var,
        outer: usize,
        len: usize,
        inner: usize,
    },
    LogSoftmax(Var),
    Dropout {
        x: Var,
        keep: Vec<T>,
    },
    Permute0213 {
        x: Var,
        dims: [usize; 4],
    },
    Reshape(Var),
    Nll {
        logp: Var,
        targets: Vec<usize>,
        weights: Vec<T>,
        smoothing: T,
        denom: T,
    },
    Bce {
        logits: Var,
        targets: Vec<T>,
        weights: Vec<T>,
        denom: T,
    },
    Sum(Var),
}

struct Node<'p, T: Float> {
    value: Cow<'p, Tensor<T>>,
    op: Op<T>,
    requires_grad: bool,
}

/// Recording of a forward computation.
pub struct Graph<'p, T: Float> {
    store: Option<&'p ParamStore<T>>,
    nodes: Vec<Node<'p, T>>,
    param_vars: HashMap<ParamId, Var>,
    train: bool,
    seed: u64,
    dropout_calls: u64,
}

impl<'p, T: Float> Default for Graph<'p, T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<'p, T: Float> Graph<'p, T> {
    /// Empty graph in evaluation mode with no parameter store.
    pub fn new() -> Self {
        Graph {
            store: None,
            nodes: Vec::new(),
            param_vars: HashMap::new(),
            train: false,
            seed: 0,
            dropout_calls: 0,
        }
    }

    pub fn with_params(store: &'p ParamStore<T>) -> Self {
        Graph {
            store: Some(store),
            ..Self::new()
        }
    }

    /// Switches to training mode: dropout becomes active and draws from a
    /// counter-based stream keyed by `seed`.
    pub fn training(mut self, seed: u64) -> Self {
        self.train = true;
        self.seed = seed;
        self
    }

    pub fn is_training(&self) -> bool {
        self.train
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

    pub fn store(&self) -> Result<&'p ParamStore<T>> {
        self.store
            .ok_or_else(|| Error::Contract("graph has no parameter store".into()))
    }

    /// Places a parameter on the tape (once per graph).
    pub fn param(&mut self, id: ParamId) -> Result<Var> {
        if let Some(&v) = self.param_vars.get(&id) {
            return Ok(v);
        }
        let store = self.store()?;
        let v = Var(self.nodes.len());
        self.nodes.push(Node {
            value: Cow::Borrowed(store.get(id)),
            op: Op::Leaf,
            requires_grad: true,
        });
        self.param_vars.insert(id, v);
        Ok(v)
    }

    pub fn param_named(&mut self, name: &str) -> Result<Var> {
        let id = self.store()?.id(name)?;
        self.param(id)
    }

    /// Constant input; no gradient is tracked.
    pub fn input(&mut self, t: Tensor<T>) -> Var {
        self.leaf_node(t, false)
    }

    /// Differentiable leaf that is not a stored parameter.
    pub fn leaf(&mut self, t: Tensor<T>) -> Var {
        self.leaf_node(t, true)
    }

    fn leaf_node(&mut self, t: Tensor<T>, requires_grad: bool) -> Var {
        let v = Var(self.nodes.len());
        self.nodes.push(Node {
            value: Cow::Owned(t),
            op: Op::Leaf,
            requires_grad,
        });
        v
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, name: &'static str, value: Tensor<T>, op: Op<T>, rg: bool) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite { op: name });
        }
        let v = Var(self.nodes.len());
        self.nodes.push(Node {
            value: Cow::Owned(value),
            op,
            requires_grad: rg,
        });
        Ok(v)
    }

    // ----- linear algebra -------------------------------------------------

    /// `a[..., k] · b[k, n] -> [..., n]`; leading dims of `a` are flattened.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, false)
    }

    /// `a[..., k] · bᵀ` with `b` stored as `[n, k]`.
    pub fn matmul_bt(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, true)
    }

    fn matmul_impl(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.is_empty() || sb.len() != 2 {
            return Err(Error::dim("matmul", format!("{sa:?} x {sb:?}")));
        }
        let (k, n) = if trans_b { (sb[1], sb[0]) } else { (sb[0], sb[1]) };
        if sa[sa.len() - 1] != k {
            return Err(Error::dim("matmul", format!("{sa:?} x {sb:?} (trans_b={trans_b})")));
        }
        let m = self.value(a).numel() / k.max(1);
        let mut out = vec![T::zero(); m * n];
        gemm(
            self.value(a).data(),
            false,
            self.value(b).data(),
            trans_b,
            &mut out,
            m,
            k,
            n,
            false,
        );
        let mut shape = sa[..sa.len() - 1].to_vec();
        shape.push(n);
        let rg = self.rg(a) || self.rg(b);
        self.push(
            "matmul",
            Tensor::new(shape, out)?,
            Op::MatMul {
                a,
                b,
                m,
                k,
                n,
                trans_b,
            },
            rg,
        )
    }

    /// Batched product over identical leading dims: `a[.., m, k] · b[.., k, n]`,
    /// or `a · bᵀ` with `b[.., n, k]` when `trans_b`.
    pub fn bmm(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let err = || Error::dim("bmm", format!("{sa:?} x {sb:?} (trans_b={trans_b})"));
        if sa.len() < 3 || sa.len() != sb.len() || sa[..sa.len() - 2] != sb[..sb.len() - 2] {
            return Err(err());
        }
        let r = sa.len();
        let (m, k) = (sa[r - 2], sa[r - 1]);
        let (kb, n) = if trans_b {
            (sb[r - 1], sb[r - 2])
        } else {
            (sb[r - 2], sb[r - 1])
        };
        if k != kb {
            return Err(err());
        }
        let batch: usize = sa[..r - 2].iter().product();
        let mut out = vec![T::zero(); batch * m * n];
        {
            let (da, db) = (self.value(a).data(), self.value(b).data());
            for i in 0..batch {
                gemm(
                    &da[i * m * k..(i + 1) * m * k],
                    false,
                    &db[i * k * n..(i + 1) * k * n],
                    trans_b,
                    &mut out[i * m * n..(i + 1) * m * n],
                    m,
                    k,
                    n,
                    false,
                );
            }
        }
        let mut shape = sa[..r - 2].to_vec();
        shape.extend([m, n]);
        let rg = self.rg(a) || self.rg(b);
        self.push(
            "bmm",
            Tensor::new(shape, out)?,
            Op::Bmm {
                a,
                b,
                batch,
                m,
                k,
                n,
                trans_b,
            },
            rg,
        )
    }

    // ----- elementwise ----------------------------------------------------

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::dim(
                op,
                format!("{:?} vs {:?}", self.shape(a), self.shape(b)),
            ));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let data: Vec<T> = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| x + y)
            .collect();
        let t = Tensor::new(self.shape(a).to_vec(), data)?;
        let rg = self.rg(a) || self.rg(b);
        self.push("add", t, Op::Add(a, b), rg)
    }

    /// `x[..., n] + bias[n]`.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let n = self.value(x).last_dim();
        if self.shape(bias) != [n] {
            return Err(Error::dim(
                "add_bias",
                format!("{:?} + {:?}", self.shape(x), self.shape(bias)),
            ));
        }
        let b = self.value(bias).data();
        let data: Vec<T> = self
            .value(x)
            .data()
            .chunks_exact(n)
            .flat_map(|row| row.iter().zip(b).map(|(&v, &w)| v + w))
            .collect();
        let t = Tensor::new(self.shape(x).to_vec(), data)?;
        let rg = self.rg(x) || self.rg(bias);
        self.push("add_bias", t, Op::AddBias { x, bias }, rg)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let data: Vec<T> = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| x * y)
            .collect();
        let t = Tensor::new(self.shape(a).to_vec(), data)?;
        let rg = self.rg(a) || self.rg(b);
        self.push("mul", t, Op::Mul(a, b), rg)
    }

    pub fn scale(&mut self, x: Var, factor: T) -> Result<Var> {
        let data = self.value(x).data().iter().map(|&v| v * factor).collect();
        let t = Tensor::new(self.shape(x).to_vec(), data)?;
        let rg = self.rg(x);
        self.push("scale", t, Op::Scale { x, factor }, rg)
    }

    /// Multiplies each slice along the first axis by a constant factor.
    pub fn scale_rows(&mut self, x: Var, factors: Vec<T>) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.first() != Some(&factors.len()) {
            return Err(Error::dim(
                "scale_rows",
                format!("{:?} with {} factors", shape, factors.len()),
            ));
        }
        let row = self.value(x).numel() / factors.len().max(1);
        let data = self
            .value(x)
            .data()
            .chunks_exact(row.max(1))
            .zip(&factors)
            .flat_map(|(r, &f)| r.iter().map(move |&v| v * f))
            .collect();
        let t = Tensor::new(shape, data)?;
        let rg = self.rg(x);
        self.push("scale_rows", t, Op::ScaleRows { x, factors }, rg)
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let data = self
            .value(x)
            .data()
            .iter()
            .map(|&v| if v > T::zero() { v } else { T::zero() })
            .collect();
        let t = Tensor::new(self.shape(x).to_vec(), data)?;
        let rg = self.rg(x);
        self.push("relu", t, Op::Relu(x), rg)
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        let data = self.value(x).data().iter().map(|&v| sigmoid(v)).collect();
        let t = Tensor::new(self.shape(x).to_vec(), data)?;
        let rg = self.rg(x);
        self.push("sigmoid", t, Op::Sigmoid(x), rg)
    }

    /// Layer normalization over the trailing dimension.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let n = self.value(x).last_dim();
        if self.shape(gamma) != [n] || self.shape(beta) != [n] {
            return Err(Error::dim(
                "layer_norm",
                format!(
                    "{:?} with gamma {:?} beta {:?}",
                    self.shape(x),
                    self.shape(gamma),
                    self.shape(beta)
                ),
            ));
        }
        let eps: T = lit(LN_EPS);
        let nf: T = lit(n as f64);
        let (g, b) = (self.value(gamma).data(), self.value(beta).data());
        let xs = self.value(x).data();
        let rows = xs.len() / n.max(1);
        let mut out = Vec::with_capacity(xs.len());
        let mut xhat = Vec::with_capacity(xs.len());
        let mut rstd = Vec::with_capacity(rows);
        for row in xs.chunks_exact(n) {
            let mean = row.iter().copied().sum::<T>() / nf;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / nf;
            let r = T::one() / (var + eps).sqrt();
            rstd.push(r);
            for j in 0..n {
                let h = (row[j] - mean) * r;
                xhat.push(h);
                out.push(h * g[j] + b[j]);
            }
        }
        let t = Tensor::new(self.shape(x).to_vec(), out)?;
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        self.push(
            "layer_norm",
            t,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
            rg,
        )
    }

    /// Row gather: `table[V, d]` indexed by `ids`, output `shape ++ [d]`.
    pub fn embedding(&mut self, table: Var, ids: &[usize], shape: &[usize]) -> Result<Var> {
        let ts = self.shape(table).to_vec();
        if ts.len() != 2 || shape.iter().product::<usize>() != ids.len() {
            return Err(Error::dim(
                "embedding",
                format!("table {:?}, ids {} for shape {:?}", ts, ids.len(), shape),
            ));
        }
        let (vocab, d) = (ts[0], ts[1]);
        if let Some(&bad) = ids.iter().find(|&&i| i >= vocab) {
            return Err(Error::Vocab(format!(
                "id {bad} out of range for vocabulary of {vocab}"
            )));
        }
        let tab = self.value(table).data();
        let mut out = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            out.extend_from_slice(&tab[i * d..(i + 1) * d]);
        }
        let mut oshape = shape.to_vec();
        oshape.push(d);
        let t = Tensor::new(oshape, out)?;
        let rg = self.rg(table);
        self.push(
            "embedding",
            t,
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
            rg,
        )
    }

    /// Softmax along `axis` restricted to positions where `mask` keeps.
    ///
    /// Masked logits get an additive [`MASK_NEG`] before normalization and are
    /// then written as exact zeros, so masked probabilities are exactly 0.
    pub fn softmax_masked(
        &mut self,
        x: Var,
        mask: Option<&Mask>,
        axis: usize,
        empty: EmptyRows,
    ) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(Error::dim(
                "softmax_masked",
                format!("axis {axis} for shape {shape:?}"),
            ));
        }
        let keep = match mask {
            Some(m) => Some(m.expand(&shape)?),
            None => None,
        };
        let outer: usize = shape[..axis].iter().product();
        let len = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let xs = self.value(x).data();
        let mut out = vec![T::zero(); xs.len()];
        let neg: T = lit(MASK_NEG);
        let mut buf = vec![T::zero(); len];
        for o in 0..outer {
            for i in 0..inner {
                let base = o * len * inner + i;
                let kept = |j: usize| keep.as_ref().is_none_or(|k| k[base + j * inner]);
                if !(0..len).any(kept) {
                    match empty {
                        EmptyRows::Zero => continue,
                        EmptyRows::Error => {
                            return Err(Error::DegenerateMask { row: o * inner + i })
                        }
                    }
                }
                let mut max = T::neg_infinity();
                for (j, b) in buf.iter_mut().enumerate() {
                    let v = xs[base + j * inner] + if kept(j) { T::zero() } else { neg };
                    *b = v;
                    if v > max {
                        max = v;
                    }
                }
                let mut sum = T::zero();
                for b in buf.iter_mut() {
                    *b = (*b - max).exp();
                    sum += *b;
                }
                for (j, b) in buf.iter().enumerate() {
                    out[base + j * inner] = if kept(j) { *b / sum } else { T::zero() };
                }
            }
        }
        let t = Tensor::new(shape, out)?;
        let rg = self.rg(x);
        self.push(
            "softmax_masked",
            t,
            Op::Softmax {
                x,
                outer,
                len,
                inner,
            },
            rg,
        )
    }

    /// Unmasked softmax along `axis`.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.softmax_masked(x, None, axis, EmptyRows::Error)
    }

    /// Log-softmax over the trailing dimension.
    pub fn log_softmax(&mut self, x: Var) -> Result<Var> {
        let n = self.value(x).last_dim();
        let mut out = Vec::with_capacity(self.value(x).numel());
        for row in self.value(x).data().chunks_exact(n) {
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let lse = row.iter().map(|&v| (v - max).exp()).sum::<T>().ln() + max;
            out.extend(row.iter().map(|&v| v - lse));
        }
        let t = Tensor::new(self.shape(x).to_vec(), out)?;
        let rg = self.rg(x);
        self.push("log_softmax", t, Op::LogSoftmax(x), rg)
    }

    /// Inverted dropout; identity outside training mode or for `p == 0`.
    pub fn dropout(&mut self, x: Var, p: f64) -> Result<Var> {
        if !self.train || p <= 0.0 {
            return Ok(x);
        }
        if p >= 1.0 {
            return Err(Error::Contract(format!("dropout rate {p} must be < 1")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(self.dropout_calls);
        self.dropout_calls += 1;
        let scale: T = lit(1.0 / (1.0 - p));
        let keep: Vec<T> = (0..self.value(x).numel())
            .map(|_| {
                if rng.random::<f64>() >= p {
                    scale
                } else {
                    T::zero()
                }
            })
            .collect();
        let data = self
            .value(x)
            .data()
            .iter()
            .zip(&keep)
            .map(|(&v, &k)| v * k)
            .collect();
        let t = Tensor::new(self.shape(x).to_vec(), data)?;
        let rg = self.rg(x);
        self.push("dropout", t, Op::Dropout { x, keep }, rg)
    }

    // ----- layout ---------------------------------------------------------

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x).clone().reshaped(shape.to_vec())?;
        let rg = self.rg(x);
        self.push("reshape", t, Op::Reshape(x), rg)
    }

    /// `[a, b, c, d] -> [a, c, b, d]`.
    pub fn permute_0213(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 4 {
            return Err(Error::dim("permute_0213", format!("{s:?}")));
        }
        let dims = [s[0], s[1], s[2], s[3]];
        let out = permute_0213_data(self.value(x).data(), dims);
        let t = Tensor::new(vec![s[0], s[2], s[1], s[3]], out)?;
        let rg = self.rg(x);
        self.push("permute_0213", t, Op::Permute0213 { x, dims }, rg)
    }

    // ----- reductions and losses -------------------------------------------

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).data().iter().copied().sum();
        let rg = self.rg(x);
        self.push("sum", Tensor::scalar(s), Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let n = self.value(x).numel().max(1);
        let s = self.sum(x)?;
        self.scale(s, lit(1.0 / n as f64))
    }

    /// Weighted negative log-likelihood with optional label smoothing.
    ///
    /// `logp` is `[..., V]` log-probabilities with one row per target. Each row
    /// contributes `w · ((1-ε)·(-logp[y]) + ε·mean_v(-logp[v]))`; the total is
    /// divided by `denom`.
    pub fn nll_loss(
        &mut self,
        logp: Var,
        targets: &[usize],
        weights: &[T],
        smoothing: f64,
        denom: T,
    ) -> Result<Var> {
        let v = self.value(logp).last_dim();
        let rows = self.value(logp).numel() / v.max(1);
        if targets.len() != rows || weights.len() != rows {
            return Err(Error::dim(
                "nll_loss",
                format!(
                    "{} rows vs {} targets / {} weights",
                    rows,
                    targets.len(),
                    weights.len()
                ),
            ));
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= v) {
            return Err(Error::Vocab(format!("target {bad} >= vocab {v}")));
        }
        let eps: T = lit(smoothing);
        let vf: T = lit(v as f64);
        let mut total = T::zero();
        for (r, row) in self.value(logp).data().chunks_exact(v).enumerate() {
            if weights[r] == T::zero() {
                continue;
            }
            let nll = -row[targets[r]];
            let smooth = if smoothing > 0.0 {
                -row.iter().copied().sum::<T>() / vf
            } else {
                T::zero()
            };
            total += weights[r] * ((T::one() - eps) * nll + eps * smooth);
        }
        let rg = self.rg(logp);
        self.push(
            "nll_loss",
            Tensor::scalar(total / denom),
            Op::Nll {
                logp,
                targets: targets.to_vec(),
                weights: weights.to_vec(),
                smoothing: eps,
                denom,
            },
            rg,
        )
    }

    /// Weighted binary cross-entropy on logits (sigmoid folded in for
    /// stability), summed and divided by `denom`.
    pub fn bce_with_logits(
        &mut self,
        logits: Var,
        targets: &[T],
        weights: &[T],
        denom: T,
    ) -> Result<Var> {
        let n = self.value(logits).numel();
        if targets.len() != n || weights.len() != n {
            return Err(Error::dim(
                "bce_with_logits",
                format!("{} logits vs {} targets", n, targets.len()),
            ));
        }
        let mut total = T::zero();
        for ((&z, &t), &w) in self.value(logits).data().iter().zip(targets).zip(weights) {
            if w == T::zero() {
                continue;
            }
            let l = z.max(T::zero()) - z * t + (T::one() + (-z.abs()).exp()).ln();
            total += w * l;
        }
        let rg = self.rg(logits);
        self.push(
            "bce_with_logits",
            Tensor::scalar(total / denom),
            Op::Bce {
                logits,
                targets: targets.to_vec(),
                weights: weights.to_vec(),
                denom,
            },
            rg,
        )
    }

    // ----- backward -----------------------------------------------------------

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if self.value(loss).numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                grads[i] = None;
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(i, &g, &mut grads);
        }
        Ok(Gradients {
            grads,
            param_vars: self.param_vars.clone(),
        })
    }

    fn acc<'a>(&self, grads: &'a mut [Option<Vec<T>>], v: Var) -> Option<&'a mut [T]> {
        if !self.rg(v) {
            return None;
        }
        let n = self.value(v).numel();
        Some(grads[v.0].get_or_insert_with(|| vec![T::zero(); n]))
    }

    fn backprop_node(&self, i: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let out = self.nodes[i].value.data();
        match &self.nodes[i].op {
            Op::Leaf => {}
            &Op::MatMul {
                a,
                b,
                m,
                k,
                n,
                trans_b,
            } => {
                if let Some(da) = self.acc(grads, a) {
                    gemm(g, false, self.value(b).data(), !trans_b, da, m, n, k, true);
                }
                if let Some(db) = self.acc(grads, b) {
                    if trans_b {
                        gemm(g, true, self.value(a).data(), false, db, n, m, k, true);
                    } else {
                        gemm(self.value(a).data(), true, g, false, db, k, m, n, true);
                    }
                }
            }
            &Op::Bmm {
                a,
                b,
                batch,
                m,
                k,
                n,
                trans_b,
            } => {
                let (va, vb) = (self.value(a).data(), self.value(b).data());
                if let Some(da) = self.acc(grads, a) {
                    for s in 0..batch {
                        let gs = &g[s * m * n..(s + 1) * m * n];
                        let bs = &vb[s * k * n..(s + 1) * k * n];
                        let das = &mut da[s * m * k..(s + 1) * m * k];
                        // op(b) is [k, n]; da = g · op(b)ᵀ
                        gemm(gs, false, bs, !trans_b, das, m, n, k, true);
                    }
                }
                if let Some(db) = self.acc(grads, b) {
                    for s in 0..batch {
                        let gs = &g[s * m * n..(s + 1) * m * n];
                        let as_ = &va[s * m * k..(s + 1) * m * k];
                        let dbs = &mut db[s * k * n..(s + 1) * k * n];
                        if trans_b {
                            gemm(gs, true, as_, false, dbs, n, m, k, true);
                        } else {
                            gemm(as_, true, gs, false, dbs, k, m, n, true);
                        }
                    }
                }
            }
            &Op::Add(a, b) => {
                for v in [a, b] {
                    if let Some(d) = self.acc(grads, v) {
                        add_into(d, g);
                    }
                }
            }
            &Op::AddBias { x, bias } => {
                if let Some(dx) = self.acc(grads, x) {
                    add_into(dx, g);
                }
                if let Some(db) = self.acc(grads, bias) {
                    let n = db.len();
                    for row in g.chunks_exact(n) {
                        add_into(db, row);
                    }
                }
            }
            &Op::Mul(a, b) => {
                let (va, vb) = (self.value(a).data(), self.value(b).data());
                if let Some(da) = self.acc(grads, a) {
                    for ((d, &gi), &bi) in da.iter_mut().zip(g).zip(vb) {
                        *d += gi * bi;
                    }
                }
                if let Some(db) = self.acc(grads, b) {
                    for ((d, &gi), &ai) in db.iter_mut().zip(g).zip(va) {
                        *d += gi * ai;
                    }
                }
            }
            &Op::Scale { x, factor } => {
                if let Some(dx) = self.acc(grads, x) {
                    for (d, &gi) in dx.iter_mut().zip(g) {
                        *d += gi * factor;
                    }
                }
            }
            Op::ScaleRows { x, factors } => {
                if let Some(dx) = self.acc(grads, *x) {
                    let row = dx.len() / factors.len().max(1);
                    for ((dr, gr), &f) in dx
                        .chunks_exact_mut(row.max(1))
                        .zip(g.chunks_exact(row.max(1)))
                        .zip(factors)
                    {
                        for (d, &gi) in dr.iter_mut().zip(gr) {
                            *d += gi * f;
                        }
                    }
                }
            }
            &Op::Relu(x) => {
                if let Some(dx) = self.acc(grads, x) {
                    for ((d, &gi), &y) in dx.iter_mut().zip(g).zip(out) {
                        if y > T::zero() {
                            *d += gi;
                        }
                    }
                }
            }
            &Op::Sigmoid(x) => {
                if let Some(dx) = self.acc(grads, x) {
                    for ((d, &gi), &y) in dx.iter_mut().zip(g).zip(out) {
                        *d += gi * y * (T::one() - y);
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
                let n = self.value(*gamma).numel();
                let gam = self.value(*gamma).data();
                if let Some(dg) = self.acc(grads, *gamma) {
                    for (gr, hr) in g.chunks_exact(n).zip(xhat.chunks_exact(n)) {
                        for j in 0..n {
                            dg[j] += gr[j] * hr[j];
                        }
                    }
                }
                if let Some(db) = self.acc(grads, *beta) {
                    for gr in g.chunks_exact(n) {
                        add_into(db, gr);
                    }
                }
                if let Some(dx) = self.acc(grads, *x) {
                    let nf: T = lit(n as f64);
                    let mut dxhat = vec![T::zero(); n];
                    for (r, ((dr, gr), hr)) in dx
                        .chunks_exact_mut(n)
                        .zip(g.chunks_exact(n))
                        .zip(xhat.chunks_exact(n))
                        .enumerate()
                    {
                        let mut s1 = T::zero();
                        let mut s2 = T::zero();
                        for j in 0..n {
                            dxhat[j] = gr[j] * gam[j];
                            s1 += dxhat[j];
                            s2 += dxhat[j] * hr[j];
                        }
                        let c = rstd[r] / nf;
                        for j in 0..n {
                            dr[j] += c * (nf * dxhat[j] - s1 - hr[j] * s2);
                        }
                    }
                }
            }
            Op::Embedding { table, ids } => {
                if let Some(dt) = self.acc(grads, *table) {
                    let d = self.value(*table).last_dim();
                    for (r, &id) in ids.iter().enumerate() {
                        add_into(&mut dt[id * d..(id + 1) * d], &g[r * d..(r + 1) * d]);
                    }
                }
            }
            &Op::Softmax {
                x,
                outer,
                len,
                inner,
            } => {
                if let Some(dx) = self.acc(grads, x) {
                    for o in 0..outer {
                        for i in 0..inner {
                            let base = o * len * inner + i;
                            let mut dot = T::zero();
                            for j in 0..len {
                                let p = base + j * inner;
                                dot += g[p] * out[p];
                            }
                            for j in 0..len {
                                let p = base + j * inner;
                                dx[p] += out[p] * (g[p] - dot);
                            }
                        }
                    }
                }
            }
            &Op::LogSoftmax(x) => {
                if let Some(dx) = self.acc(grads, x) {
                    let n = self.value(x).last_dim();
                    for ((dr, gr), yr) in dx
                        .chunks_exact_mut(n)
                        .zip(g.chunks_exact(n))
                        .zip(out.chunks_exact(n))
                    {
                        let s: T = gr.iter().copied().sum();
                        for j in 0..n {
                            dr[j] += gr[j] - yr[j].exp() * s;
                        }
                    }
                }
            }
            Op::Dropout { x, keep } => {
                if let Some(dx) = self.acc(grads, *x) {
                    for ((d, &gi), &k) in dx.iter_mut().zip(g).zip(keep) {
                        *d += gi * k;
                    }
                }
            }
            &Op::Permute0213 { x, dims } => {
                if let Some(dx) = self.acc(grads, x) {
                    let back = permute_0213_data(g, [dims[0], dims[2], dims[1], dims[3]]);
                    add_into(dx, &back);
                }
            }
            &Op::Reshape(x) => {
                if let Some(dx) = self.acc(grads, x) {
                    add_into(dx, g);
                }
            }
            Op::Nll {
                logp,
                targets,
                weights,
                smoothing,
                denom,
            } => {
                if let Some(dl) = self.acc(grads, *logp) {
                    let v = dl.len() / targets.len().max(1);
                    let vf: T = lit(v as f64);
                    for (r, row) in dl.chunks_exact_mut(v).enumerate() {
                        if weights[r] == T::zero() {
                            continue;
                        }
                        let c = -g[0] * weights[r] / *denom;
                        if *smoothing > T::zero() {
                            let u = c * *smoothing / vf;
                            row.iter_mut().for_each(|d| *d += u);
                        }
                        row[targets[r]] += c * (T::one() - *smoothing);
                    }
                }
            }
            Op::Bce {
                logits,
                targets,
                weights,
                denom,
            } => {
                let z = self.value(*logits).data();
                if let Some(dz) = self.acc(grads, *logits) {
                    for i in 0..dz.len() {
                        if weights[i] == T::zero() {
                            continue;
                        }
                        dz[i] += g[0] * weights[i] * (sigmoid(z[i]) - targets[i]) / *denom;
                    }
                }
            }
            &Op::Sum(x) => {
                if let Some(dx) = self.acc(grads, x) {
                    dx.iter_mut().for_each(|d| *d += g[0]);
                }
            }
        }
    }
}

/// Result of [`Graph::backward`].
pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
    param_vars: HashMap<ParamId, Var>,
}

impl<T: Float> Gradients<T> {
    /// Gradient of a differentiable leaf (parameter or [`Graph::leaf`]).
    pub fn wrt(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn param(&self, id: ParamId) -> Option<&[T]> {
        self.param_vars.get(&id).and_then(|&v| self.wrt(v))
    }

    /// Moves parameter gradients out into a store-aligned table.
    pub fn into_param_grads(mut self, num_params: usize) -> ParamGrads<T> {
        let mut out = ParamGrads::new(num_params);
        for (&id, &v) in &self.param_vars {
            if let Some(g) = self.grads[v.0].take() {
                out.set(id, g);
            }
        }
        out
    }
}

#[inline]
fn sigmoid<T: Float>(v: T) -> T {
    if v >= T::zero() {
        T::one() / (T::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::one() + e)
    }
}

fn add_into<T: Float>(dst: &mut [T], src: &[T]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

fn permute_0213_data<T: Float>(x: &[T], [a, b, c, d]: [usize; 4]) -> Vec<T> {
    let mut out = vec![T::zero(); x.len()];
    for i in 0..a {
        for j in 0..b {
            for k in 0..c {
                let src = ((i * b + j) * c + k) * d;
                let dst = ((i * c + k) * b + j) * d;
                out[dst..dst + d].copy_from_slice(&x[src..src + d]);
            }
        }
    }
    out
}
