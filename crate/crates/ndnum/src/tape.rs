//! Wengert-list reverse-mode differentiation.
//!
//! Every primitive appends one node holding its output value. Nodes are
//! appended in evaluation order, so walking the list backwards is a valid
//! reverse topological order.

use std::collections::HashSet;

use crate::error::{NdError, Result};
use crate::scalar::{fmt_shape, Scalar};
use crate::tensor::Tensor;

pub const LAYERNORM_EPS: f64 = 1e-5;

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
        trans_b: bool,
    },
    BatchMatMul {
        a: Var,
        b: Var,
        trans_b: bool,
    },
    Add {
        a: Var,
        b: Var,
    },
    AddRow {
        a: Var,
        bias: Var,
    },
    Mul {
        a: Var,
        b: Var,
    },
    Scale {
        a: Var,
        c: T,
    },
    Softmax {
        a: Var,
    },
    CausalMask {
        a: Var,
    },
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        rstd: Vec<T>,
    },
    Gelu {
        a: Var,
    },
    Embedding {
        table: Var,
        ids: Vec<usize>,
    },
    Concat {
        parts: Vec<Var>,
    },
    SliceLast {
        a: Var,
        start: usize,
    },
    Transpose12 {
        a: Var,
    },
    Reshape {
        a: Var,
    },
    GatherRows {
        a: Var,
        rows: Vec<usize>,
    },
    Sum {
        a: Var,
    },
    CrossEntropy {
        logits: Var,
        rows: Vec<usize>,
        targets: Vec<usize>,
        weights: Vec<T>,
        smoothing: T,
        probs: Vec<T>,
    },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Gradients produced by [`Tape::backward`].
///
/// Holds the gradient of every leaf that requires it, plus any intermediate
/// node registered with [`Tape::retain_grad`].
pub struct Grads<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Grads<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Moves a gradient out, leaving `None` behind.
    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

#[derive(Default)]
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    retained: HashSet<usize>,
    consumed: bool,
}

fn dim_err(op: &'static str, detail: String) -> NdError {
    NdError::Dimension { op, detail }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            retained: HashSet::new(),
            consumed: false,
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

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Leaf that receives a gradient.
    pub fn param(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Leaf without gradient.
    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// Copies `v` into a fresh non-differentiable leaf (stop-gradient).
    pub fn detach(&mut self, v: Var) -> Var {
        let t = self.nodes[v.0].value.clone();
        self.constant(t)
    }

    /// Keep the gradient of an intermediate node after `backward`.
    pub fn retain_grad(&mut self, v: Var) {
        self.retained.insert(v.0);
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        let op = if requires_grad { op } else { Op::Leaf };
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

    // ---- primitives -------------------------------------------------------

    /// `a[.., k] · b[k, n]`, or `a[.., k] · b[n, k]ᵀ` when `trans_b`.
    pub fn matmul(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if tb.shape().len() != 2 || ta.shape().is_empty() {
            return Err(dim_err(
                "matmul",
                format!("{} x {}", fmt_shape(ta.shape()), fmt_shape(tb.shape())),
            ));
        }
        let k = ta.last_dim();
        let (bk, n) = if trans_b {
            (tb.shape()[1], tb.shape()[0])
        } else {
            (tb.shape()[0], tb.shape()[1])
        };
        if k != bk {
            return Err(dim_err(
                "matmul",
                format!("{} x {} (trans_b={trans_b})", fmt_shape(ta.shape()), fmt_shape(tb.shape())),
            ));
        }
        let rows = ta.rows();
        let mut out = vec![T::zero(); rows * n];
        let (rsb, csb) = if trans_b { (1, k as isize) } else { (n as isize, 1) };
        unsafe {
            T::gemm(
                rows,
                k,
                n,
                T::one(),
                ta.data().as_ptr(),
                k as isize,
                1,
                tb.data().as_ptr(),
                rsb,
                csb,
                T::zero(),
                out.as_mut_ptr(),
                n as isize,
                1,
            );
        }
        let mut shape = ta.shape().to_vec();
        *shape.last_mut().unwrap() = n;
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::new(shape, out)?, Op::MatMul { a, b, trans_b }, rg))
    }

    /// Batched `a[B, m, k] · b[B, k, n]` (or `b[B, n, k]ᵀ` when `trans_b`).
    pub fn bmm(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (sa, sb) = (ta.shape(), tb.shape());
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] {
            return Err(dim_err("bmm", format!("{} x {}", fmt_shape(sa), fmt_shape(sb))));
        }
        let (batch, m, k) = (sa[0], sa[1], sa[2]);
        let (bk, n) = if trans_b { (sb[2], sb[1]) } else { (sb[1], sb[2]) };
        if k != bk {
            return Err(dim_err(
                "bmm",
                format!("{} x {} (trans_b={trans_b})", fmt_shape(sa), fmt_shape(sb)),
            ));
        }
        let mut out = vec![T::zero(); batch * m * n];
        let (rsb, csb) = if trans_b { (1, k as isize) } else { (n as isize, 1) };
        for i in 0..batch {
            unsafe {
                T::gemm(
                    m,
                    k,
                    n,
                    T::one(),
                    ta.data().as_ptr().add(i * m * k),
                    k as isize,
                    1,
                    tb.data().as_ptr().add(i * k * n),
                    rsb,
                    csb,
                    T::zero(),
                    out.as_mut_ptr().add(i * m * n),
                    n as isize,
                    1,
                );
            }
        }
        let rg = self.rg(&[a, b]);
        Ok(self.push(
            Tensor::new(vec![batch, m, n], out)?,
            Op::BatchMatMul { a, b, trans_b },
            rg,
        ))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(dim_err(
                op,
                format!("{} vs {}", fmt_shape(self.shape(a)), fmt_shape(self.shape(b))),
            ));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let (ta, tb) = (self.value(a), self.value(b));
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| x + y).collect();
        let t = Tensor::new(ta.shape().to_vec(), data)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(t, Op::Add { a, b }, rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let (ta, tb) = (self.value(a), self.value(b));
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| x * y).collect();
        let t = Tensor::new(ta.shape().to_vec(), data)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(t, Op::Mul { a, b }, rg))
    }

    /// Adds a `[C]` vector to every row of `a[.., C]`.
    pub fn add_row(&mut self, a: Var, bias: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(bias));
        let c = ta.last_dim();
        if tb.shape() != [c] {
            return Err(dim_err(
                "add_row",
                format!("{} + {}", fmt_shape(ta.shape()), fmt_shape(tb.shape())),
            ));
        }
        let mut data = ta.data().to_vec();
        for row in data.chunks_exact_mut(c) {
            for (x, &b) in row.iter_mut().zip(tb.data()) {
                *x = *x + b;
            }
        }
        let t = Tensor::new(ta.shape().to_vec(), data)?;
        let rg = self.rg(&[a, bias]);
        Ok(self.push(t, Op::AddRow { a, bias }, rg))
    }

    pub fn scale(&mut self, a: Var, c: T) -> Result<Var> {
        let ta = self.value(a);
        let data = ta.data().iter().map(|&x| x * c).collect();
        let t = Tensor::new(ta.shape().to_vec(), data)?;
        let rg = self.rg(&[a]);
        Ok(self.push(t, Op::Scale { a, c }, rg))
    }

    /// Softmax over the last axis, with max subtraction.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let ta = self.value(a);
        let c = ta.last_dim();
        let mut data = ta.data().to_vec();
        if c > 0 {
            for row in data.chunks_exact_mut(c) {
                softmax_in_place(row);
            }
        }
        let t = Tensor::new(ta.shape().to_vec(), data)?;
        let rg = self.rg(&[a]);
        Ok(self.push(t, Op::Softmax { a }, rg))
    }

    /// Sets entries above the diagonal of each trailing `[S, S]` block to −∞.
    pub fn causal_mask(&mut self, a: Var) -> Result<Var> {
        let ta = self.value(a);
        let s = ta.shape();
        if s.len() < 2 || s[s.len() - 1] != s[s.len() - 2] {
            return Err(dim_err("causal_mask", format!("needs [.., S, S], got {}", fmt_shape(s))));
        }
        let n = s[s.len() - 1];
        let mut data = ta.data().to_vec();
        for block in data.chunks_exact_mut(n * n) {
            for i in 0..n {
                for x in &mut block[i * n + i + 1..(i + 1) * n] {
                    *x = T::neg_infinity();
                }
            }
        }
        let t = Tensor::new(ta.shape().to_vec(), data)?;
        let rg = self.rg(&[a]);
        Ok(self.push(t, Op::CausalMask { a }, rg))
    }

    /// Layer normalization over the last axis with affine gain and bias.
    pub fn layernorm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let tx = self.value(x);
        let c = tx.last_dim();
        if self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return Err(dim_err(
                "layernorm",
                format!(
                    "x {} gamma {} beta {}",
                    fmt_shape(tx.shape()),
                    fmt_shape(self.shape(gamma)),
                    fmt_shape(self.shape(beta))
                ),
            ));
        }
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let eps = T::from_f64_lossy(LAYERNORM_EPS);
        let cn = T::from_usize(c).unwrap();
        let rows = tx.rows();
        let mut out = vec![T::zero(); tx.len()];
        let mut rstd = Vec::with_capacity(rows);
        for (src, dst) in tx.data().chunks_exact(c).zip(out.chunks_exact_mut(c)) {
            let mean = src.iter().fold(T::zero(), |s, &v| s + v) / cn;
            let var = src.iter().fold(T::zero(), |s, &v| s + (v - mean) * (v - mean)) / cn;
            let r = T::one() / (var + eps).sqrt();
            for i in 0..c {
                dst[i] = (src[i] - mean) * r * g[i] + b[i];
            }
            rstd.push(r);
        }
        let t = Tensor::new(tx.shape().to_vec(), out)?;
        let rg = self.rg(&[x, gamma, beta]);
        Ok(self.push(t, Op::LayerNorm { x, gamma, beta, rstd }, rg))
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        let ta = self.value(a);
        let data = ta.data().iter().map(|&x| gelu(x)).collect();
        let t = Tensor::new(ta.shape().to_vec(), data)?;
        let rg = self.rg(&[a]);
        Ok(self.push(t, Op::Gelu { a }, rg))
    }

    /// Gathers rows of `table[V, D]`; output shape is `out_shape ++ [D]`.
    pub fn embedding(&mut self, table: Var, ids: &[usize], out_shape: &[usize]) -> Result<Var> {
        let tt = self.value(table);
        if tt.shape().len() != 2 {
            return Err(dim_err("embedding", format!("table {}", fmt_shape(tt.shape()))));
        }
        let (v, d) = (tt.shape()[0], tt.shape()[1]);
        if out_shape.iter().product::<usize>() != ids.len() {
            return Err(dim_err(
                "embedding",
                format!("{} ids for output {}", ids.len(), fmt_shape(out_shape)),
            ));
        }
        let mut data = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= v {
                return Err(NdError::Index {
                    op: "embedding",
                    index: id,
                    extent: v,
                });
            }
            data.extend_from_slice(tt.row(id));
        }
        let mut shape = out_shape.to_vec();
        shape.push(d);
        let t = Tensor::new(shape, data)?;
        let rg = self.rg(&[table]);
        Ok(self.push(
            t,
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
            rg,
        ))
    }

    /// Concatenates along the last axis; leading axes must agree.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| dim_err("concat", "no inputs".into()))?;
        let lead = self.shape(*first)[..self.shape(*first).len() - 1].to_vec();
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let s = self.shape(p);
            if s.len() != lead.len() + 1 || s[..lead.len()] != lead[..] {
                return Err(dim_err(
                    "concat",
                    format!("{} vs {}", fmt_shape(self.shape(*first)), fmt_shape(s)),
                ));
            }
            widths.push(s[lead.len()]);
        }
        let total: usize = widths.iter().sum();
        let rows: usize = lead.iter().product();
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (&p, &w) in parts.iter().zip(&widths) {
                data.extend_from_slice(&self.value(p).data()[r * w..(r + 1) * w]);
            }
        }
        let mut shape = lead;
        shape.push(total);
        let t = Tensor::new(shape, data)?;
        let rg = self.rg(parts);
        Ok(self.push(
            t,
            Op::Concat {
                parts: parts.to_vec(),
            },
            rg,
        ))
    }

    /// Columns `start..end` of the last axis.
    pub fn slice_last(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let ta = self.value(a);
        let c = ta.last_dim();
        if start > end || end > c {
            return Err(dim_err(
                "slice_last",
                format!("{start}..{end} of {}", fmt_shape(ta.shape())),
            ));
        }
        let w = end - start;
        let mut data = Vec::with_capacity(ta.rows() * w);
        for row in ta.data().chunks_exact(c) {
            data.extend_from_slice(&row[start..end]);
        }
        let mut shape = ta.shape().to_vec();
        *shape.last_mut().unwrap() = w;
        let t = Tensor::new(shape, data)?;
        let rg = self.rg(&[a]);
        Ok(self.push(t, Op::SliceLast { a, start }, rg))
    }

    /// `[A, B, C, D] -> [A, C, B, D]`.
    pub fn transpose12(&mut self, a: Var) -> Result<Var> {
        let ta = self.value(a);
        let s = ta.shape();
        if s.len() != 4 {
            return Err(dim_err("transpose12", format!("needs rank 4, got {}", fmt_shape(s))));
        }
        let data = transpose12_data(ta.data(), s[0], s[1], s[2], s[3]);
        let t = Tensor::new(vec![s[0], s[2], s[1], s[3]], data)?;
        let rg = self.rg(&[a]);
        Ok(self.push(t, Op::Transpose12 { a }, rg))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(a).clone().reshaped(shape)?;
        let rg = self.rg(&[a]);
        Ok(self.push(t, Op::Reshape { a }, rg))
    }

    /// Selects rows of `a` viewed as `[rows, last_dim]`; output `[rows.len(), last_dim]`.
    pub fn gather_rows(&mut self, a: Var, rows: &[usize]) -> Result<Var> {
        let ta = self.value(a);
        let (n, c) = (ta.rows(), ta.last_dim());
        let mut data = Vec::with_capacity(rows.len() * c);
        for &r in rows {
            if r >= n {
                return Err(NdError::Index {
                    op: "gather_rows",
                    index: r,
                    extent: n,
                });
            }
            data.extend_from_slice(ta.row(r));
        }
        let t = Tensor::new(vec![rows.len(), c], data)?;
        let rg = self.rg(&[a]);
        Ok(self.push(
            t,
            Op::GatherRows {
                a,
                rows: rows.to_vec(),
            },
            rg,
        ))
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).data().iter().fold(T::zero(), |acc, &v| acc + v);
        let rg = self.rg(&[a]);
        Ok(self.push(Tensor::scalar(s), Op::Sum { a }, rg))
    }

    /// `Σ_i weights[i] · CE(logits[rows[i]], targets[i])` with label smoothing.
    ///
    /// Rows not listed receive exactly zero gradient.
    pub fn cross_entropy(
        &mut self,
        logits: Var,
        rows: &[usize],
        targets: &[usize],
        weights: &[T],
        smoothing: T,
    ) -> Result<Var> {
        if rows.len() != targets.len() || rows.len() != weights.len() {
            return Err(dim_err(
                "cross_entropy",
                format!("{} rows, {} targets, {} weights", rows.len(), targets.len(), weights.len()),
            ));
        }
        if !(smoothing >= T::zero() && smoothing < T::one()) {
            return Err(NdError::Contract(format!("smoothing {smoothing} outside [0, 1)")));
        }
        let tl = self.value(logits);
        let (n, v) = (tl.rows(), tl.last_dim());
        let mut probs = Vec::with_capacity(rows.len() * v);
        let mut total = T::zero();
        for ((&r, &t), &w) in rows.iter().zip(targets).zip(weights) {
            if r >= n {
                return Err(NdError::Index {
                    op: "cross_entropy",
                    index: r,
                    extent: n,
                });
            }
            if t >= v {
                return Err(NdError::Index {
                    op: "cross_entropy",
                    index: t,
                    extent: v,
                });
            }
            let (loss, p) = smoothed_ce_row(tl.row(r), t, smoothing);
            total = total + w * loss;
            probs.extend_from_slice(&p);
        }
        let rg = self.rg(&[logits]);
        Ok(self.push(
            Tensor::scalar(total),
            Op::CrossEntropy {
                logits,
                rows: rows.to_vec(),
                targets: targets.to_vec(),
                weights: weights.to_vec(),
                smoothing,
                probs,
            },
            rg,
        ))
    }

    // ---- reverse pass -----------------------------------------------------

    /// Reverse accumulation from a scalar `loss`. Consumes the tape.
    pub fn backward(&mut self, loss: Var) -> Result<Grads<T>> {
        if self.consumed {
            return Err(NdError::Contract("backward called twice on one tape".into()));
        }
        if self.value(loss).len() != 1 {
            return Err(NdError::Contract(format!(
                "backward needs a scalar loss, got shape {}",
                fmt_shape(self.shape(loss))
            )));
        }
        self.consumed = true;
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        if !self.nodes[loss.0].requires_grad {
            return Ok(Grads {
                grads: grads.into_iter().map(|_| None).collect(),
            });
        }
        grads[loss.0] = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            let (lo, hi) = grads.split_at_mut(i);
            let Some(g) = hi[0].as_ref() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            self.vjp(node, g, lo);
            let keep = matches!(node.op, Op::Leaf) || self.retained.contains(&i);
            if !keep {
                hi[0] = None;
            }
        }
        let grads = grads
            .into_iter()
            .enumerate()
            .map(|(i, g)| g.map(|g| Tensor::new(self.nodes[i].value.shape().to_vec(), g).unwrap()))
            .collect();
        Ok(Grads { grads })
    }

    fn vjp(&self, node: &Node<T>, g: &[T], lo: &mut [Option<Vec<T>>]) {
        let out = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul { a, b, trans_b } => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let k = ta.last_dim();
                let rows = ta.rows();
                let n = out.last_dim();
                if self.requires_grad(*a) {
                    let da = acc(lo, *a, ta.len());
                    // dA = dY · op(B)ᵀ
                    let (rsb, csb) = if *trans_b { (k as isize, 1) } else { (1, n as isize) };
                    unsafe {
                        T::gemm(
                            rows, n, k, T::one(), g.as_ptr(), n as isize, 1, tb.data().as_ptr(), rsb,
                            csb, T::one(), da.as_mut_ptr(), k as isize, 1,
                        );
                    }
                }
                if self.requires_grad(*b) {
                    let db = acc(lo, *b, tb.len());
                    if *trans_b {
                        // dB[n, k] = dYᵀ · A
                        unsafe {
                            T::gemm(
                                n, rows, k, T::one(), g.as_ptr(), 1, n as isize, ta.data().as_ptr(),
                                k as isize, 1, T::one(), db.as_mut_ptr(), k as isize, 1,
                            );
                        }
                    } else {
                        // dB[k, n] = Aᵀ · dY
                        unsafe {
                            T::gemm(
                                k, rows, n, T::one(), ta.data().as_ptr(), 1, k as isize, g.as_ptr(),
                                n as isize, 1, T::one(), db.as_mut_ptr(), n as isize, 1,
                            );
                        }
                    }
                }
            }
            Op::BatchMatMul { a, b, trans_b } => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (batch, m, k) = (ta.shape()[0], ta.shape()[1], ta.shape()[2]);
                let n = out.shape()[2];
                if self.requires_grad(*a) {
                    let da = acc(lo, *a, ta.len());
                    let (rsb, csb) = if *trans_b { (k as isize, 1) } else { (1, n as isize) };
                    for i in 0..batch {
                        unsafe {
                            T::gemm(
                                m,
                                n,
                                k,
                                T::one(),
                                g.as_ptr().add(i * m * n),
                                n as isize,
                                1,
                                tb.data().as_ptr().add(i * k * n),
                                rsb,
                                csb,
                                T::one(),
                                da.as_mut_ptr().add(i * m * k),
                                k as isize,
                                1,
                            );
                        }
                    }
                }
                if self.requires_grad(*b) {
                    let db = acc(lo, *b, tb.len());
                    for i in 0..batch {
                        let gp = unsafe { g.as_ptr().add(i * m * n) };
                        let ap = unsafe { ta.data().as_ptr().add(i * m * k) };
                        let dp = unsafe { db.as_mut_ptr().add(i * k * n) };
                        unsafe {
                            if *trans_b {
                                T::gemm(n, m, k, T::one(), gp, 1, n as isize, ap, k as isize, 1, T::one(), dp, k as isize, 1);
                            } else {
                                T::gemm(k, m, n, T::one(), ap, 1, k as isize, gp, n as isize, 1, T::one(), dp, n as isize, 1);
                            }
                        }
                    }
                }
            }
            Op::Add { a, b } => {
                for v in [a, b] {
                    if self.requires_grad(*v) {
                        acc_slice(lo, *v, g);
                    }
                }
            }
            Op::AddRow { a, bias } => {
                if self.requires_grad(*a) {
                    acc_slice(lo, *a, g);
                }
                if self.requires_grad(*bias) {
                    let c = out.last_dim();
                    let db = acc(lo, *bias, c);
                    for row in g.chunks_exact(c) {
                        add_into(db, row);
                    }
                }
            }
            Op::Mul { a, b } => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                if self.requires_grad(*a) {
                    let da = acc(lo, *a, g.len());
                    for ((d, &gi), &bi) in da.iter_mut().zip(g).zip(tb.data()) {
                        *d = *d + gi * bi;
                    }
                }
                if self.requires_grad(*b) {
                    let db = acc(lo, *b, g.len());
                    for ((d, &gi), &ai) in db.iter_mut().zip(g).zip(ta.data()) {
                        *d = *d + gi * ai;
                    }
                }
            }
            Op::Scale { a, c } => {
                let da = acc(lo, *a, g.len());
                for (d, &gi) in da.iter_mut().zip(g) {
                    *d = *d + gi * *c;
                }
            }
            Op::Softmax { a } => {
                let c = out.last_dim();
                let da = acc(lo, *a, g.len());
                for ((drow, grow), yrow) in da
                    .chunks_exact_mut(c)
                    .zip(g.chunks_exact(c))
                    .zip(out.data().chunks_exact(c))
                {
                    let dot = grow.iter().zip(yrow).fold(T::zero(), |s, (&gi, &yi)| s + gi * yi);
                    for i in 0..c {
                        drow[i] = drow[i] + yrow[i] * (grow[i] - dot);
                    }
                }
            }
            Op::CausalMask { a } => {
                let n = out.last_dim();
                let da = acc(lo, *a, g.len());
                for (dblock, gblock) in da.chunks_exact_mut(n * n).zip(g.chunks_exact(n * n)) {
                    for i in 0..n {
                        for j in 0..=i {
                            dblock[i * n + j] = dblock[i * n + j] + gblock[i * n + j];
                        }
                    }
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                rstd,
            } => {
                let tx = self.value(*x);
                let gam = self.value(*gamma).data();
                let c = tx.last_dim();
                let cn = T::from_usize(c).unwrap();
                let mut xhat = vec![T::zero(); c];
                let mut dxhat = vec![T::zero(); c];
                let need_x = self.requires_grad(*x);
                let need_g = self.requires_grad(*gamma);
                let need_b = self.requires_grad(*beta);
                let mut dgam = vec![T::zero(); c];
                let mut dbet = vec![T::zero(); c];
                let mut dx_all = if need_x { Some(vec![T::zero(); tx.len()]) } else { None };
                for (r, (src, grow)) in tx.data().chunks_exact(c).zip(g.chunks_exact(c)).enumerate() {
                    let mean = src.iter().fold(T::zero(), |s, &v| s + v) / cn;
                    let rs = rstd[r];
                    for i in 0..c {
                        xhat[i] = (src[i] - mean) * rs;
                        dxhat[i] = grow[i] * gam[i];
                        dgam[i] = dgam[i] + grow[i] * xhat[i];
                        dbet[i] = dbet[i] + grow[i];
                    }
                    if let Some(dx) = dx_all.as_mut() {
                        let m1 = dxhat.iter().fold(T::zero(), |s, &v| s + v) / cn;
                        let m2 = dxhat
                            .iter()
                            .zip(&xhat)
                            .fold(T::zero(), |s, (&d, &xh)| s + d * xh)
                            / cn;
                        let drow = &mut dx[r * c..(r + 1) * c];
                        for i in 0..c {
                            drow[i] = rs * (dxhat[i] - m1 - xhat[i] * m2);
                        }
                    }
                }
                if let Some(dx) = dx_all {
                    acc_vec(lo, *x, dx);
                }
                if need_g {
                    add_into(acc(lo, *gamma, c), &dgam);
                }
                if need_b {
                    add_into(acc(lo, *beta, c), &dbet);
                }
            }
            Op::Gelu { a } => {
                let ta = self.value(*a);
                let dx = g.iter().zip(ta.data()).map(|(&gi, &xi)| gi * gelu_grad(xi)).collect();
                acc_vec(lo, *a, dx);
            }
            Op::Embedding { table, ids } => {
                let tt = self.value(*table);
                let d = tt.shape()[1];
                let dt = acc(lo, *table, tt.len());
                for (k, &id) in ids.iter().enumerate() {
                    add_into(&mut dt[id * d..(id + 1) * d], &g[k * d..(k + 1) * d]);
                }
            }
            Op::Concat { parts } => {
                let total = out.last_dim();
                let rows = out.rows();
                let mut off = 0;
                for &p in parts {
                    let w = self.value(p).last_dim();
                    if self.requires_grad(p) {
                        let dp = acc(lo, p, rows * w);
                        for r in 0..rows {
                            add_into(
                                &mut dp[r * w..(r + 1) * w],
                                &g[r * total + off..r * total + off + w],
                            );
                        }
                    }
                    off += w;
                }
            }
            Op::SliceLast { a, start } => {
                let ta = self.value(*a);
                let c = ta.last_dim();
                let w = out.last_dim();
                let da = acc(lo, *a, ta.len());
                for (drow, grow) in da.chunks_exact_mut(c).zip(g.chunks_exact(w.max(1))) {
                    add_into(&mut drow[*start..*start + w], grow);
                }
            }
            Op::Transpose12 { a } => {
                let s = out.shape();
                // out is [A, C, B, D]; transposing back gives [A, B, C, D]
                acc_vec(lo, *a, transpose12_data(g, s[0], s[1], s[2], s[3]));
            }
            Op::Reshape { a } => {
                acc_slice(lo, *a, g);
            }
            Op::GatherRows { a, rows } => {
                let ta = self.value(*a);
                let c = ta.last_dim();
                let da = acc(lo, *a, ta.len());
                for (k, &r) in rows.iter().enumerate() {
                    add_into(&mut da[r * c..(r + 1) * c], &g[k * c..(k + 1) * c]);
                }
            }
            Op::Sum { a } => {
                let n = self.value(*a).len();
                let da = acc(lo, *a, n);
                for d in da.iter_mut() {
                    *d = *d + g[0];
                }
            }
            Op::CrossEntropy {
                logits,
                rows,
                targets,
                weights,
                smoothing,
                probs,
            } => {
                let tl = self.value(*logits);
                let v = tl.last_dim();
                let dl = acc(lo, *logits, tl.len());
                let vn = T::from_usize(v).unwrap();
                let off = *smoothing / vn;
                let on = T::one() - *smoothing + off;
                for (k, ((&r, &t), &w)) in rows.iter().zip(targets).zip(weights).enumerate() {
                    let p = &probs[k * v..(k + 1) * v];
                    let drow = &mut dl[r * v..(r + 1) * v];
                    let s = g[0] * w;
                    for j in 0..v {
                        let q = if j == t { on } else { off };
                        drow[j] = drow[j] + s * (p[j] - q);
                    }
                }
            }
        }
    }
}

fn acc<T: Scalar>(lo: &mut [Option<Vec<T>>], v: Var, n: usize) -> &mut Vec<T> {
    lo[v.0].get_or_insert_with(|| vec![T::zero(); n])
}

fn acc_slice<T: Scalar>(lo: &mut [Option<Vec<T>>], v: Var, g: &[T]) {
    match &mut lo[v.0] {
        Some(d) => add_into(d, g),
        slot => *slot = Some(g.to_vec()),
    }
}

fn acc_vec<T: Scalar>(lo: &mut [Option<Vec<T>>], v: Var, g: Vec<T>) {
    match &mut lo[v.0] {
        Some(d) => add_into(d, &g),
        slot => *slot = Some(g),
    }
}

fn add_into<T: Scalar>(dst: &mut [T], src: &[T]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d = *d + s;
    }
}

fn transpose12_data<T: Scalar>(src: &[T], a: usize, b: usize, c: usize, d: usize) -> Vec<T> {
    let mut out = vec![T::zero(); src.len()];
    for i in 0..a {
        for j in 0..b {
            for k in 0..c {
                let s = ((i * b + j) * c + k) * d;
                let t = ((i * c + k) * b + j) * d;
                out[t..t + d].copy_from_slice(&src[s..s + d]);
            }
        }
    }
    out
}

/// In-place numerically stable softmax of one row.
pub fn softmax_in_place<T: Scalar>(row: &mut [T]) {
    let max = row.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
    let mut sum = T::zero();
    for x in row.iter_mut() {
        *x = (*x - max).exp();
        sum = sum + *x;
    }
    for x in row.iter_mut() {
        *x = *x / sum;
    }
}

/// Log-softmax of one row.
pub fn log_softmax<T: Scalar>(row: &[T]) -> Vec<T> {
    let max = row.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
    let lse = row.iter().fold(T::zero(), |s, &v| s + (v - max).exp()).ln() + max;
    row.iter().map(|&v| v - lse).collect()
}

/// Smoothed cross-entropy of one logit row; also returns the softmax.
fn smoothed_ce_row<T: Scalar>(logits: &[T], target: usize, smoothing: T) -> (T, Vec<T>) {
    let v = T::from_usize(logits.len()).unwrap();
    let logp = log_softmax(logits);
    let off = smoothing / v;
    let on = T::one() - smoothing + off;
    let mut loss = T::zero();
    for (j, &lp) in logp.iter().enumerate() {
        let q = if j == target { on } else { off };
        if q > T::zero() {
            loss = loss - q * lp;
        }
    }
    (loss, logp.iter().map(|&lp| lp.exp()).collect())
}

/// Label-smoothed cross-entropy of a single logit vector.
pub fn cross_entropy_smoothed<T: Scalar>(logits: &[T], target: usize, smoothing: T) -> Result<T> {
    if target >= logits.len() {
        return Err(NdError::Index {
            op: "cross_entropy_smoothed",
            index: target,
            extent: logits.len(),
        });
    }
    if !(smoothing >= T::zero() && smoothing < T::one()) {
        return Err(NdError::Contract(format!("smoothing {smoothing} outside [0, 1)")));
    }
    Ok(smoothed_ce_row(logits, target, smoothing).0)
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

fn gelu<T: Scalar>(x: T) -> T {
    let c = T::from_f64_lossy(GELU_C);
    let a = T::from_f64_lossy(GELU_A);
    let half = T::from_f64_lossy(0.5);
    half * x * (T::one() + fast_tanh(c * (x + a * x * x * x)))
}

// One exp instead of libm tanh; exact to a few ulps, and saturates cleanly.
fn fast_tanh<T: Scalar>(u: T) -> T {
    let two = T::one() + T::one();
    T::one() - two / ((two * u).exp() + T::one())
}

fn gelu_grad<T: Scalar>(x: T) -> T {
    let c = T::from_f64_lossy(GELU_C);
    let a = T::from_f64_lossy(GELU_A);
    let half = T::from_f64_lossy(0.5);
    let three = T::from_f64_lossy(3.0);
    let t = fast_tanh(c * (x + a * x * x * x));
    half * (T::one() + t) + half * x * (T::one() - t * t) * c * (T::one() + three * a * x * x)
}
