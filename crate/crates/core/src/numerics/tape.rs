//! Reverse-mode tape over row-major matrices.
//!
//! Every node is a `rows × cols` matrix. Parameter leaves borrow their values
//! from a [`ParamStore`] instead of copying them; the tape lives for a single
//! forward/backward pass.

use std::ops::Range;

use super::kernels;
use super::tensor::{Gradients, ParamStore, Scalar};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// One output row of [`Tape::gather`]: either a row of the table or a fixed
/// vector that receives no gradient.
#[derive(Clone, Copy, Debug)]
pub enum GatherRow<'v, T> {
    Row(usize),
    Fixed(&'v [T]),
}

enum Storage<T> {
    Owned(Vec<T>),
    Param(usize),
}

enum Op<T> {
    Leaf,
    MatMul {
        a: Var,
        b: Var,
        b_transposed: bool,
    },
    Add(Var, Var),
    AddRow(Var, Var),
    Scale(Var, T),
    Gelu(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<T>,
        rstd: Vec<T>,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        segments: Vec<Range<usize>>,
        probs: Vec<T>,
    },
    Gather {
        table: Var,
        rows: Vec<Option<usize>>,
    },
    SelectRows(Var, Vec<usize>),
    ConcatCols(Vec<Var>),
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        probs: Vec<T>,
    },
    Sum(Var),
}

struct Node<T> {
    rows: usize,
    cols: usize,
    value: Storage<T>,
    op: Op<T>,
}

pub struct Tape<'p, T: Scalar> {
    params: &'p ParamStore<T>,
    param_vars: Vec<Option<Var>>,
    nodes: Vec<Node<T>>,
}

impl<'p, T: Scalar> Tape<'p, T> {
    pub fn new(params: &'p ParamStore<T>) -> Self {
        Self {
            params,
            param_vars: vec![None; params.len()],
            nodes: Vec::new(),
        }
    }

    pub fn params(&self) -> &'p ParamStore<T> {
        self.params
    }

    fn push(&mut self, rows: usize, cols: usize, value: Vec<T>, op: Op<T>) -> Var {
        debug_assert_eq!(rows * cols, value.len());
        self.nodes.push(Node {
            rows,
            cols,
            value: Storage::Owned(value),
            op,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        let n = &self.nodes[v.0];
        (n.rows, n.cols)
    }

    pub fn value(&self, v: Var) -> &[T] {
        match &self.nodes[v.0].value {
            Storage::Owned(data) => data,
            Storage::Param(idx) => self.params.by_index(*idx).data(),
        }
    }

    pub fn row(&self, v: Var, i: usize) -> &[T] {
        let (_, c) = self.shape(v);
        &self.value(v)[i * c..(i + 1) * c]
    }

    /// Leaf for a stored parameter, viewed as a matrix (vectors are one row).
    pub fn param(&mut self, name: &str) -> Result<Var> {
        let idx = self
            .params
            .index_of(name)
            .ok_or_else(|| Error::Config(format!("missing parameter `{name}`")))?;
        if let Some(v) = self.param_vars[idx] {
            return Ok(v);
        }
        let (rows, cols) = self.params.by_index(idx).rows_cols();
        self.nodes.push(Node {
            rows,
            cols,
            value: Storage::Param(idx),
            op: Op::Leaf,
        });
        let v = Var(self.nodes.len() - 1);
        self.param_vars[idx] = Some(v);
        Ok(v)
    }

    pub fn constant(&mut self, rows: usize, cols: usize, data: Vec<T>) -> Result<Var> {
        if rows * cols != data.len() {
            return Err(Error::Shape {
                op: "constant",
                left: vec![rows, cols],
                right: vec![data.len()],
            });
        }
        Ok(self.push(rows, cols, data, Op::Leaf))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (n, k) = self.shape(a);
        let (k2, m) = self.shape(b);
        if k != k2 {
            return Err(Error::Shape {
                op: "matmul",
                left: vec![n, k],
                right: vec![k2, m],
            });
        }
        let mut out = vec![T::zero(); n * m];
        kernels::gemm(n, k, m, self.value(a), false, self.value(b), false, &mut out, false);
        Ok(self.push(
            n,
            m,
            out,
            Op::MatMul {
                a,
                b,
                b_transposed: false,
            },
        ))
    }

    /// `a · bᵀ`.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var> {
        let (n, k) = self.shape(a);
        let (m, k2) = self.shape(b);
        if k != k2 {
            return Err(Error::Shape {
                op: "matmul_t",
                left: vec![n, k],
                right: vec![m, k2],
            });
        }
        let mut out = vec![T::zero(); n * m];
        kernels::gemm(n, k, m, self.value(a), false, self.value(b), true, &mut out, false);
        Ok(self.push(
            n,
            m,
            out,
            Op::MatMul {
                a,
                b,
                b_transposed: true,
            },
        ))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            let (ar, ac) = self.shape(a);
            let (br, bc) = self.shape(b);
            return Err(Error::Shape {
                op: "add",
                left: vec![ar, ac],
                right: vec![br, bc],
            });
        }
        let (r, c) = self.shape(a);
        let out = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(&x, &y)| x + y)
            .collect();
        Ok(self.push(r, c, out, Op::Add(a, b)))
    }

    /// Adds a `1 × cols` row to every row of `a`.
    pub fn add_row(&mut self, a: Var, bias: Var) -> Result<Var> {
        let (r, c) = self.shape(a);
        if self.shape(bias) != (1, c) {
            let (br, bc) = self.shape(bias);
            return Err(Error::Shape {
                op: "add_row",
                left: vec![r, c],
                right: vec![br, bc],
            });
        }
        let b = self.value(bias);
        let mut out = self.value(a).to_vec();
        for row in out.chunks_mut(c) {
            for (x, &y) in row.iter_mut().zip(b) {
                *x = *x + y;
            }
        }
        Ok(self.push(r, c, out, Op::AddRow(a, bias)))
    }

    pub fn scale(&mut self, a: Var, c: T) -> Var {
        let (r, cols) = self.shape(a);
        let out = self.value(a).iter().map(|&x| x * c).collect();
        self.push(r, cols, out, Op::Scale(a, c))
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let (r, c) = self.shape(a);
        let out = self.value(a).iter().map(|&x| kernels::gelu(x)).collect();
        self.push(r, c, out, Op::Gelu(a))
    }

    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: T) -> Result<Var> {
        let (r, d) = self.shape(x);
        for p in [gain, bias] {
            if self.shape(p) != (1, d) {
                let (pr, pc) = self.shape(p);
                return Err(Error::Shape {
                    op: "layer_norm",
                    left: vec![r, d],
                    right: vec![pr, pc],
                });
            }
        }
        if eps < T::zero() {
            return Err(Error::InvalidArgument("layer_norm epsilon must be >= 0".into()));
        }
        let (xhat, rstd) = kernels::normalize_rows(self.value(x), d, eps);
        let g = self.value(gain);
        let b = self.value(bias);
        let mut out = xhat.clone();
        for row in out.chunks_mut(d) {
            for ((y, &gi), &bi) in row.iter_mut().zip(g).zip(b) {
                *y = *y * gi + bi;
            }
        }
        Ok(self.push(
            r,
            d,
            out,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            },
        ))
    }

    /// Multi-head scaled dot-product attention. Rows in `segments` attend only
    /// within their own segment; rows whose `key_mask` entry is false are never
    /// attended to.
    pub fn attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        segments: &[Range<usize>],
        key_mask: &[bool],
    ) -> Result<Var> {
        let (n, d) = self.shape(q);
        if self.shape(k) != (n, d) || self.shape(v) != (n, d) || key_mask.len() != n {
            return Err(Error::Shape {
                op: "attention",
                left: vec![n, d],
                right: vec![self.shape(k).0, self.shape(v).0, key_mask.len()],
            });
        }
        if heads == 0 || d % heads != 0 {
            return Err(Error::Config(format!(
                "hidden size {d} not divisible by {heads} heads"
            )));
        }
        if segments.iter().any(|s| s.end > n) {
            return Err(Error::Index {
                what: "attention segment",
                index: segments.iter().map(|s| s.end).max().unwrap_or(0),
                bound: n,
            });
        }
        let (out, probs) = kernels::attention_forward(
            self.value(q),
            self.value(k),
            self.value(v),
            d,
            heads,
            segments,
            key_mask,
        );
        Ok(self.push(
            n,
            d,
            out,
            Op::Attention {
                q,
                k,
                v,
                heads,
                segments: segments.to_vec(),
                probs,
            },
        ))
    }

    pub fn gather(&mut self, table: Var, rows: &[GatherRow<'_, T>]) -> Result<Var> {
        let (tr, d) = self.shape(table);
        let mut out = Vec::with_capacity(rows.len() * d);
        let mut idx = Vec::with_capacity(rows.len());
        for r in rows {
            match *r {
                GatherRow::Row(i) => {
                    if i >= tr {
                        return Err(Error::Index {
                            what: "gather row",
                            index: i,
                            bound: tr,
                        });
                    }
                    out.extend_from_slice(self.row(table, i));
                    idx.push(Some(i));
                }
                GatherRow::Fixed(vec) => {
                    if vec.len() != d {
                        return Err(Error::Shape {
                            op: "gather",
                            left: vec![tr, d],
                            right: vec![vec.len()],
                        });
                    }
                    out.extend_from_slice(vec);
                    idx.push(None);
                }
            }
        }
        Ok(self.push(rows.len(), d, out, Op::Gather { table, rows: idx }))
    }

    pub fn select_rows(&mut self, a: Var, rows: &[usize]) -> Result<Var> {
        let (r, c) = self.shape(a);
        let mut out = Vec::with_capacity(rows.len() * c);
        for &i in rows {
            if i >= r {
                return Err(Error::Index {
                    what: "row",
                    index: i,
                    bound: r,
                });
            }
            out.extend_from_slice(self.row(a, i));
        }
        Ok(self.push(rows.len(), c, out, Op::SelectRows(a, rows.to_vec())))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let rows = parts.first().map(|&p| self.shape(p).0).unwrap_or(0);
        if parts.iter().any(|&p| self.shape(p).0 != rows) {
            return Err(Error::Shape {
                op: "concat_cols",
                left: parts.iter().map(|&p| self.shape(p).0).collect(),
                right: vec![rows],
            });
        }
        let cols: usize = parts.iter().map(|&p| self.shape(p).1).sum();
        let mut out = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for &p in parts {
                out.extend_from_slice(self.row(p, i));
            }
        }
        Ok(self.push(rows, cols, out, Op::ConcatCols(parts.to_vec())))
    }

    /// Summed cross-entropy `Σᵢ −log softmax(logitsᵢ)[targetᵢ]` as a 1×1 node.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let (r, v) = self.shape(logits);
        if targets.len() != r {
            return Err(Error::Shape {
                op: "cross_entropy",
                left: vec![r, v],
                right: vec![targets.len()],
            });
        }
        if let Some(&t) = targets.iter().find(|&&t| t >= v) {
            return Err(Error::Index {
                what: "target",
                index: t,
                bound: v,
            });
        }
        let mut probs = self.value(logits).to_vec();
        let mut loss = T::zero();
        for (row, &t) in probs.chunks_mut(v).zip(targets) {
            let lse = kernels::log_sum_exp(row);
            loss = loss + lse - row[t];
            for x in row.iter_mut() {
                *x = (*x - lse).exp();
            }
        }
        Ok(self.push(
            1,
            1,
            vec![loss],
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
        ))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).iter().copied().sum();
        self.push(1, 1, vec![s], Op::Sum(a))
    }

    pub fn scalar(&self, v: Var) -> T {
        self.value(v)[0]
    }

    /// Back-propagates from a 1×1 node.
    pub fn backward(&self, loss: Var) -> Result<Backward<T>> {
        if self.shape(loss) != (1, 1) {
            let (r, c) = self.shape(loss);
            return Err(Error::Shape {
                op: "backward",
                left: vec![r, c],
                right: vec![1, 1],
            });
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);

        for id in (0..=loss.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &self.nodes[id];
            self.propagate(node, &g, &mut grads);
            grads[id] = Some(g);
        }
        Ok(Backward { grads })
    }

    fn propagate(&self, node: &Node<T>, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let zero = T::zero();
        macro_rules! buf {
            ($v:expr) => {
                slot(grads, self.value($v).len(), $v)
            };
        }
        match &node.op {
            Op::Leaf => {}
            Op::MatMul {
                a,
                b,
                b_transposed,
            } => {
                let (n, k) = self.shape(*a);
                let m = node.cols;
                let av = self.value(*a);
                let bv = self.value(*b);
                {
                    let ga = buf!(*a);
                    // out = a·b  => da = g·bᵀ ; out = a·bᵀ => da = g·b
                    kernels::gemm(n, m, k, g, false, bv, !*b_transposed, ga, true);
                }
                let gb = buf!(*b);
                if *b_transposed {
                    // db (m×k) = gᵀ·a
                    kernels::gemm(m, n, k, g, true, av, false, gb, true);
                } else {
                    // db (k×m) = aᵀ·g
                    kernels::gemm(k, n, m, av, true, g, false, gb, true);
                }
            }
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    let gv = buf!(v);
                    for (x, &y) in gv.iter_mut().zip(g) {
                        *x = *x + y;
                    }
                }
            }
            Op::AddRow(a, bias) => {
                let c = node.cols;
                {
                    let ga = buf!(*a);
                    for (x, &y) in ga.iter_mut().zip(g) {
                        *x = *x + y;
                    }
                }
                let gb = buf!(*bias);
                for row in g.chunks(c) {
                    for (x, &y) in gb.iter_mut().zip(row) {
                        *x = *x + y;
                    }
                }
            }
            Op::Scale(a, c) => {
                let ga = buf!(*a);
                for (x, &y) in ga.iter_mut().zip(g) {
                    *x = *x + y * *c;
                }
            }
            Op::Gelu(a) => {
                let av = self.value(*a);
                let ga = buf!(*a);
                for ((x, &y), &inp) in ga.iter_mut().zip(g).zip(av) {
                    *x = *x + y * kernels::gelu_grad(inp);
                }
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            } => {
                let d = node.cols;
                let gv = self.value(*gain);
                {
                    let gg = buf!(*gain);
                    for (grow, hrow) in g.chunks(d).zip(xhat.chunks(d)) {
                        for ((acc, &gi), &hi) in gg.iter_mut().zip(grow).zip(hrow) {
                            *acc = *acc + gi * hi;
                        }
                    }
                }
                {
                    let gb = buf!(*bias);
                    for grow in g.chunks(d) {
                        for (acc, &gi) in gb.iter_mut().zip(grow) {
                            *acc = *acc + gi;
                        }
                    }
                }
                let gx = buf!(*x);
                kernels::layer_norm_backward(g, xhat, rstd, gv, d, gx);
            }
            Op::Attention {
                q,
                k,
                v,
                heads,
                segments,
                probs,
            } => {
                let d = node.cols;
                let n = node.rows;
                let mut dq = vec![zero; n * d];
                let mut dk = vec![zero; n * d];
                let mut dv = vec![zero; n * d];
                kernels::attention_backward(
                    g,
                    self.value(*q),
                    self.value(*k),
                    self.value(*v),
                    probs,
                    d,
                    *heads,
                    segments,
                    &mut dq,
                    &mut dk,
                    &mut dv,
                );
                for (var, part) in [(*q, dq), (*k, dk), (*v, dv)] {
                    let gv = buf!(var);
                    for (x, &y) in gv.iter_mut().zip(&part) {
                        *x = *x + y;
                    }
                }
            }
            Op::Gather { table, rows } => {
                let d = node.cols;
                let gt = buf!(*table);
                for (grow, r) in g.chunks(d).zip(rows) {
                    if let Some(i) = r {
                        for (x, &y) in gt[i * d..(i + 1) * d].iter_mut().zip(grow) {
                            *x = *x + y;
                        }
                    }
                }
            }
            Op::SelectRows(a, rows) => {
                let c = node.cols;
                let ga = buf!(*a);
                for (grow, &i) in g.chunks(c).zip(rows) {
                    for (x, &y) in ga[i * c..(i + 1) * c].iter_mut().zip(grow) {
                        *x = *x + y;
                    }
                }
            }
            Op::ConcatCols(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let pc = self.shape(p).1;
                    let gp = buf!(p);
                    for (i, grow) in g.chunks(node.cols).enumerate() {
                        for (x, &y) in gp[i * pc..(i + 1) * pc]
                            .iter_mut()
                            .zip(&grow[offset..offset + pc])
                        {
                            *x = *x + y;
                        }
                    }
                    offset += pc;
                }
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
            } => {
                let v = self.shape(*logits).1;
                let up = g[0];
                let gl = buf!(*logits);
                for (i, (grow, prow)) in gl.chunks_mut(v).zip(probs.chunks(v)).enumerate() {
                    for (x, &p) in grow.iter_mut().zip(prow) {
                        *x = *x + up * p;
                    }
                    grow[targets[i]] = grow[targets[i]] - up;
                }
            }
            Op::Sum(a) => {
                let ga = buf!(*a);
                for x in ga.iter_mut() {
                    *x = *x + g[0];
                }
            }
        }
    }
}

fn slot<T: Scalar>(grads: &mut [Option<Vec<T>>], len: usize, v: Var) -> &mut Vec<T> {
    grads[v.0].get_or_insert_with(|| vec![T::zero(); len])
}

/// Result of a backward pass: gradients for every node reached from the loss.
pub struct Backward<T> {
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Scalar> Backward<T> {
    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Gradients of the parameter leaves, aligned with the store order.
    pub fn param_grads(&self, tape: &Tape<'_, T>) -> Gradients<T> {
        let mut out = Gradients::empty(tape.params.len());
        for (idx, var) in tape.param_vars.iter().enumerate() {
            if let Some(v) = var {
                if let Some(g) = self.grad(*v) {
                    out.per_param[idx] = Some(g.to_vec());
                }
            }
        }
        out
    }
}
