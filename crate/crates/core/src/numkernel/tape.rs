//! Operation tape and reverse-mode gradient propagation.
//!
//! Every primitive evaluates eagerly and appends a node holding its value
//! and the references needed by its backward rule. Nodes only ever refer to
//! earlier nodes, so one reverse sweep over the node list visits each node
//! once in a valid order.

use super::{KernelError, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
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
    AddScalar(Var),
    AddRow(Var, Var),
    MulCol(Var, Var),
    MatMul(Var, Var),
    Sigmoid(Var),
    Relu(Var),
    Exp(Var),
    Ln(Var),
    Abs(Var),
    ClampMin(Var, f64),
    SumAxis(Var, usize),
    SumAll(Var),
    GatherRows(Var, Vec<usize>),
    PairHidden(PairHidden),
    ScatterAddRows(Var, Vec<usize>),
    ScatterMaxRows(Var, Vec<Option<usize>>),
    Pick(Var, Vec<usize>),
    Reshape(Var),
    SliceRows(Var, usize),
    ConcatRows(Vec<Var>),
    ConcatCols(Var, Var),
    Softmax(Var, f64),
    LogSoftmax(Var, f64),
}

#[derive(Debug)]
struct PairHidden {
    left: Var,
    right: Var,
    bias: Var,
    weights: Var,
    rows: Vec<(usize, usize)>,
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Ordered record of primitive evaluations.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients of one scalar output with respect to every node that requires them.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    visited: usize,
}

impl Gradients {
    pub fn get(&self, var: Var) -> Option<&Tensor> {
        self.grads.get(var.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, var: Var) -> Option<Tensor> {
        self.grads.get_mut(var.0).and_then(Option::take)
    }

    /// Number of nodes the reverse sweep processed.
    pub fn visited(&self) -> usize {
        self.visited
    }
}

fn mismatch(op: &'static str, shapes: &[&[usize]]) -> KernelError {
    KernelError::ShapeMismatch {
        op,
        shapes: shapes.iter().map(|s| s.to_vec()).collect(),
    }
}

fn require_matrix(op: &'static str, t: &Tensor) -> Result<(usize, usize), KernelError> {
    if t.ndim() != 2 {
        return Err(mismatch(op, &[t.shape()]));
    }
    Ok((t.shape()[0], t.shape()[1]))
}

/// `out[n×m] += a[n×k] · b[k×m]`, skipping zero entries of `a`.
fn matmul_into(out: &mut [f64], a: &[f64], b: &[f64], n: usize, k: usize, m: usize) {
    for i in 0..n {
        let arow = &a[i * k..(i + 1) * k];
        let orow = &mut out[i * m..(i + 1) * m];
        for (p, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * m..(p + 1) * m];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

fn softmax_rows(x: &[f64], cols: usize, temperature: f64) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    for (xr, or) in x.chunks(cols).zip(out.chunks_mut(cols)) {
        let max = xr.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v / temperature));
        let mut z = 0.0;
        for (o, &v) in or.iter_mut().zip(xr) {
            *o = (v / temperature - max).exp();
            z += *o;
        }
        for o in or.iter_mut() {
            *o /= z;
        }
    }
    out
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

    /// Registers a trainable input.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push_raw(value, Op::Leaf, true)
    }

    /// Registers an input that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push_raw(value, Op::Leaf, false)
    }

    pub fn value(&self, var: Var) -> &Tensor {
        &self.nodes[var.0].value
    }

    pub fn requires_grad(&self, var: Var) -> bool {
        self.nodes[var.0].requires_grad
    }

    fn push_raw(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.push_raw(value, op, requires_grad)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<(), KernelError> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return Err(mismatch(op, &[sa, sb]));
        }
        Ok(())
    }

    fn zip_map(&mut self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let (ta, tb) = (self.value(a), self.value(b));
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(ta.shape().to_vec(), data).expect("shape preserved")
    }

    fn map(&self, a: Var, f: impl Fn(f64) -> f64) -> Tensor {
        let ta = self.value(a);
        Tensor::new(ta.shape().to_vec(), ta.data().iter().map(|&x| f(x)).collect())
            .expect("shape preserved")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, KernelError> {
        self.same_shape("add", a, b)?;
        let v = self.zip_map(a, b, |x, y| x + y);
        Ok(self.push(v, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, KernelError> {
        self.same_shape("sub", a, b)?;
        let v = self.zip_map(a, b, |x, y| x - y);
        Ok(self.push(v, Op::Sub(a, b), &[a, b]))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, KernelError> {
        self.same_shape("mul", a, b)?;
        let v = self.zip_map(a, b, |x, y| x * y);
        Ok(self.push(v, Op::Mul(a, b), &[a, b]))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let v = self.map(a, |x| x * c);
        self.push(v, Op::Scale(a, c), &[a])
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let v = self.map(a, |x| x + c);
        self.push(v, Op::AddScalar(a), &[a])
    }

    /// Adds a length-`m` vector to every row of an `n × m` matrix.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var, KernelError> {
        let (n, m) = require_matrix("add_row", self.value(a))?;
        if self.value(row).len() != m {
            return Err(mismatch("add_row", &[self.value(a).shape(), self.value(row).shape()]));
        }
        let mut data = self.value(a).data().to_vec();
        let r = self.value(row).data();
        for i in 0..n {
            for (o, &x) in data[i * m..(i + 1) * m].iter_mut().zip(r) {
                *o += x;
            }
        }
        let v = Tensor::new(vec![n, m], data)?;
        Ok(self.push(v, Op::AddRow(a, row), &[a, row]))
    }

    /// Multiplies row `i` of an `n × m` matrix by `col[i]`.
    pub fn mul_col(&mut self, a: Var, col: Var) -> Result<Var, KernelError> {
        let (n, m) = require_matrix("mul_col", self.value(a))?;
        if self.value(col).len() != n {
            return Err(mismatch("mul_col", &[self.value(a).shape(), self.value(col).shape()]));
        }
        let mut data = self.value(a).data().to_vec();
        let c = self.value(col).data();
        for i in 0..n {
            for o in &mut data[i * m..(i + 1) * m] {
                *o *= c[i];
            }
        }
        let v = Tensor::new(vec![n, m], data)?;
        Ok(self.push(v, Op::MulCol(a, col), &[a, col]))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, KernelError> {
        let (n, k) = require_matrix("matmul", self.value(a))?;
        let (k2, m) = require_matrix("matmul", self.value(b))?;
        if k != k2 {
            return Err(mismatch("matmul", &[self.value(a).shape(), self.value(b).shape()]));
        }
        let mut out = vec![0.0; n * m];
        matmul_into(&mut out, self.value(a).data(), self.value(b).data(), n, k, m);
        let v = Tensor::new(vec![n, m], out)?;
        Ok(self.push(v, Op::MatMul(a, b), &[a, b]))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let v = self.map(a, |x| {
            if x >= 0.0 {
                1.0 / (1.0 + (-x).exp())
            } else {
                let e = x.exp();
                e / (1.0 + e)
            }
        });
        self.push(v, Op::Sigmoid(a), &[a])
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let v = self.map(a, |x| if x < 0.0 { 0.0 } else { x });
        self.push(v, Op::Relu(a), &[a])
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let v = self.map(a, f64::exp);
        self.push(v, Op::Exp(a), &[a])
    }

    /// Natural log; non-positive inputs are a domain error.
    pub fn ln(&mut self, a: Var) -> Result<Var, KernelError> {
        if let Some(&bad) = self.value(a).data().iter().find(|&&x| !(x > 0.0)) {
            return Err(KernelError::Domain {
                op: "ln",
                detail: format!("input {bad} is not positive"),
            });
        }
        let v = self.map(a, f64::ln);
        Ok(self.push(v, Op::Ln(a), &[a]))
    }

    pub fn abs(&mut self, a: Var) -> Var {
        let v = self.map(a, f64::abs);
        self.push(v, Op::Abs(a), &[a])
    }

    pub fn clamp_min(&mut self, a: Var, floor: f64) -> Var {
        let v = self.map(a, |x| x.max(floor));
        self.push(v, Op::ClampMin(a, floor), &[a])
    }

    /// Sums a matrix over `axis`, producing a vector.
    pub fn sum_axis(&mut self, a: Var, axis: usize) -> Result<Var, KernelError> {
        let (n, m) = require_matrix("sum_axis", self.value(a))?;
        let d = self.value(a).data();
        let v = match axis {
            0 => {
                let mut out = vec![0.0; m];
                for i in 0..n {
                    for (o, &x) in out.iter_mut().zip(&d[i * m..(i + 1) * m]) {
                        *o += x;
                    }
                }
                Tensor::vector(out)
            }
            1 => Tensor::vector(d.chunks(m.max(1)).take(n).map(|r| r.iter().sum()).collect()),
            _ => {
                return Err(KernelError::InvalidArgument {
                    op: "sum_axis",
                    detail: format!("axis {axis} out of range for a matrix"),
                })
            }
        };
        Ok(self.push(v, Op::SumAxis(a, axis), &[a]))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        self.push(Tensor::scalar(s), Op::SumAll(a), &[a])
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).len().max(1) as f64;
        let s = self.sum(a);
        self.scale(s, 1.0 / n)
    }

    /// Row gather: `out[r] = a[index[r]]`.
    pub fn gather_rows(&mut self, a: Var, index: &[usize]) -> Result<Var, KernelError> {
        let (n, m) = require_matrix("gather_rows", self.value(a))?;
        let d = self.value(a).data();
        let mut out = Vec::with_capacity(index.len() * m);
        for &i in index {
            if i >= n {
                return Err(KernelError::IndexOutOfRange {
                    op: "gather_rows",
                    index: i,
                    bound: n,
                });
            }
            out.extend_from_slice(&d[i * m..(i + 1) * m]);
        }
        let v = Tensor::new(vec![index.len(), m], out)?;
        Ok(self.push(v, Op::GatherRows(a, index.to_vec()), &[a]))
    }

    /// Fused pairwise hidden layer: `out[k] = Σ_j relu(a[i_k, j] + b[l_k, j] + c[j]) · w[j]`
    /// for `pairs[k] = (i_k, l_k)`, with `c` and `w` holding `h` entries each.
    /// Equivalent to gathering both sides, adding, `relu` and a matmul, without
    /// materializing the `n × h` intermediates.
    pub fn pair_hidden(
        &mut self,
        a: Var,
        b: Var,
        c: Var,
        w: Var,
        pairs: &[(usize, usize)],
    ) -> Result<Var, KernelError> {
        let (na, h) = require_matrix("pair_hidden", self.value(a))?;
        let (nb, hb) = require_matrix("pair_hidden", self.value(b))?;
        let (sc, sw) = (self.value(c).shape(), self.value(w).shape());
        if hb != h || self.value(c).len() != h || self.value(w).len() != h {
            return Err(mismatch("pair_hidden", &[self.value(a).shape(), self.value(b).shape(), sc, sw]));
        }
        let (da, db) = (self.value(a).data(), self.value(b).data());
        let (dc, dw) = (self.value(c).data(), self.value(w).data());
        let mut out = Vec::with_capacity(pairs.len());
        for &(i, l) in pairs {
            if i >= na || l >= nb {
                return Err(KernelError::IndexOutOfRange {
                    op: "pair_hidden",
                    index: if i >= na { i } else { l },
                    bound: if i >= na { na } else { nb },
                });
            }
            let (ra, rb) = (&da[i * h..(i + 1) * h], &db[l * h..(l + 1) * h]);
            let mut acc = 0.0;
            for j in 0..h {
                let x = ra[j] + rb[j] + dc[j];
                acc += if x < 0.0 { 0.0 } else { x } * dw[j];
            }
            out.push(acc);
        }
        let v = Tensor::new(vec![pairs.len(), 1], out)?;
        let op = Op::PairHidden(PairHidden {
            left: a,
            right: b,
            bias: c,
            weights: w,
            rows: pairs.to_vec(),
        });
        Ok(self.push(v, op, &[a, b, c, w]))
    }

    /// Row scatter-add into `rows` output rows: `out[index[r]] += a[r]`.
    pub fn scatter_add_rows(
        &mut self,
        a: Var,
        index: &[usize],
        rows: usize,
    ) -> Result<Var, KernelError> {
        let (n, m) = require_matrix("scatter_add_rows", self.value(a))?;
        if index.len() != n {
            return Err(mismatch("scatter_add_rows", &[self.value(a).shape(), &[index.len()]]));
        }
        let d = self.value(a).data();
        let mut out = vec![0.0; rows * m];
        for (r, &i) in index.iter().enumerate() {
            if i >= rows {
                return Err(KernelError::IndexOutOfRange {
                    op: "scatter_add_rows",
                    index: i,
                    bound: rows,
                });
            }
            for (o, &x) in out[i * m..(i + 1) * m].iter_mut().zip(&d[r * m..(r + 1) * m]) {
                *o += x;
            }
        }
        let v = Tensor::new(vec![rows, m], out)?;
        Ok(self.push(v, Op::ScatterAddRows(a, index.to_vec()), &[a]))
    }

    /// Per-segment columnwise maximum; segments with no rows yield 0.
    pub fn scatter_max_rows(
        &mut self,
        a: Var,
        index: &[usize],
        rows: usize,
    ) -> Result<Var, KernelError> {
        let (n, m) = require_matrix("scatter_max_rows", self.value(a))?;
        if index.len() != n {
            return Err(mismatch("scatter_max_rows", &[self.value(a).shape(), &[index.len()]]));
        }
        let d = self.value(a).data();
        let mut arg: Vec<Option<usize>> = vec![None; rows * m];
        for (r, &i) in index.iter().enumerate() {
            if i >= rows {
                return Err(KernelError::IndexOutOfRange {
                    op: "scatter_max_rows",
                    index: i,
                    bound: rows,
                });
            }
            for j in 0..m {
                let slot = &mut arg[i * m + j];
                let x = d[r * m + j];
                match *slot {
                    Some(best) if d[best] >= x => {}
                    _ => *slot = Some(r * m + j),
                }
            }
        }
        let out = arg.iter().map(|s| s.map_or(0.0, |k| d[k])).collect();
        let v = Tensor::new(vec![rows, m], out)?;
        Ok(self.push(v, Op::ScatterMaxRows(a, arg), &[a]))
    }

    /// Flat element selection into a vector.
    pub fn pick(&mut self, a: Var, flat_index: &[usize]) -> Result<Var, KernelError> {
        let d = self.value(a).data();
        let mut out = Vec::with_capacity(flat_index.len());
        for &k in flat_index {
            if k >= d.len() {
                return Err(KernelError::IndexOutOfRange {
                    op: "pick",
                    index: k,
                    bound: d.len(),
                });
            }
            out.push(d[k]);
        }
        Ok(self.push(Tensor::vector(out), Op::Pick(a, flat_index.to_vec()), &[a]))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var, KernelError> {
        let v = self.value(a).clone().reshaped(shape.to_vec())?;
        Ok(self.push(v, Op::Reshape(a), &[a]))
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, end: usize) -> Result<Var, KernelError> {
        let (n, m) = require_matrix("slice_rows", self.value(a))?;
        if start > end || end > n {
            return Err(KernelError::InvalidArgument {
                op: "slice_rows",
                detail: format!("range {start}..{end} outside 0..{n}"),
            });
        }
        let data = self.value(a).data()[start * m..end * m].to_vec();
        let v = Tensor::new(vec![end - start, m], data)?;
        Ok(self.push(v, Op::SliceRows(a, start), &[a]))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var, KernelError> {
        let Some(&first) = parts.first() else {
            return Err(KernelError::InvalidArgument {
                op: "concat_rows",
                detail: "no inputs".into(),
            });
        };
        let (_, m) = require_matrix("concat_rows", self.value(first))?;
        let mut rows = 0;
        let mut data = Vec::new();
        for &p in parts {
            let (n, mp) = require_matrix("concat_rows", self.value(p))?;
            if mp != m {
                return Err(mismatch("concat_rows", &[self.value(first).shape(), self.value(p).shape()]));
            }
            rows += n;
            data.extend_from_slice(self.value(p).data());
        }
        let v = Tensor::new(vec![rows, m], data)?;
        Ok(self.push(v, Op::ConcatRows(parts.to_vec()), parts))
    }

    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var, KernelError> {
        let (n, ma) = require_matrix("concat_cols", self.value(a))?;
        let (nb, mb) = require_matrix("concat_cols", self.value(b))?;
        if n != nb {
            return Err(mismatch("concat_cols", &[self.value(a).shape(), self.value(b).shape()]));
        }
        let (da, db) = (self.value(a).data(), self.value(b).data());
        let mut data = Vec::with_capacity(n * (ma + mb));
        for i in 0..n {
            data.extend_from_slice(&da[i * ma..(i + 1) * ma]);
            data.extend_from_slice(&db[i * mb..(i + 1) * mb]);
        }
        let v = Tensor::new(vec![n, ma + mb], data)?;
        Ok(self.push(v, Op::ConcatCols(a, b), &[a, b]))
    }

    fn check_temperature(op: &'static str, t: f64) -> Result<(), KernelError> {
        if !(t > 0.0) || !t.is_finite() {
            return Err(KernelError::InvalidArgument {
                op,
                detail: format!("temperature {t} must be positive"),
            });
        }
        Ok(())
    }

    /// `softmax(a / temperature)` over the last axis.
    pub fn softmax(&mut self, a: Var, temperature: f64) -> Result<Var, KernelError> {
        Self::check_temperature("softmax", temperature)?;
        let ta = self.value(a);
        let out = softmax_rows(ta.data(), ta.cols().max(1), temperature);
        let v = Tensor::new(ta.shape().to_vec(), out)?;
        Ok(self.push(v, Op::Softmax(a, temperature), &[a]))
    }

    /// `log(softmax(a / temperature))` over the last axis, evaluated stably.
    pub fn log_softmax(&mut self, a: Var, temperature: f64) -> Result<Var, KernelError> {
        Self::check_temperature("log_softmax", temperature)?;
        let ta = self.value(a);
        let cols = ta.cols().max(1);
        let mut out = vec![0.0; ta.len()];
        for (xr, or) in ta.data().chunks(cols).zip(out.chunks_mut(cols)) {
            let max = xr.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v / temperature));
            let lse = max + xr.iter().map(|&v| (v / temperature - max).exp()).sum::<f64>().ln();
            for (o, &v) in or.iter_mut().zip(xr) {
                *o = v / temperature - lse;
            }
        }
        let v = Tensor::new(ta.shape().to_vec(), out)?;
        Ok(self.push(v, Op::LogSoftmax(a, temperature), &[a]))
    }

    /// Reverse sweep from a scalar output. Every trainable leaf gets a
    /// gradient, zero when it does not influence the output.
    pub fn backward(&self, output: Var) -> Result<Gradients, KernelError> {
        let out = self.value(output);
        if out.len() != 1 {
            return Err(KernelError::NotScalar {
                shape: out.shape().to_vec(),
            });
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        let mut visited = 0;
        if self.nodes[output.0].requires_grad {
            grads[output.0] = Some(vec![1.0]);
        }
        for idx in (0..=output.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            visited += 1;
            self.propagate(node, &g, &mut grads);
            grads[idx] = Some(g);
        }
        let grads = self
            .nodes
            .iter()
            .zip(grads)
            .map(|(node, g)| {
                if !node.requires_grad {
                    return None;
                }
                let shape = node.value.shape().to_vec();
                let data = g.unwrap_or_else(|| vec![0.0; node.value.len()]);
                Some(Tensor::new(shape, data).expect("gradient shape matches value"))
            })
            .collect();
        Ok(Gradients { grads, visited })
    }

    fn accumulate<'g>(
        &self,
        grads: &'g mut [Option<Vec<f64>>],
        var: Var,
    ) -> Option<&'g mut Vec<f64>> {
        let node = &self.nodes[var.0];
        if !node.requires_grad {
            return None;
        }
        Some(grads[var.0].get_or_insert_with(|| vec![0.0; node.value.len()]))
    }

    fn propagate(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let y = node.value.data();
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                for (v, sign) in [(*a, 1.0), (*b, 1.0)] {
                    if let Some(ga) = self.accumulate(grads, v) {
                        ga.iter_mut().zip(g).for_each(|(o, &x)| *o += sign * x);
                    }
                }
            }
            Op::Sub(a, b) => {
                for (v, sign) in [(*a, 1.0), (*b, -1.0)] {
                    if let Some(ga) = self.accumulate(grads, v) {
                        ga.iter_mut().zip(g).for_each(|(o, &x)| *o += sign * x);
                    }
                }
            }
            Op::Mul(a, b) => {
                let (da, db) = (self.value(*a).data(), self.value(*b).data());
                if let Some(ga) = self.accumulate(grads, *a) {
                    for ((o, &x), &w) in ga.iter_mut().zip(g).zip(db) {
                        *o += x * w;
                    }
                }
                if let Some(gb) = self.accumulate(grads, *b) {
                    for ((o, &x), &w) in gb.iter_mut().zip(g).zip(da) {
                        *o += x * w;
                    }
                }
            }
            Op::Scale(a, c) => {
                if let Some(ga) = self.accumulate(grads, *a) {
                    ga.iter_mut().zip(g).for_each(|(o, &x)| *o += c * x);
                }
            }
            Op::AddScalar(a) | Op::Reshape(a) => {
                if let Some(ga) = self.accumulate(grads, *a) {
                    ga.iter_mut().zip(g).for_each(|(o, &x)| *o += x);
                }
            }
            Op::AddRow(a, row) => {
                let m = self.value(row.to_owned()).len();
                if let Some(ga) = self.accumulate(grads, *a) {
                    ga.iter_mut().zip(g).for_each(|(o, &x)| *o += x);
                }
                if let Some(gr) = self.accumulate(grads, *row) {
                    for chunk in g.chunks(m) {
                        gr.iter_mut().zip(chunk).for_each(|(o, &x)| *o += x);
                    }
                }
            }
            Op::MulCol(a, col) => {
                let ta = self.value(*a);
                let m = ta.cols();
                let c = self.value(*col).data();
                if let Some(ga) = self.accumulate(grads, *a) {
                    for (i, (orow, grow)) in ga.chunks_mut(m).zip(g.chunks(m)).enumerate() {
                        orow.iter_mut().zip(grow).for_each(|(o, &x)| *o += x * c[i]);
                    }
                }
                let da = ta.data();
                if let Some(gc) = self.accumulate(grads, *col) {
                    for (i, o) in gc.iter_mut().enumerate() {
                        *o += g[i * m..(i + 1) * m]
                            .iter()
                            .zip(&da[i * m..(i + 1) * m])
                            .map(|(x, w)| x * w)
                            .sum::<f64>();
                    }
                }
            }
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (n, k) = (ta.shape()[0], ta.shape()[1]);
                let m = tb.shape()[1];
                let (da, db) = (ta.data(), tb.data());
                if let Some(ga) = self.accumulate(grads, *a) {
                    // dA = dC · Bᵀ
                    for i in 0..n {
                        let grow = &g[i * m..(i + 1) * m];
                        if grow.iter().all(|&x| x == 0.0) {
                            continue;
                        }
                        for p in 0..k {
                            let brow = &db[p * m..(p + 1) * m];
                            ga[i * k + p] += grow.iter().zip(brow).map(|(x, w)| x * w).sum::<f64>();
                        }
                    }
                }
                if let Some(gb) = self.accumulate(grads, *b) {
                    // dB = Aᵀ · dC
                    for i in 0..n {
                        let grow = &g[i * m..(i + 1) * m];
                        for p in 0..k {
                            let av = da[i * k + p];
                            if av == 0.0 {
                                continue;
                            }
                            for (o, &x) in gb[p * m..(p + 1) * m].iter_mut().zip(grow) {
                                *o += av * x;
                            }
                        }
                    }
                }
            }
            Op::Sigmoid(a) => {
                if let Some(ga) = self.accumulate(grads, *a) {
                    for ((o, &x), &s) in ga.iter_mut().zip(g).zip(y) {
                        *o += x * s * (1.0 - s);
                    }
                }
            }
            Op::Relu(a) => {
                let da = self.value(*a).data();
                if let Some(ga) = self.accumulate(grads, *a) {
                    for ((o, &x), &v) in ga.iter_mut().zip(g).zip(da) {
                        if v > 0.0 {
                            *o += x;
                        }
                    }
                }
            }
            Op::Exp(a) => {
                if let Some(ga) = self.accumulate(grads, *a) {
                    for ((o, &x), &e) in ga.iter_mut().zip(g).zip(y) {
                        *o += x * e;
                    }
                }
            }
            Op::Ln(a) => {
                let da = self.value(*a).data();
                if let Some(ga) = self.accumulate(grads, *a) {
                    for ((o, &x), &v) in ga.iter_mut().zip(g).zip(da) {
                        *o += x / v;
                    }
                }
            }
            Op::Abs(a) => {
                let da = self.value(*a).data();
                if let Some(ga) = self.accumulate(grads, *a) {
                    for ((o, &x), &v) in ga.iter_mut().zip(g).zip(da) {
                        if v > 0.0 {
                            *o += x;
                        } else if v < 0.0 {
                            *o -= x;
                        }
                    }
                }
            }
            Op::ClampMin(a, floor) => {
                let da = self.value(*a).data();
                if let Some(ga) = self.accumulate(grads, *a) {
                    for ((o, &x), &v) in ga.iter_mut().zip(g).zip(da) {
                        if v > *floor {
                            *o += x;
                        }
                    }
                }
            }
            Op::SumAxis(a, axis) => {
                let ta = self.value(*a);
                let m = ta.shape()[1];
                if let Some(ga) = self.accumulate(grads, *a) {
                    for (i, row) in ga.chunks_mut(m.max(1)).enumerate() {
                        for (j, o) in row.iter_mut().enumerate() {
                            *o += if *axis == 0 { g[j] } else { g[i] };
                        }
                    }
                }
            }
            Op::SumAll(a) => {
                if let Some(ga) = self.accumulate(grads, *a) {
                    ga.iter_mut().for_each(|o| *o += g[0]);
                }
            }
            Op::GatherRows(a, index) => {
                let m = self.value(*a).shape()[1];
                if let Some(ga) = self.accumulate(grads, *a) {
                    for (r, &i) in index.iter().enumerate() {
                        for (o, &x) in ga[i * m..(i + 1) * m].iter_mut().zip(&g[r * m..(r + 1) * m]) {
                            *o += x;
                        }
                    }
                }
            }
            Op::PairHidden(p) => {
                let h = self.value(p.bias).len();
                let (da, db) = (self.value(p.left).data(), self.value(p.right).data());
                let (dc, dw) = (self.value(p.bias).data(), self.value(p.weights).data());
                let mut ga = vec![0.0; da.len()];
                let mut gb = vec![0.0; db.len()];
                let mut gc = vec![0.0; h];
                let mut gw = vec![0.0; h];
                for (k, &(i, l)) in p.rows.iter().enumerate() {
                    let gk = g[k];
                    if gk == 0.0 {
                        continue;
                    }
                    for j in 0..h {
                        let x = da[i * h + j] + db[l * h + j] + dc[j];
                        if x > 0.0 {
                            let d = gk * dw[j];
                            ga[i * h + j] += d;
                            gb[l * h + j] += d;
                            gc[j] += d;
                            gw[j] += gk * x;
                        }
                    }
                }
                for (v, part) in [(p.left, ga), (p.right, gb), (p.bias, gc), (p.weights, gw)] {
                    if let Some(acc) = self.accumulate(grads, v) {
                        acc.iter_mut().zip(&part).for_each(|(o, x)| *o += x);
                    }
                }
            }
            Op::ScatterAddRows(a, index) => {
                let m = self.value(*a).shape()[1];
                if let Some(ga) = self.accumulate(grads, *a) {
                    for (r, &i) in index.iter().enumerate() {
                        for (o, &x) in ga[r * m..(r + 1) * m].iter_mut().zip(&g[i * m..(i + 1) * m]) {
                            *o += x;
                        }
                    }
                }
            }
            Op::ScatterMaxRows(a, arg) => {
                if let Some(ga) = self.accumulate(grads, *a) {
                    for (slot, &x) in arg.iter().zip(g) {
                        if let Some(k) = slot {
                            ga[*k] += x;
                        }
                    }
                }
            }
            Op::Pick(a, index) => {
                if let Some(ga) = self.accumulate(grads, *a) {
                    for (&k, &x) in index.iter().zip(g) {
                        ga[k] += x;
                    }
                }
            }
            Op::SliceRows(a, start) => {
                let m = self.value(*a).shape()[1];
                if let Some(ga) = self.accumulate(grads, *a) {
                    ga[start * m..start * m + g.len()]
                        .iter_mut()
                        .zip(g)
                        .for_each(|(o, &x)| *o += x);
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let len = self.value(p).len();
                    if let Some(gp) = self.accumulate(grads, p) {
                        gp.iter_mut()
                            .zip(&g[offset..offset + len])
                            .for_each(|(o, &x)| *o += x);
                    }
                    offset += len;
                }
            }
            Op::ConcatCols(a, b) => {
                let ma = self.value(*a).shape()[1];
                let mb = self.value(*b).shape()[1];
                let m = ma + mb;
                if let Some(ga) = self.accumulate(grads, *a) {
                    for (orow, grow) in ga.chunks_mut(ma.max(1)).zip(g.chunks(m)) {
                        orow.iter_mut().zip(&grow[..ma]).for_each(|(o, &x)| *o += x);
                    }
                }
                if let Some(gb) = self.accumulate(grads, *b) {
                    for (orow, grow) in gb.chunks_mut(mb.max(1)).zip(g.chunks(m)) {
                        orow.iter_mut().zip(&grow[ma..]).for_each(|(o, &x)| *o += x);
                    }
                }
            }
            Op::Softmax(a, t) => {
                let cols = node.value.cols().max(1);
                if let Some(ga) = self.accumulate(grads, *a) {
                    for ((orow, grow), yrow) in ga.chunks_mut(cols).zip(g.chunks(cols)).zip(y.chunks(cols)) {
                        let dot: f64 = grow.iter().zip(yrow).map(|(x, s)| x * s).sum();
                        for ((o, &x), &s) in orow.iter_mut().zip(grow).zip(yrow) {
                            *o += s * (x - dot) / t;
                        }
                    }
                }
            }
            Op::LogSoftmax(a, t) => {
                let cols = node.value.cols().max(1);
                if let Some(ga) = self.accumulate(grads, *a) {
                    for ((orow, grow), yrow) in ga.chunks_mut(cols).zip(g.chunks(cols)).zip(y.chunks(cols)) {
                        let total: f64 = grow.iter().sum();
                        for ((o, &x), &ly) in orow.iter_mut().zip(grow).zip(yrow) {
                            *o += (x - ly.exp() * total) / t;
                        }
                    }
                }
            }
        }
    }
}
