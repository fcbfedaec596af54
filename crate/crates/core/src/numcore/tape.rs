use super::{memory, ParamStore, Tensor};
use crate::error::{Error, Result};

/// Target value marking a position that contributes nothing to the loss.
pub const IGNORE_INDEX: usize = usize::MAX;

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_A: f64 = 0.044_715;

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
    MatMul(Var, Var),
    MatMulNt(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    MulRow(Var, Var),
    Scale(Var, f64),
    Gelu(Var),
    Embedding {
        table: Var,
        ids: Vec<usize>,
    },
    ConcatRows(Vec<Var>),
    SliceCols {
        x: Var,
        start: usize,
    },
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        probs: Vec<f64>,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        probs: Vec<f64>,
        count: usize,
    },
    Sum(Var),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    requires_grad: bool,
    param: Option<String>,
    op: Op,
}

/// Attention probabilities saved by a [`Tape::causal_attention`] node.
#[derive(Clone, Copy, Debug)]
pub struct AttentionProbs<'a> {
    pub heads: usize,
    pub queries: usize,
    pub keys: usize,
    /// `[heads][queries][keys]`, zero at masked positions.
    pub probs: &'a [f64],
}

impl AttentionProbs<'_> {
    pub fn row(&self, head: usize, query: usize) -> &[f64] {
        let start = (head * self.queries + query) * self.keys;
        &self.probs[start..start + self.keys]
    }
}

/// Per-node gradients produced by [`Tape::backward`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn get(&self, var: Var) -> Option<&[f64]> {
        self.grads.get(var.0).and_then(|g| g.as_deref())
    }
}

/// Record of executed operations for reverse-mode differentiation.
///
/// A tape lives for one forward/backward pass; create a fresh one per
/// optimizer step.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    bytes: usize,
}

impl Drop for Tape {
    fn drop(&mut self) {
        memory::free(self.bytes);
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

    pub fn requires_grad(&self, var: Var) -> bool {
        self.nodes[var.0].requires_grad
    }

    fn push(&mut self, value: Tensor, requires_grad: bool, op: Op) -> Var {
        let bytes = value.bytes();
        memory::alloc(bytes);
        self.bytes += bytes;
        self.nodes.push(Node {
            value,
            requires_grad,
            param: None,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Records a leaf. Gradients flow to it iff `tensor.requires_grad()`.
    pub fn leaf(&mut self, tensor: Tensor) -> Var {
        let rg = tensor.requires_grad();
        let value = Tensor::new(tensor.shape().to_vec(), tensor.into_data()).expect("valid");
        self.push(value, rg, Op::Leaf)
    }

    /// Records a leaf that never receives gradients.
    pub fn constant(&mut self, tensor: Tensor) -> Var {
        self.leaf(tensor.with_requires_grad(false))
    }

    /// Records a copy of a named parameter; [`Tape::backward_into`] routes its gradient back by name.
    pub fn param(&mut self, name: &str, tensor: &Tensor) -> Var {
        let value = Tensor::new(tensor.shape().to_vec(), tensor.data().to_vec()).expect("valid");
        let var = self.push(value, tensor.requires_grad(), Op::Leaf);
        self.nodes[var.0].param = Some(name.to_string());
        var
    }

    fn shape_of(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn matrix_dims(&self, v: Var, what: &str) -> Result<(usize, usize)> {
        match *self.shape_of(v) {
            [m, n] => Ok((m, n)),
            ref s => Err(Error::Dimension(format!("{what} expects a matrix, got shape {s:?}"))),
        }
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.matrix_dims(a, "matmul")?;
        let (k2, n) = self.matrix_dims(b, "matmul")?;
        if k != k2 {
            return Err(Error::Dimension(format!(
                "matmul inner extents differ: {:?} x {:?}",
                self.shape_of(a),
                self.shape_of(b)
            )));
        }
        let out = matmul_raw(self.value(a).data(), self.value(b).data(), m, k, n);
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::new(vec![m, n], out)?, rg, Op::MatMul(a, b)))
    }

    /// `a · bᵀ` for `a: [m×k]`, `b: [n×k]`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.matrix_dims(a, "matmul_nt")?;
        let (n, k2) = self.matrix_dims(b, "matmul_nt")?;
        if k != k2 {
            return Err(Error::Dimension(format!(
                "matmul_nt inner extents differ: {:?} x {:?}ᵀ",
                self.shape_of(a),
                self.shape_of(b)
            )));
        }
        let (ad, bd) = (self.value(a).data(), self.value(b).data());
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let ar = &ad[i * k..(i + 1) * k];
            for j in 0..n {
                out[i * n + j] = dot(ar, &bd[j * k..(j + 1) * k]);
            }
        }
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::new(vec![m, n], out)?, rg, Op::MatMulNt(a, b)))
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.shape_of(a) != self.shape_of(b) {
            return Err(Error::Dimension(format!(
                "{what} shapes differ: {:?} vs {:?}",
                self.shape_of(a),
                self.shape_of(b)
            )));
        }
        Ok(())
    }

    fn row_vector(&self, x: Var, v: Var, what: &str) -> Result<()> {
        let d = self.value(x).last_dim();
        if self.shape_of(v) != [d] {
            return Err(Error::Dimension(format!(
                "{what} needs a vector of length {d} for input {:?}, got {:?}",
                self.shape_of(x),
                self.shape_of(v)
            )));
        }
        Ok(())
    }

    fn zip_map(&self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let (ta, tb) = (self.value(a), self.value(b));
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(ta.shape().to_vec(), data).expect("same shape")
    }

    fn row_map(&self, x: Var, v: Var, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let (tx, tv) = (self.value(x), self.value(v));
        let d = tx.last_dim();
        let data = tx
            .data()
            .iter()
            .enumerate()
            .map(|(i, &a)| f(a, tv.data()[i % d]))
            .collect();
        Tensor::new(tx.shape().to_vec(), data).expect("same shape")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let out = self.zip_map(a, b, |x, y| x + y);
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, rg, Op::Add(a, b)))
    }

    /// Adds a trailing-axis vector to every row of `x`.
    pub fn add_row(&mut self, x: Var, v: Var) -> Result<Var> {
        self.row_vector(x, v, "add_row")?;
        let out = self.row_map(x, v, |a, b| a + b);
        let rg = self.rg(&[x, v]);
        Ok(self.push(out, rg, Op::AddRow(x, v)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let out = self.zip_map(a, b, |x, y| x * y);
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, rg, Op::Mul(a, b)))
    }

    /// Multiplies every row of `x` elementwise by a trailing-axis vector.
    pub fn mul_row(&mut self, x: Var, v: Var) -> Result<Var> {
        self.row_vector(x, v, "mul_row")?;
        let out = self.row_map(x, v, |a, b| a * b);
        let rg = self.rg(&[x, v]);
        Ok(self.push(out, rg, Op::MulRow(x, v)))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let t = self.value(x);
        let out = Tensor::new(t.shape().to_vec(), t.data().iter().map(|a| a * c).collect())
            .expect("same shape");
        let rg = self.rg(&[x]);
        self.push(out, rg, Op::Scale(x, c))
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let data = t.data().iter().map(|&a| gelu(a)).collect();
        let out = Tensor::new(t.shape().to_vec(), data).expect("same shape");
        let rg = self.rg(&[x]);
        self.push(out, rg, Op::Gelu(x))
    }

    /// Gathers rows of `table` by index.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (rows, d) = self.matrix_dims(table, "embedding")?;
        if ids.is_empty() {
            return Err(Error::Dimension("embedding lookup with no ids".into()));
        }
        let t = self.value(table).data();
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= rows {
                return Err(Error::Data(format!("index {id} out of range for table with {rows} rows")));
            }
            out.extend_from_slice(&t[id * d..(id + 1) * d]);
        }
        let rg = self.rg(&[table]);
        Ok(self.push(
            Tensor::new(vec![ids.len(), d], out)?,
            rg,
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
        ))
    }

    /// Stacks matrices along the row (sequence) axis.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::Dimension("concat_rows with no inputs".into()))?;
        let (_, d) = self.matrix_dims(first, "concat_rows")?;
        let mut rows = 0;
        let mut out = Vec::new();
        for &p in parts {
            let (r, c) = self.matrix_dims(p, "concat_rows")?;
            if c != d {
                return Err(Error::Dimension(format!(
                    "concat_rows column extents differ: {d} vs {c}"
                )));
            }
            rows += r;
            out.extend_from_slice(self.value(p).data());
        }
        let rg = self.rg(parts);
        Ok(self.push(Tensor::new(vec![rows, d], out)?, rg, Op::ConcatRows(parts.to_vec())))
    }

    /// Columns `start..start + len` of a matrix.
    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (m, n) = self.matrix_dims(x, "slice_cols")?;
        if len == 0 || start + len > n {
            return Err(Error::Dimension(format!(
                "slice_cols {start}..{} out of range for {n} columns",
                start + len
            )));
        }
        let t = self.value(x).data();
        let out = (0..m)
            .flat_map(|i| t[i * n + start..i * n + start + len].iter().copied())
            .collect();
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::new(vec![m, len], out)?, rg, Op::SliceCols { x, start }))
    }

    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        self.row_vector(x, gamma, "layer_norm gamma")?;
        self.row_vector(x, beta, "layer_norm beta")?;
        let tx = self.value(x);
        let (rows, d) = (tx.rows(), tx.last_dim());
        let (g, b) = (self.value(gamma).data(), self.value(beta).data());
        let mut out = vec![0.0; rows * d];
        let mut xhat = vec![0.0; rows * d];
        let mut rstd = vec![0.0; rows];
        for r in 0..rows {
            let row = tx.row(r);
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let rs = 1.0 / (var + eps).sqrt();
            rstd[r] = rs;
            for j in 0..d {
                let h = (row[j] - mean) * rs;
                xhat[r * d + j] = h;
                out[r * d + j] = h * g[j] + b[j];
            }
        }
        let out = Tensor::new(tx.shape().to_vec(), out)?;
        let rg = self.rg(&[x, gamma, beta]);
        Ok(self.push(
            out,
            rg,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
        ))
    }

    /// Multi-head scaled dot-product attention with a causal mask.
    ///
    /// `q: [T×d]`, `k, v: [(P+T)×d]`. The first `P` key/value rows are a
    /// prefix visible to every query; query `i` additionally sees real keys
    /// `0..=i`.
    pub fn causal_attention(&mut self, q: Var, k: Var, v: Var, heads: usize) -> Result<Var> {
        let (t, d) = self.matrix_dims(q, "attention query")?;
        let (tk, dk) = self.matrix_dims(k, "attention key")?;
        self.same_shape(k, v, "attention key/value")?;
        if dk != d {
            return Err(Error::Dimension(format!(
                "attention query width {d} differs from key width {dk}"
            )));
        }
        if heads == 0 || d % heads != 0 {
            return Err(Error::Dimension(format!("{heads} heads do not divide width {d}")));
        }
        if tk < t {
            return Err(Error::Dimension(format!(
                "attention has {tk} keys for {t} queries"
            )));
        }
        let prefix = tk - t;
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let (qd, kd, vd) = (self.value(q).data(), self.value(k).data(), self.value(v).data());
        let mut probs = vec![0.0; heads * t * tk];
        let mut out = vec![0.0; t * d];
        let mut scores = vec![0.0; tk];
        for h in 0..heads {
            let off = h * dh;
            for i in 0..t {
                let visible = prefix + i + 1;
                let qi = &qd[i * d + off..i * d + off + dh];
                let mut max = f64::NEG_INFINITY;
                for j in 0..visible {
                    let s = dot(qi, &kd[j * d + off..j * d + off + dh]) * scale;
                    scores[j] = s;
                    max = max.max(s);
                }
                let mut z = 0.0;
                for s in &mut scores[..visible] {
                    *s = (*s - max).exp();
                    z += *s;
                }
                let prow = &mut probs[(h * t + i) * tk..(h * t + i + 1) * tk];
                let orow = &mut out[i * d + off..i * d + off + dh];
                for j in 0..visible {
                    let p = scores[j] / z;
                    prow[j] = p;
                    let vj = &vd[j * d + off..j * d + off + dh];
                    for (o, &vv) in orow.iter_mut().zip(vj) {
                        *o += p * vv;
                    }
                }
            }
        }
        let rg = self.rg(&[q, k, v]);
        Ok(self.push(
            Tensor::new(vec![t, d], out)?,
            rg,
            Op::Attention {
                q,
                k,
                v,
                heads,
                probs,
            },
        ))
    }

    /// Saved probabilities of an attention node, if `var` is one.
    pub fn attention_probs(&self, var: Var) -> Option<AttentionProbs<'_>> {
        match &self.nodes[var.0].op {
            Op::Attention { q, k, heads, probs, .. } => Some(AttentionProbs {
                heads: *heads,
                queries: self.value(*q).shape()[0],
                keys: self.value(*k).shape()[0],
                probs,
            }),
            _ => None,
        }
    }

    /// Variables of every attention node, in recording order.
    pub fn attention_nodes(&self) -> Vec<Var> {
        self.nodes
            .iter()
            .enumerate()
            .filter(|(_, n)| matches!(n.op, Op::Attention { .. }))
            .map(|(i, _)| Var(i))
            .collect()
    }

    /// Mean negative log-likelihood over positions whose target is not [`IGNORE_INDEX`].
    pub fn softmax_cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let (t, vocab) = self.matrix_dims(logits, "softmax_cross_entropy")?;
        if targets.len() != t {
            return Err(Error::Dimension(format!(
                "{} targets for {t} logit rows",
                targets.len()
            )));
        }
        let l = self.value(logits).data();
        let mut probs = vec![0.0; t * vocab];
        let mut total = 0.0;
        let mut count = 0;
        for (i, &target) in targets.iter().enumerate() {
            if target == IGNORE_INDEX {
                continue;
            }
            if target >= vocab {
                return Err(Error::Data(format!(
                    "target {target} at position {i} exceeds vocabulary size {vocab}"
                )));
            }
            let row = &l[i * vocab..(i + 1) * vocab];
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = row.iter().map(|x| (x - max).exp()).sum();
            let log_z = max + z.ln();
            total += log_z - row[target];
            for (p, &x) in probs[i * vocab..(i + 1) * vocab].iter_mut().zip(row) {
                *p = (x - log_z).exp();
            }
            count += 1;
        }
        if count == 0 {
            return Err(Error::Data("no supervised positions".into()));
        }
        let rg = self.rg(&[logits]);
        Ok(self.push(
            Tensor::scalar(total / count as f64),
            rg,
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
                count,
            },
        ))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        let rg = self.rg(&[x]);
        self.push(Tensor::scalar(s), rg, Op::Sum(x))
    }

    /// Reverse pass from a scalar. Returns per-node gradients for every node
    /// that requires them.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.nodes.is_empty() {
            return Err(Error::Autodiff("backward over an empty tape".into()));
        }
        if loss.0 >= self.nodes.len() {
            return Err(Error::Autodiff("loss is not recorded on this tape".into()));
        }
        if self.value(loss).numel() != 1 {
            return Err(Error::Autodiff(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape_of(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        let mut scratch = 0usize;
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(node, &g, &mut grads, &mut scratch);
            grads[idx] = Some(g);
        }
        memory::alloc(scratch);
        memory::free(scratch);
        Ok(Gradients { grads })
    }

    /// Runs [`Tape::backward`] and accumulates parameter gradients into `store`
    /// for every parameter that requires them.
    pub fn backward_into(&self, loss: Var, store: &mut ParamStore) -> Result<()> {
        let grads = self.backward(loss)?;
        for (i, node) in self.nodes.iter().enumerate() {
            let (Some(name), Some(g)) = (&node.param, grads.grads[i].as_deref()) else {
                continue;
            };
            if let Some(t) = store.get_mut(name) {
                if t.requires_grad() {
                    t.accumulate_grad(g);
                }
            }
        }
        Ok(())
    }

    fn propagate(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>], scratch: &mut usize) {
        let mut acc = |var: Var, delta: Vec<f64>| {
            if !self.nodes[var.0].requires_grad {
                return;
            }
            match &mut grads[var.0] {
                Some(existing) => existing.iter_mut().zip(&delta).for_each(|(e, d)| *e += d),
                slot @ None => {
                    *scratch += delta.len() * std::mem::size_of::<f64>();
                    *slot = Some(delta);
                }
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (m, k) = (ta.shape()[0], ta.shape()[1]);
                let n = tb.shape()[1];
                if self.nodes[a.0].requires_grad {
                    // dA = G · Bᵀ
                    let mut da = vec![0.0; m * k];
                    for i in 0..m {
                        for p in 0..k {
                            da[i * k + p] = dot(&g[i * n..(i + 1) * n], &tb.data()[p * n..(p + 1) * n]);
                        }
                    }
                    acc(*a, da);
                }
                if self.nodes[b.0].requires_grad {
                    // dB = Aᵀ · G
                    let mut db = vec![0.0; k * n];
                    for i in 0..m {
                        for p in 0..k {
                            let aip = ta.data()[i * k + p];
                            for j in 0..n {
                                db[p * n + j] += aip * g[i * n + j];
                            }
                        }
                    }
                    acc(*b, db);
                }
            }
            Op::MatMulNt(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (m, k) = (ta.shape()[0], ta.shape()[1]);
                let n = tb.shape()[0];
                if self.nodes[a.0].requires_grad {
                    // dA = G · B
                    acc(*a, matmul_raw(g, tb.data(), m, n, k));
                }
                if self.nodes[b.0].requires_grad {
                    // dB = Gᵀ · A
                    let mut db = vec![0.0; n * k];
                    for i in 0..m {
                        for j in 0..n {
                            let gij = g[i * n + j];
                            for p in 0..k {
                                db[j * k + p] += gij * ta.data()[i * k + p];
                            }
                        }
                    }
                    acc(*b, db);
                }
            }
            Op::Add(a, b) => {
                acc(*a, g.to_vec());
                acc(*b, g.to_vec());
            }
            Op::AddRow(x, v) => {
                acc(*x, g.to_vec());
                let d = self.value(*v).numel();
                let mut dv = vec![0.0; d];
                g.iter().enumerate().for_each(|(i, gi)| dv[i % d] += gi);
                acc(*v, dv);
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (self.value(*a).data(), self.value(*b).data());
                acc(*a, g.iter().zip(tb).map(|(g, y)| g * y).collect());
                acc(*b, g.iter().zip(ta).map(|(g, x)| g * x).collect());
            }
            Op::MulRow(x, v) => {
                let (tx, tv) = (self.value(*x).data(), self.value(*v).data());
                let d = tv.len();
                acc(*x, g.iter().enumerate().map(|(i, gi)| gi * tv[i % d]).collect());
                let mut dv = vec![0.0; d];
                for (i, gi) in g.iter().enumerate() {
                    dv[i % d] += gi * tx[i];
                }
                acc(*v, dv);
            }
            Op::Scale(x, c) => acc(*x, g.iter().map(|gi| gi * c).collect()),
            Op::Gelu(x) => {
                let tx = self.value(*x).data();
                acc(*x, g.iter().zip(tx).map(|(gi, &a)| gi * gelu_grad(a)).collect());
            }
            Op::Embedding { table, ids } => {
                let tt = self.value(*table);
                let d = tt.last_dim();
                let mut dt = vec![0.0; tt.numel()];
                for (r, &id) in ids.iter().enumerate() {
                    for j in 0..d {
                        dt[id * d + j] += g[r * d + j];
                    }
                }
                acc(*table, dt);
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for p in parts {
                    let n = self.value(*p).numel();
                    acc(*p, g[off..off + n].to_vec());
                    off += n;
                }
            }
            Op::SliceCols { x, start } => {
                let tx = self.value(*x);
                let (m, n) = (tx.shape()[0], tx.shape()[1]);
                let len = g.len() / m;
                let mut dx = vec![0.0; m * n];
                for i in 0..m {
                    dx[i * n + start..i * n + start + len].copy_from_slice(&g[i * len..(i + 1) * len]);
                }
                acc(*x, dx);
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let gm = self.value(*gamma).data();
                let d = gm.len();
                let rows = rstd.len();
                let mut dg = vec![0.0; d];
                let mut db = vec![0.0; d];
                let mut dx = vec![0.0; rows * d];
                for r in 0..rows {
                    let gr = &g[r * d..(r + 1) * d];
                    let hr = &xhat[r * d..(r + 1) * d];
                    let mut mean_dh = 0.0;
                    let mut mean_dh_h = 0.0;
                    for j in 0..d {
                        dg[j] += gr[j] * hr[j];
                        db[j] += gr[j];
                        let dh = gr[j] * gm[j];
                        mean_dh += dh;
                        mean_dh_h += dh * hr[j];
                    }
                    mean_dh /= d as f64;
                    mean_dh_h /= d as f64;
                    for j in 0..d {
                        let dh = gr[j] * gm[j];
                        dx[r * d + j] = rstd[r] * (dh - mean_dh - hr[j] * mean_dh_h);
                    }
                }
                acc(*x, dx);
                acc(*gamma, dg);
                acc(*beta, db);
            }
            Op::Attention {
                q,
                k,
                v,
                heads,
                probs,
            } => {
                let (qd, kd, vd) = (self.value(*q).data(), self.value(*k).data(), self.value(*v).data());
                let (t, d) = (self.value(*q).shape()[0], self.value(*q).shape()[1]);
                let tk = self.value(*k).shape()[0];
                let prefix = tk - t;
                let dh = d / heads;
                let scale = 1.0 / (dh as f64).sqrt();
                let mut dq = vec![0.0; t * d];
                let mut dk = vec![0.0; tk * d];
                let mut dv = vec![0.0; tk * d];
                let mut dp = vec![0.0; tk];
                for h in 0..*heads {
                    let off = h * dh;
                    for i in 0..t {
                        let visible = prefix + i + 1;
                        let prow = &probs[(h * t + i) * tk..(h * t + i + 1) * tk];
                        let gi = &g[i * d + off..i * d + off + dh];
                        let mut inner = 0.0;
                        for j in 0..visible {
                            let vj = &vd[j * d + off..j * d + off + dh];
                            dp[j] = dot(gi, vj);
                            inner += prow[j] * dp[j];
                            for (dvv, &gg) in dv[j * d + off..j * d + off + dh].iter_mut().zip(gi) {
                                *dvv += prow[j] * gg;
                            }
                        }
                        let qi = &qd[i * d + off..i * d + off + dh];
                        for j in 0..visible {
                            let ds = prow[j] * (dp[j] - inner) * scale;
                            let kj = &kd[j * d + off..j * d + off + dh];
                            for c in 0..dh {
                                dq[i * d + off + c] += ds * kj[c];
                                dk[j * d + off + c] += ds * qi[c];
                            }
                        }
                    }
                }
                acc(*q, dq);
                acc(*k, dk);
                acc(*v, dv);
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
                count,
            } => {
                let vocab = self.value(*logits).last_dim();
                let scale = g[0] / *count as f64;
                let mut dl = vec![0.0; probs.len()];
                for (i, &target) in targets.iter().enumerate() {
                    if target == IGNORE_INDEX {
                        continue;
                    }
                    for j in 0..vocab {
                        dl[i * vocab + j] = probs[i * vocab + j] * scale;
                    }
                    dl[i * vocab + target] -= scale;
                }
                acc(*logits, dl);
            }
            Op::Sum(x) => {
                let n = self.value(*x).numel();
                acc(*x, vec![g[0]; n]);
            }
        }
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for p in 0..k {
            let aip = a[i * k + p];
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in out[i * n..(i + 1) * n].iter_mut().zip(brow) {
                *o += aip * bv;
            }
        }
    }
    out
}

pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + GELU_A * x * x * x);
    let th = u.tanh();
    let du = GELU_C * (1.0 + 3.0 * GELU_A * x * x);
    0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * du
}
