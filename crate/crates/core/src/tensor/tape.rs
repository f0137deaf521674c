//! Tape of recorded operations and the reverse sweep over it.
//!
//! Every operation appends one node whose inputs are earlier nodes, so the
//! node list is already in topological order. `backward` walks it in exact
//! reverse order. Leaves may borrow their value (model weights are never
//! copied onto the tape) and accumulate gradients across backward calls
//! until [`Tape::zero_grad`].

use super::kernels::{self, dot, gelu, gelu_grad, softmax_row};
use super::Tensor;
use crate::error::{LaknError, Result};

const LN_EPS: f64 = 1e-5;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Single-entry edit applied by [`Tape::edit_entries`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum EntryEdit {
    Set { row: usize, col: usize, value: f64 },
    Scale { row: usize, col: usize, factor: f64 },
}

enum Value<'a> {
    Owned(Tensor),
    Borrowed(&'a Tensor),
}

impl Value<'_> {
    fn get(&self) -> &Tensor {
        match self {
            Value::Owned(t) => t,
            Value::Borrowed(t) => t,
        }
    }
}

enum Op {
    Leaf,
    MatMul(usize, usize),
    MatMulNT(usize, usize),
    Add(usize, usize),
    Mul(usize, usize),
    Scale(usize, f64),
    AddBias(usize, usize),
    Relu(usize),
    Gelu(usize),
    LayerNorm {
        x: usize,
        gain: usize,
        bias: usize,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Embedding {
        table: usize,
        ids: Vec<usize>,
    },
    Attention {
        q: usize,
        k: usize,
        v: usize,
        heads: usize,
        block: usize,
        causal: bool,
        probs: Vec<f64>,
    },
    PrefixAttention {
        q: usize,
        k: usize,
        v: usize,
        k_pre: Option<usize>,
        v_pre: Option<usize>,
        heads: usize,
        probs: Vec<f64>,
    },
    GatherRows {
        src: usize,
        rows: Vec<usize>,
    },
    ReplaceRows {
        base: usize,
        src: usize,
        rows: Vec<usize>,
    },
    EditEntries {
        src: usize,
        edits: Vec<EntryEdit>,
    },
    SoftmaxProb {
        logits: usize,
        targets: Vec<usize>,
        probs: Vec<f64>,
    },
    CrossEntropy {
        logits: usize,
        targets: Vec<usize>,
        probs: Vec<f64>,
        smoothing: f64,
    },
    Sum(usize),
}

struct Node<'a> {
    value: Value<'a>,
    op: Op,
    requires_grad: bool,
    grad: Option<Tensor>,
}

#[derive(Default)]
pub struct Tape<'a> {
    nodes: Vec<Node<'a>>,
}

impl<'a> Tape<'a> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(Value::Owned(value), Op::Leaf, requires_grad)
    }

    /// Leaf that borrows its value; used for model weights.
    pub fn leaf_ref(&mut self, value: &'a Tensor, requires_grad: bool) -> Var {
        self.push(Value::Borrowed(value), Op::Leaf, requires_grad)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        self.nodes[v.0].value.get()
    }

    /// Accumulated gradient of a leaf, if it requires one and backward ran.
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.nodes[v.0].grad.as_ref()
    }

    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    fn push(&mut self, value: Value<'a>, op: Op, requires_grad: bool) -> Var {
        debug_assert!(value.get().is_finite(), "non-finite tensor on tape");
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn val(&self, i: usize) -> &Tensor {
        self.nodes[i].value.get()
    }

    fn rg(&self, ids: &[usize]) -> bool {
        ids.iter().any(|&i| self.nodes[i].requires_grad)
    }

    fn check_finite(t: &Tensor, what: &str) -> Result<()> {
        if t.is_finite() {
            Ok(())
        } else {
            Err(LaknError::Contract(format!("{what} produced non-finite values")))
        }
    }

    fn push_checked(&mut self, t: Tensor, op: Op, inputs: &[usize], what: &str) -> Result<Var> {
        Self::check_finite(&t, what)?;
        let rg = self.rg(inputs);
        Ok(self.push(Value::Owned(t), op, rg))
    }

    // ---------------------------------------------------------------
    // Operations
    // ---------------------------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.val(a.0), self.val(b.0));
        if ta.cols() != tb.rows() || tb.shape().len() < 2 {
            return Err(LaknError::Dimension(format!(
                "matmul {:?} x {:?}",
                ta.shape(),
                tb.shape()
            )));
        }
        let (m, k, n) = (ta.rows(), ta.cols(), tb.cols());
        let mut out = vec![0.0; m * n];
        kernels::matmul(ta.data(), tb.data(), &mut out, m, k, n);
        let t = Tensor::new(vec![m, n], out)?;
        self.push_checked(t, Op::MatMul(a.0, b.0), &[a.0, b.0], "matmul")
    }

    /// a · bᵀ with `b` stored row-major as n×k.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.val(a.0), self.val(b.0));
        if ta.cols() != tb.cols() {
            return Err(LaknError::Dimension(format!(
                "matmul_nt {:?} x {:?}ᵀ",
                ta.shape(),
                tb.shape()
            )));
        }
        let (m, k, n) = (ta.rows(), ta.cols(), tb.rows());
        let mut out = vec![0.0; m * n];
        kernels::matmul_nt(ta.data(), tb.data(), &mut out, m, k, n);
        let t = Tensor::new(vec![m, n], out)?;
        self.push_checked(t, Op::MatMulNT(a.0, b.0), &[a.0, b.0], "matmul_nt")
    }

    fn broadcast_binary(
        &mut self,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        what: &str,
    ) -> Result<Tensor> {
        let (ta, tb) = (self.val(a.0), self.val(b.0));
        let data: Vec<f64> = if ta.shape() == tb.shape() {
            ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect()
        } else if tb.is_scalar() {
            let y = tb.item();
            ta.data().iter().map(|&x| f(x, y)).collect()
        } else if ta.is_scalar() {
            let x = ta.item();
            return Tensor::new(
                tb.shape().to_vec(),
                tb.data().iter().map(|&y| f(x, y)).collect(),
            );
        } else {
            return Err(LaknError::Dimension(format!(
                "{what}: incompatible shapes {:?} and {:?}",
                ta.shape(),
                tb.shape()
            )));
        };
        Tensor::new(ta.shape().to_vec(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.broadcast_binary(a, b, |x, y| x + y, "add")?;
        self.push_checked(t, Op::Add(a.0, b.0), &[a.0, b.0], "add")
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.broadcast_binary(a, b, |x, y| x * y, "mul")?;
        self.push_checked(t, Op::Mul(a.0, b.0), &[a.0, b.0], "mul")
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Result<Var> {
        let ta = self.val(a.0);
        let t = Tensor::new(
            ta.shape().to_vec(),
            ta.data().iter().map(|&x| x * factor).collect(),
        )?;
        self.push_checked(t, Op::Scale(a.0, factor), &[a.0], "scale")
    }

    /// Adds the vector `bias` (length = cols of `a`) to every row of `a`.
    pub fn add_bias(&mut self, a: Var, bias: Var) -> Result<Var> {
        let (ta, tb) = (self.val(a.0), self.val(bias.0));
        let c = ta.cols();
        if tb.numel() != c {
            return Err(LaknError::Dimension(format!(
                "add_bias: bias of {} values for {} columns",
                tb.numel(),
                c
            )));
        }
        let mut data = ta.data().to_vec();
        for row in data.chunks_mut(c) {
            for (x, &b) in row.iter_mut().zip(tb.data()) {
                *x += b;
            }
        }
        let t = Tensor::new(ta.shape().to_vec(), data)?;
        self.push_checked(t, Op::AddBias(a.0, bias.0), &[a.0, bias.0], "add_bias")
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let ta = self.val(a.0);
        let t = Tensor::new(
            ta.shape().to_vec(),
            ta.data().iter().map(|&x| x.max(0.0)).collect(),
        )?;
        self.push_checked(t, Op::Relu(a.0), &[a.0], "relu")
    }

    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        let ta = self.val(a.0);
        let t = Tensor::new(ta.shape().to_vec(), ta.data().iter().map(|&x| gelu(x)).collect())?;
        self.push_checked(t, Op::Gelu(a.0), &[a.0], "gelu")
    }

    /// Row-wise layer normalization with learnable gain and bias.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let tx = self.val(x.0);
        let c = tx.cols();
        if self.val(gain.0).numel() != c || self.val(bias.0).numel() != c {
            return Err(LaknError::Dimension("layer_norm: gain/bias length".into()));
        }
        let (g, b) = (self.val(gain.0).data(), self.val(bias.0).data());
        let rows = tx.rows();
        let mut xhat = vec![0.0; rows * c];
        let mut inv_std = vec![0.0; rows];
        let mut out = vec![0.0; rows * c];
        for r in 0..rows {
            let row = tx.row(r);
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let is = 1.0 / (var + LN_EPS).sqrt();
            inv_std[r] = is;
            for j in 0..c {
                let xh = (row[j] - mean) * is;
                xhat[r * c + j] = xh;
                out[r * c + j] = xh * g[j] + b[j];
            }
        }
        let t = Tensor::new(tx.shape().to_vec(), out)?;
        self.push_checked(
            t,
            Op::LayerNorm {
                x: x.0,
                gain: gain.0,
                bias: bias.0,
                xhat,
                inv_std,
            },
            &[x.0, gain.0, bias.0],
            "layer_norm",
        )
    }

    /// Gathers rows `ids` of `table`.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let tt = self.val(table.0);
        let (v, d) = (tt.rows(), tt.cols());
        if let Some(&bad) = ids.iter().find(|&&i| i >= v) {
            return Err(LaknError::Index(format!("token id {bad} >= vocabulary {v}")));
        }
        if ids.is_empty() {
            return Err(LaknError::Dimension("embedding of empty sequence".into()));
        }
        let mut out = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            out.extend_from_slice(tt.row(i));
        }
        let t = Tensor::new(vec![ids.len(), d], out)?;
        self.push_checked(
            t,
            Op::Embedding {
                table: table.0,
                ids: ids.to_vec(),
            },
            &[table.0],
            "embedding",
        )
    }

    /// Multi-head scaled dot-product attention over independent blocks of
    /// `block` consecutive rows (one block per sequence).
    pub fn attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        block: usize,
        causal: bool,
    ) -> Result<Var> {
        let (tq, tk, tv) = (self.val(q.0), self.val(k.0), self.val(v.0));
        let (rows, d) = (tq.rows(), tq.cols());
        if tk.shape() != tq.shape() || tv.shape() != tq.shape() {
            return Err(LaknError::Dimension("attention: q/k/v shapes differ".into()));
        }
        if heads == 0 || d % heads != 0 || block == 0 || rows % block != 0 {
            return Err(LaknError::Dimension(format!(
                "attention: {rows} rows, width {d}, {heads} heads, block {block}"
            )));
        }
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let nb = rows / block;
        let mut probs = vec![0.0; nb * heads * block * block];
        let mut out = vec![0.0; rows * d];
        let mut scores = vec![0.0; block];
        for b in 0..nb {
            for h in 0..heads {
                let base = ((b * heads + h) * block) * block;
                for i in 0..block {
                    let qi = &tq.row(b * block + i)[h * dh..(h + 1) * dh];
                    let visible = if causal { i + 1 } else { block };
                    for j in 0..visible {
                        let kj = &tk.row(b * block + j)[h * dh..(h + 1) * dh];
                        scores[j] = dot(qi, kj) * scale;
                    }
                    let p = &mut probs[base + i * block..base + i * block + visible];
                    softmax_row(&scores[..visible], p);
                    let orow = &mut out[(b * block + i) * d + h * dh..(b * block + i) * d + (h + 1) * dh];
                    for (j, &pj) in p.iter().enumerate() {
                        let vj = &tv.row(b * block + j)[h * dh..(h + 1) * dh];
                        for (o, &x) in orow.iter_mut().zip(vj) {
                            *o += pj * x;
                        }
                    }
                }
            }
        }
        let t = Tensor::new(vec![rows, d], out)?;
        self.push_checked(
            t,
            Op::Attention {
                q: q.0,
                k: k.0,
                v: v.0,
                heads,
                block,
                causal,
                probs,
            },
            &[q.0, k.0, v.0],
            "attention",
        )
    }

    /// Attention where every query row attends to a shared, constant prefix
    /// of keys/values plus its own key/value. This is the last-position view
    /// of causal attention with the earlier positions cached.
    pub fn prefix_attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        prefix: Option<(Var, Var)>,
        heads: usize,
    ) -> Result<Var> {
        let (tq, tk, tv) = (self.val(q.0), self.val(k.0), self.val(v.0));
        let (rows, d) = (tq.rows(), tq.cols());
        if tk.shape() != tq.shape() || tv.shape() != tq.shape() {
            return Err(LaknError::Dimension("prefix_attention: q/k/v shapes differ".into()));
        }
        if heads == 0 || d % heads != 0 {
            return Err(LaknError::Dimension("prefix_attention: heads".into()));
        }
        let (kp, vp) = match prefix {
            Some((kp, vp)) => {
                let (a, b) = (self.val(kp.0), self.val(vp.0));
                if a.cols() != d || b.cols() != d || a.rows() != b.rows() {
                    return Err(LaknError::Dimension("prefix_attention: prefix shape".into()));
                }
                (Some(a), Some(b))
            }
            None => (None, None),
        };
        let np = kp.map_or(0, |t| t.rows());
        let width = np + 1;
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut probs = vec![0.0; rows * heads * width];
        let mut out = vec![0.0; rows * d];
        let mut scores = vec![0.0; width];
        for r in 0..rows {
            for h in 0..heads {
                let sl = h * dh..(h + 1) * dh;
                let qi = &tq.row(r)[sl.clone()];
                for j in 0..np {
                    scores[j] = dot(qi, &kp.unwrap().row(j)[sl.clone()]) * scale;
                }
                scores[np] = dot(qi, &tk.row(r)[sl.clone()]) * scale;
                let base = (r * heads + h) * width;
                let p = &mut probs[base..base + width];
                softmax_row(&scores, p);
                let orow = &mut out[r * d + h * dh..r * d + (h + 1) * dh];
                for (j, &pj) in p.iter().enumerate() {
                    let vj = if j < np {
                        &vp.unwrap().row(j)[sl.clone()]
                    } else {
                        &tv.row(r)[sl.clone()]
                    };
                    for (o, &x) in orow.iter_mut().zip(vj) {
                        *o += pj * x;
                    }
                }
            }
        }
        let t = Tensor::new(vec![rows, d], out)?;
        self.push_checked(
            t,
            Op::PrefixAttention {
                q: q.0,
                k: k.0,
                v: v.0,
                k_pre: prefix.map(|p| p.0 .0),
                v_pre: prefix.map(|p| p.1 .0),
                heads,
                probs,
            },
            &[q.0, k.0, v.0],
            "prefix_attention",
        )
    }

    pub fn gather_rows(&mut self, src: Var, rows: &[usize]) -> Result<Var> {
        let ts = self.val(src.0);
        if let Some(&bad) = rows.iter().find(|&&r| r >= ts.rows()) {
            return Err(LaknError::Index(format!("row {bad} >= {}", ts.rows())));
        }
        let mut out = Vec::with_capacity(rows.len() * ts.cols());
        for &r in rows {
            out.extend_from_slice(ts.row(r));
        }
        let t = Tensor::new(vec![rows.len(), ts.cols()], out)?;
        self.push_checked(
            t,
            Op::GatherRows {
                src: src.0,
                rows: rows.to_vec(),
            },
            &[src.0],
            "gather_rows",
        )
    }

    /// Copy of `base` whose row `rows[i]` is replaced by row `i` of `src`.
    pub fn replace_rows(&mut self, base: Var, src: Var, rows: &[usize]) -> Result<Var> {
        let (tb, ts) = (self.val(base.0), self.val(src.0));
        if tb.cols() != ts.cols() || ts.rows() != rows.len() {
            return Err(LaknError::Dimension(format!(
                "replace_rows: base {:?}, src {:?}, {} rows",
                tb.shape(),
                ts.shape(),
                rows.len()
            )));
        }
        if let Some(&bad) = rows.iter().find(|&&r| r >= tb.rows()) {
            return Err(LaknError::Index(format!("row {bad} >= {}", tb.rows())));
        }
        let mut out = tb.clone();
        for (i, &r) in rows.iter().enumerate() {
            out.row_mut(r).copy_from_slice(ts.row(i));
        }
        self.push_checked(
            out,
            Op::ReplaceRows {
                base: base.0,
                src: src.0,
                rows: rows.to_vec(),
            },
            &[base.0, src.0],
            "replace_rows",
        )
    }

    pub fn edit_entries(&mut self, src: Var, edits: &[EntryEdit]) -> Result<Var> {
        let mut out = self.val(src.0).clone();
        let (r, c) = (out.rows(), out.cols());
        for e in edits {
            let (row, col) = match *e {
                EntryEdit::Set { row, col, .. } | EntryEdit::Scale { row, col, .. } => (row, col),
            };
            if row >= r || col >= c {
                return Err(LaknError::Index(format!("entry ({row}, {col}) outside {r}x{c}")));
            }
            match *e {
                EntryEdit::Set { value, .. } => out.set(row, col, value),
                EntryEdit::Scale { factor, .. } => out.set(row, col, out.get(row, col) * factor),
            }
        }
        self.push_checked(
            out,
            Op::EditEntries {
                src: src.0,
                edits: edits.to_vec(),
            },
            &[src.0],
            "edit_entries",
        )
    }

    /// Probability of `targets[r]` under softmax of logits row `r`; shape rows×1.
    pub fn softmax_prob(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let tl = self.val(logits.0);
        let (rows, v) = (tl.rows(), tl.cols());
        Self::check_targets(rows, v, targets)?;
        let mut probs = vec![0.0; rows * v];
        let mut out = vec![0.0; rows];
        for r in 0..rows {
            softmax_row(tl.row(r), &mut probs[r * v..(r + 1) * v]);
            out[r] = probs[r * v + targets[r]];
        }
        let t = Tensor::new(vec![rows, 1], out)?;
        self.push_checked(
            t,
            Op::SoftmaxProb {
                logits: logits.0,
                targets: targets.to_vec(),
                probs,
            },
            &[logits.0],
            "softmax_prob",
        )
    }

    /// Summed cross-entropy −log softmax(logits_r)[target_r] over rows.
    pub fn softmax_cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        self.smoothed_cross_entropy(logits, targets, 0.0)
    }

    /// Cross-entropy against `(1 − ε)·onehot + ε/V`, summed over rows.
    pub fn smoothed_cross_entropy(&mut self, logits: Var, targets: &[usize], smoothing: f64) -> Result<Var> {
        if !(0.0..1.0).contains(&smoothing) {
            return Err(LaknError::Contract(format!("label smoothing {smoothing} outside [0, 1)")));
        }
        let tl = self.val(logits.0);
        let (rows, v) = (tl.rows(), tl.cols());
        Self::check_targets(rows, v, targets)?;
        let mut probs = vec![0.0; rows * v];
        let mut loss = 0.0;
        for r in 0..rows {
            let row = tl.row(r);
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
            loss += lse - row[targets[r]];
            if smoothing > 0.0 {
                let mean = row.iter().sum::<f64>() / v as f64;
                loss += smoothing * (row[targets[r]] - mean);
            }
            softmax_row(row, &mut probs[r * v..(r + 1) * v]);
        }
        let t = Tensor::scalar(loss);
        self.push_checked(
            t,
            Op::CrossEntropy {
                logits: logits.0,
                targets: targets.to_vec(),
                probs,
                smoothing,
            },
            &[logits.0],
            "softmax_cross_entropy",
        )
    }

    fn check_targets(rows: usize, v: usize, targets: &[usize]) -> Result<()> {
        if targets.len() != rows {
            return Err(LaknError::Dimension(format!(
                "{} targets for {rows} rows",
                targets.len()
            )));
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= v) {
            return Err(LaknError::Index(format!("target {bad} >= vocabulary {v}")));
        }
        Ok(())
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.val(a.0).data().iter().sum::<f64>();
        self.push_checked(Tensor::scalar(s), Op::Sum(a.0), &[a.0], "sum")
    }

    // ---------------------------------------------------------------
    // Reverse sweep
    // ---------------------------------------------------------------

    /// Propagates d(loss)/d(node) back through the tape and accumulates the
    /// result into every grad-requiring leaf.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.nodes.is_empty() {
            return Err(LaknError::Contract("backward on an empty tape".into()));
        }
        if !self.val(loss.0).is_scalar() {
            return Err(LaknError::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.val(loss.0).shape()
            )));
        }
        let mut adj: Vec<Option<Vec<f64>>> = (0..=loss.0).map(|_| None).collect();
        adj[loss.0] = Some(vec![1.0]);

        for i in (0..=loss.0).rev() {
            let Some(g) = adj[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            if let Op::Leaf = self.nodes[i].op {
                let shape = self.val(i).shape().to_vec();
                let node = &mut self.nodes[i];
                match &mut node.grad {
                    Some(acc) => {
                        for (a, b) in acc.data_mut().iter_mut().zip(&g) {
                            *a += b;
                        }
                    }
                    None => node.grad = Some(Tensor::new(shape, g)?),
                }
                continue;
            }
            self.propagate(i, &g, &mut adj);
        }
        Ok(())
    }

    fn wants(&self, i: usize) -> bool {
        self.nodes[i].requires_grad
    }

    fn propagate(&self, i: usize, g: &[f64], adj: &mut [Option<Vec<f64>>]) {
        let out = self.val(i);
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.val(*a), self.val(*b));
                let (m, k, n) = (ta.rows(), ta.cols(), tb.cols());
                if self.wants(*a) {
                    let da = slot(adj, *a, m * k);
                    kernels::matmul_nt(g, tb.data(), da, m, n, k);
                }
                if self.wants(*b) {
                    let db = slot(adj, *b, k * n);
                    kernels::matmul_tn(ta.data(), g, db, m, k, n);
                }
            }
            Op::MatMulNT(a, b) => {
                let (ta, tb) = (self.val(*a), self.val(*b));
                let (m, k, n) = (ta.rows(), ta.cols(), tb.rows());
                if self.wants(*a) {
                    let da = slot(adj, *a, m * k);
                    kernels::matmul(g, tb.data(), da, m, n, k);
                }
                if self.wants(*b) {
                    let db = slot(adj, *b, n * k);
                    kernels::matmul_tn(g, ta.data(), db, m, n, k);
                }
            }
            Op::Add(a, b) => {
                for &x in [a, b] {
                    if self.wants(x) {
                        reduce_into(adj, x, self.val(x).numel(), g, |_| 1.0);
                    }
                }
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (self.val(*a), self.val(*b));
                if self.wants(*a) {
                    reduce_into(adj, *a, ta.numel(), g, |j| broadcast_at(tb, j));
                }
                if self.wants(*b) {
                    reduce_into(adj, *b, tb.numel(), g, |j| broadcast_at(ta, j));
                }
            }
            Op::Scale(a, f) => {
                let da = slot(adj, *a, g.len());
                for (d, &x) in da.iter_mut().zip(g) {
                    *d += x * f;
                }
            }
            Op::AddBias(a, b) => {
                if self.wants(*a) {
                    let da = slot(adj, *a, g.len());
                    for (d, &x) in da.iter_mut().zip(g) {
                        *d += x;
                    }
                }
                if self.wants(*b) {
                    let c = out.cols();
                    let db = slot(adj, *b, c);
                    for row in g.chunks(c) {
                        for (d, &x) in db.iter_mut().zip(row) {
                            *d += x;
                        }
                    }
                }
            }
            Op::Relu(a) => {
                let ta = self.val(*a);
                let da = slot(adj, *a, g.len());
                for ((d, &x), &gi) in da.iter_mut().zip(ta.data()).zip(g) {
                    if x > 0.0 {
                        *d += gi;
                    }
                }
            }
            Op::Gelu(a) => {
                let ta = self.val(*a);
                let da = slot(adj, *a, g.len());
                for ((d, &x), &gi) in da.iter_mut().zip(ta.data()).zip(g) {
                    *d += gi * gelu_grad(x);
                }
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            } => {
                let c = out.cols();
                let rows = out.rows();
                let gv = self.val(*gain).data();
                if self.wants(*x) {
                    let dx = slot(adj, *x, rows * c);
                    let mut dxh = vec![0.0; c];
                    for r in 0..rows {
                        let gr = &g[r * c..(r + 1) * c];
                        let xh = &xhat[r * c..(r + 1) * c];
                        let mut m1 = 0.0;
                        let mut m2 = 0.0;
                        for j in 0..c {
                            dxh[j] = gr[j] * gv[j];
                            m1 += dxh[j];
                            m2 += dxh[j] * xh[j];
                        }
                        m1 /= c as f64;
                        m2 /= c as f64;
                        for j in 0..c {
                            dx[r * c + j] += inv_std[r] * (dxh[j] - m1 - xh[j] * m2);
                        }
                    }
                }
                if self.wants(*gain) {
                    let dg = slot(adj, *gain, c);
                    for r in 0..rows {
                        for j in 0..c {
                            dg[j] += g[r * c + j] * xhat[r * c + j];
                        }
                    }
                }
                if self.wants(*bias) {
                    let db = slot(adj, *bias, c);
                    for row in g.chunks(c) {
                        for (d, &x) in db.iter_mut().zip(row) {
                            *d += x;
                        }
                    }
                }
            }
            Op::Embedding { table, ids } => {
                let tt = self.val(*table);
                let d = tt.cols();
                let dt = slot(adj, *table, tt.numel());
                for (r, &id) in ids.iter().enumerate() {
                    for j in 0..d {
                        dt[id * d + j] += g[r * d + j];
                    }
                }
            }
            Op::Attention {
                q,
                k,
                v,
                heads,
                block,
                causal,
                probs,
            } => self.attention_backward(g, adj, (*q, *k, *v), *heads, *block, *causal, probs),
            Op::PrefixAttention {
                q,
                k,
                v,
                k_pre,
                v_pre,
                heads,
                probs,
            } => self.prefix_attention_backward(g, adj, (*q, *k, *v), (*k_pre, *v_pre), *heads, probs),
            Op::GatherRows { src, rows } => {
                let ts = self.val(*src);
                let c = ts.cols();
                let ds = slot(adj, *src, ts.numel());
                for (i, &r) in rows.iter().enumerate() {
                    for j in 0..c {
                        ds[r * c + j] += g[i * c + j];
                    }
                }
            }
            Op::ReplaceRows { base, src, rows } => {
                let c = out.cols();
                if self.wants(*base) {
                    let mut gb = g.to_vec();
                    for &r in rows {
                        gb[r * c..(r + 1) * c].iter_mut().for_each(|x| *x = 0.0);
                    }
                    let db = slot(adj, *base, gb.len());
                    for (d, x) in db.iter_mut().zip(gb) {
                        *d += x;
                    }
                }
                if self.wants(*src) {
                    let ds = slot(adj, *src, rows.len() * c);
                    for (i, &r) in rows.iter().enumerate() {
                        for j in 0..c {
                            ds[i * c + j] += g[r * c + j];
                        }
                    }
                }
            }
            Op::EditEntries { src, edits } => {
                let c = out.cols();
                let mut gs = g.to_vec();
                for e in edits {
                    match *e {
                        EntryEdit::Set { row, col, .. } => gs[row * c + col] = 0.0,
                        EntryEdit::Scale { row, col, factor } => gs[row * c + col] *= factor,
                    }
                }
                let ds = slot(adj, *src, gs.len());
                for (d, x) in ds.iter_mut().zip(gs) {
                    *d += x;
                }
            }
            Op::SoftmaxProb {
                logits,
                targets,
                probs,
            } => {
                let v = self.val(*logits).cols();
                let dl = slot(adj, *logits, probs.len());
                for (r, &t) in targets.iter().enumerate() {
                    let p = &probs[r * v..(r + 1) * v];
                    let pt = p[t];
                    for j in 0..v {
                        let onehot = if j == t { 1.0 } else { 0.0 };
                        dl[r * v + j] += g[r] * pt * (onehot - p[j]);
                    }
                }
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
                smoothing,
            } => {
                let v = self.val(*logits).cols();
                let dl = slot(adj, *logits, probs.len());
                let floor = smoothing / v as f64;
                for (r, &t) in targets.iter().enumerate() {
                    for j in 0..v {
                        let target = if j == t { 1.0 - smoothing + floor } else { floor };
                        dl[r * v + j] += g[0] * (probs[r * v + j] - target);
                    }
                }
            }
            Op::Sum(a) => {
                let da = slot(adj, *a, self.val(*a).numel());
                for d in da.iter_mut() {
                    *d += g[0];
                }
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn attention_backward(
        &self,
        g: &[f64],
        adj: &mut [Option<Vec<f64>>],
        (q, k, v): (usize, usize, usize),
        heads: usize,
        block: usize,
        causal: bool,
        probs: &[f64],
    ) {
        let (tq, tk, tv) = (self.val(q), self.val(k), self.val(v));
        let (rows, d) = (tq.rows(), tq.cols());
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut dq = vec![0.0; rows * d];
        let mut dk = vec![0.0; rows * d];
        let mut dv = vec![0.0; rows * d];
        let mut dp = vec![0.0; block];
        for b in 0..rows / block {
            for h in 0..heads {
                let base = ((b * heads + h) * block) * block;
                let sl = h * dh..(h + 1) * dh;
                for i in 0..block {
                    let ri = b * block + i;
                    let visible = if causal { i + 1 } else { block };
                    let p = &probs[base + i * block..base + i * block + visible];
                    let go = &g[ri * d + h * dh..ri * d + (h + 1) * dh];
                    let mut inner = 0.0;
                    for j in 0..visible {
                        let rj = b * block + j;
                        dp[j] = dot(go, &tv.row(rj)[sl.clone()]);
                        inner += p[j] * dp[j];
                        for (x, &gv) in dv[rj * d + h * dh..rj * d + (h + 1) * dh].iter_mut().zip(go) {
                            *x += p[j] * gv;
                        }
                    }
                    for j in 0..visible {
                        let rj = b * block + j;
                        let ds = p[j] * (dp[j] - inner) * scale;
                        if ds == 0.0 {
                            continue;
                        }
                        let kj = &tk.row(rj)[sl.clone()];
                        let qi = &tq.row(ri)[sl.clone()];
                        for t in 0..dh {
                            dq[ri * d + h * dh + t] += ds * kj[t];
                            dk[rj * d + h * dh + t] += ds * qi[t];
                        }
                    }
                }
            }
        }
        for (idx, grad) in [(q, dq), (k, dk), (v, dv)] {
            if self.wants(idx) {
                let s = slot(adj, idx, rows * d);
                for (a, b) in s.iter_mut().zip(grad) {
                    *a += b;
                }
            }
        }
    }

    fn prefix_attention_backward(
        &self,
        g: &[f64],
        adj: &mut [Option<Vec<f64>>],
        (q, k, v): (usize, usize, usize),
        (k_pre, v_pre): (Option<usize>, Option<usize>),
        heads: usize,
        probs: &[f64],
    ) {
        let (tq, tk, tv) = (self.val(q), self.val(k), self.val(v));
        let kp = k_pre.map(|i| self.val(i));
        let vp = v_pre.map(|i| self.val(i));
        let np = kp.map_or(0, |t| t.rows());
        let width = np + 1;
        let (rows, d) = (tq.rows(), tq.cols());
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut dq = vec![0.0; rows * d];
        let mut dk = vec![0.0; rows * d];
        let mut dv = vec![0.0; rows * d];
        let mut dp = vec![0.0; width];
        for r in 0..rows {
            for h in 0..heads {
                let sl = h * dh..(h + 1) * dh;
                let base = (r * heads + h) * width;
                let p = &probs[base..base + width];
                let go = &g[r * d + h * dh..r * d + (h + 1) * dh];
                let mut inner = 0.0;
                for j in 0..width {
                    let vj = if j < np {
                        &vp.unwrap().row(j)[sl.clone()]
                    } else {
                        &tv.row(r)[sl.clone()]
                    };
                    dp[j] = dot(go, vj);
                    inner += p[j] * dp[j];
                }
                for (x, &gv) in dv[r * d + h * dh..r * d + (h + 1) * dh].iter_mut().zip(go) {
                    *x += p[np] * gv;
                }
                let qi = &tq.row(r)[sl.clone()];
                for j in 0..width {
                    let ds = p[j] * (dp[j] - inner) * scale;
                    if ds == 0.0 {
                        continue;
                    }
                    let kj = if j < np {
                        &kp.unwrap().row(j)[sl.clone()]
                    } else {
                        &tk.row(r)[sl.clone()]
                    };
                    for t in 0..dh {
                        dq[r * d + h * dh + t] += ds * kj[t];
                    }
                    if j == np {
                        for t in 0..dh {
                            dk[r * d + h * dh + t] += ds * qi[t];
                        }
                    }
                }
            }
        }
        for (idx, grad) in [(q, dq), (k, dk), (v, dv)] {
            if self.wants(idx) {
                let s = slot(adj, idx, rows * d);
                for (a, b) in s.iter_mut().zip(grad) {
                    *a += b;
                }
            }
        }
    }
}

fn slot(adj: &mut [Option<Vec<f64>>], i: usize, len: usize) -> &mut Vec<f64> {
    adj[i].get_or_insert_with(|| vec![0.0; len])
}

fn broadcast_at(t: &Tensor, j: usize) -> f64 {
    if t.is_scalar() {
        t.item()
    } else {
        t.data()[j]
    }
}

/// Accumulates `g[j] * factor(j)` into input `x`, summing when `x` was broadcast.
fn reduce_into(
    adj: &mut [Option<Vec<f64>>],
    x: usize,
    numel: usize,
    g: &[f64],
    factor: impl Fn(usize) -> f64,
) {
    let dx = slot(adj, x, numel);
    if numel == g.len() {
        for (j, (d, &gj)) in dx.iter_mut().zip(g).enumerate() {
            *d += gj * factor(j);
        }
    } else {
        dx[0] += g.iter().enumerate().map(|(j, &gj)| gj * factor(j)).sum::<f64>();
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t2(rows: usize, cols: usize, data: &[f64]) -> Tensor {
        Tensor::matrix(rows, cols, data.to_vec()).unwrap()
    }

    #[test]
    fn identity_matmul() {
        let mut tape = Tape::new();
        let a = tape.leaf(Tensor::identity(2), false);
        let b = tape.leaf(Tensor::identity(2), false);
        let c = tape.matmul(a, b).unwrap();
        assert_eq!(tape.value(c), &Tensor::identity(2));
    }

    #[test]
    fn hand_matmul() {
        let mut tape = Tape::new();
        let a = tape.leaf(t2(2, 2, &[1.0, 2.0, 3.0, 4.0]), false);
        let b = tape.leaf(t2(2, 1, &[1.0, 1.0]), false);
        let c = tape.matmul(a, b).unwrap();
        assert_eq!(tape.value(c).data(), &[3.0, 7.0]);
    }

    #[test]
    fn matmul_shape_mismatch_is_dimension_error() {
        let mut tape = Tape::new();
        let a = tape.leaf(Tensor::zeros(&[2, 3]), false);
        let b = tape.leaf(Tensor::zeros(&[2, 3]), false);
        assert!(matches!(tape.matmul(a, b), Err(LaknError::Dimension(_))));
    }

    #[test]
    fn add_zero_is_identity() {
        let mut tape = Tape::new();
        let x = tape.leaf(t2(1, 3, &[1.5, -2.0, 0.25]), false);
        let z = tape.leaf(Tensor::scalar(0.0), false);
        let y = tape.add(x, z).unwrap();
        assert_eq!(tape.value(y).data(), &[1.5, -2.0, 0.25]);
    }

    #[test]
    fn incompatible_add_is_dimension_error() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::zeros(&[2, 2]), false);
        let y = tape.leaf(Tensor::zeros(&[2, 3]), false);
        assert!(matches!(tape.add(x, y), Err(LaknError::Dimension(_))));
    }

    #[test]
    fn relu_definition() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::vector(vec![-1.0, 0.0, 2.0]), false);
        let y = tape.relu(x).unwrap();
        assert_eq!(tape.value(y).data(), &[0.0, 0.0, 2.0]);
    }

    #[test]
    fn uniform_logits_loss_is_ln_vocab() {
        let mut tape = Tape::new();
        let l = tape.leaf(t2(1, 4, &[0.3; 4]), true);
        let loss = tape.softmax_cross_entropy(l, &[2]).unwrap();
        assert!((tape.value(loss).item() - 4f64.ln()).abs() < 1e-15);
        tape.backward(loss).unwrap();
        let g: f64 = tape.grad(l).unwrap().data().iter().sum();
        assert!(g.abs() < 1e-10);
    }

    #[test]
    fn peaked_logits_loss_matches_direct_formula() {
        let mut tape = Tape::new();
        let l = tape.leaf(t2(1, 3, &[10.0, 0.0, 0.0]), true);
        let loss = tape.softmax_cross_entropy(l, &[0]).unwrap();
        let direct = -(10f64.exp() / (10f64.exp() + 2.0)).ln();
        assert!((tape.value(loss).item() - direct).abs() < 1e-15);
        assert!((direct - 9.08e-5).abs() < 1e-6);
        tape.backward(loss).unwrap();
        let g = tape.grad(l).unwrap().data();
        assert!(g.iter().sum::<f64>().abs() < 1e-10);
        // softmax − one_hot
        let p0 = 10f64.exp() / (10f64.exp() + 2.0);
        assert!((g[0] - (p0 - 1.0)).abs() < 1e-15);
    }

    #[test]
    fn target_out_of_range_is_index_error() {
        let mut tape = Tape::new();
        let l = tape.leaf(t2(1, 3, &[0.0; 3]), false);
        assert!(matches!(tape.softmax_cross_entropy(l, &[3]), Err(LaknError::Index(_))));
    }

    #[test]
    fn identity_and_square_gradients() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::scalar(3.0), true);
        let y = tape.sum(x).unwrap();
        tape.backward(y).unwrap();
        assert_eq!(tape.grad(x).unwrap().item(), 1.0);

        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::scalar(3.0), true);
        let y = tape.mul(x, x).unwrap();
        tape.backward(y).unwrap();
        assert_eq!(tape.grad(x).unwrap().item(), 6.0);
    }

    #[test]
    fn repeated_backward_accumulates_until_reset() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::scalar(3.0), true);
        let y = tape.mul(x, x).unwrap();
        tape.backward(y).unwrap();
        tape.backward(y).unwrap();
        assert_eq!(tape.grad(x).unwrap().item(), 12.0);
        tape.zero_grad();
        tape.backward(y).unwrap();
        assert_eq!(tape.grad(x).unwrap().item(), 6.0);
    }

    #[test]
    fn non_scalar_loss_is_contract_error() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::zeros(&[2, 2]), true);
        assert!(matches!(tape.backward(x), Err(LaknError::Contract(_))));
        let mut empty = Tape::new();
        let mut other = Tape::new();
        let v = other.leaf(Tensor::scalar(1.0), true);
        assert!(matches!(empty.backward(v), Err(LaknError::Contract(_))));
    }

    #[test]
    fn softmax_prob_rows_are_probabilities() {
        let mut tape = Tape::new();
        let l = tape.leaf(t2(2, 3, &[1.0, 2.0, 3.0, -1.0, 0.0, 5.0]), false);
        let p = tape.softmax_prob(l, &[2, 0]).unwrap();
        let v = tape.value(p).data();
        assert!(v.iter().all(|&x| x > 0.0 && x < 1.0));
    }

    #[test]
    fn smoothed_cross_entropy_matches_finite_differences() {
        let x = t2(2, 4, &[0.3, -1.2, 2.0, 0.1, 1.5, 0.0, -0.4, 0.9]);
        let err = crate::tensor::gradcheck::finite_diff_check(
            |t, l| t.smoothed_cross_entropy(l, &[2, 3], 0.2),
            &x,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-7, "{err}");
    }

    #[test]
    fn smoothing_outside_unit_interval_is_rejected() {
        let mut tape = Tape::new();
        let l = tape.leaf(t2(1, 3, &[0.0; 3]), false);
        assert!(tape.smoothed_cross_entropy(l, &[0], 1.0).is_err());
        assert!(tape.smoothed_cross_entropy(l, &[0], -0.1).is_err());
    }
}
