//! Reverse-mode differentiation over a per-pass tape.
//!
//! A [`Graph`] is built fresh for every forward pass. Each operation appends a
//! node holding its value (always viewed as a `rows x cols` matrix) and enough
//! cached state to run its adjoint. [`Graph::backward`] walks the tape once in
//! reverse; a second walk requires [`Graph::zero_grad`] first.

use crate::error::{Error, Result};
use crate::numerics::tensor::Tensor;

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_A: f64 = 0.044_715;

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulBT(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    ScaleRows(Var, Var),
    Gelu(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    Softmax(Var),
    CrossEntropy {
        logits: Var,
        targets: Vec<Option<usize>>,
        probs: Vec<f64>,
        count: usize,
    },
    Gather {
        table: Var,
        ids: Vec<usize>,
    },
    SliceCols {
        x: Var,
        start: usize,
    },
    ConcatCols(Vec<Var>),
    Sum(Var),
    Mean(Var),
    RowEntropy(Var),
    StraightThrough(Var),
    NormalizeRows(Var),
}

#[derive(Debug)]
struct Node {
    rows: usize,
    cols: usize,
    value: Vec<f64>,
    op: Op,
    requires_grad: bool,
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
    trainable: Vec<Var>,
    backward_done: bool,
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

    fn push(&mut self, rows: usize, cols: usize, value: Vec<f64>, op: Op, requires_grad: bool) -> Var {
        debug_assert_eq!(rows * cols, value.len());
        self.nodes.push(Node {
            rows,
            cols,
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn node(&self, v: Var) -> &Node {
        &self.nodes[v.0]
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Leaf bound to a tensor; differentiable iff the tensor requires grad.
    /// Trainable leaves are remembered in binding order.
    pub fn param(&mut self, t: &Tensor) -> Var {
        let v = self.push(t.rows(), t.cols(), t.values().to_vec(), Op::Leaf, t.requires_grad());
        if t.requires_grad() {
            self.trainable.push(v);
        }
        v
    }

    /// Trainable leaves created by [`Graph::param`], in binding order.
    pub fn trainable_leaves(&self) -> &[Var] {
        &self.trainable
    }

    /// Non-differentiable leaf.
    pub fn constant(&mut self, rows: usize, cols: usize, values: Vec<f64>) -> Result<Var> {
        if rows * cols != values.len() || rows == 0 || cols == 0 {
            return Err(Error::Dimension(format!(
                "constant {rows}x{cols} with {} values",
                values.len()
            )));
        }
        Ok(self.push(rows, cols, values, Op::Leaf, false))
    }

    /// Differentiable leaf not tied to any tensor.
    pub fn variable(&mut self, rows: usize, cols: usize, values: Vec<f64>) -> Result<Var> {
        let v = self.constant(rows, cols, values)?;
        self.nodes[v.0].requires_grad = true;
        Ok(v)
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.node(v).value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        let n = self.node(v);
        (n.rows, n.cols)
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.node(v).value[0]
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.node(v).requires_grad
    }

    /// Adjoint of `v` after [`Graph::backward`]; `None` if no gradient reached it.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Adjoint of `v`, zeros if nothing flowed into it.
    pub fn grad_or_zeros(&self, v: Var) -> Vec<f64> {
        match self.grad(v) {
            Some(g) => g.to_vec(),
            None => vec![0.0; self.node(v).value.len()],
        }
    }

    fn check_same(&self, a: Var, b: Var, what: &str) -> Result<(usize, usize)> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(Error::Dimension(format!("{what}: {sa:?} vs {sb:?}")));
        }
        Ok(sa)
    }

    /// `a (m x k) * b (k x n)`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let ((m, k), (k2, n)) = (self.shape(a), self.shape(b));
        if k != k2 {
            return Err(Error::Dimension(format!("matmul {m}x{k} by {k2}x{n}")));
        }
        let (av, bv) = (&self.node(a).value, &self.node(b).value);
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let orow = &mut out[i * n..(i + 1) * n];
            for p in 0..k {
                let aip = av[i * k + p];
                if aip == 0.0 {
                    continue;
                }
                let brow = &bv[p * n..(p + 1) * n];
                for (o, &bpj) in orow.iter_mut().zip(brow) {
                    *o += aip * bpj;
                }
            }
        }
        let rg = self.rg(&[a, b]);
        Ok(self.push(m, n, out, Op::MatMul(a, b), rg))
    }

    /// `a (m x k) * b^T` where `b` is `n x k`.
    pub fn matmul_bt(&mut self, a: Var, b: Var) -> Result<Var> {
        let ((m, k), (n, k2)) = (self.shape(a), self.shape(b));
        if k != k2 {
            return Err(Error::Dimension(format!("matmul_bt {m}x{k} by ({n}x{k2})^T")));
        }
        let (av, bv) = (&self.node(a).value, &self.node(b).value);
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let arow = &av[i * k..(i + 1) * k];
            for j in 0..n {
                let brow = &bv[j * k..(j + 1) * k];
                out[i * n + j] = dot(arow, brow);
            }
        }
        let rg = self.rg(&[a, b]);
        Ok(self.push(m, n, out, Op::MatMulBT(a, b), rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, n) = self.check_same(a, b, "add")?;
        let out = self.node(a).value.iter().zip(&self.node(b).value).map(|(x, y)| x + y).collect();
        let rg = self.rg(&[a, b]);
        Ok(self.push(m, n, out, Op::Add(a, b), rg))
    }

    /// Adds a `1 x n` row to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let ((m, n), (r, c)) = (self.shape(a), self.shape(row));
        if r != 1 || c != n {
            return Err(Error::Dimension(format!("add_row {m}x{n} + {r}x{c}")));
        }
        let bv = &self.node(row).value;
        let mut out = self.node(a).value.clone();
        for chunk in out.chunks_mut(n) {
            for (o, b) in chunk.iter_mut().zip(bv) {
                *o += b;
            }
        }
        let rg = self.rg(&[a, row]);
        Ok(self.push(m, n, out, Op::AddRow(a, row), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, n) = self.check_same(a, b, "mul")?;
        let out = self.node(a).value.iter().zip(&self.node(b).value).map(|(x, y)| x * y).collect();
        let rg = self.rg(&[a, b]);
        Ok(self.push(m, n, out, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let (m, n) = self.shape(a);
        let out = self.node(a).value.iter().map(|x| x * c).collect();
        let rg = self.rg(&[a]);
        self.push(m, n, out, Op::Scale(a, c), rg)
    }

    /// Multiplies row `i` of `a (m x n)` by `s[i]` where `s` is `m x 1`.
    pub fn scale_rows(&mut self, a: Var, s: Var) -> Result<Var> {
        let ((m, n), (sm, sn)) = (self.shape(a), self.shape(s));
        if sm != m || sn != 1 {
            return Err(Error::Dimension(format!("scale_rows {m}x{n} by {sm}x{sn}")));
        }
        let sv = &self.node(s).value;
        let mut out = self.node(a).value.clone();
        for (chunk, &w) in out.chunks_mut(n).zip(sv) {
            for o in chunk.iter_mut() {
                *o *= w;
            }
        }
        let rg = self.rg(&[a, s]);
        Ok(self.push(m, n, out, Op::ScaleRows(a, s), rg))
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, a: Var) -> Var {
        let (m, n) = self.shape(a);
        let out = self.node(a).value.iter().map(|&x| gelu(x)).collect();
        let rg = self.rg(&[a]);
        self.push(m, n, out, Op::Gelu(a), rg)
    }

    /// Row-wise layer normalization with learned `1 x n` gain and bias.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let (m, n) = self.shape(x);
        for p in [gain, bias] {
            if self.shape(p) != (1, n) {
                return Err(Error::Dimension(format!(
                    "layer_norm params {:?} for width {n}",
                    self.shape(p)
                )));
            }
        }
        let xv = &self.node(x).value;
        let (gv, bv) = (&self.node(gain).value, &self.node(bias).value);
        let mut xhat = vec![0.0; m * n];
        let mut rstd = vec![0.0; m];
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let row = &xv[i * n..(i + 1) * n];
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let r = 1.0 / (var + eps).sqrt();
            rstd[i] = r;
            for j in 0..n {
                let h = (row[j] - mean) * r;
                xhat[i * n + j] = h;
                out[i * n + j] = h * gv[j] + bv[j];
            }
        }
        let rg = self.rg(&[x, gain, bias]);
        Ok(self.push(m, n, out, Op::LayerNorm { x, gain, bias, xhat, rstd }, rg))
    }

    /// Row-wise max-shifted softmax.
    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let (m, n) = self.shape(a);
        let mut out = self.node(a).value.clone();
        for row in out.chunks_mut(n) {
            softmax_in_place(row);
        }
        let rg = self.rg(&[a]);
        self.push(m, n, out, Op::Softmax(a), rg)
    }

    /// Row-wise softmax where row `i` only sees columns `0..=i`; masked
    /// entries are exactly zero.
    pub fn causal_softmax(&mut self, a: Var) -> Result<Var> {
        let (m, n) = self.shape(a);
        if m > n {
            return Err(Error::Dimension(format!("causal softmax on {m}x{n}")));
        }
        let mut out = self.node(a).value.clone();
        for (i, row) in out.chunks_mut(n).enumerate() {
            softmax_in_place(&mut row[..=i]);
            row[i + 1..].iter_mut().for_each(|v| *v = 0.0);
        }
        let rg = self.rg(&[a]);
        Ok(self.push(m, n, out, Op::Softmax(a), rg))
    }

    /// Mean negative log-likelihood of `targets` under row-softmax of
    /// `logits`. Rows whose target is `None` are excluded from the mean and
    /// receive zero gradient.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[Option<usize>]) -> Result<Var> {
        let (m, n) = self.shape(logits);
        if targets.len() != m {
            return Err(Error::Dimension(format!(
                "{} targets for {m} logit rows",
                targets.len()
            )));
        }
        let count = targets.iter().filter(|t| t.is_some()).count();
        if count == 0 {
            return Err(Error::Contract("cross entropy with no target positions".into()));
        }
        let mut probs = self.node(logits).value.clone();
        let mut total = 0.0;
        for (row, t) in probs.chunks_mut(n).zip(targets) {
            let lse = log_sum_exp(row);
            if let Some(t) = *t {
                if t >= n {
                    return Err(Error::TokenOutOfRange { id: t, vocab: n });
                }
                total += lse - row[t];
            }
            row.iter_mut().for_each(|v| *v = (*v - lse).exp());
        }
        let rg = self.rg(&[logits]);
        Ok(self.push(
            1,
            1,
            vec![total / count as f64],
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
                count,
            },
            rg,
        ))
    }

    /// Selects rows of `table` by index (embedding lookup).
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (v, h) = self.shape(table);
        let tv = &self.node(table).value;
        let mut out = Vec::with_capacity(ids.len() * h);
        for &id in ids {
            if id >= v {
                return Err(Error::TokenOutOfRange { id, vocab: v });
            }
            out.extend_from_slice(&tv[id * h..(id + 1) * h]);
        }
        if ids.is_empty() {
            return Err(Error::Dimension("gather with no indices".into()));
        }
        let rg = self.rg(&[table]);
        Ok(self.push(ids.len(), h, out, Op::Gather { table, ids: ids.to_vec() }, rg))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (m, n) = self.shape(x);
        if len == 0 || start + len > n {
            return Err(Error::Dimension(format!("columns {start}..{} of width {n}", start + len)));
        }
        let xv = &self.node(x).value;
        let mut out = Vec::with_capacity(m * len);
        for row in xv.chunks(n) {
            out.extend_from_slice(&row[start..start + len]);
        }
        let rg = self.rg(&[x]);
        Ok(self.push(m, len, out, Op::SliceCols { x, start }, rg))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let m = match parts.first() {
            Some(&p) => self.shape(p).0,
            None => return Err(Error::Dimension("concat of nothing".into())),
        };
        if parts.iter().any(|&p| self.shape(p).0 != m) {
            return Err(Error::Dimension("concat_cols row mismatch".into()));
        }
        let n: usize = parts.iter().map(|&p| self.shape(p).1).sum();
        let mut out = Vec::with_capacity(m * n);
        for i in 0..m {
            for &p in parts {
                let c = self.shape(p).1;
                out.extend_from_slice(&self.node(p).value[i * c..(i + 1) * c]);
            }
        }
        let rg = self.rg(parts);
        Ok(self.push(m, n, out, Op::ConcatCols(parts.to_vec()), rg))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.node(a).value.iter().sum();
        let rg = self.rg(&[a]);
        self.push(1, 1, vec![s], Op::Sum(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let v = &self.node(a).value;
        let s = v.iter().sum::<f64>() / v.len() as f64;
        let rg = self.rg(&[a]);
        self.push(1, 1, vec![s], Op::Mean(a), rg)
    }

    /// Shannon entropy of each row (`m x n` -> `m x 1`), with `0 ln 0 = 0`.
    pub fn row_entropy(&mut self, p: Var) -> Var {
        let (m, n) = self.shape(p);
        let out = self.node(p).value.chunks(n).map(entropy).collect();
        let rg = self.rg(&[p]);
        self.push(m, 1, out, Op::RowEntropy(p), rg)
    }

    /// Forward value `hard`, backward identity into `soft`.
    pub fn straight_through(&mut self, soft: Var, hard: Vec<f64>) -> Result<Var> {
        let (m, n) = self.shape(soft);
        if hard.len() != m * n {
            return Err(Error::Dimension("straight-through value shape".into()));
        }
        let rg = self.rg(&[soft]);
        Ok(self.push(m, n, hard, Op::StraightThrough(soft), rg))
    }

    /// Divides each row by its sum.
    pub fn normalize_rows(&mut self, a: Var) -> Result<Var> {
        let (m, n) = self.shape(a);
        let mut out = self.node(a).value.clone();
        for row in out.chunks_mut(n) {
            let s: f64 = row.iter().sum();
            if s <= 0.0 || !s.is_finite() {
                return Err(Error::Contract(format!("cannot normalize row with sum {s}")));
            }
            row.iter_mut().for_each(|v| *v /= s);
        }
        let rg = self.rg(&[a]);
        Ok(self.push(m, n, out, Op::NormalizeRows(a), rg))
    }

    pub fn zero_grad(&mut self) {
        self.grads.clear();
        self.backward_done = false;
    }

    /// Propagates d`loss`/d(node) to every node that requires grad.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.backward_done {
            return Err(Error::GradientsNotReset);
        }
        if self.shape(loss) != (1, 1) {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got {:?}",
                self.shape(loss)
            )));
        }
        self.backward_done = true;
        self.grads = (0..self.nodes.len()).map(|_| None).collect();
        if !self.node(loss).requires_grad {
            return Ok(());
        }
        self.grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(g) = self.grads[i].take() else { continue };
            self.propagate(i, &g);
            self.grads[i] = Some(g);
        }
        Ok(())
    }

    fn propagate(&mut self, i: usize, g: &[f64]) {
        // Split borrows: inputs are always earlier than `i` on the tape.
        let (before, rest) = self.nodes.split_at(i);
        let node = &rest[0];
        let (m, n) = (node.rows, node.cols);
        let grads = &mut self.grads;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let k = before[a.0].cols;
                let (av, bv) = (&before[a.0].value, &before[b.0].value);
                if let Some(da) = slot(grads, before, *a) {
                    for r in 0..m {
                        let grow = &g[r * n..(r + 1) * n];
                        for p in 0..k {
                            da[r * k + p] += dot(grow, &bv[p * n..(p + 1) * n]);
                        }
                    }
                }
                if let Some(db) = slot(grads, before, *b) {
                    for r in 0..m {
                        let grow = &g[r * n..(r + 1) * n];
                        for p in 0..k {
                            let arp = av[r * k + p];
                            if arp == 0.0 {
                                continue;
                            }
                            for (d, &gv) in db[p * n..(p + 1) * n].iter_mut().zip(grow) {
                                *d += arp * gv;
                            }
                        }
                    }
                }
            }
            Op::MatMulBT(a, b) => {
                let k = before[a.0].cols;
                let (av, bv) = (&before[a.0].value, &before[b.0].value);
                if let Some(da) = slot(grads, before, *a) {
                    for r in 0..m {
                        let drow = &mut da[r * k..(r + 1) * k];
                        for j in 0..n {
                            let gv = g[r * n + j];
                            if gv == 0.0 {
                                continue;
                            }
                            for (d, &bv) in drow.iter_mut().zip(&bv[j * k..(j + 1) * k]) {
                                *d += gv * bv;
                            }
                        }
                    }
                }
                if let Some(db) = slot(grads, before, *b) {
                    for r in 0..m {
                        let arow = &av[r * k..(r + 1) * k];
                        for j in 0..n {
                            let gv = g[r * n + j];
                            if gv == 0.0 {
                                continue;
                            }
                            for (d, &a) in db[j * k..(j + 1) * k].iter_mut().zip(arow) {
                                *d += gv * a;
                            }
                        }
                    }
                }
            }
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if let Some(d) = slot(grads, before, v) {
                        add_into(d, g);
                    }
                }
            }
            Op::AddRow(a, row) => {
                if let Some(d) = slot(grads, before, *a) {
                    add_into(d, g);
                }
                if let Some(d) = slot(grads, before, *row) {
                    for chunk in g.chunks(n) {
                        add_into(d, chunk);
                    }
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (&before[a.0].value, &before[b.0].value);
                if let Some(d) = slot(grads, before, *a) {
                    for ((d, gv), y) in d.iter_mut().zip(g).zip(bv) {
                        *d += gv * y;
                    }
                }
                if let Some(d) = slot(grads, before, *b) {
                    for ((d, gv), x) in d.iter_mut().zip(g).zip(av) {
                        *d += gv * x;
                    }
                }
            }
            Op::Scale(a, c) => {
                if let Some(d) = slot(grads, before, *a) {
                    for (d, gv) in d.iter_mut().zip(g) {
                        *d += gv * c;
                    }
                }
            }
            Op::ScaleRows(a, s) => {
                let (av, sv) = (&before[a.0].value, &before[s.0].value);
                if let Some(d) = slot(grads, before, *a) {
                    for r in 0..m {
                        for j in 0..n {
                            d[r * n + j] += g[r * n + j] * sv[r];
                        }
                    }
                }
                if let Some(d) = slot(grads, before, *s) {
                    for r in 0..m {
                        d[r] += dot(&g[r * n..(r + 1) * n], &av[r * n..(r + 1) * n]);
                    }
                }
            }
            Op::Gelu(a) => {
                let av = &before[a.0].value;
                if let Some(d) = slot(grads, before, *a) {
                    for ((d, gv), &x) in d.iter_mut().zip(g).zip(av) {
                        *d += gv * gelu_grad(x);
                    }
                }
            }
            Op::LayerNorm { x, gain, bias, xhat, rstd } => {
                let gv = &before[gain.0].value;
                if let Some(d) = slot(grads, before, *gain) {
                    for r in 0..m {
                        for j in 0..n {
                            d[j] += g[r * n + j] * xhat[r * n + j];
                        }
                    }
                }
                if let Some(d) = slot(grads, before, *bias) {
                    for chunk in g.chunks(n) {
                        add_into(d, chunk);
                    }
                }
                if let Some(d) = slot(grads, before, *x) {
                    let mut dxhat = vec![0.0; n];
                    for r in 0..m {
                        for j in 0..n {
                            dxhat[j] = g[r * n + j] * gv[j];
                        }
                        let xh = &xhat[r * n..(r + 1) * n];
                        let mean_d = dxhat.iter().sum::<f64>() / n as f64;
                        let mean_dx = dot(&dxhat, xh) / n as f64;
                        for j in 0..n {
                            d[r * n + j] += rstd[r] * (dxhat[j] - mean_d - xh[j] * mean_dx);
                        }
                    }
                }
            }
            Op::Softmax(a) => {
                let y = &node.value;
                if let Some(d) = slot(grads, before, *a) {
                    for r in 0..m {
                        let (yr, gr) = (&y[r * n..(r + 1) * n], &g[r * n..(r + 1) * n]);
                        let s = dot(yr, gr);
                        for j in 0..n {
                            d[r * n + j] += yr[j] * (gr[j] - s);
                        }
                    }
                }
            }
            Op::CrossEntropy { logits, targets, probs, count } => {
                let vcols = before[logits.0].cols;
                let scale = g[0] / *count as f64;
                if let Some(d) = slot(grads, before, *logits) {
                    for (r, t) in targets.iter().enumerate() {
                        let Some(t) = *t else { continue };
                        let base = r * vcols;
                        for j in 0..vcols {
                            d[base + j] += scale * probs[base + j];
                        }
                        d[base + t] -= scale;
                    }
                }
            }
            Op::Gather { table, ids } => {
                if let Some(d) = slot(grads, before, *table) {
                    for (r, &id) in ids.iter().enumerate() {
                        add_into(&mut d[id * n..(id + 1) * n], &g[r * n..(r + 1) * n]);
                    }
                }
            }
            Op::SliceCols { x, start } => {
                let w = before[x.0].cols;
                if let Some(d) = slot(grads, before, *x) {
                    for r in 0..m {
                        add_into(&mut d[r * w + start..r * w + start + n], &g[r * n..(r + 1) * n]);
                    }
                }
            }
            Op::ConcatCols(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let c = before[p.0].cols;
                    if let Some(d) = slot(grads, before, p) {
                        for r in 0..m {
                            add_into(&mut d[r * c..(r + 1) * c], &g[r * n + offset..r * n + offset + c]);
                        }
                    }
                    offset += c;
                }
            }
            Op::Sum(a) => {
                if let Some(d) = slot(grads, before, *a) {
                    d.iter_mut().for_each(|d| *d += g[0]);
                }
            }
            Op::Mean(a) => {
                let len = before[a.0].value.len() as f64;
                if let Some(d) = slot(grads, before, *a) {
                    d.iter_mut().for_each(|d| *d += g[0] / len);
                }
            }
            Op::RowEntropy(p) => {
                let pc = before[p.0].cols;
                let pv = &before[p.0].value;
                if let Some(d) = slot(grads, before, *p) {
                    for r in 0..m {
                        for j in 0..pc {
                            let q = pv[r * pc + j];
                            if q > 0.0 {
                                d[r * pc + j] -= g[r] * (q.ln() + 1.0);
                            }
                        }
                    }
                }
            }
            Op::StraightThrough(soft) => {
                if let Some(d) = slot(grads, before, *soft) {
                    add_into(d, g);
                }
            }
            Op::NormalizeRows(a) => {
                let y = &node.value;
                let av = &before[a.0].value;
                if let Some(d) = slot(grads, before, *a) {
                    for r in 0..m {
                        let s: f64 = av[r * n..(r + 1) * n].iter().sum();
                        let yg = dot(&y[r * n..(r + 1) * n], &g[r * n..(r + 1) * n]);
                        for j in 0..n {
                            d[r * n + j] += (g[r * n + j] - yg) / s;
                        }
                    }
                }
            }
        }
    }
}

fn slot<'a>(grads: &'a mut [Option<Vec<f64>>], nodes: &[Node], v: Var) -> Option<&'a mut [f64]> {
    let input = &nodes[v.0];
    if !input.requires_grad {
        return None;
    }
    let len = input.value.len();
    Some(grads[v.0].get_or_insert_with(|| vec![0.0; len]).as_mut_slice())
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

pub(crate) fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + GELU_A * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

pub(crate) fn log_sum_exp(row: &[f64]) -> f64 {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    for v in row.iter_mut() {
        *v /= total;
    }
}

pub(crate) fn entropy(p: &[f64]) -> f64 {
    0.0 - p.iter().filter(|&&q| q > 0.0).map(|&q| q * q.ln()).sum::<f64>()
}
