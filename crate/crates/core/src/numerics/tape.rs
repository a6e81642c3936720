//! Wengert-list reverse-mode differentiation.
//!
//! Every primitive appends one node holding its forward value. `backward`
//! walks the list in reverse, so each node is visited exactly once and only
//! after every consumer has pushed its contribution.

use super::tensor::{matmul_nt_raw, neg_log_softmax_at, matmul_raw, matmul_tn_raw, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulNt(Var, Var),
    Add(Var, Var),
    Sum(Vec<Var>),
    AddRow(Var, Var),
    MulRow(Var, Var),
    Scale(Var, f64),
    Silu(Var),
    Tanh(Var),
    CausalSoftmax(Var),
    LayerNorm { x: Var, inv_std: Vec<f64> },
    GatherRows { table: Var, idx: Vec<usize> },
    SelectRows { x: Var, idx: Vec<usize> },
    SliceRows { x: Var, start: usize },
    SliceCols { x: Var, start: usize },
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    MeanRows(Var),
    CrossEntropy { logits: Var, picks: Vec<(usize, usize)> },
    LogSoftmaxPick { logits: Var, picks: Vec<(usize, usize)> },
    Mse(Var, Var),
    SubTb(Box<SubTbSaved>),
}

#[derive(Clone, Debug)]
struct SubTbSaved {
    log_pf: Var,
    log_flow: Var,
    log_term: Var,
    log_reward: Vec<f64>,
    kappa: f64,
}

#[derive(Clone, Debug)]
struct Node {
    value: Tensor,
    op: Op,
}

/// Operation record for one forward pass. Rebuilt every training step.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients of a scalar with respect to every node of a tape.
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads[v.0].as_deref()
    }

    /// Gradient as a tensor; zeros if the node did not influence the output.
    pub fn tensor(&self, v: Var) -> Tensor {
        match &self.grads[v.0] {
            Some(g) => Tensor::new(self.shapes[v.0].clone(), g.clone()).expect("shape recorded at push"),
            None => Tensor::zeros(&self.shapes[v.0]),
        }
    }
}

fn dims2(t: &Tensor) -> (usize, usize) {
    (t.rows(), t.cols())
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

const LN_EPS: f64 = 1e-5;

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf)
    }

    fn mat(&self, v: Var, what: &str) -> Result<(usize, usize)> {
        let t = self.value(v);
        if t.shape().len() > 2 || t.shape().is_empty() {
            return Err(Error::dim(format!("{what}: expected matrix, got {:?}", t.shape())));
        }
        Ok(dims2(t))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.mat(a, "matmul lhs")?;
        let (k2, n) = self.mat(b, "matmul rhs")?;
        if self.value(b).shape().len() != 2 || k != k2 {
            return Err(Error::dim(format!("matmul inner dimensions disagree: {m}x{k} by {:?}", self.value(b).shape())));
        }
        let out = matmul_raw(self.value(a).data(), self.value(b).data(), m, k, n);
        Ok(self.push(Tensor::matrix(m, n, out)?, Op::MatMul(a, b)))
    }

    /// `a · bᵀ` with a `[m,k]` and b `[n,k]`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.mat(a, "matmul_nt lhs")?;
        let (n, k2) = self.mat(b, "matmul_nt rhs")?;
        if k != k2 {
            return Err(Error::dim(format!("matmul_nt widths disagree: {k} vs {k2}")));
        }
        let out = matmul_nt_raw(self.value(a).data(), self.value(b).data(), m, k, n);
        Ok(self.push(Tensor::matrix(m, n, out)?, Op::MatMulNt(a, b)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(Error::dim(format!("add shapes differ: {:?} vs {:?}", ta.shape(), tb.shape())));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| x + y).collect();
        let shape = ta.shape().to_vec();
        Ok(self.push(Tensor::new(shape, data)?, Op::Add(a, b)))
    }

    /// Elementwise sum of equally shaped tensors, accumulated in argument order.
    pub fn sum(&mut self, xs: &[Var]) -> Result<Var> {
        let first = *xs.first().ok_or_else(|| Error::arg("sum of no tensors"))?;
        let shape = self.value(first).shape().to_vec();
        let mut data = self.value(first).data().to_vec();
        for &x in &xs[1..] {
            let t = self.value(x);
            if t.shape() != shape.as_slice() {
                return Err(Error::dim(format!("sum shapes differ: {:?} vs {shape:?}", t.shape())));
            }
            for (d, v) in data.iter_mut().zip(t.data()) {
                *d += v;
            }
        }
        Ok(self.push(Tensor::new(shape, data)?, Op::Sum(xs.to_vec())))
    }

    /// Adds a length-n vector to every row of an `[m,n]` matrix.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (m, n) = self.mat(x, "add_row input")?;
        if self.value(bias).len() != n {
            return Err(Error::dim(format!("bias length {} != width {n}", self.value(bias).len())));
        }
        let b = self.value(bias).data();
        let data: Vec<f64> = self.value(x).data().chunks(n).flat_map(|r| r.iter().zip(b).map(|(u, v)| u + v)).collect();
        let shape = self.value(x).shape().to_vec();
        debug_assert_eq!(data.len(), m * n);
        Ok(self.push(Tensor::new(shape, data)?, Op::AddRow(x, bias)))
    }

    /// Multiplies every row of an `[m,n]` matrix elementwise by a length-n vector.
    pub fn mul_row(&mut self, x: Var, gain: Var) -> Result<Var> {
        let (_, n) = self.mat(x, "mul_row input")?;
        if self.value(gain).len() != n {
            return Err(Error::dim(format!("gain length {} != width {n}", self.value(gain).len())));
        }
        let g = self.value(gain).data();
        let data: Vec<f64> = self.value(x).data().chunks(n).flat_map(|r| r.iter().zip(g).map(|(u, v)| u * v)).collect();
        let shape = self.value(x).shape().to_vec();
        Ok(self.push(Tensor::new(shape, data)?, Op::MulRow(x, gain)))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let t = self.value(x);
        let data = t.data().iter().map(|v| v * c).collect();
        let value = Tensor::new(t.shape().to_vec(), data).expect("same shape");
        self.push(value, Op::Scale(x, c))
    }

    pub fn silu(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let data = t.data().iter().map(|&v| v * sigmoid(v)).collect();
        let value = Tensor::new(t.shape().to_vec(), data).expect("same shape");
        self.push(value, Op::Silu(x))
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let data = t.data().iter().map(|v| v.tanh()).collect();
        let value = Tensor::new(t.shape().to_vec(), data).expect("same shape");
        self.push(value, Op::Tanh(x))
    }

    /// Row softmax of a square score matrix where row i only sees columns `0..=i`.
    /// Masked entries are exactly zero.
    pub fn causal_softmax(&mut self, x: Var) -> Result<Var> {
        let (m, n) = self.mat(x, "causal_softmax")?;
        if m != n {
            return Err(Error::dim(format!("causal_softmax needs a square matrix, got {m}x{n}")));
        }
        let src = self.value(x).data();
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let row = &src[i * n..i * n + i + 1];
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for (j, &v) in row.iter().enumerate() {
                let e = (v - max).exp();
                out[i * n + j] = e;
                z += e;
            }
            for o in &mut out[i * n..i * n + i + 1] {
                *o /= z;
            }
        }
        Ok(self.push(Tensor::matrix(m, n, out)?, Op::CausalSoftmax(x)))
    }

    /// Per-row standardisation (no affine part).
    pub fn layer_norm(&mut self, x: Var) -> Result<Var> {
        let (m, n) = self.mat(x, "layer_norm")?;
        let src = self.value(x).data();
        let mut out = vec![0.0; m * n];
        let mut inv_std = Vec::with_capacity(m);
        for r in 0..m {
            let row = &src[r * n..(r + 1) * n];
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let is = 1.0 / (var + LN_EPS).sqrt();
            for (o, v) in out[r * n..(r + 1) * n].iter_mut().zip(row) {
                *o = (v - mean) * is;
            }
            inv_std.push(is);
        }
        let shape = self.value(x).shape().to_vec();
        Ok(self.push(Tensor::new(shape, out)?, Op::LayerNorm { x, inv_std }))
    }

    /// Embedding lookup: rows of `table` at `idx`.
    pub fn gather_rows(&mut self, table: Var, idx: &[usize]) -> Result<Var> {
        let (v, d) = self.mat(table, "gather table")?;
        if let Some(&bad) = idx.iter().find(|&&i| i >= v) {
            return Err(Error::arg(format!("gather index {bad} out of range for {v} rows")));
        }
        let src = self.value(table).data();
        let mut out = Vec::with_capacity(idx.len() * d);
        for &i in idx {
            out.extend_from_slice(&src[i * d..(i + 1) * d]);
        }
        Ok(self.push(Tensor::matrix(idx.len(), d, out)?, Op::GatherRows { table, idx: idx.to_vec() }))
    }

    /// Same as `gather_rows` but semantically a row selection of activations.
    pub fn select_rows(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let (m, d) = self.mat(x, "select_rows")?;
        if let Some(&bad) = idx.iter().find(|&&i| i >= m) {
            return Err(Error::arg(format!("row {bad} out of range for {m} rows")));
        }
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(idx.len() * d);
        for &i in idx {
            out.extend_from_slice(&src[i * d..(i + 1) * d]);
        }
        Ok(self.push(Tensor::matrix(idx.len(), d, out)?, Op::SelectRows { x, idx: idx.to_vec() }))
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (m, d) = self.mat(x, "slice_rows")?;
        if start + len > m {
            return Err(Error::dim(format!("row slice {start}..{} exceeds {m}", start + len)));
        }
        let out = self.value(x).data()[start * d..(start + len) * d].to_vec();
        Ok(self.push(Tensor::matrix(len, d, out)?, Op::SliceRows { x, start }))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (m, n) = self.mat(x, "slice_cols")?;
        if start + len > n {
            return Err(Error::dim(format!("column slice {start}..{} exceeds {n}", start + len)));
        }
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(m * len);
        for r in 0..m {
            out.extend_from_slice(&src[r * n + start..r * n + start + len]);
        }
        Ok(self.push(Tensor::matrix(m, len, out)?, Op::SliceCols { x, start }))
    }

    pub fn concat_rows(&mut self, xs: &[Var]) -> Result<Var> {
        if xs.is_empty() {
            return Err(Error::arg("concat of no tensors"));
        }
        let d = self.mat(xs[0], "concat_rows")?.1;
        let mut out = Vec::new();
        let mut m = 0;
        for &x in xs {
            let (r, c) = self.mat(x, "concat_rows")?;
            if c != d {
                return Err(Error::dim(format!("concat_rows widths differ: {c} vs {d}")));
            }
            out.extend_from_slice(self.value(x).data());
            m += r;
        }
        Ok(self.push(Tensor::matrix(m, d, out)?, Op::ConcatRows(xs.to_vec())))
    }

    pub fn concat_cols(&mut self, xs: &[Var]) -> Result<Var> {
        if xs.is_empty() {
            return Err(Error::arg("concat of no tensors"));
        }
        let m = self.mat(xs[0], "concat_cols")?.0;
        let mut widths = Vec::with_capacity(xs.len());
        for &x in xs {
            let (r, c) = self.mat(x, "concat_cols")?;
            if r != m {
                return Err(Error::dim(format!("concat_cols heights differ: {r} vs {m}")));
            }
            widths.push(c);
        }
        let n: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(m * n);
        for r in 0..m {
            for (&x, &w) in xs.iter().zip(&widths) {
                out.extend_from_slice(&self.value(x).data()[r * w..(r + 1) * w]);
            }
        }
        Ok(self.push(Tensor::matrix(m, n, out)?, Op::ConcatCols(xs.to_vec())))
    }

    /// Arithmetic mean over rows: `[m,n] -> [1,n]`.
    pub fn mean_rows(&mut self, x: Var) -> Result<Var> {
        let (m, n) = self.mat(x, "mean_rows")?;
        if m == 0 {
            return Err(Error::arg("mean over zero rows"));
        }
        let src = self.value(x).data();
        let mut out = vec![0.0; n];
        for r in 0..m {
            for (o, v) in out.iter_mut().zip(&src[r * n..(r + 1) * n]) {
                *o += v;
            }
        }
        for o in &mut out {
            *o /= m as f64;
        }
        Ok(self.push(Tensor::matrix(1, n, out)?, Op::MeanRows(x)))
    }

    /// Sum over `(row, target)` pairs of `-log softmax(logits[row])[target]`.
    pub fn cross_entropy(&mut self, logits: Var, picks: &[(usize, usize)]) -> Result<Var> {
        let (m, n) = self.mat(logits, "cross_entropy")?;
        let src = self.value(logits).data();
        let mut total = 0.0;
        for &(r, t) in picks {
            if r >= m || t >= n {
                return Err(Error::arg(format!("cross-entropy pick ({r},{t}) out of range for {m}x{n}")));
            }
            let row = &src[r * n..(r + 1) * n];
            total += neg_log_softmax_at(row, t);
        }
        Ok(self.push(Tensor::scalar(total), Op::CrossEntropy { logits, picks: picks.to_vec() }))
    }

    /// `-log softmax(logits)[target]` for a single logit vector.
    pub fn softmax_cross_entropy(&mut self, logits: Var, target: usize) -> Result<Var> {
        if self.value(logits).rows() != 1 {
            return Err(Error::dim(format!("logits must be a vector, got {:?}", self.value(logits).shape())));
        }
        if target >= self.value(logits).len() {
            return Err(Error::arg(format!("target {target} out of range for {} logits", self.value(logits).len())));
        }
        self.cross_entropy(logits, &[(0, target)])
    }

    /// Vector of `log softmax(logits[row])[col]` for each pick.
    pub fn log_softmax_pick(&mut self, logits: Var, picks: &[(usize, usize)]) -> Result<Var> {
        let (m, n) = self.mat(logits, "log_softmax_pick")?;
        let src = self.value(logits).data();
        let mut out = Vec::with_capacity(picks.len());
        for &(r, c) in picks {
            if r >= m || c >= n {
                return Err(Error::arg(format!("pick ({r},{c}) out of range for {m}x{n}")));
            }
            let row = &src[r * n..(r + 1) * n];
            out.push(-neg_log_softmax_at(row, c));
        }
        Ok(self.push(Tensor::vector(out), Op::LogSoftmaxPick { logits, picks: picks.to_vec() }))
    }

    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(Error::dim(format!("mse shapes differ: {:?} vs {:?}", ta.shape(), tb.shape())));
        }
        if ta.is_empty() {
            return Err(Error::dim("mse of empty tensors"));
        }
        let s: f64 = ta.data().iter().zip(tb.data()).map(|(x, y)| (x - y) * (x - y)).sum();
        let v = s / ta.len() as f64;
        Ok(self.push(Tensor::scalar(v), Op::Mse(a, b)))
    }

    /// Sub-trajectory balance loss over one trajectory whose every prefix state
    /// may terminate.
    ///
    /// With `n` emitted tokens: `log_pf` holds `n` forward log-probabilities,
    /// `log_flow` and `log_term` hold one entry per prefix state `s_0..s_n`, and
    /// `log_reward` the (densified) terminal log-reward of each prefix.
    /// Residuals cover every state-to-state segment `s_i -> s_j` (i < j) and
    /// every segment ending in a termination `s_i -> s_j -> ⊤` (i <= j); each is
    /// weighted by `kappa^len` and the weighted mean of squares is returned.
    pub fn subtb(&mut self, log_pf: Var, log_flow: Var, log_term: Var, log_reward: &[f64], kappa: f64) -> Result<Var> {
        let n = self.value(log_pf).len();
        if self.value(log_flow).len() != n + 1 || self.value(log_term).len() != n + 1 || log_reward.len() != n + 1 {
            return Err(Error::dim(format!(
                "subtb expects {n} step log-probs and {} flows/terminations/rewards, got {}/{}/{}",
                n + 1,
                self.value(log_flow).len(),
                self.value(log_term).len(),
                log_reward.len()
            )));
        }
        if !(kappa > 0.0) {
            return Err(Error::arg(format!("subtb kappa must be positive, got {kappa}")));
        }
        let flows = self.value(log_flow).data();
        if let Some(bad) = flows.iter().find(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!("non-finite log-flow {bad}")));
        }
        let (loss, _) = subtb_residuals(self.value(log_pf).data(), flows, self.value(log_term).data(), log_reward, kappa);
        let saved = SubTbSaved { log_pf, log_flow, log_term, log_reward: log_reward.to_vec(), kappa };
        Ok(self.push(Tensor::scalar(loss), Op::SubTb(Box::new(saved))))
    }

    /// Reverse sweep from a scalar output.
    pub fn backward(&self, out: Var) -> Result<Gradients> {
        if self.value(out).len() != 1 {
            return Err(Error::dim(format!("backward needs a scalar output, got {:?}", self.value(out).shape())));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[out.0] = Some(vec![1.0]);

        for id in (0..=out.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &self.nodes[id];
            self.propagate(node, &g, &mut grads);
            grads[id] = Some(g);
        }
        let shapes = self.nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        Ok(Gradients { grads, shapes })
    }

    fn propagate(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let val = |v: Var| self.nodes[v.0].value.data();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = dims2(&self.nodes[a.0].value);
                let n = self.nodes[b.0].value.cols();
                acc(grads, *a, &matmul_nt_raw(g, val(*b), m, n, k));
                acc(grads, *b, &matmul_tn_raw(val(*a), g, m, k, n));
            }
            Op::MatMulNt(a, b) => {
                let (m, k) = dims2(&self.nodes[a.0].value);
                let n = self.nodes[b.0].value.rows();
                acc(grads, *a, &matmul_raw(g, val(*b), m, n, k));
                acc(grads, *b, &matmul_tn_raw(g, val(*a), m, n, k));
            }
            Op::Add(a, b) => {
                acc(grads, *a, g);
                acc(grads, *b, g);
            }
            Op::Sum(xs) => {
                for x in xs {
                    acc(grads, *x, g);
                }
            }
            Op::AddRow(x, b) => {
                acc(grads, *x, g);
                let n = self.nodes[b.0].value.len();
                let mut gb = vec![0.0; n];
                for row in g.chunks(n) {
                    for (o, v) in gb.iter_mut().zip(row) {
                        *o += v;
                    }
                }
                acc(grads, *b, &gb);
            }
            Op::MulRow(x, gain) => {
                let gv = val(*gain);
                let n = gv.len();
                let xv = val(*x);
                let gx: Vec<f64> = g.chunks(n).flat_map(|r| r.iter().zip(gv).map(|(u, v)| u * v)).collect();
                let mut gg = vec![0.0; n];
                for (grow, xrow) in g.chunks(n).zip(xv.chunks(n)) {
                    for ((o, a), b) in gg.iter_mut().zip(grow).zip(xrow) {
                        *o += a * b;
                    }
                }
                acc(grads, *x, &gx);
                acc(grads, *gain, &gg);
            }
            Op::Scale(x, c) => {
                let gx: Vec<f64> = g.iter().map(|v| v * c).collect();
                acc(grads, *x, &gx);
            }
            Op::Silu(x) => {
                let gx: Vec<f64> = g
                    .iter()
                    .zip(val(*x))
                    .map(|(gi, &xi)| {
                        let s = sigmoid(xi);
                        gi * s * (1.0 + xi * (1.0 - s))
                    })
                    .collect();
                acc(grads, *x, &gx);
            }
            Op::Tanh(x) => {
                let y = node.value.data();
                let gx: Vec<f64> = g.iter().zip(y).map(|(gi, yi)| gi * (1.0 - yi * yi)).collect();
                acc(grads, *x, &gx);
            }
            Op::CausalSoftmax(x) => {
                let y = node.value.data();
                let n = node.value.cols();
                let mut gx = vec![0.0; y.len()];
                for i in 0..n {
                    let yr = &y[i * n..i * n + i + 1];
                    let gr = &g[i * n..i * n + i + 1];
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for j in 0..=i {
                        gx[i * n + j] = yr[j] * (gr[j] - dot);
                    }
                }
                acc(grads, *x, &gx);
            }
            Op::LayerNorm { x, inv_std } => {
                let y = node.value.data();
                let n = node.value.cols();
                let mut gx = vec![0.0; y.len()];
                for (r, is) in inv_std.iter().enumerate() {
                    let yr = &y[r * n..(r + 1) * n];
                    let gr = &g[r * n..(r + 1) * n];
                    let mean_g = gr.iter().sum::<f64>() / n as f64;
                    let mean_gy = gr.iter().zip(yr).map(|(a, b)| a * b).sum::<f64>() / n as f64;
                    for j in 0..n {
                        gx[r * n + j] = is * (gr[j] - mean_g - yr[j] * mean_gy);
                    }
                }
                acc(grads, *x, &gx);
            }
            Op::GatherRows { table, idx } | Op::SelectRows { x: table, idx } => {
                let t = &self.nodes[table.0].value;
                let d = t.cols();
                let mut gt = vec![0.0; t.len()];
                for (k, &i) in idx.iter().enumerate() {
                    for (o, v) in gt[i * d..(i + 1) * d].iter_mut().zip(&g[k * d..(k + 1) * d]) {
                        *o += v;
                    }
                }
                acc(grads, *table, &gt);
            }
            Op::SliceRows { x, start } => {
                let t = &self.nodes[x.0].value;
                let d = t.cols();
                let mut gx = vec![0.0; t.len()];
                gx[start * d..start * d + g.len()].copy_from_slice(g);
                acc(grads, *x, &gx);
            }
            Op::SliceCols { x, start } => {
                let t = &self.nodes[x.0].value;
                let n = t.cols();
                let len = node.value.cols();
                let mut gx = vec![0.0; t.len()];
                for r in 0..t.rows() {
                    gx[r * n + start..r * n + start + len].copy_from_slice(&g[r * len..(r + 1) * len]);
                }
                acc(grads, *x, &gx);
            }
            Op::ConcatRows(xs) => {
                let mut off = 0;
                for x in xs {
                    let l = self.nodes[x.0].value.len();
                    acc(grads, *x, &g[off..off + l]);
                    off += l;
                }
            }
            Op::ConcatCols(xs) => {
                let n = node.value.cols();
                let m = node.value.rows();
                let mut off = 0;
                for x in xs {
                    let w = self.nodes[x.0].value.cols();
                    let mut gx = Vec::with_capacity(m * w);
                    for r in 0..m {
                        gx.extend_from_slice(&g[r * n + off..r * n + off + w]);
                    }
                    acc(grads, *x, &gx);
                    off += w;
                }
            }
            Op::MeanRows(x) => {
                let t = &self.nodes[x.0].value;
                let m = t.rows() as f64;
                let gx: Vec<f64> = (0..t.rows()).flat_map(|_| g.iter().map(|v| v / m)).collect();
                acc(grads, *x, &gx);
            }
            Op::CrossEntropy { logits, picks } => {
                let t = &self.nodes[logits.0].value;
                let n = t.cols();
                let mut gl = vec![0.0; t.len()];
                for &(r, c) in picks {
                    let p = super::tensor::softmax(t.row(r));
                    for (j, pj) in p.iter().enumerate() {
                        gl[r * n + j] += g[0] * pj;
                    }
                    gl[r * n + c] -= g[0];
                }
                acc(grads, *logits, &gl);
            }
            Op::LogSoftmaxPick { logits, picks } => {
                let t = &self.nodes[logits.0].value;
                let n = t.cols();
                let mut gl = vec![0.0; t.len()];
                for (k, &(r, c)) in picks.iter().enumerate() {
                    let p = super::tensor::softmax(t.row(r));
                    for (j, pj) in p.iter().enumerate() {
                        gl[r * n + j] -= g[k] * pj;
                    }
                    gl[r * n + c] += g[k];
                }
                acc(grads, *logits, &gl);
            }
            Op::Mse(a, b) => {
                let (va, vb) = (val(*a), val(*b));
                let scale = 2.0 * g[0] / va.len() as f64;
                let ga: Vec<f64> = va.iter().zip(vb).map(|(x, y)| scale * (x - y)).collect();
                let gb: Vec<f64> = ga.iter().map(|v| -v).collect();
                acc(grads, *a, &ga);
                acc(grads, *b, &gb);
            }
            Op::SubTb(s) => {
                let (_, dres) = subtb_residuals(val(s.log_pf), val(s.log_flow), val(s.log_term), &s.log_reward, s.kappa);
                let n = val(s.log_pf).len();
                let mut g_pf_diff = vec![0.0; n + 2];
                let mut g_flow = vec![0.0; n + 1];
                let mut g_term = vec![0.0; n + 1];
                for r in &dres {
                    let d = g[0] * r.dloss;
                    g_flow[r.from] += d;
                    match r.kind {
                        Segment::Flow => g_flow[r.to] -= d,
                        Segment::Terminal => g_term[r.to] += d,
                    }
                    // log-prob steps from+1..=to
                    g_pf_diff[r.from + 1] += d;
                    g_pf_diff[r.to + 1] -= d;
                }
                let mut g_pf = vec![0.0; n];
                let mut run = 0.0;
                for k in 1..=n {
                    run += g_pf_diff[k];
                    g_pf[k - 1] = run;
                }
                acc(grads, s.log_pf, &g_pf);
                acc(grads, s.log_flow, &g_flow);
                acc(grads, s.log_term, &g_term);
            }
        }
    }
}

fn acc(grads: &mut [Option<Vec<f64>>], v: Var, g: &[f64]) {
    match &mut grads[v.0] {
        Some(existing) => {
            for (e, x) in existing.iter_mut().zip(g) {
                *e += x;
            }
        }
        slot @ None => *slot = Some(g.to_vec()),
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Segment {
    Flow,
    Terminal,
}

struct Residual {
    from: usize,
    to: usize,
    kind: Segment,
    dloss: f64,
}

/// Weighted SubTB loss and the derivative of the loss w.r.t. each residual.
fn subtb_residuals(log_pf: &[f64], log_flow: &[f64], log_term: &[f64], log_reward: &[f64], kappa: f64) -> (f64, Vec<Residual>) {
    let n = log_pf.len();
    let mut cum = vec![0.0; n + 1];
    for k in 1..=n {
        cum[k] = cum[k - 1] + log_pf[k - 1];
    }
    let mut raw = Vec::new();
    for i in 0..=n {
        for j in i..=n {
            let steps = cum[j] - cum[i];
            if j > i {
                let r = log_flow[i] + steps - log_flow[j];
                raw.push((i, j, Segment::Flow, r, kappa.powi((j - i) as i32)));
            }
            let r = log_flow[i] + steps + log_term[j] - log_reward[j];
            raw.push((i, j, Segment::Terminal, r, kappa.powi((j - i + 1) as i32)));
        }
    }
    let total_w: f64 = raw.iter().map(|r| r.4).sum();
    let loss = raw.iter().map(|r| r.4 * r.3 * r.3).sum::<f64>() / total_w;
    let res = raw
        .into_iter()
        .map(|(from, to, kind, r, w)| Residual { from, to, kind, dloss: 2.0 * w * r / total_w })
        .collect();
    (loss, res)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn causal_softmax_rows_normalise() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::matrix(3, 3, vec![0.1, 5.0, -2.0, 1.0, 2.0, 9.0, -1.0, 0.0, 3.0]).unwrap());
        let p = tape.causal_softmax(x).unwrap();
        let v = tape.value(p);
        for i in 0..3 {
            let s: f64 = v.row(i).iter().sum();
            assert!((s - 1.0).abs() < 1e-12);
            for j in i + 1..3 {
                assert_eq!(v.get(i, j), 0.0);
            }
        }
    }

    #[test]
    fn subtb_zero_on_balanced_two_state_chain() {
        // s0 --z--> s1, both terminable; s1 is at max length (forced stop).
        let (r0, r1) = (-1.3f64, -0.4f64);
        let z = (r0.exp() + r1.exp()).ln();
        let p_stop = r0.exp() / z.exp();
        let mut tape = Tape::new();
        let pf = tape.leaf(Tensor::vector(vec![(1.0 - p_stop).ln()]));
        let flow = tape.leaf(Tensor::vector(vec![z, r1]));
        let term = tape.leaf(Tensor::vector(vec![p_stop.ln(), 0.0]));
        let loss = tape.subtb(pf, flow, term, &[r0, r1], 0.9).unwrap();
        assert!(tape.value(loss).item() < 1e-10);
    }

    #[test]
    fn subtb_shift_invariance() {
        let pf = vec![-0.3, -1.2, -0.7];
        let flow = vec![0.5, -0.2, 1.1, 0.3];
        let term = vec![-2.0, -1.0, -0.5, 0.0];
        let rew = vec![-1.0, -3.0, -0.2, -0.9];
        let (base, _) = subtb_residuals(&pf, &flow, &term, &rew, 0.9);
        let c = 7.25;
        let flow2: Vec<f64> = flow.iter().map(|v| v + c).collect();
        let rew2: Vec<f64> = rew.iter().map(|v| v + c).collect();
        let (shifted, _) = subtb_residuals(&pf, &flow2, &term, &rew2, 0.9);
        assert!((base - shifted).abs() < 1e-12);
        assert!(base > 0.0);
    }

    #[test]
    fn subtb_rejects_nonfinite_flow() {
        let mut tape = Tape::new();
        let pf = tape.leaf(Tensor::vector(vec![]));
        let flow = tape.leaf(Tensor::vector(vec![f64::NAN]));
        let term = tape.leaf(Tensor::vector(vec![0.0]));
        assert!(matches!(tape.subtb(pf, flow, term, &[0.0], 0.9), Err(Error::Numeric(_))));
    }

    #[test]
    fn backward_requires_scalar() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::vector(vec![1.0, 2.0]));
        assert!(tape.backward(x).is_err());
    }
}
