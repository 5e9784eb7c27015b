//! Tape-based reverse-mode differentiation.
//!
//! A [`Graph`] owns every tensor created during a forward pass. Nodes are
//! appended in execution order, so the node list is already topologically
//! sorted and [`Graph::backward`] is a single reverse sweep. Leaf gradients
//! accumulate across backward calls; callers zero them explicitly.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::numeric::kernels;
use crate::numeric::tensor::Tensor;
use crate::rope::RopeTable;

/// Additive mask applied to future positions before the attention softmax.
pub const ATTENTION_MASK: f32 = -1.0e9;

const LAYER_NORM_EPS: f32 = 1e-5;

/// Handle to a node in a [`Graph`].
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
    MatMul { a: usize, b: usize, m: usize, k: usize, n: usize },
    Linear { x: usize, w: usize, b: Option<usize>, m: usize, k: usize, n: usize },
    Add { a: usize, b: usize },
    Mul { a: usize, b: usize },
    Scale { a: usize, c: f32 },
    Sum { a: usize },
    Tanh { a: usize },
    Gelu { a: usize },
    LayerNorm { x: usize, gain: usize, bias: usize, mean: Vec<f32>, rstd: Vec<f32> },
    Softmax { a: usize },
    Embedding { table: usize, ids: Vec<u32> },
    Rope { a: usize, table: Arc<RopeTable>, seq_len: usize, n_heads: usize },
    Attention { q: usize, k: usize, v: usize, batch: usize, seq_len: usize, n_heads: usize, probs: Vec<f32> },
    CrossEntropy { logits: usize, targets: Vec<u32>, probs: Vec<f32> },
}

impl Op {
    fn saved_values(&self) -> usize {
        match self {
            Op::LayerNorm { mean, rstd, .. } => mean.len() + rstd.len(),
            Op::Attention { probs, .. } | Op::CrossEntropy { probs, .. } => probs.len(),
            _ => 0,
        }
    }
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BackwardReport {
    pub nodes_visited: usize,
}

/// Value counts held by a graph.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct GraphStats {
    pub leaf_values: usize,
    pub activation_values: usize,
    pub saved_values: usize,
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

fn dim_err(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Error {
    Error::Dimension {
        op,
        lhs: lhs.to_vec(),
        rhs: rhs.to_vec(),
    }
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

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, vars: &[usize]) -> bool {
        vars.iter().any(|&i| self.nodes[i].requires_grad)
    }

    /// Adds a leaf that receives gradients.
    pub fn param(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Adds a constant leaf.
    pub fn input(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Accumulated gradient of a leaf, if any backward pass reached it.
    pub fn grad(&self, v: Var) -> Option<&[f32]> {
        self.nodes[v.0].value.grad()
    }

    pub fn tensor_mut(&mut self, v: Var) -> &mut Tensor {
        &mut self.nodes[v.0].value
    }

    /// Saved `[batch·heads × T × T]` probabilities of an attention node.
    pub fn attention_weights(&self, v: Var) -> Option<&[f32]> {
        match &self.nodes[v.0].op {
            Op::Attention { probs, .. } => Some(probs),
            _ => None,
        }
    }

    pub fn zero_grads(&mut self) {
        for n in &mut self.nodes {
            n.value.zero_grad();
        }
    }

    pub fn stats(&self) -> GraphStats {
        let mut s = GraphStats::default();
        for n in &self.nodes {
            match n.op {
                Op::Leaf => s.leaf_values += n.value.numel(),
                _ => s.activation_values += n.value.numel(),
            }
            s.saved_values += n.op.saved_values();
        }
        s
    }

    fn two_d(&self, v: Var, op: &'static str) -> Result<(usize, usize)> {
        let t = &self.nodes[v.0].value;
        if t.shape().len() != 2 {
            return Err(dim_err(op, t.shape(), &[0, 0]));
        }
        Ok((t.shape()[0], t.shape()[1]))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.two_d(a, "matmul")?;
        let (k2, n) = self.two_d(b, "matmul")?;
        if k != k2 {
            return Err(dim_err("matmul", self.value(a).shape(), self.value(b).shape()));
        }
        let mut out = vec![0.0; m * n];
        kernels::matmul(self.value(a).data(), self.value(b).data(), &mut out, m, k, n);
        let rg = self.needs(&[a.0, b.0]);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::MatMul { a: a.0, b: b.0, m, k, n }, rg))
    }

    /// `x[m×k] · w[k×n] + bias[n]`
    pub fn linear(&mut self, x: Var, w: Var, bias: Option<Var>) -> Result<Var> {
        let (m, k) = self.two_d(x, "linear")?;
        let (k2, n) = self.two_d(w, "linear")?;
        if k != k2 {
            return Err(dim_err("linear", self.value(x).shape(), self.value(w).shape()));
        }
        let mut out = vec![0.0; m * n];
        kernels::matmul(self.value(x).data(), self.value(w).data(), &mut out, m, k, n);
        let mut inputs = vec![x.0, w.0];
        if let Some(b) = bias {
            let bt = self.value(b);
            if bt.numel() != n {
                return Err(dim_err("linear bias", bt.shape(), &[n]));
            }
            for row in out.chunks_exact_mut(n) {
                for (o, &bv) in row.iter_mut().zip(bt.data()) {
                    *o += bv;
                }
            }
            inputs.push(b.0);
        }
        let rg = self.needs(&inputs);
        Ok(self.push(
            Tensor::new(vec![m, n], out)?,
            Op::Linear { x: x.0, w: w.0, b: bias.map(|b| b.0), m, k, n },
            rg,
        ))
    }

    fn same_shape(&self, a: Var, b: Var, op: &'static str) -> Result<()> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(dim_err(op, self.value(a).shape(), self.value(b).shape()));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let (ta, tb) = (self.value(a), self.value(b));
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| x + y).collect();
        let t = Tensor::new(ta.shape().to_vec(), data)?;
        let rg = self.needs(&[a.0, b.0]);
        Ok(self.push(t, Op::Add { a: a.0, b: b.0 }, rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let (ta, tb) = (self.value(a), self.value(b));
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| x * y).collect();
        let t = Tensor::new(ta.shape().to_vec(), data)?;
        let rg = self.needs(&[a.0, b.0]);
        Ok(self.push(t, Op::Mul { a: a.0, b: b.0 }, rg))
    }

    pub fn scale(&mut self, a: Var, c: f32) -> Var {
        let ta = self.value(a);
        let t = Tensor::new(ta.shape().to_vec(), ta.data().iter().map(|x| x * c).collect())
            .expect("shape preserved");
        let rg = self.needs(&[a.0]);
        self.push(t, Op::Scale { a: a.0, c }, rg)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        let rg = self.needs(&[a.0]);
        self.push(Tensor::scalar(s), Op::Sum { a: a.0 }, rg)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let ta = self.value(a);
        let t = Tensor::new(ta.shape().to_vec(), ta.data().iter().map(|x| x.tanh()).collect())
            .expect("shape preserved");
        let rg = self.needs(&[a.0]);
        self.push(t, Op::Tanh { a: a.0 }, rg)
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let ta = self.value(a);
        let t = Tensor::new(ta.shape().to_vec(), ta.data().iter().map(|&x| kernels::gelu(x)).collect())
            .expect("shape preserved");
        let rg = self.needs(&[a.0]);
        self.push(t, Op::Gelu { a: a.0 }, rg)
    }

    /// Per-row layer normalization with learned gain and bias.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let tx = self.value(x);
        let d = tx.cols();
        let rows = tx.rows();
        if self.value(gain).numel() != d || self.value(bias).numel() != d {
            return Err(dim_err("layer_norm", tx.shape(), self.value(gain).shape()));
        }
        let (g, b) = (self.value(gain).data(), self.value(bias).data());
        let mut out = vec![0.0; rows * d];
        let mut means = Vec::with_capacity(rows);
        let mut rstds = Vec::with_capacity(rows);
        for (xr, or) in tx.data().chunks_exact(d).zip(out.chunks_exact_mut(d)) {
            let mean = xr.iter().sum::<f32>() / d as f32;
            let var = xr.iter().map(|v| (v - mean) * (v - mean)).sum::<f32>() / d as f32;
            let rstd = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            for (((o, &xv), &gv), &bv) in or.iter_mut().zip(xr).zip(g).zip(b) {
                *o = (xv - mean) * rstd * gv + bv;
            }
            means.push(mean);
            rstds.push(rstd);
        }
        let t = Tensor::new(tx.shape().to_vec(), out)?;
        let rg = self.needs(&[x.0, gain.0, bias.0]);
        Ok(self.push(
            t,
            Op::LayerNorm { x: x.0, gain: gain.0, bias: bias.0, mean: means, rstd: rstds },
            rg,
        ))
    }

    /// Row-wise softmax with max subtraction.
    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        let ta = self.value(a);
        if !ta.is_finite() {
            return Err(Error::Numeric("softmax_rows input".into()));
        }
        let c = ta.cols();
        let mut data = ta.data().to_vec();
        for row in data.chunks_exact_mut(c) {
            kernels::softmax_in_place(row);
        }
        let t = Tensor::new(ta.shape().to_vec(), data)?;
        let rg = self.needs(&[a.0]);
        Ok(self.push(t, Op::Softmax { a: a.0 }, rg))
    }

    /// Gathers rows of `table[V×d]` for each id.
    pub fn embedding(&mut self, table: Var, ids: &[u32]) -> Result<Var> {
        let (v, d) = self.two_d(table, "embedding")?;
        if ids.is_empty() {
            return Err(Error::Contract("embedding of empty id list".into()));
        }
        let tt = self.value(table);
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            let id = id as usize;
            if id >= v {
                return Err(Error::Index { what: "embedding id", index: id, bound: v });
            }
            out.extend_from_slice(tt.row(id));
        }
        let t = Tensor::new(vec![ids.len(), d], out)?;
        let rg = self.needs(&[table.0]);
        Ok(self.push(t, Op::Embedding { table: table.0, ids: ids.to_vec() }, rg))
    }

    /// Rotates every head of `x[(batch·seq_len) × (n_heads·head_dim)]`; row `r`
    /// sits at position `r % seq_len`.
    pub fn rope(&mut self, x: Var, table: &Arc<RopeTable>, seq_len: usize, n_heads: usize) -> Result<Var> {
        let (rows, d) = self.two_d(x, "rope")?;
        let hd = table.head_dim();
        if d != n_heads * hd || rows % seq_len != 0 {
            return Err(dim_err("rope", &[rows, d], &[seq_len, n_heads * hd]));
        }
        if seq_len > table.max_position() {
            return Err(Error::Range { position: seq_len - 1, max_position: table.max_position() });
        }
        let mut data = self.value(x).data().to_vec();
        for (r, row) in data.chunks_exact_mut(d).enumerate() {
            let pos = r % seq_len;
            for head in row.chunks_exact_mut(hd) {
                table.rotate(head, pos);
            }
        }
        let t = Tensor::new(vec![rows, d], data)?;
        let rg = self.needs(&[x.0]);
        Ok(self.push(t, Op::Rope { a: x.0, table: Arc::clone(table), seq_len, n_heads }, rg))
    }

    /// Causal multi-head scaled dot-product attention.
    ///
    /// `q`, `k`, `v` are `[(batch·seq_len) × (n_heads·head_dim)]`. Scores are
    /// scaled by `1/sqrt(head_dim)`, future positions get [`ATTENTION_MASK`]
    /// added before the softmax, and the full `[seq_len × seq_len]` probability
    /// matrix per head is kept for the backward pass.
    pub fn causal_attention(&mut self, q: Var, k: Var, v: Var, seq_len: usize, n_heads: usize) -> Result<Var> {
        let (rows, d) = self.two_d(q, "attention")?;
        self.same_shape(q, k, "attention")?;
        self.same_shape(q, v, "attention")?;
        if n_heads == 0 || d % n_heads != 0 || seq_len == 0 || rows % seq_len != 0 {
            return Err(dim_err("attention", &[rows, d], &[seq_len, n_heads]));
        }
        let batch = rows / seq_len;
        let hd = d / n_heads;
        let scale = 1.0 / (hd as f32).sqrt();
        let (qd, kd, vd) = (self.value(q).data(), self.value(k).data(), self.value(v).data());
        let mut out = vec![0.0f32; rows * d];
        let mut probs = vec![0.0f32; batch * n_heads * seq_len * seq_len];
        let mut qh = vec![0.0f32; seq_len * hd];
        let mut kh = vec![0.0f32; seq_len * hd];
        let mut vh = vec![0.0f32; seq_len * hd];
        let mut oh = vec![0.0f32; hd];
        for b in 0..batch {
            for h in 0..n_heads {
                gather_head(qd, &mut qh, b, h, seq_len, d, hd);
                gather_head(kd, &mut kh, b, h, seq_len, d, hd);
                gather_head(vd, &mut vh, b, h, seq_len, d, hd);
                let pbase = (b * n_heads + h) * seq_len * seq_len;
                for t in 0..seq_len {
                    let prow = &mut probs[pbase + t * seq_len..pbase + (t + 1) * seq_len];
                    let qt = &qh[t * hd..(t + 1) * hd];
                    for (s, (p, ks)) in prow.iter_mut().zip(kh.chunks_exact(hd)).enumerate() {
                        let mask = if s > t { ATTENTION_MASK } else { 0.0 };
                        *p = kernels::dot(qt, ks) * scale + mask;
                    }
                    kernels::softmax_in_place(prow);
                    oh.fill(0.0);
                    for (&p, vs) in prow.iter().zip(vh.chunks_exact(hd)) {
                        kernels::axpy(p, vs, &mut oh);
                    }
                    let o = (b * seq_len + t) * d + h * hd;
                    out[o..o + hd].copy_from_slice(&oh);
                }
            }
        }
        let t = Tensor::new(vec![rows, d], out)?;
        let rg = self.needs(&[q.0, k.0, v.0]);
        Ok(self.push(
            t,
            Op::Attention { q: q.0, k: k.0, v: v.0, batch, seq_len, n_heads, probs },
            rg,
        ))
    }

    /// Mean over rows of `-log softmax(logits)[target]`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[u32]) -> Result<Var> {
        let tl = self.value(logits);
        let (n, vsz) = (tl.rows(), tl.cols());
        if targets.len() != n {
            return Err(dim_err("cross_entropy", tl.shape(), &[targets.len()]));
        }
        if !tl.is_finite() {
            return Err(Error::Numeric("cross_entropy logits".into()));
        }
        let mut probs = tl.data().to_vec();
        let mut total = 0.0f64;
        for (row, &tgt) in probs.chunks_exact_mut(vsz).zip(targets) {
            let tgt = tgt as usize;
            if tgt >= vsz {
                return Err(Error::Index { what: "cross_entropy target", index: tgt, bound: vsz });
            }
            let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
            let mut sum = 0.0f32;
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                sum += *v;
            }
            // -log p = log(sum) - (x_t - max); row[tgt] holds exp(x_t - max)
            let nll = sum.ln() - row[tgt].ln();
            total += nll as f64;
            let inv = 1.0 / sum;
            row.iter_mut().for_each(|v| *v *= inv);
        }
        let loss = (total / n as f64) as f32;
        let rg = self.needs(&[logits.0]);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy { logits: logits.0, targets: targets.to_vec(), probs },
            rg,
        ))
    }

    /// Propagates d(loss)/d(node) to every reachable leaf, adding into each
    /// leaf's gradient slot.
    pub fn backward(&mut self, loss: Var) -> Result<BackwardReport> {
        if !self.value(loss).is_scalar() {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut adj: Vec<Option<Vec<f32>>> = Vec::with_capacity(loss.0 + 1);
        adj.resize_with(loss.0 + 1, || None);
        adj[loss.0] = Some(vec![1.0]);
        let mut visited = 0;
        for i in (0..=loss.0).rev() {
            let Some(g) = adj[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            visited += 1;
            if let Op::Leaf = self.nodes[i].op {
                self.nodes[i].value.accumulate_grad(&g);
                continue;
            }
            self.backward_node(i, &g, &mut adj);
        }
        Ok(BackwardReport { nodes_visited: visited })
    }

    fn backward_node(&self, i: usize, g: &[f32], adj: &mut [Option<Vec<f32>>]) {
        let nodes = &self.nodes;
        match &nodes[i].op {
            Op::Leaf => unreachable!(),
            &Op::MatMul { a, b, m, k, n } => {
                if let Some(da) = slot(nodes, adj, a) {
                    kernels::matmul_grad_lhs(g, nodes[b].value.data(), da, m, k, n);
                }
                if let Some(db) = slot(nodes, adj, b) {
                    kernels::matmul_grad_rhs(nodes[a].value.data(), g, db, m, k, n);
                }
            }
            &Op::Linear { x, w, b, m, k, n } => {
                if let Some(dx) = slot(nodes, adj, x) {
                    kernels::matmul_grad_lhs(g, nodes[w].value.data(), dx, m, k, n);
                }
                if let Some(dw) = slot(nodes, adj, w) {
                    kernels::matmul_grad_rhs(nodes[x].value.data(), g, dw, m, k, n);
                }
                if let Some(db) = b.and_then(|b| slot(nodes, adj, b)) {
                    for row in g.chunks_exact(n) {
                        db.iter_mut().zip(row).for_each(|(d, r)| *d += r);
                    }
                }
            }
            &Op::Add { a, b } => {
                for j in [a, b] {
                    if let Some(d) = slot(nodes, adj, j) {
                        d.iter_mut().zip(g).for_each(|(d, g)| *d += g);
                    }
                }
            }
            &Op::Mul { a, b } => {
                if let Some(da) = slot(nodes, adj, a) {
                    for ((d, g), y) in da.iter_mut().zip(g).zip(nodes[b].value.data()) {
                        *d += g * y;
                    }
                }
                if let Some(db) = slot(nodes, adj, b) {
                    for ((d, g), x) in db.iter_mut().zip(g).zip(nodes[a].value.data()) {
                        *d += g * x;
                    }
                }
            }
            &Op::Scale { a, c } => {
                if let Some(d) = slot(nodes, adj, a) {
                    d.iter_mut().zip(g).for_each(|(d, g)| *d += c * g);
                }
            }
            &Op::Sum { a } => {
                if let Some(d) = slot(nodes, adj, a) {
                    d.iter_mut().for_each(|d| *d += g[0]);
                }
            }
            &Op::Tanh { a } => {
                if let Some(d) = slot(nodes, adj, a) {
                    for ((d, g), y) in d.iter_mut().zip(g).zip(nodes[i].value.data()) {
                        *d += g * (1.0 - y * y);
                    }
                }
            }
            &Op::Gelu { a } => {
                if let Some(d) = slot(nodes, adj, a) {
                    for ((d, g), &x) in d.iter_mut().zip(g).zip(nodes[a].value.data()) {
                        *d += g * kernels::gelu_grad(x);
                    }
                }
            }
            Op::LayerNorm { x, gain, bias, mean, rstd } => {
                let (x, gain, bias) = (*x, *gain, *bias);
                let xv = nodes[x].value.data();
                let gv = nodes[gain].value.data();
                let dcols = gv.len();
                let mut xhat = vec![0.0f32; dcols];
                let mut dxhat = vec![0.0f32; dcols];
                let mut dgain = vec![0.0f32; dcols];
                let mut dbias = vec![0.0f32; dcols];
                let mut dx_all = slot(nodes, adj, x).map(|_| vec![0.0f32; xv.len()]);
                for (r, (xr, gr)) in xv.chunks_exact(dcols).zip(g.chunks_exact(dcols)).enumerate() {
                    let (mu, rs) = (mean[r], rstd[r]);
                    for j in 0..dcols {
                        xhat[j] = (xr[j] - mu) * rs;
                        dxhat[j] = gr[j] * gv[j];
                        dgain[j] += gr[j] * xhat[j];
                        dbias[j] += gr[j];
                    }
                    if let Some(dx) = dx_all.as_mut() {
                        let m1 = dxhat.iter().sum::<f32>() / dcols as f32;
                        let m2 = dxhat.iter().zip(&xhat).map(|(a, b)| a * b).sum::<f32>() / dcols as f32;
                        let dxr = &mut dx[r * dcols..(r + 1) * dcols];
                        for j in 0..dcols {
                            dxr[j] = rs * (dxhat[j] - m1 - xhat[j] * m2);
                        }
                    }
                }
                if let (Some(src), Some(d)) = (dx_all, slot(nodes, adj, x)) {
                    d.iter_mut().zip(&src).for_each(|(d, s)| *d += s);
                }
                if let Some(d) = slot(nodes, adj, gain) {
                    d.iter_mut().zip(&dgain).for_each(|(d, s)| *d += s);
                }
                if let Some(d) = slot(nodes, adj, bias) {
                    d.iter_mut().zip(&dbias).for_each(|(d, s)| *d += s);
                }
            }
            &Op::Softmax { a } => {
                if let Some(d) = slot(nodes, adj, a) {
                    let y = nodes[i].value.data();
                    let c = nodes[i].value.cols();
                    for ((dr, gr), yr) in d.chunks_exact_mut(c).zip(g.chunks_exact(c)).zip(y.chunks_exact(c)) {
                        let s = kernels::dot(gr, yr);
                        for ((d, &g), &y) in dr.iter_mut().zip(gr).zip(yr) {
                            *d += y * (g - s);
                        }
                    }
                }
            }
            Op::Embedding { table, ids } => {
                if let Some(d) = slot(nodes, adj, *table) {
                    let dcols = nodes[*table].value.cols();
                    for (&id, gr) in ids.iter().zip(g.chunks_exact(dcols)) {
                        let row = &mut d[id as usize * dcols..(id as usize + 1) * dcols];
                        row.iter_mut().zip(gr).for_each(|(d, g)| *d += g);
                    }
                }
            }
            Op::Rope { a, table, seq_len, n_heads } => {
                if let Some(d) = slot(nodes, adj, *a) {
                    let hd = table.head_dim();
                    let dcols = hd * n_heads;
                    let mut buf = g.to_vec();
                    for (r, row) in buf.chunks_exact_mut(dcols).enumerate() {
                        for head in row.chunks_exact_mut(hd) {
                            table.rotate_inverse(head, r % seq_len);
                        }
                    }
                    d.iter_mut().zip(&buf).for_each(|(d, s)| *d += s);
                }
            }
            Op::Attention { q, k, v, batch, seq_len, n_heads, probs } => {
                let (q, k, v) = (*q, *k, *v);
                let grads = attention_backward(
                    g,
                    nodes[q].value.data(),
                    nodes[k].value.data(),
                    nodes[v].value.data(),
                    probs,
                    *batch,
                    *seq_len,
                    *n_heads,
                );
                for (j, src) in [(q, grads.0), (k, grads.1), (v, grads.2)] {
                    if let Some(d) = slot(nodes, adj, j) {
                        d.iter_mut().zip(&src).for_each(|(d, s)| *d += s);
                    }
                }
            }
            Op::CrossEntropy { logits, targets, probs } => {
                if let Some(d) = slot(nodes, adj, *logits) {
                    let vsz = nodes[*logits].value.cols();
                    let scale = g[0] / targets.len() as f32;
                    for ((dr, pr), &t) in d.chunks_exact_mut(vsz).zip(probs.chunks_exact(vsz)).zip(targets) {
                        for (dv, &p) in dr.iter_mut().zip(pr) {
                            *dv += p * scale;
                        }
                        dr[t as usize] -= scale;
                    }
                }
            }
        }
    }
}

/// Adjoint buffer for node `j`, allocated on first use; `None` when `j`
/// does not need a gradient.
fn slot<'a>(nodes: &[Node], adj: &'a mut [Option<Vec<f32>>], j: usize) -> Option<&'a mut Vec<f32>> {
    if !nodes[j].requires_grad {
        return None;
    }
    let len = nodes[j].value.numel();
    Some(adj[j].get_or_insert_with(|| vec![0.0; len]))
}

fn gather_head(src: &[f32], dst: &mut [f32], b: usize, h: usize, seq_len: usize, d: usize, hd: usize) {
    for (t, chunk) in dst.chunks_exact_mut(hd).enumerate() {
        let o = (b * seq_len + t) * d + h * hd;
        chunk.copy_from_slice(&src[o..o + hd]);
    }
}

fn scatter_head(src: &[f32], dst: &mut [f32], b: usize, h: usize, seq_len: usize, d: usize, hd: usize) {
    for (t, chunk) in src.chunks_exact(hd).enumerate() {
        let o = (b * seq_len + t) * d + h * hd;
        dst[o..o + hd].copy_from_slice(chunk);
    }
}

#[allow(clippy::too_many_arguments)]
fn attention_backward(
    dout: &[f32],
    q: &[f32],
    k: &[f32],
    v: &[f32],
    probs: &[f32],
    batch: usize,
    seq_len: usize,
    n_heads: usize,
) -> (Vec<f32>, Vec<f32>, Vec<f32>) {
    let d = q.len() / (batch * seq_len);
    let hd = d / n_heads;
    let scale = 1.0 / (hd as f32).sqrt();
    let mut dq = vec![0.0f32; q.len()];
    let mut dk = vec![0.0f32; k.len()];
    let mut dv = vec![0.0f32; v.len()];
    let n = seq_len * hd;
    let (mut qh, mut kh, mut vh, mut doh) = (vec![0.0; n], vec![0.0; n], vec![0.0; n], vec![0.0; n]);
    let (mut dqh, mut dkh, mut dvh) = (vec![0.0; n], vec![0.0; n], vec![0.0; n]);
    let mut ds = vec![0.0f32; seq_len];
    for b in 0..batch {
        for h in 0..n_heads {
            gather_head(q, &mut qh, b, h, seq_len, d, hd);
            gather_head(k, &mut kh, b, h, seq_len, d, hd);
            gather_head(v, &mut vh, b, h, seq_len, d, hd);
            gather_head(dout, &mut doh, b, h, seq_len, d, hd);
            dqh.fill(0.0);
            dkh.fill(0.0);
            dvh.fill(0.0);
            let pbase = (b * n_heads + h) * seq_len * seq_len;
            for t in 0..seq_len {
                let prow = &probs[pbase + t * seq_len..pbase + (t + 1) * seq_len];
                let dot_t = &doh[t * hd..(t + 1) * hd];
                let mut rowdot = 0.0f32;
                for (s, (dsv, &p)) in ds.iter_mut().zip(prow).enumerate() {
                    let dp = kernels::dot(dot_t, &vh[s * hd..(s + 1) * hd]);
                    kernels::axpy(p, dot_t, &mut dvh[s * hd..(s + 1) * hd]);
                    *dsv = dp;
                    rowdot += p * dp;
                }
                let qt = &qh[t * hd..(t + 1) * hd];
                let dqt = &mut dqh[t * hd..(t + 1) * hd];
                for (s, (dsv, &p)) in ds.iter().zip(prow).enumerate() {
                    let dscore = p * (dsv - rowdot) * scale;
                    kernels::axpy(dscore, &kh[s * hd..(s + 1) * hd], dqt);
                    kernels::axpy(dscore, qt, &mut dkh[s * hd..(s + 1) * hd]);
                }
            }
            scatter_head(&dqh, &mut dq, b, h, seq_len, d, hd);
            scatter_head(&dkh, &mut dk, b, h, seq_len, d, hd);
            scatter_head(&dvh, &mut dv, b, h, seq_len, d, hd);
        }
    }
    (dq, dk, dv)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t2(rows: &[&[f32]]) -> Tensor {
        Tensor::from_rows(rows).unwrap()
    }

    #[test]
    fn matmul_identity() {
        let mut g = Graph::new();
        let i = g.input(t2(&[&[1.0, 0.0], &[0.0, 1.0]]));
        let x = g.input(t2(&[&[1.0, 2.0], &[3.0, 4.0]]));
        let y = g.matmul(i, x).unwrap();
        assert_eq!(g.value(y).data(), &[1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn matmul_hand_product() {
        let mut g = Graph::new();
        let a = g.input(t2(&[&[1.0, 2.0], &[3.0, 4.0]]));
        let b = g.input(t2(&[&[5.0, 6.0], &[7.0, 8.0]]));
        let c = g.matmul(a, b).unwrap();
        assert_eq!(g.value(c).data(), &[19.0, 22.0, 43.0, 50.0]);
        assert_eq!(g.value(c).shape(), &[2, 2]);
    }

    #[test]
    fn matmul_shape_mismatch_names_both_shapes() {
        let mut g = Graph::new();
        let a = g.input(Tensor::zeros(&[2, 3]));
        let b = g.input(Tensor::zeros(&[2, 3]));
        let err = g.matmul(a, b).unwrap_err();
        let msg = err.to_string();
        assert!(matches!(err, Error::Dimension { .. }));
        assert!(msg.contains("[2, 3]"), "{msg}");
    }

    #[test]
    fn softmax_uniform_and_closed_form() {
        let c = 2.5f32;
        let mut g = Graph::new();
        let x = g.input(t2(&[&[0.0, 0.0, 0.0, 0.0]]));
        let y = g.softmax_rows(x).unwrap();
        for p in g.value(y).data() {
            assert!((p - 0.25).abs() < 1e-7);
        }
        let x2 = g.input(t2(&[&[c, c + 3f32.ln()]]));
        let y2 = g.softmax_rows(x2).unwrap();
        assert!((g.value(y2).data()[0] - 0.25).abs() < 1e-6);
        assert!((g.value(y2).data()[1] - 0.75).abs() < 1e-6);
    }

    #[test]
    fn softmax_rejects_nan() {
        let mut g = Graph::new();
        let x = g.input(t2(&[&[0.0, f32::NAN]]));
        assert!(matches!(g.softmax_rows(x), Err(Error::Numeric(_))));
    }

    #[test]
    fn cross_entropy_uniform_is_log_v() {
        let mut g = Graph::new();
        let logits = g.input(Tensor::zeros(&[7, 100]));
        let loss = g.cross_entropy(logits, &[0, 5, 99, 3, 3, 42, 17]).unwrap();
        assert!((g.value(loss).item() - 100f32.ln()).abs() < 1e-5);
    }

    #[test]
    fn cross_entropy_margin_beats_uniform() {
        let mut g = Graph::new();
        let mut data = vec![0.0f32; 3 * 10];
        data[4] = 3.0;
        data[10 + 7] = 3.0;
        data[20] = 3.0;
        let logits = g.input(Tensor::new(vec![3, 10], data).unwrap());
        let loss = g.cross_entropy(logits, &[4, 7, 0]).unwrap();
        assert!(g.value(loss).item() < 10f32.ln());
    }

    #[test]
    fn cross_entropy_target_out_of_range() {
        let mut g = Graph::new();
        let logits = g.input(Tensor::zeros(&[2, 4]));
        assert!(matches!(g.cross_entropy(logits, &[1, 4]), Err(Error::Index { .. })));
    }

    #[test]
    fn backward_linear_case() {
        let mut g = Graph::new();
        let x = vec![0.5f32, -2.0, 3.0, 0.25];
        let w = g.param(Tensor::new(vec![4], vec![1.0, 1.0, -1.0, 2.0]).unwrap());
        let xv = g.input(Tensor::new(vec![4], x.clone()).unwrap());
        let p = g.mul(w, xv).unwrap();
        let s = g.sum(p);
        g.backward(s).unwrap();
        assert_eq!(g.grad(w).unwrap(), &x[..]);
        assert!(g.grad(xv).is_none());
    }

    #[test]
    fn backward_twice_doubles() {
        let mut g = Graph::new();
        let w = g.param(t2(&[&[0.3, -0.2], &[0.1, 0.4]]));
        let x = g.input(t2(&[&[1.0, 2.0]]));
        let y = g.matmul(x, w).unwrap();
        let t = g.tanh(y);
        let s = g.sum(t);
        g.backward(s).unwrap();
        let first = g.grad(w).unwrap().to_vec();
        g.backward(s).unwrap();
        let second = g.grad(w).unwrap();
        for (a, b) in first.iter().zip(second) {
            assert_eq!(2.0 * a, *b);
        }
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut g = Graph::new();
        let w = g.param(Tensor::zeros(&[2, 2]));
        assert!(matches!(g.backward(w), Err(Error::Contract(_))));
    }

    #[test]
    fn backward_visits_each_node_once() {
        let mut g = Graph::new();
        let w = g.param(t2(&[&[0.3, -0.2], &[0.1, 0.4]]));
        let x = g.input(t2(&[&[1.0, 2.0]]));
        let y = g.matmul(x, w).unwrap();
        let y2 = g.add(y, y).unwrap(); // shared input
        let s = g.sum(y2);
        let report = g.backward(s).unwrap();
        // w, y, y2, s (x is constant)
        assert_eq!(report.nodes_visited, 4);
        assert_eq!(g.grad(w).unwrap(), &[2.0, 2.0, 4.0, 4.0]);
    }

    #[test]
    fn attention_single_position_returns_value() {
        let mut g = Graph::new();
        let q = g.input(t2(&[&[0.3, -1.0, 2.0, 0.5]]));
        let k = g.input(t2(&[&[1.0, 0.2, -0.7, 0.0]]));
        let v = g.input(t2(&[&[4.0, -3.0, 2.0, 1.0]]));
        let o = g.causal_attention(q, k, v, 1, 2).unwrap();
        assert_eq!(g.value(o).data(), &[4.0, -3.0, 2.0, 1.0]);
    }

    #[test]
    fn attention_masked_weights_vanish() {
        let mut g = Graph::new();
        let rows: Vec<Vec<f32>> = (0..5).map(|t| vec![t as f32 * 0.3, 1.0 - t as f32 * 0.2]).collect();
        let rr: Vec<&[f32]> = rows.iter().map(|r| r.as_slice()).collect();
        let q = g.input(t2(&rr));
        let k = g.input(t2(&rr));
        let v = g.input(t2(&rr));
        let _ = g.causal_attention(q, k, v, 5, 1).unwrap();
        let Op::Attention { probs, .. } = &g.nodes.last().unwrap().op else { panic!() };
        for t in 0..5 {
            let row = &probs[t * 5..(t + 1) * 5];
            let sum: f32 = row[..=t].iter().sum();
            assert!((sum - 1.0).abs() < 1e-6);
            assert!(row[t + 1..].iter().all(|&p| p < 1e-7));
        }
    }

    #[test]
    fn graph_stats_count_saved_state() {
        let mut g = Graph::new();
        let x = g.input(Tensor::zeros(&[3, 4]));
        let gain = g.param(Tensor::new(vec![4], vec![1.0; 4]).unwrap());
        let bias = g.param(Tensor::zeros(&[4]));
        let _ = g.layer_norm(x, gain, bias).unwrap();
        let s = g.stats();
        assert_eq!(s.leaf_values, 20);
        assert_eq!(s.activation_values, 12);
        assert_eq!(s.saved_values, 6);
    }
}
