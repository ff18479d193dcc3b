//! Reverse-mode tape.
//!
//! Nodes are appended in execution order, so the node index is already a
//! topological order and backward is a single reverse sweep. All values are
//! `f64`; every 2-D operand is row-major `[rows, cols]`.

use super::Tensor;
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
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
    Add(Var, Var),
    AddRowBias(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Gather { table: Var, ids: Vec<usize> },
    Softmax(Var),
    RmsNorm { x: Var, inv_rms: Vec<f64> },
    Silu(Var),
    CausalAttention { q: Var, k: Var, v: Var, heads: usize, probs: Vec<f64> },
    CrossEntropy { logits: Var, targets: Vec<usize>, probs: Vec<f64> },
    SelectRows { x: Var, rows: Vec<usize> },
    SumColumns { x: Var, cols: Vec<usize> },
    PickPerRow { x: Var, cols: Vec<usize> },
    LnClamped { x: Var, floor: f64 },
    Exp(Var),
    Sum(Var),
}

#[derive(Debug)]
struct Node {
    shape: Vec<usize>,
    value: Vec<f64>,
    op: Op,
}

impl Node {
    fn rows(&self) -> usize {
        match self.shape.len() {
            0 | 1 => 1,
            n => self.shape[..n - 1].iter().product(),
        }
    }

    fn cols(&self) -> usize {
        self.shape.last().copied().unwrap_or(1)
    }
}

/// Records operations for one forward pass and differentiates them once.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
    backpropagated: bool,
}

fn shape2(rows: usize, cols: usize) -> Vec<usize> {
    vec![rows, cols]
}

fn accumulate(slot: &mut Option<Vec<f64>>, len: usize) -> &mut Vec<f64> {
    slot.get_or_insert_with(|| vec![0.0; len])
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

    fn push(&mut self, shape: Vec<usize>, value: Vec<f64>, op: Op) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        self.nodes.push(Node { shape, value, op });
        Var(self.nodes.len() - 1)
    }

    fn node(&self, v: Var) -> &Node {
        &self.nodes[v.0]
    }

    /// Records an input (parameter or constant).
    pub fn leaf(&mut self, t: &Tensor) -> Var {
        self.push(t.shape().to_vec(), t.data().to_vec(), Op::Leaf)
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.node(v).value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.node(v).shape
    }

    /// The value of a one-element node.
    pub fn scalar(&self, v: Var) -> Result<f64> {
        let n = self.node(v);
        if n.value.len() != 1 {
            return Err(Error::Contract(format!(
                "expected a scalar, got shape {:?}",
                n.shape
            )));
        }
        Ok(n.value[0])
    }

    pub fn to_tensor(&self, v: Var) -> Tensor {
        let n = self.node(v);
        Tensor::new(n.shape.clone(), n.value.clone())
            .unwrap_or_else(|_| Tensor::zeros(n.shape.clone()))
    }

    fn dims2(&self, v: Var, what: &str) -> Result<(usize, usize)> {
        let n = self.node(v);
        if n.shape.len() != 2 {
            return Err(Error::Dimension(format!(
                "{what} expects a 2-D operand, got shape {:?}",
                n.shape
            )));
        }
        Ok((n.shape[0], n.shape[1]))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims2(a, "matmul")?;
        let (k2, n) = self.dims2(b, "matmul")?;
        if k != k2 {
            return Err(Error::Dimension(format!(
                "matmul inner dimensions differ: [{m}x{k}] x [{k2}x{n}]"
            )));
        }
        let out = matmul_raw(&self.node(a).value, &self.node(b).value, m, k, n);
        Ok(self.push(shape2(m, n), out, Op::MatMul(a, b)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.node(a).shape != self.node(b).shape {
            return Err(Error::Dimension(format!(
                "add shapes differ: {:?} vs {:?}",
                self.node(a).shape,
                self.node(b).shape
            )));
        }
        let out = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(x, y)| x + y)
            .collect();
        Ok(self.push(self.node(a).shape.clone(), out, Op::Add(a, b)))
    }

    /// Adds a length-`cols` vector to every row of `x`.
    pub fn add_row_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (rows, cols) = self.dims2(x, "add_row_bias")?;
        if self.node(bias).value.len() != cols {
            return Err(Error::Dimension(format!(
                "bias of length {} for rows of width {cols}",
                self.node(bias).value.len()
            )));
        }
        let b = &self.node(bias).value;
        let mut out = self.node(x).value.clone();
        for r in 0..rows {
            for (o, bv) in out[r * cols..(r + 1) * cols].iter_mut().zip(b) {
                *o += bv;
            }
        }
        Ok(self.push(shape2(rows, cols), out, Op::AddRowBias(x, bias)))
    }

    /// Elementwise product of equal shapes.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.node(a).shape != self.node(b).shape {
            return Err(Error::Dimension(format!(
                "mul shapes differ: {:?} vs {:?}",
                self.node(a).shape,
                self.node(b).shape
            )));
        }
        let out = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(x, y)| x * y)
            .collect();
        Ok(self.push(self.node(a).shape.clone(), out, Op::Mul(a, b)))
    }

    /// Multiplies by a constant.
    pub fn scale(&mut self, x: Var, factor: f64) -> Var {
        let out = self.value(x).iter().map(|v| v * factor).collect();
        self.push(self.node(x).shape.clone(), out, Op::Scale(x, factor))
    }

    /// Row lookup: output row `i` is `table[ids[i]]`.
    pub fn gather(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (rows, cols) = self.dims2(table, "gather")?;
        if let Some(&bad) = ids.iter().find(|&&i| i >= rows) {
            return Err(Error::Input(format!("gather id {bad} out of range for {rows} rows")));
        }
        let t = &self.node(table).value;
        let mut out = Vec::with_capacity(ids.len() * cols);
        for &i in ids {
            out.extend_from_slice(&t[i * cols..(i + 1) * cols]);
        }
        Ok(self.push(
            shape2(ids.len(), cols),
            out,
            Op::Gather {
                table,
                ids: ids.to_vec(),
            },
        ))
    }

    /// Max-stabilized softmax over the last axis.
    pub fn softmax(&mut self, x: Var) -> Var {
        let n = self.node(x);
        let (rows, cols) = (n.rows(), n.cols());
        let mut out = n.value.clone();
        for r in 0..rows {
            softmax_in_place(&mut out[r * cols..(r + 1) * cols]);
        }
        let shape = n.shape.clone();
        self.push(shape, out, Op::Softmax(x))
    }

    /// Parameter-free RMS normalization of each row.
    pub fn rms_norm(&mut self, x: Var, eps: f64) -> Result<Var> {
        let (rows, cols) = self.dims2(x, "rms_norm")?;
        let xv = &self.node(x).value;
        let mut out = vec![0.0; rows * cols];
        let mut inv_rms = Vec::with_capacity(rows);
        for r in 0..rows {
            let row = &xv[r * cols..(r + 1) * cols];
            let ms = row.iter().map(|v| v * v).sum::<f64>() / cols as f64;
            let inv = 1.0 / (ms + eps).sqrt();
            for (o, v) in out[r * cols..(r + 1) * cols].iter_mut().zip(row) {
                *o = v * inv;
            }
            inv_rms.push(inv);
        }
        Ok(self.push(shape2(rows, cols), out, Op::RmsNorm { x, inv_rms }))
    }

    pub fn silu(&mut self, x: Var) -> Var {
        let out = self.value(x).iter().map(|&v| v * sigmoid(v)).collect();
        self.push(self.node(x).shape.clone(), out, Op::Silu(x))
    }

    /// Multi-head scaled dot-product attention with a causal mask.
    ///
    /// `q`, `k`, `v` are `[T, d]`; head `h` owns columns `h*d/heads ..`.
    pub fn causal_attention(&mut self, q: Var, k: Var, v: Var, heads: usize) -> Result<Var> {
        let (t, d) = self.dims2(q, "causal_attention")?;
        if self.dims2(k, "causal_attention")? != (t, d) || self.dims2(v, "causal_attention")? != (t, d)
        {
            return Err(Error::Dimension("q, k and v must share one shape".into()));
        }
        if heads == 0 || d % heads != 0 {
            return Err(Error::Dimension(format!("{d} columns cannot split into {heads} heads")));
        }
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let (qv, kv, vv) = (&self.node(q).value, &self.node(k).value, &self.node(v).value);
        let mut probs = vec![0.0; heads * t * t];
        let mut out = vec![0.0; t * d];
        for h in 0..heads {
            let off = h * dh;
            for i in 0..t {
                let p = &mut probs[(h * t + i) * t..(h * t + i + 1) * t];
                for j in 0..=i {
                    let mut s = 0.0;
                    for c in 0..dh {
                        s += qv[i * d + off + c] * kv[j * d + off + c];
                    }
                    p[j] = s * scale;
                }
                softmax_in_place(&mut p[..=i]);
                for j in 0..=i {
                    let pij = p[j];
                    for c in 0..dh {
                        out[i * d + off + c] += pij * vv[j * d + off + c];
                    }
                }
            }
        }
        Ok(self.push(
            shape2(t, d),
            out,
            Op::CausalAttention {
                q,
                k,
                v,
                heads,
                probs,
            },
        ))
    }

    /// Mean negative log-likelihood of `targets` under row-wise softmax of `logits`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let (rows, cols) = self.dims2(logits, "cross_entropy")?;
        if targets.len() != rows || rows == 0 {
            return Err(Error::Dimension(format!(
                "{} targets for {rows} logit rows",
                targets.len()
            )));
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= cols) {
            return Err(Error::Input(format!("target {bad} out of range for {cols} classes")));
        }
        let mut probs = self.node(logits).value.clone();
        let mut nll = 0.0;
        for (r, &t) in targets.iter().enumerate() {
            let row = &mut probs[r * cols..(r + 1) * cols];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = row.iter().map(|v| (v - max).exp()).sum::<f64>().ln() + max;
            nll += lse - row[t];
            softmax_in_place(row);
        }
        Ok(self.push(
            Vec::new(),
            vec![nll / rows as f64],
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
        ))
    }

    /// Keeps the listed rows, in the listed order.
    pub fn select_rows(&mut self, x: Var, rows: &[usize]) -> Result<Var> {
        let (n, cols) = self.dims2(x, "select_rows")?;
        if let Some(&bad) = rows.iter().find(|&&r| r >= n) {
            return Err(Error::Input(format!("row {bad} out of range for {n} rows")));
        }
        let xv = &self.node(x).value;
        let mut out = Vec::with_capacity(rows.len() * cols);
        for &r in rows {
            out.extend_from_slice(&xv[r * cols..(r + 1) * cols]);
        }
        Ok(self.push(
            shape2(rows.len(), cols),
            out,
            Op::SelectRows {
                x,
                rows: rows.to_vec(),
            },
        ))
    }

    /// Scalar sum of the listed columns over every row. Duplicate columns count once.
    pub fn sum_columns(&mut self, x: Var, cols: &[usize]) -> Result<Var> {
        let (rows, width) = self.dims2(x, "sum_columns")?;
        let mut cols = cols.to_vec();
        cols.sort_unstable();
        cols.dedup();
        if let Some(&bad) = cols.iter().find(|&&c| c >= width) {
            return Err(Error::Input(format!("column {bad} out of range for width {width}")));
        }
        let xv = &self.node(x).value;
        let mut s = 0.0;
        for r in 0..rows {
            for &c in &cols {
                s += xv[r * width + c];
            }
        }
        Ok(self.push(Vec::new(), vec![s], Op::SumColumns { x, cols }))
    }

    /// Picks `x[i, cols[i]]` from each row, giving a vector of length `rows`.
    pub fn pick_per_row(&mut self, x: Var, cols: &[usize]) -> Result<Var> {
        let (rows, width) = self.dims2(x, "pick_per_row")?;
        if cols.len() != rows {
            return Err(Error::Dimension(format!("{} picks for {rows} rows", cols.len())));
        }
        if let Some(&bad) = cols.iter().find(|&&c| c >= width) {
            return Err(Error::Input(format!("column {bad} out of range for width {width}")));
        }
        let xv = &self.node(x).value;
        let out = cols.iter().enumerate().map(|(r, &c)| xv[r * width + c]).collect();
        Ok(self.push(
            vec![rows],
            out,
            Op::PickPerRow {
                x,
                cols: cols.to_vec(),
            },
        ))
    }

    /// Natural log, clamped below at `floor`; clamped entries carry no gradient.
    pub fn ln_clamped(&mut self, x: Var, floor: f64) -> Var {
        let out = self
            .value(x)
            .iter()
            .map(|&v| if v > 0.0 { v.ln().max(floor) } else { floor })
            .collect();
        self.push(self.node(x).shape.clone(), out, Op::LnClamped { x, floor })
    }

    pub fn exp(&mut self, x: Var) -> Var {
        let out = self.value(x).iter().map(|v| v.exp()).collect();
        self.push(self.node(x).shape.clone(), out, Op::Exp(x))
    }

    /// Sum of all entries, as a scalar.
    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).iter().sum();
        self.push(Vec::new(), vec![s], Op::Sum(x))
    }

    /// Mean of all entries, as a scalar.
    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).len().max(1) as f64;
        let s = self.sum(x);
        self.scale(s, 1.0 / n)
    }

    /// Differentiates the scalar `root` with respect to every recorded node.
    ///
    /// Gradients from a previous call are discarded. A tape can be
    /// differentiated once; record a fresh forward pass to differentiate again.
    pub fn backward(&mut self, root: Var) -> Result<()> {
        if self.backpropagated {
            return Err(Error::Contract(
                "backward already ran on this tape; record a new forward pass".into(),
            ));
        }
        if root.0 >= self.nodes.len() {
            return Err(Error::Contract("root is not on this tape".into()));
        }
        if self.nodes[root.0].value.len() != 1 {
            return Err(Error::Contract(format!(
                "backward root must be scalar, got shape {:?}",
                self.nodes[root.0].shape
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(vec![1.0]);
        for idx in (0..=root.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        self.grads = grads;
        self.backpropagated = true;
        Ok(())
    }

    /// d(root)/d(v) after [`Tape::backward`]; `None` if `v` does not reach the root.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn is_backpropagated(&self) -> bool {
        self.backpropagated
    }

    fn propagate(&self, idx: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[idx];
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = (self.nodes[a.0].shape[0], self.nodes[a.0].shape[1]);
                let n = self.nodes[b.0].shape[1];
                let av = &self.nodes[a.0].value;
                let bv = &self.nodes[b.0].value;
                {
                    let da = accumulate(&mut grads[a.0], m * k);
                    for i in 0..m {
                        let grow = &g[i * n..(i + 1) * n];
                        for p in 0..k {
                            let brow = &bv[p * n..(p + 1) * n];
                            da[i * k + p] += dot(grow, brow);
                        }
                    }
                }
                let db = accumulate(&mut grads[b.0], k * n);
                for i in 0..m {
                    let grow = &g[i * n..(i + 1) * n];
                    for p in 0..k {
                        let aip = av[i * k + p];
                        if aip != 0.0 {
                            for (d, gv) in db[p * n..(p + 1) * n].iter_mut().zip(grow) {
                                *d += aip * gv;
                            }
                        }
                    }
                }
            }
            Op::Add(a, b) => {
                for v in [a, b] {
                    let d = accumulate(&mut grads[v.0], g.len());
                    for (d, gv) in d.iter_mut().zip(g) {
                        *d += gv;
                    }
                }
            }
            Op::AddRowBias(x, bias) => {
                let cols = node.cols();
                {
                    let dx = accumulate(&mut grads[x.0], g.len());
                    for (d, gv) in dx.iter_mut().zip(g) {
                        *d += gv;
                    }
                }
                let db = accumulate(&mut grads[bias.0], cols);
                for row in g.chunks(cols) {
                    for (d, gv) in db.iter_mut().zip(row) {
                        *d += gv;
                    }
                }
            }
            Op::Mul(a, b) => {
                let av = &self.nodes[a.0].value;
                let bv = &self.nodes[b.0].value;
                {
                    let da = accumulate(&mut grads[a.0], g.len());
                    for ((d, gv), y) in da.iter_mut().zip(g).zip(bv) {
                        *d += gv * y;
                    }
                }
                let db = accumulate(&mut grads[b.0], g.len());
                for ((d, gv), x) in db.iter_mut().zip(g).zip(av) {
                    *d += gv * x;
                }
            }
            Op::Scale(x, f) => {
                let dx = accumulate(&mut grads[x.0], g.len());
                for (d, gv) in dx.iter_mut().zip(g) {
                    *d += gv * f;
                }
            }
            Op::Gather { table, ids } => {
                let cols = node.cols();
                let len = self.nodes[table.0].value.len();
                let dt = accumulate(&mut grads[table.0], len);
                for (r, &i) in ids.iter().enumerate() {
                    for (d, gv) in dt[i * cols..(i + 1) * cols]
                        .iter_mut()
                        .zip(&g[r * cols..(r + 1) * cols])
                    {
                        *d += gv;
                    }
                }
            }
            Op::Softmax(x) => {
                let cols = node.cols();
                let dx = accumulate(&mut grads[x.0], g.len());
                for ((drow, grow), yrow) in dx
                    .chunks_mut(cols)
                    .zip(g.chunks(cols))
                    .zip(node.value.chunks(cols))
                {
                    let inner = dot(grow, yrow);
                    for ((d, gv), y) in drow.iter_mut().zip(grow).zip(yrow) {
                        *d += y * (gv - inner);
                    }
                }
            }
            Op::RmsNorm { x, inv_rms } => {
                let cols = node.cols();
                let xv = &self.nodes[x.0].value;
                let dx = accumulate(&mut grads[x.0], g.len());
                for (r, &inv) in inv_rms.iter().enumerate() {
                    let xrow = &xv[r * cols..(r + 1) * cols];
                    let grow = &g[r * cols..(r + 1) * cols];
                    let gx = dot(grow, xrow);
                    let coef = inv * inv * inv * gx / cols as f64;
                    for ((d, gv), xj) in dx[r * cols..(r + 1) * cols].iter_mut().zip(grow).zip(xrow)
                    {
                        *d += inv * gv - coef * xj;
                    }
                }
            }
            Op::Silu(x) => {
                let xv = &self.nodes[x.0].value;
                let dx = accumulate(&mut grads[x.0], g.len());
                for ((d, gv), &xi) in dx.iter_mut().zip(g).zip(xv) {
                    let s = sigmoid(xi);
                    *d += gv * s * (1.0 + xi * (1.0 - s));
                }
            }
            Op::CausalAttention {
                q,
                k,
                v,
                heads,
                probs,
            } => self.attention_backward(node, g, grads, (*q, *k, *v), *heads, probs),
            Op::CrossEntropy {
                logits,
                targets,
                probs,
            } => {
                let cols = self.nodes[logits.0].cols();
                let scale = g[0] / targets.len() as f64;
                let dl = accumulate(&mut grads[logits.0], probs.len());
                for (r, &t) in targets.iter().enumerate() {
                    for (c, d) in dl[r * cols..(r + 1) * cols].iter_mut().enumerate() {
                        let onehot = if c == t { 1.0 } else { 0.0 };
                        *d += scale * (probs[r * cols + c] - onehot);
                    }
                }
            }
            Op::SelectRows { x, rows } => {
                let cols = node.cols();
                let len = self.nodes[x.0].value.len();
                let dx = accumulate(&mut grads[x.0], len);
                for (o, &r) in rows.iter().enumerate() {
                    for (d, gv) in dx[r * cols..(r + 1) * cols]
                        .iter_mut()
                        .zip(&g[o * cols..(o + 1) * cols])
                    {
                        *d += gv;
                    }
                }
            }
            Op::SumColumns { x, cols } => {
                let xn = &self.nodes[x.0];
                let (rows, width) = (xn.rows(), xn.cols());
                let dx = accumulate(&mut grads[x.0], rows * width);
                for r in 0..rows {
                    for &c in cols {
                        dx[r * width + c] += g[0];
                    }
                }
            }
            Op::PickPerRow { x, cols } => {
                let width = self.nodes[x.0].cols();
                let len = self.nodes[x.0].value.len();
                let dx = accumulate(&mut grads[x.0], len);
                for (r, &c) in cols.iter().enumerate() {
                    dx[r * width + c] += g[r];
                }
            }
            Op::LnClamped { x, floor } => {
                let xv = &self.nodes[x.0].value;
                let dx = accumulate(&mut grads[x.0], g.len());
                for (((d, gv), &xi), &y) in dx.iter_mut().zip(g).zip(xv).zip(&node.value) {
                    if xi > 0.0 && y > *floor {
                        *d += gv / xi;
                    }
                }
            }
            Op::Exp(x) => {
                let dx = accumulate(&mut grads[x.0], g.len());
                for ((d, gv), y) in dx.iter_mut().zip(g).zip(&node.value) {
                    *d += gv * y;
                }
            }
            Op::Sum(x) => {
                let len = self.nodes[x.0].value.len();
                let dx = accumulate(&mut grads[x.0], len);
                for d in dx.iter_mut() {
                    *d += g[0];
                }
            }
        }
    }

    fn attention_backward(
        &self,
        node: &Node,
        g: &[f64],
        grads: &mut [Option<Vec<f64>>],
        (q, k, v): (Var, Var, Var),
        heads: usize,
        probs: &[f64],
    ) {
        let (t, d) = (node.shape[0], node.shape[1]);
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let (qv, kv, vv) = (
            &self.nodes[q.0].value,
            &self.nodes[k.0].value,
            &self.nodes[v.0].value,
        );
        let mut dq = vec![0.0; t * d];
        let mut dk = vec![0.0; t * d];
        let mut dv = vec![0.0; t * d];
        let mut dp = vec![0.0; t];
        for h in 0..heads {
            let off = h * dh;
            for i in 0..t {
                let p = &probs[(h * t + i) * t..(h * t + i + 1) * t];
                let gi = &g[i * d + off..i * d + off + dh];
                let mut inner = 0.0;
                for j in 0..=i {
                    let vj = &vv[j * d + off..j * d + off + dh];
                    dp[j] = dot(gi, vj);
                    inner += p[j] * dp[j];
                    for (dvc, gc) in dv[j * d + off..j * d + off + dh].iter_mut().zip(gi) {
                        *dvc += p[j] * gc;
                    }
                }
                for j in 0..=i {
                    let ds = p[j] * (dp[j] - inner) * scale;
                    if ds == 0.0 {
                        continue;
                    }
                    for c in 0..dh {
                        dq[i * d + off + c] += ds * kv[j * d + off + c];
                        dk[j * d + off + c] += ds * qv[i * d + off + c];
                    }
                }
            }
        }
        for (var, local) in [(q, dq), (k, dk), (v, dv)] {
            let slot = accumulate(&mut grads[var.0], t * d);
            for (s, l) in slot.iter_mut().zip(local) {
                *s += l;
            }
        }
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    for v in row.iter_mut() {
        *v /= total;
    }
}

pub(crate) fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == 0.0 {
                continue;
            }
            for (o, bv) in orow.iter_mut().zip(&b[p * n..(p + 1) * n]) {
                *o += aip * bv;
            }
        }
    }
    out
}
