//! Tape-based reverse-mode differentiation over matrix-granular ops.
//!
//! Every op evaluates eagerly when it is recorded, so `graph.value(v)` is
//! available immediately. [`Graph::backward`] walks the tape once in
//! reverse and returns per-node gradients; parameter gradients can then be
//! folded into a [`ParamStore`].

use crate::error::{bail, Result};

use super::ops::{attention_core, rmsnorm_row, silu, silu_grad, softmax_in_place};
use super::params::ParamStore;
use super::tensor::{gemm, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Input,
    Param(String),
    MatMul(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Sum(Var),
    Silu(Var),
    RmsNorm {
        x: Var,
        gain: Var,
        inv_rms: Vec<f64>,
    },
    Gather {
        table: Var,
        ids: Vec<usize>,
    },
    ConcatCols(Vec<Var>),
    Attention {
        q: Var,
        k: Var,
        v: Var,
        seq_len: usize,
        heads: usize,
        probs: Vec<f64>,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        mask: Vec<bool>,
        probs: Vec<f64>,
        count: usize,
    },
}

struct Node {
    value: Tensor,
    op: Op,
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients indexed by node.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    params: Vec<(usize, String)>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads[v.0].as_ref()
    }

    /// Gradient per parameter name; a parameter referenced twice has its
    /// contributions summed.
    pub fn param_grads(&self) -> Vec<(&str, &Tensor)> {
        self.params
            .iter()
            .filter_map(|(i, name)| self.grads[*i].as_ref().map(|g| (name.as_str(), g)))
            .collect()
    }

    /// Adds `factor ·` every parameter gradient into `store`.
    pub fn accumulate_into(&self, store: &mut ParamStore, factor: f64) -> Result<()> {
        for (name, g) in self.param_grads() {
            store.accumulate_grad(name, g, factor)?;
        }
        Ok(())
    }
}

fn dims2(t: &Tensor) -> (usize, usize) {
    match t.shape() {
        [r, c] => (*r, *c),
        [c] => (1, *c),
        [] => (1, 1),
        s => (s[..s.len() - 1].iter().product(), s[s.len() - 1]),
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
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

    pub fn input(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Input)
    }

    pub fn param(&mut self, store: &ParamStore, name: &str) -> Result<Var> {
        let t = store.get(name)?.clone();
        Ok(self.push(t, Op::Param(name.to_string())))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = dims2(self.value(a));
        let (k2, n) = dims2(self.value(b));
        if k != k2 {
            bail!(
                Shape,
                "matmul {:?} x {:?}",
                self.value(a).shape(),
                self.value(b).shape()
            );
        }
        let mut out = vec![0.0; m * n];
        gemm(
            self.value(a).data(),
            m,
            k,
            false,
            self.value(b).data(),
            k,
            n,
            false,
            &mut out,
            false,
        );
        let t = Tensor::new(vec![m, n], out)?;
        Ok(self.push(t, Op::MatMul(a, b)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let mut t = self.value(a).clone();
        t.add_assign(self.value(b))?;
        Ok(self.push(t, Op::Add(a, b)))
    }

    /// Adds a length-`cols` row vector to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (_, n) = dims2(self.value(a));
        if self.value(row).len() != n {
            bail!(
                Shape,
                "row broadcast {:?} onto {:?}",
                self.value(row).shape(),
                self.value(a).shape()
            );
        }
        let mut t = self.value(a).clone();
        let r = self.value(row).data();
        for chunk in t.data_mut().chunks_mut(n) {
            for (x, b) in chunk.iter_mut().zip(r) {
                *x += b;
            }
        }
        Ok(self.push(t, Op::AddRow(a, row)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        if !self.value(a).same_shape(self.value(b)) {
            bail!(
                Shape,
                "elementwise mul {:?} and {:?}",
                self.value(a).shape(),
                self.value(b).shape()
            );
        }
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x * y)
            .collect();
        let t = Tensor::new(self.value(a).shape().to_vec(), data)?;
        Ok(self.push(t, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let mut t = self.value(a).clone();
        t.scale_in_place(factor);
        self.push(t, Op::Scale(a, factor))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(a))
    }

    pub fn silu(&mut self, a: Var) -> Var {
        let src = self.value(a);
        let data = src.data().iter().map(|&x| silu(x)).collect();
        let t = Tensor::new(src.shape().to_vec(), data).expect("same shape");
        self.push(t, Op::Silu(a))
    }

    /// Row-wise RMSNorm with a shared gain vector.
    pub fn rmsnorm(&mut self, x: Var, gain: Var, eps: f64) -> Result<Var> {
        let (rows, cols) = dims2(self.value(x));
        if self.value(gain).len() != cols {
            bail!(
                Shape,
                "rmsnorm gain {:?} for rows of width {cols}",
                self.value(gain).shape()
            );
        }
        let mut out = vec![0.0; rows * cols];
        let mut inv_rms = Vec::with_capacity(rows);
        {
            let xs = self.value(x).data();
            let g = self.value(gain).data();
            for r in 0..rows {
                inv_rms.push(rmsnorm_row(
                    &xs[r * cols..(r + 1) * cols],
                    g,
                    eps,
                    &mut out[r * cols..(r + 1) * cols],
                ));
            }
        }
        let t = Tensor::new(self.value(x).shape().to_vec(), out)?;
        Ok(self.push(t, Op::RmsNorm { x, gain, inv_rms }))
    }

    /// Embedding lookup: row `ids[i]` of `table` becomes output row `i`.
    pub fn gather(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (rows, cols) = dims2(self.value(table));
        let src = self.value(table).data();
        let mut out = Vec::with_capacity(ids.len() * cols);
        for &id in ids {
            if id >= rows {
                bail!(Input, "gather index {id} out of {rows} rows");
            }
            out.extend_from_slice(&src[id * cols..(id + 1) * cols]);
        }
        let t = Tensor::new(vec![ids.len(), cols], out)?;
        Ok(self.push(
            t,
            Op::Gather {
                table,
                ids: ids.to_vec(),
            },
        ))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(&first) = parts.first() else {
            bail!(Argument, "concat of zero tensors");
        };
        let rows = dims2(self.value(first)).0;
        let widths: Vec<usize> = parts.iter().map(|&p| dims2(self.value(p)).1).collect();
        for &p in parts {
            if dims2(self.value(p)).0 != rows {
                bail!(Shape, "concat rows differ");
            }
        }
        let total: usize = widths.iter().sum();
        let mut out = vec![0.0; rows * total];
        let mut off = 0;
        for (&p, &w) in parts.iter().zip(&widths) {
            let src = self.value(p).data();
            for r in 0..rows {
                out[r * total + off..r * total + off + w]
                    .copy_from_slice(&src[r * w..(r + 1) * w]);
            }
            off += w;
        }
        let t = Tensor::new(vec![rows, total], out)?;
        Ok(self.push(t, Op::ConcatCols(parts.to_vec())))
    }

    /// Multi-head attention core (no projections) over contiguous blocks of
    /// `seq_len` rows.
    pub fn attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        seq_len: usize,
        heads: usize,
        causal: bool,
    ) -> Result<Var> {
        let (rows, d) = dims2(self.value(q));
        if dims2(self.value(k)) != (rows, d) || dims2(self.value(v)) != (rows, d) {
            bail!(Shape, "attention q/k/v shapes differ");
        }
        if heads == 0 || d % heads != 0 {
            bail!(Config, "{heads} heads do not divide width {d}");
        }
        if seq_len == 0 || rows % seq_len != 0 {
            bail!(Shape, "{rows} rows are not a multiple of seq_len {seq_len}");
        }
        let (out, probs) = attention_core(
            self.value(q).data(),
            self.value(k).data(),
            self.value(v).data(),
            d,
            seq_len,
            heads,
            causal,
        );
        let t = Tensor::new(vec![rows, d], out)?;
        Ok(self.push(
            t,
            Op::Attention {
                q,
                k,
                v,
                seq_len,
                heads,
                probs,
            },
        ))
    }

    /// Attention weights recorded by an attention node, laid out as
    /// `[block][head][query][key]`.
    pub fn attention_probs(&self, v: Var) -> Option<&[f64]> {
        match &self.nodes[v.0].op {
            Op::Attention { probs, .. } => Some(probs),
            _ => None,
        }
    }

    /// Mean softmax cross-entropy (nats) over rows with `mask[i] == true`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize], mask: &[bool]) -> Result<Var> {
        let (rows, cols) = dims2(self.value(logits));
        if targets.len() != rows || mask.len() != rows {
            bail!(
                Shape,
                "{} targets / {} mask flags for {rows} logit rows",
                targets.len(),
                mask.len()
            );
        }
        let count = mask.iter().filter(|&&m| m).count();
        if count == 0 {
            bail!(Argument, "cross-entropy with every position masked");
        }
        let mut probs = self.value(logits).data().to_vec();
        let mut total = 0.0;
        for r in 0..rows {
            let row = &mut probs[r * cols..(r + 1) * cols];
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
            if mask[r] {
                let t = targets[r];
                if t >= cols {
                    bail!(Input, "target {t} outside vocabulary of {cols}");
                }
                total += lse - row[t];
            }
            softmax_in_place(row);
        }
        let loss = total / count as f64;
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                mask: mask.to_vec(),
                probs,
                count,
            },
        ))
    }

    pub fn backward(&self, root: Var) -> Gradients {
        let n = self.nodes.len();
        let mut grads: Vec<Option<Tensor>> = (0..n).map(|_| None).collect();
        grads[root.0] = Some(Tensor::full(self.value(root).shape(), 1.0));

        for i in (0..=root.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(i, &g, &mut grads);
            grads[i] = Some(g);
        }

        let params = self
            .nodes
            .iter()
            .enumerate()
            .filter_map(|(i, node)| match &node.op {
                Op::Param(name) => Some((i, name.clone())),
                _ => None,
            })
            .collect();
        Gradients { grads, params }
    }

    fn backprop_node(&self, i: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let node = &self.nodes[i];
        match &node.op {
            Op::Input | Op::Param(_) => {}
            Op::MatMul(a, b) => {
                let av = self.value(*a);
                let bv = self.value(*b);
                let (m, k) = dims2(av);
                let (_, n) = dims2(bv);
                let ga = slot(grads, *a, av.shape());
                gemm(g.data(), m, n, false, bv.data(), k, n, true, ga.data_mut(), true);
                let gb = slot(grads, *b, bv.shape());
                gemm(av.data(), m, k, true, g.data(), m, n, false, gb.data_mut(), true);
            }
            Op::Add(a, b) => {
                add_into(slot(grads, *a, g.shape()), g.data());
                add_into(slot(grads, *b, g.shape()), g.data());
            }
            Op::AddRow(a, row) => {
                add_into(slot(grads, *a, g.shape()), g.data());
                let rshape = self.value(*row).shape().to_vec();
                let n = self.value(*row).len();
                let gr = slot(grads, *row, &rshape);
                for chunk in g.data().chunks(n) {
                    for (acc, x) in gr.data_mut().iter_mut().zip(chunk) {
                        *acc += x;
                    }
                }
            }
            Op::Mul(a, b) => {
                let av = self.value(*a).data();
                let bv = self.value(*b).data();
                let ga = slot(grads, *a, g.shape());
                for ((acc, &gi), &bi) in ga.data_mut().iter_mut().zip(g.data()).zip(bv) {
                    *acc += gi * bi;
                }
                let gb = slot(grads, *b, g.shape());
                for ((acc, &gi), &ai) in gb.data_mut().iter_mut().zip(g.data()).zip(av) {
                    *acc += gi * ai;
                }
            }
            Op::Scale(a, f) => {
                let ga = slot(grads, *a, g.shape());
                for (acc, &gi) in ga.data_mut().iter_mut().zip(g.data()) {
                    *acc += f * gi;
                }
            }
            Op::Sum(a) => {
                let shape = self.value(*a).shape().to_vec();
                let gi = g.item();
                let ga = slot(grads, *a, &shape);
                ga.data_mut().iter_mut().for_each(|acc| *acc += gi);
            }
            Op::Silu(a) => {
                let xs = self.value(*a).data();
                let ga = slot(grads, *a, g.shape());
                for ((acc, &gi), &x) in ga.data_mut().iter_mut().zip(g.data()).zip(xs) {
                    *acc += gi * silu_grad(x);
                }
            }
            Op::RmsNorm { x, gain, inv_rms } => {
                let xv = self.value(*x);
                let (rows, cols) = dims2(xv);
                let gv = self.value(*gain).data().to_vec();
                let xs = xv.data();
                let mut gx = vec![0.0; rows * cols];
                let mut ggain = vec![0.0; cols];
                for r in 0..rows {
                    let inv = inv_rms[r];
                    let xr = &xs[r * cols..(r + 1) * cols];
                    let gr = &g.data()[r * cols..(r + 1) * cols];
                    let mut dot = 0.0;
                    for c in 0..cols {
                        dot += gr[c] * gv[c] * xr[c];
                        ggain[c] += gr[c] * xr[c] * inv;
                    }
                    let coef = inv * inv * inv * dot / cols as f64;
                    for c in 0..cols {
                        gx[r * cols + c] = inv * gv[c] * gr[c] - coef * xr[c];
                    }
                }
                add_into(slot(grads, *x, xv.shape()), &gx);
                let gshape = self.value(*gain).shape().to_vec();
                add_into(slot(grads, *gain, &gshape), &ggain);
            }
            Op::Gather { table, ids } => {
                let tshape = self.value(*table).shape().to_vec();
                let cols = *tshape.last().unwrap_or(&1);
                let gt = slot(grads, *table, &tshape);
                for (r, &id) in ids.iter().enumerate() {
                    let src = &g.data()[r * cols..(r + 1) * cols];
                    for (acc, x) in gt.data_mut()[id * cols..(id + 1) * cols].iter_mut().zip(src) {
                        *acc += x;
                    }
                }
            }
            Op::ConcatCols(parts) => {
                let (rows, total) = dims2(g);
                let mut off = 0;
                for &p in parts {
                    let pshape = self.value(p).shape().to_vec();
                    let w = dims2(self.value(p)).1;
                    let gp = slot(grads, p, &pshape);
                    for r in 0..rows {
                        let src = &g.data()[r * total + off..r * total + off + w];
                        for (acc, x) in gp.data_mut()[r * w..(r + 1) * w].iter_mut().zip(src) {
                            *acc += x;
                        }
                    }
                    off += w;
                }
            }
            Op::Attention {
                q,
                k,
                v,
                seq_len,
                heads,
                probs,
            } => {
                let (gq, gk, gv) = attention_backward(
                    self.value(*q).data(),
                    self.value(*k).data(),
                    self.value(*v).data(),
                    probs,
                    g.data(),
                    dims2(g).1,
                    *seq_len,
                    *heads,
                );
                let shape = g.shape().to_vec();
                add_into(slot(grads, *q, &shape), &gq);
                add_into(slot(grads, *k, &shape), &gk);
                add_into(slot(grads, *v, &shape), &gv);
            }
            Op::CrossEntropy {
                logits,
                targets,
                mask,
                probs,
                count,
            } => {
                let lshape = self.value(*logits).shape().to_vec();
                let cols = dims2(self.value(*logits)).1;
                let scale = g.item() / *count as f64;
                let gl = slot(grads, *logits, &lshape);
                let data = gl.data_mut();
                for (r, (&t, &m)) in targets.iter().zip(mask).enumerate() {
                    if !m {
                        continue;
                    }
                    let row = &probs[r * cols..(r + 1) * cols];
                    let out = &mut data[r * cols..(r + 1) * cols];
                    for (o, &p) in out.iter_mut().zip(row) {
                        *o += scale * p;
                    }
                    out[t] -= scale;
                }
            }
        }
    }
}

fn slot<'a>(grads: &'a mut [Option<Tensor>], v: Var, shape: &[usize]) -> &'a mut Tensor {
    grads[v.0].get_or_insert_with(|| Tensor::zeros(shape))
}

fn add_into(t: &mut Tensor, src: &[f64]) {
    for (a, b) in t.data_mut().iter_mut().zip(src) {
        *a += b;
    }
}

#[allow(clippy::too_many_arguments)]
fn attention_backward(
    q: &[f64],
    k: &[f64],
    v: &[f64],
    probs: &[f64],
    g_out: &[f64],
    d: usize,
    seq_len: usize,
    heads: usize,
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let rows = q.len() / d;
    let blocks = rows / seq_len;
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut gq = vec![0.0; rows * d];
    let mut gk = vec![0.0; rows * d];
    let mut gv = vec![0.0; rows * d];
    let mut dp = vec![0.0; seq_len];
    for b in 0..blocks {
        let base = b * seq_len;
        for h in 0..heads {
            let off = h * dh;
            for i in 0..seq_len {
                let p_off = ((b * heads + h) * seq_len + i) * seq_len;
                let p = &probs[p_off..p_off + seq_len];
                let go = &g_out[(base + i) * d + off..(base + i) * d + off + dh];
                let mut weighted = 0.0;
                for j in 0..seq_len {
                    if p[j] == 0.0 {
                        dp[j] = 0.0;
                        continue;
                    }
                    let vj = &v[(base + j) * d + off..(base + j) * d + off + dh];
                    dp[j] = go.iter().zip(vj).map(|(a, b)| a * b).sum();
                    weighted += p[j] * dp[j];
                    let gvj = &mut gv[(base + j) * d + off..(base + j) * d + off + dh];
                    for (acc, &x) in gvj.iter_mut().zip(go) {
                        *acc += p[j] * x;
                    }
                }
                let qi_idx = (base + i) * d + off;
                for j in 0..seq_len {
                    if p[j] == 0.0 {
                        continue;
                    }
                    let ds = p[j] * (dp[j] - weighted) * scale;
                    let kj_idx = (base + j) * d + off;
                    for c in 0..dh {
                        gq[qi_idx + c] += ds * k[kj_idx + c];
                        gk[kj_idx + c] += ds * q[qi_idx + c];
                    }
                }
            }
        }
    }
    (gq, gk, gv)
}
