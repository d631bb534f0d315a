//! Composite blocks built from graph ops, plus a forward-only attention block
//! over plain tensors for the victim model.

use rand::Rng;

use crate::error::{bail, Result};

use super::graph::{Graph, Var};
use super::ops::{attention_core, rmsnorm_row, RMSNORM_EPS};
use super::params::ParamStore;
use super::tensor::Tensor;

/// `x · W + b` with parameters `{prefix}.w` (in × out) and `{prefix}.b`.
pub fn linear(g: &mut Graph, store: &ParamStore, prefix: &str, x: Var) -> Result<Var> {
    let w = g.param(store, &format!("{prefix}.w"))?;
    let b = g.param(store, &format!("{prefix}.b"))?;
    let y = g.matmul(x, w)?;
    g.add_row(y, b)
}

pub fn init_linear(
    store: &mut ParamStore,
    prefix: &str,
    fan_in: usize,
    fan_out: usize,
    rng: &mut impl Rng,
) -> Result<()> {
    store.insert_normal(
        format!("{prefix}.w"),
        &[fan_in, fan_out],
        1.0 / (fan_in as f64).sqrt(),
        rng,
    )?;
    store.insert(format!("{prefix}.b"), Tensor::zeros(&[fan_out]))
}

/// SwiGLU expert over rows of `h` with `{prefix}.w1|w2|w3`.
pub fn swiglu(g: &mut Graph, store: &ParamStore, prefix: &str, h: Var) -> Result<Var> {
    let w1 = g.param(store, &format!("{prefix}.w1"))?;
    let w2 = g.param(store, &format!("{prefix}.w2"))?;
    let w3 = g.param(store, &format!("{prefix}.w3"))?;
    let gate = g.matmul(h, w1)?;
    let gate = g.silu(gate);
    let up = g.matmul(h, w3)?;
    let inner = g.mul(gate, up)?;
    g.matmul(inner, w2)
}

/// Pre-norm multi-head self-attention with residual:
/// `x + Wo · MHA(rmsnorm(x))`. Parameters `{prefix}.norm|wq|wk|wv|wo`.
pub fn attention_block(
    g: &mut Graph,
    store: &ParamStore,
    prefix: &str,
    x: Var,
    seq_len: usize,
    heads: usize,
    causal: bool,
) -> Result<Var> {
    let gain = g.param(store, &format!("{prefix}.norm"))?;
    let h = g.rmsnorm(x, gain, RMSNORM_EPS)?;
    let wq = g.param(store, &format!("{prefix}.wq"))?;
    let wk = g.param(store, &format!("{prefix}.wk"))?;
    let wv = g.param(store, &format!("{prefix}.wv"))?;
    let wo = g.param(store, &format!("{prefix}.wo"))?;
    let q = g.matmul(h, wq)?;
    let k = g.matmul(h, wk)?;
    let v = g.matmul(h, wv)?;
    let a = g.attention(q, k, v, seq_len, heads, causal)?;
    let o = g.matmul(a, wo)?;
    g.add(x, o)
}

pub fn init_attention(
    store: &mut ParamStore,
    prefix: &str,
    d: usize,
    rng: &mut impl Rng,
) -> Result<()> {
    let std = 1.0 / (d as f64).sqrt();
    store.insert(format!("{prefix}.norm"), Tensor::full(&[d], 1.0))?;
    for name in ["wq", "wk", "wv", "wo"] {
        store.insert_normal(format!("{prefix}.{name}"), &[d, d], std, rng)?;
    }
    Ok(())
}

/// Weights of one attention sublayer held outside a graph.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionWeights {
    pub norm: Tensor,
    pub wq: Tensor,
    pub wk: Tensor,
    pub wv: Tensor,
    pub wo: Tensor,
}

impl AttentionWeights {
    pub fn width(&self) -> usize {
        self.norm.len()
    }

    pub fn tensors(&self) -> [&Tensor; 5] {
        [&self.norm, &self.wq, &self.wk, &self.wv, &self.wo]
    }

    /// Copies the weights into `store` under the [`attention_block`] names.
    pub fn export(&self, store: &mut ParamStore, prefix: &str) -> Result<()> {
        for (name, t) in ["norm", "wq", "wk", "wv", "wo"].iter().zip(self.tensors()) {
            store.insert(format!("{prefix}.{name}"), t.clone())?;
        }
        Ok(())
    }
}

/// Forward-only twin of [`attention_block`] for a single `T × d` sequence,
/// using the portable matmul.
pub fn attention_block_forward(
    x: &Tensor,
    w: &AttentionWeights,
    heads: usize,
    causal: bool,
) -> Result<Tensor> {
    let (t, d) = x.as_matrix_dims()?;
    if t == 0 {
        bail!(Argument, "attention over an empty sequence");
    }
    if heads == 0 || d % heads != 0 {
        bail!(Config, "{heads} heads do not divide width {d}");
    }
    if w.width() != d {
        bail!(Shape, "attention weights of width {} for input width {d}", w.width());
    }
    let mut h = Tensor::zeros(&[t, d]);
    for r in 0..t {
        rmsnorm_row(x.row(r), w.norm.data(), RMSNORM_EPS, h.row_mut(r));
    }
    let q = h.matmul(&w.wq)?;
    let k = h.matmul(&w.wk)?;
    let v = h.matmul(&w.wv)?;
    let (a, _) = attention_core(q.data(), k.data(), v.data(), d, t, heads, causal);
    let o = Tensor::matrix(t, d, a)?.matmul(&w.wo)?;
    let mut out = x.clone().reshape(vec![t, d])?;
    out.add_assign(&o)?;
    Ok(out)
}
