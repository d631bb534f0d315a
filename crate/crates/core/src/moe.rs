//! The victim: a seeded, randomly initialized MoE transformer whose prefill
//! pass emits a routing trace.
//!
//! Each block runs a causal pre-norm attention sublayer followed by the MoE
//! sublayer: `h = rmsnorm(x)`, `s = W_r h + b`, `I = top_k(s)`,
//! `α = softmax(s_I)`, `y = Σ α_i e_i(h)` with SwiGLU experts, and the
//! residual update `x + y`.

use std::collections::HashSet;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{bail, Error, Result};
use crate::numerics::layers::{attention_block_forward, AttentionWeights};
use crate::numerics::ops::{rmsnorm_row, softmax, swiglu_expert, topk_indices};
use crate::numerics::{Tensor, RMSNORM_EPS};
use crate::trace::{ExpertSet, RoutingTrace, MAX_EXPERTS};

/// Scale of the learned absolute positional embeddings relative to the
/// unit-variance token embeddings.
pub const POSITION_STD: f64 = 0.5;
/// Standard deviation of the router bias.
pub const ROUTER_BIAS_STD: f64 = 0.1;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub layers: usize,
    pub experts: usize,
    pub top_k: usize,
    pub d_model: usize,
    pub d_ff: usize,
    pub heads: usize,
    pub vocab: usize,
    pub max_seq_len: usize,
    pub seed: u64,
    /// Diagnostic mode: no attention sublayers and no positional embeddings,
    /// so each token's trace depends on the token id alone.
    #[serde(default)]
    pub context_free: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl ModelConfig {
    /// The desk-scale reference victim.
    pub fn desk() -> Self {
        Self {
            layers: 4,
            experts: 8,
            top_k: 2,
            d_model: 32,
            d_ff: 64,
            heads: 4,
            vocab: 256,
            max_seq_len: 32,
            seed: 7,
            context_free: false,
        }
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("layers", self.layers),
            ("experts", self.experts),
            ("top_k", self.top_k),
            ("d_model", self.d_model),
            ("d_ff", self.d_ff),
            ("heads", self.heads),
            ("vocab", self.vocab),
            ("max_seq_len", self.max_seq_len),
        ];
        for (name, v) in dims {
            if v == 0 {
                bail!(Config, "{name} must be positive");
            }
        }
        if self.top_k > self.experts {
            bail!(Config, "top_k {} exceeds experts {}", self.top_k, self.experts);
        }
        if self.experts > MAX_EXPERTS {
            bail!(Config, "at most {MAX_EXPERTS} experts per layer");
        }
        if !self.d_model.is_multiple_of(self.heads) {
            bail!(Config, "{} heads do not divide d_model {}", self.heads, self.d_model);
        }
        if self.vocab > u32::MAX as usize {
            bail!(Config, "vocabulary too large");
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Expert {
    /// `d × d_ff` gate projection.
    pub w1: Tensor,
    /// `d_ff × d` output projection.
    pub w2: Tensor,
    /// `d × d_ff` up projection.
    pub w3: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MoeLayer {
    pub attention: AttentionWeights,
    pub mlp_norm: Tensor,
    /// `n × d`; row `i` scores expert `i`.
    pub router_weight: Tensor,
    pub router_bias: Tensor,
    pub experts: Vec<Expert>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MoEModel {
    pub config: ModelConfig,
    pub token_embedding: Tensor,
    pub position_embedding: Tensor,
    pub layers: Vec<MoeLayer>,
    pub final_norm: Tensor,
}

/// Router decision for one token at one layer.
#[derive(Clone, Debug, PartialEq)]
pub struct Routing {
    pub experts: ExpertSet,
    /// Mixing weights aligned with `experts` (ascending index order).
    pub weights: Vec<f64>,
}

struct Init {
    rng: ChaCha8Rng,
}

impl Init {
    fn normal(&mut self, shape: &[usize], std: f64) -> Tensor {
        let dist = Normal::new(0.0, std).expect("finite positive std");
        Tensor::from_fn(shape, |_| dist.sample(&mut self.rng))
    }
}

/// Draws every parameter from a seeded scaled normal; the same config
/// always yields bit-identical parameters.
pub fn init_model(config: &ModelConfig) -> Result<MoEModel> {
    config.validate()?;
    let c = config;
    let d = c.d_model;
    let mut init = Init {
        rng: ChaCha8Rng::seed_from_u64(c.seed),
    };
    let proj = 1.0 / (d as f64).sqrt();
    let token_embedding = init.normal(&[c.vocab, d], 1.0);
    let position_embedding = init.normal(&[c.max_seq_len, d], POSITION_STD);
    let mut layers = Vec::with_capacity(c.layers);
    for _ in 0..c.layers {
        let attention = AttentionWeights {
            norm: Tensor::full(&[d], 1.0),
            wq: init.normal(&[d, d], proj),
            wk: init.normal(&[d, d], proj),
            wv: init.normal(&[d, d], proj),
            wo: init.normal(&[d, d], proj),
        };
        let mlp_norm = Tensor::full(&[d], 1.0);
        let router_weight = init.normal(&[c.experts, d], proj);
        let router_bias = init.normal(&[c.experts], ROUTER_BIAS_STD);
        let experts = (0..c.experts)
            .map(|_| Expert {
                w1: init.normal(&[d, c.d_ff], proj),
                w2: init.normal(&[c.d_ff, d], 1.0 / (c.d_ff as f64).sqrt()),
                w3: init.normal(&[d, c.d_ff], proj),
            })
            .collect();
        layers.push(MoeLayer {
            attention,
            mlp_norm,
            router_weight,
            router_bias,
            experts,
        });
    }
    Ok(MoEModel {
        config: c.clone(),
        token_embedding,
        position_embedding,
        layers,
        final_norm: Tensor::full(&[d], 1.0),
    })
}

impl MoEModel {
    /// SHA-256 over the config and every parameter in a fixed order.
    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        h.update(serde_json::to_vec(&self.config).expect("config serializes"));
        let mut feed = |t: &Tensor| h.update(t.to_le_bytes());
        feed(&self.token_embedding);
        feed(&self.position_embedding);
        for layer in &self.layers {
            for t in layer.attention.tensors() {
                feed(t);
            }
            feed(&layer.mlp_norm);
            feed(&layer.router_weight);
            feed(&layer.router_bias);
            for e in &layer.experts {
                feed(&e.w1);
                feed(&e.w2);
                feed(&e.w3);
            }
        }
        feed(&self.final_norm);
        hex::encode(h.finalize())
    }

    /// Router step on an already-normalized MoE input `h`.
    pub fn route(&self, h: &[f64], layer: usize) -> Result<Routing> {
        let Some(l) = self.layers.get(layer) else {
            bail!(Argument, "layer {layer} out of {}", self.layers.len());
        };
        let d = self.config.d_model;
        if h.len() != d {
            bail!(Shape, "router input width {} != {d}", h.len());
        }
        let scores: Vec<f64> = (0..self.config.experts)
            .map(|i| {
                let w = l.router_weight.row(i);
                w.iter().zip(h).map(|(a, b)| a * b).sum::<f64>() + l.router_bias.data()[i]
            })
            .collect();
        let picked = topk_indices(&scores, self.config.top_k)?;
        let selected: Vec<f64> = picked.iter().map(|&i| scores[i]).collect();
        let weights = softmax(&selected)?;
        Ok(Routing {
            experts: ExpertSet::new(&picked, self.config.experts)?,
            weights,
        })
    }

    /// MoE sublayer over a `T × d` residual stream; returns the updated stream
    /// and each row's selection.
    pub fn moe_layer_forward(&self, x: &Tensor, layer: usize) -> Result<(Tensor, Vec<ExpertSet>)> {
        let (t_len, d) = x.as_matrix_dims()?;
        if d != self.config.d_model {
            bail!(Shape, "residual width {d} != {}", self.config.d_model);
        }
        let Some(l) = self.layers.get(layer) else {
            bail!(Argument, "layer {layer} out of {}", self.layers.len());
        };
        let mut out = x.clone().reshape(vec![t_len, d])?;
        let mut sets = Vec::with_capacity(t_len);
        let mut h = vec![0.0; d];
        for t in 0..t_len {
            rmsnorm_row(x.row(t), l.mlp_norm.data(), RMSNORM_EPS, &mut h);
            let routing = self.route(&h, layer)?;
            let row = out.row_mut(t);
            for (e, &alpha) in routing.experts.iter().zip(&routing.weights) {
                let ex = &l.experts[e];
                let y = swiglu_expert(&h, &ex.w1, &ex.w2, &ex.w3)?;
                for (o, v) in row.iter_mut().zip(&y) {
                    *o += alpha * v;
                }
            }
            sets.push(routing.experts);
        }
        Ok((out, sets))
    }

    fn embed(&self, tokens: &[u32]) -> Result<Tensor> {
        let c = &self.config;
        if tokens.len() > c.max_seq_len {
            bail!(Input, "sequence of {} exceeds max length {}", tokens.len(), c.max_seq_len);
        }
        let d = c.d_model;
        let mut x = Tensor::zeros(&[tokens.len(), d]);
        for (t, &tok) in tokens.iter().enumerate() {
            let tok = tok as usize;
            if tok >= c.vocab {
                bail!(Input, "token id {tok} >= vocabulary {}", c.vocab);
            }
            let row = x.row_mut(t);
            row.copy_from_slice(self.token_embedding.row(tok));
            if !c.context_free {
                for (r, p) in row.iter_mut().zip(self.position_embedding.row(t)) {
                    *r += p;
                }
            }
        }
        Ok(x)
    }

    /// Prefill pass over `tokens`, collecting every layer's selections.
    pub fn forward_trace(&self, tokens: &[u32]) -> Result<RoutingTrace> {
        if tokens.is_empty() {
            bail!(Input, "empty token sequence");
        }
        let mut x = self.embed(tokens)?;
        let mut rows = Vec::with_capacity(self.layers.len());
        for (i, layer) in self.layers.iter().enumerate() {
            if !self.config.context_free {
                x = attention_block_forward(&x, &layer.attention, self.config.heads, true)?;
            }
            let (next, sets) = self.moe_layer_forward(&x, i)?;
            x = next;
            rows.push(sets);
        }
        RoutingTrace::from_sets(
            self.config.experts,
            self.config.top_k,
            (0..self.layers.len()).collect(),
            &rows,
        )
    }

    /// Writes the manifest from which this model can be re-derived.
    pub fn write_manifest(&self, path: impl AsRef<Path>) -> Result<()> {
        let m = ModelManifest {
            format_version: MODEL_MANIFEST_VERSION,
            config: self.config.clone(),
            parameter_digest: self.digest(),
        };
        let path = path.as_ref();
        std::fs::write(path, serde_json::to_vec_pretty(&m)?).map_err(|e| Error::io(path, e))
    }

    /// Rebuilds a model from its manifest and checks the parameter digest.
    pub fn load_manifest(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        let m: ModelManifest = serde_json::from_slice(&bytes)?;
        if m.format_version != MODEL_MANIFEST_VERSION {
            return Err(crate::FormatError::UnsupportedVersion(m.format_version as u16).into());
        }
        let model = init_model(&m.config)?;
        let digest = model.digest();
        if digest != m.parameter_digest {
            return Err(crate::FormatError::DigestMismatch {
                stored: m.parameter_digest,
                computed: digest,
            }
            .into());
        }
        Ok(model)
    }
}

pub const MODEL_MANIFEST_VERSION: u32 = 1;

/// Victim checkpoint: parameters are never stored, only re-derived.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelManifest {
    pub format_version: u32,
    pub config: ModelConfig,
    pub parameter_digest: String,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct InjectivityReport {
    pub injective: bool,
    pub distinct: usize,
    pub collisions: usize,
}

/// Maps every single token through a context-free model and counts distinct
/// traces restricted to `layer_subset`.
pub fn check_contextfree_injectivity(
    model: &MoEModel,
    layer_subset: &[usize],
) -> Result<InjectivityReport> {
    if !model.config.context_free {
        bail!(Argument, "injectivity check needs a context-free model");
    }
    for &l in layer_subset {
        if l >= model.config.layers {
            bail!(Argument, "layer {l} out of {}", model.config.layers);
        }
    }
    let mut seen = HashSet::new();
    for tok in 0..model.config.vocab as u32 {
        let trace = model.forward_trace(&[tok])?;
        let key: Vec<u8> = layer_subset
            .iter()
            .flat_map(|&l| trace.cell(l, 0).to_vec())
            .collect();
        seen.insert(key);
    }
    let vocab = model.config.vocab;
    Ok(InjectivityReport {
        injective: seen.len() == vocab,
        distinct: seen.len(),
        collisions: vocab - seen.len(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> MoEModel {
        init_model(&ModelConfig::desk()).unwrap()
    }

    #[test]
    fn init_is_deterministic() {
        let a = small();
        let b = small();
        assert_eq!(a.digest(), b.digest());
        let c = init_model(&ModelConfig::desk().with_seed(8)).unwrap();
        assert_ne!(a.digest(), c.digest());
    }

    #[test]
    fn config_validation() {
        let mut c = ModelConfig::desk();
        c.top_k = 9;
        assert!(matches!(init_model(&c), Err(Error::Config(_))));
        let mut c = ModelConfig::desk();
        c.heads = 5;
        assert!(init_model(&c).is_err());
    }

    #[test]
    fn constructed_router_selects_basis_expert() {
        let mut cfg = ModelConfig::desk();
        cfg.top_k = 1;
        let mut m = init_model(&cfg).unwrap();
        let d = cfg.d_model;
        let layer = &mut m.layers[0];
        layer.router_weight = Tensor::from_fn(&[8, d], |i| if i / d == i % d { 3.0 } else { 0.0 });
        layer.router_bias = Tensor::zeros(&[8]);
        for j in 0..8 {
            let mut h = vec![0.0; d];
            h[j] = 1.0;
            let r = m.route(&h, 0).unwrap();
            assert_eq!(r.experts.as_slice(), &[j as u8]);
            assert_eq!(r.weights, vec![1.0]);
        }
    }

    #[test]
    fn mixing_weights_sum_to_one() {
        let m = small();
        for s in 0..50 {
            let h: Vec<f64> = (0..32).map(|i| ((i * 31 + s * 7) as f64).sin()).collect();
            for l in 0..4 {
                let r = m.route(&h, l).unwrap();
                assert_eq!(r.experts.len(), 2);
                assert!((r.weights.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn zero_experts_make_identity_sublayer() {
        let mut m = small();
        for layer in &mut m.layers {
            for e in &mut layer.experts {
                e.w2.fill(0.0);
            }
        }
        let x = Tensor::from_fn(&[5, 32], |i| (i as f64 * 0.17).cos());
        for l in 0..4 {
            let (y, sets) = m.moe_layer_forward(&x, l).unwrap();
            assert_eq!(y, x);
            assert!(sets.iter().all(|s| s.len() == 2));
        }
    }

    #[test]
    fn trace_rejects_bad_tokens() {
        let m = small();
        assert!(matches!(m.forward_trace(&[256]), Err(Error::Input(_))));
        assert!(m.forward_trace(&[1; 33]).is_err());
    }

    #[test]
    fn injectivity_requires_context_free() {
        assert!(check_contextfree_injectivity(&small(), &[0]).is_err());
        let mut cfg = ModelConfig::desk();
        cfg.context_free = true;
        let m = init_model(&cfg).unwrap();
        let empty = check_contextfree_injectivity(&m, &[]).unwrap();
        assert!(!empty.injective);
        assert_eq!(empty.collisions, 255);
    }

    #[test]
    fn forced_collision_is_counted() {
        let mut cfg = ModelConfig::desk();
        cfg.context_free = true;
        cfg.vocab = 2;
        let mut m = init_model(&cfg).unwrap();
        let row0 = m.token_embedding.row(0).to_vec();
        m.token_embedding.row_mut(1).copy_from_slice(&row0);
        let r = check_contextfree_injectivity(&m, &[0, 1, 2, 3]).unwrap();
        assert_eq!(r.collisions, 1);
        assert!(!r.injective);
    }
}
