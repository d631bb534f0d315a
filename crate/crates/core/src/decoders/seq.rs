use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::train::{batch_loss, fit, forward_logits, LossCurve, Network, TrainConfig};
use super::{layer_features, Signature};
use crate::error::{bail, Result};
use crate::numerics::layers::{attention_block, init_attention, init_linear, linear};
use crate::numerics::{Graph, ParamStore, Tensor, Var, RMSNORM_EPS};
use crate::trace::{TraceDataset, TraceRecord};

/// Encoder-only decoder: per-layer MLP on each multi-hot input, concatenate,
/// project to `d_model`, add a learned position embedding, run non-causal
/// pre-norm blocks, normalize and apply a linear head.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SeqDecoderConfig {
    /// Width of every per-layer encoder MLP.
    pub layer_width: usize,
    pub d_model: usize,
    pub blocks: usize,
    pub heads: usize,
    /// Hidden width of the feed-forward sublayer.
    pub ffn_width: usize,
}

impl Default for SeqDecoderConfig {
    fn default() -> Self {
        Self {
            layer_width: 32,
            d_model: 128,
            blocks: 4,
            heads: 4,
            ffn_width: 256,
        }
    }
}

impl SeqDecoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.layer_width == 0 || self.d_model == 0 || self.ffn_width == 0 {
            bail!(Config, "sequence decoder widths must be positive");
        }
        if self.blocks == 0 {
            bail!(Config, "sequence decoder needs at least one block");
        }
        if self.heads == 0 || !self.d_model.is_multiple_of(self.heads) {
            bail!(Config, "{} heads do not divide d_model {}", self.heads, self.d_model);
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SeqDecoder {
    pub config: SeqDecoderConfig,
    pub signature: Signature,
    pub params: ParamStore,
}

struct Net<'a> {
    config: &'a SeqDecoderConfig,
    signature: &'a Signature,
}

impl Network for Net<'_> {
    fn units_per_record(&self, _seq_len: usize) -> usize {
        1
    }

    fn forward(
        &self,
        g: &mut Graph,
        params: &ParamStore,
        records: &[&TraceRecord],
        units: &[usize],
    ) -> Result<(Var, Vec<usize>)> {
        let c = self.config;
        let t_len = self.signature.seq_len;
        let batch: Vec<&TraceRecord> = units.iter().map(|&u| records[u]).collect();
        if batch.iter().any(|r| r.trace.seq_len() != t_len) {
            bail!(Config, "chunk length differs from decoder length {t_len}");
        }
        let mut parts = Vec::with_capacity(self.signature.observed_layers.len());
        for l in 0..self.signature.observed_layers.len() {
            let x = g.input(layer_features(&batch, l));
            let h = linear(g, params, &format!("enc{l}.a"), x)?;
            let h = g.silu(h);
            parts.push(linear(g, params, &format!("enc{l}.b"), h)?);
        }
        let joined = g.concat_cols(&parts)?;
        let mut x = linear(g, params, "proj", joined)?;
        let pos = g.param(params, "pos")?;
        let ids: Vec<usize> = (0..batch.len()).flat_map(|_| 0..t_len).collect();
        let pos = g.gather(pos, &ids)?;
        x = g.add(x, pos)?;
        for b in 0..c.blocks {
            x = attention_block(g, params, &format!("blk{b}.att"), x, t_len, c.heads, false)?;
            let gain = g.param(params, &format!("blk{b}.ffn_norm"))?;
            let h = g.rmsnorm(x, gain, RMSNORM_EPS)?;
            let h = linear(g, params, &format!("blk{b}.ffn1"), h)?;
            let h = g.silu(h);
            let h = linear(g, params, &format!("blk{b}.ffn2"), h)?;
            x = g.add(x, h)?;
        }
        let gain = g.param(params, "final_norm")?;
        let x = g.rmsnorm(x, gain, RMSNORM_EPS)?;
        let logits = linear(g, params, "head", x)?;
        let targets = batch
            .iter()
            .flat_map(|r| r.chunk.tokens.iter().map(|&t| t as usize))
            .collect();
        Ok((logits, targets))
    }
}

pub(crate) fn init_seq(config: &SeqDecoderConfig, sig: &Signature, seed: u64) -> Result<ParamStore> {
    config.validate()?;
    let c = config;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut p = ParamStore::new();
    let layers = sig.observed_layers.len();
    for l in 0..layers {
        init_linear(&mut p, &format!("enc{l}.a"), sig.experts, c.layer_width, &mut rng)?;
        init_linear(&mut p, &format!("enc{l}.b"), c.layer_width, c.layer_width, &mut rng)?;
    }
    init_linear(&mut p, "proj", layers * c.layer_width, c.d_model, &mut rng)?;
    p.insert_normal("pos", &[sig.seq_len, c.d_model], 0.1, &mut rng)?;
    for b in 0..c.blocks {
        init_attention(&mut p, &format!("blk{b}.att"), c.d_model, &mut rng)?;
        p.insert(format!("blk{b}.ffn_norm"), Tensor::full(&[c.d_model], 1.0))?;
        init_linear(&mut p, &format!("blk{b}.ffn1"), c.d_model, c.ffn_width, &mut rng)?;
        init_linear(&mut p, &format!("blk{b}.ffn2"), c.ffn_width, c.d_model, &mut rng)?;
    }
    p.insert("final_norm", Tensor::full(&[c.d_model], 1.0))?;
    init_linear(&mut p, "head", c.d_model, sig.vocab, &mut rng)?;
    Ok(p)
}

pub fn train_seq(
    ds: &TraceDataset,
    config: &SeqDecoderConfig,
    train: &TrainConfig,
) -> Result<(SeqDecoder, LossCurve)> {
    let signature = Signature::of(ds);
    let mut params = init_seq(config, &signature, train.seed)?;
    let curve = fit(
        &Net {
            config,
            signature: &signature,
        },
        &mut params,
        ds,
        train,
    )?;
    Ok((
        SeqDecoder {
            config: config.clone(),
            signature,
            params,
        },
        curve,
    ))
}

/// Mean cross-entropy over every position of every chunk in `ds`.
pub fn seq_loss(
    g: &mut Graph,
    params: &ParamStore,
    config: &SeqDecoderConfig,
    ds: &TraceDataset,
) -> Result<Var> {
    let signature = Signature::of(ds);
    let records: Vec<&TraceRecord> = ds.records.iter().collect();
    let units: Vec<usize> = (0..ds.len()).collect();
    batch_loss(
        &Net {
            config,
            signature: &signature,
        },
        g,
        params,
        &records,
        &units,
    )
}

impl SeqDecoder {
    pub fn init(config: &SeqDecoderConfig, signature: Signature, seed: u64) -> Result<Self> {
        let params = init_seq(config, &signature, seed)?;
        Ok(Self {
            config: config.clone(),
            signature,
            params,
        })
    }

    pub(crate) fn logits(&self, records: &[&TraceRecord]) -> Result<Tensor> {
        let net = Net {
            config: &self.config,
            signature: &self.signature,
        };
        forward_logits(&net, &self.params, records)
    }
}
