use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::train::{batch_loss, fit, forward_logits, LossCurve, Network, TrainConfig};
use super::{token_features, Signature};
use crate::error::{bail, Result};
use crate::numerics::layers::{init_linear, linear};
use crate::numerics::{Graph, ParamStore, Tensor, Var};
use crate::trace::{TraceDataset, TraceRecord};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MlpDecoderConfig {
    /// Number of affine layers, SiLU between consecutive ones.
    pub depth: usize,
    pub hidden: usize,
}

impl Default for MlpDecoderConfig {
    fn default() -> Self {
        Self {
            depth: 3,
            hidden: 256,
        }
    }
}

impl MlpDecoderConfig {
    pub const MAX_DEPTH: usize = 8;

    pub fn validate(&self) -> Result<()> {
        if !(1..=Self::MAX_DEPTH).contains(&self.depth) {
            bail!(Config, "MLP depth {} outside 1..={}", self.depth, Self::MAX_DEPTH);
        }
        if self.hidden == 0 {
            bail!(Config, "MLP hidden width must be positive");
        }
        Ok(())
    }

    /// Layer widths from input to logits.
    fn widths(&self, sig: &Signature) -> Vec<usize> {
        let mut w = vec![sig.input_width()];
        w.extend(std::iter::repeat_n(self.hidden, self.depth - 1));
        w.push(sig.vocab);
        w
    }
}

/// Per-token decoder: one token's all-layer multi-hot trace → logits.
#[derive(Clone, Debug, PartialEq)]
pub struct MlpDecoder {
    pub config: MlpDecoderConfig,
    pub signature: Signature,
    pub params: ParamStore,
}

struct Net<'a> {
    config: &'a MlpDecoderConfig,
}

impl Network for Net<'_> {
    fn units_per_record(&self, seq_len: usize) -> usize {
        seq_len
    }

    fn forward(
        &self,
        g: &mut Graph,
        params: &ParamStore,
        records: &[&TraceRecord],
        units: &[usize],
    ) -> Result<(Var, Vec<usize>)> {
        let t_len = records[0].trace.seq_len();
        let width = records[0].trace.num_layers() * records[0].trace.experts();
        let mut x = Tensor::zeros(&[units.len(), width]);
        let mut targets = Vec::with_capacity(units.len());
        for (row, &u) in units.iter().enumerate() {
            let r = records[u / t_len];
            token_features(&r.trace, u % t_len, x.row_mut(row));
            targets.push(r.chunk.tokens[u % t_len] as usize);
        }
        let mut h = g.input(x);
        for i in 0..self.config.depth {
            h = linear(g, params, &format!("l{i}"), h)?;
            if i + 1 < self.config.depth {
                h = g.silu(h);
            }
        }
        Ok((h, targets))
    }
}

pub(crate) fn init_mlp(config: &MlpDecoderConfig, sig: &Signature, seed: u64) -> Result<ParamStore> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut p = ParamStore::new();
    for (i, w) in config.widths(sig).windows(2).enumerate() {
        init_linear(&mut p, &format!("l{i}"), w[0], w[1], &mut rng)?;
    }
    Ok(p)
}

pub fn train_mlp(
    ds: &TraceDataset,
    config: &MlpDecoderConfig,
    train: &TrainConfig,
) -> Result<(MlpDecoder, LossCurve)> {
    let signature = Signature::of(ds);
    let mut params = init_mlp(config, &signature, train.seed)?;
    let curve = fit(&Net { config }, &mut params, ds, train)?;
    Ok((
        MlpDecoder {
            config: config.clone(),
            signature,
            params,
        },
        curve,
    ))
}

/// Mean cross-entropy of `params` over every token of `ds` (for gradient checks).
pub fn mlp_loss(
    g: &mut Graph,
    params: &ParamStore,
    config: &MlpDecoderConfig,
    ds: &TraceDataset,
) -> Result<Var> {
    let records: Vec<&TraceRecord> = ds.records.iter().collect();
    let units: Vec<usize> = (0..ds.num_tokens()).collect();
    batch_loss(&Net { config }, g, params, &records, &units)
}

impl MlpDecoder {
    /// Fresh, untrained parameters for `sig`.
    pub fn init(config: &MlpDecoderConfig, signature: Signature, seed: u64) -> Result<Self> {
        let params = init_mlp(config, &signature, seed)?;
        Ok(Self {
            config: config.clone(),
            signature,
            params,
        })
    }

    pub(crate) fn logits(&self, records: &[&TraceRecord]) -> Result<Tensor> {
        forward_logits(&Net { config: &self.config }, &self.params, records)
    }
}
