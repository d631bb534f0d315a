use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{bail, Result};
use crate::numerics::{adam_step, Graph, OptimizerState, ParamStore, Tensor, Var};
use crate::trace::{TraceDataset, TraceRecord};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    /// Training units per optimizer step: tokens for the MLP, chunks for
    /// the sequence decoder.
    pub batch_size: usize,
    pub lr: f64,
    /// Final learning rate as a fraction of `lr`, reached by linear decay.
    pub lr_final_fraction: f64,
    pub seed: u64,
    /// Fixed gradient shards per batch, reduced in shard order; results do
    /// not depend on the thread count.
    pub shards: usize,
    /// Leading records whose mean loss is tracked before and after each epoch.
    pub probe_records: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 4,
            batch_size: 256,
            lr: 1e-3,
            lr_final_fraction: 1.0,
            seed: 0,
            shards: 4,
            probe_records: 64,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLoss {
    pub epoch: usize,
    /// Mean batch loss during the epoch (nats).
    pub train_loss: f64,
    /// Probe-set loss after the epoch (nats).
    pub probe_loss: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossCurve {
    /// Probe-set loss before the first step.
    pub initial: f64,
    pub epochs: Vec<EpochLoss>,
}

impl LossCurve {
    /// `epoch,train_loss,probe_loss`; epoch 0 has no train loss.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("epoch,train_loss,probe_loss\n");
        s.push_str(&format!("0,,{}\n", self.initial));
        for e in &self.epochs {
            s.push_str(&format!("{},{},{}\n", e.epoch, e.train_loss, e.probe_loss));
        }
        s
    }
}

/// A differentiable decoder over units of a dataset.
pub(crate) trait Network: Sync {
    /// Training units per record: one per token or one per chunk.
    fn units_per_record(&self, seq_len: usize) -> usize;

    /// Logits for `units` (indices into the unit space of `records`) and
    /// the matching target ids.
    fn forward(
        &self,
        g: &mut Graph,
        params: &ParamStore,
        records: &[&TraceRecord],
        units: &[usize],
    ) -> Result<(Var, Vec<usize>)>;
}

pub(crate) fn batch_loss<N: Network>(
    net: &N,
    g: &mut Graph,
    params: &ParamStore,
    records: &[&TraceRecord],
    units: &[usize],
) -> Result<Var> {
    let (logits, targets) = net.forward(g, params, records, units)?;
    let mask = vec![true; targets.len()];
    g.cross_entropy(logits, &targets, &mask)
}

fn mean_loss<N: Network>(
    net: &N,
    params: &ParamStore,
    records: &[&TraceRecord],
    units: &[usize],
) -> Result<f64> {
    let mut g = Graph::new();
    let l = batch_loss(net, &mut g, params, records, units)?;
    Ok(g.value(l).item())
}

/// Mean loss and gradient (weighted by shard size) for one batch.
fn sharded_step<N: Network>(
    net: &N,
    params: &ParamStore,
    records: &[&TraceRecord],
    units: &[usize],
    shards: usize,
) -> Result<(f64, Vec<(String, Tensor)>)> {
    let size = units.len().div_ceil(shards.max(1));
    let total = units.len() as f64;
    let parts: Vec<(f64, Vec<(String, Tensor)>)> = units
        .par_chunks(size)
        .map(|part| -> Result<_> {
            let mut g = Graph::new();
            let l = batch_loss(net, &mut g, params, records, part)?;
            let w = part.len() as f64 / total;
            let grads = g.backward(l);
            let named = grads
                .param_grads()
                .into_iter()
                .map(|(n, t)| (n.to_string(), t.clone()))
                .collect();
            Ok((w * g.value(l).item(), named))
        })
        .collect::<Result<_>>()?;
    let mut loss = 0.0;
    let mut merged: Vec<(String, Tensor)> = Vec::new();
    for (i, (l, named)) in parts.into_iter().enumerate() {
        loss += l;
        let w = units[i * size..].len().min(size) as f64 / total;
        for (name, mut t) in named {
            t.scale_in_place(w);
            match merged.iter_mut().find(|(n, _)| *n == name) {
                Some((_, acc)) => acc.add_assign(&t)?,
                None => merged.push((name, t)),
            }
        }
    }
    Ok((loss, merged))
}

pub(crate) fn fit<N: Network>(
    net: &N,
    params: &mut ParamStore,
    ds: &TraceDataset,
    cfg: &TrainConfig,
) -> Result<LossCurve> {
    if ds.is_empty() {
        bail!(Argument, "training needs at least one record");
    }
    if cfg.batch_size == 0 || cfg.shards == 0 {
        bail!(Argument, "batch size and shard count must be positive");
    }
    if cfg.lr.is_nan() || cfg.lr <= 0.0 || !(0.0..=1.0).contains(&cfg.lr_final_fraction) {
        bail!(Argument, "invalid learning-rate schedule");
    }
    let records: Vec<&TraceRecord> = ds.records.iter().collect();
    let per_record = net.units_per_record(ds.manifest.seq_len);
    let probe: Vec<usize> = (0..cfg.probe_records.clamp(1, ds.len()) * per_record).collect();
    let initial = mean_loss(net, params, &records, &probe)?;
    let mut opt = OptimizerState::new(params, cfg.lr);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5348_5546_464c_4521);
    let mut order: Vec<usize> = (0..ds.len() * per_record).collect();
    let steps_per_epoch = order.len().div_ceil(cfg.batch_size);
    let total_steps = (steps_per_epoch * cfg.epochs).max(1);
    let mut epochs = Vec::with_capacity(cfg.epochs);
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let mut sum = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let done = opt.step_count() as f64 / total_steps as f64;
            opt.lr = cfg.lr * (1.0 - (1.0 - cfg.lr_final_fraction) * done);
            let (loss, grads) = sharded_step(net, params, &records, batch, cfg.shards)?;
            if !loss.is_finite() {
                bail!(Contract, "non-finite training loss at epoch {epoch}");
            }
            sum += loss;
            params.zero_grads();
            for (name, g) in &grads {
                params.accumulate_grad(name, g, 1.0)?;
            }
            adam_step(params, &mut opt)?;
        }
        epochs.push(EpochLoss {
            epoch,
            train_loss: sum / steps_per_epoch as f64,
            probe_loss: mean_loss(net, params, &records, &probe)?,
        });
    }
    Ok(LossCurve { initial, epochs })
}

/// Logits `(B·T) × V` for every position of `records`.
pub(crate) fn forward_logits<N: Network>(
    net: &N,
    params: &ParamStore,
    records: &[&TraceRecord],
) -> Result<Tensor> {
    let seq_len = records.first().map_or(0, |r| r.chunk.tokens.len());
    let units: Vec<usize> = (0..records.len() * net.units_per_record(seq_len)).collect();
    let mut g = Graph::new();
    let (logits, _) = net.forward(&mut g, params, records, &units)?;
    Ok(g.value(logits).clone())
}
