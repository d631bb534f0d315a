//! The attacker: decoders that map routing traces back to tokens, their
//! training loop and the top-k evaluation harness.

mod checkpoint;
mod eval;
mod lookup;
mod mlp;
mod seq;
mod train;

pub use checkpoint::{
    decode_checkpoint, encode_checkpoint, read_checkpoint, write_checkpoint, Checkpoint,
    CheckpointManifest, CHECKPOINT_MAGIC, CHECKPOINT_VERSION,
};
pub use eval::{
    eval_topk, freq_bucket_accuracy, frequency_deciles, DecileAccuracy, EvalReport, FreqBucket,
    DEFAULT_BUCKET_WIDTH, LOW_CONFIDENCE_SAMPLES,
};
pub use lookup::{train_lookup, LookupDecoder};
pub use mlp::{mlp_loss, train_mlp, MlpDecoder, MlpDecoderConfig};
pub use seq::{seq_loss, train_seq, SeqDecoder, SeqDecoderConfig};
pub use train::{EpochLoss, LossCurve, TrainConfig};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{bail, Result};
use crate::numerics::Tensor;
use crate::trace::{RoutingTrace, TraceDataset, TraceRecord};

/// Trace dimensions a decoder was trained on.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Signature {
    pub experts: usize,
    pub top_k: usize,
    pub seq_len: usize,
    pub vocab: usize,
    pub observed_layers: Vec<usize>,
}

impl Signature {
    pub fn of(ds: &TraceDataset) -> Self {
        let m = &ds.manifest;
        Self {
            experts: m.experts,
            top_k: m.top_k,
            seq_len: m.seq_len,
            vocab: m.vocab,
            observed_layers: m.observed_layers.clone(),
        }
    }

    /// Width of one token's concatenated multi-hot input.
    pub fn input_width(&self) -> usize {
        self.observed_layers.len() * self.experts
    }

    pub fn check(&self, ds: &TraceDataset) -> Result<()> {
        let other = Self::of(ds);
        if *self != other {
            bail!(Config, "decoder expects {self:?}, dataset has {other:?}");
        }
        Ok(())
    }

    fn check_trace(&self, trace: &RoutingTrace) -> Result<()> {
        if trace.experts() != self.experts
            || trace.top_k() != self.top_k
            || trace.layers() != self.observed_layers
        {
            bail!(Config, "trace dimensions do not match decoder {self:?}");
        }
        Ok(())
    }
}

/// Writes the multi-hot vector of every observed layer at position `t` into
/// `row` (length `|observed| · n`).
pub(crate) fn token_features(trace: &RoutingTrace, t: usize, row: &mut [f64]) {
    let n = trace.experts();
    for l in 0..trace.num_layers() {
        for &e in trace.cell(l, t) {
            row[l * n + usize::from(e)] = 1.0;
        }
    }
}

/// `(B·T) × n` multi-hot rows of observed layer `l` over `records`.
pub(crate) fn layer_features(records: &[&TraceRecord], l: usize) -> Tensor {
    let (t_len, n) = (records[0].trace.seq_len(), records[0].trace.experts());
    let mut x = Tensor::zeros(&[records.len() * t_len, n]);
    for (b, r) in records.iter().enumerate() {
        for t in 0..t_len {
            let row = x.row_mut(b * t_len + t);
            for &e in r.trace.cell(l, t) {
                row[usize::from(e)] = 1.0;
            }
        }
    }
    x
}

#[derive(Clone, Debug, PartialEq)]
pub enum DecoderModel {
    Lookup(LookupDecoder),
    Mlp(MlpDecoder),
    Seq(SeqDecoder),
}

/// Records per forward pass during evaluation.
const EVAL_BATCH: usize = 32;

impl DecoderModel {
    pub fn arch(&self) -> &'static str {
        match self {
            DecoderModel::Lookup(_) => "lookup",
            DecoderModel::Mlp(_) => "mlp",
            DecoderModel::Seq(_) => "seq",
        }
    }

    pub fn signature(&self) -> &Signature {
        match self {
            DecoderModel::Lookup(d) => &d.signature,
            DecoderModel::Mlp(d) => &d.signature,
            DecoderModel::Seq(d) => &d.signature,
        }
    }

    /// Logits `(B·T) × V` for a batch of records (learned decoders only).
    fn logits(&self, records: &[&TraceRecord]) -> Result<Option<Tensor>> {
        Ok(match self {
            DecoderModel::Lookup(_) => None,
            DecoderModel::Mlp(d) => Some(d.logits(records)?),
            DecoderModel::Seq(d) => Some(d.logits(records)?),
        })
    }

    /// The `k` best candidates per position, best first; logit ties go to
    /// the lower token id.
    pub fn predict_topk(&self, trace: &RoutingTrace, k: usize) -> Result<Vec<Vec<u32>>> {
        let sig = self.signature();
        if k == 0 || k > sig.vocab {
            bail!(Argument, "k={k} outside 1..={}", sig.vocab);
        }
        sig.check_trace(trace)?;
        if let DecoderModel::Lookup(d) = self {
            return Ok((0..trace.seq_len()).map(|t| d.candidates(trace, t, k)).collect());
        }
        if trace.seq_len() != sig.seq_len {
            bail!(Config, "trace length {} != decoder length {}", trace.seq_len(), sig.seq_len);
        }
        let record = TraceRecord {
            chunk: crate::corpus::TokenChunk {
                tokens: vec![0; trace.seq_len()],
                origin: crate::corpus::ChunkOrigin { source: 0, offset: 0 },
            },
            trace: trace.clone(),
        };
        let logits = self.logits(&[&record])?.expect("learned decoder");
        Ok((0..logits.rows()).map(|r| top_k_of(logits.row(r), k)).collect())
    }

    /// Zero-based rank of the true token at every position, record-major.
    pub fn ranks(&self, ds: &TraceDataset) -> Result<Vec<usize>> {
        self.signature().check(ds)?;
        let per_batch: Vec<Vec<usize>> = ds
            .records
            .par_chunks(EVAL_BATCH)
            .map(|chunk| -> Result<Vec<usize>> {
                let refs: Vec<&TraceRecord> = chunk.iter().collect();
                let mut out = Vec::with_capacity(refs.len() * ds.manifest.seq_len);
                match (self, self.logits(&refs)?) {
                    (DecoderModel::Lookup(d), _) => {
                        for r in chunk {
                            for (t, &tok) in r.chunk.tokens.iter().enumerate() {
                                out.push(d.rank(&r.trace, t, tok));
                            }
                        }
                    }
                    (_, Some(logits)) => {
                        let targets = chunk.iter().flat_map(|r| r.chunk.tokens.iter());
                        for (row, &tok) in targets.enumerate() {
                            out.push(rank_of(logits.row(row), tok as usize));
                        }
                    }
                    (_, None) => unreachable!("learned decoders return logits"),
                }
                Ok(out)
            })
            .collect::<Result<_>>()?;
        Ok(per_batch.concat())
    }
}

/// Candidates strictly ahead of `target`: higher logit, or equal logit and
/// lower id.
pub(crate) fn rank_of(logits: &[f64], target: usize) -> usize {
    let v = logits[target];
    logits
        .iter()
        .enumerate()
        .filter(|&(i, &x)| x > v || (x == v && i < target))
        .count()
}

pub(crate) fn top_k_of(logits: &[f64], k: usize) -> Vec<u32> {
    let mut idx: Vec<u32> = (0..logits.len() as u32).collect();
    let cmp = |a: &u32, b: &u32| {
        logits[*b as usize]
            .total_cmp(&logits[*a as usize])
            .then(a.cmp(b))
    };
    if k < idx.len() {
        idx.select_nth_unstable_by(k, cmp);
        idx.truncate(k);
    }
    idx.sort_by(cmp);
    idx
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ranks_and_topk_agree_with_ties() {
        let logits = [0.5, 2.0, 2.0, -1.0, 0.5];
        assert_eq!(top_k_of(&logits, 3), vec![1, 2, 0]);
        assert_eq!(top_k_of(&logits, 5), vec![1, 2, 0, 4, 3]);
        for (pos, &tok) in top_k_of(&logits, 5).iter().enumerate() {
            assert_eq!(rank_of(&logits, tok as usize), pos);
        }
    }
}
