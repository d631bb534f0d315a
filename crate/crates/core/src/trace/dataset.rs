use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::RoutingTrace;
use crate::corpus::{chunk_tokens, source_id, token_counts, TokenChunk};
use crate::error::{bail, Result};
use crate::moe::MoEModel;
use crate::FormatError;

/// Dimensions and provenance shared by every record of a dataset.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetManifest {
    /// Layer count of the victim.
    #[serde(rename = "L")]
    pub layers: usize,
    #[serde(rename = "n")]
    pub experts: usize,
    #[serde(rename = "k")]
    pub top_k: usize,
    #[serde(rename = "T")]
    pub seq_len: usize,
    #[serde(rename = "V")]
    pub vocab: usize,
    pub victim_seed: u64,
    pub corpus_id: String,
    pub record_count: usize,
    /// Observed layer ids; the rest are masked and carry no data.
    pub observed_layers: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TraceRecord {
    pub chunk: TokenChunk,
    pub trace: RoutingTrace,
}

/// Aligned (chunk, trace) pairs; record `i` covers corpus tokens
/// `i·T .. (i+1)·T`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TraceDataset {
    pub manifest: DatasetManifest,
    pub records: Vec<TraceRecord>,
}

impl TraceDataset {
    /// Checks that every record matches the manifest dimensions.
    pub fn validate(&self) -> Result<()> {
        let m = &self.manifest;
        let bad = |msg: String| -> Result<()> { Err(FormatError::Invariant(msg).into()) };
        if m.record_count != self.records.len() {
            return bad(format!(
                "manifest lists {} records, dataset holds {}",
                m.record_count,
                self.records.len()
            ));
        }
        if m.observed_layers.is_empty() || m.observed_layers.iter().any(|&l| l >= m.layers) {
            return bad(format!("observed layers {:?} invalid for L={}", m.observed_layers, m.layers));
        }
        if m.observed_layers.windows(2).any(|w| w[0] >= w[1]) {
            return bad("observed layers not strictly ascending".into());
        }
        for (i, r) in self.records.iter().enumerate() {
            let t = &r.trace;
            if r.chunk.tokens.len() != m.seq_len || t.seq_len() != m.seq_len {
                return bad(format!("record {i}: length mismatch with T={}", m.seq_len));
            }
            if t.experts() != m.experts || t.top_k() != m.top_k || t.layers() != m.observed_layers {
                return bad(format!("record {i}: trace dimensions disagree with manifest"));
            }
            if let Some(&tok) = r.chunk.tokens.iter().find(|&&x| x as usize >= m.vocab) {
                return bad(format!("record {i}: token {tok} >= V={}", m.vocab));
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn num_tokens(&self) -> usize {
        self.records.len() * self.manifest.seq_len
    }

    /// SHA-256 of the dataset's serialized form.
    pub fn digest(&self) -> Result<String> {
        let bytes = super::encode_dataset(self)?;
        Ok(hex::encode(&bytes[bytes.len() - 32..]))
    }

    pub fn token_counts(&self) -> Vec<u64> {
        token_counts(self.records.iter().flat_map(|r| &r.chunk.tokens), self.manifest.vocab)
    }

    /// The first `records` records.
    pub fn prefix(&self, records: usize) -> Self {
        let n = records.min(self.records.len());
        let mut manifest = self.manifest.clone();
        manifest.record_count = n;
        Self {
            manifest,
            records: self.records[..n].to_vec(),
        }
    }

    /// Corrupts every trace; record `i` uses its own derived seed.
    pub fn corrupt(&self, p: f64, seed: u64) -> Result<Self> {
        let records = self
            .records
            .par_iter()
            .enumerate()
            .map(|(i, r)| {
                let s = seed.wrapping_mul(0x2545_F491_4F6C_DD1D).wrapping_add(i as u64);
                Ok(TraceRecord {
                    chunk: r.chunk.clone(),
                    trace: r.trace.corrupt(p, s)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            manifest: self.manifest.clone(),
            records,
        })
    }

    pub fn mask_layers(&self, subset: &[usize]) -> Result<Self> {
        let records = self
            .records
            .iter()
            .map(|r| {
                Ok(TraceRecord {
                    chunk: r.chunk.clone(),
                    trace: r.trace.mask_layers(subset)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let mut manifest = self.manifest.clone();
        let mut keep = subset.to_vec();
        keep.sort_unstable();
        keep.dedup();
        manifest.observed_layers = keep;
        Ok(Self { manifest, records })
    }
}

/// Chunks `tokens` into windows of `seq_len`, traces each chunk through
/// `model` and keeps the `layers` subset (all layers when `None`).
pub fn generate_dataset(
    tokens: &[u32],
    corpus_id: &str,
    model: &MoEModel,
    seq_len: usize,
    layers: Option<&[usize]>,
) -> Result<TraceDataset> {
    if tokens.is_empty() {
        bail!(Input, "empty corpus");
    }
    let cfg = &model.config;
    if seq_len == 0 || seq_len > cfg.max_seq_len {
        bail!(Config, "chunk length {seq_len} outside 1..={}", cfg.max_seq_len);
    }
    let all: Vec<usize> = (0..cfg.layers).collect();
    let observed = match layers {
        Some(l) => {
            if l.is_empty() {
                bail!(Argument, "layer subset must not be empty");
            }
            if let Some(&bad) = l.iter().find(|&&x| x >= cfg.layers) {
                bail!(Argument, "layer {bad} out of {}", cfg.layers);
            }
            let mut l = l.to_vec();
            l.sort_unstable();
            l.dedup();
            l
        }
        None => all.clone(),
    };
    let chunks = chunk_tokens(tokens, seq_len, source_id(corpus_id))?;
    if chunks.is_empty() {
        bail!(Input, "corpus of {} tokens holds no chunk of {seq_len}", tokens.len());
    }
    let records = chunks
        .into_par_iter()
        .map(|chunk| {
            let full = model.forward_trace(&chunk.tokens)?;
            let trace = if observed == all { full } else { full.mask_layers(&observed)? };
            Ok(TraceRecord { chunk, trace })
        })
        .collect::<Result<Vec<_>>>()?;
    let manifest = DatasetManifest {
        layers: cfg.layers,
        experts: cfg.experts,
        top_k: cfg.top_k,
        seq_len,
        vocab: cfg.vocab,
        victim_seed: cfg.seed,
        corpus_id: corpus_id.to_string(),
        record_count: records.len(),
        observed_layers: observed,
    };
    let ds = TraceDataset { manifest, records };
    ds.validate()?;
    Ok(ds)
}
