//! The pinned desk-scale reference attack, shared by the acceptance suite,
//! `selftest` and the `desk_attack` example.

use serde::{Deserialize, Serialize};

use crate::corpus::{synth_corpus, tokenize_bytes};
use crate::decoders::{
    eval_topk, train_lookup, train_mlp, train_seq, DecoderModel, EvalReport, MlpDecoderConfig,
    SeqDecoderConfig, TrainConfig,
};
use crate::error::Result;
use crate::moe::{init_model, ModelConfig};
use crate::trace::{generate_dataset, TraceDataset};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReferenceSetup {
    pub victim: ModelConfig,
    pub train_tokens: usize,
    pub heldout_tokens: usize,
    pub train_corpus_seed: u64,
    pub heldout_corpus_seed: u64,
    pub seq_len: usize,
    pub mlp: MlpDecoderConfig,
    pub mlp_train: TrainConfig,
    pub seq: SeqDecoderConfig,
    pub seq_train: TrainConfig,
}

impl Default for ReferenceSetup {
    fn default() -> Self {
        Self {
            victim: ModelConfig::desk(),
            train_tokens: 512 * 1024,
            heldout_tokens: 64 * 1024,
            train_corpus_seed: 1,
            heldout_corpus_seed: 2,
            seq_len: 32,
            mlp: MlpDecoderConfig::default(),
            mlp_train: crate::cli::default_train_config(crate::cli::Arch::Mlp, 1),
            seq: SeqDecoderConfig::default(),
            seq_train: crate::cli::default_train_config(crate::cli::Arch::Seq, 1),
        }
    }
}

/// Held-out top-1 floors (percent) pinned from the committed reference run.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReferenceFloors {
    pub seq_top1: f64,
    pub mlp_top1: f64,
    pub lookup_top1: f64,
    /// Required margin of the sequence decoder over the MLP, in points.
    pub seq_over_mlp: f64,
    /// Required multiple of chance for both trained decoders.
    pub chance_multiple: f64,
}

pub const REFERENCE_FLOORS: ReferenceFloors = ReferenceFloors {
    seq_top1: 96.0,
    mlp_top1: 91.0,
    lookup_top1: 90.0,
    seq_over_mlp: 2.0,
    chance_multiple: 20.0,
};

pub fn synth_corpus_id(seed: u64, tokens: usize) -> String {
    format!("synth:{seed}:{tokens}")
}

/// Traces a synthetic corpus of `tokens` bytes through `victim`.
pub fn synth_dataset(victim: &ModelConfig, seed: u64, tokens: usize, seq_len: usize) -> Result<TraceDataset> {
    let model = init_model(victim)?;
    let text = tokenize_bytes(&synth_corpus(seed, tokens)?);
    generate_dataset(&text, &synth_corpus_id(seed, tokens), &model, seq_len, None)
}

/// `(train, heldout)` for `setup`; the held-out corpus uses its own seed.
pub fn reference_datasets(setup: &ReferenceSetup) -> Result<(TraceDataset, TraceDataset)> {
    let train = synth_dataset(&setup.victim, setup.train_corpus_seed, setup.train_tokens, setup.seq_len)?;
    let heldout = synth_dataset(&setup.victim, setup.heldout_corpus_seed, setup.heldout_tokens, setup.seq_len)?;
    Ok((train, heldout))
}

/// Percent of `heldout` positions holding the most frequent training token.
pub fn majority_baseline(train_counts: &[u64], heldout: &TraceDataset) -> f64 {
    let top = train_counts
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.cmp(b.1).then(b.0.cmp(&a.0)))
        .map(|(t, _)| t as u32)
        .unwrap_or(0);
    let hits = heldout
        .records
        .iter()
        .flat_map(|r| r.chunk.tokens.iter())
        .filter(|&&t| t == top)
        .count();
    100.0 * hits as f64 / heldout.num_tokens().max(1) as f64
}

pub fn chance_percent(vocab: usize) -> f64 {
    100.0 / vocab as f64
}

pub struct ReferenceRun {
    pub lookup: DecoderModel,
    pub mlp: DecoderModel,
    pub seq: DecoderModel,
    pub lookup_report: EvalReport,
    pub mlp_report: EvalReport,
    pub seq_report: EvalReport,
}

/// Trains all three decoders on `train` and evaluates them on `heldout`.
pub fn run_reference(setup: &ReferenceSetup, train: &TraceDataset, heldout: &TraceDataset) -> Result<ReferenceRun> {
    let lookup = DecoderModel::Lookup(train_lookup(train)?);
    let mlp = DecoderModel::Mlp(train_mlp(train, &setup.mlp, &setup.mlp_train)?.0);
    let seq = DecoderModel::Seq(train_seq(train, &setup.seq, &setup.seq_train)?.0);
    Ok(ReferenceRun {
        lookup_report: eval_topk(&lookup, heldout)?,
        mlp_report: eval_topk(&mlp, heldout)?,
        seq_report: eval_topk(&seq, heldout)?,
        lookup,
        mlp,
        seq,
    })
}
