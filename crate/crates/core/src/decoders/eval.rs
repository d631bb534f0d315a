use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::DecoderModel;
use crate::error::{bail, Result};
use crate::trace::TraceDataset;

/// The reported k values.
pub const TOP_KS: [usize; 3] = [1, 5, 10];
pub const DEFAULT_BUCKET_WIDTH: f64 = 0.14;
/// Buckets with fewer samples are flagged low-confidence.
pub const LOW_CONFIDENCE_SAMPLES: usize = 50;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub top1: f64,
    pub top5: f64,
    pub top10: f64,
    pub samples: usize,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub buckets: Vec<FreqBucket>,
}

/// Accuracies over positions whose true token falls in one log-count bin.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FreqBucket {
    /// Lower edge of the bin in log10(training count).
    pub log10_lo: f64,
    pub log10_hi: f64,
    pub samples: usize,
    pub top1: f64,
    pub top5: f64,
    pub top10: f64,
    pub low_confidence: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecileAccuracy {
    /// 0 holds the rarest token types, 9 the most frequent.
    pub decile: usize,
    pub token_types: usize,
    pub samples: usize,
    pub top1: f64,
}

fn pct(hits: usize, n: usize) -> f64 {
    if n == 0 {
        0.0
    } else {
        100.0 * hits as f64 / n as f64
    }
}

fn accuracies(ranks: impl Iterator<Item = usize> + Clone) -> ([f64; 3], usize) {
    let n = ranks.clone().count();
    let acc = TOP_KS.map(|k| pct(ranks.clone().filter(|&r| r < k).count(), n));
    (acc, n)
}

impl EvalReport {
    pub(crate) fn from_ranks(ranks: &[usize]) -> Self {
        let ([top1, top5, top10], samples) = accuracies(ranks.iter().copied());
        Self {
            top1,
            top5,
            top10,
            samples,
            buckets: Vec::new(),
        }
    }

    /// `log10_count,top1,top5,top10,samples,low_confidence`, one row per
    /// occupied bin keyed by its centre.
    pub fn buckets_csv(&self) -> String {
        let mut s = String::from("log10_count,top1,top5,top10,samples,low_confidence\n");
        for b in &self.buckets {
            s.push_str(&format!(
                "{:.4},{:.2},{:.2},{:.2},{},{}\n",
                0.5 * (b.log10_lo + b.log10_hi),
                b.top1,
                b.top5,
                b.top10,
                b.samples,
                b.low_confidence
            ));
        }
        s
    }
}

/// Top-1/5/10 accuracy (percent) over every position of `ds`.
pub fn eval_topk(decoder: &DecoderModel, ds: &TraceDataset) -> Result<EvalReport> {
    if ds.is_empty() {
        bail!(Argument, "cannot evaluate on an empty dataset");
    }
    Ok(EvalReport::from_ranks(&decoder.ranks(ds)?))
}

fn log_count(counts: &[u64], tok: u32) -> f64 {
    let c = counts.get(tok as usize).copied().unwrap_or(0).max(1);
    (c as f64).log10()
}

/// Buckets positions by `log10` of their true token's training count in
/// bins of `width`; an absent token counts once.
pub fn freq_bucket_accuracy(
    decoder: &DecoderModel,
    ds: &TraceDataset,
    train_counts: &[u64],
    width: f64,
) -> Result<Vec<FreqBucket>> {
    if width.is_nan() || width <= 0.0 {
        bail!(Argument, "bucket width must be positive");
    }
    let ranks = decoder.ranks(ds)?;
    Ok(bucketize(&ranks, ds, train_counts, width))
}

pub(crate) fn bucketize(
    ranks: &[usize],
    ds: &TraceDataset,
    train_counts: &[u64],
    width: f64,
) -> Vec<FreqBucket> {
    let mut bins: BTreeMap<i64, Vec<usize>> = BTreeMap::new();
    let tokens = ds.records.iter().flat_map(|r| r.chunk.tokens.iter());
    for (&rank, &tok) in ranks.iter().zip(tokens) {
        let bin = (log_count(train_counts, tok) / width + 1e-9).floor() as i64;
        bins.entry(bin).or_default().push(rank);
    }
    bins.into_iter()
        .map(|(bin, r)| {
            let ([top1, top5, top10], samples) = accuracies(r.iter().copied());
            FreqBucket {
                log10_lo: bin as f64 * width,
                log10_hi: (bin + 1) as f64 * width,
                samples,
                top1,
                top5,
                top10,
                low_confidence: samples < LOW_CONFIDENCE_SAMPLES,
            }
        })
        .collect()
}

/// Top-1 by training-frequency decile of token *types*: the distinct tokens
/// of `ds` are ordered by training count (ties by id) and split into ten
/// near-equal groups; each group's accuracy is over all its positions.
pub fn frequency_deciles(
    decoder: &DecoderModel,
    ds: &TraceDataset,
    train_counts: &[u64],
) -> Result<Vec<DecileAccuracy>> {
    let ranks = decoder.ranks(ds)?;
    Ok(deciles(&ranks, ds, train_counts))
}

pub(crate) fn deciles(ranks: &[usize], ds: &TraceDataset, train_counts: &[u64]) -> Vec<DecileAccuracy> {
    let mut per_type: BTreeMap<u32, (usize, usize)> = BTreeMap::new();
    let tokens = ds.records.iter().flat_map(|r| r.chunk.tokens.iter());
    for (&rank, &tok) in ranks.iter().zip(tokens) {
        let e = per_type.entry(tok).or_default();
        e.0 += 1;
        e.1 += usize::from(rank == 0);
    }
    let mut types: Vec<u32> = per_type.keys().copied().collect();
    let count = |t: u32| train_counts.get(t as usize).copied().unwrap_or(0);
    types.sort_by(|&a, &b| count(a).cmp(&count(b)).then(a.cmp(&b)));
    let n = types.len();
    (0..10)
        .filter_map(|d| {
            let group = &types[d * n / 10..(d + 1) * n / 10];
            if group.is_empty() {
                return None;
            }
            let (samples, hits) = group
                .iter()
                .map(|t| per_type[t])
                .fold((0, 0), |a, b| (a.0 + b.0, a.1 + b.1));
            Some(DecileAccuracy {
                decile: d,
                token_types: group.len(),
                samples,
                top1: pct(hits, samples),
            })
        })
        .collect()
}
