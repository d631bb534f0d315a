use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};

use super::Signature;
use crate::error::{bail, Result};
use crate::trace::{RoutingTrace, TraceDataset};

/// Memorizes the majority token for every exact all-layer trace key.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LookupDecoder {
    pub signature: Signature,
    /// Canonical key (sorted cells of every observed layer, concatenated) →
    /// majority training token.
    pub table: BTreeMap<Vec<u8>, u32>,
    /// Whole vocabulary ordered by training frequency, ties by lower id.
    pub frequency_order: Vec<u32>,
}

pub fn train_lookup(ds: &TraceDataset) -> Result<LookupDecoder> {
    if ds.is_empty() {
        bail!(Argument, "lookup training needs at least one record");
    }
    let mut votes: HashMap<Vec<u8>, HashMap<u32, u64>> = HashMap::new();
    for r in &ds.records {
        for (t, &tok) in r.chunk.tokens.iter().enumerate() {
            *votes.entry(r.trace.token_key(t)).or_default().entry(tok).or_default() += 1;
        }
    }
    let table = votes
        .into_iter()
        .map(|(key, v)| {
            let (&tok, _) = v
                .iter()
                .max_by(|(ta, ca), (tb, cb)| ca.cmp(cb).then(tb.cmp(ta)))
                .expect("every key has a vote");
            (key, tok)
        })
        .collect();
    Ok(LookupDecoder {
        signature: Signature::of(ds),
        table,
        frequency_order: frequency_order(&ds.token_counts()),
    })
}

pub(crate) fn frequency_order(counts: &[u64]) -> Vec<u32> {
    let mut order: Vec<u32> = (0..counts.len() as u32).collect();
    order.sort_by(|&a, &b| counts[b as usize].cmp(&counts[a as usize]).then(a.cmp(&b)));
    order
}

impl LookupDecoder {
    pub fn fallback(&self) -> u32 {
        self.frequency_order[0]
    }

    pub fn lookup(&self, trace: &RoutingTrace, t: usize) -> Option<u32> {
        self.table.get(&trace.token_key(t)).copied()
    }

    /// Mapped token first (if the key was seen), then frequency order.
    pub(crate) fn candidates(&self, trace: &RoutingTrace, t: usize, k: usize) -> Vec<u32> {
        let hit = self.lookup(trace, t);
        let mut out = Vec::with_capacity(k);
        out.extend(hit);
        out.extend(self.frequency_order.iter().copied().filter(|&v| Some(v) != hit).take(k - out.len()));
        out.truncate(k);
        out
    }

    pub(crate) fn rank(&self, trace: &RoutingTrace, t: usize, target: u32) -> usize {
        let hit = self.lookup(trace, t);
        if hit == Some(target) {
            return 0;
        }
        let pos = self
            .frequency_order
            .iter()
            .filter(|&&v| Some(v) != hit)
            .position(|&v| v == target)
            .unwrap_or(self.frequency_order.len());
        pos + usize::from(hit.is_some())
    }
}
