#![allow(dead_code)]

use moe_leak::corpus::{source_id, ChunkOrigin, TokenChunk};
use moe_leak::trace::{DatasetManifest, ExpertSet, RoutingTrace, TraceDataset, TraceRecord};
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_set(r: &mut impl Rng, n: usize, k: usize) -> ExpertSet {
    ExpertSet::new(&sample(r, n, k).into_vec(), n).unwrap()
}

/// A structurally valid dataset with random dimensions and contents.
pub fn random_dataset(seed: u64) -> TraceDataset {
    let mut r = rng(seed);
    let layers = r.random_range(1..=5usize);
    let experts = r.random_range(1..=16usize);
    let top_k = r.random_range(1..=experts);
    let seq_len = r.random_range(1..=8usize);
    let vocab = r.random_range(2..=300usize);
    let keep = r.random_range(1..=layers);
    let mut observed: Vec<usize> = sample(&mut r, layers, keep).into_vec();
    observed.sort_unstable();
    let corpus_id = format!("random:{seed}");
    let records = (0..r.random_range(1..=6usize))
        .map(|i| {
            let tokens = (0..seq_len).map(|_| r.random_range(0..vocab as u32)).collect();
            let sets: Vec<Vec<ExpertSet>> = observed
                .iter()
                .map(|_| (0..seq_len).map(|_| random_set(&mut r, experts, top_k)).collect())
                .collect();
            TraceRecord {
                chunk: TokenChunk {
                    tokens,
                    origin: ChunkOrigin {
                        source: source_id(&corpus_id),
                        offset: i * seq_len,
                    },
                },
                trace: RoutingTrace::from_sets(experts, top_k, observed.clone(), &sets).unwrap(),
            }
        })
        .collect::<Vec<_>>();
    TraceDataset {
        manifest: DatasetManifest {
            layers,
            experts,
            top_k,
            seq_len,
            vocab,
            victim_seed: r.random(),
            corpus_id,
            record_count: records.len(),
            observed_layers: observed,
        },
        records,
    }
}

/// Brute-force plug-in entropy in bits of raw counts.
pub fn entropy_bits(counts: &[u64]) -> f64 {
    let n: u64 = counts.iter().sum();
    let mut h = 0.0;
    for &c in counts {
        if c > 0 {
            let p = c as f64 / n as f64;
            h -= p * p.log2();
        }
    }
    h
}
