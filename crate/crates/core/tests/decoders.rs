mod common;

use std::collections::HashMap;

use moe_leak::corpus::{source_id, ChunkOrigin, TokenChunk};
use moe_leak::decoders::{
    decode_checkpoint, encode_checkpoint, eval_topk, freq_bucket_accuracy, frequency_deciles,
    train_lookup, train_mlp, train_seq, Checkpoint, DecoderModel, MlpDecoder, MlpDecoderConfig,
    SeqDecoder, SeqDecoderConfig, Signature, TrainConfig,
};
use moe_leak::experiment::synth_dataset;
use moe_leak::moe::ModelConfig;
use moe_leak::selftest::{gradcheck, tiny_dataset, tiny_mlp_config, tiny_seq_config};
use moe_leak::trace::{DatasetManifest, ExpertSet, RoutingTrace, TraceDataset, TraceRecord};
use moe_leak::{Error, FormatError};
use proptest::prelude::*;
use rand::Rng;

use common::{random_set, rng};

fn quick(epochs: usize, batch_size: usize, lr: f64) -> TrainConfig {
    TrainConfig {
        epochs,
        batch_size,
        lr,
        lr_final_fraction: 0.1,
        seed: 3,
        ..TrainConfig::default()
    }
}

fn small_seq() -> SeqDecoderConfig {
    SeqDecoderConfig {
        layer_width: 8,
        d_model: 16,
        blocks: 1,
        heads: 2,
        ffn_width: 32,
    }
}

/// Tokens drawn independently of uniformly random traces.
fn independent_dataset(records: usize, seed: u64) -> TraceDataset {
    let mut r = rng(seed);
    let (n, k, t, layers, v) = (8, 2, 32, 4, 256);
    let records: Vec<TraceRecord> = (0..records)
        .map(|i| {
            let sets: Vec<Vec<ExpertSet>> = (0..layers).map(|_| (0..t).map(|_| random_set(&mut r, n, k)).collect()).collect();
            TraceRecord {
                chunk: TokenChunk {
                    tokens: (0..t).map(|_| r.random_range(0..v as u32)).collect(),
                    origin: ChunkOrigin {
                        source: source_id("independent"),
                        offset: i * t,
                    },
                },
                trace: RoutingTrace::from_sets(n, k, (0..layers).collect(), &sets).unwrap(),
            }
        })
        .collect();
    TraceDataset {
        manifest: DatasetManifest {
            layers,
            experts: n,
            top_k: k,
            seq_len: t,
            vocab: v,
            victim_seed: 0,
            corpus_id: "independent".into(),
            record_count: records.len(),
            observed_layers: (0..layers).collect(),
        },
        records,
    }
}

fn context_free() -> ModelConfig {
    ModelConfig {
        context_free: true,
        ..ModelConfig::desk()
    }
}

/// MLP logits recomputed with plain loops from the stored parameters.
fn mlp_logits_by_hand(m: &MlpDecoder, trace: &RoutingTrace, t: usize) -> Vec<f64> {
    let n = trace.experts();
    let mut x = vec![0.0; trace.num_layers() * n];
    for l in 0..trace.num_layers() {
        for &e in trace.cell(l, t) {
            x[l * n + e as usize] = 1.0;
        }
    }
    for i in 0..m.config.depth {
        let w = m.params.get(&format!("l{i}.w")).unwrap();
        let b = m.params.get(&format!("l{i}.b")).unwrap();
        let (rows, cols) = (w.shape()[0], w.shape()[1]);
        let mut y = b.data().to_vec();
        for (r, xv) in x.iter().enumerate().take(rows) {
            for (c, yc) in y.iter_mut().enumerate() {
                *yc += xv * w.data()[r * cols + c];
            }
        }
        if i + 1 < m.config.depth {
            for v in &mut y {
                *v /= 1.0 + (-*v).exp();
            }
        }
        x = y;
    }
    x
}

fn topk_by_sort(logits: &[f64], k: usize) -> Vec<u32> {
    let mut idx: Vec<u32> = (0..logits.len() as u32).collect();
    idx.sort_by(|&a, &b| logits[b as usize].partial_cmp(&logits[a as usize]).unwrap().then(a.cmp(&b)));
    idx.truncate(k);
    idx
}

#[test]
fn lookup_matches_brute_force_scan() {
    let train = synth_dataset(&ModelConfig::desk(), 5, 24 * 1024, 32).unwrap();
    let heldout = synth_dataset(&ModelConfig::desk(), 6, 8 * 1024, 32).unwrap();
    let lookup = train_lookup(&train).unwrap();
    let mut votes: HashMap<Vec<u8>, HashMap<u32, u64>> = HashMap::new();
    let mut freq = vec![0u64; 256];
    for r in &train.records {
        for (t, &tok) in r.chunk.tokens.iter().enumerate() {
            let key: Vec<u8> = (0..4).flat_map(|l| r.trace.cell(l, t).to_vec()).collect();
            *votes.entry(key).or_default().entry(tok).or_default() += 1;
            freq[tok as usize] += 1;
        }
    }
    let majority = |v: &HashMap<u32, u64>| {
        let best = *v.values().max().unwrap();
        *v.iter().filter(|(_, &c)| c == best).map(|(t, _)| t).min().unwrap()
    };
    let fallback = (0..256u32).max_by_key(|&t| (freq[t as usize], std::cmp::Reverse(t))).unwrap();
    assert_eq!(lookup.fallback(), fallback);
    let (mut hits, mut total) = (0, 0);
    for r in &heldout.records {
        for (t, &tok) in r.chunk.tokens.iter().enumerate() {
            let key: Vec<u8> = (0..4).flat_map(|l| r.trace.cell(l, t).to_vec()).collect();
            let guess = votes.get(&key).map_or(fallback, majority);
            assert_eq!(lookup.lookup(&r.trace, t).unwrap_or(lookup.fallback()), guess);
            hits += usize::from(guess == tok);
            total += 1;
        }
    }
    let report = eval_topk(&DecoderModel::Lookup(lookup), &heldout).unwrap();
    assert_eq!(report.samples, total);
    assert!((report.top1 - 100.0 * hits as f64 / total as f64).abs() < 1e-9);
}

#[test]
fn lookup_is_perfect_on_injective_training_data() {
    let ds = synth_dataset(&context_free(), 9, 16 * 1024, 32).unwrap();
    let d = DecoderModel::Lookup(train_lookup(&ds).unwrap());
    let r = eval_topk(&d, &ds).unwrap();
    assert_eq!((r.top1, r.top5, r.top10), (100.0, 100.0, 100.0));
    let one = ds.prefix(1);
    assert_eq!(eval_topk(&DecoderModel::Lookup(train_lookup(&one).unwrap()), &one).unwrap().top1, 100.0);
}

#[test]
fn unseen_keys_fall_back_to_frequency_order() {
    let ds = synth_dataset(&ModelConfig::desk(), 9, 4 * 1024, 32).unwrap();
    let lookup = train_lookup(&ds).unwrap();
    let sig = lookup.signature.clone();
    let d = DecoderModel::Lookup(lookup.clone());
    // a cell pattern no key in the table can contain
    let sets = vec![vec![ExpertSet::new(&[6, 7], 8).unwrap(); 32]; 4];
    let odd = RoutingTrace::from_sets(8, 2, sig.observed_layers.clone(), &sets).unwrap();
    if lookup.lookup(&odd, 0).is_none() {
        let c = d.predict_topk(&odd, 10).unwrap();
        assert_eq!(c[0], lookup.frequency_order[..10]);
    }
    let all = d.predict_topk(&ds.records[0].trace, 256).unwrap();
    for row in all {
        let mut s = row.clone();
        s.sort_unstable();
        assert_eq!(s, (0..256).collect::<Vec<u32>>());
    }
    assert!(matches!(d.predict_topk(&odd, 0), Err(Error::Argument(_))));
    assert!(matches!(d.predict_topk(&odd, 257), Err(Error::Argument(_))));
}

#[test]
fn predict_topk_matches_scan_oracle() {
    let ds = tiny_dataset(4).unwrap();
    let m = MlpDecoder::init(&MlpDecoderConfig { depth: 3, hidden: 9 }, Signature::of(&ds), 17).unwrap();
    let d = DecoderModel::Mlp(m.clone());
    for r in &ds.records {
        let got = d.predict_topk(&r.trace, 12).unwrap();
        for (t, row) in got.iter().enumerate() {
            let want = topk_by_sort(&mlp_logits_by_hand(&m, &r.trace, t), 12);
            assert_eq!(row, &want);
            let mut perm = row.clone();
            perm.sort_unstable();
            assert_eq!(perm, (0..12).collect::<Vec<u32>>());
        }
        let five = d.predict_topk(&r.trace, 5).unwrap();
        let one = d.predict_topk(&r.trace, 1).unwrap();
        for t in 0..r.trace.seq_len() {
            assert_eq!(one[t][..], five[t][..1]);
            assert_eq!(five[t][..], got[t][..5]);
        }
    }
}

#[test]
fn independent_tokens_give_chance_accuracy() {
    let ds = independent_dataset(2048, 21);
    let m = MlpDecoder::init(&MlpDecoderConfig::default(), Signature::of(&ds), 1).unwrap();
    let r = eval_topk(&DecoderModel::Mlp(m), &ds).unwrap();
    let n = r.samples as f64;
    for (acc, k) in [(r.top1, 1.0), (r.top5, 5.0), (r.top10, 10.0)] {
        let p = k / 256.0;
        let sd = 100.0 * (p * (1.0 - p) / n).sqrt();
        assert!((acc - 100.0 * p).abs() < 4.0 * sd, "top-{k}: {acc} vs {}", 100.0 * p);
    }
}

#[test]
fn mlp_learns_and_is_deterministic() {
    let ds = synth_dataset(&ModelConfig::desk(), 11, 16 * 1024, 32).unwrap();
    let cfg = MlpDecoderConfig { depth: 3, hidden: 64 };
    let (a, curve) = train_mlp(&ds, &cfg, &quick(2, 128, 3e-3)).unwrap();
    let (b, _) = train_mlp(&ds, &cfg, &quick(2, 128, 3e-3)).unwrap();
    assert_eq!(a, b);
    assert!(curve.epochs[0].probe_loss < curve.initial);
    assert!(curve.epochs.iter().all(|e| e.train_loss.is_finite()));
    let csv = curve.to_csv();
    assert_eq!(csv.lines().next(), Some("epoch,train_loss,probe_loss"));
    assert_eq!(csv.lines().count(), 4);
    let mut other = quick(2, 128, 3e-3);
    other.seed = 4;
    assert_ne!(train_mlp(&ds, &cfg, &other).unwrap().0, a);
}

#[test]
fn mlp_depth_knob_bounds() {
    let ds = tiny_dataset(1).unwrap();
    for depth in 1..=8 {
        let m = MlpDecoder::init(&MlpDecoderConfig { depth, hidden: 4 }, Signature::of(&ds), 0).unwrap();
        assert_eq!(m.params.len(), 2 * depth);
    }
    for depth in [0, 9] {
        let r = MlpDecoder::init(&MlpDecoderConfig { depth, hidden: 4 }, Signature::of(&ds), 0);
        assert!(matches!(r, Err(Error::Config(_))));
    }
}

#[test]
fn mlp_decodes_context_free_victim() {
    let train = synth_dataset(&context_free(), 12, 64 * 1024, 32).unwrap();
    let heldout = synth_dataset(&context_free(), 13, 16 * 1024, 32).unwrap();
    let (m, _) = train_mlp(&train, &MlpDecoderConfig::default(), &quick(3, 256, 2e-3)).unwrap();
    let d = DecoderModel::Mlp(m);
    let r = eval_topk(&d, &heldout).unwrap();
    assert!(r.top1 >= 99.0, "{r:?}");
    let t = eval_topk(&d, &train).unwrap();
    assert!(t.top1 >= 95.0 && t.top1 <= 100.0);
}

#[test]
fn seq_training_reduces_loss_deterministically() {
    let ds = synth_dataset(&ModelConfig::desk(), 14, 8 * 1024, 32).unwrap();
    let (a, curve) = train_seq(&ds, &small_seq(), &quick(2, 8, 3e-3)).unwrap();
    let (b, _) = train_seq(&ds, &small_seq(), &quick(2, 8, 3e-3)).unwrap();
    assert_eq!(a, b);
    assert!(curve.epochs[1].probe_loss < curve.initial);
    let short = synth_dataset(&ModelConfig::desk(), 14, 1024, 16).unwrap();
    let d = DecoderModel::Seq(a);
    assert!(matches!(eval_topk(&d, &short), Err(Error::Config(_))));
    let bad = SeqDecoderConfig { heads: 3, ..small_seq() };
    assert!(matches!(SeqDecoder::init(&bad, Signature::of(&ds), 0), Err(Error::Config(_))));
}

#[test]
fn decoder_losses_pass_gradient_checks() {
    for seed in 0..10 {
        for c in ["mlp_decoder_loss", "seq_decoder_loss"] {
            let err = gradcheck(c, seed).unwrap();
            assert!(err <= 1e-4, "{c} seed {seed}: {err}");
        }
    }
}

#[test]
fn signature_mismatch_is_a_config_error() {
    let ds = tiny_dataset(2).unwrap();
    let m = DecoderModel::Mlp(MlpDecoder::init(&tiny_mlp_config(), Signature::of(&ds), 0).unwrap());
    let other = synth_dataset(&ModelConfig::desk(), 1, 1024, 32).unwrap();
    assert!(matches!(eval_topk(&m, &other), Err(Error::Config(_))));
    let masked = ds.mask_layers(&[1]).unwrap();
    assert!(matches!(eval_topk(&m, &masked), Err(Error::Config(_))));
    let empty = ds.prefix(0);
    assert!(matches!(eval_topk(&m, &empty), Err(Error::Argument(_))));
}

#[test]
fn frequency_buckets_follow_training_counts() {
    let ds = synth_dataset(&ModelConfig::desk(), 15, 8 * 1024, 32).unwrap();
    let d = DecoderModel::Lookup(train_lookup(&ds).unwrap());
    let flat = vec![1000u64; 256];
    let b = freq_bucket_accuracy(&d, &ds, &flat, 0.14).unwrap();
    assert_eq!(b.len(), 1);
    assert!(b[0].log10_lo <= 3.0 && 3.0 < b[0].log10_hi);
    assert_eq!(b[0].samples, ds.num_tokens());
    let mut counts = ds.token_counts();
    counts.iter_mut().for_each(|c| *c = 0);
    let b = freq_bucket_accuracy(&d, &ds, &counts, 0.14).unwrap();
    assert_eq!((b.len(), b[0].log10_lo), (1, 0.0));
    let real = freq_bucket_accuracy(&d, &ds, &ds.token_counts(), 0.14).unwrap();
    assert_eq!(real.iter().map(|x| x.samples).sum::<usize>(), ds.num_tokens());
    assert!(real.iter().all(|x| x.low_confidence == (x.samples < 50)));
    assert!(real.windows(2).all(|w| w[0].log10_hi <= w[1].log10_lo + 1e-12));
    assert!(freq_bucket_accuracy(&d, &ds, &counts, 0.0).is_err());

    let deciles = frequency_deciles(&d, &ds, &ds.token_counts()).unwrap();
    let types = ds.token_counts().iter().filter(|&&c| c > 0).count();
    assert_eq!(deciles.iter().map(|x| x.token_types).sum::<usize>(), types);
    assert_eq!(deciles.iter().map(|x| x.samples).sum::<usize>(), ds.num_tokens());
}

#[test]
fn checkpoints_roundtrip_for_every_architecture() {
    let ds = tiny_dataset(6).unwrap();
    let tc = quick(1, 4, 1e-3);
    let decoders = [
        (DecoderModel::Lookup(train_lookup(&ds).unwrap()), None),
        (DecoderModel::Mlp(train_mlp(&ds, &tiny_mlp_config(), &tc).unwrap().0), Some(tc.clone())),
        (DecoderModel::Seq(train_seq(&ds, &tiny_seq_config(), &tc).unwrap().0), Some(tc.clone())),
    ];
    for (decoder, train) in decoders {
        let ck = Checkpoint {
            decoder,
            train,
            dataset_digest: ds.digest().unwrap(),
            train_token_counts: ds.token_counts(),
        };
        let bytes = encode_checkpoint(&ck).unwrap();
        assert_eq!(bytes, encode_checkpoint(&ck).unwrap());
        assert_eq!(decode_checkpoint(&bytes).unwrap(), ck);
        let r = decode_checkpoint(&bytes[..bytes.len() - 1]);
        assert!(matches!(r, Err(Error::Format(FormatError::Truncated { .. }))));
        let mut flipped = bytes.clone();
        let at = flipped.len() - 1;
        flipped[at] ^= 4;
        assert!(matches!(decode_checkpoint(&flipped), Err(Error::Format(FormatError::DigestMismatch { .. }))));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn reports_are_nested_percentages(seed in 0u64..500) {
        let ds = tiny_dataset(seed).unwrap();
        let m = DecoderModel::Mlp(MlpDecoder::init(&tiny_mlp_config(), Signature::of(&ds), seed).unwrap());
        let l = DecoderModel::Lookup(train_lookup(&ds).unwrap());
        for d in [m, l] {
            let r = eval_topk(&d, &ds).unwrap();
            prop_assert!(0.0 <= r.top1 && r.top1 <= r.top5 && r.top5 <= r.top10 && r.top10 <= 100.0);
        }
    }
}
