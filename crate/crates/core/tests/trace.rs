mod common;

use moe_leak::corpus::tokenize_bytes;
use moe_leak::moe::{init_model, ModelConfig};
use moe_leak::trace::{
    decode_dataset, decode_multihot, encode_dataset, encode_multihot, generate_dataset, read_dataset,
    write_dataset, ExpertSet, RoutingTrace,
};
use moe_leak::{Error, FormatError};
use proptest::prelude::*;
use rand::Rng;

use common::{random_dataset, random_set, rng};

fn format_err(r: moe_leak::Result<impl std::fmt::Debug>) -> FormatError {
    match r {
        Err(Error::Format(f)) => f,
        other => panic!("expected a format error, got {other:?}"),
    }
}

/// One layer, `cells` positions of a single-expert trace over `n` experts.
fn single_slot_trace(n: usize, cells: usize, seed: u64) -> RoutingTrace {
    let mut r = rng(seed);
    let sets = vec![(0..cells).map(|_| random_set(&mut r, n, 1)).collect::<Vec<_>>()];
    RoutingTrace::from_sets(n, 1, vec![0], &sets).unwrap()
}

#[test]
fn multihot_roundtrip_on_random_sets() {
    let mut r = rng(1);
    for _ in 0..1000 {
        let n = r.random_range(1..=256usize);
        let k = r.random_range(1..=n.min(16));
        let set = random_set(&mut r, n, k);
        let bits = encode_multihot(&set, n).unwrap();
        assert_eq!(bits.len(), n);
        assert_eq!(bits.iter().filter(|&&b| b == 1).count(), k);
        assert!(bits.iter().all(|&b| b <= 1));
        assert_eq!(decode_multihot(&bits).unwrap(), set);
    }
    assert!(ExpertSet::new(&[1, 1], 4).is_err());
    assert!(ExpertSet::new(&[4], 4).is_err());
    assert!(decode_multihot(&[0, 2, 1]).is_err());
}

#[test]
fn replaced_slot_count_is_binomial() {
    // with k = 1 every replacement changes the cell, so the changed count is Bin(N, p)
    let cells = 20_000;
    let trace = single_slot_trace(8, cells, 2);
    for p in [0.1, 0.3, 0.7] {
        let c = trace.corrupt(p, 99).unwrap();
        let changed = (0..cells).filter(|&t| c.cell(0, t) != trace.cell(0, t)).count() as f64;
        let (mean, sd) = (cells as f64 * p, (cells as f64 * p * (1.0 - p)).sqrt());
        assert!((changed - mean).abs() < 4.0 * sd, "p={p}: {changed} vs {mean}±{sd}");
    }
}

#[test]
fn replacements_are_uniform_over_other_experts() {
    let n = 8;
    let cells = 40_000;
    let trace = single_slot_trace(n, cells, 3);
    let c = trace.corrupt(1.0, 5).unwrap();
    // offset of the new expert from the old one is uniform on 1..n
    let mut hist = vec![0usize; n];
    for t in 0..cells {
        let (old, new) = (trace.cell(0, t)[0] as usize, c.cell(0, t)[0] as usize);
        hist[(new + n - old) % n] += 1;
    }
    assert_eq!(hist[0], 0);
    let expect = cells as f64 / (n - 1) as f64;
    let chi2: f64 = hist[1..].iter().map(|&h| (h as f64 - expect).powi(2) / expect).sum();
    // 6 degrees of freedom; 22.5 is the 0.999 quantile
    assert!(chi2 < 22.5, "chi2 {chi2}, {hist:?}");
}

#[test]
fn unchanged_cells_match_no_replacement_probability() {
    let mut r = rng(4);
    let cells = 20_000;
    let sets = vec![(0..cells).map(|_| random_set(&mut r, 8, 2)).collect::<Vec<_>>()];
    let trace = RoutingTrace::from_sets(8, 2, vec![0], &sets).unwrap();
    let p = 0.3;
    let c = trace.corrupt(p, 8).unwrap();
    let same = (0..cells).filter(|&t| c.cell(0, t) == trace.cell(0, t)).count() as f64;
    let q = (1.0 - p) * (1.0 - p);
    let sd = (cells as f64 * q * (1.0 - q)).sqrt();
    assert!((same - cells as f64 * q).abs() < 4.0 * sd);
}

#[test]
fn generated_records_align_with_the_corpus() {
    let model = init_model(&ModelConfig::desk()).unwrap();
    let text = tokenize_bytes(b"Routing traces are a side channel; each chunk has thirty-two bytes, and the tail is dropped.");
    let ds = generate_dataset(&text, "inline", &model, 32, None).unwrap();
    assert_eq!(ds.len(), text.len() / 32);
    assert_eq!(ds.manifest.observed_layers, vec![0, 1, 2, 3]);
    for (i, rec) in ds.records.iter().enumerate() {
        assert_eq!(rec.chunk.tokens, &text[i * 32..(i + 1) * 32]);
        assert_eq!(rec.chunk.origin.offset, i * 32);
        assert_eq!(rec.trace, model.forward_trace(&rec.chunk.tokens).unwrap());
    }
    let sub = generate_dataset(&text, "inline", &model, 32, Some(&[2, 0])).unwrap();
    assert_eq!(sub.manifest.observed_layers, vec![0, 2]);
    assert_eq!(sub, ds.mask_layers(&[0, 2]).unwrap());
    assert!(matches!(generate_dataset(&[], "x", &model, 32, None), Err(Error::Input(_))));
    assert!(matches!(generate_dataset(&text, "x", &model, 33, None), Err(Error::Config(_))));
    assert!(matches!(generate_dataset(&text, "x", &model, 32, Some(&[4])), Err(Error::Argument(_))));
}

#[test]
fn header_errors_are_distinct() {
    let bytes = encode_dataset(&random_dataset(7)).unwrap();
    let mut magic = bytes.clone();
    magic[0] = b'X';
    assert!(matches!(format_err(decode_dataset(&magic)), FormatError::BadMagic { .. }));
    let mut version = bytes.clone();
    version[4] = 2;
    assert!(matches!(format_err(decode_dataset(&version)), FormatError::UnsupportedVersion(2)));
    let mut extra = bytes.clone();
    extra.push(0);
    assert!(matches!(format_err(decode_dataset(&extra)), FormatError::TrailingBytes(1)));
}

#[test]
fn file_roundtrip_leaves_no_partial() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("d.mtrc");
    let ds = random_dataset(9);
    write_dataset(&ds, &path).unwrap();
    assert_eq!(read_dataset(&path).unwrap(), ds);
    assert_eq!(std::fs::read_dir(dir.path()).unwrap().count(), 1);
    assert!(matches!(read_dataset(dir.path().join("missing")), Err(Error::Io { .. })));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn dataset_roundtrip_is_identity(seed in any::<u64>()) {
        let ds = random_dataset(seed);
        let bytes = encode_dataset(&ds).unwrap();
        prop_assert_eq!(decode_dataset(&bytes).unwrap(), ds.clone());
        prop_assert_eq!(&ds.digest().unwrap(), &hex::encode(&bytes[bytes.len() - 32..]));
    }

    #[test]
    fn any_truncation_is_reported(seed in 0u64..1000, frac in 0.0f64..1.0) {
        let bytes = encode_dataset(&random_dataset(seed)).unwrap();
        let cut = (frac * bytes.len() as f64) as usize;
        let is_truncated = matches!(format_err(decode_dataset(&bytes[..cut])), FormatError::Truncated { .. });
        prop_assert!(is_truncated);
    }

    #[test]
    fn payload_flips_fail_the_digest(seed in 0u64..1000, frac in 0.0f64..1.0, bit in 0u8..8) {
        let ds = random_dataset(seed);
        let bytes = encode_dataset(&ds).unwrap();
        let header = 10 + u32::from_le_bytes(bytes[6..10].try_into().unwrap()) as usize;
        let at = header + (frac * (bytes.len() - header) as f64) as usize;
        let mut flipped = bytes.clone();
        flipped[at] ^= 1 << bit;
        let is_digest = matches!(format_err(decode_dataset(&flipped)), FormatError::DigestMismatch { .. });
        prop_assert!(is_digest);
    }

    #[test]
    fn corruption_keeps_cells_valid(seed in any::<u64>(), p in 0.0f64..=1.0) {
        let ds = random_dataset(seed);
        let c = ds.corrupt(p, seed ^ 1).unwrap();
        prop_assert!(c.validate().is_ok());
        prop_assert_eq!(&c, &ds.corrupt(p, seed ^ 1).unwrap());
        prop_assert_eq!(ds.corrupt(0.0, seed).unwrap(), ds.clone());
        for (a, b) in c.records.iter().zip(&ds.records) {
            prop_assert_eq!(&a.chunk, &b.chunk);
        }
    }

    #[test]
    fn corruption_commutes_with_masking(seed in any::<u64>(), p in 0.0f64..=1.0) {
        let ds = random_dataset(seed);
        let keep = vec![*ds.manifest.observed_layers.last().unwrap()];
        let a = ds.corrupt(p, 3).unwrap().mask_layers(&keep).unwrap();
        let b = ds.mask_layers(&keep).unwrap().corrupt(p, 3).unwrap();
        prop_assert_eq!(a, b);
    }
}
