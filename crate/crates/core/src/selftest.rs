//! Self-contained checks behind `moe-leak selftest`.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::decoders::{
    decode_checkpoint, encode_checkpoint, mlp_loss, seq_loss, train_mlp, Checkpoint, DecoderModel,
    MlpDecoder, MlpDecoderConfig, SeqDecoder, SeqDecoderConfig, Signature, TrainConfig,
};
use crate::error::{Error, Result};
use crate::experiment::REFERENCE_FLOORS;
use crate::infolab::{
    entropy_plugin, mi_plugin, validate_reference_tables, CountTable, PairCountTable,
    REFERENCE_ENTROPY_CSV, REFERENCE_MI_CSV,
};
use crate::moe::{init_model, ModelConfig};
use crate::numerics::layers::{attention_block, init_attention, init_linear, linear, swiglu};
use crate::numerics::{finite_diff_check, Graph, ParamStore, Tensor, Var, RMSNORM_EPS};
use crate::trace::{decode_dataset, decode_multihot, encode_dataset, encode_multihot, generate_dataset, ExpertSet, TraceDataset};
use crate::FormatError;

pub const GRADCHECK_EPS: f64 = 1e-4;
pub const GRADCHECK_TOL: f64 = 1e-4;
pub const GRADCHECK_SEEDS: u64 = 10;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

impl Check {
    fn new(name: impl Into<String>, passed: bool, detail: impl Into<String>) -> Self {
        Self {
            name: name.into(),
            passed,
            detail: detail.into(),
        }
    }
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn project(g: &mut Graph, y: Var, seed: u64) -> Var {
    let mut r = rng(seed ^ 0xA5A5);
    let w = Tensor::from_fn(g.value(y).shape(), |_| r.random_range(-1.0..1.0));
    let w = g.input(w);
    let prod = g.mul(y, w).expect("same shape");
    g.sum(prod)
}

/// A small victim and two-chunk dataset sized for finite differences.
pub fn tiny_dataset(seed: u64) -> Result<TraceDataset> {
    let cfg = ModelConfig {
        layers: 2,
        experts: 4,
        top_k: 2,
        d_model: 8,
        d_ff: 8,
        heads: 2,
        vocab: 12,
        max_seq_len: 4,
        seed,
        context_free: false,
    };
    let model = init_model(&cfg)?;
    let mut r = rng(seed);
    let tokens: Vec<u32> = (0..8).map(|_| r.random_range(0..12)).collect();
    generate_dataset(&tokens, "tiny", &model, 4, None)
}

pub fn tiny_mlp_config() -> MlpDecoderConfig {
    MlpDecoderConfig { depth: 3, hidden: 6 }
}

pub fn tiny_seq_config() -> SeqDecoderConfig {
    SeqDecoderConfig {
        layer_width: 3,
        d_model: 4,
        blocks: 1,
        heads: 2,
        ffn_width: 6,
    }
}

/// Worst relative gradient error of one named component at one seed.
pub fn gradcheck(component: &str, seed: u64) -> Result<f64> {
    let mut r = rng(seed);
    let mut p = ParamStore::new();
    match component {
        "rmsnorm" => {
            p.insert_normal("gain", &[5], 1.0, &mut r)?;
            p.insert_normal("x", &[3, 5], 1.0, &mut r)?;
            finite_diff_check(&p, GRADCHECK_EPS, |g, p| {
                let x = g.param(p, "x")?;
                let gain = g.param(p, "gain")?;
                let y = g.rmsnorm(x, gain, RMSNORM_EPS)?;
                Ok(project(g, y, seed))
            })
        }
        "softmax_cross_entropy" => {
            p.insert_normal("logits", &[4, 7], 2.0, &mut r)?;
            let targets: Vec<usize> = (0..4).map(|_| r.random_range(0..7)).collect();
            finite_diff_check(&p, GRADCHECK_EPS, |g, p| {
                let l = g.param(p, "logits")?;
                g.cross_entropy(l, &targets, &[true; 4])
            })
        }
        "swiglu_expert" => {
            p.insert_normal("e.w1", &[4, 6], 0.5, &mut r)?;
            p.insert_normal("e.w3", &[4, 6], 0.5, &mut r)?;
            p.insert_normal("e.w2", &[6, 4], 0.5, &mut r)?;
            p.insert_normal("h", &[3, 4], 1.0, &mut r)?;
            finite_diff_check(&p, GRADCHECK_EPS, |g, p| {
                let h = g.param(p, "h")?;
                let y = swiglu(g, p, "e", h)?;
                Ok(project(g, y, seed))
            })
        }
        "attention_block" => {
            init_attention(&mut p, "att", 4, &mut r)?;
            init_linear(&mut p, "in", 3, 4, &mut r)?;
            p.insert_normal("x", &[6, 3], 1.0, &mut r)?;
            finite_diff_check(&p, GRADCHECK_EPS, |g, p| {
                let x = g.param(p, "x")?;
                let x = linear(g, p, "in", x)?;
                let y = attention_block(g, p, "att", x, 3, 2, seed.is_multiple_of(2))?;
                Ok(project(g, y, seed))
            })
        }
        "mlp_decoder_loss" => {
            let ds = tiny_dataset(seed)?;
            let cfg = tiny_mlp_config();
            let params = MlpDecoder::init(&cfg, Signature::of(&ds), seed)?.params;
            finite_diff_check(&params, GRADCHECK_EPS, |g, p| mlp_loss(g, p, &cfg, &ds))
        }
        "seq_decoder_loss" => {
            let ds = tiny_dataset(seed)?;
            let cfg = tiny_seq_config();
            let params = SeqDecoder::init(&cfg, Signature::of(&ds), seed)?.params;
            finite_diff_check(&params, GRADCHECK_EPS, |g, p| seq_loss(g, p, &cfg, &ds))
        }
        other => Err(Error::Argument(format!("unknown gradcheck component {other:?}"))),
    }
}

pub const GRADCHECK_COMPONENTS: [&str; 6] = [
    "rmsnorm",
    "softmax_cross_entropy",
    "swiglu_expert",
    "attention_block",
    "mlp_decoder_loss",
    "seq_decoder_loss",
];

pub fn gradient_checks() -> Vec<Check> {
    GRADCHECK_COMPONENTS
        .iter()
        .map(|&c| {
            let worst = (0..GRADCHECK_SEEDS).map(|s| gradcheck(c, s)).try_fold(0.0f64, |a, e| e.map(|e| a.max(e)));
            match worst {
                Ok(w) => Check::new(format!("gradcheck_{c}"), w <= GRADCHECK_TOL, format!("max rel err {w:.2e} over {GRADCHECK_SEEDS} seeds")),
                Err(e) => Check::new(format!("gradcheck_{c}"), false, e.to_string()),
            }
        })
        .collect()
}

fn direct_entropy(counts: &[u64]) -> f64 {
    let n: u64 = counts.iter().sum();
    counts
        .iter()
        .filter(|&&c| c > 0)
        .map(|&c| {
            let p = c as f64 / n as f64;
            -p * p.log2()
        })
        .sum()
}

pub fn estimator_checks() -> Vec<Check> {
    let mut r = rng(0x1AB);
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let (na, nb) = (r.random_range(1..5usize), r.random_range(1..5usize));
        let mut joint = vec![0u64; na * nb];
        let mut table = PairCountTable::new();
        for (i, c) in joint.iter_mut().enumerate() {
            *c = r.random_range(0..6);
            if *c > 0 {
                table.add(i / nb, i % nb, *c);
            }
        }
        if table.total() == 0 {
            table.add(0, 0, 1);
            joint[0] = 1;
        }
        let row: Vec<u64> = (0..na).map(|a| joint[a * nb..(a + 1) * nb].iter().sum()).collect();
        let col: Vec<u64> = (0..nb).map(|b| (0..na).map(|a| joint[a * nb + b]).sum()).collect();
        let mi = direct_entropy(&row) + direct_entropy(&col) - direct_entropy(&joint);
        let h = entropy_plugin(&table.marginals().0).unwrap_or(f64::NAN);
        let m = mi_plugin(&table).unwrap_or(f64::NAN);
        worst = worst.max((h - direct_entropy(&row)).abs()).max((m - mi).abs());
    }
    let mut out = vec![Check::new("estimator_brute_force", worst <= 1e-9, format!("max |diff| {worst:.2e} bits over 100 tables"))];

    let mut self_pair = PairCountTable::new();
    let mut single = CountTable::new();
    for (x, c) in [(0u8, 5u64), (1, 3), (2, 9), (3, 1)] {
        self_pair.add(x, x, c);
        single.add(x, c);
    }
    let (h, m) = (entropy_plugin(&single).unwrap_or(f64::NAN), mi_plugin(&self_pair).unwrap_or(f64::NAN));
    out.push(Check::new("mi_self_equals_entropy", h == m, format!("H {h} MI {m}")));

    let mut indep = PairCountTable::new();
    for (a, b) in [(0u8, 0u8), (0, 1), (1, 0), (1, 1)] {
        indep.add(a, b, 25);
    }
    let m = mi_plugin(&indep).unwrap_or(f64::NAN);
    out.push(Check::new("mi_independent_uniform", m.abs() <= 1e-12, format!("MI {m:.2e} bits")));
    out
}

/// Fixture checks against the bundled tables, or `<dir>/reference_*.csv`.
pub fn fixture_checks(dir: Option<&Path>) -> Vec<Check> {
    let texts = match dir {
        None => Ok((REFERENCE_ENTROPY_CSV.to_string(), REFERENCE_MI_CSV.to_string())),
        Some(d) => std::fs::read_to_string(d.join("reference_entropy_by_layer.csv"))
            .and_then(|e| Ok((e, std::fs::read_to_string(d.join("reference_mutual_information.csv"))?))),
    };
    match texts {
        Ok((e, m)) => validate_reference_tables(&e, &m)
            .into_iter()
            .map(|c| Check::new(c.name, c.passed, c.detail))
            .collect(),
        Err(e) => vec![Check::new("fixtures_readable", false, e.to_string())],
    }
}

fn roundtrip_check() -> Result<Vec<Check>> {
    let mut out = Vec::new();
    let ds = tiny_dataset(3)?;
    let bytes = encode_dataset(&ds)?;
    out.push(Check::new("dataset_roundtrip", decode_dataset(&bytes)? == ds, format!("{} bytes", bytes.len())));
    let truncated = matches!(decode_dataset(&bytes[..bytes.len() - 1]), Err(Error::Format(FormatError::Truncated { .. })));
    let mut flipped = bytes.clone();
    let at = flipped.len() - 33;
    flipped[at] ^= 1;
    let digest = matches!(decode_dataset(&flipped), Err(Error::Format(FormatError::DigestMismatch { .. })));
    out.push(Check::new("dataset_error_kinds", truncated && digest, "truncation and digest mismatch distinguished"));

    let mut r = rng(5);
    let ok = (0..1000).all(|_| {
        let mut idx: Vec<usize> = (0..8).collect();
        for i in 0..2 {
            let j = r.random_range(i..8);
            idx.swap(i, j);
        }
        let set = ExpertSet::new(&idx[..2], 8).expect("distinct");
        let bits = encode_multihot(&set, 8).expect("fits");
        bits.iter().filter(|&&b| b == 1).count() == 2 && decode_multihot(&bits).ok() == Some(set)
    });
    out.push(Check::new("multihot_roundtrip", ok, "1000 random sets"));

    let train = TrainConfig {
        epochs: 1,
        batch_size: 4,
        ..TrainConfig::default()
    };
    let (mlp, _) = train_mlp(&ds, &tiny_mlp_config(), &train)?;
    let ck = Checkpoint {
        decoder: DecoderModel::Mlp(mlp),
        train: Some(train),
        dataset_digest: ds.digest()?,
        train_token_counts: ds.token_counts(),
    };
    out.push(Check::new("checkpoint_roundtrip", decode_checkpoint(&encode_checkpoint(&ck)?)? == ck, "tiny MLP"));
    Ok(out)
}

pub fn roundtrip_checks() -> Vec<Check> {
    roundtrip_check().unwrap_or_else(|e| vec![Check::new("roundtrips", false, e.to_string())])
}

pub fn run_all(fixtures: Option<&Path>) -> Vec<Check> {
    let mut v = gradient_checks();
    v.extend(estimator_checks());
    v.extend(fixture_checks(fixtures));
    v.extend(roundtrip_checks());
    v
}

pub fn reference_floor_lines() -> Vec<String> {
    let f = REFERENCE_FLOORS;
    vec![
        "desk reference floors (held-out top-1):".into(),
        format!("  sequence decoder >= {:.2}%", f.seq_top1),
        format!("  MLP decoder      >= {:.2}%", f.mlp_top1),
        format!("  lookup baseline  >= {:.2}%", f.lookup_top1),
        format!("  sequence - MLP   >= {:.2} points; both >= {}x chance", f.seq_over_mlp, f.chance_multiple),
    ]
}
