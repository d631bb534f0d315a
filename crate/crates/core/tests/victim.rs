
use std::collections::HashSet;

use moe_leak::corpus::tokenize_bytes;
use moe_leak::moe::{check_contextfree_injectivity, init_model, ModelConfig, MoEModel};
use moe_leak::numerics::ops::rmsnorm;
use moe_leak::numerics::{Tensor, RMSNORM_EPS};
use moe_leak::Error;
use proptest::prelude::*;
use sha2::{Digest, Sha256};

const GOLDEN_DIGEST: &str = "b630be016c18c05ddddd2b9317dfa33b329ae33f61c782ad2cac780c907b40f8";
const GOLDEN_TRACE: &str = "c8b2df63951d48d89abbc1cc2de2c82f98ddcfcdf30df14ff7663586d33ffc1e";

fn desk() -> MoEModel {
    init_model(&ModelConfig::desk()).unwrap()
}

fn context_free() -> MoEModel {
    init_model(&ModelConfig {
        context_free: true,
        ..ModelConfig::desk()
    })
    .unwrap()
}

fn probe_input(d: usize, rows: usize) -> Tensor {
    Tensor::from_fn(&[rows, d], |i| ((i as f64) * 0.37).sin() * 1.5)
}

fn trace_digest(model: &MoEModel, text: &[u8]) -> String {
    let trace = model.forward_trace(&tokenize_bytes(text)).unwrap();
    hex::encode(Sha256::digest(trace.cells()))
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Router from scratch: full sort by score, then a softmax over the kept scores.
fn brute_route(m: &MoEModel, h: &[f64], layer: usize) -> (Vec<u8>, Vec<f64>) {
    let l = &m.layers[layer];
    let scores: Vec<f64> = (0..m.config.experts)
        .map(|i| dot(l.router_weight.row(i), h) + l.router_bias.data()[i])
        .collect();
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let mut kept = order[..m.config.top_k].to_vec();
    kept.sort_unstable();
    let z: f64 = kept.iter().map(|&i| scores[i].exp()).sum();
    let w = kept.iter().map(|&i| scores[i].exp() / z).collect();
    (kept.iter().map(|&i| i as u8).collect(), w)
}

fn col(t: &Tensor, j: usize) -> Vec<f64> {
    let (rows, cols) = (t.shape()[0], t.shape()[1]);
    (0..rows).map(|r| t.data()[r * cols + j]).collect()
}

fn brute_expert(h: &[f64], w1: &Tensor, w2: &Tensor, w3: &Tensor) -> Vec<f64> {
    let ff = w1.shape()[1];
    let act: Vec<f64> = (0..ff)
        .map(|j| {
            let a = dot(h, &col(w1, j));
            a / (1.0 + (-a).exp()) * dot(h, &col(w3, j))
        })
        .collect();
    (0..w2.shape()[1]).map(|j| dot(&act, &col(w2, j))).collect()
}

#[test]
fn golden_victim() {
    let m = desk();
    assert_eq!(m.digest(), GOLDEN_DIGEST);
    let x = probe_input(32, 3);
    let h = rmsnorm(x.row(0), m.layers[1].mlp_norm.data(), RMSNORM_EPS).unwrap();
    let r = m.route(&h, 1).unwrap();
    assert_eq!(r.experts.as_slice(), &[5, 7]);
    assert!((r.weights[0] - 0.245_678_942_996_305_72).abs() < 1e-12);
    assert!((r.weights[1] - 0.754_321_057_003_694_3).abs() < 1e-12);
    let (y, sets) = m.moe_layer_forward(&x, 2).unwrap();
    let sets: Vec<&[u8]> = sets.iter().map(|s| s.as_slice()).collect();
    assert_eq!(sets, [&[2, 4][..], &[0, 2], &[6, 7]]);
    let want = [-1.595_281_168_311_397, -1.450_941_362_346_915_2, -0.818_547_944_162_133_5, -0.286_106_673_937_105_5];
    for (a, b) in y.row(2).iter().zip(want) {
        assert!((a - b).abs() < 1e-12, "{a} vs {b}");
    }
    assert_eq!(trace_digest(&m, b"The quick brown fox jumps over."), GOLDEN_TRACE);
}

#[test]
fn moe_layer_matches_scratch_recomputation() {
    let m = desk();
    let x = probe_input(32, 5);
    for layer in 0..4 {
        let (y, sets) = m.moe_layer_forward(&x, layer).unwrap();
        for (t, set) in sets.iter().enumerate() {
            let h = rmsnorm(x.row(t), m.layers[layer].mlp_norm.data(), RMSNORM_EPS).unwrap();
            let (experts, w) = brute_route(&m, &h, layer);
            assert_eq!(set.as_slice(), &experts[..]);
            let mut want = x.row(t).to_vec();
            for (&e, a) in experts.iter().zip(&w) {
                let ex = &m.layers[layer].experts[e as usize];
                for (o, v) in want.iter_mut().zip(brute_expert(&h, &ex.w1, &ex.w2, &ex.w3)) {
                    *o += a * v;
                }
            }
            for (a, b) in y.row(t).iter().zip(&want) {
                assert!((a - b).abs() < 1e-10);
            }
        }
    }
}

#[test]
fn seeds_change_parameters() {
    assert_eq!(desk().digest(), desk().digest());
    assert_ne!(desk().digest(), init_model(&ModelConfig::desk().with_seed(8)).unwrap().digest());
}

#[test]
fn bad_inputs_are_rejected() {
    let m = desk();
    assert!(matches!(m.forward_trace(&[]), Err(Error::Input(_))));
    assert!(matches!(m.forward_trace(&[256]), Err(Error::Input(_))));
    assert!(matches!(m.forward_trace(&[1; 33]), Err(Error::Input(_))));
    assert!(matches!(m.route(&[0.0; 31], 0), Err(Error::Shape(_))));
    assert!(matches!(m.route(&[0.0; 32], 4), Err(Error::Argument(_))));
    let bad = ModelConfig {
        top_k: 9,
        ..ModelConfig::desk()
    };
    assert!(matches!(init_model(&bad), Err(Error::Config(_))));
}

#[test]
fn injectivity_report_matches_recount() {
    let m = context_free();
    for subset in [vec![0usize], vec![1, 3], vec![0, 1, 2, 3]] {
        let report = check_contextfree_injectivity(&m, &subset).unwrap();
        let distinct: HashSet<Vec<u8>> = (0..256u32)
            .map(|t| {
                let tr = m.forward_trace(&[t]).unwrap();
                subset.iter().flat_map(|&l| tr.cell(l, 0).to_vec()).collect()
            })
            .collect();
        assert_eq!(report.distinct, distinct.len());
        assert_eq!(report.collisions, 256 - distinct.len());
        assert_eq!(report.injective, distinct.len() == 256);
    }
    assert!(check_contextfree_injectivity(&m, &[0, 1, 2, 3]).unwrap().injective);
    assert!(check_contextfree_injectivity(&desk(), &[0]).is_err());
}

#[test]
fn manifest_rederives_the_model() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("victim.json");
    desk().write_manifest(&path).unwrap();
    assert_eq!(MoEModel::load_manifest(&path).unwrap().digest(), GOLDEN_DIGEST);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn router_matches_brute_force(h in prop::collection::vec(-3.0f64..3.0, 32), layer in 0usize..4) {
        let m = desk();
        let r = m.route(&h, layer).unwrap();
        let (experts, w) = brute_route(&m, &h, layer);
        prop_assert_eq!(r.experts.as_slice(), &experts[..]);
        prop_assert!((r.weights.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        for (a, b) in r.weights.iter().zip(&w) {
            prop_assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn prefill_is_causal(tokens in prop::collection::vec(0u32..256, 2..=32), cut in 1usize..32) {
        let m = desk();
        let cut = cut.min(tokens.len());
        let full = m.forward_trace(&tokens).unwrap();
        let prefix = m.forward_trace(&tokens[..cut]).unwrap();
        for l in 0..4 {
            for t in 0..cut {
                prop_assert_eq!(full.cell(l, t), prefix.cell(l, t));
            }
        }
    }

    #[test]
    fn context_free_traces_ignore_neighbours(tokens in prop::collection::vec(0u32..256, 1..=32)) {
        let m = context_free();
        let tr = m.forward_trace(&tokens).unwrap();
        for (t, &tok) in tokens.iter().enumerate() {
            let alone = m.forward_trace(&[tok]).unwrap();
            for l in 0..4 {
                prop_assert_eq!(tr.cell(l, t), alone.cell(l, 0));
            }
        }
    }
}
