//! Routing leakage estimates: plug-in entropy and mutual information over
//! empirical expert-set distributions, and combinatorial upper bounds.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use num_bigint::BigUint;
use num_traits::ToPrimitive;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{bail, Error, Result};
use crate::trace::{ExpertSet, TraceDataset};

/// Exact occurrence counts per outcome.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CountTable<K: Ord = ExpertSet> {
    counts: BTreeMap<K, u64>,
    total: u64,
}

impl<K: Ord> Default for CountTable<K> {
    fn default() -> Self {
        Self {
            counts: BTreeMap::new(),
            total: 0,
        }
    }
}

impl<K: Ord> CountTable<K> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, key: K, count: u64) {
        if count == 0 {
            return;
        }
        *self.counts.entry(key).or_default() += count;
        self.total += count;
    }

    pub fn observe(&mut self, key: K) {
        self.add(key, 1);
    }

    pub fn merge(mut self, other: Self) -> Self {
        for (k, c) in other.counts {
            self.add(k, c);
        }
        self
    }

    pub fn total(&self) -> u64 {
        self.total
    }

    pub fn support(&self) -> usize {
        self.counts.len()
    }

    pub fn get(&self, key: &K) -> u64 {
        self.counts.get(key).copied().unwrap_or(0)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&K, u64)> {
        self.counts.iter().map(|(k, &c)| (k, c))
    }
}

impl<K: Ord> FromIterator<K> for CountTable<K> {
    fn from_iter<I: IntoIterator<Item = K>>(iter: I) -> Self {
        let mut t = Self::new();
        for k in iter {
            t.observe(k);
        }
        t
    }
}

/// Joint counts over `(A, B)` pairs.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PairCountTable<A: Ord = ExpertSet, B: Ord = ExpertSet> {
    joint: CountTable<(A, B)>,
}

impl<A: Ord, B: Ord> Default for PairCountTable<A, B> {
    fn default() -> Self {
        Self {
            joint: CountTable::new(),
        }
    }
}

impl<A: Ord + Clone, B: Ord + Clone> PairCountTable<A, B> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, a: A, b: B, count: u64) {
        self.joint.add((a, b), count);
    }

    pub fn observe(&mut self, a: A, b: B) {
        self.add(a, b, 1);
    }

    pub fn merge(self, other: Self) -> Self {
        Self {
            joint: self.joint.merge(other.joint),
        }
    }

    pub fn total(&self) -> u64 {
        self.joint.total()
    }

    pub fn joint(&self) -> &CountTable<(A, B)> {
        &self.joint
    }

    pub fn marginals(&self) -> (CountTable<A>, CountTable<B>) {
        let mut left = CountTable::new();
        let mut right = CountTable::new();
        for ((a, b), c) in self.joint.iter() {
            left.add(a.clone(), c);
            right.add(b.clone(), c);
        }
        (left, right)
    }
}

/// `−Σ p̂ log₂ p̂` over observed outcomes.
pub fn entropy_plugin<K: Ord>(table: &CountTable<K>) -> Result<f64> {
    if table.total() == 0 {
        bail!(Argument, "entropy of an empty count table");
    }
    let n = table.total() as f64;
    Ok(table
        .iter()
        .map(|(_, c)| {
            let p = c as f64 / n;
            -(p * p.log2())
        })
        .sum::<f64>()
        .max(0.0))
}

/// `Σ p̂_ij (log₂ p̂_ij − log₂ p̂_i − log₂ p̂_j)` over observed pairs.
pub fn mi_plugin<A: Ord + Clone, B: Ord + Clone>(table: &PairCountTable<A, B>) -> Result<f64> {
    if table.total() == 0 {
        bail!(Argument, "mutual information of an empty count table");
    }
    let n = table.total() as f64;
    let (left, right) = table.marginals();
    let mi = table
        .joint()
        .iter()
        .map(|((a, b), c)| {
            let p = c as f64 / n;
            let pa = left.get(a) as f64 / n;
            let pb = right.get(b) as f64 / n;
            p * (p.log2() - pa.log2() - pb.log2())
        })
        .sum::<f64>();
    Ok(mi.max(0.0))
}

pub fn binomial(n: u64, k: u64) -> BigUint {
    let k = k.min(n - k);
    (0..k).fold(BigUint::from(1u32), |acc, i| acc * (n - i) / (i + 1))
}

/// `log₂ C(n, k)`: the most entropy one layer's selection can carry.
pub fn selection_entropy_bound(n: usize, k: usize) -> Result<f64> {
    if !(1..=256).contains(&n) || !(1..=n).contains(&k) {
        bail!(Argument, "need 1 <= k <= n <= 256, got n={n} k={k}");
    }
    let c = binomial(n as u64, k as u64);
    let bits = c.bits();
    // shift into f64 range before the log; exact for C below 2^53
    let shift = bits.saturating_sub(53);
    let head = (&c >> shift).to_f64().expect("fits in 53 bits");
    Ok(head.log2() + shift as f64)
}

/// `L · log₂ C(n, k)`, the subadditivity bound on a token's full trace.
pub fn trace_entropy_bound(layers: usize, n: usize, k: usize) -> Result<f64> {
    if layers == 0 {
        bail!(Argument, "layer count must be positive");
    }
    Ok(layers as f64 * selection_entropy_bound(n, k)?)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerProfile {
    pub layer: usize,
    pub entropy_bits: f64,
    pub entropy_per_expert: f64,
    pub support_size: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MiEntry {
    pub layer_i: usize,
    pub layer_j: usize,
    pub mutual_information_bits: f64,
}

/// Records per accumulation shard.
const SHARD: usize = 256;

fn layer_tables(ds: &TraceDataset) -> Vec<CountTable> {
    let layers = ds.manifest.observed_layers.len();
    ds.records
        .par_chunks(SHARD)
        .map(|chunk| {
            let mut tables = vec![CountTable::new(); layers];
            for r in chunk {
                for (l, table) in tables.iter_mut().enumerate() {
                    for t in 0..r.trace.seq_len() {
                        table.observe(r.trace.set(l, t));
                    }
                }
            }
            tables
        })
        .reduce(
            || vec![CountTable::new(); layers],
            |a, b| a.into_iter().zip(b).map(|(x, y)| x.merge(y)).collect(),
        )
}

/// Per observed layer: plug-in entropy over all token positions, entropy per
/// selected expert and support size; plus the sum over layers.
pub fn layer_profile(ds: &TraceDataset) -> Result<(Vec<LayerProfile>, f64)> {
    if ds.is_empty() {
        bail!(Argument, "layer profile of an empty dataset");
    }
    let k = ds.manifest.top_k as f64;
    let rows = layer_tables(ds)
        .iter()
        .zip(&ds.manifest.observed_layers)
        .map(|(table, &layer)| {
            let h = entropy_plugin(table)?;
            Ok(LayerProfile {
                layer,
                entropy_bits: h,
                entropy_per_expert: h / k,
                support_size: table.support(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let total = rows.iter().map(|r| r.entropy_bits).sum();
    Ok((rows, total))
}

/// Plug-in MI for every observed layer pair `i < j`.
pub fn mi_heatmap(ds: &TraceDataset) -> Result<Vec<MiEntry>> {
    let layers = &ds.manifest.observed_layers;
    if layers.len() < 2 {
        bail!(Argument, "MI heatmap needs at least two observed layers");
    }
    if ds.is_empty() {
        bail!(Argument, "MI heatmap of an empty dataset");
    }
    let pairs: Vec<(usize, usize)> = (0..layers.len())
        .flat_map(|i| (i + 1..layers.len()).map(move |j| (i, j)))
        .collect();
    pairs
        .par_iter()
        .map(|&(i, j)| {
            let mut table = PairCountTable::new();
            for r in &ds.records {
                for t in 0..r.trace.seq_len() {
                    table.observe(r.trace.set(i, t), r.trace.set(j, t));
                }
            }
            Ok(MiEntry {
                layer_i: layers[i],
                layer_j: layers[j],
                mutual_information_bits: mi_plugin(&table)?,
            })
        })
        .collect()
}

pub const ENTROPY_HEADER: &str = "layer,entropy_bits,entropy_per_expert,support_size";
pub const MI_HEADER: &str = "layer_i,layer_j,mutual_information_bits";

pub fn entropy_csv(rows: &[LayerProfile]) -> String {
    let mut s = format!("{ENTROPY_HEADER}\n");
    for r in rows {
        writeln!(s, "{},{},{},{}", r.layer, r.entropy_bits, r.entropy_per_expert, r.support_size)
            .expect("string write");
    }
    s
}

pub fn mi_csv(rows: &[MiEntry]) -> String {
    let mut s = format!("{MI_HEADER}\n");
    for r in rows {
        writeln!(s, "{},{},{}", r.layer_i, r.layer_j, r.mutual_information_bits).expect("string write");
    }
    s
}

fn csv_rows<'a>(text: &'a str, header: &str) -> Result<impl Iterator<Item = (usize, Vec<&'a str>)>> {
    let mut lines = text.lines().map(str::trim).filter(|l| !l.is_empty());
    match lines.next() {
        Some(h) if h == header => {}
        other => bail!(Input, "expected header {header:?}, found {other:?}"),
    }
    Ok(lines.enumerate().map(|(i, l)| (i + 2, l.split(',').collect())))
}

fn field<T: std::str::FromStr>(line: usize, cols: &[&str], i: usize) -> Result<T> {
    cols.get(i)
        .and_then(|v| v.trim().parse().ok())
        .ok_or_else(|| Error::Input(format!("line {line}: bad column {i} in {cols:?}")))
}

pub fn parse_entropy_csv(text: &str) -> Result<Vec<LayerProfile>> {
    csv_rows(text, ENTROPY_HEADER)?
        .map(|(line, cols)| {
            if cols.len() != 4 {
                bail!(Input, "line {line}: expected 4 columns");
            }
            Ok(LayerProfile {
                layer: field(line, &cols, 0)?,
                entropy_bits: field(line, &cols, 1)?,
                entropy_per_expert: field(line, &cols, 2)?,
                support_size: field(line, &cols, 3)?,
            })
        })
        .collect()
}

pub fn parse_mi_csv(text: &str) -> Result<Vec<MiEntry>> {
    csv_rows(text, MI_HEADER)?
        .map(|(line, cols)| {
            if cols.len() != 3 {
                bail!(Input, "line {line}: expected 3 columns");
            }
            Ok(MiEntry {
                layer_i: field(line, &cols, 0)?,
                layer_j: field(line, &cols, 1)?,
                mutual_information_bits: field(line, &cols, 2)?,
            })
        })
        .collect()
}

/// Per-layer entropy profile of the reference 24-layer, 32-expert, top-4 router.
pub const REFERENCE_ENTROPY_CSV: &str = include_str!("../fixtures/reference_entropy_by_layer.csv");
/// Pairwise layer MI of the same router.
pub const REFERENCE_MI_CSV: &str = include_str!("../fixtures/reference_mutual_information.csv");

/// The reference router's dimensions.
pub const REFERENCE_LAYERS: usize = 24;
pub const REFERENCE_EXPERTS: usize = 32;
pub const REFERENCE_TOP_K: usize = 4;
/// Stated total of the per-layer entropies, in bits, and the allowed gap.
pub const REFERENCE_ENTROPY_SUM: f64 = 206.0;
pub const REFERENCE_ENTROPY_SUM_TOL: f64 = 0.5;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct FixtureCheck {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

/// Consistency checks between the per-layer entropy table and the pairwise
/// MI table of the reference router.
pub fn validate_reference_tables(entropy_csv: &str, mi_csv: &str) -> Vec<FixtureCheck> {
    let mut out = Vec::new();
    let mut check = |name, passed, detail: String| out.push(FixtureCheck { name, passed, detail });
    let entropy = match parse_entropy_csv(entropy_csv) {
        Ok(e) => e,
        Err(e) => {
            check("entropy_fixture_parses", false, e.to_string());
            return out;
        }
    };
    let layers_ok = entropy.len() == REFERENCE_LAYERS
        && entropy.iter().enumerate().all(|(i, r)| r.layer == i);
    check(
        "entropy_fixture_layers",
        layers_ok,
        format!("{} rows", entropy.len()),
    );
    let sum: f64 = entropy.iter().map(|r| r.entropy_bits).sum();
    check(
        "entropy_sum",
        (sum - REFERENCE_ENTROPY_SUM).abs() <= REFERENCE_ENTROPY_SUM_TOL,
        format!("sum {sum:.3} vs stated {REFERENCE_ENTROPY_SUM} bits"),
    );
    let bound = selection_entropy_bound(REFERENCE_EXPERTS, REFERENCE_TOP_K).expect("valid bound");
    let worst = entropy.iter().map(|r| r.entropy_bits).fold(f64::MIN, f64::max);
    check(
        "entropy_below_selection_bound",
        entropy.iter().all(|r| r.entropy_bits >= 0.0 && r.entropy_bits <= bound),
        format!("max {worst:.4} <= {bound:.4}"),
    );
    let per_expert = entropy
        .iter()
        .map(|r| (r.entropy_per_expert - r.entropy_bits / REFERENCE_TOP_K as f64).abs())
        .fold(0.0, f64::max);
    check(
        "entropy_per_expert",
        per_expert <= 1e-3,
        format!("max |h/k - h_per_expert| = {per_expert:.2e}"),
    );
    let support = entropy
        .iter()
        .all(|r| r.support_size >= 1 && r.entropy_bits <= (r.support_size as f64).log2() + 1e-9);
    check(
        "entropy_below_log_support",
        support,
        "entropy <= log2(support) per layer".into(),
    );

    let mi = match parse_mi_csv(mi_csv) {
        Ok(m) => m,
        Err(e) => {
            check("mi_fixture_parses", false, e.to_string());
            return out;
        }
    };
    let expected = REFERENCE_LAYERS * (REFERENCE_LAYERS - 1) / 2;
    let mut pairs: Vec<(usize, usize)> = mi.iter().map(|m| (m.layer_i, m.layer_j)).collect();
    pairs.sort_unstable();
    pairs.dedup();
    check(
        "mi_fixture_pairs",
        mi.len() == expected
            && pairs.len() == expected
            && mi.iter().all(|m| m.layer_i < m.layer_j && m.layer_j < REFERENCE_LAYERS),
        format!("{} rows, {} distinct pairs", mi.len(), pairs.len()),
    );
    let h = |l: usize| entropy.get(l).map_or(f64::NAN, |r| r.entropy_bits);
    let violations: Vec<String> = mi
        .iter()
        .filter(|m| {
            let v = m.mutual_information_bits;
            !(v >= 0.0 && v <= h(m.layer_i).min(h(m.layer_j)) + 0.01)
        })
        .map(|m| format!("({},{})", m.layer_i, m.layer_j))
        .collect();
    check(
        "mi_within_entropy",
        violations.is_empty(),
        if violations.is_empty() {
            "0 <= MI(i,j) <= min(H_i, H_j) + 0.01 for every pair".into()
        } else {
            format!("violations at {}", violations.join(" "))
        },
    );
    out
}
